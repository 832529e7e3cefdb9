//! Two-phase optimisation: aligner warm-up on the correspondence loss, then
//! end-to-end training on the full objective.

mod adam;
mod batch;
mod gradcheck;

pub use adam::{optimizer_step, AdamConfig, AdamSlot};
pub use batch::{assemble_batch, BatchInputs};
pub use gradcheck::{loss_grad_check, LossGradCheck, GRAD_CHECK_BATCH, GRAD_CHECK_EPS, GRAD_CHECK_TOLERANCE};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Bound, Checkpoint, Features, Model, TAU_FLOOR};
use crate::objectives::{
    correspondence_loss, disentanglement_loss, mask_to_feature_frames, sample_negative_coords, total_loss,
    BatchFeatures, LossBreakdown, LossConfig, LossWeights, RegularizerInputs,
};
use crate::synthworld::{Dataset, KeyedRng, Stream};

pub const LOG_FILE: &str = "train_log.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Steps of the end-to-end phase, run after the warm-up.
    pub total_steps: u64,
    pub lr_warmup: f64,
    pub lr_main: f64,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_interval: u64,
    /// Assemble upcoming batches on a second thread.
    pub prefetch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            warmup_steps: 200,
            total_steps: 2000,
            lr_warmup: 1e-3,
            lr_main: 3e-4,
            adam: AdamConfig::default(),
            checkpoint_interval: 500,
            prefetch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        for (name, lr) in [("lr_warmup", self.lr_warmup), ("lr_main", self.lr_main)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }

    pub fn end_step(&self) -> u64 {
        self.warmup_steps + self.total_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    /// Temperature used in this step, before the update.
    pub tau: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Owns the model and optimizer state for a run over one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    train: TrainConfig,
    loss: LossConfig,
    weights: LossWeights,
    model: Model,
    /// One slot per parameter followed by the temperature's.
    slots: Vec<AdamSlot>,
    step: u64,
    out: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    records: Vec<StepRecord>,
}

fn slot_names(model: &Model) -> Vec<String> {
    model.params().iter().map(|p| p.name.clone()).chain(["tau".to_string()]).collect()
}

fn fresh_slots(model: &Model) -> Vec<AdamSlot> {
    model
        .params()
        .iter()
        .map(|p| AdamSlot::zeros(p.value.shape()))
        .chain([AdamSlot::zeros(&[])])
        .collect()
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, model: Model, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let weights = loss.weights();
        Ok(Self {
            dataset,
            slots: fresh_slots(&model),
            model,
            train,
            loss,
            weights,
            step: 0,
            out: None,
            log: None,
            records: Vec::new(),
        })
    }

    /// Continues from a checkpoint, restoring optimizer moments when present.
    pub fn resume(dataset: &'a Dataset, ckpt: Checkpoint, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        let mut t = Self::new(dataset, ckpt.model, train, loss)?;
        t.step = ckpt.step;
        for (slot, name) in t.slots.iter_mut().zip(slot_names(&t.model)) {
            let find = |kind: &str| ckpt.extra.iter().find(|(n, _)| *n == format!("adam.{kind}.{name}")).map(|(_, x)| x.clone());
            if let (Some(m), Some(v)) = (find("m"), find("v")) {
                if m.shape() != slot.m.shape() || v.shape() != slot.v.shape() {
                    return Err(Error::Config(format!("optimizer state for {name} has the wrong shape")));
                }
                *slot = AdamSlot { m, v };
            }
        }
        Ok(t)
    }

    /// Writes the log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        let ckpts = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
        let path = dir.join(LOG_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.log = Some(BufWriter::new(file));
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = Vec::new();
        for (slot, name) in self.slots.iter().zip(slot_names(&self.model)) {
            extra.push((format!("adam.m.{name}"), slot.m.clone()));
            extra.push((format!("adam.v.{name}"), slot.v.clone()));
        }
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            extra,
        }
    }

    fn phase_of(&self, step: u64) -> Phase {
        if step < self.train.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Main
        }
    }

    fn splice_prob(train: &TrainConfig, loss: &LossConfig, step: u64) -> f64 {
        if step < train.warmup_steps || loss.splice == 0.0 {
            0.0
        } else {
            loss.splice_prob
        }
    }

    /// Runs the warm-up phase only.
    pub fn run_warmup(&mut self) -> Result<()> {
        self.run_until(self.train.warmup_steps.max(self.step))
    }

    /// Runs to the end of training and writes the final checkpoint.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.train.end_step())?;
        self.finish()
    }

    /// Flushes the log and writes the final checkpoint.
    pub fn finish(&mut self) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            let path = self.out.as_ref().expect("output set").join(LOG_FILE);
            log.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(out) = &self.out {
            save_checkpoint(&out.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT), &self.checkpoint())?;
        }
        Ok(())
    }

    /// Trains until the global step counter reaches `end`.
    pub fn run_until(&mut self, end: u64) -> Result<()> {
        let start = self.step;
        if start >= end {
            return Ok(());
        }
        let (ds, seed, b) = (self.dataset, self.train.seed, self.train.batch_size);
        let (train, loss) = (self.train.clone(), self.loss.clone());
        let make = move |step: u64| assemble_batch(ds, seed, step, b, Self::splice_prob(&train, &loss, step));
        if !self.train.prefetch {
            for step in start..end {
                let inputs = make(step)?;
                self.advance(&inputs)?;
            }
            return Ok(());
        }
        std::thread::scope(|s| {
            let (tx, rx) = sync_channel(2);
            let make = &make;
            s.spawn(move || {
                for step in start..end {
                    if tx.send(make(step)).is_err() {
                        break;
                    }
                }
            });
            for _ in start..end {
                let inputs = rx.recv().expect("batch producer stopped early")?;
                self.advance(&inputs)?;
            }
            Ok(())
        })
    }

    fn advance(&mut self, inputs: &BatchInputs) -> Result<()> {
        let record = self.step_once(inputs)?;
        if let Some(log) = self.log.as_mut() {
            let path = self.out.as_ref().expect("output set").join(LOG_FILE);
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        self.records.push(record);
        let interval = self.train.checkpoint_interval;
        if let Some(out) = &self.out {
            if interval > 0 && self.step % interval == 0 {
                let dir = out.join(CHECKPOINT_DIR).join(format!("step-{:06}", self.step));
                save_checkpoint(&dir, &self.checkpoint())?;
            }
        }
        Ok(())
    }

    /// One optimisation step on prepared inputs.
    pub fn step_once(&mut self, inputs: &BatchInputs) -> Result<StepRecord> {
        let step = self.step;
        let phase = self.phase_of(step);
        let warm = phase == Phase::Warmup;
        if warm && step == 0 || !warm && step == self.train.warmup_steps {
            // each phase starts with fresh moments
            self.slots = fresh_slots(&self.model);
        }
        self.model.freeze_backbones(warm);
        let mut tape = Tape::<f32>::new();
        let bound = self.model.bind(&mut tape, true);

        let batch = batch_features(&self.model, &mut tape, &bound, inputs)?;

        let tau_before = self.model.tau as f64;
        let (root, breakdown) = if warm {
            let (root, cor) = if self.weights.correspondence > 0.0 {
                let l = correspondence_loss(&mut tape, &batch, bound.tau)?;
                (l, true)
            } else {
                (disentanglement_loss(&mut tape, &batch, bound.tau)?, false)
            };
            let v = Some(tape.value(root).item() as f64);
            let breakdown = LossBreakdown {
                total: v.unwrap(),
                correspondence: if cor { v } else { None },
                disentanglement: if cor { None } else { v },
                ..LossBreakdown::default()
            };
            (root, breakdown)
        } else {
            let reg = regularizer_inputs(&self.model, &self.loss, self.train.seed, inputs, &batch, step)?;
            let out = total_loss(&mut tape, &batch, bound.tau, &self.weights, &reg)?;
            (out.total, out.breakdown(&tape))
        };
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: serde_json::to_string(&breakdown).expect("breakdown serializes"),
            });
        }
        tape.backward(root)?;

        let lr = if warm { self.train.lr_warmup } else { self.train.lr_main };
        let t = if warm { step + 1 } else { step - self.train.warmup_steps + 1 };
        let adam = self.train.adam;
        let grads: Vec<Option<Tensor>> = bound.params.iter().map(|&v| grad_of(&tape, v)).collect();
        for (i, g) in grads.into_iter().enumerate() {
            if !self.model.is_trainable(i) {
                continue;
            }
            if let Some(g) = g {
                let param = &mut self.model.params_mut()[i].value;
                optimizer_step(param, &g, &mut self.slots[i], t, lr, &adam)?;
            }
        }
        if let Some(g) = grad_of(&tape, bound.tau) {
            let mut tau = Tensor::scalar(self.model.tau);
            let last = self.slots.len() - 1;
            optimizer_step(&mut tau, &g, &mut self.slots[last], t, lr, &adam)?;
            self.model.tau = tau.item().max(TAU_FLOOR);
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            phase,
            lr,
            tau: tau_before,
            loss: breakdown,
        })
    }
}

/// Runs both encoders once over all images and all audio of a batch and
/// splits the features into their roles.
pub fn batch_features<T: Real>(model: &Model, tape: &mut Tape<T>, bound: &Bound, inputs: &BatchInputs) -> Result<BatchFeatures> {
    let b = inputs.len();
    let images: Vec<&Tensor> = inputs.sound_images.iter().chain(&inputs.speech_images).collect();
    let vf = model.image_features(tape, bound, &images)?;
    let audio: Vec<&Tensor> = inputs
        .sound_audio
        .iter()
        .chain(&inputs.speech_audio)
        .chain(&inputs.mixtures)
        .collect();
    let af = model.audio_features(tape, bound, &audio)?;
    let mut part = |f: &Features, i: usize| -> Result<Features> {
        let n = b * f.positions();
        Ok(Features {
            var: tape.narrow(f.var, 1, i * n, n)?,
            batch: b,
            ..*f
        })
    };
    Ok(BatchFeatures {
        sound: part(&af, 0)?,
        speech: part(&af, 1)?,
        mixture: part(&af, 2)?,
        sound_images: part(&vf, 0)?,
        speech_images: part(&vf, 1)?,
    })
}

/// Splice weights pooled to feature frames and the negative coordinates
/// sampled for `step`.
pub fn regularizer_inputs(
    model: &Model,
    loss: &LossConfig,
    seed: u64,
    inputs: &BatchInputs,
    batch: &BatchFeatures,
    step: u64,
) -> Result<RegularizerInputs> {
    let w = loss.weights();
    let mut reg = RegularizerInputs::default();
    if w.splice > 0.0 {
        let patch = model.config.audio_patch_time;
        let pool = |masks: &[Tensor]| -> Result<Tensor> {
            let rows = masks
                .iter()
                .map(|m| mask_to_feature_frames(m, patch))
                .collect::<Result<Vec<_>>>()?;
            let t = rows[0].len();
            Tensor::new(vec![rows.len(), t], rows.concat())
        };
        reg.sound_splice = Some(pool(&inputs.sound_splice)?);
        reg.speech_splice = Some(pool(&inputs.speech_splice)?);
    }
    if w.nonneg > 0.0 {
        let volumes = 2 * (w.correspondence > 0.0) as usize + 2 * (w.disentanglement > 0.0) as usize;
        let mut rng = KeyedRng::new(seed, Stream::Regularizer, step);
        let extent = [model.config.heads, batch.batch(), batch.sound.positions(), batch.sound_images.positions()];
        reg.negatives = sample_negative_coords(&mut rng, loss.omega, volumes, extent);
    }
    Ok(reg)
}

fn grad_of(tape: &Tape<f32>, v: Var) -> Option<Tensor> {
    if tape.requires_grad(v) {
        tape.grad(v).cloned()
    } else {
        None
    }
}

/// Reads a training log written by [`Trainer`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
