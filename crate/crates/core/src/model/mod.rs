//! Patch-perceptron encoders followed by aligners that emit head-typed
//! feature volumes.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, PARAMS_FILE};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::synthworld::{KeyedRng, Stream};

/// Head specialised in generic sound.
pub const SOUND_HEAD: usize = 0;
/// Head specialised in speech.
pub const SPEECH_HEAD: usize = 1;
/// Lower bound kept on the temperature after every update.
pub const TAU_FLOOR: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_patch: usize,
    pub audio_patch_freq: usize,
    pub audio_patch_time: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub channels: usize,
    pub heads: usize,
    pub tau_init: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_patch: 8,
            audio_patch_freq: 8,
            audio_patch_time: 8,
            visual_dim: 32,
            audio_dim: 32,
            channels: 16,
            heads: 2,
            tau_init: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("image_patch", self.image_patch),
            ("audio_patch_freq", self.audio_patch_freq),
            ("audio_patch_time", self.audio_patch_time),
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.heads != 2 {
            return bad(format!("heads must be 2 (sound and speech), got {}", self.heads));
        }
        if !(self.tau_init >= TAU_FLOOR) {
            return bad(format!("tau_init must be at least {TAU_FLOOR}, got {}", self.tau_init));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Audio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Backbone parameters are excluded from updates while frozen.
    pub backbone: bool,
}

/// Both encoders, both aligners and the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    pub tau: f32,
    frozen: bool,
}

/// Parameters of one modality in the order they are stored.
/// The perceptrons have no biases, so an all-zero patch such as silence
/// reaches the layer norm as an exact zero vector and takes its eps path.
const LAYERS: [(&str, bool); 6] = [
    ("fc1.weight", true),
    ("fc2.weight", true),
    ("aligner.norm.gain", false),
    ("aligner.norm.bias", false),
    ("aligner.proj.weight", false),
    ("aligner.proj.bias", false),
];

/// Parameters of one model placed on a tape, in storage order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<Var>,
    pub tau: Var,
}

/// Features of a batch on a tape, laid out `[K, batch * rows * cols, C]`
/// with positions row-major within each sample.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub var: Var,
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Features {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }
}

impl Model {
    /// Fresh model with every weight drawn from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (prefix, input, hidden) in [
            ("visual", 3 * config.image_patch * config.image_patch, config.visual_dim),
            ("audio", config.audio_patch_freq * config.audio_patch_time, config.audio_dim),
        ] {
            let out = config.channels * config.heads;
            let shapes: [(Vec<usize>, usize); 6] = [
                (vec![input, hidden], input),
                (vec![hidden, hidden], hidden),
                (vec![hidden], 0),
                (vec![hidden], 0),
                (vec![hidden, out], hidden),
                (vec![out], hidden),
            ];
            for ((name, backbone), (shape, fan_in)) in LAYERS.iter().zip(shapes) {
                let index = params.len() as u64;
                let value = match (fan_in, *name) {
                    (0, "aligner.norm.gain") => Tensor::ones(&shape),
                    (0, _) => Tensor::zeros(&shape),
                    _ => {
                        let mut rng = KeyedRng::new(seed, Stream::Init, index);
                        let bound = 1.0 / (fan_in as f32).sqrt();
                        let n = shape.iter().product();
                        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())?
                    }
                };
                params.push(Param {
                    name: format!("{prefix}.{name}"),
                    value,
                    backbone: *backbone,
                });
            }
        }
        Ok(Self {
            tau: config.tau_init,
            config,
            params,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param>, tau: f32) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (r, p) in reference.params.iter().zip(&params) {
            if r.name != p.name || r.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    r.name,
                    r.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            tau,
            frozen: false,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum::<usize>() + 1
    }

    pub fn freeze_backbones(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn backbones_frozen(&self) -> bool {
        self.frozen
    }

    /// Whether parameter `i` may be updated in the current state.
    pub fn is_trainable(&self, i: usize) -> bool {
        !(self.frozen && self.params[i].backbone)
    }

    /// Records every parameter on `tape`. With `trainable`, parameters that
    /// are not frozen and the temperature track gradients.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let params = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.cast(), trainable && self.is_trainable(i)))
            .collect();
        let tau = tape.leaf(Tensor::scalar(T::of(self.tau as f64)), trainable);
        Bound { params, tau }
    }

    fn offset(modality: Modality) -> usize {
        match modality {
            Modality::Visual => 0,
            Modality::Audio => LAYERS.len(),
        }
    }

    /// Runs perceptron and aligner over rows of flattened patches `[N, in]`,
    /// returning `[K, N, C]`.
    fn forward_patches<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, modality: Modality, x: Var) -> Result<Var> {
        let p = &bound.params[Self::offset(modality)..Self::offset(modality) + LAYERS.len()];
        let h = tape.matmul(x, p[0])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, p[1])?;
        let h = tape.layer_norm(h, 1, p[2], p[3], LAYER_NORM_EPS)?;
        let y = tape.matmul(h, p[4])?;
        let y = tape.add_bias(y, p[5])?;
        let n = tape.shape(y)[0];
        let y = tape.reshape(y, &[n, self.config.channels, self.config.heads])?;
        tape.permute(y, &[2, 0, 1])
    }

    /// Visual features of a batch of `[3, H_img, W_img]` images.
    pub fn image_features<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, images: &[&Tensor]) -> Result<Features> {
        let p = self.config.image_patch;
        let (rows, cols, patches) = image_patches::<T>(images, p)?;
        let x = tape.constant(patches);
        let var = self.forward_patches(tape, bound, Modality::Visual, x)?;
        Ok(Features {
            var,
            batch: images.len(),
            rows,
            cols,
        })
    }

    /// Audio features of a batch of `[F_a, T_a]` grids.
    pub fn audio_features<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, grids: &[&Tensor]) -> Result<Features> {
        let (rows, cols, patches) = audio_patches::<T>(grids, self.config.audio_patch_freq, self.config.audio_patch_time)?;
        let x = tape.constant(patches);
        let var = self.forward_patches(tape, bound, Modality::Audio, x)?;
        Ok(Features {
            var,
            batch: grids.len(),
            rows,
            cols,
        })
    }

    /// `[C, K, H, W]` feature volume of one image.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let f = self.image_features(&mut tape, &bound, &[image])?;
        Ok(to_volume(tape.value(f.var), &f))
    }

    /// `[C, K, F, T]` feature volume of one time-frequency grid.
    pub fn encode_audio(&self, grid: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let f = self.audio_features(&mut tape, &bound, &[grid])?;
        Ok(to_volume(tape.value(f.var), &f))
    }
}

/// Converts batch-1 features `[K, rows*cols, C]` to `[C, K, rows, cols]`.
pub fn to_volume<T: Real>(t: &Tensor<T>, f: &Features) -> Tensor<T> {
    let (k, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert_eq!(n, f.positions() * f.batch);
    let d = t.data();
    Tensor::from_fn(&[c, k, f.rows, f.cols], |i| {
        let (ci, rest) = (i / (k * n), i % (k * n));
        let (ki, pos) = (rest / n, rest % n);
        d[(ki * n + pos) * c + ci]
    })
}

fn indivisible(op: &'static str, extent: &[usize], patch: &[usize]) -> Error {
    Error::invalid(op, format!("extents {extent:?} are not divisible by patch {patch:?}"))
}

/// Flattens each image into `[3, p, p]` patches, row-major over patch
/// positions, giving `[B * H * W, 3 p^2]`.
fn image_patches<T: Real>(images: &[&Tensor], p: usize) -> Result<(usize, usize, Tensor<T>)> {
    let first = images.first().ok_or_else(|| Error::invalid("encode_image", "empty batch"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid("encode_image", format!("expected [3, H, W], got {shape:?}")));
    }
    let (h_img, w_img) = (shape[1], shape[2]);
    if h_img % p != 0 || w_img % p != 0 {
        return Err(indivisible("encode_image", &shape[1..], &[p, p]));
    }
    let (rows, cols) = (h_img / p, w_img / p);
    let width = 3 * p * p;
    let mut out = Vec::with_capacity(images.len() * rows * cols * width);
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                left: shape.clone(),
                right: img.shape().to_vec(),
            });
        }
        let d = img.data();
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..3 {
                    for y in 0..p {
                        let base = (ch * h_img + r * p + y) * w_img + c * p;
                        out.extend(d[base..base + p].iter().map(|&x| T::of(x as f64)));
                    }
                }
            }
        }
    }
    Ok((rows, cols, Tensor::new(vec![images.len() * rows * cols, width], out)?))
}

/// Flattens each grid into `[pf, pt]` patches, giving `[B * F * T, pf pt]`.
fn audio_patches<T: Real>(grids: &[&Tensor], pf: usize, pt: usize) -> Result<(usize, usize, Tensor<T>)> {
    let first = grids.first().ok_or_else(|| Error::invalid("encode_audio", "empty batch"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("encode_audio", format!("expected [F, T], got {shape:?}")));
    }
    let (f_a, t_a) = (shape[0], shape[1]);
    if f_a % pf != 0 || t_a % pt != 0 {
        return Err(indivisible("encode_audio", &shape, &[pf, pt]));
    }
    let (rows, cols) = (f_a / pf, t_a / pt);
    let mut out = Vec::with_capacity(grids.len() * f_a * t_a);
    for g in grids {
        if g.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode_audio",
                left: shape.clone(),
                right: g.shape().to_vec(),
            });
        }
        let d = g.data();
        for r in 0..rows {
            for c in 0..cols {
                for y in 0..pf {
                    let base = (r * pf + y) * t_a + c * pt;
                    out.extend(d[base..base + pt].iter().map(|&x| T::of(x as f64)));
                }
            }
        }
    }
    Ok((rows, cols, Tensor::new(vec![grids.len() * rows * cols, pf * pt], out)?))
}
