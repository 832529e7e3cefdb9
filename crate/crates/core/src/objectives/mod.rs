//! Contrastive objectives over pooled similarity scores and the stability
//! regularizers on similarity volumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Features, SOUND_HEAD, SPEECH_HEAD};
use crate::simvol::{aggregate_var, cross_volume, paired_volumes, Aggregation};
use crate::synthworld::KeyedRng;

/// Denominator floor of the splice regularizer's weighted mean.
const SPLICE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub correspondence: f64,
    pub disentanglement: f64,
    pub dis_reg: f64,
    pub splice: f64,
    pub calibration: f64,
    pub nonneg: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            correspondence: 1.0,
            disentanglement: 1.0,
            dis_reg: 0.05,
            splice: 0.01,
            calibration: 0.1,
            nonneg: 0.01,
            tv: 0.01,
        }
    }
}

impl LossWeights {
    /// Only the two contrastive terms.
    pub fn contrastive_only() -> Self {
        Self {
            dis_reg: 0.0,
            splice: 0.0,
            calibration: 0.0,
            nonneg: 0.0,
            tv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("correspondence", self.correspondence),
            ("disentanglement", self.disentanglement),
            ("dis_reg", self.dis_reg),
            ("splice", self.splice),
            ("calibration", self.calibration),
            ("nonneg", self.nonneg),
            ("tv", self.tv),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        if self.correspondence == 0.0 && self.disentanglement == 0.0 {
            return Err(Error::Config("at least one of correspondence and disentanglement must be weighted".into()));
        }
        Ok(())
    }
}

/// User-facing loss settings: regularizer weights, sampling knobs and the
/// ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dis_reg: f64,
    pub splice: f64,
    pub calibration: f64,
    pub nonneg: f64,
    pub tv: f64,
    /// Coordinates sampled per step for the non-negativity term.
    pub omega: usize,
    /// Probability that a clean training input is spliced.
    pub splice_prob: f64,
    /// Train without the disentanglement loss.
    pub cor_only: bool,
    /// Train without the correspondence loss.
    pub dis_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            dis_reg: w.dis_reg,
            splice: w.splice,
            calibration: w.calibration,
            nonneg: w.nonneg,
            tv: w.tv,
            omega: 64,
            splice_prob: 0.5,
            cor_only: false,
            dis_only: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            correspondence: if self.dis_only { 0.0 } else { 1.0 },
            disentanglement: if self.cor_only { 0.0 } else { 1.0 },
            dis_reg: self.dis_reg,
            splice: self.splice,
            calibration: self.calibration,
            nonneg: self.nonneg,
            tv: self.tv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cor_only && self.dis_only {
            return Err(Error::Config("cor_only and dis_only are mutually exclusive".into()));
        }
        if self.omega == 0 {
            return Err(Error::Config("omega must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.splice_prob) {
            return Err(Error::Config(format!("splice_prob must lie in [0, 1], got {}", self.splice_prob)));
        }
        self.weights().validate()
    }
}

/// Features of one training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchFeatures {
    /// Clean sound audio.
    pub sound: Features,
    /// Clean speech audio.
    pub speech: Features,
    /// Mixture of sound `i` and speech `i`.
    pub mixture: Features,
    pub sound_images: Features,
    pub speech_images: Features,
}

impl BatchFeatures {
    pub fn batch(&self) -> usize {
        self.sound.batch
    }
}

fn diag_mean<T: Real>(tape: &mut Tape<T>, m: Var, b: usize) -> Result<Var> {
    let eye = tape.constant(Tensor::eye(b));
    let d = tape.mul(m, eye)?;
    let s = tape.sum_all(d);
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// Symmetric InfoNCE on a `[B, B]` matrix whose diagonal holds the
/// positives: the mean of the row-wise and column-wise cross-entropies of
/// `scores / tau`, each averaged over the batch.
pub fn infonce_symmetric<T: Real>(tape: &mut Tape<T>, scores: Var, tau: Var) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(Error::invalid("infonce_symmetric", format!("expected [B, B] with B >= 2, got {shape:?}")));
    }
    let t = tape.value(tau);
    if t.numel() != 1 || !(t.item().as_f64() > 0.0) {
        return Err(Error::invalid("infonce_symmetric", format!("temperature must be > 0, got {:?}", t.data())));
    }
    let b = shape[0];
    let scaled = tape.div(scores, tau)?;
    let rows = tape.log_softmax(scaled)?;
    let rows = diag_mean(tape, rows, b)?;
    let st = tape.transpose(scaled)?;
    let cols = tape.log_softmax(st)?;
    let cols = diag_mean(tape, cols, b)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, -0.5))
}

fn pooled<T: Real>(tape: &mut Tape<T>, a: &Features, v: &Features, mode: Aggregation) -> Result<(Var, Var)> {
    let s = cross_volume(tape, a, v)?;
    let agg = aggregate_var(tape, s, mode, 0)?;
    let agg = tape.reshape(agg, &[a.batch, a.positions(), v.batch, v.positions()])?;
    let m = tape.max(agg, &[3], false)?;
    Ok((tape.mean(m, &[1], false)?, s))
}

/// Contrastive terms together with the cross volumes they were built from.
struct Contrastive {
    loss: Var,
    volumes: [Var; 2],
}

fn correspondence<T: Real>(tape: &mut Tape<T>, batch: &BatchFeatures, tau: Var) -> Result<Contrastive> {
    let (s_sound, v_sound) = pooled(tape, &batch.sound, &batch.sound_images, Aggregation::Max)?;
    let (s_speech, v_speech) = pooled(tape, &batch.speech, &batch.speech_images, Aggregation::Max)?;
    let l_sound = infonce_symmetric(tape, s_sound, tau)?;
    let l_speech = infonce_symmetric(tape, s_speech, tau)?;
    Ok(Contrastive {
        loss: tape.add(l_sound, l_speech)?,
        volumes: [v_sound, v_speech],
    })
}

fn disentanglement<T: Real>(tape: &mut Tape<T>, batch: &BatchFeatures, tau: Var) -> Result<Contrastive> {
    let (s_sound, v_sound) = pooled(tape, &batch.mixture, &batch.sound_images, Aggregation::Head(SOUND_HEAD))?;
    let (s_speech, v_speech) = pooled(tape, &batch.mixture, &batch.speech_images, Aggregation::Head(SPEECH_HEAD))?;
    let l_sound = infonce_symmetric(tape, s_sound, tau)?;
    let l_speech = infonce_symmetric(tape, s_speech, tau)?;
    Ok(Contrastive {
        loss: tape.add(l_sound, l_speech)?,
        volumes: [v_sound, v_speech],
    })
}

/// InfoNCE aligning clean sound and clean speech with their images, using
/// max aggregation over heads.
pub fn correspondence_loss<T: Real>(tape: &mut Tape<T>, batch: &BatchFeatures, tau: Var) -> Result<Var> {
    Ok(correspondence(tape, batch, tau)?.loss)
}

/// InfoNCE aligning the sound head of the mixture with the sound images and
/// the speech head of the mixture with the speech images.
pub fn disentanglement_loss<T: Real>(tape: &mut Tape<T>, batch: &BatchFeatures, tau: Var) -> Result<Var> {
    Ok(disentanglement(tape, batch, tau)?.loss)
}

/// Mean of `|S_0 * S_1|` over a volume whose axis `head_axis` has two heads.
pub fn disentanglement_regularizer<T: Real>(tape: &mut Tape<T>, s: Var, head_axis: usize) -> Result<Var> {
    let k = tape.shape(s).get(head_axis).copied().unwrap_or(0);
    if k != 2 {
        return Err(Error::invalid("disentanglement_regularizer", format!("expected 2 heads, got {k}")));
    }
    let s0 = tape.select(s, head_axis, 0)?;
    let s1 = tape.select(s, head_axis, 1)?;
    let p = tape.mul(s0, s1)?;
    let p = tape.abs(p);
    Ok(tape.mean_all(p))
}

/// `sum(w * S^2) / max(sum(w), eps)` for per-element weights `w`.
pub fn splice_regularizer<T: Real>(tape: &mut Tape<T>, s_agg: Var, weights: &Tensor<T>) -> Result<Var> {
    if tape.shape(s_agg) != weights.shape() {
        return Err(Error::ShapeMismatch {
            op: "splice_regularizer",
            left: tape.shape(s_agg).to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let total = weights.data().iter().fold(0.0, |s, w| s + w.as_f64());
    let w = tape.constant(weights.clone());
    let sq = tape.square(s_agg);
    let weighted = tape.mul(sq, w)?;
    let sum = tape.sum_all(weighted);
    Ok(tape.scale(sum, 1.0 / total.max(SPLICE_EPS)))
}

/// Repeats a per-frame mask along every other axis of `shape`, whose time
/// axis is `time_axis`.
pub fn broadcast_time_mask<T: Real>(mask: &[T], shape: &[usize], time_axis: usize) -> Result<Tensor<T>> {
    if shape.get(time_axis) != Some(&mask.len()) {
        return Err(Error::invalid(
            "broadcast_time_mask",
            format!("mask of {} frames does not fit axis {time_axis} of {shape:?}", mask.len()),
        ));
    }
    let inner: usize = shape[time_axis + 1..].iter().product();
    Ok(Tensor::from_fn(shape, |i| mask[(i / inner) % mask.len()]))
}

/// `max(log tau, 0)^2`.
pub fn calibration_regularizer<T: Real>(tape: &mut Tape<T>, tau: Var) -> Var {
    let l = tape.log(tau);
    let l = tape.relu(l);
    tape.square(l)
}

/// Mean of `min(x, 0)^2` over sampled coordinates, given as per-element
/// multiplicities `counts` summing to the sample size.
pub fn nonneg_regularizer<T: Real>(tape: &mut Tape<T>, volume: Var, counts: &Tensor<T>) -> Result<Var> {
    let n = counts.data().iter().fold(0.0, |s, c| s + c.as_f64());
    if n < 1.0 {
        return Err(Error::invalid("nonneg_regularizer", "at least one coordinate must be sampled"));
    }
    let c = tape.constant(counts.clone());
    let neg = tape.neg(volume);
    let neg = tape.relu(neg);
    let sq = tape.square(neg);
    let w = tape.mul(sq, c)?;
    let s = tape.sum_all(w);
    Ok(tape.scale(s, 1.0 / n))
}

/// Mean squared difference between consecutive entries along `time_axis`.
pub fn tv_regularizer<T: Real>(tape: &mut Tape<T>, s_agg: Var, time_axis: usize) -> Result<Var> {
    let t = tape.shape(s_agg).get(time_axis).copied().unwrap_or(0);
    if t < 2 {
        return Err(Error::invalid("tv_regularizer", format!("need at least 2 frames, got {t}")));
    }
    let a = tape.narrow(s_agg, time_axis, 0, t - 1)?;
    let b = tape.narrow(s_agg, time_axis, 1, t - 1)?;
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean_all(d))
}

/// One sampled coordinate of a negative-pair volume: `(volume, head,
/// sample, audio position, image position)`. The image side belongs to the
/// next sample in the batch.
pub type NegativeCoord = (usize, usize, usize, usize, usize);

/// Draws `omega` coordinates uniformly over `volumes` negative-pair volumes
/// of extent `[heads, batch, audio_positions, image_positions]`.
pub fn sample_negative_coords(
    rng: &mut KeyedRng,
    omega: usize,
    volumes: usize,
    extent: [usize; 4],
) -> Vec<NegativeCoord> {
    (0..omega)
        .map(|_| {
            (
                rng.gen_range(0..volumes),
                rng.gen_range(0..extent[0]),
                rng.gen_range(0..extent[1]),
                rng.gen_range(0..extent[2]),
                rng.gen_range(0..extent[3]),
            )
        })
        .collect()
}

/// Regularizer inputs drawn outside the loss.
#[derive(Clone, Debug, Default)]
pub struct RegularizerInputs {
    /// `[B, T]` per-feature-frame splice weights of the clean sound inputs;
    /// all zeros when nothing was spliced.
    pub sound_splice: Option<Tensor>,
    /// Same for the clean speech inputs.
    pub speech_splice: Option<Tensor>,
    pub negatives: Vec<NegativeCoord>,
}

/// Unweighted value of every term evaluated in a step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disentanglement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dis_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonneg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            Some(self.total),
            self.correspondence,
            self.disentanglement,
            self.dis_reg,
            self.splice,
            self.calibration,
            self.nonneg,
            self.tv,
        ]
        .iter()
        .flatten()
        .all(|x| x.is_finite())
    }
}

/// Loss root plus the vars of each evaluated term.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl TotalLoss {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let mut out = LossBreakdown {
            total: tape.value(self.total).item().as_f64(),
            ..LossBreakdown::default()
        };
        for &(name, v) in &self.terms {
            let x = Some(tape.value(v).item().as_f64());
            match name {
                "correspondence" => out.correspondence = x,
                "disentanglement" => out.disentanglement = x,
                "dis_reg" => out.dis_reg = x,
                "splice" => out.splice = x,
                "calibration" => out.calibration = x,
                "nonneg" => out.nonneg = x,
                _ => out.tv = x,
            }
        }
        out
    }
}

/// Weights selecting `[K, B*Pa, B*Pv]` entries that belong to the
/// negative pair `(b, b + 1 mod B)` at the sampled coordinates.
fn negative_counts<T: Real>(coords: &[NegativeCoord], volume: usize, a: &Features, v: &Features, k: usize) -> Tensor<T> {
    let (b, pa, pv) = (a.batch, a.positions(), v.positions());
    let mut counts = vec![T::zero(); k * b * pa * b * pv];
    for &(_, head, s, ap, vp) in coords.iter().filter(|c| c.0 == volume) {
        let row = s * pa + ap;
        let col = ((s + 1) % b) * pv + vp;
        counts[(head * b * pa + row) * b * pv + col] = counts[(head * b * pa + row) * b * pv + col] + T::one();
    }
    Tensor::new(vec![k, b * pa, b * pv], counts).expect("counts shape")
}

fn weighted<T: Real>(tape: &mut Tape<T>, terms: &mut Vec<(&'static str, Var)>, total: Var, name: &'static str, w: f64, term: Var) -> Result<Var> {
    terms.push((name, term));
    let scaled = tape.scale(term, w);
    tape.add(total, scaled)
}

/// `w_cor L_cor + w_dis L_dis` plus every regularizer with a positive weight.
/// Terms with zero weight are not evaluated, so with all regularizer
/// weights zero the result is exactly `L_cor + L_dis` at unit weights.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &BatchFeatures,
    tau: Var,
    weights: &LossWeights,
    reg: &RegularizerInputs,
) -> Result<TotalLoss> {
    let mut terms = Vec::new();
    // (cross volume, audio, image) of every contrastive pairing in use
    let mut negatives: Vec<(Var, Features, Features)> = Vec::new();
    // (paired volume, aggregation) of every positive pairing in use
    let mut positives: Vec<(Var, Aggregation)> = Vec::new();
    let mut clean: Vec<(Var, Option<&Tensor>)> = Vec::new();

    let scaled = |tape: &mut Tape<T>, v: Var, w: f64| if w == 1.0 { v } else { tape.scale(v, w) };
    let mut total = None;
    if weights.correspondence > 0.0 {
        let c = correspondence(tape, batch, tau)?;
        terms.push(("correspondence", c.loss));
        total = Some(scaled(tape, c.loss, weights.correspondence));
        negatives.push((c.volumes[0], batch.sound, batch.sound_images));
        negatives.push((c.volumes[1], batch.speech, batch.speech_images));
        if needs_positives(weights) {
            let ps = paired_volumes(tape, &batch.sound, &batch.sound_images)?;
            let pp = paired_volumes(tape, &batch.speech, &batch.speech_images)?;
            positives.push((ps, Aggregation::Max));
            positives.push((pp, Aggregation::Max));
            clean.push((ps, reg.sound_splice.as_ref()));
            clean.push((pp, reg.speech_splice.as_ref()));
        }
    }
    if weights.disentanglement > 0.0 {
        let d = disentanglement(tape, batch, tau)?;
        terms.push(("disentanglement", d.loss));
        let term = scaled(tape, d.loss, weights.disentanglement);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        negatives.push((d.volumes[0], batch.mixture, batch.sound_images));
        negatives.push((d.volumes[1], batch.mixture, batch.speech_images));
        if needs_positives(weights) {
            positives.push((paired_volumes(tape, &batch.mixture, &batch.sound_images)?, Aggregation::Head(SOUND_HEAD)));
            positives.push((paired_volumes(tape, &batch.mixture, &batch.speech_images)?, Aggregation::Head(SPEECH_HEAD)));
        }
    }
    let mut total = total.ok_or_else(|| Error::Config("no contrastive term has a positive weight".into()))?;

    let b = batch.batch();
    let (frows, fcols) = (batch.sound.rows, batch.sound.cols);
    let pv = batch.sound_images.positions();

    if weights.dis_reg > 0.0 {
        let parts = positives
            .iter()
            .map(|&(s, _)| disentanglement_regularizer(tape, s, 0))
            .collect::<Result<Vec<_>>>()?;
        let term = mean_of(tape, &parts)?;
        total = weighted(tape, &mut terms, total, "dis_reg", weights.dis_reg, term)?;
    }
    if weights.splice > 0.0 && !clean.is_empty() {
        let mut sum = None;
        let mut weight_total = 0.0;
        for &(s, mask) in &clean {
            let Some(mask) = mask else { continue };
            let w = splice_weights::<T>(mask, b, frows, fcols, pv)?;
            weight_total += w.data().iter().fold(0.0, |acc, x| acc + x.as_f64());
            let agg = aggregate_var(tape, s, Aggregation::Max, 0)?;
            let agg = tape.reshape(agg, &[b, frows, fcols, pv])?;
            let wv = tape.constant(w);
            let sq = tape.square(agg);
            let prod = tape.mul(sq, wv)?;
            let part = tape.sum_all(prod);
            sum = Some(match sum {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let term = match sum {
            Some(s) => tape.scale(s, 1.0 / weight_total.max(SPLICE_EPS)),
            None => tape.scalar_constant(0.0),
        };
        total = weighted(tape, &mut terms, total, "splice", weights.splice, term)?;
    }
    if weights.calibration > 0.0 {
        let term = calibration_regularizer(tape, tau);
        total = weighted(tape, &mut terms, total, "calibration", weights.calibration, term)?;
    }
    if weights.nonneg > 0.0 {
        if reg.negatives.is_empty() {
            return Err(Error::invalid("total_loss", "the non-negativity term needs sampled coordinates"));
        }
        if let Some(&(vol, ..)) = reg.negatives.iter().find(|c| c.0 >= negatives.len()) {
            return Err(Error::invalid("total_loss", format!("negative coordinate refers to volume {vol} of {}", negatives.len())));
        }
        let mut sum = None;
        for (i, (vol, a, v)) in negatives.iter().enumerate() {
            let k = tape.shape(*vol)[0];
            let counts = negative_counts::<T>(&reg.negatives, i, a, v, k);
            if counts.data().iter().all(|c| *c == T::zero()) {
                continue;
            }
            let c = tape.constant(counts);
            let neg = tape.neg(*vol);
            let neg = tape.relu(neg);
            let sq = tape.square(neg);
            let prod = tape.mul(sq, c)?;
            let part = tape.sum_all(prod);
            sum = Some(match sum {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let s = sum.expect("at least one coordinate");
        let term = tape.scale(s, 1.0 / reg.negatives.len() as f64);
        total = weighted(tape, &mut terms, total, "nonneg", weights.nonneg, term)?;
    }
    if weights.tv > 0.0 {
        let mut parts = Vec::new();
        for &(s, mode) in &positives {
            let agg = aggregate_var(tape, s, mode, 0)?;
            let agg = tape.reshape(agg, &[b, frows, fcols, pv])?;
            parts.push(tv_regularizer(tape, agg, 2)?);
        }
        let term = mean_of(tape, &parts)?;
        total = weighted(tape, &mut terms, total, "tv", weights.tv, term)?;
    }
    Ok(TotalLoss { total, terms })
}

fn needs_positives(w: &LossWeights) -> bool {
    w.dis_reg > 0.0 || w.splice > 0.0 || w.tv > 0.0
}

fn mean_of<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let (first, rest) = parts.split_first().ok_or_else(|| Error::invalid("total_loss", "no volumes to regularize"))?;
    let mut acc = *first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

/// `[B, F, T, Pv]` weights from `[B, T]` per-feature-frame splice weights.
fn splice_weights<T: Real>(mask: &Tensor, b: usize, f: usize, t: usize, pv: usize) -> Result<Tensor<T>> {
    if mask.shape() != [b, t] {
        return Err(Error::ShapeMismatch {
            op: "splice_regularizer",
            left: vec![b, t],
            right: mask.shape().to_vec(),
        });
    }
    let d = mask.data();
    Ok(Tensor::from_fn(&[b, f, t, pv], |i| {
        let bi = i / (f * t * pv);
        let ti = (i / pv) % t;
        T::of(d[bi * t + ti] as f64)
    }))
}

/// Averages a per-audio-frame mask over each feature frame of `patch`
/// audio frames.
pub fn mask_to_feature_frames(mask: &Tensor, patch: usize) -> Result<Vec<f32>> {
    if mask.rank() != 1 || patch == 0 || mask.numel() % patch != 0 {
        return Err(Error::invalid(
            "mask_to_feature_frames",
            format!("mask {:?} cannot be pooled by {patch}", mask.shape()),
        ));
    }
    Ok(mask.data().chunks(patch).map(|c| c.iter().sum::<f32>() / patch as f32).collect())
}
