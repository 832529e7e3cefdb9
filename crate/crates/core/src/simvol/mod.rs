//! Similarity volumes between audio and visual features, their head
//! aggregations, pooled scores and heatmaps.

mod export;

pub use export::{encode_pgm, upsample_bilinear, write_pgm};

use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Features;

/// How the head axis of a volume is collapsed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Elementwise max over heads.
    Max,
    /// A single head.
    Head(usize),
    /// Sum over heads.
    Sum,
}

/// `[K, F, T, H, W]` volume of per-head inner products.
pub fn similarity_volume(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    if a.rank() != 4 || v.rank() != 4 || a.shape()[..2] != v.shape()[..2] {
        return Err(Error::ShapeMismatch {
            op: "similarity_volume",
            left: a.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let (c, k) = (a.shape()[0], a.shape()[1]);
    let (f, t, h, w) = (a.shape()[2], a.shape()[3], v.shape()[2], v.shape()[3]);
    let mut tape = Tape::<f32>::new();
    let av = tape.constant(a.clone().reshape(&[c, k, f * t])?);
    let av = tape.permute(av, &[1, 2, 0])?;
    let vv = tape.constant(v.clone().reshape(&[c, k, h * w])?);
    let vv = tape.permute(vv, &[1, 0, 2])?;
    let s = tape.matmul(av, vv)?;
    tape.value(s).clone().reshape(&[k, f, t, h, w])
}

/// Collapses axis `axis` of a head-typed value on a tape.
pub fn aggregate_var<T: Real>(tape: &mut Tape<T>, s: Var, mode: Aggregation, axis: usize) -> Result<Var> {
    let k = tape.shape(s)[axis];
    match mode {
        Aggregation::Max => tape.max(s, &[axis], false),
        Aggregation::Sum => tape.sum(s, &[axis], false),
        Aggregation::Head(n) if n < k => tape.select(s, axis, n),
        Aggregation::Head(n) => Err(Error::invalid("aggregate", format!("head {n} out of range for {k} heads"))),
    }
}

/// `[F, T, H, W]` aggregate of a `[K, F, T, H, W]` volume.
pub fn aggregate(s: &Tensor, mode: Aggregation) -> Result<Tensor> {
    if s.rank() != 5 {
        return Err(Error::invalid("aggregate", format!("expected [K, F, T, H, W], got {:?}", s.shape())));
    }
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(s.clone());
    let out = aggregate_var(&mut tape, v, mode, 0)?;
    Ok(tape.value(out).clone())
}

/// Mean over `(f, t)` of the spatial max of an `[F, T, H, W]` aggregate.
pub fn pooled_score(s_agg: &Tensor) -> Result<f32> {
    if s_agg.rank() != 4 {
        return Err(Error::invalid("pooled_score", format!("expected [F, T, H, W], got {:?}", s_agg.shape())));
    }
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(s_agg.clone());
    let m = tape.max(v, &[2, 3], false)?;
    let out = tape.mean_all(m);
    Ok(tape.value(out).item())
}

/// `[H, W]` mean over frequency and over frames `[t0, t1)` (all frames when
/// `None`) of an `[F, T, H, W]` aggregate.
pub fn heatmap(s_agg: &Tensor, frames: Option<(usize, usize)>) -> Result<Tensor> {
    if s_agg.rank() != 4 {
        return Err(Error::invalid("heatmap", format!("expected [F, T, H, W], got {:?}", s_agg.shape())));
    }
    let t = s_agg.shape()[1];
    let (t0, t1) = frames.unwrap_or((0, t));
    if t0 >= t1 || t1 > t {
        return Err(Error::invalid("heatmap", format!("frame range [{t0}, {t1}) is empty or outside [0, {t})")));
    }
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(s_agg.clone());
    let v = tape.narrow(v, 1, t0, t1 - t0)?;
    let out = tape.mean(v, &[0, 1], false)?;
    Ok(tape.value(out).clone())
}

/// `[K, Ba * Pa, Bv * Pv]` inner products between every audio position of
/// every sample and every image position of every sample.
pub fn cross_volume<T: Real>(tape: &mut Tape<T>, a: &Features, v: &Features) -> Result<Var> {
    let vt = tape.transpose(v.var)?;
    tape.matmul(a.var, vt)
}

/// `[Ba, Bv]` pooled scores of every audio-image combination.
pub fn cross_scores<T: Real>(tape: &mut Tape<T>, a: &Features, v: &Features, mode: Aggregation) -> Result<Var> {
    let s = cross_volume(tape, a, v)?;
    let s = aggregate_var(tape, s, mode, 0)?;
    let s = tape.reshape(s, &[a.batch, a.positions(), v.batch, v.positions()])?;
    let s = tape.max(s, &[3], false)?;
    tape.mean(s, &[1], false)
}

/// `[K, B, Pa, Pv]` volumes of the index-aligned pairs `(a_i, v_i)`.
pub fn paired_volumes<T: Real>(tape: &mut Tape<T>, a: &Features, v: &Features) -> Result<Var> {
    if a.batch != v.batch {
        return Err(Error::invalid("paired_volumes", format!("batch {} vs {}", a.batch, v.batch)));
    }
    let k = tape.shape(a.var)[0];
    let c = tape.shape(a.var)[2];
    let av = tape.reshape(a.var, &[k * a.batch, a.positions(), c])?;
    let vv = tape.reshape(v.var, &[k * v.batch, v.positions(), c])?;
    let vt = tape.transpose(vv)?;
    let s = tape.matmul(av, vt)?;
    tape.reshape(s, &[k, a.batch, a.positions(), v.positions()])
}

/// `[B]` pooled scores of `[B, Pa, Pv]` aggregated paired volumes.
pub fn paired_scores<T: Real>(tape: &mut Tape<T>, s_agg: Var) -> Result<Var> {
    let m = tape.max(s_agg, &[2], false)?;
    tape.mean(m, &[1], false)
}

/// Extracts sample `index` of `[K, B, F*T, H*W]` paired volumes as a
/// `[K, F, T, H, W]` tensor.
pub fn sample_volume(paired: &Tensor, index: usize, a: &Features, v: &Features) -> Result<Tensor> {
    let (k, b, pa, pv) = (paired.shape()[0], paired.shape()[1], paired.shape()[2], paired.shape()[3]);
    let d = paired.data();
    let mut out = Vec::with_capacity(k * pa * pv);
    for ki in 0..k {
        let start = (ki * b + index) * pa * pv;
        out.extend_from_slice(&d[start..start + pa * pv]);
    }
    Tensor::new(vec![k, a.rows, a.cols, v.rows, v.cols], out)
}
