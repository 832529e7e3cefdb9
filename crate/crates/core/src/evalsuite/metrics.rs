use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Percentiles swept when choosing the dataset-level IoU threshold.
pub const IOU_PERCENTILES: [f64; 19] = [
    5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub map: f64,
    pub miou: f64,
    /// Percentile of pooled scores whose threshold maximised mean IoU.
    pub best_percentile: f64,
    pub samples: usize,
    /// Samples skipped for having an empty mask.
    pub skipped: usize,
}

/// Average precision of `scores` ranked descending against binary
/// `positives`. Tied scores enter the curve together.
pub fn average_precision(scores: &[f32], positives: &[bool]) -> f64 {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += positives[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total as f64;
        ap += (recall - last_recall) * tp as f64 / seen as f64;
        last_recall = recall;
    }
    ap
}

/// Linear-interpolated percentile of ascending `sorted`.
fn percentile(sorted: &[f32], p: f64) -> f32 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        (sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
    }
}

fn iou(scores: &[f32], mask: &[bool], threshold: f32) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&s, &m) in scores.iter().zip(mask) {
        let p = s > threshold;
        inter += (p && m) as usize;
        union += (p || m) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-sample AP averaged over samples, and the best mean IoU over
/// thresholds at fixed percentiles of all pooled scores. A pixel is
/// predicted when its score exceeds the threshold.
pub fn segmentation_metrics(heatmaps: &[Tensor], masks: &[Tensor]) -> Result<Segmentation> {
    if heatmaps.len() != masks.len() {
        return Err(Error::invalid(
            "segmentation_metrics",
            format!("{} heatmaps vs {} masks", heatmaps.len(), masks.len()),
        ));
    }
    let mut kept: Vec<(&[f32], Vec<bool>)> = Vec::new();
    let mut skipped = 0;
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "segmentation_metrics",
                left: h.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        let mask: Vec<bool> = m.data().iter().map(|&x| x > 0.5).collect();
        if mask.iter().any(|&x| x) {
            kept.push((h.data(), mask));
        } else {
            skipped += 1;
        }
    }
    if kept.is_empty() {
        return Ok(Segmentation {
            map: 0.0,
            miou: 0.0,
            best_percentile: IOU_PERCENTILES[0],
            samples: 0,
            skipped,
        });
    }
    let n = kept.len() as f64;
    let map = kept.iter().map(|(s, m)| average_precision(s, m)).sum::<f64>() / n;
    let mut pooled: Vec<f32> = kept.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    pooled.sort_by(f32::total_cmp);
    let (mut miou, mut best_percentile) = (f64::NEG_INFINITY, IOU_PERCENTILES[0]);
    for p in IOU_PERCENTILES {
        let thr = percentile(&pooled, p);
        let m = kept.iter().map(|(s, mask)| iou(s, mask, thr)).sum::<f64>() / n;
        if m > miou {
            miou = m;
            best_percentile = p;
        }
    }
    Ok(Segmentation {
        map,
        miou,
        best_percentile,
        samples: kept.len(),
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    /// Image queries ranking the audio gallery (columns).
    pub image_to_audio: f64,
    /// Audio queries ranking the image gallery (rows).
    pub audio_to_image: f64,
}

/// Whether the diagonal entry `i` of `row` ranks within the top `k`; equal
/// scores at lower indices rank ahead.
fn hit(row: impl Iterator<Item = f32> + Clone, i: usize, k: usize) -> bool {
    let target = row.clone().nth(i).expect("index in range");
    let ahead = row
        .enumerate()
        .filter(|&(j, s)| s > target || (s == target && j < i))
        .count();
    ahead < k
}

/// Recall@k of a square `[audio, image]` score matrix whose diagonal holds
/// the true pairs.
pub fn retrieval(scores: &Tensor, k: usize) -> Result<Recall> {
    if scores.rank() != 2 || scores.shape()[0] != scores.shape()[1] {
        return Err(Error::invalid("retrieval", format!("expected a square matrix, got {:?}", scores.shape())));
    }
    let b = scores.shape()[0];
    if k == 0 || k > b {
        return Err(Error::invalid("retrieval", format!("k = {k} outside 1..={b}")));
    }
    let d = scores.data();
    let rows = (0..b).filter(|&i| hit(d[i * b..(i + 1) * b].iter().copied(), i, k)).count();
    let cols = (0..b).filter(|&j| hit((0..b).map(|i| d[i * b + j]), j, k)).count();
    Ok(Recall {
        k,
        image_to_audio: cols as f64 / b as f64,
        audio_to_image: rows as f64 / b as f64,
    })
}

/// Fraction of samples whose strongest head matches the label.
pub fn pred_dis_from_strengths(strengths: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = strengths
        .iter()
        .zip(labels)
        .filter(|(s, &l)| {
            let best = s
                .iter()
                .enumerate()
                .fold(0, |best, (i, &x)| if x > s[best] { i } else { best });
            best == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One minus the fraction of samples on which a head of the other type
/// scores above that head's median over all samples. `scores[i][h]` is the
/// pooled score of head `h` on sample `i`, whose type is `labels[i]`.
pub fn act_dis_from_scores(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let heads = scores[0].len();
    let theta: Vec<f64> = (0..heads).map(|h| median(scores.iter().map(|s| s[h]).collect())).collect();
    let wrong = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| (0..heads).any(|h| h != l && s[h] > theta[h]))
        .count();
    1.0 - wrong as f64 / scores.len() as f64
}
