//! Evaluation protocols: segmentation from heatmaps, cross-modal
//! retrieval, simultaneous grounding of mixtures, robustness to off-screen
//! audio, and head disentanglement scores.

mod metrics;

pub use metrics::{
    act_dis_from_scores, average_precision, pred_dis_from_strengths, retrieval, segmentation_metrics, Recall,
    Segmentation, IOU_PERCENTILES,
};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, SOUND_HEAD, SPEECH_HEAD};
use crate::simvol::{aggregate, cross_scores, heatmap, paired_volumes, pooled_score, sample_volume, upsample_bilinear, Aggregation};
use crate::synthworld::{mix, render_sound, render_speech, AudioKind, AudioSignal, Dataset, Identity, KeyedRng, SceneSample, Split, Stream};

/// Samples encoded per forward pass.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    TotalMax,
    TotalSum,
    Sound,
    Speech,
}

impl HeadMode {
    pub fn aggregation(self) -> Aggregation {
        match self {
            HeadMode::TotalMax => Aggregation::Max,
            HeadMode::TotalSum => Aggregation::Sum,
            HeadMode::Sound => Aggregation::Head(SOUND_HEAD),
            HeadMode::Speech => Aggregation::Head(SPEECH_HEAD),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::TotalMax => "total-max",
            HeadMode::TotalSum => "total-sum",
            HeadMode::Sound => "sound",
            HeadMode::Speech => "speech",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds the off-screen distractors.
    pub seed: u64,
    /// Retrieval gallery size.
    pub gallery: usize,
    pub k: usize,
    /// Clean samples per audio type for the disentanglement scores.
    pub disentangle_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gallery: 64,
            k: 10,
            disentangle_samples: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gallery < 2 || self.k == 0 || self.k > self.gallery || self.disentangle_samples == 0 {
            return Err(Error::Config(format!("invalid eval settings {self:?}")));
        }
        Ok(())
    }
}

/// Result of one protocol. Fields a task does not produce are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadMode>,
    pub mixed: bool,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou_percentile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<usize>,
    /// mAP against the other object's mask, on two-object scenes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swapped_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<Recall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_dis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_dis: Option<f64>,
}

impl MetricsReport {
    fn new(task: &str, split: &str, head: Option<HeadMode>, mixed: bool) -> Self {
        Self {
            task: task.to_string(),
            split: split.to_string(),
            head,
            mixed,
            ..Self::default()
        }
    }

    fn with_segmentation(mut self, s: &Segmentation) -> Self {
        self.samples = s.samples;
        self.map = Some(s.map);
        self.miou = Some(s.miou);
        self.miou_percentile = Some(s.best_percentile);
        self.skipped = Some(s.skipped);
        self
    }
}

/// `[K, F, T, H, W]` similarity volume of each `(grid_i, image_i)` pair.
pub fn sample_volumes(model: &Model, images: &[&Tensor], grids: &[&Tensor]) -> Result<Vec<Tensor>> {
    if images.len() != grids.len() {
        return Err(Error::invalid("sample_volumes", format!("{} images vs {} grids", images.len(), grids.len())));
    }
    let chunks: Vec<Result<Vec<Tensor>>> = images
        .par_chunks(CHUNK)
        .zip(grids.par_chunks(CHUNK))
        .map(|(imgs, auds)| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, false);
            let v = model.image_features(&mut tape, &bound, imgs)?;
            let a = model.audio_features(&mut tape, &bound, auds)?;
            let s = paired_volumes(&mut tape, &a, &v)?;
            let s = tape.value(s);
            (0..imgs.len()).map(|i| sample_volume(s, i, &a, &v)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `[audio, image]` pooled scores of every combination.
pub fn retrieval_scores(model: &Model, images: &[&Tensor], grids: &[&Tensor], mode: Aggregation) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, false);
    let v = model.image_features(&mut tape, &bound, images)?;
    let a = model.audio_features(&mut tape, &bound, grids)?;
    let s = cross_scores(&mut tape, &a, &v, mode)?;
    Ok(tape.value(s).clone())
}

/// Feature frames covering the spoken tokens of `audio`, or all frames when
/// it has none.
pub fn token_frames(audio: &AudioSignal, patch: usize) -> Option<(usize, usize)> {
    let start = audio.token_spans.iter().map(|s| s.start).min()?;
    let end = audio.token_spans.iter().map(|s| s.end).max()?;
    let t_feat = audio.frames() / patch;
    let t0 = (start / patch).min(t_feat - 1);
    Some((t0, end.div_ceil(patch).clamp(t0 + 1, t_feat)))
}

/// Image-resolution heatmap of one volume.
pub fn image_heatmap(volume: &Tensor, mode: Aggregation, frames: Option<(usize, usize)>, h: usize, w: usize) -> Result<Tensor> {
    let agg = aggregate(volume, mode)?;
    upsample_bilinear(&heatmap(&agg, frames)?, h, w)
}

/// Audio of the opposite kind from a class absent in `scene`, seeded by
/// `(seed, split, index)`.
pub fn offscreen_distractor(ds: &Dataset, scene: &SceneSample, kind: AudioKind, seed: u64, split: Split, index: usize) -> Result<AudioSignal> {
    let cfg = &ds.config;
    let tag = match split {
        Split::Sound => 0u64,
        Split::Speech => 1,
        Split::Extended => 2,
    };
    let mut rng = KeyedRng::new(seed, Stream::Distractor, (tag << 32) | index as u64);
    let absent: Vec<usize> = (0..cfg.n_classes).filter(|c| scene.objects.iter().all(|o| o.class != *c)).collect();
    if absent.is_empty() {
        return Err(Error::invalid("offscreen_distractor", "every class is visible in the scene"));
    }
    let id = Identity::new(absent[rng.gen_range(0..absent.len())], rng.gen_range(0..cfg.variants));
    match kind {
        AudioKind::Sound => render_speech(cfg, id, &mut rng),
        AudioKind::Speech => render_sound(cfg, id, &mut rng),
        other => Err(Error::invalid("offscreen_distractor", format!("no opposite kind for {other:?}"))),
    }
}

/// Audio of the first `n` samples of a clean split, mixed with off-screen
/// distractors when `mixed`.
fn split_audio(ds: &Dataset, split: Split, n: usize, mixed: bool, seed: u64) -> Result<Vec<AudioSignal>> {
    ds.pairs(split)[..n]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if mixed {
                let d = offscreen_distractor(ds, &s.scene, s.audio.kind, seed, split, i)?;
                mix(&s.audio, &d)
            } else {
                Ok(s.audio.clone())
            }
        })
        .collect()
}

fn clean_split(split: Split, op: &'static str) -> Result<()> {
    if split == Split::Extended {
        return Err(Error::invalid(op, "expects the sound or speech split"));
    }
    Ok(())
}

/// Heatmaps for `audio[i]` against `images[i]`, restricted to the spoken
/// frames of `frames_of[i]`.
pub fn grounding_heatmaps(
    model: &Model,
    images: &[&Tensor],
    audio: &[&Tensor],
    frames: &[Option<(usize, usize)>],
    mode: Aggregation,
) -> Result<Vec<Tensor>> {
    let vols = sample_volumes(model, images, audio)?;
    vols.par_iter()
        .zip(images.par_iter().zip(frames))
        .map(|(v, (img, fr))| image_heatmap(v, mode, *fr, img.shape()[1], img.shape()[2]))
        .collect()
}

/// One image-resolution heatmap per head for sample `index` of `split`,
/// using the mixture on extended samples. The speech head is averaged over
/// the spoken frames.
pub fn head_heatmaps(model: &Model, ds: &Dataset, split: Split, index: usize) -> Result<Vec<Tensor>> {
    let n = ds.len(split);
    if index >= n {
        return Err(Error::invalid("head_heatmaps", format!("index {index} out of range for {} samples", n)));
    }
    let (scene, audio, speech) = match split {
        Split::Extended => {
            let s = &ds.extended[index];
            (&s.scene, &s.mixture, &s.speech)
        }
        _ => {
            let s = &ds.pairs(split)[index];
            (&s.scene, &s.audio, &s.audio)
        }
    };
    let vol = sample_volumes(model, &[&scene.image], &[&audio.grid])?.remove(0);
    let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
    let p = model.config.audio_patch_time;
    (0..model.config.heads)
        .map(|k| {
            let frames = if k == SPEECH_HEAD { token_frames(speech, p) } else { None };
            image_heatmap(&vol, Aggregation::Head(k), frames, h, w)
        })
        .collect()
}

/// Segmentation of the single object of each sample of a clean split.
pub fn eval_grounding(model: &Model, ds: &Dataset, split: Split, head: HeadMode, mixed: bool, cfg: &EvalConfig) -> Result<MetricsReport> {
    clean_split(split, "eval_grounding")?;
    let samples = ds.pairs(split);
    let audio = split_audio(ds, split, samples.len(), mixed, cfg.seed)?;
    let p = model.config.audio_patch_time;
    let frames: Vec<_> = samples.iter().map(|s| token_frames(&s.audio, p)).collect();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.scene.image).collect();
    let grids: Vec<&Tensor> = audio.iter().map(|a| &a.grid).collect();
    let maps = grounding_heatmaps(model, &images, &grids, &frames, head.aggregation())?;
    let masks: Vec<Tensor> = samples.iter().map(|s| s.scene.masks[0].clone()).collect();
    let seg = segmentation_metrics(&maps, &masks)?;
    Ok(MetricsReport::new("grounding", split.name(), Some(head), mixed).with_segmentation(&seg))
}

/// Grounds each head of every extended mixture: the sound head against the
/// sounding object and the speech head, over the spoken frames, against
/// the named object. Returns the sound and speech reports.
pub fn eval_simultaneous(model: &Model, ds: &Dataset) -> Result<[MetricsReport; 2]> {
    let samples = &ds.extended;
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.scene.image).collect();
    let grids: Vec<&Tensor> = samples.iter().map(|s| &s.mixture.grid).collect();
    let vols = sample_volumes(model, &images, &grids)?;
    let p = model.config.audio_patch_time;
    let mut out = Vec::with_capacity(2);
    for head in [HeadMode::Sound, HeadMode::Speech] {
        let maps = vols
            .par_iter()
            .zip(samples.par_iter())
            .map(|(v, s)| {
                let frames = if head == HeadMode::Speech { token_frames(&s.speech, p) } else { None };
                image_heatmap(v, head.aggregation(), frames, s.scene.image.shape()[1], s.scene.image.shape()[2])
            })
            .collect::<Result<Vec<_>>>()?;
        let target = |s: &crate::synthworld::TripletSample, own: bool| {
            let (mine, other) = if head == HeadMode::Sound {
                (s.sound_object, s.speech_object)
            } else {
                (s.speech_object, s.sound_object)
            };
            s.scene.masks[if own { mine } else { other }].clone()
        };
        let own: Vec<Tensor> = samples.iter().map(|s| target(s, true)).collect();
        let swapped: Vec<Tensor> = samples.iter().map(|s| target(s, false)).collect();
        let seg = segmentation_metrics(&maps, &own)?;
        let mut report = MetricsReport::new("simultaneous", Split::Extended.name(), Some(head), true).with_segmentation(&seg);
        report.swapped_map = Some(segmentation_metrics(&maps, &swapped)?.map);
        out.push(report);
    }
    Ok(out.try_into().expect("two heads"))
}

/// Recall@k over a gallery made of the first `cfg.gallery` samples.
pub fn eval_retrieval(model: &Model, ds: &Dataset, split: Split, head: HeadMode, mixed: bool, cfg: &EvalConfig) -> Result<MetricsReport> {
    clean_split(split, "eval_retrieval")?;
    let n = cfg.gallery.min(ds.len(split));
    if cfg.k > n {
        return Err(Error::invalid("eval_retrieval", format!("k = {} exceeds the gallery of {n}", cfg.k)));
    }
    let audio = split_audio(ds, split, n, mixed, cfg.seed)?;
    let images: Vec<&Tensor> = ds.pairs(split)[..n].iter().map(|s| &s.scene.image).collect();
    let grids: Vec<&Tensor> = audio.iter().map(|a| &a.grid).collect();
    let scores = retrieval_scores(model, &images, &grids, head.aggregation())?;
    let mut report = MetricsReport::new("retrieval", split.name(), Some(head), mixed);
    report.samples = n;
    report.recall = Some(retrieval(&scores, cfg.k)?);
    Ok(report)
}

/// Per-sample head strengths `mean |S[k]|`, pooled head scores and type
/// labels over clean sound then speech samples.
pub fn head_activity(model: &Model, ds: &Dataset, per_type: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut grids = Vec::new();
    let mut labels = Vec::new();
    for (split, label) in [(Split::Sound, SOUND_HEAD), (Split::Speech, SPEECH_HEAD)] {
        for s in ds.pairs(split).iter().take(per_type) {
            images.push(&s.scene.image);
            grids.push(&s.audio.grid);
            labels.push(label);
        }
    }
    let vols = sample_volumes(model, &images, &grids)?;
    let stats = vols
        .par_iter()
        .map(|v| {
            let k = v.shape()[0];
            let per = v.numel() / k;
            let strengths = (0..k)
                .map(|h| v.data()[h * per..(h + 1) * per].iter().map(|x| x.abs() as f64).sum::<f64>() / per as f64)
                .collect();
            let scores = (0..k)
                .map(|h| Ok(pooled_score(&aggregate(v, Aggregation::Head(h))?)? as f64))
                .collect::<Result<Vec<_>>>()?;
            Ok((strengths, scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let (strengths, scores) = stats.into_iter().unzip();
    Ok((strengths, scores, labels))
}

/// Type prediction accuracy from the strongest head.
pub fn pred_dis(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<f64> {
    let (strengths, _, labels) = head_activity(model, ds, cfg.disentangle_samples)?;
    Ok(pred_dis_from_strengths(&strengths, &labels))
}

/// Complement of the rate at which the other type's head activates.
pub fn act_dis(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<f64> {
    let (_, scores, labels) = head_activity(model, ds, cfg.disentangle_samples)?;
    Ok(act_dis_from_scores(&scores, &labels))
}

/// Both disentanglement scores in one report.
pub fn eval_disentangle(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    let (strengths, scores, labels) = head_activity(model, ds, cfg.disentangle_samples)?;
    let mut report = MetricsReport::new("disentangle", "sound+speech", None, false);
    report.samples = labels.len();
    report.pred_dis = Some(pred_dis_from_strengths(&strengths, &labels));
    report.act_dis = Some(act_dis_from_scores(&scores, &labels));
    Ok(report)
}
