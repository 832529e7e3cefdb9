use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::synthworld::audio::splice_negative;
use crate::synthworld::{mix, AudioSignal, Dataset, KeyedRng, Split, Stream};

/// Raw inputs of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInputs {
    pub sound_indices: Vec<usize>,
    pub speech_indices: Vec<usize>,
    pub sound_images: Vec<Tensor>,
    pub speech_images: Vec<Tensor>,
    /// Clean sound grids, spliced where `sound_splice` is nonzero.
    pub sound_audio: Vec<Tensor>,
    pub speech_audio: Vec<Tensor>,
    /// `mix(sound_i, speech_i)` of the unspliced signals.
    pub mixtures: Vec<Tensor>,
    /// `[T_a]` splice mask per clean sound input.
    pub sound_splice: Vec<Tensor>,
    pub speech_splice: Vec<Tensor>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.sound_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sound_images.is_empty()
    }
}

/// Index of the sample drawn at `position` of an endless stream over a
/// split of `n` samples, reshuffled every epoch.
fn stream_index(seed: u64, split: Split, n: usize, position: u64) -> usize {
    let epoch = position / n as u64;
    let tag = match split {
        Split::Sound => 0,
        Split::Speech => 1,
        Split::Extended => 2,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut KeyedRng::new(seed, Stream::EpochOrder, epoch * 4 + tag));
    order[(position % n as u64) as usize]
}

/// Draws `b` sound pairs and `b` speech pairs for `step` and pairs them by
/// position. Each clean input is spliced with probability `splice_prob`,
/// using the next input of the same kind in the batch as donor. The content
/// depends only on `(seed, step)`.
pub fn assemble_batch(ds: &Dataset, seed: u64, step: u64, b: usize, splice_prob: f64) -> Result<BatchInputs> {
    if b < 2 {
        return Err(Error::invalid("assemble_batch", format!("batch size must be at least 2, got {b}")));
    }
    for split in [Split::Sound, Split::Speech] {
        if ds.len(split) == 0 {
            return Err(Error::invalid("assemble_batch", format!("split {} is empty", split.name())));
        }
    }
    let pick = |split: Split| -> Vec<usize> {
        let n = ds.len(split);
        (0..b).map(|j| stream_index(seed, split, n, step * b as u64 + j as u64)).collect()
    };
    let sound_indices = pick(Split::Sound);
    let speech_indices = pick(Split::Speech);
    let sounds: Vec<&AudioSignal> = sound_indices.iter().map(|&i| &ds.sound[i].audio).collect();
    let speeches: Vec<&AudioSignal> = speech_indices.iter().map(|&i| &ds.speech[i].audio).collect();

    let mixtures = sounds
        .iter()
        .zip(&speeches)
        .map(|(s, p)| Ok(mix(s, p)?.grid))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = KeyedRng::new(seed, Stream::Batch, step);
    let frames = ds.config.frames;
    let mut splice = |signals: &[&AudioSignal]| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut grids = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for j in 0..b {
            if splice_prob > 0.0 && rng.gen_bool(splice_prob) {
                let (s, m) = splice_negative(signals[j], signals[(j + 1) % b], &mut rng)?;
                grids.push(s.grid);
                masks.push(m);
            } else {
                grids.push(signals[j].grid.clone());
                masks.push(Tensor::zeros(&[frames]));
            }
        }
        Ok((grids, masks))
    };
    let (sound_audio, sound_splice) = splice(&sounds)?;
    let (speech_audio, speech_splice) = splice(&speeches)?;

    Ok(BatchInputs {
        sound_images: sound_indices.iter().map(|&i| ds.sound[i].scene.image.clone()).collect(),
        speech_images: speech_indices.iter().map(|&i| ds.speech[i].scene.image.clone()).collect(),
        sound_indices,
        speech_indices,
        sound_audio,
        speech_audio,
        mixtures,
        sound_splice,
        speech_splice,
    })
}
