//! Procedural world: textured scenes, class-keyed sound and speech grids,
//! mixtures, and the persisted dataset splits.

pub mod audio;
pub mod dataset;
pub mod rng;
pub mod scene;

pub use audio::{mix, render_sound, render_speech, splice_negative, AudioKind, AudioSignal, TokenSpan};
pub use dataset::{make_datasets, Dataset, PairSample, Split, TripletSample};
pub use rng::{KeyedRng, Stream};
pub use scene::{gen_scene, Region, SceneObject, SceneSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a sample depicts: the object class and an instance variant shared
/// by the object's texture and the rhythm of its audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub class: usize,
    pub variant: usize,
}

impl Identity {
    pub fn new(class: usize, variant: usize) -> Self {
        Self { class, variant }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_classes: usize,
    /// Instance variants per class. 1 makes samples of a class
    /// interchangeable.
    pub variants: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub band_overlap: f64,
    pub seed: u64,
    pub sound_pairs: usize,
    pub speech_pairs: usize,
    pub extended_triplets: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            variants: 8,
            image_height: 32,
            image_width: 32,
            freq_bins: 32,
            frames: 64,
            band_overlap: 0.5,
            seed: 0,
            sound_pairs: 512,
            speech_pairs: 512,
            extended_triplets: 128,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.variants == 0 || self.variants > audio::RHYTHM_CODES.len() {
            return bad(format!("variants must be in 1..={}, got {}", audio::RHYTHM_CODES.len(), self.variants));
        }
        for (name, v) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("freq_bins", self.freq_bins),
            ("frames", self.frames),
        ] {
            if v < 4 {
                return bad(format!("{name} must be at least 4, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.band_overlap) {
            return bad(format!("band_overlap must lie in [0, 1], got {}", self.band_overlap));
        }
        if self.extended_triplets % 2 != 0 {
            return bad(format!(
                "extended_triplets must be even (each scene appears in both orderings), got {}",
                self.extended_triplets
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()))
            .collect()
    }
}

const CLASS_NAMES: [&str; 12] = [
    "bell", "drum", "horn", "siren", "whistle", "engine", "bird", "dog", "clock", "rain", "fan", "kettle",
];
