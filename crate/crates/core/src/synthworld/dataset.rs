use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audio::{mix, render_sound, render_speech, AudioKind, AudioSignal, TokenSpan, SOUND_ROW, SPEECH_ROW};
use super::rng::{KeyedRng, Stream};
use super::scene::{gen_scene, Region, SceneObject, SceneSample};
use super::{Identity, WorldConfig};
use crate::diffmath::container::{read_tensor, write_tensor};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Sound,
    Speech,
    Extended,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Sound, Split::Speech, Split::Extended];

    pub fn name(self) -> &'static str {
        match self {
            Split::Sound => "sound",
            Split::Speech => "speech",
            Split::Extended => "extended",
        }
    }
}

/// One-object scene with the clean audio of that object.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub scene: SceneSample,
    pub audio: AudioSignal,
}

impl PairSample {
    pub fn identity(&self) -> Identity {
        let o = &self.scene.objects[0];
        Identity::new(o.class, o.variant)
    }
}

/// Two-object scene where one object is heard as sound and the other is
/// named in speech.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub scene: SceneSample,
    pub sound: AudioSignal,
    pub speech: AudioSignal,
    pub mixture: AudioSignal,
    /// Index into `scene.objects` of the sounding object.
    pub sound_object: usize,
    /// Index into `scene.objects` of the spoken object.
    pub speech_object: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub sound: Vec<PairSample>,
    pub speech: Vec<PairSample>,
    pub extended: Vec<TripletSample>,
}

fn random_identity(cfg: &WorldConfig, rng: &mut KeyedRng) -> Identity {
    Identity::new(rng.gen_range(0..cfg.n_classes), rng.gen_range(0..cfg.variants))
}

fn gen_pair(cfg: &WorldConfig, split: Split, index: usize) -> Result<PairSample> {
    let stream = if split == Split::Sound { Stream::SoundPairs } else { Stream::SpeechPairs };
    let mut rng = KeyedRng::new(cfg.seed, stream, index as u64);
    let id = random_identity(cfg, &mut rng);
    let scene = gen_scene(cfg, &mut rng, &[id])?;
    let audio = if split == Split::Sound {
        render_sound(cfg, id, &mut rng)?
    } else {
        render_speech(cfg, id, &mut rng)?
    };
    Ok(PairSample { scene, audio })
}

/// Both orderings of one two-object scene: first the sound of object 0 with
/// speech naming object 1, then the reverse.
fn gen_triplet_pair(cfg: &WorldConfig, index: usize) -> Result<[TripletSample; 2]> {
    let mut rng = KeyedRng::new(cfg.seed, Stream::Extended, index as u64);
    let first = random_identity(cfg, &mut rng);
    let mut second = random_identity(cfg, &mut rng);
    // the classes differ so each head has a distinct target
    let shift = rng.gen_range(1..cfg.n_classes);
    second.class = (first.class + shift) % cfg.n_classes;
    let ids = [first, second];
    let scene = gen_scene(cfg, &mut rng, &ids)?;
    let sounds = [render_sound(cfg, ids[0], &mut rng)?, render_sound(cfg, ids[1], &mut rng)?];
    let speeches = [render_speech(cfg, ids[0], &mut rng)?, render_speech(cfg, ids[1], &mut rng)?];
    let make = |s: usize, p: usize| -> Result<TripletSample> {
        Ok(TripletSample {
            scene: scene.clone(),
            mixture: mix(&sounds[s], &speeches[p])?,
            sound: sounds[s].clone(),
            speech: speeches[p].clone(),
            sound_object: s,
            speech_object: p,
        })
    };
    Ok([make(0, 1)?, make(1, 0)?])
}

impl Dataset {
    /// Generates every split in parallel on the current rayon pool. The
    /// result does not depend on the number of threads.
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let sound = (0..cfg.sound_pairs)
            .into_par_iter()
            .map(|i| gen_pair(cfg, Split::Sound, i))
            .collect::<Result<Vec<_>>>()?;
        let speech = (0..cfg.speech_pairs)
            .into_par_iter()
            .map(|i| gen_pair(cfg, Split::Speech, i))
            .collect::<Result<Vec<_>>>()?;
        let extended = (0..cfg.extended_triplets / 2)
            .into_par_iter()
            .map(|i| gen_triplet_pair(cfg, i))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(Self {
            config: cfg.clone(),
            sound,
            speech,
            extended,
        })
    }

    pub fn pairs(&self, split: Split) -> &[PairSample] {
        match split {
            Split::Sound => &self.sound,
            Split::Speech => &self.speech,
            Split::Extended => &[],
        }
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Extended => self.extended.len(),
            s => self.pairs(s).len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut splits = Vec::new();
        for split in Split::ALL {
            let sub = dir.join(split.name());
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut records = Vec::new();
            if split == Split::Extended {
                for (i, s) in self.extended.iter().enumerate() {
                    write_scene(&sub, i, &s.scene)?;
                    write_field(&sub, i, "sound", &s.sound.grid)?;
                    write_field(&sub, i, "speech", &s.speech.grid)?;
                    write_field(&sub, i, "mixture", &s.mixture.grid)?;
                    write_field(&sub, i, "provenance", &s.mixture.provenance)?;
                    records.push(SampleRecord::new(&s.scene, &s.mixture, Some([s.sound_object, s.speech_object])));
                }
            } else {
                for (i, s) in self.pairs(split).iter().enumerate() {
                    write_scene(&sub, i, &s.scene)?;
                    write_field(&sub, i, "audio", &s.audio.grid)?;
                    write_field(&sub, i, "provenance", &s.audio.provenance)?;
                    records.push(SampleRecord::new(&s.scene, &s.audio, None));
                }
            }
            splits.push(SplitManifest {
                name: split,
                count: records.len(),
                samples: records,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            class_names: self.config.class_names(),
            config: self.config.clone(),
            splits,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let cfg = manifest.config;
        let mut out = Self {
            config: cfg.clone(),
            sound: Vec::new(),
            speech: Vec::new(),
            extended: Vec::new(),
        };
        for sm in &manifest.splits {
            if sm.count != sm.samples.len() {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("split {} declares {} samples but lists {}", sm.name.name(), sm.count, sm.samples.len()),
                });
            }
            let sub = dir.join(sm.name.name());
            for (i, rec) in sm.samples.iter().enumerate() {
                let scene = read_scene(&sub, i, rec)?;
                let provenance = read_field(&sub, i, "provenance")?;
                match sm.name {
                    Split::Extended => {
                        let [sound_object, speech_object] = rec.roles.ok_or_else(|| Error::Format {
                            path: path.clone(),
                            reason: format!("extended sample {i} lacks object roles"),
                        })?;
                        let spans = rec.spans();
                        out.extended.push(TripletSample {
                            scene,
                            sound: signal(read_field(&sub, i, "sound")?, AudioKind::Sound, only_row(&provenance, SOUND_ROW), vec![]),
                            speech: signal(read_field(&sub, i, "speech")?, AudioKind::Speech, only_row(&provenance, SPEECH_ROW), spans.clone()),
                            mixture: signal(read_field(&sub, i, "mixture")?, AudioKind::Mixture, provenance, spans),
                            sound_object,
                            speech_object,
                        });
                    }
                    split => {
                        let audio = signal(read_field(&sub, i, "audio")?, rec.kind, provenance, rec.spans());
                        let target = if split == Split::Sound { &mut out.sound } else { &mut out.speech };
                        target.push(PairSample { scene, audio });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Generates, persists, and returns all three splits.
pub fn make_datasets(cfg: &WorldConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(cfg)?;
    ds.save(dir)?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    class_names: Vec<String>,
    config: WorldConfig,
    splits: Vec<SplitManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    name: Split,
    count: usize,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    class: usize,
    variant: usize,
    /// `[top, left, height, width]`
    region: [usize; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    objects: Vec<ObjectRecord>,
    kind: AudioKind,
    /// `[class, start, end]` per spoken token.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    token_spans: Vec<[usize; 3]>,
    /// Sounding and spoken object indices of an extended sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roles: Option<[usize; 2]>,
}

impl SampleRecord {
    fn new(scene: &SceneSample, audio: &AudioSignal, roles: Option<[usize; 2]>) -> Self {
        Self {
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class: o.class,
                    variant: o.variant,
                    region: [o.region.top, o.region.left, o.region.height, o.region.width],
                })
                .collect(),
            kind: audio.kind,
            token_spans: audio.token_spans.iter().map(|s| [s.class, s.start, s.end]).collect(),
            roles,
        }
    }

    fn spans(&self) -> Vec<TokenSpan> {
        self.token_spans
            .iter()
            .map(|&[class, start, end]| TokenSpan { class, start, end })
            .collect()
    }
}

fn field_path(dir: &Path, index: usize, field: &str) -> PathBuf {
    dir.join(format!("{index}.{field}.t32"))
}

fn write_field(dir: &Path, index: usize, field: &str, t: &Tensor) -> Result<()> {
    write_tensor(&field_path(dir, index, field), t)
}

fn read_field(dir: &Path, index: usize, field: &str) -> Result<Tensor> {
    read_tensor(&field_path(dir, index, field))
}

fn write_scene(dir: &Path, index: usize, scene: &SceneSample) -> Result<()> {
    write_field(dir, index, "image", &scene.image)?;
    for (k, m) in scene.masks.iter().enumerate() {
        write_field(dir, index, &format!("mask{k}"), m)?;
    }
    Ok(())
}

fn read_scene(dir: &Path, index: usize, rec: &SampleRecord) -> Result<SceneSample> {
    let image = read_field(dir, index, "image")?;
    let masks = (0..rec.objects.len())
        .map(|k| read_field(dir, index, &format!("mask{k}")))
        .collect::<Result<Vec<_>>>()?;
    let objects = rec
        .objects
        .iter()
        .map(|o| SceneObject {
            class: o.class,
            variant: o.variant,
            region: Region {
                top: o.region[0],
                left: o.region[1],
                height: o.region[2],
                width: o.region[3],
            },
        })
        .collect();
    Ok(SceneSample { image, objects, masks })
}

fn signal(grid: Tensor, kind: AudioKind, provenance: Tensor, token_spans: Vec<TokenSpan>) -> AudioSignal {
    AudioSignal {
        grid,
        kind,
        provenance,
        token_spans,
    }
}

/// Copy of a provenance mask keeping only one constituent row.
fn only_row(provenance: &Tensor, row: usize) -> Tensor {
    let t = provenance.shape()[1];
    let mut out = provenance.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        if i / t != row {
            *x = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            sound_pairs: 24,
            speech_pairs: 20,
            extended_triplets: 8,
            seed: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn counts_and_structure() {
        let ds = Dataset::generate(&small()).unwrap();
        assert_eq!((ds.sound.len(), ds.speech.len(), ds.extended.len()), (24, 20, 8));
        for s in &ds.extended {
            assert_eq!(s.scene.masks.len(), 2);
            assert_eq!(s.mixture.kind, AudioKind::Mixture);
            assert_ne!(s.sound_object, s.speech_object);
            assert_eq!(s.mixture.token_spans[0].class, s.scene.objects[s.speech_object].class);
            assert!(s.mixture.active_frames(SOUND_ROW) > 0 && s.mixture.active_frames(SPEECH_ROW) > 0);
        }
        for pair in ds.extended.chunks(2) {
            assert_eq!(pair[0].scene, pair[1].scene);
            assert_eq!(pair[0].sound_object, pair[1].speech_object);
        }
    }

    #[test]
    fn independent_of_thread_count() {
        let cfg = small();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| Dataset::generate(&cfg)).unwrap();
        let b = four.install(|| Dataset::generate(&cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_roundtrip_and_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_datasets(&small(), dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds, back);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest["splits"][0]["count"], 24);
        assert_eq!(manifest["splits"][2]["count"], 8);
        assert!(dir.path().join("extended/7.mask1.t32").exists());
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        make_datasets(&small(), a.path()).unwrap();
        make_datasets(&small(), b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn missing_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        make_datasets(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("sound/3.audio.t32")).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("sound/3.audio.t32")),
            other => panic!("{other:?}"),
        }
    }

    /// Nearest-centroid classification over mean grids separates the
    /// classes of both audio kinds.
    #[test]
    fn classes_identifiable_by_nearest_centroid() {
        let cfg = WorldConfig::default();
        let per_class = 64;
        for speech in [false, true] {
            let grids: Vec<Vec<Vec<f32>>> = (0..cfg.n_classes)
                .map(|c| {
                    (0..per_class)
                        .map(|i| {
                            let mut rng = KeyedRng::new(0, Stream::Fixture, (c * per_class + i) as u64);
                            let id = Identity::new(c, i % cfg.variants);
                            let s = if speech { render_speech(&cfg, id, &mut rng) } else { render_sound(&cfg, id, &mut rng) };
                            // mean over time of each row
                            let g = s.unwrap().grid;
                            (0..cfg.freq_bins)
                                .map(|r| (0..cfg.frames).map(|t| g.at(&[r, t])).sum::<f32>() / cfg.frames as f32)
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let norm = |v: &[f32]| {
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                v.iter().map(|x| x / n).collect::<Vec<_>>()
            };
            let centroids: Vec<Vec<f32>> = grids
                .iter()
                .map(|g| {
                    norm(&(0..cfg.freq_bins).map(|r| g.iter().map(|p| norm(p)[r]).sum::<f32>()).collect::<Vec<_>>())
                })
                .collect();
            let mut correct = 0;
            for (c, g) in grids.iter().enumerate() {
                for p in g {
                    let p = norm(p);
                    let best = (0..cfg.n_classes)
                        .max_by(|&a, &b| {
                            let d = |k: usize| centroids[k].iter().zip(&p).map(|(x, y)| x * y).sum::<f32>();
                            d(a).total_cmp(&d(b))
                        })
                        .unwrap();
                    correct += (best == c) as usize;
                }
            }
            assert_eq!(correct, cfg.n_classes * per_class, "speech={speech}");
        }
    }
}
