use rand::Rng;

use super::rng::KeyedRng;
use super::{Identity, WorldConfig};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioKind {
    Sound,
    Speech,
    Mixture,
    Silence,
}

/// A spoken class token occupying frames `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSpan {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// Time-frequency grid with provenance bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    /// `[F, T]`, values in `[0, 1]`; row 0 is the lowest frequency.
    pub grid: Tensor,
    pub kind: AudioKind,
    /// `[2, T]`: row 0 marks frames carrying sound, row 1 frames carrying speech.
    pub provenance: Tensor,
    pub token_spans: Vec<TokenSpan>,
}

/// Row of the provenance mask for each constituent kind.
pub const SOUND_ROW: usize = 0;
pub const SPEECH_ROW: usize = 1;

impl AudioSignal {
    pub fn silence(cfg: &WorldConfig) -> Self {
        Self {
            grid: Tensor::zeros(&[cfg.freq_bins, cfg.frames]),
            kind: AudioKind::Silence,
            provenance: Tensor::zeros(&[2, cfg.frames]),
            token_spans: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn active_frames(&self, row: usize) -> usize {
        let t = self.frames();
        self.provenance.data()[row * t..(row + 1) * t].iter().filter(|&&x| x > 0.0).count()
    }
}

/// Exclusive upper row of the sound band: the lower `(1 + overlap) / 2`
/// of the frequency axis.
pub fn sound_band_top(cfg: &WorldConfig) -> usize {
    ((cfg.freq_bins as f64 * (1.0 + cfg.band_overlap) / 2.0).ceil() as usize).min(cfg.freq_bins)
}

/// First row of the speech band: the upper `(1 + overlap) / 2` of the axis.
pub fn speech_band_bottom(cfg: &WorldConfig) -> usize {
    (cfg.freq_bins as f64 * (1.0 - cfg.band_overlap) / 2.0).floor() as usize
}

/// Rows of the harmonic stack `{f0, 2 f0, 3 f0}` of a sound class, limited
/// to the sound band. The first entry is the class-keyed base row.
pub fn sound_rows(cfg: &WorldConfig, class: usize) -> Vec<usize> {
    let band = sound_band_top(cfg);
    let unit = (band / 3).max(1);
    let base = if cfg.n_classes <= unit {
        class * unit / cfg.n_classes
    } else {
        class * band / cfg.n_classes
    };
    (1..=3).map(|h| (base + 1) * h - 1).filter(|&r| r < band).collect()
}

/// Formant rows spoken for a class in order. The speech band is cut into
/// three sub-bands, one per formant, and the class picks the row inside
/// each.
pub fn speech_rows(cfg: &WorldConfig, class: usize) -> [usize; 3] {
    let lo = speech_band_bottom(cfg);
    let sub = ((cfg.freq_bins - lo) / 3).max(1);
    let offset = class * sub / cfg.n_classes.max(1);
    [0, 1, 2].map(|k| (lo + k * sub + offset).min(cfg.freq_bins - 1))
}

/// Four-frame amplitude codes, one per instance variant, anchored at frame 0.
/// A set bit plays at full level, a clear bit at `RHYTHM_LOW`.
pub const RHYTHM_CODES: [[bool; 4]; 8] = [
    [true, true, true, true],
    [true, false, true, false],
    [true, true, false, false],
    [true, false, false, false],
    [true, true, true, false],
    [true, false, false, true],
    [true, true, false, true],
    [true, false, true, true],
];
pub const RHYTHM_LOW: f32 = 0.35;

pub fn rhythm_gain(variant: usize, frame: usize) -> f32 {
    if RHYTHM_CODES[variant % RHYTHM_CODES.len()][frame % 4] {
        1.0
    } else {
        RHYTHM_LOW
    }
}

fn put_max(grid: &mut [f32], frames: usize, row: usize, t: usize, v: f32) {
    let cell = &mut grid[row * frames + t];
    *cell = cell.max(v.clamp(0.0, 1.0));
}

/// Harmonic stack of a sound class, gated by a random on/off envelope and
/// modulated by the variant's rhythm code.
pub fn render_sound(cfg: &WorldConfig, id: Identity, rng: &mut KeyedRng) -> Result<AudioSignal> {
    check_identity("render_sound", cfg, id)?;
    let Identity { class, variant } = id;
    let (f, t) = (cfg.freq_bins, cfg.frames);
    let band = sound_band_top(cfg);
    let rows = sound_rows(cfg, class);
    let mut envelope = vec![0f32; t];
    let mut start = 0;
    while start < t {
        let len = rng.gen_range(3..=10).min(t - start);
        if rng.gen_bool(0.6) {
            let amp = rng.gen_range(0.6..1.0);
            envelope[start..start + len].iter_mut().for_each(|e| *e = amp);
        }
        start += len;
    }
    if envelope.iter().all(|&e| e == 0.0) {
        let len = (t / 4).max(1);
        let s = rng.gen_range(0..=t - len);
        envelope[s..s + len].iter_mut().for_each(|e| *e = 0.8);
    }

    let mut grid = vec![0f32; f * t];
    const HARMONIC_GAIN: [f32; 3] = [1.0, 0.7, 0.5];
    for (h, &row) in rows.iter().enumerate() {
        for (ti, &e) in envelope.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            let v = e * HARMONIC_GAIN[h] * rhythm_gain(variant, ti);
            put_max(&mut grid, t, row, ti, v);
            for nb in [row.wrapping_sub(1), row + 1] {
                if nb < band {
                    put_max(&mut grid, t, nb, ti, 0.35 * v);
                }
            }
        }
    }
    let mut provenance = vec![0f32; 2 * t];
    for (ti, &e) in envelope.iter().enumerate() {
        if e > 0.0 {
            provenance[SOUND_ROW * t + ti] = 1.0;
        }
    }
    Ok(AudioSignal {
        grid: Tensor::new(vec![f, t], grid)?,
        kind: AudioKind::Sound,
        provenance: Tensor::new(vec![2, t], provenance)?,
        token_spans: Vec::new(),
    })
}

fn check_identity(op: &'static str, cfg: &WorldConfig, id: Identity) -> Result<()> {
    if id.class >= cfg.n_classes || id.variant >= cfg.variants {
        return Err(Error::invalid(op, format!("{id:?} out of range")));
    }
    Ok(())
}

/// A spoken class name: three formant blobs in class-keyed order starting
/// at a random frame, modulated by the variant's rhythm code.
pub fn render_speech(cfg: &WorldConfig, id: Identity, rng: &mut KeyedRng) -> Result<AudioSignal> {
    check_identity("render_speech", cfg, id)?;
    let Identity { class, variant } = id;
    let (f, t) = (cfg.freq_bins, cfg.frames);
    let lo = speech_band_bottom(cfg);
    let rows = speech_rows(cfg, class);
    let durations: Vec<usize> = (0..3).map(|_| rng.gen_range(6..=9)).collect();
    let total: usize = durations.iter().sum::<usize>().min(t);
    let start = rng.gen_range(0..=t - total);

    let mut grid = vec![0f32; f * t];
    let mut cursor = start;
    for (&row, &dur) in rows.iter().zip(&durations) {
        let amp = rng.gen_range(0.75..1.0);
        for k in 0..dur {
            let ti = cursor + k;
            if ti >= t {
                break;
            }
            let v = amp * rhythm_gain(variant, ti);
            put_max(&mut grid, t, row, ti, v);
            for nb in [row.wrapping_sub(1), row + 1] {
                if nb >= lo && nb < f {
                    put_max(&mut grid, t, nb, ti, 0.5 * v);
                }
            }
        }
        cursor += dur;
    }
    let end = (start + total).min(t);
    let mut provenance = vec![0f32; 2 * t];
    provenance[SPEECH_ROW * t + start..SPEECH_ROW * t + end].iter_mut().for_each(|x| *x = 1.0);
    Ok(AudioSignal {
        grid: Tensor::new(vec![f, t], grid)?,
        kind: AudioKind::Speech,
        provenance: Tensor::new(vec![2, t], provenance)?,
        token_spans: vec![TokenSpan { class, start, end }],
    })
}

/// Additive mixture clamped to `[0, 1]`. Mixing with silence returns the
/// other signal unchanged.
pub fn mix(a: &AudioSignal, b: &AudioSignal) -> Result<AudioSignal> {
    if a.grid.shape() != b.grid.shape() {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: a.grid.shape().to_vec(),
            right: b.grid.shape().to_vec(),
        });
    }
    if a.kind == AudioKind::Mixture || b.kind == AudioKind::Mixture {
        return Err(Error::invalid("mix", "inputs must be clean sound, speech or silence"));
    }
    match (a.kind, b.kind) {
        (_, AudioKind::Silence) => return Ok(a.clone()),
        (AudioKind::Silence, _) => return Ok(b.clone()),
        _ => {}
    }
    let grid = Tensor::new(
        a.grid.shape().to_vec(),
        a.grid.data().iter().zip(b.grid.data()).map(|(x, y)| (x + y).clamp(0.0, 1.0)).collect(),
    )?;
    let provenance = Tensor::new(
        a.provenance.shape().to_vec(),
        a.provenance.data().iter().zip(b.provenance.data()).map(|(x, y)| x.max(*y)).collect(),
    )?;
    let mut token_spans = a.token_spans.clone();
    token_spans.extend_from_slice(&b.token_spans);
    Ok(AudioSignal {
        grid,
        kind: AudioKind::Mixture,
        provenance,
        token_spans,
    })
}

/// Replaces a contiguous `rho`-fraction of the frames with the donor's
/// frames. The returned `[T]` mask is 1 on the replaced interval except for
/// linear ramps over its two outermost frames at each edge.
pub fn splice_with_fraction(
    audio: &AudioSignal,
    donor: &AudioSignal,
    rho: f64,
    rng: &mut KeyedRng,
) -> Result<(AudioSignal, Tensor)> {
    if audio.grid.shape() != donor.grid.shape() {
        return Err(Error::ShapeMismatch {
            op: "splice_negative",
            left: audio.grid.shape().to_vec(),
            right: donor.grid.shape().to_vec(),
        });
    }
    let (f, t) = (audio.grid.shape()[0], audio.frames());
    let len = ((rho * t as f64).round() as usize).min(t);
    let mut mask = vec![0f32; t];
    let mut out = audio.clone();
    if len == 0 {
        return Ok((out, Tensor::new(vec![t], mask)?));
    }
    let start = rng.gen_range(0..=t - len);
    for ti in start..start + len {
        let edge = (ti - start).min(start + len - 1 - ti);
        mask[ti] = if edge >= 2 { 1.0 } else { (edge + 1) as f32 / 3.0 };
        for row in 0..f {
            out.grid.data_mut()[row * t + ti] = donor.grid.data()[row * t + ti];
        }
        for row in 0..2 {
            out.provenance.data_mut()[row * t + ti] = 0.0;
        }
    }
    Ok((out, Tensor::new(vec![t], mask)?))
}

/// Splices a random interval with `rho ~ U[0.1, 0.3]`.
pub fn splice_negative(audio: &AudioSignal, donor: &AudioSignal, rng: &mut KeyedRng) -> Result<(AudioSignal, Tensor)> {
    let rho = rng.gen_range(0.1..0.3);
    splice_with_fraction(audio, donor, rho, rng)
}

#[cfg(test)]
mod tests {
    use super::super::rng::Stream;
    use super::*;

    fn rng(i: u64) -> KeyedRng {
        KeyedRng::new(5, Stream::Fixture, i)
    }

    fn active_rows(s: &AudioSignal) -> Vec<usize> {
        let t = s.frames();
        (0..s.grid.shape()[0])
            .filter(|&r| s.grid.data()[r * t..(r + 1) * t].iter().any(|&x| x > 0.0))
            .collect()
    }

    #[test]
    fn sound_occupies_harmonic_rows_only() {
        let cfg = WorldConfig::default();
        for class in 0..cfg.n_classes {
            let s = render_sound(&cfg, Identity::new(class, class % 3), &mut rng(class as u64)).unwrap();
            let rows = sound_rows(&cfg, class);
            assert!(rows.len() <= 3);
            for r in active_rows(&s) {
                assert!(rows.iter().any(|&h| h.abs_diff(r) <= 1), "class {class} row {r}");
            }
            for ti in 0..s.frames() {
                let energy: f32 = (0..cfg.freq_bins).map(|r| s.grid.at(&[r, ti])).sum();
                let active = s.provenance.at(&[SOUND_ROW, ti]) > 0.0;
                assert_eq!(active, energy > 0.0);
            }
            assert!(s.active_frames(SOUND_ROW) > 0);
        }
    }

    #[test]
    fn base_rows_are_injective() {
        let cfg = WorldConfig::default();
        let bases: Vec<usize> = (0..cfg.n_classes).map(|c| sound_rows(&cfg, c)[0]).collect();
        let mut dedup = bases.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), bases.len());
    }

    #[test]
    fn speech_spans_within_bounds() {
        let cfg = WorldConfig::default();
        for i in 0..50 {
            let s = render_speech(&cfg, Identity::new((i % 8) as usize, (i % 8) as usize), &mut rng(i)).unwrap();
            assert_eq!(s.token_spans.len(), 1);
            let sp = s.token_spans[0];
            assert!(sp.start < sp.end && sp.end <= cfg.frames);
            assert_eq!(s.active_frames(SPEECH_ROW), sp.end - sp.start);
        }
    }

    #[test]
    fn zero_overlap_separates_bands() {
        let cfg = WorldConfig {
            band_overlap: 0.0,
            ..WorldConfig::default()
        };
        for class in 0..cfg.n_classes {
            let a = active_rows(&render_sound(&cfg, Identity::new(class, 0), &mut rng(1)).unwrap());
            for other in 0..cfg.n_classes {
                let b = active_rows(&render_speech(&cfg, Identity::new(other, 3), &mut rng(2)).unwrap());
                assert!(a.iter().all(|r| !b.contains(r)), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn speech_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(
            render_speech(&cfg, Identity::new(4, 2), &mut rng(8)).unwrap(),
            render_speech(&cfg, Identity::new(4, 2), &mut rng(8)).unwrap()
        );
    }

    #[test]
    fn mix_identity_commutativity_union() {
        let cfg = WorldConfig::default();
        let a = render_sound(&cfg, Identity::new(2, 1), &mut rng(1)).unwrap();
        let b = render_speech(&cfg, Identity::new(6, 4), &mut rng(2)).unwrap();
        assert_eq!(mix(&a, &AudioSignal::silence(&cfg)).unwrap().grid, a.grid);
        let ab = mix(&a, &b).unwrap();
        let ba = mix(&b, &a).unwrap();
        assert_eq!(ab.grid, ba.grid);
        assert_eq!(ab.kind, AudioKind::Mixture);
        assert_eq!(ab.token_spans, b.token_spans);
        let active = |s: &AudioSignal| (0..s.frames()).filter(|&t| s.provenance.at(&[0, t]) > 0.0 || s.provenance.at(&[1, t]) > 0.0).count();
        assert!(active(&ab) >= active(&a).max(active(&b)));
        assert!(ab.active_frames(SOUND_ROW) > 0 && ab.active_frames(SPEECH_ROW) > 0);
        assert!(mix(&ab, &a).is_err());
        assert!(ab.grid.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn splice_mask_and_content() {
        let cfg = WorldConfig::default();
        let a = render_sound(&cfg, Identity::new(1, 0), &mut rng(3)).unwrap();
        let d = render_speech(&cfg, Identity::new(3, 0), &mut rng(4)).unwrap();
        for i in 0..40 {
            let (s, m) = splice_negative(&a, &d, &mut rng(100 + i)).unwrap();
            let replaced: Vec<usize> = (0..cfg.frames).filter(|&t| m.data()[t] > 0.0).collect();
            let len = replaced.len();
            assert!(len >= (0.1 * 64.0f64).round() as usize - 1 && len <= 20, "{len}");
            assert_eq!(replaced.last().unwrap() - replaced[0] + 1, len);
            // each edge ramp (1/3, 2/3) loses 1 frame of mass in total
            let total: f32 = m.data().iter().sum();
            assert!((total - (len as f32 - 2.0)).abs() < 1e-5 || len < 4, "{total} {len}");
            for t in 0..cfg.frames {
                let col = |g: &Tensor| (0..cfg.freq_bins).map(|r| g.at(&[r, t])).collect::<Vec<_>>();
                if m.data()[t] == 1.0 {
                    assert_eq!(col(&s.grid), col(&d.grid));
                } else if m.data()[t] == 0.0 {
                    assert_eq!(col(&s.grid), col(&a.grid));
                }
            }
        }
        let (same, m0) = splice_with_fraction(&a, &d, 0.0, &mut rng(1)).unwrap();
        assert_eq!(same, a);
        assert!(m0.data().iter().all(|&x| x == 0.0));
    }
}
