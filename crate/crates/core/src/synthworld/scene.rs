use rand::Rng;

use super::rng::KeyedRng;
use super::{Identity, WorldConfig};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_AREA_FRACTION: f64 = 0.10;
const MAX_AREA_FRACTION: f64 = 0.25;

/// Axis-aligned object footprint in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub class: usize,
    pub variant: usize,
    pub region: Region,
}

/// Rendered scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    /// One `[H, W]` binary mask per object.
    pub masks: Vec<Tensor>,
}

/// RGB colour of a class: hues spaced evenly around the colour wheel.
pub fn class_color(class: usize, n_classes: usize) -> [f32; 3] {
    let h = class as f64 / n_classes as f64 * 6.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Whether pixel `(y, x)` of an object lies on a stripe. Orientation and
/// period are keyed by the instance variant.
fn on_stripe(variant: usize, y: usize, x: usize) -> bool {
    let period = 2 + (variant / 4) % 3;
    let coord = match variant % 4 {
        0 => y,
        1 => x,
        2 => x + y,
        _ => x + 64 - y % 64,
    };
    (coord / period) % 2 == 0
}

fn sample_region(cfg: &WorldConfig, rng: &mut KeyedRng) -> Option<Region> {
    let (h_img, w_img) = (cfg.image_height, cfg.image_width);
    let total = (h_img * w_img) as f64;
    let frac = rng.gen_range(MIN_AREA_FRACTION..MAX_AREA_FRACTION);
    let aspect = rng.gen_range(0.75..4.0 / 3.0);
    let h = ((frac * total * aspect).sqrt().round() as usize).clamp(1, h_img);
    let w_lo = (MIN_AREA_FRACTION * total / h as f64).ceil() as usize;
    let w_hi = (MAX_AREA_FRACTION * total / h as f64).floor() as usize;
    let w = ((frac * total / h as f64).round() as usize).clamp(w_lo.max(1), w_hi.min(w_img));
    let area = (h * w) as f64 / total;
    if w > w_img || !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&area) {
        return None;
    }
    Some(Region {
        top: rng.gen_range(0..=h_img - h),
        left: rng.gen_range(0..=w_img - w),
        height: h,
        width: w,
    })
}

/// Renders a scene with one object per entry of `objects`, placed at
/// random non-overlapping regions covering 10-25% of the image each.
pub fn gen_scene(cfg: &WorldConfig, rng: &mut KeyedRng, objects_in: &[Identity]) -> Result<SceneSample> {
    if let Some(bad) = objects_in.iter().find(|o| o.class >= cfg.n_classes || o.variant >= cfg.variants) {
        return Err(Error::invalid("gen_scene", format!("{bad:?} out of range")));
    }
    let (h_img, w_img) = (cfg.image_height, cfg.image_width);
    // each attempt samples a complete layout, so an early object cannot
    // block the later ones for good
    let mut layout = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut regions: Vec<Region> = Vec::with_capacity(objects_in.len());
        for _ in objects_in {
            match sample_region(cfg, rng) {
                Some(r) if regions.iter().all(|o| !o.overlaps(&r)) => regions.push(r),
                _ => break,
            }
        }
        if regions.len() == objects_in.len() {
            layout = Some(regions);
            break;
        }
    }
    let regions = layout.ok_or(Error::Placement {
        objects: objects_in.len(),
        attempts: PLACEMENT_ATTEMPTS,
        seed: rng.seed(),
        sample: rng.index(),
    })?;
    let objects: Vec<SceneObject> = objects_in
        .iter()
        .zip(regions)
        .map(|(id, region)| SceneObject {
            class: id.class,
            variant: id.variant,
            region,
        })
        .collect();

    let plane = h_img * w_img;
    let mut image = vec![0f32; 3 * plane];
    for px in image.iter_mut() {
        *px = 0.05 + 0.1 * rng.gen::<f32>();
    }
    for obj in &objects {
        let color = class_color(obj.class, cfg.n_classes);
        let r = obj.region;
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                let shade = if on_stripe(obj.variant, y, x) { 1.0 } else { 0.55 };
                for (ch, &c) in color.iter().enumerate() {
                    let jitter = 0.95 + 0.05 * rng.gen::<f32>();
                    image[ch * plane + y * w_img + x] = (c * shade * jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
    let masks = objects
        .iter()
        .map(|o| Tensor::from_fn(&[h_img, w_img], |i| if o.region.contains(i / w_img, i % w_img) { 1.0 } else { 0.0 }))
        .collect();
    Ok(SceneSample {
        image: Tensor::new(vec![3, h_img, w_img], image)?,
        objects,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::super::rng::Stream;
    use super::*;

    fn area_fraction(mask: &Tensor) -> f64 {
        mask.data().iter().map(|&x| x as f64).sum::<f64>() / mask.numel() as f64
    }

    #[test]
    fn one_object_area_within_bounds() {
        let cfg = WorldConfig::default();
        for i in 0..200 {
            let mut rng = KeyedRng::new(7, Stream::Fixture, i);
            let s = gen_scene(&cfg, &mut rng, &[Identity::new((i % 8) as usize, (i % 5) as usize)]).unwrap();
            let f = area_fraction(&s.masks[0]);
            assert!((0.10..=0.25).contains(&f), "fraction {f}");
            assert!(s.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn two_object_masks_disjoint() {
        let cfg = WorldConfig::default();
        for i in 0..200 {
            let mut rng = KeyedRng::new(1, Stream::Fixture, i);
            let s = gen_scene(&cfg, &mut rng, &[Identity::new(0, 1), Identity::new(5, 2)]).unwrap();
            let inter: f32 = s.masks[0].data().iter().zip(s.masks[1].data()).map(|(a, b)| a * b).sum();
            assert_eq!(inter, 0.0);
            for m in &s.masks {
                assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = WorldConfig::default();
        let a = gen_scene(&cfg, &mut KeyedRng::new(3, Stream::Fixture, 9), &[Identity::new(2, 0), Identity::new(3, 7)]).unwrap();
        let b = gen_scene(&cfg, &mut KeyedRng::new(3, Stream::Fixture, 9), &[Identity::new(2, 0), Identity::new(3, 7)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crowded_scene_rejected_with_seed() {
        let cfg = WorldConfig::default();
        let err = gen_scene(&cfg, &mut KeyedRng::new(11, Stream::Fixture, 4), &(0..11).map(|c| Identity::new(c % 8, 0)).collect::<Vec<_>>()).unwrap_err();
        match err {
            Error::Placement { seed, sample, .. } => assert_eq!((seed, sample), (11, 4)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn class_colors_are_distinct() {
        for a in 0..8 {
            for b in 0..a {
                let (ca, cb) = (class_color(a, 8), class_color(b, 8));
                let d: f32 = ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 0.3, "{a} vs {b}");
            }
        }
    }
}
