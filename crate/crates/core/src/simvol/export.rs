use std::fs;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Bilinear resize of an `[H, W]` map with half-pixel centres and edge
/// clamping.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.rank() != 2 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "upsample_bilinear",
            format!("cannot resize {:?} to [{out_h}, {out_w}]", map.shape()),
        ));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let d = map.data();
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let at = |r: usize, c: usize| d[r * w + c] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// 8-bit binary PGM of an `[H, W]` map, min-max normalised. A constant map
/// encodes as all zeros.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::invalid("encode_pgm", format!("expected [H, W], got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&x| {
        if range > 0.0 {
            ((x - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(bytes)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}
