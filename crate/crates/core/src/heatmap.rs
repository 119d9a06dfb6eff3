//! Single-channel feature visualisation: channel mean, min-max scaled to
//! 8-bit, written as binary PGM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel mean of image `n` of a `B×C×H×W` tensor, as `(h, w, values)`.
pub fn channel_mean(t: &Tensor, n: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (b, c, h, w) = t.dims4()?;
    if n >= b {
        return Err(Error::invalid("heatmap", format!("image {n} of a batch of {b}")));
    }
    let plane = h * w;
    let mut acc = vec![0.0; plane];
    for ch in 0..c {
        let src = &t.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
        for (a, &v) in acc.iter_mut().zip(src) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= c as f64);
    Ok((h, w, acc))
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Channel-mean heatmap of the first image in `t`.
pub fn heatmap_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, v) = channel_mean(t, 0)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "heatmap source".into() });
    }
    Ok(encode_pgm(h, w, &to_gray(&v)))
}

pub fn write_heatmap(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, heatmap_pgm(t)?)?;
    Ok(())
}
