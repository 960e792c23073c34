//! Procedural two-class texture corpus.
//!
//! Class 0 ("blobs") is a sum of a few wide Gaussian bumps on a dark
//! background; class 1 ("stripes") is a high-frequency oriented sinusoid.
//! The classes differ in dominant spatial frequency and mean intensity.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Array;
use crate::rng::{rng_for, TAG_CORPUS};

use super::{DataError, LabeledImageSet};

pub const CLASS_NAMES: [&str; 2] = ["blobs", "stripes"];

fn blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let count = rng.random_range(2..=4);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.12 * s..0.25 * s),
                rng.random_range(0.5..0.9),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let v: f64 = bumps
                .iter()
                .map(|&(cx, cy, sig, amp)| {
                    let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
                    amp * (-d2 / (2.0 * sig * sig)).exp()
                })
                .sum();
            out.push(0.1 + v + rng.random_range(-0.03..0.03));
        }
    }
    out
}

fn stripes(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let theta = rng.random_range(0.0..PI);
    let period = rng.random_range(2.5..4.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.3..0.45);
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * c + y as f64 * s;
            let v = 0.5 + contrast * (2.0 * PI * u / period + phase).sin();
            out.push(v + rng.random_range(-0.03..0.03));
        }
    }
    out
}

/// `n_per_class` images of each class, class 0 first, single channel.
pub fn make_texture_corpus(n_per_class: usize, size: usize, seed: u64) -> Result<LabeledImageSet, DataError> {
    if n_per_class == 0 || size < 4 {
        return Err(DataError::Invalid(format!(
            "corpus needs n_per_class >= 1 and size >= 4, got {n_per_class} and {size}"
        )));
    }
    let mut data = Vec::with_capacity(2 * n_per_class * size * size);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2usize {
        for i in 0..n_per_class {
            let mut rng = rng_for(seed, &[TAG_CORPUS, class as u64, i as u64]);
            let img = if class == 0 {
                blobs(&mut rng, size)
            } else {
                stripes(&mut rng, size)
            };
            data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    LabeledImageSet::new(
        Array::new(vec![2 * n_per_class, 1, size, size], data),
        labels,
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        format!("texture-corpus(n={n_per_class},size={size},seed={seed})"),
    )
}
