//! Geometric augmentation: random crop (resized back), horizontal flip,
//! affine warp, then per-channel normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::rng::{rng_for, TAG_AUGMENT};

use super::{DataError, LabeledImageSet};

pub const MAX_ROTATION_DEG: f64 = 45.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Per-channel mean and (population) standard deviation of a set.
    pub fn from_set(set: &LabeledImageSet) -> Self {
        let (c, h, w) = set.image_dims();
        let hw = h * w;
        let count = (set.len() * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..set.len() {
            let img = set.image(i);
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        for ch in 0..c {
            mean[ch] /= count;
            sq[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-6);
        }
        Normalization { mean, std: sq }
    }

    fn check(&self, channels: usize) -> Result<(), DataError> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(DataError::Invalid(format!(
                "normalization has {} means / {} stds for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if !self.std.iter().all(|&s| s > 0.0) {
            return Err(DataError::Invalid("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&self, batch: &mut Array) -> Result<(), DataError> {
        self.map(batch, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, batch: &mut Array) -> Result<(), DataError> {
        self.map(batch, |v, m, s| v * s + m)
    }

    fn map(&self, batch: &mut Array, f: impl Fn(f64, f64, f64) -> f64) -> Result<(), DataError> {
        let s = batch.shape().to_vec();
        self.check(s[1])?;
        let hw = s[2] * s[3];
        for (i, v) in batch.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % s[1];
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Side of the random crop window; the crop is resized back to the
    /// original size so the batch shape never changes.
    pub crop: Option<usize>,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Maximum shift as a fraction of the image side.
    pub max_translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub normalization: Option<Normalization>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop: None,
            flip_prob: 0.5,
            max_rotation_deg: MAX_ROTATION_DEG,
            max_translate: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            normalization: None,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            crop: None,
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            normalization: None,
        }
    }

    pub fn validate(&self, size: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if let Some(c) = self.crop {
            if c == 0 || c > size {
                return bad(format!("crop {c} does not fit a {size}x{size} image"));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return bad(format!("max_rotation_deg {} outside [0, 45]", self.max_rotation_deg));
        }
        if !(0.0..1.0).contains(&self.max_translate) {
            return bad(format!("max_translate {} outside [0, 1)", self.max_translate));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad(format!("scale range [{}, {}] invalid", self.scale_min, self.scale_max));
        }
        Ok(())
    }
}

/// Random draws for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub crop_offset: Option<(usize, usize)>,
    pub flip: bool,
    pub angle_deg: f64,
    pub shift: (f64, f64),
    pub scale: f64,
}

pub fn sample_params(policy: &AugmentPolicy, size: usize, rng: &mut ChaCha8Rng) -> AugmentParams {
    let crop_offset = policy.crop.map(|c| {
        let span = size - c;
        (rng.random_range(0..=span), rng.random_range(0..=span))
    });
    let flip = policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob;
    let r = policy.max_rotation_deg;
    let angle_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let t = policy.max_translate * size as f64;
    let shift = if t > 0.0 {
        (rng.random_range(-t..=t), rng.random_range(-t..=t))
    } else {
        (0.0, 0.0)
    };
    let scale = if policy.scale_max > policy.scale_min {
        rng.random_range(policy.scale_min..=policy.scale_max)
    } else {
        policy.scale_min
    };
    AugmentParams {
        crop_offset,
        flip,
        angle_deg,
        shift,
        scale,
    }
}

/// Bilinear sample of one `h`×`w` plane with zero padding outside.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (dy, dx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let mut v = 0.0;
    for (oy, wy) in [(0.0, 1.0 - dy), (1.0, dy)] {
        for (ox, wx) in [(0.0, 1.0 - dx), (1.0, dx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * at(y0 + oy, x0 + ox);
            }
        }
    }
    v
}

/// Applies flip and affine warp to one planar `[C, S, S]` image. Cropping
/// is done separately since it needs the window size.
pub fn apply_params(img: &[f64], c: usize, size: usize, p: &AugmentParams) -> Vec<f64> {
    let hw = size * size;
    let mut cur = img.to_vec();
    if p.flip {
        for ch in 0..c {
            for y in 0..size {
                cur[ch * hw + y * size..ch * hw + (y + 1) * size].reverse();
            }
        }
    }
    let identity = p.angle_deg == 0.0 && p.shift == (0.0, 0.0) && p.scale == 1.0;
    if !identity {
        let centre = (size as f64 - 1.0) / 2.0;
        let (s, co) = p.angle_deg.to_radians().sin_cos();
        let mut out = vec![0.0; cur.len()];
        for y in 0..size {
            for x in 0..size {
                // Inverse map: output pixel back to source coordinates.
                let u = x as f64 - centre - p.shift.0;
                let v = y as f64 - centre - p.shift.1;
                let sx = (co * u + s * v) / p.scale + centre;
                let sy = (-s * u + co * v) / p.scale + centre;
                for ch in 0..c {
                    out[ch * hw + y * size + x] = bilinear(&cur[ch * hw..(ch + 1) * hw], size, size, sy, sx);
                }
            }
        }
        cur = out;
    }
    cur
}

/// Crops a `crop`×`crop` window at `(oy, ox)` and resizes it back to `size`.
fn crop_resize(img: &[f64], c: usize, size: usize, crop: usize, oy: usize, ox: usize) -> Vec<f64> {
    let hw = size * size;
    let mut out = vec![0.0; c * hw];
    let ratio = crop as f64 / size as f64;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for y in 0..size {
            for x in 0..size {
                // Pixel-centre alignment; clamp keeps samples inside the window.
                let sy = ((y as f64 + 0.5) * ratio - 0.5).clamp(0.0, crop as f64 - 1.0) + oy as f64;
                let sx = ((x as f64 + 0.5) * ratio - 0.5).clamp(0.0, crop as f64 - 1.0) + ox as f64;
                out[ch * hw + y * size + x] = bilinear(plane, size, size, sy, sx);
            }
        }
    }
    out
}

/// Augments every sample independently; sample `i` draws from a stream
/// keyed by `(seed, i)`. Normalization, when set, is applied last.
pub fn augment(batch: &Array, policy: &AugmentPolicy, seed: u64) -> Result<Array, DataError> {
    let s = batch.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(DataError::Invalid(format!(
            "augment expects square [N, C, S, S] batches, got {s:?}"
        )));
    }
    let (n, c, size) = (s[0], s[1], s[2]);
    policy.validate(size)?;
    let per = c * size * size;
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..n {
        let mut rng = rng_for(seed, &[TAG_AUGMENT, i as u64]);
        let p = sample_params(policy, size, &mut rng);
        let mut img = batch.data()[i * per..(i + 1) * per].to_vec();
        if let (Some(crop), Some((oy, ox))) = (policy.crop, p.crop_offset) {
            img = crop_resize(&img, c, size, crop, oy, ox);
        }
        data.extend(apply_params(&img, c, size, &p));
    }
    let mut out = Array::new(s.to_vec(), data);
    if let Some(norm) = &policy.normalization {
        norm.apply(&mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_texture_corpus;

    #[test]
    fn identity_policy_is_identity() {
        let set = make_texture_corpus(3, 16, 1).unwrap();
        let out = augment(&set.images, &AugmentPolicy::identity(), 5).unwrap();
        assert_eq!(out, set.images);
    }

    #[test]
    fn double_flip_restores() {
        let set = make_texture_corpus(2, 8, 1).unwrap();
        let p = AugmentParams {
            crop_offset: None,
            flip: true,
            angle_deg: 0.0,
            shift: (0.0, 0.0),
            scale: 1.0,
        };
        let img = set.image(0);
        let once = apply_params(img, 1, 8, &p);
        assert_ne!(once, img);
        assert_eq!(apply_params(&once, 1, 8, &p), img);
    }

    #[test]
    fn angles_respect_bound() {
        let policy = AugmentPolicy::default();
        let mut rng = rng_for(0, &[99]);
        for _ in 0..10_000 {
            let p = sample_params(&policy, 16, &mut rng);
            assert!((-45.0..=45.0).contains(&p.angle_deg));
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let set = make_texture_corpus(1, 8, 1).unwrap();
        let policy = AugmentPolicy {
            crop: Some(9),
            ..AugmentPolicy::identity()
        };
        assert!(augment(&set.images, &policy, 0).is_err());
    }

    #[test]
    fn full_crop_is_identity() {
        let set = make_texture_corpus(2, 8, 1).unwrap();
        let policy = AugmentPolicy {
            crop: Some(8),
            ..AugmentPolicy::identity()
        };
        let out = augment(&set.images, &policy, 0).unwrap();
        for (a, b) in out.data().iter().zip(set.images.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_inverts() {
        let set = make_texture_corpus(4, 8, 2).unwrap();
        let norm = Normalization::from_set(&set);
        let mut x = set.images.clone();
        norm.apply(&mut x).unwrap();
        norm.invert(&mut x).unwrap();
        for (a, b) in x.data().iter().zip(set.images.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
