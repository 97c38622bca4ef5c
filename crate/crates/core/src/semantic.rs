//! Deterministic semantic-feature stand-in.
//!
//! Plays the role of a pretrained vision encoder: maps a clean image plus
//! its label to a per-patch token grid that summarizes coarse appearance
//! and identity. Per grid cell the features are pooled channel means,
//! pooled horizontal/vertical gradient magnitudes, and a class one-hot;
//! a fixed seeded Gaussian projection lifts them to model width and each
//! token is standardized. Everything is a pure function of (image, label,
//! geometry, seed) — no learned state, no gradients.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::rand_core::SeedableRng;

/// Geometry of the produced token grid.
#[derive(Debug, Clone, Copy)]
pub struct SemanticSpec {
    pub channels: usize,
    pub image_hw: usize,
    pub patch: usize,
    pub num_classes: usize,
    pub width: usize,
    pub seed: u64,
}

impl SemanticSpec {
    pub fn tokens(&self) -> usize {
        let g = self.image_hw / self.patch;
        g * g
    }

    fn raw_features(&self) -> usize {
        self.channels + 2 + self.num_classes
    }

    /// The fixed projection matrix [raw_features, width], seeded.
    fn projection(&self) -> Vec<f64> {
        // "semantic" in ASCII, salting the run seed
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x73656d616e746963);
        let f = self.raw_features();
        let dist = Normal::new(0.0, 1.0 / (f as f64).sqrt()).unwrap();
        (0..f * self.width).map(|_| dist.sample(&mut rng)).collect()
    }
}

/// Encode one [C,H,W] image (+ label) to a [T, width] token grid, row-major.
pub fn encode(spec: &SemanticSpec, values: &[f64], label: usize) -> Result<Vec<f64>> {
    let c = spec.channels;
    let hw = spec.image_hw;
    let p = spec.patch;
    if values.len() != c * hw * hw {
        return Err(Error::invalid(format!(
            "semantic encode: buffer {} does not match {c}x{hw}x{hw}",
            values.len()
        )));
    }
    if hw % p != 0 {
        return Err(Error::invalid(format!(
            "semantic encode: image {hw} not divisible by patch {p}"
        )));
    }
    if label > spec.num_classes {
        return Err(Error::invalid(format!(
            "semantic encode: label {label} outside 0..={}",
            spec.num_classes
        )));
    }
    let g = hw / p;
    let f = spec.raw_features();
    let proj = spec.projection();
    let mut out = vec![0.0; g * g * spec.width];
    let mut feat = vec![0.0; f];
    for gy in 0..g {
        for gx in 0..g {
            for s in feat.iter_mut() {
                *s = 0.0;
            }
            let area = (p * p) as f64;
            for ch in 0..c {
                let mut mean = 0.0;
                let mut dx = 0.0;
                let mut dy = 0.0;
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        let v = values[ch * hw * hw + y * hw + x];
                        mean += v;
                        if x + 1 < hw {
                            dx += (values[ch * hw * hw + y * hw + x + 1] - v).abs();
                        }
                        if y + 1 < hw {
                            dy += (values[ch * hw * hw + (y + 1) * hw + x] - v).abs();
                        }
                    }
                }
                feat[ch] += mean / area;
                feat[c] += dx / area / c as f64;
                feat[c + 1] += dy / area / c as f64;
            }
            if label < spec.num_classes {
                feat[c + 2 + label] = 1.0;
            }
            let token = &mut out[(gy * g + gx) * spec.width..(gy * g + gx + 1) * spec.width];
            for (j, t) in token.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &fv) in feat.iter().enumerate() {
                    acc += fv * proj[i * spec.width + j];
                }
                *t = acc;
            }
            // standardize the token
            let mean: f64 = token.iter().sum::<f64>() / spec.width as f64;
            let var: f64 =
                token.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / spec.width as f64;
            let inv = 1.0 / (var.sqrt() + 1e-6);
            for t in token.iter_mut() {
                *t = (*t - mean) * inv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SemanticSpec {
        SemanticSpec {
            channels: 1,
            image_hw: 8,
            patch: 4,
            num_classes: 3,
            width: 16,
            seed: 42,
        }
    }

    #[test]
    fn deterministic_and_label_sensitive() {
        let s = spec();
        let img: Vec<f64> = (0..64).map(|i| (i as f64 / 63.0) * 2.0 - 1.0).collect();
        let a = encode(&s, &img, 1).unwrap();
        let b = encode(&s, &img, 1).unwrap();
        let c = encode(&s, &img, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), s.tokens() * s.width);
    }

    #[test]
    fn image_content_matters() {
        let s = spec();
        let flat = vec![0.0; 64];
        let mut bumped = flat.clone();
        bumped[10] = 1.0;
        let a = encode(&s, &flat, 0).unwrap();
        let b = encode(&s, &bumped, 0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn tokens_are_standardized() {
        let s = spec();
        let img: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 32.0 - 1.0).collect();
        let enc = encode(&s, &img, 2).unwrap();
        for t in 0..s.tokens() {
            let tok = &enc[t * s.width..(t + 1) * s.width];
            let mean: f64 = tok.iter().sum::<f64>() / s.width as f64;
            let var: f64 = tok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / s.width as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn null_label_is_accepted_as_no_class() {
        let s = spec();
        let img = vec![0.1; 64];
        let enc = encode(&s, &img, s.num_classes).unwrap();
        assert_eq!(enc.len(), s.tokens() * s.width);
        assert!(encode(&s, &img, s.num_classes + 1).is_err());
    }

    #[test]
    fn validates_buffer_size() {
        let s = spec();
        assert!(encode(&s, &[0.0; 10], 0).is_err());
    }
}
