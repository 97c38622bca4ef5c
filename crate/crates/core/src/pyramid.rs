//! Fixed binomial-pyramid low-pass, the non-learned alternative to the
//! wavelet path for frequency-target construction.
//!
//! Blur with the 5-tap binomial kernel [1,4,6,4,1]/16 (separable,
//! periodic), decimate by 2 down to the target size, then expand back by
//! zero-insertion and a gain-2 blur per level. Pure `f64` code; the basis
//! carries no gradient.

use crate::error::{Error, Result};

const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Periodic separable blur of a [C,H,W] buffer.
fn blur(src: &[f64], c: usize, h: usize, w: usize, gain: f64) -> Vec<f64> {
    let mut horiz = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in KERNEL.iter().enumerate() {
                    let xx = (x + w + j - 2) % w;
                    acc += k * src[ch * h * w + y * w + xx];
                }
                horiz[ch * h * w + y * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0;
                for (j, k) in KERNEL.iter().enumerate() {
                    let yy = (y + h + j - 2) % h;
                    acc += k * horiz[ch * h * w + yy * w + x];
                }
                out[ch * h * w + y * w + x] = gain * acc;
            }
        }
    }
    out
}

/// Low-pass reconstruction of a square [C,H,W] image through `L =
/// log2(H/target_s)` pyramid levels, returned at the input size.
pub fn lowpass(values: &[f64], c: usize, hw: usize, target_s: usize) -> Result<Vec<f64>> {
    if values.len() != c * hw * hw {
        return Err(Error::invalid(format!(
            "pyramid lowpass: buffer {} does not match {c}x{hw}x{hw}",
            values.len()
        )));
    }
    if target_s == 0 || hw % target_s != 0 || !(hw / target_s).is_power_of_two() {
        return Err(Error::invalid(format!(
            "pyramid lowpass: {hw} does not reach {target_s} by repeated halving"
        )));
    }
    let levels = (hw / target_s).trailing_zeros() as usize;
    let mut cur = values.to_vec();
    let mut size = hw;
    for _ in 0..levels {
        let blurred = blur(&cur, c, size, size, 1.0);
        let half = size / 2;
        let mut down = vec![0.0; c * half * half];
        for ch in 0..c {
            for y in 0..half {
                for x in 0..half {
                    down[ch * half * half + y * half + x] =
                        blurred[ch * size * size + 2 * y * size + 2 * x];
                }
            }
        }
        cur = down;
        size = half;
    }
    for _ in 0..levels {
        let big = size * 2;
        let mut up = vec![0.0; c * big * big];
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    up[ch * big * big + 2 * y * big + 2 * x] =
                        cur[ch * size * size + y * size + x];
                }
            }
        }
        // zero-insertion halves the DC content per axis → gain 4 restores it
        cur = blur(&up, c, big, big, 4.0);
        size = big;
    }
    Ok(cur)
}
