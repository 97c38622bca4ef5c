//! Depthwise stride-2 convolution and its transpose.
//!
//! The transpose is built as the literal adjoint of the forward index map,
//! so the inner-product identity ⟨conv(x,k), y⟩ = ⟨x, convᵀ(y,k)⟩ holds to
//! rounding for every padding mode, batch layout, and odd extent. Odd
//! extents are first evened by one reflected row/column on the high side;
//! the output extent is always ⌈n/2⌉ and the transpose folds that reflected
//! contribution back.

use super::{make_result, Tensor};
use crate::error::{Error, Result};

/// Boundary handling for the padded stride-2 window walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zero,
    /// Whole-sample mirror (edge not repeated).
    Reflect,
    /// Circular wrap; with an orthonormal filter bank this makes the
    /// analysis operator orthogonal, hence exactly invertible.
    Periodic,
}

/// Whole-sample reflection of `v` into [0, m).
fn reflect_index(v: isize, m: usize) -> usize {
    let m = m as isize;
    if m == 1 {
        return 0;
    }
    let period = 2 * m - 2;
    let mut r = v % period;
    if r < 0 {
        r += period;
    }
    if r >= m {
        r = period - r;
    }
    r as usize
}

/// For one axis of length `n`: source index (None = zero) for every padded
/// coordinate, plus the output extent ⌈n/2⌉.
fn axis_map(n: usize, klen: usize, mode: PadMode) -> (Vec<Option<usize>>, usize) {
    let n_even = n + (n & 1);
    let out = n_even / 2;
    let pad_left = (klen - 2) / 2;
    let padded = n_even + klen - 2;
    // index in the evened signal → index in the stored signal
    let resolve = |v: usize| -> usize {
        if v < n {
            v
        } else {
            n - 2 // the appended reflected sample
        }
    };
    let mut map = Vec::with_capacity(padded);
    for p in 0..padded {
        let v = p as isize - pad_left as isize;
        let idx = if v >= 0 && (v as usize) < n_even {
            Some(resolve(v as usize))
        } else {
            match mode {
                PadMode::Zero => None,
                PadMode::Reflect => Some(resolve(reflect_index(v, n_even))),
                PadMode::Periodic => {
                    let m = n_even as isize;
                    Some(resolve(((v % m + m) % m) as usize))
                }
            }
        };
        map.push(idx);
    }
    (map, out)
}

struct ConvDims {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    rank4: bool,
}

fn check_conv_shapes(input: &Tensor, kernel: &Tensor, op: &'static str) -> Result<ConvDims> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    let rank4 = match ishape.len() {
        3 => false,
        4 => true,
        _ => {
            return Err(Error::Shape {
                op,
                lhs: ishape.to_vec(),
                rhs: kshape.to_vec(),
            })
        }
    };
    let (batch, channels, h, w) = if rank4 {
        (ishape[0], ishape[1], ishape[2], ishape[3])
    } else {
        (1, ishape[0], ishape[1], ishape[2])
    };
    if kshape.len() != 3 || kshape[0] != channels || kshape[1] != kshape[2] || kshape[1] < 2 {
        return Err(Error::Shape {
            op,
            lhs: ishape.to_vec(),
            rhs: kshape.to_vec(),
        });
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "{op}: spatial extents must be at least 2, got {h}x{w}"
        )));
    }
    Ok(ConvDims {
        batch,
        channels,
        h,
        w,
        k: kshape[1],
        rank4,
    })
}

impl Tensor {
    /// Depthwise stride-2 correlation: one K×K kernel per channel, output
    /// extents ⌈H/2⌉ × ⌈W/2⌉. Input is [C,H,W] or [B,C,H,W]; kernel [C,K,K].
    pub fn conv2d_depthwise_stride2(&self, kernel: &Tensor, mode: PadMode) -> Result<Tensor> {
        let d = check_conv_shapes(self, kernel, "conv2d_depthwise_stride2")?;
        let (rmap, oh) = axis_map(d.h, d.k, mode);
        let (cmap, ow) = axis_map(d.w, d.k, mode);
        let (b, c, h, w, k) = (d.batch, d.channels, d.h, d.w, d.k);
        let mut values = vec![0.0; b * c * oh * ow];
        {
            let xv = self.values();
            let kv = kernel.values();
            let mut o = 0usize;
            for bi in 0..b {
                for ch in 0..c {
                    let xbase = (bi * c + ch) * h * w;
                    let kbase = ch * k * k;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for u in 0..k {
                                if let Some(si) = rmap[2 * i + u] {
                                    for v in 0..k {
                                        if let Some(sj) = cmap[2 * j + v] {
                                            acc += kv[kbase + u * k + v] * xv[xbase + si * w + sj];
                                        }
                                    }
                                }
                            }
                            values[o] = acc;
                            o += 1;
                        }
                    }
                }
            }
        }
        let out_shape = if d.rank4 {
            vec![b, c, oh, ow]
        } else {
            vec![c, oh, ow]
        };
        let xt = self.clone();
        let kt = kernel.clone();
        Ok(make_result(&[self, kernel], values, out_shape, move |_out, g| {
            let kv = kt.values();
            let xv = xt.values();
            if let Some(mut gx) = xt.grad_buffer() {
                let mut o = 0usize;
                for bi in 0..b {
                    for ch in 0..c {
                        let xbase = (bi * c + ch) * h * w;
                        let kbase = ch * k * k;
                        for i in 0..oh {
                            for j in 0..ow {
                                let gg = g[o];
                                o += 1;
                                for u in 0..k {
                                    if let Some(si) = rmap[2 * i + u] {
                                        for v in 0..k {
                                            if let Some(sj) = cmap[2 * j + v] {
                                                gx[xbase + si * w + sj] +=
                                                    gg * kv[kbase + u * k + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(mut gk) = kt.grad_buffer() {
                let mut o = 0usize;
                for bi in 0..b {
                    for ch in 0..c {
                        let xbase = (bi * c + ch) * h * w;
                        let kbase = ch * k * k;
                        for i in 0..oh {
                            for j in 0..ow {
                                let gg = g[o];
                                o += 1;
                                for u in 0..k {
                                    if let Some(si) = rmap[2 * i + u] {
                                        for v in 0..k {
                                            if let Some(sj) = cmap[2 * j + v] {
                                                gk[kbase + u * k + v] +=
                                                    gg * xv[xbase + si * w + sj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }))
    }

    /// Adjoint of [`Tensor::conv2d_depthwise_stride2`] for a stated target
    /// extent: scatters each coefficient back through the same index map.
    /// `out_hw` must satisfy ⌈out_h/2⌉ = h and ⌈out_w/2⌉ = w.
    pub fn conv2d_depthwise_stride2_transpose(
        &self,
        kernel: &Tensor,
        mode: PadMode,
        out_hw: (usize, usize),
    ) -> Result<Tensor> {
        let ishape = self.shape();
        let kshape = kernel.shape();
        let rank4 = match ishape.len() {
            3 => false,
            4 => true,
            _ => {
                return Err(Error::Shape {
                    op: "conv2d_depthwise_stride2_transpose",
                    lhs: ishape.to_vec(),
                    rhs: kshape.to_vec(),
                })
            }
        };
        let (b, c, ih, iw) = if rank4 {
            (ishape[0], ishape[1], ishape[2], ishape[3])
        } else {
            (1, ishape[0], ishape[1], ishape[2])
        };
        if kshape.len() != 3 || kshape[0] != c || kshape[1] != kshape[2] || kshape[1] < 2 {
            return Err(Error::Shape {
                op: "conv2d_depthwise_stride2_transpose",
                lhs: ishape.to_vec(),
                rhs: kshape.to_vec(),
            });
        }
        let (th, tw) = out_hw;
        if th.div_ceil(2) != ih || tw.div_ceil(2) != iw || th < 2 || tw < 2 {
            return Err(Error::invalid(format!(
                "conv2d_depthwise_stride2_transpose: target {th}x{tw} does not \
                 halve to input {ih}x{iw}"
            )));
        }
        let k = kshape[1];
        let (rmap, _) = axis_map(th, k, mode);
        let (cmap, _) = axis_map(tw, k, mode);
        let mut values = vec![0.0; b * c * th * tw];
        {
            let cv = self.values();
            let kv = kernel.values();
            let mut o = 0usize;
            for bi in 0..b {
                for ch in 0..c {
                    let ybase = (bi * c + ch) * th * tw;
                    let kbase = ch * k * k;
                    for i in 0..ih {
                        for j in 0..iw {
                            let coeff = cv[o];
                            o += 1;
                            for u in 0..k {
                                if let Some(si) = rmap[2 * i + u] {
                                    for v in 0..k {
                                        if let Some(sj) = cmap[2 * j + v] {
                                            values[ybase + si * tw + sj] +=
                                                coeff * kv[kbase + u * k + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let out_shape = if rank4 {
            vec![b, c, th, tw]
        } else {
            vec![c, th, tw]
        };
        let ct = self.clone();
        let kt = kernel.clone();
        Ok(make_result(&[self, kernel], values, out_shape, move |_out, g| {
            let kv = kt.values();
            let cv = ct.values();
            if let Some(mut gc) = ct.grad_buffer() {
                let mut o = 0usize;
                for bi in 0..b {
                    for ch in 0..c {
                        let ybase = (bi * c + ch) * th * tw;
                        let kbase = ch * k * k;
                        for i in 0..ih {
                            for j in 0..iw {
                                let mut acc = 0.0;
                                for u in 0..k {
                                    if let Some(si) = rmap[2 * i + u] {
                                        for v in 0..k {
                                            if let Some(sj) = cmap[2 * j + v] {
                                                acc += g[ybase + si * tw + sj]
                                                    * kv[kbase + u * k + v];
                                            }
                                        }
                                    }
                                }
                                gc[o] += acc;
                                o += 1;
                            }
                        }
                    }
                }
            }
            if let Some(mut gk) = kt.grad_buffer() {
                let mut o = 0usize;
                for bi in 0..b {
                    for ch in 0..c {
                        let ybase = (bi * c + ch) * th * tw;
                        let kbase = ch * k * k;
                        for i in 0..ih {
                            for j in 0..iw {
                                let coeff = cv[o];
                                o += 1;
                                for u in 0..k {
                                    if let Some(si) = rmap[2 * i + u] {
                                        for v in 0..k {
                                            if let Some(sj) = cmap[2 * j + v] {
                                                gk[kbase + u * k + v] +=
                                                    coeff * g[ybase + si * tw + sj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::constant(v, shape)
    }

    #[test]
    fn haar_is_block_average_times_two() {
        // all-ones 1-channel 4x4 with the Haar LL kernel (all 0.5)
        let x = Tensor::constant(vec![1.0; 16], &[1, 4, 4]);
        let k = Tensor::constant(vec![0.5; 4], &[1, 2, 2]);
        let y = x.conv2d_depthwise_stride2(&k, PadMode::Periodic).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        for v in y.values() {
            assert!((v - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn output_extent_is_ceil_half() {
        let x = Tensor::constant(vec![0.0; 5 * 7], &[1, 5, 7]);
        let k = Tensor::constant(vec![0.25; 4], &[1, 2, 2]);
        let y = x.conv2d_depthwise_stride2(&k, PadMode::Reflect).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4]);
    }

    #[test]
    fn rejects_bad_kernel_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        for bad in [vec![1, 2, 2], vec![2, 2, 3], vec![2, 2], vec![2, 1, 1]] {
            let k = Tensor::zeros(&bad);
            assert!(
                x.conv2d_depthwise_stride2(&k, PadMode::Zero).is_err(),
                "kernel shape {bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn transpose_validates_target_extent() {
        let c = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::constant(vec![0.5; 4], &[1, 2, 2]);
        assert!(c
            .conv2d_depthwise_stride2_transpose(&k, PadMode::Zero, (6, 4))
            .is_err());
        assert!(c
            .conv2d_depthwise_stride2_transpose(&k, PadMode::Zero, (4, 4))
            .is_ok());
        // odd targets halve up: ceil(3/2) = 2
        assert!(c
            .conv2d_depthwise_stride2_transpose(&k, PadMode::Zero, (3, 4))
            .is_ok());
    }

    #[test]
    fn transpose_is_exact_adjoint_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for mode in [PadMode::Zero, PadMode::Reflect, PadMode::Periodic] {
            for (h, w, k) in [(8, 8, 2), (8, 6, 4), (7, 9, 4), (5, 5, 2), (6, 10, 6)] {
                let x = rand_tensor(&mut rng, &[2, h, w]);
                let kern = rand_tensor(&mut rng, &[2, k, k]);
                let cx = x.conv2d_depthwise_stride2(&kern, mode).unwrap();
                let y = rand_tensor(&mut rng, cx.shape());
                let ty = y
                    .conv2d_depthwise_stride2_transpose(&kern, mode, (h, w))
                    .unwrap();
                let lhs: f64 = cx.values().iter().zip(y.values()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.values().iter().zip(ty.values()).map(|(a, b)| a * b).sum();
                assert!(
                    (lhs - rhs).abs() < 1e-8,
                    "adjoint broken: mode {mode:?} h {h} w {w} k {k}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn batched_matches_per_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, &[3, 6, 6]);
        let x1 = rand_tensor(&mut rng, &[3, 6, 6]);
        let kern = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut joined = x0.values().to_vec();
        joined.extend_from_slice(x1.values());
        let xb = Tensor::constant(joined, &[2, 3, 6, 6]);
        let yb = xb.conv2d_depthwise_stride2(&kern, PadMode::Periodic).unwrap();
        let y0 = x0.conv2d_depthwise_stride2(&kern, PadMode::Periodic).unwrap();
        let y1 = x1.conv2d_depthwise_stride2(&kern, PadMode::Periodic).unwrap();
        assert_eq!(&yb.values()[..y0.numel()], y0.values());
        assert_eq!(&yb.values()[y0.numel()..], y1.values());
    }

    #[test]
    fn zero_pad_differs_from_periodic_at_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[1, 8, 8]);
        let kern = rand_tensor(&mut rng, &[1, 4, 4]);
        let a = x.conv2d_depthwise_stride2(&kern, PadMode::Zero).unwrap();
        let b = x.conv2d_depthwise_stride2(&kern, PadMode::Periodic).unwrap();
        let diff: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "padding modes should disagree at the border");
    }
}
