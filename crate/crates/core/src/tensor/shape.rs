//! Structural operations: reshape, permutation, concatenation, slicing,
//! row gathering, and the fused row-wise softmax / layer-norm.

use super::{make_result, numel, strides_of, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Same values, new shape (element count must match).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let a = self.clone();
        Ok(make_result(
            &[self],
            self.values().to_vec(),
            new_shape.to_vec(),
            move |_out, g| a.accumulate_grad(g),
        ))
    }

    /// Reorder axes; `axes` is a permutation of 0..rank.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permute: {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides_of(&in_shape);
        // stride walk of the input in output order
        let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src = self.values();
        let n = src.len();
        let mut values = vec![0.0; n];
        let fill = |dst: &mut [f64], from: &[f64], forward: bool| {
            let mut idx = vec![0usize; rank];
            let mut pos = 0usize; // input flat position
            for flat in 0..n {
                if forward {
                    dst[flat] = from[pos];
                } else {
                    dst[pos] += from[flat];
                }
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    pos += walk[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    pos -= walk[ax] * out_shape[ax];
                    idx[ax] = 0;
                }
            }
        };
        fill(&mut values, src, true);
        let a = self.clone();
        let out_shape_cl = out_shape.clone();
        Ok(make_result(&[self], values, out_shape, move |_out, g| {
            if let Some(mut ga) = a.grad_buffer() {
                let rank = out_shape_cl.len();
                let mut idx = vec![0usize; rank];
                let mut pos = 0usize;
                for flat in 0..g.len() {
                    ga[pos] += g[flat];
                    for ax in (0..rank).rev() {
                        idx[ax] += 1;
                        pos += walk[ax];
                        if idx[ax] < out_shape_cl[ax] {
                            break;
                        }
                        pos -= walk[ax] * out_shape_cl[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != out_shape[d] {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut values = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize; // axis offset of the current part
        let mut spans = Vec::with_capacity(parts.len()); // (axis offset, axis len)
        for p in parts {
            let plen = p.shape()[axis];
            let pv = p.values();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let src = o * plen * inner;
                values[dst..dst + plen * inner].copy_from_slice(&pv[src..src + plen * inner]);
            }
            spans.push((offset, plen));
            offset += plen;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(make_result(parts, values, out_shape, move |_out, g| {
            for (p, &(off, plen)) in owned.iter().zip(&spans) {
                if let Some(mut gp) = p.grad_buffer() {
                    for o in 0..outer {
                        let src = (o * axis_total + off) * inner;
                        let dst = o * plen * inner;
                        for i in 0..plen * inner {
                            gp[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }))
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice: [{start}, {start}+{len}) on axis {axis} of shape {:?}",
                self.shape()
            )));
        }
        let full = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut values = vec![0.0; outer * len * inner];
        let src = self.values();
        for o in 0..outer {
            let s = (o * full + start) * inner;
            let d = o * len * inner;
            values[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let a = self.clone();
        Ok(make_result(&[self], values, out_shape, move |_out, g| {
            if let Some(mut ga) = a.grad_buffer() {
                for o in 0..outer {
                    let d = (o * full + start) * inner;
                    let s = o * len * inner;
                    for i in 0..len * inner {
                        ga[d + i] += g[s + i];
                    }
                }
            }
        }))
    }

    /// Reverse a rank-1 tensor.
    pub fn reverse1d(&self) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::invalid(format!(
                "reverse1d: expected rank 1, got shape {:?}",
                self.shape()
            )));
        }
        let mut values = self.values().to_vec();
        values.reverse();
        let a = self.clone();
        Ok(make_result(
            &[self],
            values,
            self.shape().to_vec(),
            move |_out, g| {
                if let Some(mut ga) = a.grad_buffer() {
                    let n = g.len();
                    for i in 0..n {
                        ga[n - 1 - i] += g[i];
                    }
                }
            },
        ))
    }

    /// Select rows of a [V, D] table; duplicate indices accumulate gradient.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "gather_rows: expected rank 2 table, got {:?}",
                self.shape()
            )));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {v} rows"
            )));
        }
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(&self.values()[i * d..(i + 1) * d]);
        }
        let a = self.clone();
        let idx = indices.to_vec();
        Ok(make_result(
            &[self],
            values,
            vec![indices.len(), d],
            move |_out, g| {
                if let Some(mut ga) = a.grad_buffer() {
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            ga[i * d + j] += g[row * d + j];
                        }
                    }
                }
            },
        ))
    }

    /// Row-wise softmax over the last axis (max-shifted for stability).
    pub fn softmax_last(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::invalid("softmax_last: rank 0"));
        }
        let d = self.shape()[rank - 1];
        let rows = self.numel() / d;
        let src = self.values();
        let mut values = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in values[r * d..(r + 1) * d].iter_mut().zip(row.iter()) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in values[r * d..(r + 1) * d].iter_mut() {
                *o /= sum;
            }
        }
        let a = self.clone();
        Ok(make_result(
            &[self],
            values,
            self.shape().to_vec(),
            move |out, g| {
                if let Some(mut ga) = a.grad_buffer() {
                    let y = out.values();
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for i in 0..d {
                            ga[r * d + i] += ys[i] * (gs[i] - dot);
                        }
                    }
                }
            },
        ))
    }

    /// Normalize each last-axis row to zero mean / unit variance. Any affine
    /// scale or shift is the caller's business.
    pub fn layer_norm_last(&self, eps: f64) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::invalid("layer_norm_last: rank 0"));
        }
        let d = self.shape()[rank - 1];
        let rows = self.numel() / d;
        let src = self.values();
        let mut values = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &x) in values[r * d..(r + 1) * d].iter_mut().zip(row.iter()) {
                *o = (x - mean) * inv;
            }
        }
        let a = self.clone();
        Ok(make_result(
            &[self],
            values,
            self.shape().to_vec(),
            move |out, g| {
                if let Some(mut ga) = a.grad_buffer() {
                    let y = out.values();
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let nd = d as f64;
                        let gmean: f64 = gs.iter().sum::<f64>() / nd;
                        let gydot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum::<f64>() / nd;
                        for i in 0..d {
                            ga[r * d + i] += inv_std[r] * (gs[i] - gmean - ys[i] * gydot);
                        }
                    }
                }
            },
        ))
    }
}
