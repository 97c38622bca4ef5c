//! Matrix products. The inner kernel is `matrixmultiply::dgemm`; forward
//! and backward passes here only arrange strides so that transposes never
//! copy.

use super::{make_result, Tensor};
use crate::error::{Error, Result};

/// c[m,n] (+)= a[m,k] · b[k,n], row-major slices, optional accumulate.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product. Accepted shapes:
    ///   [.., m, k] × [k, n]      — shared right matrix across leading dims
    ///   [.., m, k] × [.., k, n]  — equal leading dims, batch-by-batch
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (self.shape(), rhs.shape());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let shared_rhs = bshape.len() == 2 && ashape.len() > 2;
        let leading_ok = shared_rhs || ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2];
        if k != kb || !leading_ok {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);

        let mut values = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a = &self.values()[bi * m * k..(bi + 1) * m * k];
            let b = if shared_rhs {
                rhs.values()
            } else {
                &rhs.values()[bi * k * n..(bi + 1) * k * n]
            };
            gemm(m, k, n, a, false, b, false, &mut values[bi * m * n..(bi + 1) * m * n], false);
        }

        let at = self.clone();
        let bt = rhs.clone();
        Ok(make_result(&[self, rhs], values, out_shape, move |_out, g| {
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let bv = if shared_rhs {
                    bt.values()
                } else {
                    &bt.values()[bi * k * n..(bi + 1) * k * n]
                };
                if let Some(mut ga) = at.grad_buffer() {
                    // dA = g · Bᵀ
                    gemm(m, n, k, gs, false, bv, true, &mut ga[bi * m * k..(bi + 1) * m * k], true);
                }
                if let Some(mut gb) = bt.grad_buffer() {
                    // dB = Aᵀ · g (accumulates across the batch when shared)
                    let av = &at.values()[bi * m * k..(bi + 1) * m * k];
                    let dst = if shared_rhs {
                        &mut gb[..]
                    } else {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    };
                    gemm(k, m, n, av, true, gs, false, dst, true);
                }
            }
        }))
    }
}
