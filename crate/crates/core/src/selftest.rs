//! Runtime gradient self-check: every differentiable building block is
//! re-verified against central finite differences on small random inputs.
//! Intended for the CLI, so a deployment can prove its own backward passes.

use crate::error::Result;
use crate::flow::xpred_loss;
use crate::tensor::{check_gradient, GradReport, PadMode, Tensor};
use crate::wavelet::{
    reg_hp, reg_ortho, reg_sparse, reg_sum, wpt_analyze_full, FilterBank,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradReport,
    pub passed: bool,
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Run the whole suite with `tol` as the pass bound on max relative error.
pub fn run(tol: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradReport| {
        let passed = report.within(tol);
        out.push(CheckOutcome {
            name,
            report,
            passed,
        });
    };

    {
        let a = randv(&mut rng, 12);
        let b = randv(&mut rng, 4);
        let report = check_gradient(
            &[(&a, &[3, 4]), (&b, &[4])],
            &|t| {
                let prod = t[0].mul(&t[1])?;
                let mix = prod.add(&t[0].sigmoid())?.sub(&t[1].gelu())?;
                Ok(mix.square().mean_all())
            },
        )?;
        push("elementwise+broadcast", report);
    }

    {
        let a = randv(&mut rng, 12);
        let b = randv(&mut rng, 8);
        let report = check_gradient(
            &[(&a, &[2, 3, 2]), (&b, &[2, 4])],
            &|t| Ok(t[0].matmul(&t[1])?.square().mean_all()),
        )?;
        push("matmul", report);
    }

    {
        let a = randv(&mut rng, 12);
        let report = check_gradient(
            &[(&a, &[3, 4])],
            &|t| {
                let s = t[0].softmax_last()?;
                Ok(s.mul(&t[0].affine(0.3, 0.1))?.sum_all())
            },
        )?;
        push("softmax", report);
    }

    {
        let a = randv(&mut rng, 12);
        let g = randv(&mut rng, 4);
        let report = check_gradient(
            &[(&a, &[3, 4]), (&g, &[4])],
            &|t| {
                let n = t[0].layer_norm_last(1e-6)?;
                Ok(n.mul(&t[1])?.square().mean_all())
            },
        )?;
        push("layer_norm", report);
    }

    {
        let x = randv(&mut rng, 64);
        let k = randv(&mut rng, 4);
        let report = check_gradient(
            &[(&x, &[1, 1, 8, 8]), (&k, &[1, 2, 2])],
            &|t| {
                let y = t[0].conv2d_depthwise_stride2(&t[1], PadMode::Periodic)?;
                let back = t[0].sub(&y.conv2d_depthwise_stride2_transpose(
                    &t[1],
                    PadMode::Periodic,
                    (8, 8),
                )?)?;
                Ok(back.square().mean_all())
            },
        )?;
        push("conv+transpose", report);
    }

    {
        let x = randv(&mut rng, 10);
        let g = vec![0.3];
        let report = check_gradient(
            &[(&x, &[10]), (&g, &[1])],
            &|t| Ok(t[0].hard_threshold(&t[1], 10.0)?.square().mean_all()),
        )?;
        push("soft_gate", report);
    }

    {
        let h = vec![0.72, 0.68, 0.05, -0.08];
        let report = check_gradient(
            &[(&h, &[4])],
            &|t| {
                let bank = FilterBank::new(t[0].clone())?;
                reg_sum(&bank)?
                    .add(&reg_hp(&bank)?)?
                    .add(&reg_ortho(&bank)?)
            },
        )?;
        push("filter_penalties", report);
    }

    {
        let x = randv(&mut rng, 64);
        let h = vec![0.72, 0.68];
        let report = check_gradient(
            &[(&x, &[1, 1, 8, 8]), (&h, &[2])],
            &|t| {
                let bank = FilterBank::new(t[1].clone())?;
                let tree = wpt_analyze_full(&t[0], &bank, 2, None, 10.0)?;
                reg_sparse(&tree)
            },
        )?;
        push("packet_sparsity", report);
    }

    {
        let xp = randv(&mut rng, 8);
        let z = randv(&mut rng, 8);
        let x = randv(&mut rng, 8);
        let t_vals = vec![0.3, 0.9];
        let report = check_gradient(
            &[(&xp, &[2, 4]), (&z, &[2, 4]), (&x, &[2, 4])],
            &|t| {
                let times = Tensor::constant(t_vals.clone(), &[2, 1]);
                xpred_loss(&t[0], &t[1], &t[2], &times, 0.05, None)
            },
        )?;
        push("velocity_loss", report);
    }

    Ok(out)
}
