//! Release gate: one test per shipped guarantee, cheapest first.
//!
//! Each test states its tolerance inline and fails loudly with the measured
//! value, so the harness output reads as a per-guarantee pass/fail report.

#[path = "support/reference.rs"]
mod reference;

use freqforce::backbone::{Backbone, BackboneConfig, StreamInput, StreamKind};
use freqforce::config::{seeds, ModelConfig, RunConfig};
use freqforce::optim::OptimizerKind;
use freqforce::data::{DataConfig, Dataset, Split};
use freqforce::experiments::{compare_arms, run_arm, standard_arms};
use freqforce::flow::{interpolate, xpred_loss, ClockSchedule};
use freqforce::param::{Binder, Visit};
use freqforce::tensor::{check_gradient, PadMode, Tape, Tensor};
use freqforce::train::Trainer;
use freqforce::wavelet::{
    fit_wavelet, mean_terminal_l1, node_count, reg_hp, reg_ortho, reg_sparse, reg_sum,
    wpt_analyze_full, wpt_synthesize, FilterBank, FitConfig, LearnableWavelet,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::time::Instant;

/// Daubechies-2 taps from the closed form, written here so the fixture is
/// independent of the library's own constants.
fn db2_taps() -> [f64; 4] {
    let s3 = 3.0_f64.sqrt();
    let d = 4.0 * 2.0_f64.sqrt();
    [
        (1.0 + s3) / d,
        (3.0 + s3) / d,
        (3.0 - s3) / d,
        (1.0 - s3) / d,
    ]
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ─── 1: fixed-filter identities and perfect reconstruction ─────────────────

#[test]
fn c01_fixed_filters_are_exact_and_reconstruction_is_lossless() {
    let start = Instant::now();
    let haar = FilterBank::haar();
    let db2 = FilterBank::from_values(&db2_taps()).unwrap();
    for (name, bank) in [("haar", &haar), ("db2", &db2)] {
        for (reg, val) in [
            ("sum", reg_sum(bank).unwrap().item()),
            ("hp", reg_hp(bank).unwrap().item()),
            ("ortho", reg_ortho(bank).unwrap().item()),
        ] {
            assert!(val.abs() <= 1e-10, "{name} reg_{reg} = {val:e}, want <= 1e-10");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for img_idx in 0..100 {
        let bank = if img_idx % 2 == 0 { &haar } else { &db2 };
        let c = rng.gen_range(1..=3);
        let h = 2 * rng.gen_range(3..=12);
        let w = 2 * rng.gen_range(3..=12);
        // analyze as deep as every level's extent stays even
        let levels = if h % 4 == 0 && w % 4 == 0 && h.min(w) >= 2 * bank.len() {
            2
        } else {
            1
        };
        let vals = randn(&mut rng, c * h * w);
        let x = Tensor::constant(vals.clone(), &[c, h, w]);
        let zero_gates: Vec<Tensor> = (0..node_count(levels))
            .map(|_| Tensor::scalar(0.0))
            .collect();
        let tree = wpt_analyze_full(&x, bank, levels, Some(&zero_gates), 10.0).unwrap();
        let back = wpt_synthesize(&tree, bank).unwrap();
        let err = max_abs_diff(back.values(), &vals);
        assert!(
            err <= 1e-7,
            "image {img_idx} ({c}x{h}x{w}, L={levels}): reconstruction err {err:e}"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "ran {secs:.2}s, want < 5s");
}

// ─── 2: two-level packet structure vs an unrolled oracle ───────────────────

/// Periodic stride-2 separable analysis written as two independent 1-D
/// passes (columns then rows), sharing no code with the library.
fn oracle_split(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    row_f: &[f64],
    col_f: &[f64],
) -> (Vec<f64>, usize, usize) {
    let k = row_f.len();
    let pad = (k - 2) / 2;
    let oh = h / 2;
    let ow = w / 2;
    let wrap = |v: isize, n: usize| -> usize {
        let m = n as isize;
        (((v % m) + m) % m) as usize
    };
    // columns first
    let mut cols = vec![0.0; c * h * ow];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..ow {
                let mut acc = 0.0;
                for v in 0..k {
                    let sj = wrap(2 * j as isize + v as isize - pad as isize, w);
                    acc += col_f[v] * x[(ch * h + i) * w + sj];
                }
                cols[(ch * h + i) * ow + j] = acc;
            }
        }
    }
    // then rows
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for u in 0..k {
                    let si = wrap(2 * i as isize + u as isize - pad as isize, h);
                    acc += row_f[u] * cols[(ch * h + si) * ow + j];
                }
                out[(ch * oh + i) * ow + j] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn oracle_packets(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    lp: &[f64],
    levels: usize,
) -> Vec<Vec<f64>> {
    let k = lp.len();
    let hp: Vec<f64> = (0..k)
        .map(|i| if i % 2 == 0 { lp[k - 1 - i] } else { -lp[k - 1 - i] })
        .collect();
    let mut out = Vec::new();
    // band order LL, LH, HL, HH: first letter filters rows
    let pairs = [(lp, lp), (lp, &hp[..]), (&hp[..], lp), (&hp[..], &hp[..])];
    for (row_f, col_f) in pairs {
        let (band, oh, ow) = oracle_split(x, c, h, w, row_f, col_f);
        if levels == 1 {
            out.push(band);
        } else {
            out.extend(oracle_packets(&band, c, oh, ow, lp, levels - 1));
        }
    }
    out
}

#[test]
fn c02_two_level_packet_matches_unrolled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let db2 = db2_taps();
    let rand_filter: Vec<f64> = randn(&mut rng, 4);
    let cases: [(&str, &[f64]); 3] = [
        ("haar", &[std::f64::consts::FRAC_1_SQRT_2; 2]),
        ("db2", &db2),
        ("random", &rand_filter),
    ];
    for (name, taps) in cases {
        let bank = FilterBank::from_values(taps).unwrap();
        for &(c, h, w) in &[(2usize, 16usize, 16usize), (1, 12, 20)] {
            let vals = randn(&mut rng, c * h * w);
            let x = Tensor::constant(vals.clone(), &[c, h, w]);
            let tree = wpt_analyze_full(&x, &bank, 2, None, 10.0).unwrap();
            assert_eq!(tree.terminals.len(), 16, "{name}: want exactly 16 subbands");
            let expect = oracle_packets(&vals, c, h, w, taps, 2);
            assert_eq!(expect.len(), 16);
            for (idx, (got, want)) in tree.terminals.iter().zip(&expect).enumerate() {
                let err = max_abs_diff(got.values(), want);
                assert!(
                    err <= 1e-9,
                    "{name} {c}x{h}x{w} subband {idx}: oracle mismatch {err:e}"
                );
            }
        }
    }
}

// ─── 3: finite-difference gradient checks for every operation ──────────────

const FD_TOL: f64 = 1e-4;
const FD_POINTS: usize = 10;

fn fd_check(
    name: &str,
    rng: &mut ChaCha8Rng,
    gen: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<usize>)>,
    build: &dyn Fn(&[Tensor]) -> freqforce::Result<Tensor>,
) {
    for point in 0..FD_POINTS {
        let drawn = gen(rng);
        let inputs: Vec<(&[f64], &[usize])> = drawn
            .iter()
            .map(|(v, s)| (v.as_slice(), s.as_slice()))
            .collect();
        let report =
            check_gradient(&inputs, build).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(
            report.within(FD_TOL),
            "{name} point {point}: max rel err {:e} at {:?} (analytic {:e}, numeric {:e})",
            report.max_rel_err,
            report.worst,
            report.worst_pair.0,
            report.worst_pair.1
        );
    }
}

/// Inputs whose magnitudes stay clear of a non-smooth point at zero.
fn randn_offset(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    randn(rng, n)
        .into_iter()
        .map(|v| v.signum() * (v.abs() + floor))
        .collect()
}

fn dotted(x: &Tensor, w: &Tensor) -> freqforce::Result<Tensor> {
    Ok(x.mul(w)?.sum_all())
}

#[test]
fn c03_every_operation_passes_finite_difference_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let r = &mut rng;

    // elementwise binary, including broadcast
    fd_check("add_broadcast", r, &mut |r| {
        vec![(randn(r, 6), vec![2, 3]), (randn(r, 3), vec![1, 3])]
    }, &|t| Ok(t[0].add(&t[1])?.sum_all()));
    fd_check("sub", r, &mut |r| {
        vec![(randn(r, 6), vec![2, 3]), (randn(r, 6), vec![2, 3])]
    }, &|t| Ok(t[0].sub(&t[1])?.sum_all()));
    fd_check("mul_broadcast", r, &mut |r| {
        vec![(randn(r, 8), vec![2, 4]), (randn(r, 2), vec![2, 1])]
    }, &|t| Ok(t[0].mul(&t[1])?.square().sum_all()));
    fd_check("div", r, &mut |r| {
        vec![(randn(r, 6), vec![2, 3]), (randn_offset(r, 6, 0.5), vec![2, 3])]
    }, &|t| Ok(t[0].div(&t[1])?.sum_all()));

    // elementwise unary
    fd_check("neg", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].neg().square().sum_all())
    });
    fd_check("abs", r, &mut |r| vec![(randn_offset(r, 7, 0.2), vec![7])], &|t| {
        Ok(t[0].abs().square().sum_all())
    });
    fd_check("affine", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].affine(1.7, -0.3).square().sum_all())
    });
    fd_check("square", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].square().sum_all())
    });
    fd_check("sigmoid", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].sigmoid().sum_all())
    });
    fd_check("silu", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].silu()?.sum_all())
    });
    fd_check("softplus", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].softplus().sum_all())
    });
    fd_check("gelu", r, &mut |r| vec![(randn(r, 7), vec![7])], &|t| {
        Ok(t[0].gelu().sum_all())
    });

    // reductions
    fd_check("sum_all", r, &mut |r| vec![(randn(r, 10), vec![2, 5])], &|t| {
        Ok(t[0].sum_all())
    });
    fd_check("mean_all", r, &mut |r| vec![(randn(r, 10), vec![2, 5])], &|t| {
        Ok(t[0].square().mean_all())
    });
    fd_check("l1_norm", r, &mut |r| vec![(randn_offset(r, 6, 0.2), vec![6])], &|t| {
        Ok(t[0].l1_norm())
    });

    // structural ops, paired with a weight leaf so the whole Jacobian shows
    fd_check("reshape", r, &mut |r| {
        vec![(randn(r, 12), vec![2, 6]), (randn(r, 12), vec![3, 4])]
    }, &|t| dotted(&t[0].reshape(&[3, 4])?, &t[1]));
    fd_check("permute", r, &mut |r| {
        vec![(randn(r, 24), vec![2, 3, 4]), (randn(r, 24), vec![4, 2, 3])]
    }, &|t| dotted(&t[0].permute(&[2, 0, 1])?, &t[1]));
    fd_check("concat", r, &mut |r| {
        vec![
            (randn(r, 4), vec![2, 2]),
            (randn(r, 6), vec![2, 3]),
            (randn(r, 10), vec![2, 5]),
        ]
    }, &|t| dotted(&Tensor::concat(1, &[&t[0], &t[1]])?, &t[2]));
    fd_check("slice", r, &mut |r| {
        vec![(randn(r, 8), vec![2, 4]), (randn(r, 4), vec![2, 2])]
    }, &|t| dotted(&t[0].slice(1, 1, 2)?, &t[1]));
    fd_check("reverse1d", r, &mut |r| {
        vec![(randn(r, 5), vec![5]), (randn(r, 5), vec![5])]
    }, &|t| dotted(&t[0].reverse1d()?, &t[1]));
    fd_check("gather_rows", r, &mut |r| {
        vec![(randn(r, 12), vec![4, 3]), (randn(r, 9), vec![3, 3])]
    }, &|t| dotted(&t[0].gather_rows(&[2, 0, 2])?, &t[1]));

    // normalizations
    fd_check("softmax_last", r, &mut |r| {
        vec![(randn(r, 8), vec![2, 4]), (randn(r, 8), vec![2, 4])]
    }, &|t| dotted(&t[0].softmax_last()?, &t[1]));
    fd_check("layer_norm_last", r, &mut |r| {
        vec![(randn(r, 8), vec![2, 4]), (randn(r, 8), vec![2, 4])]
    }, &|t| dotted(&t[0].layer_norm_last(1e-6)?, &t[1]));

    // matrix products
    fd_check("matmul", r, &mut |r| {
        vec![
            (randn(r, 6), vec![2, 3]),
            (randn(r, 6), vec![3, 2]),
            (randn(r, 4), vec![2, 2]),
        ]
    }, &|t| dotted(&t[0].matmul(&t[1])?, &t[2]));
    fd_check("matmul_batched", r, &mut |r| {
        vec![
            (randn(r, 12), vec![2, 2, 3]),
            (randn(r, 6), vec![3, 2]),
            (randn(r, 8), vec![2, 2, 2]),
        ]
    }, &|t| dotted(&t[0].matmul(&t[1])?, &t[2]));

    // strided convolution, all pad modes, both ranks, odd extents
    for (name, mode) in [
        ("conv_zero", PadMode::Zero),
        ("conv_reflect", PadMode::Reflect),
        ("conv_periodic", PadMode::Periodic),
    ] {
        fd_check(name, r, &mut |r| {
            vec![
                (randn(r, 72), vec![2, 6, 6]),
                (randn(r, 8), vec![2, 2, 2]),
                (randn(r, 18), vec![2, 3, 3]),
            ]
        }, &|t| dotted(&t[0].conv2d_depthwise_stride2(&t[1], mode)?, &t[2]));
    }
    fd_check("conv_k4_rank4", r, &mut |r| {
        vec![
            (randn(r, 72), vec![1, 2, 6, 6]),
            (randn(r, 32), vec![2, 4, 4]),
            (randn(r, 18), vec![1, 2, 3, 3]),
        ]
    }, &|t| {
        dotted(&t[0].conv2d_depthwise_stride2(&t[1], PadMode::Periodic)?, &t[2])
    });
    fd_check("conv_odd_extent", r, &mut |r| {
        vec![
            (randn(r, 60), vec![2, 5, 6]),
            (randn(r, 8), vec![2, 2, 2]),
            (randn(r, 18), vec![2, 3, 3]),
        ]
    }, &|t| dotted(&t[0].conv2d_depthwise_stride2(&t[1], PadMode::Reflect)?, &t[2]));

    // its transpose
    for (name, mode, out_hw) in [
        ("convt_periodic", PadMode::Periodic, (6usize, 6usize)),
        ("convt_zero", PadMode::Zero, (6, 6)),
        ("convt_reflect_odd", PadMode::Reflect, (5, 6)),
    ] {
        fd_check(name, r, &mut |r| {
            vec![
                (randn(r, 18), vec![2, 3, 3]),
                (randn(r, 8), vec![2, 2, 2]),
                (randn(r, 2 * out_hw.0 * out_hw.1), vec![2, out_hw.0, out_hw.1]),
            ]
        }, &|t| {
            dotted(
                &t[0].conv2d_depthwise_stride2_transpose(&t[1], mode, out_hw)?,
                &t[2],
            )
        });
    }
    fd_check("convt_k4_rank4", r, &mut |r| {
        vec![
            (randn(r, 18), vec![1, 2, 3, 3]),
            (randn(r, 32), vec![2, 4, 4]),
            (randn(r, 72), vec![1, 2, 6, 6]),
        ]
    }, &|t| {
        dotted(
            &t[0].conv2d_depthwise_stride2_transpose(&t[1], PadMode::Periodic, (6, 6))?,
            &t[2],
        )
    });

    // the soft magnitude gate, through both coefficient and threshold
    fd_check("hard_threshold", r, &mut |r| {
        vec![
            (randn(r, 16), vec![4, 4]),
            (vec![r.gen_range(0.2..0.8)], vec![1]),
        ]
    }, &|t| Ok(t[0].hard_threshold(&t[1], 10.0)?.square().sum_all()));

    // interpolation (time is a leaf too: the mix is differentiable in t)
    fd_check("interpolate", r, &mut |r| {
        vec![
            (randn(r, 12), vec![2, 3, 2]),
            (randn(r, 12), vec![2, 3, 2]),
            ((0..2).map(|_| r.gen_range(0.1..0.9)).collect(), vec![2, 1, 1]),
        ]
    }, &|t| Ok(interpolate(&t[0], &t[1], &t[2])?.square().sum_all()));

    // the velocity-matching loss, plain and in the clipped regime; the
    // prediction and target are the differentiated operands (the noisy
    // state's gradient cancels exactly — that identity is its own check)
    for (name, lo, hi, weighted) in [
        ("xpred_loss", 0.1, 0.8, false),
        ("xpred_loss_clipped", 0.955, 0.995, true),
    ] {
        for point in 0..FD_POINTS {
            let t_vals: Vec<f64> = (0..2).map(|_| r.gen_range(lo..hi)).collect();
            let t = Tensor::constant(t_vals, &[2, 1, 1]);
            let w = Tensor::constant(
                (0..2).map(|_| r.gen_range(0.5..1.5)).collect(),
                &[2, 1, 1],
            );
            let weights = weighted.then_some(&w);
            let z = Tensor::constant(randn(r, 12), &[2, 3, 2]);
            let drawn: Vec<(Vec<f64>, Vec<usize>)> = (0..2)
                .map(|_| (randn(r, 12), vec![2, 3, 2]))
                .collect();
            let inputs: Vec<(&[f64], &[usize])> = drawn
                .iter()
                .map(|(v, s)| (v.as_slice(), s.as_slice()))
                .collect();
            let report = check_gradient(&inputs, &|t_in| {
                xpred_loss(&t_in[0], &z, &t_in[1], &t, 0.05, weights)
            })
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(
                report.within(FD_TOL),
                "{name} point {point}: max rel err {:e}",
                report.max_rel_err
            );
        }
    }

    // all four filter/coefficient regularizers, through the taps
    fd_check("reg_sum", r, &mut |r| {
        vec![(randn(r, 4), vec![4])]
    }, &|t| reg_sum(&FilterBank::new(t[0].clone())?));
    fd_check("reg_hp", r, &mut |r| {
        vec![(randn(r, 4), vec![4])]
    }, &|t| reg_hp(&FilterBank::new(t[0].clone())?));
    fd_check("reg_ortho", r, &mut |r| {
        vec![(randn(r, 4), vec![4])]
    }, &|t| reg_ortho(&FilterBank::new(t[0].clone())?));
    fd_check("reg_sparse", r, &mut |r| {
        vec![
            (randn_offset(r, 2, 0.3), vec![2]),
            (randn(r, 64), vec![1, 8, 8]),
        ]
    }, &|t| {
        let bank = FilterBank::new(t[0].clone())?;
        let tree = wpt_analyze_full(&t[1], &bank, 2, None, 10.0)?;
        reg_sparse(&tree)
    });

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "ran {secs:.2}s, want < 60s");
}

// ─── 4: the two algebraic forms of the loss agree ──────────────────────────

#[test]
fn c04_velocity_and_data_space_loss_forms_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (b, tok, d) = (2usize, 3usize, 2usize);
    let n = b * tok * d;
    for draw in 0..1000 {
        // second half forces the clipped regime t > 0.95
        let t_vals: Vec<f64> = (0..b)
            .map(|_| {
                if draw < 500 {
                    rng.gen_range(0.0..1.0)
                } else {
                    rng.gen_range(0.951..1.0)
                }
            })
            .collect();
        let x_pred = randn(&mut rng, n);
        let x = randn(&mut rng, n);
        let z = randn(&mut rng, n);
        let t = Tensor::constant(t_vals.clone(), &[b, 1, 1]);
        let velocity_form = xpred_loss(
            &Tensor::constant(x_pred.clone(), &[b, tok, d]),
            &Tensor::constant(z.clone(), &[b, tok, d]),
            &Tensor::constant(x.clone(), &[b, tok, d]),
            &t,
            0.05,
            None,
        )
        .unwrap()
        .item();
        // data-space form: the noisy state cancels, mean‖(x̂−x)/max(1−t,c)‖²
        let mut acc = 0.0;
        for i in 0..n {
            let inv = 1.0 / (1.0 - t_vals[i / (tok * d)]).max(0.05);
            let e = (x_pred[i] - x[i]) * inv;
            acc += e * e;
        }
        let data_form = acc / n as f64;
        let diff = (velocity_form - data_form).abs();
        assert!(
            diff <= 1e-10,
            "draw {draw}: velocity form {velocity_form} vs data form {data_form}, diff {diff:e}"
        );
    }
}

// ─── 5: clock-schedule contract ────────────────────────────────────────────

#[test]
fn c05_aux_clocks_run_ahead_monotonically_and_finish() {
    let schedules: Vec<ClockSchedule> = vec![
        ClockSchedule::Cascaded { b: 0.2 },
        ClockSchedule::Cascaded { b: 0.5 },
        ClockSchedule::Cascaded { b: 0.847 },
        ClockSchedule::Cascaded { b: 1.0 },
        ClockSchedule::LinearOffset { delta: 0.0 },
        ClockSchedule::LinearOffset { delta: 0.1 },
        ClockSchedule::LinearOffset { delta: 0.25 },
        ClockSchedule::LinearOffset { delta: 0.9 },
        ClockSchedule::VarianceShifted { s: 1.0 },
        ClockSchedule::VarianceShifted { s: 1.5 },
        ClockSchedule::VarianceShifted { s: 3.0 },
        ClockSchedule::VarianceShifted { s: 7.5 },
    ];
    for sched in &schedules {
        sched.validate().unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let tau = sched.map(t);
            assert!(tau.is_finite(), "{sched:?} at t={t}: not finite");
            assert!(tau >= t, "{sched:?} at t={t}: tau {tau} < t");
            assert!(tau <= 1.0, "{sched:?} at t={t}: tau {tau} > 1");
            assert!(tau >= prev, "{sched:?} at t={t}: tau {tau} < previous {prev}");
            prev = tau;
            if let ClockSchedule::Cascaded { b } = sched {
                if t >= *b {
                    assert!(
                        tau == 1.0,
                        "{sched:?} at t={t}: tau {tau}, want exactly 1 past the bump"
                    );
                }
            }
        }
        assert!(
            sched.map(1.0) == 1.0,
            "{sched:?}: phi(1) = {}, want exactly 1",
            sched.map(1.0)
        );
    }
}

// ─── 6: attention-mask causality across streams ────────────────────────────

fn toy_backbone() -> Backbone {
    let cfg = BackboneConfig {
        width: 8,
        depth: 6,
        heads: 2,
        patch: 2,
        image_hw: 4,
        channels: 1,
        num_classes: 2,
        streams: vec![StreamKind::Dino, StreamKind::Fre, StreamKind::Pix],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut bb = Backbone::new(cfg, &mut rng).unwrap();
    // zero-initialized heads and gates would hide downstream influence, and
    // the causality claim must hold for arbitrary weights — randomize all
    bb.visit_params(&mut |p| {
        for v in p.value.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    });
    bb
}

fn toy_forward(bb: &Backbone, states: &[Tensor; 3]) -> Vec<Vec<f64>> {
    let mut binder = Binder::new(None);
    let inputs = vec![
        StreamInput { kind: StreamKind::Dino, state: states[0].clone(), t: vec![0.9, 0.8] },
        StreamInput { kind: StreamKind::Fre, state: states[1].clone(), t: vec![0.5, 0.4] },
        StreamInput { kind: StreamKind::Pix, state: states[2].clone(), t: vec![0.3, 0.2] },
    ];
    bb.forward(&mut binder, &inputs, &[0, 1])
        .unwrap()
        .iter()
        .map(|t| t.values().to_vec())
        .collect()
}

#[test]
fn c06_later_streams_cannot_influence_earlier_ones() {
    let bb = toy_backbone();
    let mut rng = ChaCha8Rng::seed_from_u64(616);
    let base: [Tensor; 3] = [
        Tensor::constant(randn(&mut rng, 2 * 4 * 8), &[2, 4, 8]),
        Tensor::constant(randn(&mut rng, 2 * 4 * 8), &[2, 4, 8]),
        Tensor::constant(randn(&mut rng, 2 * 1 * 4 * 4), &[2, 1, 4, 4]),
    ];
    let out0 = toy_forward(&bb, &base);

    let perturb = |states: &[Tensor; 3], which: usize, rng: &mut ChaCha8Rng| {
        let mut next = states.clone();
        let shape = states[which].shape().to_vec();
        let n = states[which].numel();
        let bump: Vec<f64> = states[which]
            .values()
            .iter()
            .zip(randn(rng, n))
            .map(|(v, e)| v + 0.3 * e)
            .collect();
        next[which] = Tensor::constant(bump, &shape);
        next
    };

    // bit-exact invariance upstream, live influence downstream
    let out_pix = toy_forward(&bb, &perturb(&base, 2, &mut rng));
    assert_eq!(out0[0], out_pix[0], "pixel input leaked into the first stream");
    assert_eq!(out0[1], out_pix[1], "pixel input leaked into the second stream");
    assert_ne!(out0[2], out_pix[2]);

    let out_fre = toy_forward(&bb, &perturb(&base, 1, &mut rng));
    assert_eq!(out0[0], out_fre[0], "frequency input leaked into the first stream");
    assert_ne!(out0[1], out_fre[1]);
    assert_ne!(out0[2], out_fre[2], "frequency stream should steer pixels");

    let out_dino = toy_forward(&bb, &perturb(&base, 0, &mut rng));
    assert_ne!(out0[1], out_dino[1], "semantic stream should steer frequencies");
    assert_ne!(out0[2], out_dino[2], "semantic stream should steer pixels");

    // autodiff agrees: upstream-from-downstream gradients are identically zero
    let grad_matrix = |loss_stream: usize| -> Vec<Option<Vec<f64>>> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = base
            .iter()
            .map(|s| tape.leaf(s.values().to_vec(), s.shape()))
            .collect();
        let mut binder = Binder::new(Some(&tape));
        let inputs = vec![
            StreamInput { kind: StreamKind::Dino, state: leaves[0].clone(), t: vec![0.9, 0.8] },
            StreamInput { kind: StreamKind::Fre, state: leaves[1].clone(), t: vec![0.5, 0.4] },
            StreamInput { kind: StreamKind::Pix, state: leaves[2].clone(), t: vec![0.3, 0.2] },
        ];
        let outs = bb.forward(&mut binder, &inputs, &[0, 1]).unwrap();
        tape.backward(&outs[loss_stream].square().sum_all()).unwrap();
        leaves.iter().map(|l| l.grad()).collect()
    };

    let zero = |g: &Option<Vec<f64>>| g.as_ref().map_or(true, |v| v.iter().all(|x| *x == 0.0));
    let live = |g: &Option<Vec<f64>>| g.as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0));

    let from_dino = grad_matrix(0);
    assert!(live(&from_dino[0]));
    assert!(zero(&from_dino[1]), "d(first)/d(second) must vanish");
    assert!(zero(&from_dino[2]), "d(first)/d(third) must vanish");

    let from_fre = grad_matrix(1);
    assert!(live(&from_fre[0]), "second stream should depend on the first");
    assert!(live(&from_fre[1]));
    assert!(zero(&from_fre[2]), "d(second)/d(third) must vanish");

    let from_pix = grad_matrix(2);
    assert!(live(&from_pix[0]), "third stream should depend on the first");
    assert!(live(&from_pix[1]), "third stream should depend on the second");
    assert!(live(&from_pix[2]));
}

// ─── 7: frozen-encoder contract ────────────────────────────────────────────

fn byte_hash(vals: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in vals {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

#[test]
fn c07_frozen_target_encoder_stays_fixed_while_live_one_trains() {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.steps = 8;
    cfg.batch_size = 2;
    cfg.model = ModelConfig { width: 16, depth: 1, heads: 2, patch: 4 };
    cfg.data = DataConfig::BlocksAndEdges { image_hw: 8 };
    cfg.wavelet.target_s = 2;
    cfg.train.freeze_frac = 0.5;
    cfg.train.eval_every = 0;
    let mut trainer = Trainer::new(cfg).unwrap();

    for _ in 0..4 {
        trainer.train_step().unwrap();
        assert!(trainer.model.frozen_embed.is_none(), "froze before its step");
    }
    trainer.train_step().unwrap();
    let frozen = trainer.model.frozen_embed.as_ref().expect("freeze point passed");
    let hash_w = byte_hash(&frozen.w.value);
    let hash_b = byte_hash(&frozen.b.value);
    assert!(frozen.w.frozen && frozen.b.frozen);
    let (live_w, _) = trainer.model.backbone.patch_params();
    let live_before = live_w.value.clone();

    for _ in 0..3 {
        trainer.train_step().unwrap();
    }
    let frozen = trainer.model.frozen_embed.as_ref().unwrap();
    assert_eq!(byte_hash(&frozen.w.value), hash_w, "frozen weights drifted");
    assert_eq!(byte_hash(&frozen.b.value), hash_b, "frozen bias drifted");
    let (live_w, live_b) = trainer.model.backbone.patch_params();
    assert_ne!(live_w.value, live_before, "live embedding stopped training");

    // no gradient path reaches the frozen copy, while the live one stays live
    let (x, _) = trainer.dataset.example(Split::Train, 0);
    let img = Tensor::constant(x, &[1, 1, 8, 8]);
    let tape = Tape::new();
    let mut binder = Binder::new(Some(&tape));
    let frozen = trainer.model.frozen_embed.as_ref().unwrap();
    let through_frozen =
        trainer.model.backbone.embed_image_with(&mut binder, &frozen.w, &frozen.b, &img).unwrap();
    let through_live = trainer.model.backbone.embed_image(&mut binder, &img).unwrap();
    let loss = through_frozen.square().sum_all().add(&through_live.square().sum_all()).unwrap();
    tape.backward(&loss).unwrap();
    let grads = binder.take_grads();
    assert!(
        !grads.contains_key(&frozen.w.id()) && !grads.contains_key(&frozen.b.id()),
        "frozen encoder received a gradient"
    );
    let gw = grads.get(&live_w.id()).expect("live embedding must get a gradient");
    assert!(gw.iter().any(|v| *v != 0.0));
    assert!(grads.contains_key(&live_b.id()));
}

// ─── 8: single-stream reduction matches an independent reference ───────────

#[test]
fn c08_disabling_aux_streams_recovers_vanilla_flow_matching() {
    let mut cfg = RunConfig::default();
    cfg.seed = 8;
    cfg.steps = 5;
    cfg.batch_size = 4;
    cfg.model = ModelConfig { width: 16, depth: 2, heads: 2, patch: 4 };
    cfg.data = DataConfig::BlocksAndEdges { image_hw: 8 };
    cfg.wavelet.target_s = 2;
    cfg.streams.dino.enabled = false;
    cfg.streams.fre.enabled = false;
    cfg.train.eval_every = 0;
    cfg.sample.steps = 6;
    cfg.sample.cfg_scale = 1.5;
    let mut trainer = Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        trainer.train_step().unwrap();
    }

    let mut weights: reference::Weights = HashMap::new();
    trainer.model.visit_params(&mut |p| {
        weights.insert(p.name.clone(), p.value.clone());
    });
    let ref_cfg = reference::RefConfig {
        width: 16,
        depth: 2,
        heads: 2,
        patch: 4,
        image_hw: 8,
        channels: 1,
        num_classes: trainer.dataset.num_classes(),
    };

    // forward outputs on shared weights
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..3 {
        let b = 2;
        let z = randn(&mut rng, b * 64);
        let ts: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = vec![case % 5, ref_cfg.num_classes];
        let mut binder = Binder::new(None);
        let inputs = vec![StreamInput {
            kind: StreamKind::Pix,
            state: Tensor::constant(z.clone(), &[b, 1, 8, 8]),
            t: ts.clone(),
        }];
        let got = trainer.model.backbone.forward(&mut binder, &inputs, &labels).unwrap();
        let want = reference::forward(&ref_cfg, &weights, &z, &ts, &labels);
        let err = max_abs_diff(got[0].values(), &want);
        assert!(err <= 1e-10, "forward case {case}: mismatch {err:e}");
    }

    // full sampler trajectories, classifier-free guidance active
    let labels = vec![Some(0), None];
    let mut rng_model = ChaCha8Rng::seed_from_u64(8181);
    let mut rng_ref = ChaCha8Rng::seed_from_u64(8181);
    let out = trainer.sample(&labels, &mut rng_model, true).unwrap();
    let traj = out.trajectory.unwrap();
    let want_states =
        reference::sample(&ref_cfg, &weights, &labels, &mut rng_ref, 6, 0.05, 1.5);
    assert_eq!(traj.states.len(), want_states.len());
    for (i, (got, want)) in traj.states.iter().zip(&want_states).enumerate() {
        let err = max_abs_diff(got, want);
        assert!(err <= 1e-10, "trajectory state {i}: mismatch {err:e}");
    }
    let err = max_abs_diff(&out.images, want_states.last().unwrap());
    assert!(err <= 1e-10, "final images: mismatch {err:e}");
}

// ─── 9: fitted filters compress better than Haar ───────────────────────────

#[test]
fn c09_fitting_the_filter_beats_haar_on_piecewise_smooth_images() {
    let start = Instant::now();
    let mut wins = 0;
    for seed in 0..3u64 {
        let dataset =
            Dataset::open(&DataConfig::BlocksAndEdges { image_hw: 16 }, 900 + seed).unwrap();
        let as_tensor = |split, i| {
            let (vals, _) = dataset.example(split, i);
            Tensor::constant(vals, &[1, 16, 16])
        };
        let train: Vec<Tensor> = (0..1000).map(|i| as_tensor(Split::Train, i)).collect();
        let heldout: Vec<Tensor> = (0..250).map(|i| as_tensor(Split::Heldout, i)).collect();

        let mut state = LearnableWavelet::init(4, 2, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        state.jitter(&mut rng, 0.05);
        let report =
            fit_wavelet(&mut state, &train, &heldout, &FitConfig::default(), &mut rng).unwrap();
        let haar_l1 = mean_terminal_l1(&heldout, &FilterBank::haar(), 2).unwrap();
        let improved = report.heldout_l1 < haar_l1 && report.final_reg_ortho < 1e-3;
        println!(
            "seed {seed}: fitted L1 {:.5} vs haar {:.5}, reg_ortho {:.2e} -> {}",
            report.heldout_l1,
            haar_l1,
            report.final_reg_ortho,
            if improved { "win" } else { "loss" }
        );
        if improved {
            wins += 1;
        }
    }
    assert!(wins >= 2, "fitted basis won {wins}/3 seeds, want >= 2");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "ran {secs:.0}s, want < 10 min");
}

// ─── 10: clock ordering helps, and only with real content ──────────────────

#[test]
fn c10_early_aux_clock_beats_synchronous_and_random_latents() {
    let mut base = RunConfig::default();
    base.steps = 5000;
    base.batch_size = 8;
    base.lr = 0.02;
    base.model = ModelConfig { width: 64, depth: 3, heads: 4, patch: 4 };
    base.data = DataConfig::BlocksAndEdges { image_hw: 16 };
    base.wavelet.target_s = 4;
    base.train.eval_every = 0;
    base.train.eval_batch = 32;

    let arms = standard_arms(&base);
    let wanted = ["synchronous", "linear_offset", "random_aux_latent"];
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    for spec in arms.iter().filter(|a| wanted.contains(&a.name.as_str())) {
        for seed in 0..3u64 {
            let res = run_arm(spec, seed, dir.path()).unwrap();
            println!(
                "{} seed {seed}: heldout pixel loss {:.5} ({:.0}s)",
                res.name, res.heldout_pix, res.wall_s
            );
            assert!(
                res.wall_s < 1800.0,
                "{} seed {seed} took {:.0}s, want < 30 min",
                res.name,
                res.wall_s
            );
            results.push(res);
        }
    }

    let vs_sync = compare_arms(&results, "linear_offset", "synchronous").unwrap();
    println!(
        "offset clock vs synchronous: {} wins / {} losses (p = {:.3})",
        vs_sync.wins, vs_sync.losses, vs_sync.p_value
    );
    assert!(
        vs_sync.wins >= 2,
        "offset clock won {}/3 seeds against synchronous, want >= 2",
        vs_sync.wins
    );

    let vs_random = compare_arms(&results, "linear_offset", "random_aux_latent").unwrap();
    println!(
        "true low-pass latent vs random latent: {} wins / {} losses (p = {:.3})",
        vs_random.wins, vs_random.losses, vs_random.p_value
    );
    assert!(
        vs_random.wins >= 2,
        "true latent won {}/3 seeds against random latents, want >= 2",
        vs_random.wins
    );
}

// ─── 11: two-image memorization and sampling ───────────────────────────────

fn write_pgm(path: &std::path::Path, pixels: &[u8; 256]) {
    let mut bytes = b"P5\n16 16\n255\n".to_vec();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).unwrap();
}

fn memorization_images() -> ([u8; 256], [u8; 256]) {
    let mut a = [0u8; 256];
    for r in 0..16usize {
        let base = (25.0 + 39.0 * r as f64 / 15.0).round() as u8;
        for c in 0..16usize {
            a[r * 16 + c] = if (4..12).contains(&r) && (4..12).contains(&c) {
                (217.0 - 23.0 * (c - 4) as f64 / 7.0).round() as u8
            } else {
                base
            };
        }
    }
    let mut b = [0u8; 256];
    for r in 0..16usize {
        for c in 0..16usize {
            let ramp = (191.0 - 76.0 * c as f64 / 15.0).round() as u8;
            b[r * 16 + c] = if (2..8).contains(&r) && (9..15).contains(&c) {
                32
            } else if (10..14).contains(&r) && (1..6).contains(&c) {
                236
            } else {
                ramp
            };
        }
    }
    (a, b)
}

#[test]
fn c11_a_two_image_model_reproduces_its_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let (img_a, img_b) = memorization_images();
    write_pgm(&dir.path().join("0_a.pgm"), &img_a);
    write_pgm(&dir.path().join("1_b.pgm"), &img_b);

    let mut cfg = RunConfig::default();
    cfg.steps = 3000;
    cfg.batch_size = 4;
    cfg.lr = 2e-3;
    cfg.lr_decay = true;
    cfg.optimizer = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    cfg.data = DataConfig::Folder { path: dir.path().to_path_buf(), image_hw: 16 };
    cfg.train.eval_every = 0;
    cfg.sample.steps = 64;
    cfg.sample.cfg_scale = 1.0;

    for seed in 0..3u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let mut trainer = Trainer::new(run_cfg).unwrap();
        for _ in 0..3000 {
            trainer.train_step().unwrap();
        }
        let train_set: Vec<Vec<f64>> = (0..2)
            .map(|i| trainer.dataset.example(Split::Train, i).0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::sample(seed));
        let labels = vec![Some(0), Some(1), Some(0), Some(1)];
        let out = trainer.sample(&labels, &mut rng, false).unwrap();
        for (si, sample) in out.images.chunks(256).enumerate() {
            let nn = train_set
                .iter()
                .map(|img| {
                    let mse = sample
                        .iter()
                        .zip(img)
                        .map(|(s, x)| (s - x) * (s - x))
                        .sum::<f64>()
                        / 256.0;
                    mse.sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            println!("seed {seed} sample {si}: nearest-neighbor distance {nn:.5}");
            assert!(
                nn <= 1e-2,
                "seed {seed} sample {si}: nearest training image at {nn}, want <= 1e-2"
            );
        }
    }
}

// ─── 12: bit-exact reproducibility ─────────────────────────────────────────

#[test]
fn c12_identical_configs_reproduce_runs_byte_for_byte() {
    let mut cfg = RunConfig::default();
    cfg.seed = 12;
    cfg.steps = 30;
    cfg.batch_size = 4;
    cfg.model = ModelConfig { width: 16, depth: 1, heads: 2, patch: 4 };
    cfg.data = DataConfig::BlocksAndEdges { image_hw: 8 };
    cfg.wavelet.target_s = 2;
    cfg.streams.dino.enabled = true;
    cfg.train.freeze_frac = 0.5;
    cfg.train.eval_every = 10;
    cfg.train.eval_batch = 4;

    let dir = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (dir.path().join("a"), dir.path().join("b"));
    Trainer::new(cfg.clone()).unwrap().run(&dir_a).unwrap();
    Trainer::new(cfg).unwrap().run(&dir_b).unwrap();

    let metrics_a = std::fs::read(dir_a.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir_b.join("metrics.csv")).unwrap();
    assert!(metrics_a == metrics_b, "metrics CSVs differ between identical runs");
    assert!(!metrics_a.is_empty());

    let ckpt_a = std::fs::read(dir_a.join("final.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir_b.join("final.ckpt")).unwrap();
    assert!(ckpt_a == ckpt_b, "checkpoints differ between identical runs");
    assert!(!ckpt_a.is_empty());
}
