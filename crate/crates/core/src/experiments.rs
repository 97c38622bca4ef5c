//! Ablation harness: named training arms run sequentially under shared
//! settings, with a paired sign test for comparing arms across seeds.

use crate::config::{BasisKind, RunConfig};
use crate::error::{Error, Result};
use crate::flow::ClockSchedule;
use crate::train::Trainer;
use std::io::Write;
use std::path::Path;

// ─── arms ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ArmSpec {
    pub name: String,
    pub cfg: RunConfig,
}

/// The standard comparison set, derived from a base run: the frequency
/// clock family, the clock-coupling and target ablations, the fixed-basis
/// swaps, and a pixel-only control.
pub fn standard_arms(base: &RunConfig) -> Vec<ArmSpec> {
    let arm = |name: &str, edit: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        ArmSpec {
            name: name.to_string(),
            cfg,
        }
    };
    vec![
        arm("synchronous", &|c| {
            c.streams.fre.schedule = ClockSchedule::Synchronous;
        }),
        arm("cascaded", &|c| {
            c.streams.fre.schedule = ClockSchedule::Cascaded { b: 0.5 };
        }),
        arm("linear_offset", &|c| {
            c.streams.fre.schedule = ClockSchedule::LinearOffset { delta: 0.25 };
        }),
        arm("variance_shifted", &|c| {
            c.streams.fre.schedule = ClockSchedule::VarianceShifted { s: 3.0 };
        }),
        arm("independent_clocks", &|c| {
            c.streams.fre.schedule = ClockSchedule::LinearOffset { delta: 0.25 };
            c.train.independent_clocks = true;
        }),
        arm("random_aux_latent", &|c| {
            c.streams.fre.schedule = ClockSchedule::LinearOffset { delta: 0.25 };
            c.train.random_aux_latent = true;
        }),
        arm("basis_haar", &|c| {
            c.wavelet.basis = BasisKind::Haar;
        }),
        arm("basis_laplacian", &|c| {
            c.wavelet.basis = BasisKind::Laplacian;
        }),
        arm("pixel_only", &|c| {
            c.streams.fre.enabled = false;
        }),
    ]
}

// ─── running ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    pub seed: u64,
    pub heldout_pix: f64,
    pub heldout_fre: Option<f64>,
    pub wall_s: f64,
}

pub const SUMMARY_HEADER: &str = "arm,seed,heldout_pix,heldout_fre,wall_s";

impl ArmResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.name,
            self.seed,
            self.heldout_pix,
            self.heldout_fre.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_s,
        )
    }
}

/// Train one arm to completion under `out_dir/<name>-s<seed>/` and report
/// its final held-out losses.
pub fn run_arm(spec: &ArmSpec, seed: u64, out_dir: &Path) -> Result<ArmResult> {
    let mut cfg = spec.cfg.clone();
    cfg.seed = seed;
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&out_dir.join(format!("{}-s{}", spec.name, seed)))?;
    let (_, fre, pix) = trainer.heldout_eval()?;
    Ok(ArmResult {
        name: spec.name.clone(),
        seed,
        heldout_pix: pix,
        heldout_fre: fre,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Run every arm on every seed, sequentially, appending to
/// `out_dir/summary.csv` as results land.
pub fn run_ablation(
    arms: &[ArmSpec],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<ArmResult>> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.csv"))?);
    writeln!(summary, "{}", SUMMARY_HEADER)?;
    let mut results = Vec::new();
    for spec in arms {
        for &seed in seeds {
            let res = run_arm(spec, seed, out_dir)?;
            writeln!(summary, "{}", res.csv_row())?;
            summary.flush()?;
            results.push(res);
        }
    }
    Ok(results)
}

// ─── comparison ────────────────────────────────────────────────────────────

/// Two-sided exact binomial sign test: probability of a split at least this
/// uneven under a fair coin. Ties must be dropped before calling.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let mut tail = 0.0;
    for i in 0..=k {
        tail += binomial(n, i);
    }
    (2.0 * tail / (2.0f64).powi(n as i32)).min(1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut out = 1.0;
    for i in 0..k {
        out *= (n - i) as f64 / (i + 1) as f64;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Paired per-seed comparison of final held-out pixel loss: a "win" is a
/// seed where `candidate` achieves strictly lower loss than `baseline`.
pub fn compare_arms(
    results: &[ArmResult],
    candidate: &str,
    baseline: &str,
) -> Result<Comparison> {
    let pick = |name: &str, seed: u64| {
        results
            .iter()
            .find(|r| r.name == name && r.seed == seed)
            .map(|r| r.heldout_pix)
    };
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = results
            .iter()
            .filter(|r| r.name == candidate)
            .map(|r| r.seed)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    if seeds.is_empty() {
        return Err(Error::invalid(format!("no results for arm {candidate}")));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for &seed in &seeds {
        let (Some(c), Some(b)) = (pick(candidate, seed), pick(baseline, seed)) else {
            return Err(Error::invalid(format!(
                "arm {baseline} missing seed {seed} for pairing"
            )));
        };
        if c < b {
            wins += 1;
        } else if c > b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    Ok(Comparison {
        wins,
        losses,
        ties,
        p_value: sign_test_p(wins, losses),
    })
}
