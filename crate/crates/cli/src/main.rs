//! Command-line harness: training runs, sampling, basis fitting, spectral
//! trajectory analysis, ablation sweeps, and a gradient self-test.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use freqforce::config::{seeds, RunConfig};
use freqforce::data::{Dataset, Split};
use freqforce::image::{write_pnm, Image};
use freqforce::sampler::{band_convergence, convergence_time, load_trajectory, save_trajectory};
use freqforce::tensor::Tensor;
use freqforce::train::Trainer;
use freqforce::wavelet::{fit_wavelet, FitConfig, LearnableWavelet};
use freqforce::{checkpoint, experiments, selftest};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "freqforce", version, about = "Frequency-forced flow matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics, timing, and the final checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of images to draw.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Class to condition on; omit for unconditional samples.
        #[arg(long)]
        label: Option<usize>,
        /// Noise seed; defaults to the run's derived sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the integration step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the guidance scale.
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Also write the pixel-state trajectory for spectral analysis.
        #[arg(long)]
        record_trajectory: bool,
    },
    /// Fit the learnable wavelet on dataset images alone, without a model.
    WaveletFit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        /// Training images to draw from the dataset.
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Band-convergence analysis of a recorded sampling trajectory.
    Spectrum {
        #[arg(long)]
        trajectory: PathBuf,
        /// Output CSV of grid time and per-band relative errors.
        #[arg(long)]
        out: PathBuf,
        /// Settling threshold for the reported convergence times.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Run the standard ablation arms sequentially across seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Subset of arm names; omit to run all.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
    },
    /// Verify every backward pass against finite differences.
    Selftest,
    /// Write a default run config to stdout or a file.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            out,
            resume,
        } => {
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = checkpoint::load(&path)
                        .with_context(|| format!("loading {}", path.display()))?;
                    Trainer::from_checkpoint(&ckpt)?
                }
                None => {
                    let cfg = RunConfig::from_path(&config)?;
                    Trainer::new(cfg)?
                }
            };
            trainer.run(&out)?;
            println!(
                "trained {} steps -> {}",
                trainer.step,
                out.join("final.ckpt").display()
            );
        }
        Cmd::Sample {
            checkpoint: ckpt_path,
            out,
            count,
            label,
            seed,
            steps,
            cfg_scale,
            record_trajectory,
        } => {
            if count == 0 {
                bail!("--count must be at least 1");
            }
            let ckpt = checkpoint::load(&ckpt_path)
                .with_context(|| format!("loading {}", ckpt_path.display()))?;
            let mut trainer = Trainer::from_checkpoint(&ckpt)?;
            if let Some(s) = steps {
                trainer.cfg.sample.steps = s;
            }
            if let Some(w) = cfg_scale {
                trainer.cfg.sample.cfg_scale = w;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.unwrap_or_else(|| seeds::sample(trainer.cfg.seed)),
            );
            let labels = vec![label; count];
            let result = trainer.sample(&labels, &mut rng, record_trajectory)?;
            std::fs::create_dir_all(&out)?;
            let c = trainer.dataset.channels();
            let hw = trainer.dataset.image_hw();
            let ext = if c == 1 { "pgm" } else { "ppm" };
            let frame = c * hw * hw;
            for i in 0..count {
                let img = Image {
                    channels: c,
                    height: hw,
                    width: hw,
                    values: result.images[i * frame..(i + 1) * frame].to_vec(),
                };
                write_pnm(&out.join(format!("sample_{i:03}.{ext}")), &img)?;
            }
            if let Some(traj) = &result.trajectory {
                save_trajectory(&out.join("trajectory.fqtr"), traj)?;
            }
            println!("wrote {count} samples -> {}", out.display());
        }
        Cmd::WaveletFit {
            config,
            out,
            steps,
            images,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let dataset = Dataset::open(&cfg.data, cfg.seed)?;
            if images < 2 {
                bail!("--images must be at least 2");
            }
            let c = dataset.channels();
            let hw = dataset.image_hw();
            let as_tensor = |split, i| {
                let (vals, _) = dataset.example(split, i);
                Tensor::constant(vals, &[c, hw, hw])
            };
            let train: Vec<Tensor> = (0..images as u64)
                .map(|i| as_tensor(Split::Train, i))
                .collect();
            let heldout: Vec<Tensor> = (0..(images as u64 / 4).max(1))
                .map(|i| as_tensor(Split::Heldout, i))
                .collect();
            let mut state = LearnableWavelet::init(
                cfg.wavelet.filter_len,
                cfg.wavelet_levels(),
                cfg.wavelet.init_gamma,
            )?;
            let fit_cfg = FitConfig {
                steps,
                lambda_sum: cfg.wavelet.lambda_sum,
                lambda_hp: cfg.wavelet.lambda_hp,
                lambda_ortho: cfg.wavelet.lambda_ortho,
                lambda_sparse: cfg.wavelet.lambda_sparse,
                ..FitConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::init(cfg.seed));
            let report = fit_wavelet(&mut state, &train, &heldout, &fit_cfg, &mut rng)?;
            std::fs::create_dir_all(&out)?;
            let mut trace = std::io::BufWriter::new(std::fs::File::create(
                out.join("fit_trace.csv"),
            )?);
            writeln!(trace, "step,reg_sum,reg_hp,reg_ortho,reg_sparse,total")?;
            for r in &report.trace {
                writeln!(
                    trace,
                    "{},{},{},{},{},{}",
                    r.step, r.reg_sum, r.reg_hp, r.reg_ortho, r.reg_sparse, r.total
                )?;
            }
            trace.flush()?;
            let filter_lines: Vec<String> =
                state.h_lp.iter().map(|v| v.to_string()).collect();
            std::fs::write(out.join("filter.txt"), filter_lines.join("\n") + "\n")?;
            println!(
                "fitted filter of length {}: heldout L1 {:.6}, reg_ortho {:.2e}",
                state.h_lp.len(),
                report.heldout_l1,
                report.final_reg_ortho
            );
        }
        Cmd::Spectrum {
            trajectory,
            out,
            threshold,
        } => {
            let traj = load_trajectory(&trajectory)
                .with_context(|| format!("loading {}", trajectory.display()))?;
            let conv = band_convergence(&traj)?;
            let mut csv = String::from("t,low_err,high_err\n");
            for i in 0..conv.grid.len() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    conv.grid[i], conv.low_err[i], conv.high_err[i]
                ));
            }
            std::fs::write(&out, csv)?;
            let t_low = convergence_time(&conv.grid, &conv.low_err, threshold);
            let t_high = convergence_time(&conv.grid, &conv.high_err, threshold);
            println!(
                "low band settles at t={t_low}, high band at t={t_high} \
                 (threshold {threshold}); lead {:.4}",
                t_high - t_low
            );
        }
        Cmd::Ablate {
            config,
            out,
            seeds,
            arms,
        } => {
            let base = RunConfig::from_path(&config)?;
            let mut specs = experiments::standard_arms(&base);
            if let Some(names) = arms {
                let known: Vec<String> =
                    specs.iter().map(|s| s.name.clone()).collect();
                for n in &names {
                    if !known.contains(n) {
                        bail!("unknown arm {n}; available: {}", known.join(", "));
                    }
                }
                specs.retain(|s| names.contains(&s.name));
            }
            let results = experiments::run_ablation(&specs, &seeds, &out)?;
            for r in &results {
                println!(
                    "{:>20} seed {}: heldout_pix {:.6} ({:.1}s)",
                    r.name, r.seed, r.heldout_pix, r.wall_s
                );
            }
            let have = |n: &str| results.iter().any(|r| r.name == n);
            if have("linear_offset") && have("synchronous") {
                let cmp =
                    experiments::compare_arms(&results, "linear_offset", "synchronous")?;
                println!(
                    "linear_offset vs synchronous: {} wins / {} losses / {} ties, p = {:.4}",
                    cmp.wins, cmp.losses, cmp.ties, cmp.p_value
                );
            }
        }
        Cmd::Selftest => {
            let outcomes = selftest::run(selftest::DEFAULT_TOLERANCE)?;
            let mut failed = false;
            for o in &outcomes {
                println!(
                    "{} {:<18} max rel err {:.3e} over {} coords",
                    if o.passed { "ok  " } else { "FAIL" },
                    o.name,
                    o.report.max_rel_err,
                    o.report.coords
                );
                failed |= !o.passed;
            }
            if failed {
                bail!("gradient self-test failed");
            }
        }
        Cmd::InitConfig { out } => {
            let text = RunConfig::default().to_toml()?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &text)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
