use clap::{Parser, Subcommand, ValueEnum};
use mcmppi_core::kinematics::ChainModel;
use mcmppi_core::manifold_codec::{
    generate_dataset, train_vae, Decoder, IdentityChart, ManifoldDataset, TrainConfig, VaeParams,
};
use mcmppi_harness::decoders::{build_decoder, cached_reference_vae};
use mcmppi_harness::episode::{run_episode, DecoderKind, EpisodeLog, EpisodeOptions, Mode};
use mcmppi_harness::experiment::{compare_sampling_modes, run_experiment};
use mcmppi_harness::plots::emit_plots;
use mcmppi_harness::scenario::{builtin, ScenarioSpec};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Manifold-constrained MPPI: dataset generation, VAE training, closed-loop
/// episodes and experiment suites.
#[derive(Parser)]
#[command(name = "mcmppi", version)]
struct Cli {
    /// Worker threads for rollout evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: $MCMPPI_OUT_DIR or ./mcmppi-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    McMppi,
    LatentOnly,
    VanillaPenalty,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::McMppi => Mode::McMppi,
            ModeArg::LatentOnly => Mode::LatentOnly,
            ModeArg::VanillaPenalty => Mode::VanillaPenalty,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Analytic,
    Learned,
}

impl From<DecoderArg> for DecoderKind {
    fn from(d: DecoderArg) -> DecoderKind {
        match d {
            DecoderArg::Analytic => DecoderKind::Analytic,
            DecoderArg::Learned => DecoderKind::Learned,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    HardConstraint,
    StaticObstacle,
    DynamicObstacle,
}

#[derive(Subcommand)]
enum Command {
    /// Sample configurations on the constraint manifold.
    GenData {
        #[arg(long, default_value = "planar")]
        model: String,
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the VAE decoder on a dataset.
    Train {
        /// Dataset file; generated with the default recipe when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "planar")]
        model: String,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run one closed-loop episode.
    Run {
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum, default_value = "mc-mppi")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "analytic")]
        decoder: DecoderArg,
        /// Trained VAE file for the learned decoder.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment suite and write its report.
    Bench {
        #[arg(value_enum)]
        suite: Suite,
        /// Scenario template; defaults to the suite's shipped scenario.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, value_enum, default_value = "learned")]
        decoder: DecoderArg,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Write CSV plot series from an episode log.
    Plots {
        /// JSON-lines episode log written by `run`.
        #[arg(long)]
        log: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os("MCMPPI_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mcmppi-out"))
}

fn load_scenario(name: &str) -> Result<ScenarioSpec, Failure> {
    if let Some(text) = builtin(name) {
        return ScenarioSpec::from_toml_str(text).map_err(|e| Failure::Usage(e.to_string()));
    }
    ScenarioSpec::load(name).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_vae(model: &ChainModel, vae: &Option<PathBuf>, out: &Path) -> Result<VaeParams, Failure> {
    match vae {
        Some(p) => VaeParams::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => Ok(cached_reference_vae(model, &out.join(format!("vae-{}.bin", model.name)))?),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<bool, Failure> {
    let out = out_dir(&cli.out);
    match cli.command {
        Command::GenData { model, count, seed } => {
            let model = ChainModel::resolve(&model).map_err(|e| Failure::Usage(e.to_string()))?;
            let data = generate_dataset(&model, count, seed)?;
            let path = out.join(format!("dataset-{}.bin", model.name));
            std::fs::create_dir_all(&out)?;
            data.save(&path)?;
            println!("wrote {} samples to {}", data.len(), path.display());
            Ok(true)
        }
        Command::Train { dataset, model, epochs, seed } => {
            let model = ChainModel::resolve(&model).map_err(|e| Failure::Usage(e.to_string()))?;
            let data = match dataset {
                Some(p) => ManifoldDataset::load(&p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
                None => generate_dataset(&model, 5000, 1)?,
            };
            let cfg = TrainConfig {
                epochs,
                seed,
                ..Default::default()
            };
            let params = train_vae(&model, &data, &cfg)?;
            let path = out.join(format!("vae-{}.bin", model.name));
            std::fs::create_dir_all(&out)?;
            params.save(&path)?;
            println!(
                "final loss {:.6e}, reconstruction bound {:.4e}; wrote {}",
                params.meta.final_elbo,
                params.meta.recon_bound,
                path.display()
            );
            Ok(true)
        }
        Command::Run {
            scenario,
            mode,
            decoder,
            vae,
            seed,
        } => {
            let spec = load_scenario(&scenario)?;
            let model = spec.chain_model()?;
            let mode = Mode::from(mode);
            let kind = DecoderKind::from(decoder);
            let dec: Box<dyn Decoder> = match (mode, kind) {
                (Mode::VanillaPenalty, _) => Box::new(IdentityChart {
                    dim: model.joint_count(),
                }),
                (_, DecoderKind::Learned) => Box::new(load_vae(&model, &vae, &out)?),
                (_, DecoderKind::Analytic) => {
                    build_decoder(&model, kind, None).map_err(|e| Failure::Usage(e.to_string()))?
                }
            };
            let log = run_episode(&spec, mode, dec.as_ref(), kind, EpisodeOptions { seed })
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let path = out.join("episode.jsonl");
            write(&path, &log.to_json_lines())?;
            emit_plots(&log, &out)?;
            println!(
                "{} {}: {} at t = {:.2} s, time-averaged ‖h‖ = {:.3e}, max ‖h‖ = {:.3e}; log {}",
                log.scenario,
                log.mode.as_str(),
                log.outcome.label(),
                log.outcome.time(),
                log.time_avg_h(),
                log.max_h(),
                path.display()
            );
            Ok(log.outcome.is_success())
        }
        Command::Bench {
            suite,
            scenario,
            decoder,
            vae,
            seed,
            trials,
        } => {
            let default = match suite {
                Suite::HardConstraint => "hard-constraint",
                Suite::StaticObstacle => "static-obstacle",
                Suite::DynamicObstacle => "dynamic-obstacle",
            };
            let spec = load_scenario(scenario.as_deref().unwrap_or(default))?;
            let model = spec.chain_model()?;
            let kind = DecoderKind::from(decoder);
            let params = match kind {
                DecoderKind::Learned => Some(load_vae(&model, &vae, &out)?),
                DecoderKind::Analytic => None,
            };
            let dec = build_decoder(&model, kind, params).map_err(|e| Failure::Usage(e.to_string()))?;
            let (report, timing) = match suite {
                Suite::HardConstraint | Suite::DynamicObstacle => {
                    let modes: &[Mode] = match suite {
                        Suite::HardConstraint => &Mode::ALL,
                        _ => &[Mode::McMppi],
                    };
                    let r = run_experiment(&spec, modes, trials, seed, dec.as_ref(), kind)
                        .map_err(|e| Failure::Usage(e.to_string()))?;
                    for m in &r.modes {
                        println!(
                            "{:>16}: success {}/{}, time-averaged ‖h‖ {:.3e} ± {:.3e}",
                            m.mode.as_str(),
                            m.successes,
                            m.trials,
                            m.avg_h_mean,
                            m.avg_h_std
                        );
                    }
                    (r.to_json(), serde_json::to_string_pretty(&r.timing)?)
                }
                Suite::StaticObstacle => {
                    let c = compare_sampling_modes(&spec, trials, seed, dec.as_ref(), kind)
                        .map_err(|e| Failure::Usage(e.to_string()))?;
                    println!(
                        "median convergence-time ratio per_step/single_instance {:.2}; single_instance smoother on {}/{}",
                        c.median_time_ratio,
                        c.smoother_single,
                        c.pairs.len()
                    );
                    (serde_json::to_string_pretty(&c)?, String::from("[]"))
                }
            };
            let path = out.join(format!("{default}-report.json"));
            write(&path, &report)?;
            write(&out.join(format!("{default}-timing.json")), &timing)?;
            println!("report {}", path.display());
            Ok(true)
        }
        Command::Plots { log } => {
            let text = std::fs::read_to_string(&log).map_err(|e| Failure::Usage(format!("{}: {e}", log.display())))?;
            let log = EpisodeLog::from_json_lines(&text).map_err(Failure::Usage)?;
            for p in emit_plots(&log, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
