use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use luno::eval::MethodKind;
use luno_cli::config::{ExperimentConfig, Overrides, Profile};
use luno_cli::{
    cmd_bench, cmd_calibrate, cmd_evaluate, cmd_fit_belief, cmd_generate, cmd_rollout, cmd_sample, cmd_train, CliError,
    SampleTarget,
};

#[derive(Parser)]
#[command(name = "luno", version, about = "Linearized uncertainty for Fourier neural operators")]
struct Cli {
    /// TOML or JSON file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the datasets.
    Generate,
    /// Train the model (and ensemble members if requested).
    Train,
    /// Fit the isotropic and low-rank Laplace weight beliefs.
    FitBelief {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tune each method's scale on the validation split.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        belief: Option<PathBuf>,
    },
    /// One-step metrics on the test splits.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        belief: Option<PathBuf>,
    },
    /// Autoregressive rollouts with uncertainty propagation.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        belief: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw output functions for one test input.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        belief: Option<PathBuf>,
        #[arg(long, default_value = "luno_la")]
        method: String,
        /// Index into the test pairs.
        #[arg(long, default_value_t = 0)]
        input: usize,
        #[arg(long, default_value_t = 10)]
        n_samples: usize,
        /// Text file with one query point per line.
        #[arg(long, conflicts_with = "refine")]
        points: Option<PathBuf>,
        /// Evaluate on the data grid refined by this factor.
        #[arg(long, default_value_t = 1)]
        refine: usize,
    },
    /// Time linearized against sample-based rollouts.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        belief: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline,
}

fn paths(v: Vec<PathBuf>) -> serde_json::Value {
    json!(v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let ov = Overrides { profile: cli.profile, seed: cli.seed, out: cli.out };
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &ov)?;
    Ok(match cli.command {
        Command::Generate => json!({ "datasets": paths(cmd_generate(&cfg)?) }),
        Command::Train => json!({ "checkpoints": paths(cmd_train(&cfg)?) }),
        Command::FitBelief { checkpoint } => json!({ "beliefs": paths(cmd_fit_belief(&cfg, checkpoint.as_deref())?) }),
        Command::Calibrate { checkpoint, belief } => {
            let cal = cmd_calibrate(&cfg, checkpoint.as_deref(), belief.as_deref())?;
            json!({ "best": cal.methods.iter().map(|(k, r)| (k.clone(), json!(r.best))).collect::<serde_json::Map<_, _>>() })
        }
        Command::Evaluate { checkpoint, belief } => {
            json!({ "records": cmd_evaluate(&cfg, checkpoint.as_deref(), belief.as_deref())?
                .iter()
                .map(|r| json!({ "method": r.method, "dataset": r.dataset, "rmse": r.rmse, "nll": r.nll, "chi2": r.chi2 }))
                .collect::<Vec<_>>() })
        }
        Command::Rollout { checkpoint, belief, steps } => {
            let curves = cmd_rollout(&cfg, checkpoint.as_deref(), belief.as_deref(), steps)?;
            json!({ "final_step": curves.iter().map(|(k, s)| (k.clone(), json!(s.last()))).collect::<serde_json::Map<_, _>>() })
        }
        Command::Sample { checkpoint, belief, method, input, n_samples, points, refine } => {
            let kind = MethodKind::parse(&method)?;
            let target = match points {
                Some(p) => SampleTarget::Points(p),
                None => SampleTarget::Grid { refine },
            };
            json!({ "files": paths(cmd_sample(&cfg, checkpoint.as_deref(), belief.as_deref(), kind, input, n_samples, &target)?) })
        }
        Command::Bench { checkpoint, belief } => {
            serde_json::to_value(cmd_bench(&cfg, checkpoint.as_deref(), belief.as_deref())?).expect("serializable")
        }
        Command::Pipeline => {
            cmd_generate(&cfg)?;
            cmd_train(&cfg)?;
            cmd_fit_belief(&cfg, None)?;
            cmd_calibrate(&cfg, None, None)?;
            let records = cmd_evaluate(&cfg, None, None)?;
            cmd_rollout(&cfg, None, None, None)?;
            let bench = cmd_bench(&cfg, None, None)?;
            json!({ "records": records.len(), "speedup_iso": bench.speedup_iso, "speedup_la": bench.speedup_la })
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
