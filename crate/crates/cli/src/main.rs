use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fusion_core::datagen::{gen_synthetic, LqToy, SyntheticConfig};
use fusion_core::estimators::{alpha_sweep, lq_alpha_sweep, TrainConfig};
use fusion_core::feasibility::GapConfig;
use fusion_core::harness::{
    audit_seeds, run_experiment, run_theory_suite, summarize_dataset, write_json, DatasetSpec, ExperimentConfig,
    TheoryOptions, PRESET_ITERS,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "fusion",
    version,
    about = "Constrained fusion of randomized and observational data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV plus a JSON sidecar.
    GenData(GenArgs),
    /// Run a (method x dial x seed) grid and write metrics and tables.
    Run(RunArgs),
    /// Train weighted fusion along a grid of alpha and record the path.
    SweepAlpha(SweepArgs),
    /// Check the testable consequences of the theory on toy constructions.
    VerifyTheory(TheoryArgs),
    /// Estimate feasibility gaps in raw and representation space.
    AuditFeasibility(AuditArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataPreset {
    AppendixF,
    Section4,
    Severe,
}

#[derive(Args)]
struct DataFlags {
    #[arg(long, value_enum, default_value = "section4")]
    preset: DataPreset,
    /// SyntheticConfig JSON; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overlap dial in [0, 1].
    #[arg(long)]
    dial: Option<f64>,
}

impl DataFlags {
    fn synthetic(&self) -> Result<SyntheticConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => match self.preset {
                DataPreset::AppendixF => SyntheticConfig::appendix_f(self.seed),
                DataPreset::Section4 => SyntheticConfig::section4(0.0, self.seed),
                DataPreset::Severe => SyntheticConfig::severe(self.seed),
            },
        };
        cfg.seed = self.seed;
        if let Some(d) = self.dial {
            cfg.overlap_dial = d;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    data: DataFlags,
    /// Output CSV; the sidecar is written next to it with a `.json` suffix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// ExperimentConfig JSON.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in grid: section4 or severe.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the grid to one dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict the grid to one overlap dial.
    #[arg(long)]
    dial: Option<f64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataFlags,
    /// Comma-separated ascending grid starting at 0.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2,4")]
    alphas: Vec<f64>,
    /// TrainConfig JSON for the weighted runs.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = PRESET_ITERS)]
    iters: usize,
    /// Sweep the exact weighted path of a random linear-quadratic toy instead.
    #[arg(long)]
    lq: bool,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Run only these checks (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Imbalance of the two-cell minimax construction.
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    /// Directory receiving verdicts.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long, value_enum, default_value = "section4")]
    preset: DataPreset,
    /// Dataset seeds (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 0.0)]
    dial: f64,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    /// Train a primal-dual representation for this many steps to report its
    /// overlap and information terms; 0 skips it.
    #[arg(long, default_value_t = 0)]
    phi_iters: usize,
    /// Directory receiving audit.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_data(args: &GenArgs) -> Result<ExitCode> {
    let cfg = args.data.synthetic()?;
    let ds = gen_synthetic(&cfg)?;
    ds.save_csv(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let summary = summarize_dataset(&ds)?;
    let sidecar = args.out.with_extension("json");
    write_json(
        &sidecar,
        &serde_json::json!({ "summary": summary, "record": ds.record }),
    )?;
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => ExperimentConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        (None, Some(name)) => ExperimentConfig::preset(name, "out")?,
        (None, None) => bail!("run needs --config or --preset"),
    };
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(d) = args.dial {
        cfg.dials = vec![d];
    }
    let outcome = run_experiment(&cfg, args.jobs)?;
    outcome.write()?;
    print!("{}", outcome.table());
    for f in &outcome.failures {
        eprintln!("cell {} failed: {}", f.cell, f.reason);
    }
    Ok(if outcome.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn sweep_alpha(args: &SweepArgs) -> Result<ExitCode> {
    if args.lq {
        let toy = LqToy::random(10, 3, args.data.seed)?;
        let (constants, rows) = lq_alpha_sweep(&toy, &args.alphas)?;
        write_csv(&args.out, &rows)?;
        write_json(&args.out.with_extension("json"), &constants)?;
        println!("{}", serde_json::to_string_pretty(&constants)?);
        return Ok(ExitCode::SUCCESS);
    }
    let train_cfg: TrainConfig = match &args.train {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig {
            iters: args.iters,
            seed: args.data.seed,
            ..TrainConfig::default()
        },
    };
    let ds = gen_synthetic(&args.data.synthetic()?)?;
    let (train, eval) = ds.split_holdout(0.2, args.data.seed)?;
    let rows = alpha_sweep(&train, &eval, &args.alphas, &train_cfg)?;
    write_csv(&args.out, &rows)?;
    for r in &rows {
        println!(
            "alpha {:>6}  r_obs {:.4}  r_rct {:.4}  |g| {:.4}  path {:.4}",
            r.alpha, r.r_obs, r.r_rct, r.g_norm, r.path_dist
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_theory(args: &TheoryArgs) -> Result<ExitCode> {
    let opts = TheoryOptions {
        seed: args.seed,
        epsilon: args.epsilon,
        ..TheoryOptions::default()
    };
    let report = run_theory_suite(&args.only, &opts)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("verdicts.json"), &report)?;
    }
    for v in &report.verdicts {
        let status = match (v.passed, v.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        let kind = if v.hard { "" } else { " (soft)" };
        println!("{status} {}{kind}", v.name);
        if let Some(n) = &v.note {
            println!("     {n}");
        }
    }
    Ok(if report.hard_checks_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn audit(args: &AuditArgs) -> Result<ExitCode> {
    let config = match args.preset {
        DataPreset::AppendixF => SyntheticConfig::appendix_f(0),
        DataPreset::Section4 | DataPreset::Severe => SyntheticConfig::section4(0.0, 0),
    };
    let spec = DatasetSpec::Synthetic {
        config,
        random_exclusion: matches!(args.preset, DataPreset::Severe),
    };
    let gap = GapConfig {
        restarts: args.restarts,
        ..GapConfig::default()
    };
    let phi = (args.phi_iters > 0).then(|| TrainConfig {
        iters: args.phi_iters,
        ..TrainConfig::default()
    });
    let rows = audit_seeds(&spec, args.dial, &args.seed, &gap, phi.as_ref())?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("audit.json"), &rows)?;
    }
    for r in &rows {
        println!(
            "seed {:>3}  gap_raw {:.5}  gap_raw_net {:.5}  gap_phi {:.5}  phi<=raw {}",
            r.seed, r.audit.gap_raw, r.audit.gap_raw_net, r.audit.gap_phi, r.representation_no_worse
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSION_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::SweepAlpha(a) => sweep_alpha(a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::AuditFeasibility(a) => audit(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
