use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use seer_core::data::{gzsl_split, make_synthetic, SyntheticSpec};
use seer_core::eval::{ablate_run, sweep_run, AccuracyMode, MetricsReport, SweepGrid};
use seer_core::pipeline::{evaluate_run_dir, train_full, Ablation, RunConfig};
use seer_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "seer", about = "Zero-shot feature generation and aligned-embedding classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory with a seen/unseen split.
    GenData(GenDataArgs),
    /// Train all stages and write a run directory.
    Train {
        /// RunConfig JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Run directory; overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a finished run directory and print its metrics.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Accuracy averaging; defaults to the run's own setting.
        #[arg(long, value_enum)]
        accuracy: Option<AccuracyArg>,
        /// Also write embeddings.csv into the run directory.
        #[arg(long)]
        embeddings: bool,
    },
    /// Train one run per grid point and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// SweepGrid JSON file (axes beta_vae, beta_cvae, lambda, z_dim).
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with one stage replaced by isotropic noise.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Stage to drop: none, vae, wgan or cvae.
        #[arg(long)]
        drop: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    d_sem: usize,
    #[arg(long, default_value_t = 64)]
    visual_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    unseen_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AccuracyArg {
    PerClass,
    Overall,
}

impl From<AccuracyArg> for AccuracyMode {
    fn from(a: AccuracyArg) -> Self {
        match a {
            AccuracyArg::PerClass => AccuracyMode::PerClass,
            AccuracyArg::Overall => AccuracyMode::Overall,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train { config, out } => {
            let mut cfg = load_config(&config)?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            if cfg.out_dir.is_none() {
                return Err(Error::invalid("train needs --out or an out_dir in the config"));
            }
            let m = train_full(&cfg)?.metrics;
            print_summary("train", &m);
            Ok(())
        }
        Command::Eval { run, accuracy, embeddings } => {
            let m = evaluate_run_dir(&run, accuracy.map(Into::into), embeddings)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Sweep { config, grid, seeds, out } => {
            let cfg = load_config(&config)?;
            let grid: SweepGrid = read_json(&grid)?;
            let rows = sweep_run(&cfg, &grid, &seeds, Some(&out))?;
            for r in &rows {
                let p = r.point;
                print_summary(
                    &format!(
                        "beta_vae={} beta_cvae={} lambda={} z_dim={} seed={}",
                        p.beta_vae, p.beta_cvae, p.lambda, p.z_dim, r.seed
                    ),
                    &r.metrics,
                );
            }
            Ok(())
        }
        Command::Ablate { config, drop, seeds, out } => {
            let cfg = load_config(&config)?;
            let drop: Ablation = drop.parse()?;
            if seeds.is_empty() {
                return Err(Error::invalid("ablate needs at least one seed"));
            }
            for seed in seeds {
                let base = RunConfig {
                    out_dir: Some(out.join(format!("{}_seed{seed}", drop.name()))),
                    ..cfg.clone()
                };
                let m = ablate_run(&base, drop, seed)?;
                print_summary(&format!("drop={} seed={seed}", drop.name()), &m);
            }
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        d_sem: a.d_sem,
        visual_dim: a.visual_dim,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let (ds, _) = make_synthetic(&spec)?;
    let split = gzsl_split(&ds, a.unseen_fraction, a.seed)?;
    ds.save(&a.out)?;
    split.save(a.out.join("split.json"))?;
    println!(
        "wrote {} samples, {} classes ({} unseen) to {}",
        ds.len(),
        ds.num_classes(),
        split.unseen_classes.len(),
        a.out.display()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    match RunConfig::load(path) {
        Err(Error::Io { path, source }) => Err(Error::Invalid(format!("{}: {source}", path.display()))),
        r => r,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn print_summary(label: &str, m: &MetricsReport) {
    println!(
        "{label}: S={:.2} U={:.2} H={:.2} overall={:.2} precision={:.3} recall={:.3}",
        m.s, m.u, m.h, m.overall_accuracy, m.precision, m.recall
    );
}
