//! `slm`: sparse linear model reconstruction, variational inference and
//! sequential measurement design on small images.

mod commands;
mod config;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::Generator;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "slm",
    version,
    about = "Variational inference and design for sparse linear models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// MAP (or posterior-mean) reconstruction from a fixed set of columns.
    Reconstruct,
    /// Double-loop variational inference with per-outer-loop diagnostics.
    Infer,
    /// Greedy design against low-pass, equispaced and variable-density baselines.
    Design,
    /// Write a synthetic test image.
    Synth {
        #[arg(value_enum, default_value = "phantom")]
        generator: Generator,
    },
}

/// Config overrides; each flag replaces the config-file key of the same name.
#[derive(Args, Default)]
struct Overrides {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// A or B.
    #[arg(long, global = true)]
    bounding: Option<String>,
    /// exact or lanczos:K.
    #[arg(long, global = true)]
    variance: Option<String>,
    /// op, ct, eq or rd.
    #[arg(long, global = true)]
    design: Option<String>,
    /// phantom, smooth_edges or a PGM path.
    #[arg(long, global = true)]
    image: Option<String>,
    #[arg(long, global = true)]
    side: Option<String>,
    #[arg(long, global = true)]
    image_seed: Option<String>,
    /// laplace or student_t.
    #[arg(long, global = true)]
    prior: Option<String>,
    #[arg(long, global = true)]
    tau_a: Option<String>,
    #[arg(long, global = true)]
    tau_r: Option<String>,
    #[arg(long, global = true)]
    nu: Option<String>,
    #[arg(long, global = true)]
    sigma2: Option<String>,
    #[arg(long, global = true)]
    noise_fraction: Option<String>,
    /// Comma-separated measured columns.
    #[arg(long, global = true)]
    columns: Option<String>,
    #[arg(long, global = true)]
    init: Option<String>,
    #[arg(long, global = true)]
    count: Option<String>,
    #[arg(long, global = true)]
    rd_seeds: Option<String>,
    #[arg(long, global = true)]
    max_outer: Option<String>,
    #[arg(long, global = true)]
    outer_tol: Option<String>,
    #[arg(long, global = true)]
    map_epsilon: Option<String>,
    /// map or mean.
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// Run both bounding types in `infer`.
    #[arg(long, global = true)]
    compare: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 23] {
        [
            ("seed", &self.seed),
            ("out", &self.out),
            ("bounding", &self.bounding),
            ("variance", &self.variance),
            ("design", &self.design),
            ("image", &self.image),
            ("side", &self.side),
            ("image_seed", &self.image_seed),
            ("prior", &self.prior),
            ("tau_a", &self.tau_a),
            ("tau_r", &self.tau_r),
            ("nu", &self.nu),
            ("sigma2", &self.sigma2),
            ("noise_fraction", &self.noise_fraction),
            ("columns", &self.columns),
            ("init", &self.init),
            ("count", &self.count),
            ("rd_seeds", &self.rd_seeds),
            ("max_outer", &self.max_outer),
            ("outer_tol", &self.outer_tol),
            ("map_epsilon", &self.map_epsilon),
            ("estimator", &self.estimator),
            ("compare", &self.compare),
        ]
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(p) => config::read_pairs(p)?,
            None => BTreeMap::new(),
        };
        for (k, v) in self.pairs() {
            if let Some(v) = v {
                pairs.insert(k.to_string(), v.clone());
            }
        }
        ExperimentConfig::from_pairs(&pairs)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = cli.overrides.config()?;
    match cli.command {
        Command::Synth { generator } => {
            let path = commands::synth(generator, cfg.side, cfg.seed, &cfg.out)?;
            println!("{}", path.display());
        }
        Command::Reconstruct => {
            let r = commands::reconstruct(&cfg)?;
            println!(
                "error {:.6} (zero-filled {:.6}), image {}",
                r.error,
                r.zero_filled_error,
                r.image.display()
            );
        }
        Command::Infer => {
            for st in commands::infer(&cfg)? {
                let phi = st.phi_history.last().map(|p| p.1).unwrap_or(f64::NAN);
                println!(
                    "{:?}: {} outer loops, phi {phi:.6}, converged {}",
                    st.bounding,
                    st.phi_history.len().saturating_sub(1),
                    st.converged
                );
            }
        }
        Command::Design => {
            let r = commands::design(&cfg)?;
            let last =
                |rows: &[commands::ResultRow]| rows.last().map(|r| r.error).unwrap_or(f64::NAN);
            println!("init {:?}, optimized picks {:?}", r.init, r.op_selected);
            println!(
                "final errors: op {:.4}, ct {:.4}, eq {:.4}, rd mean {:.4}",
                last(&r.op),
                last(&r.ct),
                last(&r.eq),
                last(&r.rd)
            );
        }
    }
    Ok(())
}
