use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use slm_core::design::{
    baseline_design, centered_order, dct_column_pool, design_model, evaluate_design,
    run_sequential_design, CandidateBlock, DesignKind, DesignOptions, DesignTrajectory,
};
use slm_core::imaging::{image_prior, phantom, read_pgm, smooth_edges, write_pgm, GrayImage};
use slm_core::linalg::norm2;
use slm_core::solvers::{map_estimate, InnerOptions};
use slm_core::varinf::{
    posterior_summary, run_double_loop, Bounding, OuterOptions, VariationalState,
};
use slm_core::ModelSpec;

use crate::config::{Estimator, ExperimentConfig, ImageSource};
use crate::output::{opt, CsvOut};

/// Synthetic image generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Generator {
    Phantom,
    SmoothEdges,
}

impl Generator {
    pub fn image(self, side: usize, seed: u64) -> GrayImage {
        match self {
            Self::Phantom => phantom(side, seed),
            Self::SmoothEdges => smooth_edges(side, seed),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Phantom => "phantom",
            Self::SmoothEdges => "smooth_edges",
        }
    }
}

/// Writes `<out>/<generator>_<side>_<seed>.pgm` and returns its path.
pub fn synth(generator: Generator, side: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{}_{side}_{seed}.pgm", generator.name()));
    write_pgm(&path, &generator.image(side, seed), true)?;
    Ok(path)
}

struct Setup {
    truth: GrayImage,
    template: ModelSpec,
    pool: Vec<CandidateBlock>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let truth = match &cfg.image {
        ImageSource::Phantom => phantom(cfg.side, cfg.image_seed),
        ImageSource::SmoothEdges => smooth_edges(cfg.side, cfg.image_seed),
        ImageSource::File(p) => {
            let img = read_pgm(p).with_context(|| format!("reading image {}", p.display()))?;
            if img.width != cfg.side || img.height != cfg.side {
                bail!(
                    "{} is {}x{}, config side is {}; set side to match",
                    p.display(),
                    img.width,
                    img.height,
                    cfg.side
                );
            }
            img
        }
    };
    let sigma2 = cfg
        .sigma2
        .unwrap_or(cfg.noise_fraction * truth.mean_power());
    if !(sigma2 > 0.0) {
        bail!("noise variance must be positive; the image is blank, set sigma2");
    }
    let (wavelet, tv) = cfg.potentials()?;
    let template = image_prior(cfg.side, cfg.side, sigma2, wavelet, tv)?;
    let pool = dct_column_pool(cfg.side, cfg.side)?;
    Ok(Setup {
        truth,
        template,
        pool,
    })
}

/// Measured columns for single-design commands: explicit `columns`, else the
/// configured baseline kind, else a low-pass block of `count` columns.
fn fixed_columns(cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    if let Some(c) = &cfg.columns {
        return Ok(c.clone());
    }
    let kind = match cfg.design {
        DesignKind::Optimized => DesignKind::LowPass,
        k => k,
    };
    Ok(baseline_design(kind, cfg.side, cfg.count, &[], cfg.seed)?)
}

fn outer_options(cfg: &ExperimentConfig, base: OuterOptions) -> OuterOptions {
    OuterOptions {
        max_outer: cfg.max_outer.unwrap_or(base.max_outer),
        tol: cfg.outer_tol.unwrap_or(base.tol),
        ..base
    }
}

fn image_like(truth: &GrayImage, pixels: Vec<f64>) -> Result<GrayImage> {
    Ok(GrayImage::new(truth.width, truth.height, pixels)?)
}

fn error(u: &[f64], truth: &[f64]) -> f64 {
    norm2(&u.iter().zip(truth).map(|(a, b)| a - b).collect::<Vec<_>>())
}

fn ids_text(ids: &[usize]) -> String {
    ids.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct ReconstructReport {
    pub error: f64,
    pub zero_filled_error: f64,
    pub image: PathBuf,
}

pub fn reconstruct(cfg: &ExperimentConfig) -> Result<ReconstructReport> {
    let t = Instant::now();
    let Setup {
        truth,
        template,
        pool,
    } = setup(cfg)?;
    let ids = fixed_columns(cfg)?;
    let model = design_model(&template, &truth.pixels, &pool, &ids, cfg.seed)?;
    let u = match cfg.estimator {
        Estimator::Map => map_estimate(&model, cfg.map_epsilon, None, &InnerOptions::default())?.u,
        Estimator::PosteriorMean => {
            let opts = outer_options(cfg, OuterOptions::default());
            run_double_loop(&model, cfg.bounding, cfg.variance, &opts)?.u_star
        }
    };
    let err = error(&u, &truth.pixels);
    let zero_filled = error(&model.x.adjoint(&model.y), &truth.pixels);
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let image = cfg.out.join("reconstruction.pgm");
    write_pgm(&image, &image_like(&truth, u)?, true)?;
    let mut csv = CsvOut::create(
        &cfg.out.join("reconstruct.csv"),
        &[
            "estimator",
            "columns",
            "error",
            "relative_error",
            "zero_filled_error",
            "seconds",
        ],
    )?;
    let estimator = match cfg.estimator {
        Estimator::Map => "map",
        Estimator::PosteriorMean => "mean",
    };
    let truth_norm = norm2(&truth.pixels);
    csv.row(&[
        estimator.to_string(),
        ids_text(&ids),
        err.to_string(),
        (err / truth_norm).to_string(),
        zero_filled.to_string(),
        t.elapsed().as_secs_f64().to_string(),
    ])?;
    csv.finish()?;
    Ok(ReconstructReport {
        error: err,
        zero_filled_error: zero_filled,
        image,
    })
}

fn bounding_label(b: Bounding) -> &'static str {
    match b {
        Bounding::TypeA => "A",
        Bounding::TypeB => "B",
    }
}

fn gamma_stats(gamma: &[f64]) -> (f64, f64, f64) {
    let mut g = gamma.to_vec();
    g.sort_by(f64::total_cmp);
    (g[0], g[g.len() / 2], g[g.len() - 1])
}

/// Runs the double loop and writes `infer.csv` (one row per outer loop),
/// `infer_summary.csv` and the posterior mean image. In comparison mode
/// both bounding types run and `infer_compare.csv` holds the two curves.
pub fn infer(cfg: &ExperimentConfig) -> Result<Vec<VariationalState>> {
    let Setup {
        truth,
        template,
        pool,
    } = setup(cfg)?;
    let ids = fixed_columns(cfg)?;
    let model = design_model(&template, &truth.pixels, &pool, &ids, cfg.seed)?;
    let opts = outer_options(cfg, OuterOptions::default());
    let boundings = if cfg.compare {
        vec![Bounding::TypeA, Bounding::TypeB]
    } else {
        vec![cfg.bounding]
    };
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut trace = CsvOut::create(
        &cfg.out.join("infer.csv"),
        &["bounding", "outer", "phi", "inner_steps"],
    )?;
    let mut summary = CsvOut::create(
        &cfg.out.join("infer_summary.csv"),
        &[
            "bounding",
            "outer_loops",
            "converged",
            "phi",
            "gamma_min",
            "gamma_median",
            "gamma_max",
            "sparse_fraction",
            "error",
        ],
    )?;
    let mut states = Vec::new();
    for &b in &boundings {
        let st = run_double_loop(&model, b, cfg.variance, &opts)?;
        for (i, (outer, phi)) in st.phi_history.iter().enumerate() {
            trace.row(&[
                bounding_label(b).to_string(),
                outer.to_string(),
                phi.to_string(),
                opt(st.inner_steps.get(i)),
            ])?;
        }
        let mean = posterior_summary(&st, &model, cfg.variance)?.mean;
        let s = model.b.apply(&mean);
        let sparse = s.iter().filter(|v| v.abs() < 1e-3).count() as f64 / s.len() as f64;
        let (lo, med, hi) = gamma_stats(&st.gamma);
        summary.row(&[
            bounding_label(b).to_string(),
            st.phi_history.len().saturating_sub(1).to_string(),
            st.converged.to_string(),
            opt(st.phi_history.last().map(|p| p.1)),
            lo.to_string(),
            med.to_string(),
            hi.to_string(),
            sparse.to_string(),
            error(&mean, &truth.pixels).to_string(),
        ])?;
        if b == boundings[0] {
            write_pgm(
                &cfg.out.join("posterior_mean.pgm"),
                &image_like(&truth, mean)?,
                true,
            )?;
        }
        states.push(st);
    }
    trace.finish()?;
    summary.finish()?;
    if cfg.compare {
        let mut cmp = CsvOut::create(
            &cfg.out.join("infer_compare.csv"),
            &["outer", "phi_a", "phi_b"],
        )?;
        let len = states
            .iter()
            .map(|s| s.phi_history.len())
            .max()
            .unwrap_or(0);
        for i in 0..len {
            cmp.row(&[
                i.to_string(),
                opt(states[0].phi_history.get(i).map(|p| p.1)),
                opt(states[1].phi_history.get(i).map(|p| p.1)),
            ])?;
        }
        cmp.finish()?;
    }
    Ok(states)
}

const RESULT_HEADER: [&str; 6] = ["round", "selected", "score", "phi", "error", "seconds"];

/// One result row per round.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub round: usize,
    pub selected: Option<usize>,
    pub score: Option<f64>,
    pub phi: Option<f64>,
    pub error: f64,
    pub seconds: f64,
}

impl ResultRow {
    fn fields(&self) -> [String; 6] {
        [
            self.round.to_string(),
            opt(self.selected),
            opt(self.score),
            opt(self.phi),
            self.error.to_string(),
            self.seconds.to_string(),
        ]
    }
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut csv = CsvOut::create(path, &RESULT_HEADER)?;
    for r in rows {
        csv.row(&r.fields())?;
    }
    csv.finish()
}

fn optimized_rows(traj: &DesignTrajectory) -> Vec<ResultRow> {
    (0..traj.errors.len())
        .map(|r| {
            if r == 0 {
                return ResultRow {
                    round: 0,
                    selected: None,
                    score: None,
                    phi: None,
                    error: traj.errors[0],
                    seconds: traj.seconds[0],
                };
            }
            let id = traj.selected[traj.num_init + r - 1];
            ResultRow {
                round: r,
                selected: Some(id),
                score: traj.scores[r - 1].iter().find(|p| p.0 == id).map(|p| p.1),
                phi: traj.phis[r - 1],
                error: traj.errors[r],
                seconds: traj.seconds[r],
            }
        })
        .collect()
}

/// Grows a baseline one column per round (low-pass from the center out,
/// others by ascending id) and reconstructs after each round.
fn baseline_rows(
    setup: &Setup,
    cfg: &ExperimentConfig,
    kind: DesignKind,
    init: &[usize],
    rounds: usize,
    seed: u64,
    opts: &DesignOptions,
) -> Result<(Vec<ResultRow>, Vec<f64>)> {
    let mut added = baseline_design(kind, cfg.side, rounds, init, seed)?;
    if kind == DesignKind::LowPass {
        let order = centered_order(cfg.side);
        added.sort_by_key(|c| order.iter().position(|o| o == c));
    }
    let mut ids = init.to_vec();
    let mut rows = Vec::with_capacity(rounds + 1);
    let mut last = Vec::new();
    for r in 0..=rounds {
        let t = Instant::now();
        if r > 0 {
            ids.push(added[r - 1]);
        }
        let (err, u) = evaluate_design(
            &setup.template,
            &setup.truth.pixels,
            &setup.pool,
            &ids,
            cfg.seed,
            opts,
        )?;
        rows.push(ResultRow {
            round: r,
            selected: (r > 0).then(|| added[r - 1]),
            score: None,
            phi: None,
            error: err,
            seconds: t.elapsed().as_secs_f64(),
        });
        last = u;
    }
    Ok((rows, last))
}

/// Final errors of one design run.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignReport {
    pub init: Vec<usize>,
    pub op: Vec<ResultRow>,
    pub op_selected: Vec<usize>,
    pub ct: Vec<ResultRow>,
    pub eq: Vec<ResultRow>,
    /// Per-round mean over the variable-density seeds.
    pub rd: Vec<ResultRow>,
}

/// Runs the greedy design and every baseline from the same low-pass start,
/// writing `op.csv`, `ct.csv`, `eq.csv`, `rd.csv` (mean over seeds),
/// `rd_seed<k>.csv` and the final reconstructions.
pub fn design(cfg: &ExperimentConfig) -> Result<DesignReport> {
    let setup = setup(cfg)?;
    let init = baseline_design(DesignKind::LowPass, cfg.side, cfg.init, &[], 0)?;
    let rounds = cfg.count - init.len();
    let defaults = DesignOptions::default();
    let opts = DesignOptions {
        bounding: cfg.bounding,
        outer: outer_options(cfg, defaults.outer),
        map_epsilon: cfg.map_epsilon,
        ..defaults
    };
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let save = |name: &str, u: Vec<f64>| -> Result<()> {
        write_pgm(
            &cfg.out.join(format!("design_{name}.pgm")),
            &image_like(&setup.truth, u)?,
            true,
        )?;
        Ok(())
    };

    let traj = run_sequential_design(
        &setup.template,
        &setup.truth.pixels,
        &setup.pool,
        &init,
        rounds,
        cfg.variance,
        cfg.seed,
        &opts,
    )?;
    let op = optimized_rows(&traj);
    write_rows(&cfg.out.join("op.csv"), &op)?;
    let (_, u) = evaluate_design(
        &setup.template,
        &setup.truth.pixels,
        &setup.pool,
        &traj.selected,
        cfg.seed,
        &opts,
    )?;
    save("op", u)?;

    let (ct, u) = baseline_rows(
        &setup,
        cfg,
        DesignKind::LowPass,
        &init,
        rounds,
        cfg.seed,
        &opts,
    )?;
    write_rows(&cfg.out.join("ct.csv"), &ct)?;
    save("ct", u)?;
    let (eq, u) = baseline_rows(
        &setup,
        cfg,
        DesignKind::Equispaced,
        &init,
        rounds,
        cfg.seed,
        &opts,
    )?;
    write_rows(&cfg.out.join("eq.csv"), &eq)?;
    save("eq", u)?;

    let mut rd: Vec<ResultRow> = Vec::new();
    for k in 0..cfg.rd_seeds {
        let (rows, u) = baseline_rows(
            &setup,
            cfg,
            DesignKind::RandomVd,
            &init,
            rounds,
            cfg.seed + k,
            &opts,
        )?;
        write_rows(&cfg.out.join(format!("rd_seed{k}.csv")), &rows)?;
        if k == 0 {
            save("rd", u)?;
            rd = rows
                .iter()
                .map(|r| ResultRow {
                    selected: None,
                    error: 0.0,
                    seconds: 0.0,
                    ..r.clone()
                })
                .collect();
        }
        for (acc, r) in rd.iter_mut().zip(&rows) {
            acc.error += r.error / cfg.rd_seeds as f64;
            acc.seconds += r.seconds;
        }
    }
    if cfg.rd_seeds > 0 {
        write_rows(&cfg.out.join("rd.csv"), &rd)?;
    }
    Ok(DesignReport {
        op_selected: traj.selected[traj.num_init..].to_vec(),
        init,
        op,
        ct,
        eq,
        rd,
    })
}
