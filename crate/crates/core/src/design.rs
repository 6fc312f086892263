//! Sequential Bayesian experimental design.
//!
//! A candidate is a block of measurement rows `X*`. Its information gain
//! under the current Gaussian approximation is
//! `log |I + sigma^-2 X* A^-1 X*^T|`, computed either from a dense factor of
//! `A` or from a partial Lanczos factorization `A ~ Q T Q^T`. The greedy loop
//! fits the variational state, scores every remaining candidate, appends the
//! best one with simulated measurements and refits.
//!
//! For image experiments the candidates are columns of a 2-D DCT. Design-grid
//! column `c` is mapped to a horizontal frequency by folding around the grid
//! center (`center -> 0`, `center - 1 -> 1`, `center + 1 -> 2`, ...), so the
//! center of the grid holds the lowest frequencies and filling it from the
//! middle outwards is a low-pass design.

use std::cmp::Ordering;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, shape, Result, SlmError};
use crate::linalg::{log_det_identity_plus, norm2, sub};
use crate::linops::{
    make_partial_orthotransform_2d, make_stack, DenseOperator, LinearOperator, Operator,
};
use crate::model::ModelSpec;
use crate::par;
use crate::solvers::{map_estimate, InnerOptions, SystemOperator};
use crate::variance::{lanczos_variances, DensePosterior, LanczosFactorization};
use crate::varinf::{run_double_loop, Bounding, OuterOptions, VarianceSource};

/// One selectable block of measurement rows.
#[derive(Debug, Clone)]
pub struct CandidateBlock {
    pub id: usize,
    pub op: Operator,
}

impl CandidateBlock {
    /// The block as a dense `d x n` matrix (one adjoint probe per row).
    pub fn dense_rows(&self) -> DMatrix<f64> {
        dense_rows_of(self.op.as_ref())
    }
}

/// Grid columns ordered from the center outwards, left first.
pub fn centered_order(width: usize) -> Vec<usize> {
    let center = width / 2;
    let mut order = Vec::with_capacity(width);
    if width == 0 {
        return order;
    }
    order.push(center);
    for off in 1..=width {
        if off <= center {
            order.push(center - off);
        }
        if center + off < width {
            order.push(center + off);
        }
    }
    order
}

/// DCT frequency measured by grid column `c`.
pub fn grid_frequency(c: usize, width: usize) -> usize {
    centered_order(width)
        .iter()
        .position(|&g| g == c)
        .expect("column inside the grid")
}

/// One candidate per grid column of a `height x width` image.
pub fn dct_column_pool(height: usize, width: usize) -> Result<Vec<CandidateBlock>> {
    let order = centered_order(width);
    let mut freq = vec![0; width];
    for (f, &c) in order.iter().enumerate() {
        freq[c] = f;
    }
    (0..width)
        .map(|c| {
            Ok(CandidateBlock {
                id: c,
                op: make_partial_orthotransform_2d(height, width, vec![freq[c]])?,
            })
        })
        .collect()
}

/// `log |I + sigma^-2 X* A^-1 X*^T|` with `A^-1` from a dense factorization.
pub fn score_exact(
    candidate: &dyn LinearOperator,
    post: &DensePosterior,
    sigma2: f64,
) -> Result<f64> {
    score_exact_rows(&dense_rows_of(candidate), post, sigma2)
}

fn score_exact_rows(rows: &DMatrix<f64>, post: &DensePosterior, sigma2: f64) -> Result<f64> {
    if rows.ncols() != post.a_inv.nrows() {
        return shape(format!(
            "candidate has {} columns, posterior has {}",
            rows.ncols(),
            post.a_inv.nrows()
        ));
    }
    if rows.nrows() == 0 || rows.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let m = rows * &post.a_inv * rows.transpose() / sigma2;
    log_det_identity_plus(&symmetrize(m))
}

/// Lanczos approximation `log |I + V V^T|` with `V = sigma^-1 X* Q_k L_k^-T`,
/// evaluated on whichever Gram side is smaller.
pub fn score_lanczos(
    candidate: &dyn LinearOperator,
    fact: &LanczosFactorization,
    sigma2: f64,
) -> Result<f64> {
    score_lanczos_rows(&dense_rows_of(candidate), fact, sigma2)
}

fn score_lanczos_rows(
    rows: &DMatrix<f64>,
    fact: &LanczosFactorization,
    sigma2: f64,
) -> Result<f64> {
    let k = fact.k;
    let n = fact.q.first().map_or(rows.ncols(), Vec::len);
    if rows.ncols() != n {
        return shape(format!(
            "candidate has {} columns, factorization has {n}",
            rows.ncols()
        ));
    }
    if rows.nrows() == 0 || k == 0 || rows.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let sigma = sigma2.sqrt();
    let d = rows.nrows();
    let mut v = DMatrix::zeros(d, k);
    for r in 0..d {
        let x = rows.row(r);
        let w: Vec<f64> = fact
            .q
            .iter()
            .map(|q| q.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let l = fact.solve_l(&w);
        if l.iter().any(|x| !x.is_finite()) {
            return Err(SlmError::Factorization(
                "triangular solve with the Lanczos factor broke down".into(),
            ));
        }
        for (j, val) in l.into_iter().enumerate() {
            v[(r, j)] = val / sigma;
        }
    }
    let gram = if k < d {
        v.transpose() * &v
    } else {
        &v * v.transpose()
    };
    log_det_identity_plus(&symmetrize(gram))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn dense_rows_of(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (d, n) = (op.rows(), op.cols());
    let mut m = DMatrix::zeros(d, n);
    let mut e = vec![0.0; d];
    for i in 0..d {
        e[i] = 1.0;
        let row = op.adjoint(&e);
        e[i] = 0.0;
        m.row_mut(i).copy_from_slice(&row);
    }
    m
}

/// Design rules compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    /// Greedy information-gain selection.
    Optimized,
    /// Fill from the grid center outwards.
    LowPass,
    /// Evenly spread over the grid.
    Equispaced,
    /// Center-weighted random sampling.
    RandomVd,
}

impl DesignKind {
    pub fn label(self) -> &'static str {
        match self {
            DesignKind::Optimized => "op",
            DesignKind::LowPass => "ct",
            DesignKind::Equispaced => "eq",
            DesignKind::RandomVd => "rd",
        }
    }
}

impl std::str::FromStr for DesignKind {
    type Err = SlmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" | "optimized" => Ok(DesignKind::Optimized),
            "ct" | "lowpass" => Ok(DesignKind::LowPass),
            "eq" | "equispaced" => Ok(DesignKind::Equispaced),
            "rd" | "random_vd" => Ok(DesignKind::RandomVd),
            other => Err(SlmError::Domain(format!("unknown design kind {other:?}"))),
        }
    }
}

/// `count` grid columns outside `init` chosen by a fixed rule.
///
/// Equispaced targets positions `i * width / count` and takes the nearest
/// free column (lower on ties). Random variable-density sampling draws
/// without replacement with weight `(1 + |c - center| / width)^-2`.
pub fn baseline_design(
    kind: DesignKind,
    width: usize,
    count: usize,
    init: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    let mut taken = vec![false; width];
    for &c in init {
        if c >= width || taken[c] {
            return domain(format!("invalid initial column {c} for width {width}"));
        }
        taken[c] = true;
    }
    let free = width - init.len();
    if count > free {
        return domain(format!("{count} columns requested, only {free} free"));
    }
    let mut out = Vec::with_capacity(count);
    match kind {
        DesignKind::LowPass => {
            out.extend(
                centered_order(width)
                    .into_iter()
                    .filter(|c| !taken[*c])
                    .take(count),
            );
        }
        DesignKind::Equispaced => {
            for i in 0..count {
                let target = i * width / count;
                let c = (0..width)
                    .filter(|c| !taken[*c])
                    .min_by_key(|c| (c.abs_diff(target), *c))
                    .expect("free column exists");
                taken[c] = true;
                out.push(c);
            }
        }
        DesignKind::RandomVd => {
            let center = (width / 2) as f64;
            let avail: Vec<usize> = (0..width).filter(|c| !taken[*c]).collect();
            let weight =
                |i: usize| (1.0 + (avail[i] as f64 - center).abs() / width as f64).powi(-2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = rand::seq::index::sample_weighted(&mut rng, avail.len(), weight, count)
                .map_err(|e| SlmError::Domain(format!("weighted sampling failed: {e}")))?;
            out.extend(picks.into_iter().map(|i| avail[i]));
        }
        DesignKind::Optimized => {
            return Err(SlmError::Unsupported(
                "the optimized design needs a model, use run_sequential_design".into(),
            ))
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Settings shared by the design loop and design evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DesignOptions {
    pub bounding: Bounding,
    pub outer: OuterOptions,
    /// Smoothing constant of the MAP reconstruction used to report errors.
    pub map_epsilon: f64,
    pub map_inner: InnerOptions,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            bounding: Bounding::TypeA,
            outer: OuterOptions {
                max_outer: 6,
                tol: 1e-4,
                ..OuterOptions::default()
            },
            map_epsilon: 1e-8,
            map_inner: InnerOptions::default(),
        }
    }
}

/// Outcome of a greedy design run.
#[derive(Debug, Clone, Default)]
pub struct DesignTrajectory {
    /// Initial design followed by the selected candidates, in order.
    pub selected: Vec<usize>,
    /// Length of the initial design inside `selected`.
    pub num_init: usize,
    /// MAP reconstruction error after each round, index 0 is the initial design.
    pub errors: Vec<f64>,
    /// `phi` of the variational fit each round was scored with.
    pub phis: Vec<Option<f64>>,
    /// `(candidate id, score)` per round, ordered by id.
    pub scores: Vec<Vec<(usize, f64)>>,
    /// Wall time of each round in seconds (index 0 covers the initial reconstruction).
    pub seconds: Vec<f64>,
}

/// Noisy measurements `X* u_true + sigma e` of one candidate. The noise
/// stream depends only on `seed` and the candidate id, so every design sees
/// the same data for a shared candidate.
pub fn simulate_block(
    candidate: &CandidateBlock,
    truth: &[f64],
    sigma2: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(candidate.id as u64);
    let sigma = sigma2.sqrt();
    candidate
        .op
        .apply(truth)
        .into_iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + sigma * e
        })
        .collect()
}

fn lookup(pool: &[CandidateBlock], id: usize) -> Result<&CandidateBlock> {
    pool.iter()
        .find(|c| c.id == id)
        .ok_or_else(|| SlmError::Domain(format!("candidate {id} is not in the pool")))
}

/// The prior of `template` with measurements from the given candidates.
pub fn design_model(
    template: &ModelSpec,
    truth: &[f64],
    pool: &[CandidateBlock],
    ids: &[usize],
    seed: u64,
) -> Result<ModelSpec> {
    if truth.len() != template.n() {
        return shape(format!(
            "truth has length {} for n = {}",
            truth.len(),
            template.n()
        ));
    }
    let mut ops = Vec::with_capacity(ids.len());
    let mut y = Vec::new();
    for &id in ids {
        let c = lookup(pool, id)?;
        if c.op.cols() != template.n() {
            return shape(format!(
                "candidate {id} has {} columns for n = {}",
                c.op.cols(),
                template.n()
            ));
        }
        y.extend(simulate_block(c, truth, template.sigma2, seed));
        ops.push(c.op.clone());
    }
    let x = if ops.is_empty() {
        Arc::new(DenseOperator::new(DMatrix::zeros(0, template.n()))) as Operator
    } else {
        let w = vec![1.0; ops.len()];
        make_stack(ops, w)?
    };
    template.with_measurements(x, y)
}

/// MAP reconstruction of a design and its error `||u_map - u_true||`.
pub fn evaluate_design(
    template: &ModelSpec,
    truth: &[f64],
    pool: &[CandidateBlock],
    ids: &[usize],
    seed: u64,
    opts: &DesignOptions,
) -> Result<(f64, Vec<f64>)> {
    let model = design_model(template, truth, pool, ids, seed)?;
    let map = map_estimate(&model, opts.map_epsilon, None, &opts.map_inner)?;
    Ok((norm2(&sub(&map.u, truth)), map.u))
}

/// Scores every candidate in `pool` under the model's variational fit at `gamma`.
pub fn score_candidates(
    model: &ModelSpec,
    gamma: &[f64],
    pool: &[(usize, DMatrix<f64>)],
    variance: VarianceSource,
) -> Result<Vec<(usize, f64)>> {
    let scores: Vec<Result<f64>> = match variance {
        VarianceSource::Exact => {
            let post = DensePosterior::new(model, gamma)?;
            par::map_slice(pool, |(_, rows)| {
                score_exact_rows(rows, &post, model.sigma2)
            })
        }
        VarianceSource::Lanczos { k, seed } => {
            let a = SystemOperator::precision(model, gamma)?;
            let (_, fact) =
                lanczos_variances(&a, model.b.as_ref(), k.clamp(1, model.n()), true, seed)?;
            par::map_slice(pool, |(_, rows)| {
                score_lanczos_rows(rows, &fact, model.sigma2)
            })
        }
    };
    pool.iter()
        .zip(scores)
        .map(|((id, _), s)| Ok((*id, s?)))
        .collect()
}

/// Highest score, lowest id among ties.
pub fn select_best(scores: &[(usize, f64)]) -> Option<(usize, f64)> {
    scores
        .iter()
        .copied()
        .fold(None, |best, (id, s)| match best {
            None => Some((id, s)),
            Some((bid, bs)) => match s.partial_cmp(&bs) {
                Some(Ordering::Greater) => Some((id, s)),
                Some(Ordering::Equal) if id < bid => Some((id, s)),
                _ => Some((bid, bs)),
            },
        })
}

/// Greedy design: `rounds` times fit, score the remaining pool, append the
/// argmax with simulated measurements. Stops early when the pool runs out.
#[allow(clippy::too_many_arguments)]
pub fn run_sequential_design(
    template: &ModelSpec,
    truth: &[f64],
    pool: &[CandidateBlock],
    init: &[usize],
    rounds: usize,
    variance: VarianceSource,
    seed: u64,
    opts: &DesignOptions,
) -> Result<DesignTrajectory> {
    let mut selected: Vec<usize> = Vec::with_capacity(init.len() + rounds);
    for &id in init {
        lookup(pool, id)?;
        if selected.contains(&id) {
            return domain(format!(
                "candidate {id} appears twice in the initial design"
            ));
        }
        selected.push(id);
    }
    let mut remaining: Vec<(usize, DMatrix<f64>)> = {
        let mut ids: Vec<&CandidateBlock> =
            pool.iter().filter(|c| !selected.contains(&c.id)).collect();
        ids.sort_by_key(|c| c.id);
        par::map_slice(&ids, |c| (c.id, c.dense_rows()))
    };
    let mut traj = DesignTrajectory {
        num_init: selected.len(),
        ..DesignTrajectory::default()
    };
    let clock = Instant::now();
    let (err, _) = evaluate_design(template, truth, pool, &selected, seed, opts)?;
    traj.errors.push(err);
    traj.seconds.push(clock.elapsed().as_secs_f64());

    for round in 0..rounds {
        if remaining.is_empty() {
            log::info!("candidate pool exhausted after {round} rounds");
            break;
        }
        let clock = Instant::now();
        let model = design_model(template, truth, pool, &selected, seed)?;
        let state = run_double_loop(&model, opts.bounding, variance, &opts.outer)?;
        let scores = score_candidates(&model, &state.gamma, &remaining, variance)?;
        let (best, score) = select_best(&scores).expect("nonempty pool");
        log::debug!("round {round}: selected {best} with score {score:.6}");
        selected.push(best);
        remaining.retain(|(id, _)| *id != best);
        let (err, _) = evaluate_design(template, truth, pool, &selected, seed, opts)?;
        traj.phis.push(state.phi_history.last().map(|p| p.1));
        traj.scores.push(scores);
        traj.errors.push(err);
        traj.seconds.push(clock.elapsed().as_secs_f64());
    }
    traj.selected = selected;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_dense, make_identity};
    use crate::potentials::PotentialSpec;

    #[test]
    fn centered_fold() {
        assert_eq!(centered_order(8), vec![4, 3, 5, 2, 6, 1, 7, 0]);
        assert_eq!(centered_order(5), vec![2, 1, 3, 0, 4]);
        assert_eq!(grid_frequency(4, 8), 0);
        assert_eq!(grid_frequency(5, 8), 2);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(
            baseline_design(DesignKind::LowPass, 8, 2, &[3, 4], 0).unwrap(),
            vec![2, 5]
        );
        assert_eq!(
            baseline_design(DesignKind::Equispaced, 8, 4, &[], 0).unwrap(),
            vec![0, 2, 4, 6]
        );
        let a = baseline_design(DesignKind::RandomVd, 32, 4, &[15, 16], 9).unwrap();
        assert_eq!(
            a,
            baseline_design(DesignKind::RandomVd, 32, 4, &[15, 16], 9).unwrap()
        );
        assert!(a.iter().all(|c| *c != 15 && *c != 16));
        assert!(matches!(
            baseline_design(DesignKind::LowPass, 4, 3, &[0, 1], 0),
            Err(SlmError::Domain(_))
        ));
    }

    #[test]
    fn scalar_exact_score() {
        let post = DensePosterior::from_matrix(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let one = make_dense(&[vec![1.0]]).unwrap();
        assert!((score_exact(one.as_ref(), &post, 1.0).unwrap() - 1.5f64.ln()).abs() < 1e-15);
        let zero = make_dense(&[vec![0.0]]).unwrap();
        assert_eq!(score_exact(zero.as_ref(), &post, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn selection_breaks_ties_by_id() {
        assert_eq!(select_best(&[(3, 1.0), (1, 1.0), (2, 0.5)]), Some((1, 1.0)));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn zero_rounds_keeps_initial_design() {
        let pool = dct_column_pool(4, 4).unwrap();
        let lap = PotentialSpec::laplace(2.0).unwrap();
        let template = ModelSpec::scalar(
            make_identity(16),
            make_identity(16),
            vec![0.0; 16],
            0.01,
            vec![lap; 16],
        )
        .unwrap();
        let truth: Vec<f64> = (0..16).map(|i| (i % 3) as f64).collect();
        let opts = DesignOptions::default();
        let t = run_sequential_design(
            &template,
            &truth,
            &pool,
            &[2],
            0,
            VarianceSource::Exact,
            1,
            &opts,
        )
        .unwrap();
        assert_eq!(t.selected, vec![2]);
        assert_eq!(t.errors.len(), 1);
        let (e, _) = evaluate_design(&template, &truth, &pool, &[2], 1, &opts).unwrap();
        assert_eq!(t.errors[0], e);
    }

    #[test]
    fn greedy_round_picks_the_recorded_argmax() {
        let pool = dct_column_pool(4, 4).unwrap();
        let lap = PotentialSpec::laplace(2.0).unwrap();
        let template = ModelSpec::scalar(
            make_identity(16),
            make_identity(16),
            vec![0.0; 16],
            0.01,
            vec![lap; 16],
        )
        .unwrap();
        let truth: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
        let opts = DesignOptions::default();
        let t = run_sequential_design(
            &template,
            &truth,
            &pool,
            &[2],
            5,
            VarianceSource::Exact,
            1,
            &opts,
        )
        .unwrap();
        // pool has 3 free candidates, the loop stops cleanly
        assert_eq!(t.selected.len(), 4);
        for (r, scores) in t.scores.iter().enumerate() {
            let best = select_best(scores).unwrap().0;
            assert_eq!(t.selected[1 + r], best);
        }
        let mut s = t.selected.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 4);
    }
}
