//! Variational criterion, outer-loop bound refits, the double-loop driver and
//! automatic relevance determination.
//!
//! The criterion is `phi(gamma) = log|A| + h(gamma) + min_u R(u, gamma)` with
//! `R = sigma^-2 |y - X u|^2 + s^T Gamma^-1 s - 2 b^T s`. The outer loop
//! replaces the coupling term `log|A|` by a tangent upper bound (type A:
//! linear in `1/gamma`; type B: linear in `gamma` with a `-log gamma` term),
//! the inner loop minimizes the resulting `phi_z` jointly over `u` and `gamma`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlmError};
use crate::linalg::{cholesky, dot, log_det};
use crate::linops::{make_dense, make_identity, materialize, SparseRows};
use crate::model::{check_gamma, ModelSpec};
use crate::par;
use crate::potentials::{BoundCoefficients, PotentialSpec, WarmStart};
use crate::solvers::{irls_minimize, InnerOptions};
use crate::variance::{lanczos_model_variances, DensePosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bounding {
    TypeA,
    TypeB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceSource {
    Exact,
    Lanczos { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct OuterOptions {
    pub max_outer: usize,
    /// Stop when `phi` decreases by less than `tol * (1 + |phi|)`.
    pub tol: f64,
    /// Initial `z1` (type A) or `z2` (type B).
    pub init_z: f64,
    /// Allowed increase of `phi` between outer loops under exact variances.
    pub monotone_tol: f64,
    pub inner: InnerOptions,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            max_outer: 25,
            tol: 1e-6,
            init_z: 1e-3,
            monotone_tol: 1e-8,
            inner: InnerOptions::default(),
        }
    }
}

/// State of the double-loop algorithm.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub gamma: Vec<f64>,
    /// Bound coefficients of the last outer refit, one per group.
    pub bc: Vec<BoundCoefficients>,
    /// Additive constant of each refit's `phi_z` (dense models only).
    pub offsets: Vec<Option<f64>>,
    pub u_star: Vec<f64>,
    /// `(outer index, phi(gamma))`, index 0 is the state after the initial inner solve.
    pub phi_history: Vec<(usize, f64)>,
    /// Newton steps per inner solve.
    pub inner_steps: Vec<usize>,
    pub bounding: Bounding,
    pub converged: bool,
}

/// `phi(gamma)` with its parts.
#[derive(Debug, Clone)]
pub struct PhiEval {
    pub phi: f64,
    pub log_det: f64,
    pub h: f64,
    pub r_min: f64,
    /// `argmin_u R(u, gamma)`, the posterior mean at `gamma`.
    pub u_min: Vec<f64>,
    pub posterior: DensePosterior,
}

/// `sum_g h_g(gamma_g)`.
pub fn h_total(model: &ModelSpec, gamma: &[f64]) -> Result<f64> {
    check_gamma(gamma, model.num_groups())?;
    let mut total = 0.0;
    for (g, &gm) in gamma.iter().enumerate() {
        total += model.potential(g).h_value_derivs(gm)?.h;
    }
    Ok(total)
}

/// `R(u, gamma)`.
pub fn r_value(model: &ModelSpec, gamma: &[f64], u: &[f64]) -> Result<f64> {
    let w = model.inverse_gamma_rows(gamma)?;
    let xu = model.x.apply(u);
    let res: f64 = model
        .y
        .iter()
        .zip(&xu)
        .map(|(y, v)| (y - v) * (y - v))
        .sum();
    let s = model.b.apply(u);
    let quad: f64 = s.iter().zip(&w).map(|(a, b)| a * a * b).sum();
    Ok(res / model.sigma2 + quad - 2.0 * dot(&model.linear_terms(), &s))
}

/// Evaluates `phi(gamma)` by dense factorization of `A`.
pub fn phi_details(model: &ModelSpec, gamma: &[f64]) -> Result<PhiEval> {
    let posterior = DensePosterior::new(model, gamma)?;
    let mut rhs = model.x.adjoint(&model.y);
    rhs.iter_mut().for_each(|v| *v /= model.sigma2);
    let bt = model.b.adjoint(&model.linear_terms());
    for (r, v) in rhs.iter_mut().zip(&bt) {
        *r += v;
    }
    let u_min = posterior.solve(&rhs);
    let r_min = r_value(model, gamma, &u_min)?;
    let h = h_total(model, gamma)?;
    Ok(PhiEval {
        phi: posterior.log_det + h + r_min,
        log_det: posterior.log_det,
        h,
        r_min,
        u_min,
        posterior,
    })
}

pub fn phi_criterion(model: &ModelSpec, gamma: &[f64]) -> Result<f64> {
    Ok(phi_details(model, gamma)?.phi)
}

/// `phi(gamma)` from a Cholesky factor alone (no explicit inverse).
pub fn phi_value(model: &ModelSpec, gamma: &[f64]) -> Result<f64> {
    let w = model.inverse_gamma_rows(gamma)?;
    let chol = cholesky(model.dense_system(&w)?)?;
    let mut rhs = model.x.adjoint(&model.y);
    rhs.iter_mut().for_each(|v| *v /= model.sigma2);
    let bt = model.b.adjoint(&model.linear_terms());
    for (r, v) in rhs.iter_mut().zip(&bt) {
        *r += v;
    }
    let u_min = chol.solve(&DVector::from_column_slice(&rhs));
    Ok(log_det(&chol) + h_total(model, gamma)? + r_value(model, gamma, u_min.as_slice())?)
}

/// Result of an outer-loop refit.
#[derive(Debug, Clone)]
pub struct OuterBound {
    pub bc: Vec<BoundCoefficients>,
    /// Constant making `phi_z(., gamma_t)` tangent to `phi` (dense variances only).
    pub offset: Option<f64>,
    /// Group-summed variances used for the refit.
    pub zhat: Vec<f64>,
}

/// Parts of `phi_z` that depend on `gamma` only:
/// `sum_g z1/gamma + z2 gamma - z3 log gamma + h_inner(gamma)`.
pub fn bound_terms(model: &ModelSpec, bc: &[BoundCoefficients], gamma: &[f64]) -> Result<f64> {
    check_gamma(gamma, model.num_groups())?;
    let mut total = 0.0;
    let mut warm = WarmStart::default();
    for (g, &gm) in gamma.iter().enumerate() {
        let p = model.potential(g);
        let c = &bc[g];
        let log_term = if p.keeps_log_term() {
            c.z3 * gm.ln()
        } else {
            0.0
        };
        total += c.z1 / gm + c.z2 * gm - log_term + p.inner_h(gm, &mut warm)?;
    }
    Ok(total)
}

/// `phi_z(u, gamma) = R(u, gamma) + bound_terms(gamma) + offset`.
pub fn phi_z(model: &ModelSpec, bound: &OuterBound, u: &[f64], gamma: &[f64]) -> Result<f64> {
    let offset = bound
        .offset
        .ok_or_else(|| SlmError::Unsupported("phi_z needs the dense tangency offset".into()))?;
    Ok(r_value(model, gamma, u)? + bound_terms(model, &bound.bc, gamma)? + offset)
}

/// Refits the bound coefficients at `gamma`.
pub fn outer_update(
    model: &ModelSpec,
    gamma: &[f64],
    bounding: Bounding,
    variance: VarianceSource,
) -> Result<OuterBound> {
    match variance {
        VarianceSource::Exact => {
            let eval = phi_details(model, gamma)?;
            outer_update_dense(model, gamma, bounding, &eval)
        }
        VarianceSource::Lanczos { k, seed } => {
            let (rows, _) = lanczos_model_variances(model, gamma, k, seed)?;
            let bc = coefficients(
                model,
                gamma,
                bounding,
                &model.layout.reduce_sum(&rows),
                false,
            )?;
            Ok(OuterBound {
                zhat: model.layout.reduce_sum(&rows),
                bc,
                offset: None,
            })
        }
    }
}

/// Refit from an already factorized `A`.
pub fn outer_update_dense(
    model: &ModelSpec,
    gamma: &[f64],
    bounding: Bounding,
    eval: &PhiEval,
) -> Result<OuterBound> {
    let rows = eval.posterior.row_variances(&*model.b_rows()?);
    let zhat = model.layout.reduce_sum(&rows);
    let bc = coefficients(model, gamma, bounding, &zhat, true)?;
    let offset = eval.log_det + eval.h - bound_terms(model, &bc, gamma)?;
    Ok(OuterBound {
        bc,
        offset: Some(offset),
        zhat,
    })
}

fn coefficients(
    model: &ModelSpec,
    gamma: &[f64],
    bounding: Bounding,
    zhat: &[f64],
    exact: bool,
) -> Result<Vec<BoundCoefficients>> {
    check_gamma(gamma, model.num_groups())?;
    let mut out = Vec::with_capacity(gamma.len());
    for (g, (&gm, &z)) in gamma.iter().zip(zhat).enumerate() {
        let p = model.potential(g);
        let dim = model.layout.size(g) as f64;
        let bc = match bounding {
            Bounding::TypeA => BoundCoefficients::type_a(z, p.cap_slope(gm, 0.0)?),
            Bounding::TypeB => {
                let z2 = (dim - z / gm) / gm;
                if z2 < -1e-10 * (dim / gm) {
                    let msg = format!(
                        "variance {z:e} exceeds {dim} * gamma = {:e} in group {g}",
                        dim * gm
                    );
                    if exact {
                        return Err(SlmError::Consistency(msg));
                    }
                    log::warn!("{msg}");
                }
                let z2 = z2.max(f64::MIN_POSITIVE) + p.cap_slope(gm, dim)?;
                BoundCoefficients::type_b(z2, dim)
            }
        };
        out.push(bc);
    }
    Ok(out)
}

/// Bound coefficients used before the first refit.
pub fn initial_coefficients(
    model: &ModelSpec,
    bounding: Bounding,
    init_z: f64,
) -> Result<Vec<BoundCoefficients>> {
    (0..model.num_groups())
        .map(|g| {
            let p = model.potential(g);
            let dim = model.layout.size(g) as f64;
            Ok(match bounding {
                Bounding::TypeA => BoundCoefficients::type_a(init_z, p.cap_slope(1.0, 0.0)?),
                Bounding::TypeB => BoundCoefficients::type_b(init_z + p.cap_slope(1.0, dim)?, dim),
            })
        })
        .collect()
}

/// Double loop: alternate outer refits and inner Newton solves.
pub fn run_double_loop(
    model: &ModelSpec,
    bounding: Bounding,
    variance: VarianceSource,
    opts: &OuterOptions,
) -> Result<VariationalState> {
    let dense = model.check_dense().is_ok();
    let bc0 = initial_coefficients(model, bounding, opts.init_z)?;
    let first = irls_minimize(model, &bc0, &vec![0.0; model.n()], &opts.inner, None)?;
    let mut state = VariationalState {
        gamma: first.gamma,
        bc: bc0,
        offsets: Vec::new(),
        u_star: first.u,
        phi_history: Vec::new(),
        inner_steps: vec![first.report.iterations],
        bounding,
        converged: false,
    };
    let mut warm = first.warm;
    for t in 0..opts.max_outer {
        let eval = if dense {
            Some(phi_details(model, &state.gamma)?)
        } else {
            None
        };
        if let Some(e) = &eval {
            if let Some(&(_, prev)) = state.phi_history.last() {
                let rise = e.phi - prev;
                if rise > opts.monotone_tol * (1.0 + prev.abs()) {
                    let msg = format!("phi increased by {rise:e} at outer loop {t}");
                    if variance == VarianceSource::Exact {
                        return Err(SlmError::Consistency(msg));
                    }
                    log::info!("{msg} (Lanczos variances)");
                }
                if prev - e.phi < opts.tol * (1.0 + e.phi.abs()) {
                    state.phi_history.push((t, e.phi));
                    state.converged = true;
                    return Ok(state);
                }
            }
            state.phi_history.push((t, e.phi));
        }
        let bound = match (variance, &eval) {
            (VarianceSource::Exact, Some(e)) => {
                outer_update_dense(model, &state.gamma, bounding, e)?
            }
            _ => outer_update(model, &state.gamma, bounding, variance)?,
        };
        // with exact variances the inner solve starts at the tangency point
        let start = match (&eval, variance) {
            (Some(e), VarianceSource::Exact) => e.u_min.clone(),
            _ => state.u_star.clone(),
        };
        let res = irls_minimize(model, &bound.bc, &start, &opts.inner, Some(warm))?;
        warm = res.warm;
        let change = relative_change(&state.gamma, &res.gamma);
        state.gamma = res.gamma;
        state.u_star = res.u;
        state.bc = bound.bc;
        state.offsets.push(bound.offset);
        state.inner_steps.push(res.report.iterations);
        if state.gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(SlmError::Consistency(
                "gamma left the positive orthant".into(),
            ));
        }
        if !dense && change < opts.tol {
            state.converged = true;
            return Ok(state);
        }
    }
    if dense {
        let phi = phi_criterion(model, &state.gamma)?;
        state.phi_history.push((opts.max_outer, phi));
    }
    Ok(state)
}

fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Mean, per-group variances of `s` and (dense models) `phi` at the final `gamma`.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub phi: Option<f64>,
}

pub fn posterior_summary(
    state: &VariationalState,
    model: &ModelSpec,
    variance: VarianceSource,
) -> Result<PosteriorSummary> {
    let rows = match variance {
        VarianceSource::Exact => {
            DensePosterior::new(model, &state.gamma)?.row_variances(&*model.b_rows()?)
        }
        VarianceSource::Lanczos { k, seed } => {
            lanczos_model_variances(model, &state.gamma, k, seed)?.0
        }
    };
    let phi = if model.check_dense().is_ok() {
        Some(phi_criterion(model, &state.gamma)?)
    } else {
        None
    };
    Ok(PosteriorSummary {
        mean: state.u_star.clone(),
        variances: model.layout.reduce_sum(&rows),
        phi,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ArdOptions {
    pub max_outer: usize,
    /// Relative change of `gamma` below which the loop stops.
    pub tol: f64,
    /// `|s|` is smoothed as `sqrt(epsilon + s^2)` in the inner problem.
    pub epsilon: f64,
    pub prune_tol: f64,
    pub inner: InnerOptions,
}

impl Default for ArdOptions {
    fn default() -> Self {
        Self {
            max_outer: 50,
            tol: 1e-6,
            epsilon: 1e-10,
            prune_tol: 1e-8,
            inner: InnerOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArdResult {
    pub u: Vec<f64>,
    pub gamma: Vec<f64>,
    pub support: Vec<usize>,
    pub outer_iterations: usize,
}

/// Automatic relevance determination (`h(gamma) = sum log gamma`, type B
/// bounding) for models whose coefficients are `u` itself (`B = I`).
///
/// Each outer step computes `z2 = diag(X^T Sigma_y^-1 X)` with
/// `Sigma_y = sigma^2 I + X Gamma X^T`, solves the reweighted l1 problem
/// `min sigma^-2 |y - X u|^2 + 2 sum sqrt(z2_i) |u_i|` and sets
/// `gamma_i = |u_i| / sqrt(z2_i)`. Coefficients whose `gamma` drops below
/// `prune_tol` are fixed at zero.
pub fn ard_estimate(model: &ModelSpec, opts: &ArdOptions) -> Result<ArdResult> {
    model.check_dense()?;
    let n = model.n();
    let b = model.b_rows()?;
    if !is_identity(&b, n) {
        return Err(SlmError::Unsupported("ARD needs B = identity".into()));
    }
    let x = materialize(model.x.as_ref());
    let m = model.m();
    let mut gamma = vec![1.0; n];
    let mut u = vec![0.0; n];
    let mut iterations = 0;
    for t in 0..opts.max_outer {
        iterations = t + 1;
        let active: Vec<usize> = (0..n).filter(|&i| gamma[i] > 0.0).collect();
        if active.is_empty() {
            break;
        }
        let xa = x.select_columns(&active);
        let mut sy = DMatrix::<f64>::identity(m, m) * model.sigma2;
        for (k, &i) in active.iter().enumerate() {
            let col = xa.column(k);
            sy.ger(gamma[i], &col, &col, 1.0);
        }
        let chol = cholesky(sy)?;
        let w = chol.solve(&xa);
        let z2: Vec<f64> = (0..active.len())
            .map(|k| xa.column(k).dot(&w.column(k)))
            .collect();
        let pots = z2
            .iter()
            .map(|z| PotentialSpec::laplace(z.sqrt()))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|r| xa.row(r).iter().copied().collect())
            .collect();
        let sub = ModelSpec::scalar(
            make_dense(&rows)?,
            make_identity(active.len()),
            model.y.clone(),
            model.sigma2,
            pots,
        )?;
        let bc = vec![BoundCoefficients::type_a(opts.epsilon, 0.0); active.len()];
        let u0: Vec<f64> = active.iter().map(|&i| u[i]).collect();
        let res = irls_minimize(&sub, &bc, &u0, &opts.inner, None)?;
        let mut new_gamma = vec![0.0; n];
        let mut new_u = vec![0.0; n];
        for (k, &i) in active.iter().enumerate() {
            let g = res.u[k].abs() / z2[k].sqrt();
            if g >= opts.prune_tol {
                new_gamma[i] = g;
                new_u[i] = res.u[k];
            }
        }
        let change = relative_change(&gamma, &new_gamma);
        gamma = new_gamma;
        u = new_u;
        if change < opts.tol {
            break;
        }
    }
    let support: Vec<usize> = (0..n).filter(|&i| gamma[i] > 0.0).collect();
    if support.is_empty() && model.y.iter().any(|v| *v != 0.0) {
        log::warn!("ARD pruned every coefficient although y is nonzero");
    }
    Ok(ArdResult {
        u,
        gamma,
        support,
        outer_iterations: iterations,
    })
}

fn is_identity(b: &SparseRows, n: usize) -> bool {
    b.rows() == n
        && (0..n).all(|i| {
            let (idx, val) = b.row(i);
            idx == [i] && val == [1.0]
        })
}

/// Central finite-difference gradient of `phi` in `gamma` (diagnostic).
pub fn phi_gradient_fd(model: &ModelSpec, gamma: &[f64], rel_step: f64) -> Result<Vec<f64>> {
    par::map_indexed(gamma.len(), |i| {
        let h = rel_step * gamma[i];
        let mut gp = gamma.to_vec();
        let mut gm = gamma.to_vec();
        gp[i] += h;
        gm[i] -= h;
        Ok((phi_value(model, &gp)? - phi_value(model, &gm)?) / (2.0 * h))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_dim(y: f64) -> ModelSpec {
        let lap = PotentialSpec::laplace(1.0).unwrap();
        ModelSpec::scalar(make_identity(1), make_identity(1), vec![y], 1.0, vec![lap]).unwrap()
    }

    #[test]
    fn phi_one_dimensional() {
        let m = one_dim(0.0);
        assert_relative_eq!(
            phi_criterion(&m, &[1.0]).unwrap(),
            2f64.ln() + 1.0,
            epsilon = 1e-14
        );
        assert!(phi_criterion(&m, &[1e-6]).unwrap() > phi_criterion(&m, &[1.0]).unwrap() + 10.0);
    }

    #[test]
    fn outer_update_one_dimensional() {
        let m = one_dim(0.0);
        let a = outer_update(&m, &[1.0], Bounding::TypeA, VarianceSource::Exact).unwrap();
        assert_relative_eq!(a.bc[0].z1, 0.5, epsilon = 1e-15);
        let b = outer_update(&m, &[1.0], Bounding::TypeB, VarianceSource::Exact).unwrap();
        assert_relative_eq!(b.bc[0].z2, 0.5, epsilon = 1e-15);
        assert_eq!(b.bc[0].z3, 1.0);
    }

    #[test]
    fn tangency_at_refit_point() {
        let m = one_dim(2.0);
        for bounding in [Bounding::TypeA, Bounding::TypeB] {
            let gamma = [0.7];
            let eval = phi_details(&m, &gamma).unwrap();
            let bound = outer_update_dense(&m, &gamma, bounding, &eval).unwrap();
            let pz = phi_z(&m, &bound, &eval.u_min, &gamma).unwrap();
            assert!((pz - eval.phi).abs() <= 1e-12);
        }
    }

    #[test]
    fn double_loop_reaches_stationarity_in_one_dimension() {
        let m = one_dim(2.0);
        let opts = OuterOptions {
            tol: 1e-12,
            max_outer: 200,
            ..OuterOptions::default()
        };
        let st = run_double_loop(&m, Bounding::TypeA, VarianceSource::Exact, &opts).unwrap();
        assert!(st.converged);
        let grad = phi_gradient_fd(&m, &st.gamma, 1e-5).unwrap();
        assert!(grad[0].abs() <= 1e-5, "{grad:?}");
        let phis: Vec<f64> = st.phi_history.iter().map(|p| p.1).collect();
        assert!(phis.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn zero_data_zero_mean() {
        let m = one_dim(0.0);
        let st = run_double_loop(
            &m,
            Bounding::TypeB,
            VarianceSource::Exact,
            &OuterOptions::default(),
        )
        .unwrap();
        let s = posterior_summary(&st, &m, VarianceSource::Exact).unwrap();
        assert_eq!(s.mean, vec![0.0]);
        assert!(s.variances[0] <= st.gamma[0]);
    }

    #[test]
    fn ard_zero_data_prunes_everything() {
        let x = make_dense(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let lap = PotentialSpec::laplace(1.0).unwrap();
        let m = ModelSpec::scalar(x, make_identity(2), vec![0.0; 2], 0.01, vec![lap; 2]).unwrap();
        let r = ard_estimate(&m, &ArdOptions::default()).unwrap();
        assert!(r.support.is_empty());
        assert_eq!(r.u, vec![0.0, 0.0]);
    }
}
