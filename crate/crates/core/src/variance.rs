//! Posterior marginal variances `z = diag(B A^-1 B^T)`.
//!
//! [`exact_variances`] factorizes `A` densely. [`lanczos_variances`] runs `k`
//! Lanczos steps on `A` and accumulates `z_k = sum_l v_l^2` with
//! `V_k = B Q_k L_k^-T`, where `L_k` is the bidiagonal Cholesky factor of the
//! tridiagonal `T_k`. Every update adds a square, so `z_k` increases
//! monotonically towards `z` from below.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SlmError};
use crate::linalg::{axpy, cholesky, dot, log_det, norm2};
use crate::linops::{LinearOperator, SparseRows};
use crate::model::ModelSpec;
use crate::solvers::SystemOperator;

/// Relative size of `beta_k` (against the largest `alpha` seen) that counts as breakdown.
pub const BREAKDOWN_TOL: f64 = 1e-12;

/// Dense factorization of `A` at one `gamma`, shared by the criterion, the
/// exact variances and exact design scores.
#[derive(Debug, Clone)]
pub struct DensePosterior {
    pub chol: Cholesky<f64, Dyn>,
    pub a_inv: DMatrix<f64>,
    pub log_det: f64,
}

impl DensePosterior {
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(a)?;
        let log_det = log_det(&chol);
        let a_inv = chol.inverse();
        Ok(Self {
            chol,
            a_inv,
            log_det,
        })
    }

    /// `A = sigma^-2 X^T X + B^T Gamma^-1 B` for the model at `gamma`.
    pub fn new(model: &ModelSpec, gamma: &[f64]) -> Result<Self> {
        let w = model.inverse_gamma_rows(gamma)?;
        Self::from_matrix(model.dense_system(&w)?)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol
            .solve(&DVector::from_column_slice(rhs))
            .as_slice()
            .to_vec()
    }

    /// Per-row `b_i^T A^-1 b_i`.
    pub fn row_variances(&self, rows: &SparseRows) -> Vec<f64> {
        rows.row_quadratic_forms(&self.a_inv)
    }
}

/// Exact per-row variances `z_i = b_i^T A^-1 b_i` at `gamma`.
pub fn exact_variances(model: &ModelSpec, gamma: &[f64]) -> Result<Vec<f64>> {
    let post = DensePosterior::new(model, gamma)?;
    Ok(post.row_variances(&*model.b_rows()?))
}

/// Exact per-row variances for an explicit precision matrix and analysis operator.
pub fn exact_variances_dense(a: &DMatrix<f64>, b: &dyn LinearOperator) -> Result<Vec<f64>> {
    let post = DensePosterior::from_matrix(a.clone())?;
    Ok(post.row_variances(&SparseRows::from_operator(b)))
}

/// State of a (partial) Lanczos tridiagonalization of `A`.
#[derive(Debug, Clone)]
pub struct LanczosFactorization {
    /// Orthonormal Krylov basis `q_1..q_k`.
    pub q: Vec<Vec<f64>>,
    /// Diagonal of `T_k`.
    pub alpha: Vec<f64>,
    /// Off-diagonal of `T_k` (`beta[l]` couples steps `l` and `l + 1`; the last entry is the residual norm).
    pub beta: Vec<f64>,
    /// Diagonal of `L_k`.
    pub e: Vec<f64>,
    /// Subdiagonal of `L_k`.
    pub d: Vec<f64>,
    /// Columns of `V_k = B Q_k L_k^-T`.
    pub v: Vec<Vec<f64>>,
    pub zhat: Vec<f64>,
    pub k: usize,
    /// Stopped early because the Krylov space became invariant.
    pub breakdown: bool,
    /// `max |Q^T Q - I|` at the end of the run.
    pub orthogonality_loss: f64,
}

impl LanczosFactorization {
    /// Solves `L_k x = w` (forward substitution on the bidiagonal factor).
    pub fn solve_l(&self, w: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.k];
        for l in 0..self.k {
            let prev = if l == 0 {
                0.0
            } else {
                self.d[l - 1] * x[l - 1]
            };
            x[l] = (w[l] - prev) / self.e[l];
        }
        x
    }

    /// Dense `T_k`.
    pub fn tridiagonal(&self) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                self.alpha[i]
            } else if i + 1 == j {
                self.beta[i]
            } else if j + 1 == i {
                self.beta[j]
            } else {
                0.0
            }
        })
    }

    /// Dense `L_k`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                self.e[i]
            } else if j + 1 == i {
                self.d[j]
            } else {
                0.0
            }
        })
    }
}

/// Runs up to `k_max` Lanczos steps on the SPD operator `a` from a seeded
/// Gaussian start vector, returning running variance estimates for the rows of `b`.
pub fn lanczos_variances(
    a: &dyn LinearOperator,
    b: &dyn LinearOperator,
    k_max: usize,
    reorthogonalize: bool,
    seed: u64,
) -> Result<(Vec<f64>, LanczosFactorization)> {
    let n = a.cols();
    if a.rows() != n || b.cols() != n {
        return Err(SlmError::Shape(format!(
            "Lanczos needs square A ({}x{}) matching B columns ({})",
            a.rows(),
            n,
            b.cols()
        )));
    }
    if k_max == 0 || k_max > n {
        return Err(SlmError::Domain(format!(
            "k must be in 1..={n}, got {k_max}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nrm = norm2(&q0);
    q0.iter_mut().for_each(|v| *v /= nrm);

    let mut f = LanczosFactorization {
        q: Vec::with_capacity(k_max),
        alpha: Vec::with_capacity(k_max),
        beta: Vec::with_capacity(k_max),
        e: Vec::with_capacity(k_max),
        d: Vec::with_capacity(k_max),
        v: Vec::with_capacity(k_max),
        zhat: vec![0.0; b.rows()],
        k: 0,
        breakdown: false,
        orthogonality_loss: 0.0,
    };
    let mut qj = q0;
    let mut w = vec![0.0; n];
    let mut scale: f64 = 0.0;
    for j in 0..k_max {
        a.apply_into(&qj, &mut w);
        let alpha = dot(&qj, &w);
        if !alpha.is_finite() {
            return Err(SlmError::NonFinite {
                iteration: j,
                what: "Lanczos alpha".into(),
            });
        }
        scale = scale.max(alpha.abs());
        axpy(-alpha, &qj, &mut w);
        if j > 0 {
            axpy(-f.beta[j - 1], &f.q[j - 1], &mut w);
        }
        if reorthogonalize {
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for ql in f.q.iter().chain(std::iter::once(&qj)) {
                    let c = dot(ql, &w);
                    axpy(-c, ql, &mut w);
                }
            }
        }
        // bidiagonal Cholesky update
        let (e, dprev) = if j == 0 {
            (alpha.sqrt(), 0.0)
        } else {
            let dp = f.beta[j - 1] / f.e[j - 1];
            let e2 = alpha - dp * dp;
            if !(e2 > 0.0) {
                return Err(SlmError::Factorization(format!(
                    "tridiagonal Cholesky pivot {e2:e} at step {j}"
                )));
            }
            (e2.sqrt(), dp)
        };
        if j > 0 {
            f.d.push(dprev);
        }
        let mut vj = b.apply(&qj);
        if j > 0 {
            axpy(-dprev, &f.v[j - 1], &mut vj);
        }
        vj.iter_mut().for_each(|x| *x /= e);
        for (z, x) in f.zhat.iter_mut().zip(&vj) {
            *z += x * x;
        }
        f.alpha.push(alpha);
        f.e.push(e);
        f.v.push(vj);
        f.q.push(std::mem::take(&mut qj));
        f.k = j + 1;
        let beta = norm2(&w);
        f.beta.push(beta);
        if j + 1 == k_max {
            break;
        }
        if beta < BREAKDOWN_TOL * scale {
            f.breakdown = true;
            break;
        }
        qj = w.iter().map(|x| x / beta).collect();
    }
    f.orthogonality_loss = orthogonality_loss(&f.q);
    if !reorthogonalize && f.orthogonality_loss > 1e-8 {
        log::warn!(
            "Lanczos basis lost orthogonality: max |Q^T Q - I| = {:e} after {} steps",
            f.orthogonality_loss,
            f.k
        );
    }
    Ok((f.zhat.clone(), f))
}

fn orthogonality_loss(q: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..q.len() {
        for j in 0..=i {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(&q[i], &q[j]) - target).abs());
        }
    }
    worst
}

/// Lanczos variances for the model's posterior precision at `gamma`.
pub fn lanczos_model_variances(
    model: &ModelSpec,
    gamma: &[f64],
    k: usize,
    seed: u64,
) -> Result<(Vec<f64>, LanczosFactorization)> {
    let a = SystemOperator::precision(model, gamma)?;
    lanczos_variances(&a, model.b.as_ref(), k.min(model.n()), true, seed)
}

/// Accuracy pairs `(z_i, z_k,i / z_i)` with the number of excluded zero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub pairs: Vec<(f64, f64)>,
    pub excluded: usize,
}

impl ErrorProfile {
    /// Mean accuracy ratio over the top and bottom deciles of exact variance.
    pub fn decile_means(&self) -> (f64, f64) {
        let mut sorted = self.pairs.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let tenth = (n / 10).max(1);
        let mean = |s: &[(f64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        (mean(&sorted[n - tenth..]), mean(&sorted[..tenth]))
    }
}

pub fn variance_error_profile(zhat_k: &[f64], zhat_exact: &[f64]) -> Result<ErrorProfile> {
    if zhat_k.len() != zhat_exact.len() {
        return Err(SlmError::Shape(format!(
            "{} estimates vs {} exact variances",
            zhat_k.len(),
            zhat_exact.len()
        )));
    }
    let mut pairs = Vec::with_capacity(zhat_k.len());
    let mut excluded = 0;
    for (&zk, &z) in zhat_k.iter().zip(zhat_exact) {
        if z == 0.0 {
            excluded += 1;
        } else {
            pairs.push((z, zk / z));
        }
    }
    Ok(ErrorProfile { pairs, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_dense, make_identity};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
    }

    fn op(m: &DMatrix<f64>) -> crate::linops::Operator {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        make_dense(&rows).unwrap()
    }

    #[test]
    fn exact_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let z = exact_variances_dense(&a, make_identity(2).as_ref()).unwrap();
        assert_relative_eq!(z[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(z[1], 0.25, epsilon = 1e-15);
        let a = DMatrix::identity(2, 2) * 2.0;
        let b = make_dense(&[vec![1.0, 1.0]]).unwrap();
        assert_relative_eq!(
            exact_variances_dense(&a, b.as_ref()).unwrap()[0],
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn one_dimensional_lanczos_is_exact() {
        let a = make_dense(&[vec![4.0]]).unwrap();
        let (z, f) = lanczos_variances(a.as_ref(), make_identity(1).as_ref(), 1, true, 0).unwrap();
        assert_eq!(z, vec![0.25]);
        assert_eq!(f.k, 1);
    }

    #[test]
    fn lanczos_converges_to_exact_and_stays_below() {
        let n = 64;
        let a = random_spd(n, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bm = DMatrix::from_fn(80, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (aop, bop) = (op(&a), op(&bm));
        let exact = exact_variances_dense(&a, bop.as_ref()).unwrap();
        let mut prev = vec![0.0; 80];
        for k in [1, 8, 16, 32, 63] {
            let (z, _) = lanczos_variances(aop.as_ref(), bop.as_ref(), k, true, 7).unwrap();
            for i in 0..80 {
                assert!(z[i] <= exact[i] + 1e-8);
                assert!(z[i] >= prev[i] - 1e-12);
            }
            prev = z;
        }
        let (z, f) = lanczos_variances(aop.as_ref(), bop.as_ref(), n, true, 7).unwrap();
        for i in 0..80 {
            assert!(((z[i] - exact[i]) / exact[i]).abs() <= 1e-6);
        }
        assert!(f.orthogonality_loss <= 1e-8);
        // L L^T = T and T = Q^T A Q
        let l = f.cholesky_factor();
        assert!((&l * l.transpose() - f.tridiagonal()).abs().max() <= 1e-10);
        let q = DMatrix::from_fn(n, f.k, |i, j| f.q[j][i]);
        assert!((q.transpose() * &a * &q - f.tridiagonal()).abs().max() <= 1e-6);
    }

    #[test]
    fn breakdown_returns_early() {
        // A = I: the Krylov space is one-dimensional
        let (z, f) = lanczos_variances(
            make_identity(5).as_ref(),
            make_identity(5).as_ref(),
            5,
            true,
            1,
        )
        .unwrap();
        assert_eq!(f.k, 1);
        assert!(f.breakdown);
        assert!(z.iter().all(|v| *v <= 1.0 + 1e-12));
    }

    #[test]
    fn error_profile_ratios() {
        let p = variance_error_profile(&[1.0, 2.0, 0.0], &[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(p.excluded, 1);
        assert!(p.pairs.iter().all(|x| x.1 == 1.0));
    }
}
