//! The sparse linear model `y = X u + noise` with a super-Gaussian prior on `s = B u`.

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use crate::error::{domain, shape, Result, SlmError};
use crate::linops::{materialize, GroupLayout, Operator, SparseRows};
use crate::potentials::PotentialSpec;

/// Largest `n` for which dense factorizations of `A` are attempted.
pub const DENSE_GUARD: usize = 4096;

/// Everything that defines the variational criterion.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub x: Operator,
    pub b: Operator,
    pub y: Vec<f64>,
    pub sigma2: f64,
    pub potentials: Vec<PotentialSpec>,
    pub layout: GroupLayout,
    cache: Arc<DenseCache>,
}

#[derive(Debug, Default)]
struct DenseCache {
    xtx: OnceLock<Arc<DMatrix<f64>>>,
    b_rows: OnceLock<Arc<SparseRows>>,
}

impl ModelSpec {
    pub fn new(
        x: Operator,
        b: Operator,
        y: Vec<f64>,
        sigma2: f64,
        potentials: Vec<PotentialSpec>,
        layout: GroupLayout,
    ) -> Result<Self> {
        if x.cols() != b.cols() {
            return shape(format!("X has {} columns but B has {}", x.cols(), b.cols()));
        }
        if y.len() != x.rows() {
            return shape(format!(
                "y has length {} but X has {} rows",
                y.len(),
                x.rows()
            ));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return domain(format!("noise variance must be positive, got {sigma2}"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return domain("measurements must be finite");
        }
        layout.validate(b.rows(), potentials.len())?;
        for g in 0..layout.num_groups() {
            let p = &potentials[layout.potential_index(g)];
            if layout.size(g) > 1 && !p.is_even() {
                return Err(SlmError::Unsupported(
                    "group potentials must be even (no linear term)".into(),
                ));
            }
        }
        Ok(Self {
            x,
            b,
            y,
            sigma2,
            potentials,
            layout,
            cache: Arc::default(),
        })
    }

    /// Convenience constructor: one potential per row of `B`.
    pub fn scalar(
        x: Operator,
        b: Operator,
        y: Vec<f64>,
        sigma2: f64,
        potentials: Vec<PotentialSpec>,
    ) -> Result<Self> {
        let q = b.rows();
        if potentials.len() != q {
            return shape(format!("{} potentials for {q} rows of B", potentials.len()));
        }
        let layout = GroupLayout::scalar(q, (0..q).collect())?;
        Self::new(x, b, y, sigma2, potentials, layout)
    }

    /// Same prior, different measurements.
    pub fn with_measurements(&self, x: Operator, y: Vec<f64>) -> Result<Self> {
        let m = Self::new(
            x,
            self.b.clone(),
            y,
            self.sigma2,
            self.potentials.clone(),
            self.layout.clone(),
        )?;
        // B is unchanged, keep its materialization
        if let Some(rows) = self.cache.b_rows.get() {
            let _ = m.cache.b_rows.set(rows.clone());
        }
        Ok(m)
    }

    /// Same measurements and prior with every potential replaced.
    pub fn with_potentials(&self, potentials: Vec<PotentialSpec>) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.b.clone(),
            self.y.clone(),
            self.sigma2,
            potentials,
            self.layout.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }

    pub fn m(&self) -> usize {
        self.x.rows()
    }

    pub fn q(&self) -> usize {
        self.b.rows()
    }

    pub fn num_groups(&self) -> usize {
        self.layout.num_groups()
    }

    pub fn potential(&self, group: usize) -> &PotentialSpec {
        &self.potentials[self.layout.potential_index(group)]
    }

    /// Per-row linear coefficients `b` of `s`.
    pub fn linear_terms(&self) -> Vec<f64> {
        let per_group: Vec<f64> = (0..self.num_groups())
            .map(|g| self.potential(g).b)
            .collect();
        self.layout.expand(&per_group)
    }

    pub fn check_dense(&self) -> Result<()> {
        if self.n() > DENSE_GUARD {
            return Err(SlmError::Unsupported(format!(
                "dense path needs n <= {DENSE_GUARD}, model has n = {}",
                self.n()
            )));
        }
        Ok(())
    }

    /// `X^T X`, materialized once.
    pub fn xtx(&self) -> Result<Arc<DMatrix<f64>>> {
        self.check_dense()?;
        Ok(self
            .cache
            .xtx
            .get_or_init(|| {
                let x = materialize(self.x.as_ref());
                Arc::new(x.transpose() * x)
            })
            .clone())
    }

    /// Sparse rows of `B`, materialized once.
    pub fn b_rows(&self) -> Result<Arc<SparseRows>> {
        self.check_dense()?;
        Ok(self
            .cache
            .b_rows
            .get_or_init(|| Arc::new(SparseRows::from_operator(self.b.as_ref())))
            .clone())
    }

    /// Dense `A = sigma^-2 X^T X + B^T diag(w) B` for per-row weights `w`.
    pub fn dense_system(&self, row_weights: &[f64]) -> Result<DMatrix<f64>> {
        let mut a = self.xtx()?.as_ref() / self.sigma2;
        self.b_rows()?.add_weighted_gram(row_weights, &mut a);
        Ok(a)
    }

    /// Per-row `1 / gamma` from per-group `gamma`.
    pub fn inverse_gamma_rows(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        check_gamma(gamma, self.num_groups())?;
        let inv: Vec<f64> = gamma.iter().map(|g| 1.0 / g).collect();
        Ok(self.layout.expand(&inv))
    }
}

pub(crate) fn check_gamma(gamma: &[f64], groups: usize) -> Result<()> {
    if gamma.len() != groups {
        return shape(format!(
            "gamma has length {} for {groups} groups",
            gamma.len()
        ));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return domain(format!("gamma must be positive and finite, found {g}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_dense, make_identity};

    #[test]
    fn rejects_inconsistent_shapes() {
        let x = make_dense(&[vec![1.0, 0.0]]).unwrap();
        let lap = PotentialSpec::laplace(1.0).unwrap();
        assert!(
            ModelSpec::scalar(x.clone(), make_identity(3), vec![0.0], 1.0, vec![lap; 3]).is_err()
        );
        assert!(ModelSpec::scalar(
            x.clone(),
            make_identity(2),
            vec![0.0, 1.0],
            1.0,
            vec![lap; 2]
        )
        .is_err());
        assert!(
            ModelSpec::scalar(x.clone(), make_identity(2), vec![0.0], 0.0, vec![lap; 2]).is_err()
        );
        assert!(ModelSpec::scalar(x, make_identity(2), vec![0.0], 1.0, vec![lap; 2]).is_ok());
    }

    #[test]
    fn odd_group_potentials_are_rejected() {
        let x = make_identity(2);
        let bern = PotentialSpec::bernoulli(1.0, 1.0).unwrap();
        let layout = GroupLayout::from_sizes(&[2], vec![0]).unwrap();
        let r = ModelSpec::new(x, make_identity(2), vec![0.0; 2], 1.0, vec![bern], layout);
        assert!(matches!(r, Err(SlmError::Unsupported(_))));
    }

    #[test]
    fn dense_system_matches_hand_computation() {
        let x = make_dense(&[vec![1.0, 1.0]]).unwrap();
        let lap = PotentialSpec::laplace(1.0).unwrap();
        let m = ModelSpec::scalar(x, make_identity(2), vec![0.0], 0.5, vec![lap; 2]).unwrap();
        let a = m.dense_system(&[1.0, 3.0]).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 2.0, 5.0]));
    }
}
