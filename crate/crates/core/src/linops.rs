//! Matrix-free linear operators for measurement (`X`) and analysis (`B`)
//! matrices.
//!
//! Images are stored row-major: pixel `(r, c)` of an `h x w` image lives at
//! index `r * w + c`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, shape, Result, SlmError};
use crate::linalg::{dot, norm2};
use crate::par;

/// A linear map `R^cols -> R^rows` given by forward and adjoint products.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `out = A x`
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    /// `out = A^T y`
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);
    fn tag(&self) -> String;

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols(), "{}: input length", self.tag());
        let mut out = vec![0.0; self.rows()];
        self.apply_into(x, &mut out);
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows(), "{}: adjoint input length", self.tag());
        let mut out = vec![0.0; self.cols()];
        self.adjoint_into(y, &mut out);
        out
    }
}

/// Shared handle to an operator.
pub type Operator = Arc<dyn LinearOperator>;

// ---------------------------------------------------------------------------
// dense / identity

#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }
    fn cols(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (o, a) in out.iter_mut().zip(self.matrix.column(j).iter()) {
                    *o += a * xj;
                }
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.matrix.column(j).as_slice(), y);
        }
    }
    fn tag(&self) -> String {
        format!("dense({}x{})", self.rows(), self.cols())
    }
}

/// Builds a dense operator from row vectors.
pub fn make_dense(rows: &[Vec<f64>]) -> Result<Operator> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(SlmError::Format("ragged matrix rows".into()));
    }
    let matrix = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    Ok(Arc::new(DenseOperator::new(matrix)))
}

#[derive(Debug, Clone, Copy)]
pub struct Identity {
    n: usize,
}

impl LinearOperator for Identity {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
    fn tag(&self) -> String {
        format!("identity({})", self.n)
    }
}

pub fn make_identity(n: usize) -> Operator {
    Arc::new(Identity { n })
}

// ---------------------------------------------------------------------------
// finite differences

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
}

/// First-order differences along one image axis, boundary rows omitted.
#[derive(Debug, Clone)]
pub struct FiniteDifference2d {
    height: usize,
    width: usize,
    direction: Direction,
}

impl LinearOperator for FiniteDifference2d {
    fn rows(&self) -> usize {
        match self.direction {
            Direction::Horizontal => self.height * (self.width - 1),
            Direction::Vertical => (self.height - 1) * self.width,
        }
    }
    fn cols(&self) -> usize {
        self.height * self.width
    }
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        match self.direction {
            Direction::Horizontal => {
                for r in 0..h {
                    for c in 0..w - 1 {
                        out[r * (w - 1) + c] = u[r * w + c + 1] - u[r * w + c];
                    }
                }
            }
            Direction::Vertical => {
                for r in 0..h - 1 {
                    for c in 0..w {
                        out[r * w + c] = u[(r + 1) * w + c] - u[r * w + c];
                    }
                }
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        out.fill(0.0);
        match self.direction {
            Direction::Horizontal => {
                for r in 0..h {
                    for c in 0..w - 1 {
                        let v = y[r * (w - 1) + c];
                        out[r * w + c + 1] += v;
                        out[r * w + c] -= v;
                    }
                }
            }
            Direction::Vertical => {
                for r in 0..h - 1 {
                    for c in 0..w {
                        let v = y[r * w + c];
                        out[(r + 1) * w + c] += v;
                        out[r * w + c] -= v;
                    }
                }
            }
        }
    }
    fn tag(&self) -> String {
        format!("diff_{:?}({}x{})", self.direction, self.height, self.width).to_lowercase()
    }
}

/// Differences along `direction`; that axis needs at least two pixels.
pub fn make_finite_difference_2d(
    height: usize,
    width: usize,
    direction: Direction,
) -> Result<Operator> {
    let axis = match direction {
        Direction::Horizontal => width,
        Direction::Vertical => height,
    };
    if axis < 2 || height == 0 || width == 0 {
        return domain(format!(
            "{direction:?} differences need at least 2 pixels along the axis (image {height}x{width})"
        ));
    }
    Ok(Arc::new(FiniteDifference2d {
        height,
        width,
        direction,
    }))
}

// ---------------------------------------------------------------------------
// Haar wavelets

/// One level of the orthonormal 1-D Haar transform on `v[..len]` (strided).
fn haar_step(v: &mut [f64], len: usize, stride: usize, tmp: &mut [f64]) {
    let half = len / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..half {
        let a = v[2 * i * stride];
        let b = v[(2 * i + 1) * stride];
        tmp[i] = s * (a + b);
        tmp[half + i] = s * (a - b);
    }
    for i in 0..len {
        v[i * stride] = tmp[i];
    }
}

fn haar_step_inv(v: &mut [f64], len: usize, stride: usize, tmp: &mut [f64]) {
    let half = len / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..half {
        let a = v[i * stride];
        let d = v[(half + i) * stride];
        tmp[2 * i] = s * (a + d);
        tmp[2 * i + 1] = s * (a - d);
    }
    for i in 0..len {
        v[i * stride] = tmp[i];
    }
}

/// Orthonormal 1-D Haar transform with `levels` levels (length a power of two).
pub fn haar_1d_forward(v: &[f64], levels: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    let mut tmp = vec![0.0; v.len()];
    let mut len = v.len();
    for _ in 0..levels {
        haar_step(&mut out, len, 1, &mut tmp);
        len /= 2;
    }
    out
}

/// Separable orthonormal 2-D Haar (Mallat pyramid on the low-low block).
#[derive(Debug, Clone)]
pub struct Haar2d {
    side: usize,
    levels: usize,
}

impl LinearOperator for Haar2d {
    fn rows(&self) -> usize {
        self.side * self.side
    }
    fn cols(&self) -> usize {
        self.side * self.side
    }
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let n = self.side;
        out.copy_from_slice(u);
        let mut tmp = vec![0.0; n];
        let mut len = n;
        for _ in 0..self.levels {
            for r in 0..len {
                haar_step(&mut out[r * n..], len, 1, &mut tmp);
            }
            for c in 0..len {
                haar_step(&mut out[c..], len, n, &mut tmp);
            }
            len /= 2;
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let n = self.side;
        out.copy_from_slice(y);
        let mut tmp = vec![0.0; n];
        let mut len = n >> (self.levels - 1);
        for _ in 0..self.levels {
            for c in 0..len {
                haar_step_inv(&mut out[c..], len, n, &mut tmp);
            }
            for r in 0..len {
                haar_step_inv(&mut out[r * n..], len, 1, &mut tmp);
            }
            len *= 2;
        }
    }
    fn tag(&self) -> String {
        format!("haar({}x{}, levels={})", self.side, self.side, self.levels)
    }
}

/// Default Haar depth for a `2^L`-sided image: `L - 2` levels (at least one).
pub fn default_haar_levels(side: usize) -> usize {
    let l = side.trailing_zeros() as usize;
    l.saturating_sub(2).max(1)
}

pub fn make_haar_wavelet_2d(height: usize, width: usize, levels: usize) -> Result<Operator> {
    if height != width || !height.is_power_of_two() || height < 2 {
        return domain(format!(
            "Haar transform needs a square power-of-two image, got {height}x{width}"
        ));
    }
    let max_levels = height.trailing_zeros() as usize;
    if levels == 0 || levels > max_levels {
        return domain(format!(
            "Haar levels must be in 1..={max_levels}, got {levels}"
        ));
    }
    Ok(Arc::new(Haar2d {
        side: height,
        levels,
    }))
}

// ---------------------------------------------------------------------------
// partial orthonormal 2-D DCT

/// Orthonormal DCT-II matrix `D[k, j] = s_k cos(pi (2j + 1) k / (2N))`.
pub fn dct_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |k, j| {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        s * (PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

/// Full orthonormal 2-D DCT followed by selection of whole transform-domain
/// columns (horizontal frequencies). Output block `k` holds the `height`
/// coefficients of column `columns[k]`.
#[derive(Debug, Clone)]
pub struct PartialDct2d {
    height: usize,
    width: usize,
    columns: Vec<usize>,
    dct_h: Arc<DMatrix<f64>>,
    dct_w: Arc<DMatrix<f64>>,
}

impl PartialDct2d {
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Same transform with a different column selection (shares the DCT tables).
    pub fn with_columns(&self, columns: Vec<usize>) -> Result<Self> {
        validate_columns(&columns, self.width)?;
        Ok(Self {
            columns,
            ..self.clone()
        })
    }
}

fn validate_columns(columns: &[usize], width: usize) -> Result<()> {
    let mut seen = vec![false; width];
    for &c in columns {
        if c >= width {
            return domain(format!("column {c} out of range for width {width}"));
        }
        if seen[c] {
            return domain(format!("duplicate column {c}"));
        }
        seen[c] = true;
    }
    Ok(())
}

impl LinearOperator for PartialDct2d {
    fn rows(&self) -> usize {
        self.height * self.columns.len()
    }
    fn cols(&self) -> usize {
        self.height * self.width
    }
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        let mut v = vec![0.0; h];
        for (k, &c) in self.columns.iter().enumerate() {
            // v = U * D_w[c, :]^T
            for r in 0..h {
                let row = &u[r * w..(r + 1) * w];
                v[r] = row
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x * self.dct_w[(c, j)])
                    .sum();
            }
            let block = &mut out[k * h..(k + 1) * h];
            for (f, o) in block.iter_mut().enumerate() {
                *o = (0..h).map(|r| self.dct_h[(f, r)] * v[r]).sum();
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        out.fill(0.0);
        let mut v = vec![0.0; h];
        for (k, &c) in self.columns.iter().enumerate() {
            let block = &y[k * h..(k + 1) * h];
            for (r, vr) in v.iter_mut().enumerate() {
                *vr = (0..h).map(|f| self.dct_h[(f, r)] * block[f]).sum();
            }
            for r in 0..h {
                let vr = v[r];
                if vr == 0.0 {
                    continue;
                }
                for j in 0..w {
                    out[r * w + j] += vr * self.dct_w[(c, j)];
                }
            }
        }
    }
    fn tag(&self) -> String {
        format!(
            "partial_dct({}x{}, {} columns)",
            self.height,
            self.width,
            self.columns.len()
        )
    }
}

pub fn partial_dct_2d(height: usize, width: usize, columns: Vec<usize>) -> Result<PartialDct2d> {
    if height == 0 || width == 0 {
        return domain("empty image");
    }
    validate_columns(&columns, width)?;
    Ok(PartialDct2d {
        height,
        width,
        columns,
        dct_h: Arc::new(dct_matrix(height)),
        dct_w: Arc::new(dct_matrix(width)),
    })
}

pub fn make_partial_orthotransform_2d(
    height: usize,
    width: usize,
    columns: Vec<usize>,
) -> Result<Operator> {
    Ok(Arc::new(partial_dct_2d(height, width, columns)?))
}

// ---------------------------------------------------------------------------
// composition

/// Vertical concatenation `[w_1 A_1; w_2 A_2; ...]`.
#[derive(Debug, Clone)]
pub struct Stack {
    ops: Vec<Operator>,
    weights: Vec<f64>,
    offsets: Vec<usize>,
    cols: usize,
}

impl Stack {
    /// Row offset of each block (length `blocks + 1`).
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

impl LinearOperator for Stack {
    fn rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, op) in self.ops.iter().enumerate() {
            let block = &mut out[self.offsets[i]..self.offsets[i + 1]];
            op.apply_into(x, block);
            let w = self.weights[i];
            if w != 1.0 {
                block.iter_mut().for_each(|v| *v *= w);
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut tmp = vec![0.0; self.cols];
        for (i, op) in self.ops.iter().enumerate() {
            op.adjoint_into(&y[self.offsets[i]..self.offsets[i + 1]], &mut tmp);
            let w = self.weights[i];
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += w * t;
            }
        }
    }
    fn tag(&self) -> String {
        let parts: Vec<String> = self
            .ops
            .iter()
            .zip(&self.weights)
            .map(|(o, w)| format!("{w}*{}", o.tag()))
            .collect();
        format!("stack[{}]", parts.join(", "))
    }
}

pub fn stack(ops: Vec<Operator>, weights: Vec<f64>) -> Result<Stack> {
    if ops.is_empty() {
        return shape("stack of zero operators");
    }
    if ops.len() != weights.len() {
        return shape(format!(
            "{} operators but {} weights",
            ops.len(),
            weights.len()
        ));
    }
    let cols = ops[0].cols();
    if let Some(bad) = ops.iter().find(|o| o.cols() != cols) {
        return shape(format!("column mismatch: {} vs {cols}", bad.cols()));
    }
    let mut offsets = vec![0];
    for op in &ops {
        offsets.push(offsets.last().unwrap() + op.rows());
    }
    Ok(Stack {
        ops,
        weights,
        offsets,
        cols,
    })
}

pub fn make_stack(ops: Vec<Operator>, weights: Vec<f64>) -> Result<Operator> {
    Ok(Arc::new(stack(ops, weights)?))
}

/// Selects (and reorders) rows of an inner operator: `out[k] = (A x)[rows[k]]`.
#[derive(Debug, Clone)]
pub struct RowSelect {
    inner: Operator,
    rows: Vec<usize>,
}

impl LinearOperator for RowSelect {
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let full = self.inner.apply(x);
        for (o, &r) in out.iter_mut().zip(&self.rows) {
            *o = full[r];
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let mut full = vec![0.0; self.inner.rows()];
        for (&v, &r) in y.iter().zip(&self.rows) {
            full[r] = v;
        }
        self.inner.adjoint_into(&full, out);
    }
    fn tag(&self) -> String {
        format!("select({} of {})", self.rows.len(), self.inner.tag())
    }
}

pub fn make_row_select(inner: Operator, rows: Vec<usize>) -> Result<Operator> {
    let mut seen = vec![false; inner.rows()];
    for &r in &rows {
        if r >= seen.len() || seen[r] {
            return domain(format!("row {r} out of range or duplicated"));
        }
        seen[r] = true;
    }
    Ok(Arc::new(RowSelect { inner, rows }))
}

/// Isotropic total variation: rows ordered as `(dx, dy)` pairs for every
/// pixel that has both a right and a lower neighbour, followed by the
/// remaining single differences (bottom-row `dx`, right-column `dy`).
/// Returns the operator and its group sizes.
pub fn make_isotropic_tv_2d(height: usize, width: usize) -> Result<(Operator, Vec<usize>)> {
    if height < 2 || width < 2 {
        return domain(format!(
            "isotropic TV needs a 2x2 image at least, got {height}x{width}"
        ));
    }
    let dx = make_finite_difference_2d(height, width, Direction::Horizontal)?;
    let dy = make_finite_difference_2d(height, width, Direction::Vertical)?;
    let n_dx = dx.rows();
    let inner = make_stack(vec![dx, dy], vec![1.0, 1.0])?;
    let mut rows = Vec::with_capacity(inner.rows());
    let mut sizes = Vec::new();
    for r in 0..height - 1 {
        for c in 0..width - 1 {
            rows.push(r * (width - 1) + c);
            rows.push(n_dx + r * width + c);
            sizes.push(2);
        }
    }
    for c in 0..width - 1 {
        rows.push((height - 1) * (width - 1) + c);
        sizes.push(1);
    }
    for r in 0..height - 1 {
        rows.push(n_dx + r * width + width - 1);
        sizes.push(1);
    }
    Ok((make_row_select(inner, rows)?, sizes))
}

// ---------------------------------------------------------------------------
// group layout

/// Partition of the rows of `B` into contiguous groups, each tied to one potential.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    starts: Vec<usize>,
    potential: Vec<usize>,
}

impl GroupLayout {
    /// Every row its own group.
    pub fn scalar(q: usize, potential: Vec<usize>) -> Result<Self> {
        Self::from_sizes(&vec![1; q], potential)
    }

    pub fn from_sizes(sizes: &[usize], potential: Vec<usize>) -> Result<Self> {
        if sizes.len() != potential.len() {
            return shape(format!(
                "{} groups but {} potential indices",
                sizes.len(),
                potential.len()
            ));
        }
        if sizes.contains(&0) {
            return domain("empty group");
        }
        let mut starts = Vec::with_capacity(sizes.len() + 1);
        starts.push(0);
        for s in sizes {
            starts.push(starts.last().unwrap() + s);
        }
        Ok(Self { starts, potential })
    }

    pub fn num_groups(&self) -> usize {
        self.potential.len()
    }

    pub fn num_rows(&self) -> usize {
        *self.starts.last().unwrap()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.starts[g]..self.starts[g + 1]
    }

    pub fn size(&self, g: usize) -> usize {
        self.starts[g + 1] - self.starts[g]
    }

    pub fn potential_index(&self, g: usize) -> usize {
        self.potential[g]
    }

    pub fn is_scalar(&self) -> bool {
        self.num_rows() == self.num_groups()
    }

    /// Expands a per-group vector to a per-row vector.
    pub fn expand(&self, per_group: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_rows()];
        for (g, &v) in per_group.iter().enumerate() {
            out[self.range(g)].fill(v);
        }
        out
    }

    /// Sums a per-row vector within each group.
    pub fn reduce_sum(&self, per_row: &[f64]) -> Vec<f64> {
        (0..self.num_groups())
            .map(|g| per_row[self.range(g)].iter().sum())
            .collect()
    }

    /// Euclidean norm of each group's sub-vector.
    pub fn group_norms(&self, s: &[f64]) -> Vec<f64> {
        (0..self.num_groups())
            .map(|g| {
                let r = self.range(g);
                if r.len() == 1 {
                    s[r.start].abs()
                } else {
                    norm2(&s[r])
                }
            })
            .collect()
    }

    /// Concatenates layouts (potential indices of `other` shifted by `shift`).
    pub fn concat(&self, other: &GroupLayout, shift: usize) -> GroupLayout {
        let mut starts = self.starts.clone();
        let base = self.num_rows();
        starts.extend(other.starts[1..].iter().map(|s| s + base));
        let mut potential = self.potential.clone();
        potential.extend(other.potential.iter().map(|p| p + shift));
        GroupLayout { starts, potential }
    }

    pub fn validate(&self, q: usize, num_potentials: usize) -> Result<()> {
        if self.num_rows() != q {
            return shape(format!(
                "layout covers {} rows, operator has {q}",
                self.num_rows()
            ));
        }
        if let Some(p) = self.potential.iter().find(|&&p| p >= num_potentials) {
            return domain(format!("group refers to missing potential {p}"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// probing utilities

/// Dense matrix of an operator, built column by column from unit probes.
pub fn materialize(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (m, n) = (op.rows(), op.cols());
    let cols: Vec<Vec<f64>> = par::map_indexed(n, |j| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        op.apply(&e)
    });
    DMatrix::from_fn(m, n, |i, j| cols[j][i])
}

/// Compressed sparse rows of an operator, from its dense materialization.
#[derive(Debug, Clone)]
pub struct SparseRows {
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRows {
    pub fn from_operator(op: &dyn LinearOperator) -> Self {
        Self::from_dense(&materialize(op))
    }

    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                let v = d[(i, j)];
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            cols: d.ncols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// `sum_i w_i b_i b_i^T` added into `a` (`a` is `cols x cols`).
    pub fn add_weighted_gram(&self, weights: &[f64], a: &mut DMatrix<f64>) {
        for (i, &w) in weights.iter().enumerate().take(self.rows()) {
            if w == 0.0 {
                continue;
            }
            let (idx, val) = self.row(i);
            for (p, &j) in idx.iter().enumerate() {
                let wj = w * val[p];
                for (q, &k) in idx.iter().enumerate() {
                    a[(j, k)] += wj * val[q];
                }
            }
        }
    }

    /// `b_i^T M b_i` for every row.
    pub fn row_quadratic_forms(&self, m: &DMatrix<f64>) -> Vec<f64> {
        par::map_indexed(self.rows(), |i| {
            let (idx, val) = self.row(i);
            let mut acc = 0.0;
            for (p, &j) in idx.iter().enumerate() {
                let mut inner = 0.0;
                for (q, &k) in idx.iter().enumerate() {
                    inner += m[(j, k)] * val[q];
                }
                acc += val[p] * inner;
            }
            acc
        })
    }

    /// `diag(B^T diag(w) B)`
    pub fn weighted_column_sq(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &w) in weights.iter().enumerate().take(self.rows()) {
            let (idx, val) = self.row(i);
            for (p, &j) in idx.iter().enumerate() {
                out[j] += w * val[p] * val[p];
            }
        }
        out
    }
}

/// Largest normalized adjoint mismatch `|<Au, v> - <u, A^T v>| / (|Au||v| + 1)`
/// over `probes` random Gaussian pairs.
pub fn adjoint_mismatch<R: Rng>(op: &dyn LinearOperator, probes: usize, rng: &mut R) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let u: Vec<f64> = (0..op.cols()).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..op.rows()).map(|_| rng.sample(StandardNormal)).collect();
        let au = op.apply(&u);
        let atv = op.adjoint(&v);
        let gap = (dot(&au, &v) - dot(&u, &atv)).abs() / (norm2(&au) * norm2(&v) + 1.0);
        worst = worst.max(gap);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_examples() {
        let id = make_dense(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        let a = make_dense(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.apply(&[1.0, 1.0]), vec![3.0, 7.0]);
        assert_eq!(a.adjoint(&[1.0, 0.0]), vec![1.0, 2.0]);
        assert!(matches!(
            make_dense(&[vec![1.0], vec![1.0, 2.0]]),
            Err(SlmError::Format(_))
        ));
    }

    #[test]
    fn finite_difference_examples() {
        let d = make_finite_difference_2d(1, 3, Direction::Horizontal).unwrap();
        assert_eq!(d.apply(&[1.0, 2.0, 4.0]), vec![1.0, 2.0]);
        let v = make_finite_difference_2d(4, 5, Direction::Vertical).unwrap();
        assert_eq!(v.rows(), 15);
        assert!(v.apply(&[3.0; 20]).iter().all(|&x| x == 0.0));
        assert!(make_finite_difference_2d(1, 5, Direction::Vertical).is_err());
    }

    #[test]
    fn haar_examples() {
        let h = haar_1d_forward(&[1.0, 1.0], 1);
        assert_relative_eq!(h[0], 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(h[1], 0.0);
        let w = make_haar_wavelet_2d(8, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        assert_relative_eq!(norm2(&w.apply(&u)), norm2(&u), max_relative = 1e-12);
        let back = w.apply(&w.adjoint(&u));
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(make_haar_wavelet_2d(6, 6, 1).is_err());
        assert!(make_haar_wavelet_2d(8, 8, 4).is_err());
    }

    #[test]
    fn dct_examples() {
        let full = make_partial_orthotransform_2d(4, 8, (0..8).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        assert_relative_eq!(norm2(&full.apply(&u)), norm2(&u), max_relative = 1e-12);
        let empty = make_partial_orthotransform_2d(4, 8, vec![]).unwrap();
        assert_eq!(empty.rows(), 0);
        assert!(empty.apply(&u).is_empty());
        assert!(make_partial_orthotransform_2d(4, 8, vec![1, 1]).is_err());
        assert!(make_partial_orthotransform_2d(4, 8, vec![8]).is_err());
        // a constant image lives entirely in column 0, frequency 0
        let c = make_partial_orthotransform_2d(4, 8, vec![0]).unwrap();
        let y = c.apply(&[1.0; 32]);
        assert_relative_eq!(y[0], 32f64.sqrt(), epsilon = 1e-12);
        assert!(y[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn stack_examples() {
        let s = make_stack(vec![make_identity(1), make_identity(1)], vec![1.0, 2.0]).unwrap();
        assert_eq!(s.apply(&[1.0]), vec![1.0, 2.0]);
        assert_eq!(s.rows(), 2);
        assert_eq!(s.adjoint(&[1.0, 1.0]), vec![3.0]);
        assert!(make_stack(vec![make_identity(1), make_identity(2)], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn isotropic_tv_layout() {
        let (tv, sizes) = make_isotropic_tv_2d(3, 4).unwrap();
        assert_eq!(tv.rows(), 3 * 3 + 2 * 4);
        assert_eq!(sizes.iter().sum::<usize>(), tv.rows());
        // pixel (0,0) pair: dx = u01 - u00, dy = u10 - u00
        let mut u = vec![0.0; 12];
        u[1] = 2.0;
        u[4] = 5.0;
        let s = tv.apply(&u);
        assert_eq!((s[0], s[1]), (2.0, 5.0));
    }

    #[test]
    fn every_operator_is_adjoint_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ops: Vec<Operator> = vec![
            make_dense(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap(),
            make_finite_difference_2d(8, 8, Direction::Horizontal).unwrap(),
            make_finite_difference_2d(8, 8, Direction::Vertical).unwrap(),
            make_haar_wavelet_2d(16, 16, 2).unwrap(),
            make_partial_orthotransform_2d(16, 16, vec![0, 3, 7, 15]).unwrap(),
            make_isotropic_tv_2d(8, 8).unwrap().0,
        ];
        for op in &ops {
            assert!(
                adjoint_mismatch(op.as_ref(), 20, &mut rng) < 1e-12,
                "{}",
                op.tag()
            );
        }
    }

    #[test]
    fn group_layout_helpers() {
        let l = GroupLayout::from_sizes(&[2, 1], vec![0, 1]).unwrap();
        assert_eq!(l.num_rows(), 3);
        assert_eq!(l.expand(&[1.0, 2.0]), vec![1.0, 1.0, 2.0]);
        assert_eq!(l.reduce_sum(&[1.0, 2.0, 3.0]), vec![3.0, 3.0]);
        assert_eq!(l.group_norms(&[3.0, 4.0, -2.0]), vec![5.0, 2.0]);
        assert!(l.validate(3, 1).is_err());
        assert!(l.validate(4, 2).is_err());
        assert!(l.validate(3, 2).is_ok());
    }
}
