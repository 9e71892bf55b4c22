//! Matrix-free linear operators.
//!
//! Drift, transition, diffusion Gram and measurement matrices are all
//! handled through [`LinearOperator`], so a problem with O(n) structure
//! (shifts, Kronecker products with identities, projections) never pays for
//! an `n × n` dense matrix.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, seeded_rng};

/// How the cost of one `apply` scales with the operator dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostClass {
    Linear,
    Quadratic,
}

pub trait LinearOperator: Send + Sync + Debug {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn cost_class(&self) -> CostClass;

    /// Columnwise action on an `in_dim × k` block.
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64>;

    /// Columnwise action of the transpose on an `out_dim × k` block.
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64>;

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.apply_mat(&m).as_slice())
    }

    fn apply_adjoint(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.apply_adjoint_mat(&m).as_slice())
    }

    /// Materialize the operator. Quadratic memory; small problems only.
    fn to_dense(&self) -> DMatrix<f64> {
        self.apply_mat(&DMatrix::identity(self.in_dim(), self.in_dim()))
    }
}

pub type Op = Arc<dyn LinearOperator>;

fn check_rows(context: &str, expected: usize, x: &DMatrix<f64>) {
    assert_eq!(
        x.nrows(),
        expected,
        "{context}: operand has {} rows, operator expects {expected}",
        x.nrows()
    );
}

#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl DenseOperator {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn arc(m: DMatrix<f64>) -> Op {
        Arc::new(Self(m))
    }
}

impl LinearOperator for DenseOperator {
    fn in_dim(&self) -> usize {
        self.0.ncols()
    }
    fn out_dim(&self) -> usize {
        self.0.nrows()
    }
    fn cost_class(&self) -> CostClass {
        CostClass::Quadratic
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("dense apply", self.in_dim(), x);
        &self.0 * x
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("dense adjoint", self.out_dim(), x);
        self.0.transpose() * x
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.0.clone()
    }
}

#[derive(Debug, Clone)]
pub struct DiagonalOperator(pub DVector<f64>);

impl LinearOperator for DiagonalOperator {
    fn in_dim(&self) -> usize {
        self.0.len()
    }
    fn out_dim(&self) -> usize {
        self.0.len()
    }
    fn cost_class(&self) -> CostClass {
        CostClass::Linear
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("diagonal apply", self.in_dim(), x);
        let mut out = x.clone();
        for (mut row, &s) in out.row_iter_mut().zip(self.0.iter()) {
            row *= s;
        }
        out
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_mat(x)
    }
}

/// `scale · I_n`; `scale = 0` doubles as the zero operator.
#[derive(Debug, Clone)]
pub struct ScaledIdentity {
    pub n: usize,
    pub scale: f64,
}

impl ScaledIdentity {
    pub fn identity(n: usize) -> Self {
        Self { n, scale: 1.0 }
    }

    pub fn zero(n: usize) -> Self {
        Self { n, scale: 0.0 }
    }
}

impl LinearOperator for ScaledIdentity {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.n
    }
    fn cost_class(&self) -> CostClass {
        CostClass::Linear
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("scaled identity apply", self.n, x);
        x * self.scale
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_mat(x)
    }
}

/// Periodic shift: `(S x)_i = x_{(i − shift) mod n}`, i.e. content moves
/// `shift` cells towards higher indices.
#[derive(Debug, Clone)]
pub struct CircularShift {
    pub n: usize,
    pub shift: i64,
}

impl CircularShift {
    pub fn new(n: usize, shift: i64) -> Self {
        Self { n, shift }
    }

    fn shifted(&self, x: &DMatrix<f64>, shift: i64) -> DMatrix<f64> {
        check_rows("circular shift", self.n, x);
        let n = self.n;
        let s = shift.rem_euclid(n as i64) as usize;
        let mut out = DMatrix::zeros(n, x.ncols());
        for j in 0..x.ncols() {
            let src = x.column(j);
            let mut dst = out.column_mut(j);
            // out[i] = x[i - s]: the tail of x wraps to the front.
            dst.rows_mut(s, n - s).copy_from(&src.rows(0, n - s));
            dst.rows_mut(0, s).copy_from(&src.rows(n - s, s));
        }
        out
    }
}

impl LinearOperator for CircularShift {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.n
    }
    fn cost_class(&self) -> CostClass {
        CostClass::Linear
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.shifted(x, self.shift)
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.shifted(x, -self.shift)
    }
}

/// Picks the listed state components: `n → indices.len()`.
#[derive(Debug, Clone)]
pub struct SelectionOperator {
    pub n: usize,
    pub indices: Vec<usize>,
}

impl SelectionOperator {
    pub fn new(n: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "selection index {bad} out of range for dimension {n}"
            )));
        }
        Ok(Self { n, indices })
    }
}

impl LinearOperator for SelectionOperator {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.indices.len()
    }
    fn cost_class(&self) -> CostClass {
        CostClass::Linear
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("selection apply", self.n, x);
        DMatrix::from_fn(self.indices.len(), x.ncols(), |i, j| x[(self.indices[i], j)])
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("selection adjoint", self.indices.len(), x);
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for (row, &idx) in self.indices.iter().enumerate() {
            for j in 0..x.ncols() {
                out[(idx, j)] += x[(row, j)];
            }
        }
        out
    }
}

/// `small ⊗ right` on states ordered as `i_small · n_right + i_right`.
///
/// With a state block reshaped to `X` (`n_right × d`, one column per small
/// index) the action is `right · X · smallᵀ`, so the cost is one
/// application of `right` to `d` columns plus an `O(n d²)` mix.
#[derive(Debug, Clone)]
pub struct KroneckerOperator {
    pub small: DMatrix<f64>,
    pub right: Op,
}

impl KroneckerOperator {
    pub fn new(small: DMatrix<f64>, right: Op) -> Result<Self> {
        if !small.is_square() || right.in_dim() != right.out_dim() {
            return Err(Error::InvalidArgument(
                "Kronecker factors must be square".into(),
            ));
        }
        Ok(Self { small, right })
    }

    fn act(&self, x: &DMatrix<f64>, adjoint: bool) -> DMatrix<f64> {
        let d = self.small.nrows();
        let nr = self.right.in_dim();
        check_rows("kronecker apply", d * nr, x);
        let k = x.ncols();
        // Columns of `stacked` are the d spatial slices of each of the k inputs.
        let stacked = DMatrix::from_column_slice(nr, d * k, x.as_slice());
        let mapped = if adjoint {
            self.right.apply_adjoint_mat(&stacked)
        } else {
            self.right.apply_mat(&stacked)
        };
        let mut out = DMatrix::zeros(d * nr, k);
        for j in 0..k {
            let block = mapped.columns(j * d, d);
            let mixed = if adjoint {
                block * &self.small
            } else {
                block * self.small.transpose()
            };
            out.column_mut(j).copy_from_slice(mixed.as_slice());
        }
        out
    }
}

impl LinearOperator for KroneckerOperator {
    fn in_dim(&self) -> usize {
        self.small.nrows() * self.right.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.in_dim()
    }
    fn cost_class(&self) -> CostClass {
        self.right.cost_class()
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.act(x, false)
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.act(x, true)
    }
}

/// `W · inner · Wᵀ + complement_scale · (I − W Wᵀ)` for an orthonormal
/// `n × p` basis `W`. Costs `O(n p)` per column.
#[derive(Debug, Clone)]
pub struct SubspaceOperator {
    pub basis: DMatrix<f64>,
    pub inner: DMatrix<f64>,
    pub complement_scale: f64,
}

impl SubspaceOperator {
    pub fn new(basis: DMatrix<f64>, inner: DMatrix<f64>, complement_scale: f64) -> Result<Self> {
        let p = basis.ncols();
        if inner.shape() != (p, p) {
            return Err(Error::Dimension {
                context: "subspace operator inner block".into(),
                expected: p,
                got: inner.nrows(),
            });
        }
        let gram_err = (basis.transpose() * &basis - DMatrix::<f64>::identity(p, p)).norm();
        if gram_err > 1e-10 * (p.max(1) as f64) {
            return Err(Error::InvalidArgument(format!(
                "subspace basis is not orthonormal (‖WᵀW − I‖ = {gram_err:.3e})"
            )));
        }
        Ok(Self { basis, inner, complement_scale })
    }

    fn act(&self, x: &DMatrix<f64>, inner: &DMatrix<f64>) -> DMatrix<f64> {
        check_rows("subspace apply", self.basis.nrows(), x);
        let coords = self.basis.transpose() * x;
        let mut out = x * self.complement_scale;
        let mixed = inner * &coords - &coords * self.complement_scale;
        out.gemm(1.0, &self.basis, &mixed, 1.0);
        out
    }
}

impl LinearOperator for SubspaceOperator {
    fn in_dim(&self) -> usize {
        self.basis.nrows()
    }
    fn out_dim(&self) -> usize {
        self.basis.nrows()
    }
    fn cost_class(&self) -> CostClass {
        CostClass::Linear
    }
    fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.act(x, &self.inner)
    }
    fn apply_adjoint_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.act(x, &self.inner.transpose())
    }
}

/// Worst relative violation of linearity and of the adjoint identity
/// `⟨A x, y⟩ = ⟨x, Aᵀ y⟩` over `probes` random probes.
pub fn probe_consistency(op: &dyn LinearOperator, probes: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, 0x0b5e);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = gaussian_matrix(&mut rng, op.in_dim(), 2);
        let y = gaussian_matrix(&mut rng, op.out_dim(), 1);
        let (a, b) = (1.7, -0.3);
        let combo = x.column(0) * a + x.column(1) * b;
        let lhs = op.apply(&combo);
        let ax = op.apply_mat(&x);
        let rhs = ax.column(0) * a + ax.column(1) * b;
        let scale = rhs.norm().max(lhs.norm()).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - &rhs).norm() / scale);

        let x0 = x.column(0).into_owned();
        let y0 = y.column(0).into_owned();
        let left = op.apply(&x0).dot(&y0);
        let right = x0.dot(&op.apply_adjoint(&y0));
        let scale = op.apply(&x0).norm() * y0.norm();
        if scale > 0.0 {
            worst = worst.max((left - right).abs() / scale);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(&mut seeded_rng(seed, 0), n, k)
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.kronecker(b)
    }

    #[test]
    fn operators_are_linear_with_true_adjoints() {
        let ops: Vec<Op> = vec![
            DenseOperator::arc(random(5, 5, 1)),
            Arc::new(DiagonalOperator(DVector::from_vec(vec![1.0, -2.0, 3.0]))),
            Arc::new(ScaledIdentity { n: 4, scale: 2.5 }),
            Arc::new(CircularShift { n: 7, shift: 3 }),
            Arc::new(SelectionOperator::new(6, vec![0, 2, 5]).unwrap()),
            Arc::new(KroneckerOperator::new(random(3, 3, 2), DenseOperator::arc(random(4, 4, 3))).unwrap()),
        ];
        for op in ops {
            assert!(probe_consistency(op.as_ref(), 5, 9) < 1e-10, "{op:?}");
        }
    }

    #[test]
    fn circular_shift_matches_dense_circulant() {
        let n = 64;
        let shift = CircularShift { n, shift: 1 };
        let mut perm = DMatrix::zeros(n, n);
        for i in 0..n {
            perm[(i, (i + n - 1) % n)] = 1.0;
        }
        let x = random(n, 3, 4);
        assert!((shift.apply_mat(&x) - &perm * &x).norm() < 1e-12);
        assert!((shift.apply_adjoint_mat(&x) - perm.transpose() * &x).norm() < 1e-12);
        let mut y = x.clone();
        for _ in 0..n {
            y = shift.apply_mat(&y);
        }
        assert_eq!(y, x);
    }

    #[test]
    fn kronecker_matches_dense_product() {
        let small = random(3, 3, 5);
        let right = random(7, 7, 6);
        let op = KroneckerOperator::new(small.clone(), DenseOperator::arc(right.clone())).unwrap();
        let dense = kron(&small, &right);
        let x = random(21, 4, 7);
        assert!((op.apply_mat(&x) - &dense * &x).norm() < 1e-10 * (&dense * &x).norm());
        assert!((op.apply_adjoint_mat(&x) - dense.transpose() * &x).norm() < 1e-10 * x.norm() * dense.norm());
        assert!((op.to_dense() - dense).norm() < 1e-12 * op.to_dense().norm());
    }

    #[test]
    fn subspace_operator_matches_dense_form() {
        let w = crate::linalg::random_orthonormal(9, 2, 3).unwrap();
        let inner = random(2, 2, 4);
        let op = SubspaceOperator::new(w.clone(), inner.clone(), -0.7).unwrap();
        let dense = &w * &inner * w.transpose() + (DMatrix::identity(9, 9) - &w * w.transpose()) * -0.7;
        assert!((op.to_dense() - &dense).norm() < 1e-12);
        assert!(probe_consistency(&op, 4, 1) < 1e-10);
        assert!(SubspaceOperator::new(w * 2.0, inner, 0.0).is_err());
    }

    #[test]
    fn selection_rejects_out_of_range() {
        assert!(SelectionOperator::new(3, vec![3]).is_err());
    }
}
