//! Factor-level linear algebra shared by the filter, smoother and DLRA code.
//!
//! Everything here works on tall `n × k` blocks with `k` small, so the cost
//! of each routine is `O(n k²)`; nothing materializes an `n × n` matrix
//! unless the function name says it is dense.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_finite, Error, Result};

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-12;

/// Condition estimate above which the pseudoinverse switches from QR to SVD.
pub const PINV_QR_CONDITION_LIMIT: f64 = 1e8;

/// Relative column norm under which `orthonormalize` declares a column
/// linearly dependent and completes the basis instead.
pub const ORTHO_DEFICIENCY_TOL: f64 = 1e-12;

/// A tall `n × r` matrix `L` standing for the PSD matrix `L Lᵀ`.
///
/// Two factors are equal as covariances iff their outer products agree, so
/// comparisons in this crate go through [`LowRankFactor::outer`] or the
/// column space, never raw entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor(DMatrix<f64>);

impl LowRankFactor {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "low-rank factor needs at least one row".into(),
            ));
        }
        check_finite(data.iter(), "low-rank factor")?;
        Ok(Self(data))
    }

    /// All-zero factor of the given shape.
    pub fn zeros(n: usize, r: usize) -> Self {
        Self(DMatrix::zeros(n, r))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Dense `L Lᵀ`. Only for small problems, tests and metrics.
    pub fn outer(&self) -> DMatrix<f64> {
        &self.0 * self.0.transpose()
    }

    /// Diagonal of `L Lᵀ` (the marginal variances) in `O(n r)`.
    pub fn marginal_variances(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.0.row_iter().map(|row| row.norm_squared()),
        )
    }

    /// Singular values of the factor, sorted descending.
    pub fn singular_values(&self) -> DVector<f64> {
        let mut s = self.0.clone().singular_values();
        s.as_mut_slice()
            .sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        s
    }
}

/// A (possibly truncated) singular value decomposition `u · diag(d) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub u: DMatrix<f64>,
    pub d: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdTriple {
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut ud = self.u.clone();
        scale_columns(&mut ud, &self.d);
        ud * self.v.transpose()
    }

    /// `u · diag(d)`, the left factor that reproduces `M Mᵀ` after truncation.
    pub fn scaled_left(&self) -> DMatrix<f64> {
        let mut ud = self.u.clone();
        scale_columns(&mut ud, &self.d);
        ud
    }
}

/// Top-`rank` singular triple of `m`.
///
/// The full thin SVD is computed and then truncated, which is the
/// Frobenius-optimal rank-`rank` approximation. The input is first reduced
/// by a thin QR so the dense SVD only ever runs on a `min(a, b)` square.
pub fn truncated_svd(m: &DMatrix<f64>, rank: usize) -> Result<SvdTriple> {
    let (a, b) = m.shape();
    let k = a.min(b);
    if rank == 0 || rank > k {
        return Err(Error::RankTooLarge { rank, max: k });
    }
    check_finite(m.iter(), "truncated_svd input")?;

    let (u, d, v) = if a >= b {
        let qr = m.clone().qr();
        let q = qr.q();
        let (su, d, sv) = checked_svd(&qr.r());
        (q * su, d, sv)
    } else {
        // m = Rᵀ Qᵀ with mᵀ = Q R.
        let qr = m.transpose().qr();
        let q = qr.q();
        let (su, d, sv) = checked_svd(&qr.r().transpose());
        (su, d, q * sv)
    };

    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(rank);

    Ok(SvdTriple {
        u: select_columns(&u, &order),
        d: DVector::from_iterator(rank, order.iter().map(|&i| d[i].max(0.0))),
        v: select_columns(&v, &order),
    })
}

/// Relative reconstruction error above which a dense SVD is rejected.
const SVD_RECONSTRUCTION_TOL: f64 = 1e-11;

/// Thin SVD `m = u · diag(d) · vᵀ` with a reconstruction check.
///
/// The bidiagonal SVD can return an inaccurate factorization: grossly so for
/// some rank-deficient inputs, and by up to a few 1e-10 for well-conditioned
/// inputs of a few hundred columns. A rejected result is polished by
/// one-sided Jacobi started from its right singular vectors.
pub fn checked_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let scale = m.norm();
    let svd = m.clone().svd(true, true);
    let (u, d, v) = (svd.u.expect("u requested"), svd.singular_values, svd.v_t.expect("v requested").transpose());
    let mut ud = u.clone();
    scale_columns(&mut ud, &d);
    let err = (ud * v.transpose() - m).norm();
    if scale == 0.0 || (err <= SVD_RECONSTRUCTION_TOL * scale && d.iter().all(|x| x.is_finite())) {
        return (u, d, v);
    }
    // Right vectors of the tall orientation; square for the thin SVD.
    let (tall, start) = if m.nrows() >= m.ncols() { (m.clone(), v) } else { (m.transpose(), u) };
    let start = if start.iter().all(|x| x.is_finite()) { start.qr().q() } else { DMatrix::identity(tall.ncols(), tall.ncols()) };
    let (u, d, v) = jacobi_from(&tall, start);
    if m.nrows() >= m.ncols() {
        (u, d, v)
    } else {
        (v, d, u)
    }
}

/// Plane rotation of columns `p < q` of a column-major buffer.
fn rotate_columns(data: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = data.split_at_mut(q * rows);
    let (x, y) = (&mut head[p * rows..(p + 1) * rows], &mut tail[..rows]);
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (u, v) = (*a, *b);
        *a = c * u - s * v;
        *b = s * u + c * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi SVD. Thin factors; left vectors of zero singular values
/// are completed to an orthonormal set.
pub fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, d, v) = jacobi_svd(&m.transpose());
        return (v, d, u);
    }
    jacobi_from(m, DMatrix::identity(m.ncols(), m.ncols()))
}

/// One-sided Jacobi on `m · v0` for a tall `m` and an orthogonal `v0`.
fn jacobi_from(m: &DMatrix<f64>, v0: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let mut g = m * &v0;
    let mut v = v0;
    let tiny = f64::MIN_POSITIVE.sqrt() * m.norm().max(f64::MIN_POSITIVE);
    let mut norms: Vec<f64> = g.column_iter().map(|c| c.norm_squared()).collect();
    // Rounding floor of a length-`rows` dot product.
    let tol = (rows as f64).sqrt() * f64::EPSILON;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha.sqrt() <= tiny || beta.sqrt() <= tiny {
                    continue;
                }
                let data = g.as_slice();
                let gamma = dot(&data[p * rows..(p + 1) * rows], &data[q * rows..(q + 1) * rows]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(g.as_mut_slice(), rows, p, q, c, s);
                rotate_columns(v.as_mut_slice(), cols, p, q, c, s);
                let data = g.as_slice();
                norms[p] = dot(&data[p * rows..(p + 1) * rows], &data[p * rows..(p + 1) * rows]);
                norms[q] = dot(&data[q * rows..(q + 1) * rows], &data[q * rows..(q + 1) * rows]);
            }
        }
        if !rotated {
            break;
        }
    }
    let d = DVector::from_iterator(cols, g.column_iter().map(|c| c.norm()));
    let dmax = d.max();
    let mut u = DMatrix::<f64>::zeros(rows, cols);
    let mut missing = Vec::new();
    for j in 0..cols {
        if d[j] > f64::EPSILON * dmax && d[j] > 0.0 {
            u.set_column(j, &(g.column(j) / d[j]));
        } else {
            missing.push(j);
        }
    }
    // Complete with the unit vector least covered by the current columns;
    // its residual norm is at least sqrt((rows - k) / rows).
    for j in missing {
        let coverage: Vec<f64> = u.row_iter().map(|r| r.norm_squared()).collect();
        let best = (0..rows).min_by(|&a, &b| coverage[a].total_cmp(&coverage[b])).expect("rows > 0");
        let mut e = DVector::<f64>::zeros(rows);
        e[best] = 1.0;
        for _ in 0..2 {
            let proj = u.tr_mul(&e);
            e -= &u * proj;
        }
        let norm = e.norm();
        u.set_column(j, &(e / norm));
    }
    (u, d, v)
}

/// Result of [`orthonormalize`].
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    pub q: DMatrix<f64>,
    /// Number of columns that were numerically dependent and replaced by
    /// seeded random directions orthogonal to the rest.
    pub completed_columns: usize,
}

impl Orthonormalized {
    pub fn is_deficient(&self) -> bool {
        self.completed_columns > 0
    }
}

/// Orthonormal basis for the column span of `m` (`n × r`, `n ≥ r`).
///
/// Classical Gram–Schmidt with one reorthogonalization pass. Columns whose
/// residual falls below [`ORTHO_DEFICIENCY_TOL`] relative to the largest
/// input column are replaced by random directions drawn from `seed`, so a
/// zero input yields a random orthonormal matrix.
pub fn orthonormalize(m: &DMatrix<f64>, seed: u64) -> Result<Orthonormalized> {
    orthonormalize_with_fallback(m, None, seed)
}

/// Like [`orthonormalize`], but dependent columns are first replaced by the
/// columns of `fallback` (in order) that still add a new direction, and only
/// then by random ones. Passing the previous basis keeps the span unchanged
/// when `m` vanishes.
pub fn orthonormalize_with_fallback(
    m: &DMatrix<f64>,
    fallback: Option<&DMatrix<f64>>,
    seed: u64,
) -> Result<Orthonormalized> {
    let (n, r) = m.shape();
    if r > n {
        return Err(Error::RankTooLarge { rank: r, max: n });
    }
    check_finite(m.iter(), "orthonormalize input")?;

    let max_norm = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let tol = ORTHO_DEFICIENCY_TOL * max_norm;
    let mut q = DMatrix::<f64>::zeros(n, r);
    let mut deficient = Vec::new();

    for j in 0..r {
        let mut v = m.column(j).into_owned();
        project_out(&q, j, &mut v);
        let norm = v.norm();
        if norm > tol && norm > 0.0 {
            q.set_column(j, &(v / norm));
        } else {
            deficient.push(j);
            q.column_mut(j).fill(0.0);
        }
    }

    if !deficient.is_empty() {
        let mut candidates = fallback
            .map(|f| f.column_iter().map(|c| c.into_owned()).collect::<Vec<_>>())
            .unwrap_or_default()
            .into_iter();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        'columns: for &j in &deficient {
            for cand in candidates.by_ref() {
                let scale = cand.norm();
                let mut v = cand;
                project_out_masked(&q, &deficient, j, &mut v);
                let norm = v.norm();
                if scale > 0.0 && norm > 1e-8 * scale {
                    q.set_column(j, &(v / norm));
                    continue 'columns;
                }
            }
            loop {
                let mut v = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                project_out_masked(&q, &deficient, j, &mut v);
                let norm = v.norm();
                if norm > 1e-8 {
                    q.set_column(j, &(v / norm));
                    break;
                }
            }
        }
    }

    Ok(Orthonormalized {
        q,
        completed_columns: deficient.len(),
    })
}

// v -= Q[:, ..cols] Q[:, ..cols]ᵀ v, twice.
fn project_out(q: &DMatrix<f64>, cols: usize, v: &mut DVector<f64>) {
    if cols == 0 {
        return;
    }
    let basis = q.columns(0, cols);
    for _ in 0..2 {
        let h = basis.tr_mul(v);
        v.gemv(-1.0, &basis, &h, 1.0);
    }
}

// Same as `project_out`, but against every already-filled column: all
// non-deficient columns plus deficient ones completed before `current`.
fn project_out_masked(q: &DMatrix<f64>, deficient: &[usize], current: usize, v: &mut DVector<f64>) {
    let filled: Vec<usize> = (0..q.ncols())
        .filter(|c| !deficient.contains(c) || *c < current)
        .collect();
    if filled.is_empty() {
        return;
    }
    let basis = select_columns(q, &filled);
    for _ in 0..2 {
        let h = basis.tr_mul(v);
        v.gemv(-1.0, &basis, &h, 1.0);
    }
}

/// Random `n × r` matrix with orthonormal columns, reproducible from `seed`.
pub fn random_orthonormal(n: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian_matrix(&mut rng, n, r);
    Ok(orthonormalize(&g, seed ^ 0x9e37_79b9_7f4a_7c15)?.q)
}

/// Moore–Penrose pseudoinverse of a tall factor, prepared once and applied
/// many times.
#[derive(Debug, Clone)]
pub struct TallPinv {
    inner: PinvKind,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
enum PinvKind {
    Qr { q: DMatrix<f64>, r: DMatrix<f64> },
    Svd { u: DMatrix<f64>, inv_d: DVector<f64>, v: DMatrix<f64>, cutoff_engaged: bool },
}

impl TallPinv {
    /// Thin QR when the diagonal-of-R condition estimate is below
    /// [`PINV_QR_CONDITION_LIMIT`], SVD with a relative cutoff otherwise.
    pub fn new(l: &DMatrix<f64>) -> Result<Self> {
        let (n, r) = l.shape();
        if r > n {
            return Err(Error::RankTooLarge { rank: r, max: n });
        }
        check_finite(l.iter(), "pseudoinverse input")?;

        let qr = l.clone().qr();
        let rmat = qr.r();
        let diag: Vec<f64> = (0..r).map(|i| rmat[(i, i)].abs()).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let well_conditioned = r > 0 && dmin > 0.0 && dmax / dmin < PINV_QR_CONDITION_LIMIT;

        let inner = if well_conditioned {
            PinvKind::Qr { q: qr.q(), r: rmat }
        } else {
            Self::svd_kind(l)?
        };
        Ok(Self { inner, rows: n, cols: r })
    }

    /// Always use the SVD route.
    pub fn new_svd(l: &DMatrix<f64>) -> Result<Self> {
        let (n, r) = l.shape();
        if r > n {
            return Err(Error::RankTooLarge { rank: r, max: n });
        }
        check_finite(l.iter(), "pseudoinverse input")?;
        Ok(Self { inner: Self::svd_kind(l)?, rows: n, cols: r })
    }

    fn svd_kind(l: &DMatrix<f64>) -> Result<PinvKind> {
        let r = l.ncols();
        if r == 0 {
            return Ok(PinvKind::Svd {
                u: DMatrix::zeros(l.nrows(), 0),
                inv_d: DVector::zeros(0),
                v: DMatrix::zeros(0, 0),
                cutoff_engaged: false,
            });
        }
        let svd = truncated_svd(l, r)?;
        let dmax = svd.d[0];
        let mut cutoff_engaged = false;
        let inv_d = svd.d.map(|s| {
            if dmax > 0.0 && s > PINV_RELATIVE_CUTOFF * dmax {
                1.0 / s
            } else {
                cutoff_engaged = true;
                0.0
            }
        });
        Ok(PinvKind::Svd { u: svd.u, inv_d, v: svd.v, cutoff_engaged })
    }

    /// `L⁺ x` for an `n × k` block `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(x.nrows(), self.rows);
        match &self.inner {
            PinvKind::Qr { q, r } => {
                let qtx = q.transpose() * x;
                r.solve_upper_triangular(&qtx)
                    .expect("R is nonsingular on the QR path")
            }
            PinvKind::Svd { u, inv_d, v, .. } => {
                let mut utx = u.transpose() * x;
                for (mut row, &s) in utx.row_iter_mut().zip(inv_d.iter()) {
                    row *= s;
                }
                v * utx
            }
        }
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.apply(&m).as_slice())
    }

    /// Whether any singular value was discarded by the relative cutoff.
    pub fn cutoff_engaged(&self) -> bool {
        matches!(self.inner, PinvKind::Svd { cutoff_engaged: true, .. })
    }

    pub fn uses_svd(&self) -> bool {
        matches!(self.inner, PinvKind::Svd { .. })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `L⁺ x` without forming any `n × n` object.
pub fn tall_pinv_apply(l: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if l.nrows() != x.nrows() {
        return Err(Error::Dimension {
            context: "tall_pinv_apply rhs rows".into(),
            expected: l.nrows(),
            got: x.nrows(),
        });
    }
    Ok(TallPinv::new(l)?.apply(x))
}

/// Symmetric PSD square root of a symmetric matrix.
///
/// Negative eigenvalues are clamped to zero; the returned mass is the sum of
/// the clamped magnitudes so callers can report it.
pub fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = symmetrize(m).symmetric_eigen();
    let mut clamped = 0.0;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clamped += -l;
            0.0
        } else {
            l.sqrt()
        }
    });
    let mut vs = eig.eigenvectors.clone();
    scale_columns(&mut vs, &roots);
    (vs * eig.eigenvectors.transpose(), clamped)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Multiply column `j` of `m` by `s[j]`.
pub fn scale_columns(m: &mut DMatrix<f64>, s: &DVector<f64>) {
    for (mut col, &sj) in m.column_iter_mut().zip(s.iter()) {
        col *= sj;
    }
}

pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Horizontal concatenation `[a | b]`.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hstack row mismatch");
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute distance when `b` vanishes.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let nb = b.norm();
    if nb > 0.0 {
        diff / nb
    } else {
        diff
    }
}

pub fn gaussian_matrix<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Deterministic generator for `(seed, stream)`; distinct streams of the
/// same seed do not overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mix two words into a fresh seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
