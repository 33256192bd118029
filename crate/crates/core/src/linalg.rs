//! Dense symmetric linear algebra for diagonal-plus-low-rank covariances.
//!
//! Everything here works on small dense matrices (dimension up to ~100).
//! The rank-update inverses return plain [`DMatrix`] values because
//! `G + x yᵀ` is only symmetric when `x = y`; callers that know the result
//! is symmetric wrap it in [`SymMatrix`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a matrix is treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Maximum relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// A dense real symmetric matrix. Symmetry holds exactly after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
    asymmetry: f64,
}

impl SymMatrix {
    /// Symmetrizes `m` by averaging with its transpose. Fails if the input
    /// was further from symmetric than [`SYMMETRY_TOL`] relative to its scale.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::Dimension("matrix dimension must be >= 1".into()));
        }
        let n = m.nrows();
        let scale = max_abs(&m);
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric(asym));
        }
        let mut inner = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (inner[(i, j)] + inner[(j, i)]);
                inner[(i, j)] = avg;
                inner[(j, i)] = avg;
            }
        }
        Ok(SymMatrix {
            inner,
            asymmetry: asym,
        })
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix {
            inner: DMatrix::identity(n, n),
            asymmetry: 0.0,
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix {
            inner: DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            asymmetry: 0.0,
        }
    }

    /// Builds from row slices, e.g. `&[&[2., 1.], &[1., 2.]]`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    /// Largest `|m[i][j] - m[j][i]|` seen before symmetrization.
    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.inner.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Principal submatrix on the given index set.
    pub fn principal(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix {
            inner: submatrix(&self.inner, idx, idx),
            asymmetry: 0.0,
        }
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.inner * x))
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.inner[idx]
    }
}

/// The low-rank perturbation `base + left · middle · rightᵀ`.
#[derive(Debug, Clone)]
pub struct RankUpdate {
    pub base: SymMatrix,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub middle: SymMatrix,
}

impl RankUpdate {
    pub fn new(
        base: SymMatrix,
        left: DMatrix<f64>,
        right: DMatrix<f64>,
        middle: Option<SymMatrix>,
    ) -> Result<Self> {
        let n = base.dim();
        let r = left.ncols();
        if left.nrows() != n || right.nrows() != n || right.ncols() != r {
            return Err(Error::Dimension(format!(
                "rank update factors must be {n}x{r}"
            )));
        }
        if r > n {
            return Err(Error::Dimension(format!("rank {r} exceeds dimension {n}")));
        }
        let middle = middle.unwrap_or_else(|| SymMatrix::identity(r.max(1)));
        if r > 0 && middle.dim() != r {
            return Err(Error::Dimension("middle factor must be r x r".into()));
        }
        Ok(RankUpdate {
            base,
            left,
            right,
            middle,
        })
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return self.base.matrix().clone();
        }
        self.base.matrix() + &self.left * self.middle.matrix() * self.right.transpose()
    }

    /// Inverse via Woodbury, given the inverse of the base.
    pub fn inverse(&self, base_inverse: &SymMatrix) -> Result<DMatrix<f64>> {
        if self.rank() == 0 {
            return Ok(base_inverse.matrix().clone());
        }
        let middle_inv = invert(self.middle.matrix())
            .map_err(|_| Error::SingularBlock("middle factor".into()))?;
        woodbury_inverse(base_inverse, &self.left, &middle_inv, &self.right)
    }
}

/// `(G + x yᵀ)⁻¹` from `G⁻¹` by the Sherman–Morrison formula.
pub fn sherman_morrison_inverse(
    g_inverse: &SymMatrix,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = g_inverse.dim();
    if x.len() != n || y.len() != n {
        return Err(Error::Dimension(format!(
            "vectors must have length {n}, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let gi = g_inverse.matrix();
    let gx = gi * x;
    let ytg = gi.transpose() * y;
    let denominator = 1.0 + y.dot(&gx);
    if denominator.abs() <= PIVOT_TOL {
        return Err(Error::SingularUpdate { denominator });
    }
    Ok(gi - (&gx * ytg.transpose()) / denominator)
}

/// `(G + U·M·Vᵀ)⁻¹ = G⁻¹ − G⁻¹U(M⁻¹ + VᵀG⁻¹U)⁻¹VᵀG⁻¹`, taking `M⁻¹` directly.
pub fn woodbury_inverse(
    g_inverse: &SymMatrix,
    u: &DMatrix<f64>,
    middle_inverse: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = g_inverse.dim();
    let r = u.ncols();
    if u.nrows() != n || v.nrows() != n || v.ncols() != r {
        return Err(Error::Dimension(format!(
            "U and V must both be {n}x{r}"
        )));
    }
    if r == 0 {
        return Ok(g_inverse.matrix().clone());
    }
    if middle_inverse.nrows() != r || middle_inverse.ncols() != r {
        return Err(Error::Dimension(format!("middle inverse must be {r}x{r}")));
    }
    let gi = g_inverse.matrix();
    let gu = gi * u;
    let vtg = v.transpose() * gi;
    let inner = middle_inverse + v.transpose() * &gu;
    let inner_inv = match invert(&inner) {
        Ok(m) => m,
        Err(_) => {
            return Err(Error::SingularUpdate {
                denominator: min_pivot(&inner),
            })
        }
    };
    Ok(gi - gu * inner_inv * vtg)
}

/// Inverse of `[[A, B], [C, D]]` through `A⁻¹` and the Schur complement
/// `S = D − C A⁻¹ B`:
///
/// ```text
/// [ A⁻¹ + A⁻¹B S⁻¹ C A⁻¹   −A⁻¹B S⁻¹ ]
/// [ −S⁻¹ C A⁻¹                S⁻¹     ]
/// ```
pub fn block_inverse(
    a: &SymMatrix,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &SymMatrix,
) -> Result<DMatrix<f64>> {
    let m = a.dim();
    let k = d.dim();
    if b.nrows() != m || b.ncols() != k || c.nrows() != k || c.ncols() != m {
        return Err(Error::Dimension(format!(
            "B must be {m}x{k} and C must be {k}x{m}"
        )));
    }
    let a_inv =
        invert(a.matrix()).map_err(|_| Error::SingularBlock("leading block A".into()))?;
    let ca = c * &a_inv;
    let ab = &a_inv * b;
    let schur = d.matrix() - c * &ab;
    let s_inv = invert(&schur)
        .map_err(|_| Error::SingularBlock("Schur complement D - C A^-1 B".into()))?;
    let top_left = &a_inv + &ab * &s_inv * &ca;
    let top_right = -(&ab * &s_inv);
    let bottom_left = -(&s_inv * &ca);
    let mut out = DMatrix::zeros(m + k, m + k);
    out.view_mut((0, 0), (m, m)).copy_from(&top_left);
    out.view_mut((0, m), (m, k)).copy_from(&top_right);
    out.view_mut((m, 0), (k, m)).copy_from(&bottom_left);
    out.view_mut((m, m), (k, k)).copy_from(&s_inv);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdReport {
    pub is_spd: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

pub fn spd_check(m: &SymMatrix) -> SpdReport {
    let ev = m.eigenvalues();
    let lambda_min = ev[0];
    let lambda_max = ev[ev.len() - 1];
    SpdReport {
        is_spd: lambda_min > PIVOT_TOL * lambda_max.max(1.0),
        lambda_min,
        lambda_max,
    }
}

/// Outcome of checking the eigenvalue bounds for `G + x xᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeylReport {
    /// Both chains hold, with `λ₁(G) + xᵀx` as the upper bound on `λ₁(G + xxᵀ)`.
    pub holds: bool,
    /// Whether the sharper upper bound `λ₁(G + xxᵀ) ≤ λ₂(G) + xᵀx` also held.
    /// Reported only; it is not part of `holds`.
    pub lambda2_upper_holds: bool,
}

/// Eigenvalue sandwich for a rank-one PSD update, with `λ₁ ≥ … ≥ λ_N`:
///
/// ```text
/// λ_N(G) ≤ λ_N(G+xxᵀ) ≤ min(λ₁(G), λ_N(G) + xᵀx)
/// max(λ₁(G), λ_N(G) + xᵀx) ≤ λ₁(G+xxᵀ) ≤ λ₁(G) + xᵀx
/// ```
pub fn weyl_report(g: &SymMatrix, x: &DVector<f64>) -> Result<WeylReport> {
    let n = g.dim();
    if x.len() != n {
        return Err(Error::Dimension(format!("x must have length {n}")));
    }
    let updated = SymMatrix::new(g.matrix() + x * x.transpose())?;
    let before = g.eigenvalues();
    let after = updated.eigenvalues();
    let xx = x.dot(x);
    let (g_min, g_max) = (before[0], before[n - 1]);
    let g_second = if n >= 2 { before[n - 2] } else { before[0] };
    let (u_min, u_max) = (after[0], after[n - 1]);
    let tol = 1e-10 * (1.0 + g_max.abs().max(u_max.abs()));

    let holds = g_min <= u_min + tol
        && u_min <= g_max.min(g_min + xx) + tol
        && g_max.max(g_min + xx) <= u_max + tol
        && u_max <= g_max + xx + tol;
    let lambda2_upper_holds = u_max <= g_second + xx + tol;
    Ok(WeylReport {
        holds,
        lambda2_upper_holds,
    })
}

pub fn weyl_bounds_check(g: &SymMatrix, x: &DVector<f64>) -> bool {
    weyl_report(g, x).map(|r| r.holds).unwrap_or(false)
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// General inverse by LU with a relative pivot check.
pub fn invert(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension("cannot invert a non-square matrix".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let scale = max_abs(m);
    let lu = m.clone().lu();
    let u = lu.u();
    let pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if pivot.is_nan() || pivot <= PIVOT_TOL * scale {
        return Err(Error::SingularBlock(format!(
            "pivot {pivot:e} below threshold at scale {scale:e}"
        )));
    }
    lu.try_inverse()
        .ok_or_else(|| Error::SingularBlock("LU inverse failed".into()))
}

/// Inverse of an SPD matrix via Cholesky; the result is symmetrized.
pub fn invert_spd(m: &SymMatrix) -> Result<SymMatrix> {
    let chol = m
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
    SymMatrix::new(chol.inverse())
}

/// Solves `M y = rhs` for SPD `M`.
pub fn solve_spd(m: &SymMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
    Ok(chol.solve(rhs))
}

/// `log det M` for SPD `M`, from the Cholesky diagonal.
pub fn log_det_spd(m: &SymMatrix) -> Result<f64> {
    let chol = m
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
    let l = chol.l();
    Ok(2.0 * (0..m.dim()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `max |M·M⁻¹ − I|` over entries.
pub fn inverse_residual(m: &DMatrix<f64>, m_inv: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    max_abs(&(m * m_inv - DMatrix::<f64>::identity(n, n)))
}

fn min_pivot(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let u = m.clone().lu().u();
    (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min)
}
