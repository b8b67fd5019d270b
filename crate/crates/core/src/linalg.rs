//! Dense complex linear algebra for small matrices (2 ≤ n ≤ ~12).
//!
//! Simple-spectrum eigendecomposition with biorthogonal left/right
//! eigenvectors, rank-one spectral projectors, first-order projector
//! derivatives and the parallel-transport generator `K = Σ_j P_j' P_j`.
//!
//! The eigensolver is a complex Hessenberg reduction followed by an
//! explicitly shifted QR iteration with Wilkinson shifts. n is small, so
//! O(n³) with small constants beats any structure exploitation; the solver
//! is called ~10⁵–10⁶ times per run.

use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Relative threshold below which `⟨l_j|r_j⟩` is treated as a defective pair.
const BIORTHOGONALITY_FLOOR: f64 = 1.0e-12;

#[derive(Debug, Clone, Error)]
pub enum LinalgError {
    #[error("spectrum is degenerate: min gap {min_gap:.3e} below tolerance {gap_tol:.3e}")]
    DegenerateSpectrum { min_gap: f64, gap_tol: f64 },
    #[error("QR eigenvalue iteration failed to converge after {iters} sweeps")]
    NonConvergence { iters: usize },
    #[error("matrix is numerically defective: |<l|r>| = {overlap:.3e}")]
    Defective { overlap: f64 },
    #[error("matrix is singular at pivot {pivot}")]
    Singular { pivot: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Square dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let dim = rows.len();
        assert!(rows.iter().all(|r| r.len() == dim), "rows must be square");
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[C64]) -> Self {
        let mut m = Self::zeros(entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    /// Rank-one outer product `col · row†` (row is conjugated).
    pub fn outer(col: &[C64], row: &[C64]) -> Self {
        let dim = col.len();
        assert_eq!(row.len(), dim);
        Self::from_fn(dim, |i, j| col[i] * row[j].conj())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn col(&self, j: usize) -> Vec<C64> {
        (0..self.dim).map(|i| self[(i, j)]).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)])
    }

    pub fn conj(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(i, j)].conj())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.dim);
        (0..self.dim)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(&a, &x)| a * x)
                    .sum::<C64>()
            })
            .collect()
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    /// Characteristic polynomial coefficients `p(λ) = λ^n + c_1 λ^{n-1} + ... + c_n`
    /// via the Faddeev–LeVerrier recursion. Exact in the matrix entries.
    pub fn charpoly(&self) -> Vec<C64> {
        let n = self.dim;
        let mut coeffs = vec![C64::new(1.0, 0.0)];
        let mut m = CMatrix::zeros(n);
        for k in 1..=n {
            // M_k = A·M_{k-1} + c_{k-1}·A
            let c_prev = *coeffs.last().unwrap();
            let am = self.matmul(&m).add(&self.scale(c_prev));
            let c_k = -am.trace() / C64::new(k as f64, 0.0);
            coeffs.push(c_k);
            m = am;
        }
        coeffs
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

/// LU factorization with partial pivoting.
pub struct LuDecomposition {
    lu: CMatrix,
    pivots: Vec<usize>,
    swaps: usize,
}

pub fn lu_factorize(m: &CMatrix) -> Result<LuDecomposition, LinalgError> {
    let n = m.dim();
    let mut lu = m.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    let mut swaps = 0;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let mut p = k;
        let mut best = lu[(k, k)].norm_sqr();
        for i in (k + 1)..n {
            let v = lu[(i, k)].norm_sqr();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best.sqrt() <= 1.0e-300 * scale {
            return Err(LinalgError::Singular { pivot: k });
        }
        if p != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = tmp;
            }
            pivots.swap(k, p);
            swaps += 1;
        }
        let d = lu[(k, k)];
        for i in (k + 1)..n {
            let f = lu[(i, k)] / d;
            lu[(i, k)] = f;
            for j in (k + 1)..n {
                let sub = f * lu[(k, j)];
                lu[(i, j)] -= sub;
            }
        }
    }
    Ok(LuDecomposition { lu, pivots, swaps })
}

impl LuDecomposition {
    pub fn solve(&self, rhs: &[C64]) -> Vec<C64> {
        let n = self.lu.dim();
        let mut y: Vec<C64> = self.pivots.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let sub = self.lu[(i, j)] * y[j];
                y[i] -= sub;
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let sub = self.lu[(i, j)] * y[j];
                y[i] -= sub;
            }
            y[i] /= self.lu[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> CMatrix {
        let n = self.lu.dim();
        let mut inv = CMatrix::zeros(n);
        let mut e = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            e.fill(C64::new(0.0, 0.0));
            e[j] = C64::new(1.0, 0.0);
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    pub fn det(&self) -> C64 {
        let n = self.lu.dim();
        let mut d = if self.swaps % 2 == 0 {
            C64::new(1.0, 0.0)
        } else {
            C64::new(-1.0, 0.0)
        };
        for i in 0..n {
            d *= self.lu[(i, i)];
        }
        d
    }
}

pub fn invert(m: &CMatrix) -> Result<CMatrix, LinalgError> {
    Ok(lu_factorize(m)?.inverse())
}

pub fn determinant(m: &CMatrix) -> Result<C64, LinalgError> {
    match lu_factorize(m) {
        Ok(lu) => Ok(lu.det()),
        Err(LinalgError::Singular { .. }) => Ok(C64::new(0.0, 0.0)),
        Err(e) => Err(e),
    }
}

/// Simple-spectrum eigendecomposition at a point.
#[derive(Debug, Clone)]
pub struct SpectralFrame {
    /// Point z at which the generator was evaluated (bookkeeping only).
    pub point: C64,
    /// Eigenvalues, ordered by ascending real part on the real axis
    /// (lexicographic (Re, Im) off it).
    pub eigenvalues: Vec<C64>,
    /// Right eigenvectors, unit Euclidean norm.
    pub right_vectors: Vec<Vec<C64>>,
    /// Left eigenvectors, scaled so that `⟨l_j|r_j⟩ = 1`.
    pub left_vectors: Vec<Vec<C64>>,
    /// Rank-one spectral projectors `P_j = r_j l_j†`.
    pub projectors: Vec<CMatrix>,
    /// Minimal pairwise eigenvalue distance.
    pub min_gap: f64,
}

impl SpectralFrame {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Reconstruct `Σ_j e_j P_j`.
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.dim();
        let mut m = CMatrix::zeros(n);
        for j in 0..n {
            m = m.add(&self.projectors[j].scale(self.eigenvalues[j]));
        }
        m
    }

    /// Apply a permutation to the eigenvalue labels: entry `j` of the result
    /// is entry `perm[j]` of self.
    pub fn permuted(&self, perm: &[usize]) -> SpectralFrame {
        SpectralFrame {
            point: self.point,
            eigenvalues: perm.iter().map(|&p| self.eigenvalues[p]).collect(),
            right_vectors: perm.iter().map(|&p| self.right_vectors[p].clone()).collect(),
            left_vectors: perm.iter().map(|&p| self.left_vectors[p].clone()).collect(),
            projectors: perm.iter().map(|&p| self.projectors[p].clone()).collect(),
            min_gap: self.min_gap,
        }
    }
}

fn householder_hessenberg(a: &mut CMatrix, q: &mut CMatrix) {
    let n = a.dim();
    for k in 0..n.saturating_sub(2) {
        let mut norm2 = 0.0;
        for i in (k + 1)..n {
            norm2 += a[(i, k)].norm_sqr();
        }
        let norm = norm2.sqrt();
        if norm <= f64::MIN_POSITIVE {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let phase = if x0.norm() > 0.0 {
            x0 / x0.norm()
        } else {
            C64::new(1.0, 0.0)
        };
        let alpha = -phase * norm;
        // v = x - alpha e1
        let mut v = vec![C64::new(0.0, 0.0); n];
        for i in (k + 1)..n {
            v[i] = a[(i, k)];
        }
        v[k + 1] -= alpha;
        let vnorm2: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        if vnorm2 <= f64::MIN_POSITIVE {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // A <- (I - beta v v†) A
        for j in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for i in (k + 1)..n {
                s += v[i].conj() * a[(i, j)];
            }
            s *= beta;
            for i in (k + 1)..n {
                let sub = v[i] * s;
                a[(i, j)] -= sub;
            }
        }
        // A <- A (I - beta v v†)
        for i in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for j in (k + 1)..n {
                s += a[(i, j)] * v[j];
            }
            s *= beta;
            for j in (k + 1)..n {
                let sub = s * v[j].conj();
                a[(i, j)] -= sub;
            }
        }
        // Q <- Q (I - beta v v†)
        for i in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for j in (k + 1)..n {
                s += q[(i, j)] * v[j];
            }
            s *= beta;
            for j in (k + 1)..n {
                let sub = s * v[j].conj();
                q[(i, j)] -= sub;
            }
        }
    }
}

/// Complex Givens rotation `[c, s; -s̄, c] [a; b] = [r; 0]` with real `c`.
fn givens(a: C64, b: C64) -> (f64, C64, C64) {
    let an = a.norm();
    let bn = b.norm();
    if bn == 0.0 {
        return (1.0, C64::new(0.0, 0.0), a);
    }
    if an == 0.0 {
        // r = |b|, s picked so -s̄·b... choose c=0, s = b̄/|b|
        let s = b.conj() / bn;
        return (0.0, s, C64::new(bn, 0.0));
    }
    let norm = (an * an + bn * bn).sqrt();
    let c = an / norm;
    let phase_a = a / an;
    let s = phase_a * b.conj() / norm;
    let r = phase_a * norm;
    (c, s, r)
}

/// Wilkinson shift: eigenvalue of the trailing 2×2 block closest to the corner.
fn wilkinson_shift(h: &CMatrix, m: usize) -> C64 {
    let a = h[(m - 2, m - 2)];
    let b = h[(m - 2, m - 1)];
    let c = h[(m - 1, m - 2)];
    let d = h[(m - 1, m - 1)];
    let tr = a + d;
    let det = a * d - b * c;
    let disc = (tr * tr - det.scale_four()).sqrt();
    let l1 = (tr + disc) * 0.5;
    let l2 = (tr - disc) * 0.5;
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

trait ScaleFour {
    fn scale_four(self) -> C64;
}
impl ScaleFour for C64 {
    fn scale_four(self) -> C64 {
        C64::new(4.0 * self.re, 4.0 * self.im)
    }
}

/// Complex Schur decomposition `A = Q T Q†` of a general complex matrix.
/// Returns (T upper triangular, Q unitary).
pub fn schur(a: &CMatrix) -> Result<(CMatrix, CMatrix), LinalgError> {
    let n = a.dim();
    let mut h = a.clone();
    let mut q = CMatrix::identity(n);
    householder_hessenberg(&mut h, &mut q);

    let scale = h.max_abs().max(f64::MIN_POSITIVE);
    let eps = f64::EPSILON;
    let mut m = n;
    let mut iter_since_deflation = 0usize;
    let mut total_iters = 0usize;
    let max_iters = 60 * n.max(4);

    while m > 1 {
        // deflate trailing eigenvalues with negligible subdiagonal
        let mut deflated = false;
        while m > 1 {
            let sub = h[(m - 1, m - 2)].norm();
            let local = h[(m - 1, m - 1)].norm() + h[(m - 2, m - 2)].norm();
            if sub <= eps * (local + scale * 1.0e-3) {
                h[(m - 1, m - 2)] = C64::new(0.0, 0.0);
                m -= 1;
                iter_since_deflation = 0;
                deflated = true;
            } else {
                break;
            }
        }
        if m <= 1 {
            break;
        }
        if deflated {
            continue;
        }
        // start of the active irreducible block
        let mut l = m - 1;
        while l > 0 {
            let sub = h[(l, l - 1)].norm();
            let local = h[(l, l)].norm() + h[(l - 1, l - 1)].norm();
            if sub <= eps * (local + scale * 1.0e-3) {
                h[(l, l - 1)] = C64::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }

        total_iters += 1;
        iter_since_deflation += 1;
        if total_iters > max_iters {
            return Err(LinalgError::NonConvergence { iters: total_iters });
        }
        let mut mu = wilkinson_shift(&h, m);
        if iter_since_deflation % 12 == 0 {
            // exceptional shift to break rare cycling
            mu = h[(m - 1, m - 1)] + C64::new(1.5 * h[(m - 1, m - 2)].norm(), 0.0);
        }

        // explicit shifted QR on the active block [l, m)
        let mut rots: Vec<(f64, C64)> = Vec::with_capacity(m - l);
        for i in l..m {
            h[(i, i)] -= mu;
        }
        for i in l..(m - 1) {
            let (c, s, r) = givens(h[(i, i)], h[(i + 1, i)]);
            h[(i, i)] = r;
            h[(i + 1, i)] = C64::new(0.0, 0.0);
            for j in (i + 1)..n {
                let x = h[(i, j)];
                let y = h[(i + 1, j)];
                h[(i, j)] = x * c + y * s;
                h[(i + 1, j)] = -x * s.conj() + y * c;
            }
            rots.push((c, s));
        }
        // H <- R Q† (apply rotations on the right), then add the shift back
        for (idx, &(c, s)) in rots.iter().enumerate() {
            let i = l + idx;
            let hi = (i + 2).min(m);
            for r in 0..hi {
                let x = h[(r, i)];
                let y = h[(r, i + 1)];
                h[(r, i)] = x * c + y * s.conj();
                h[(r, i + 1)] = -x * s + y * c;
            }
            for r in 0..n {
                let x = q[(r, i)];
                let y = q[(r, i + 1)];
                q[(r, i)] = x * c + y * s.conj();
                q[(r, i + 1)] = -x * s + y * c;
            }
        }
        for i in l..m {
            h[(i, i)] += mu;
        }
    }
    // zero strictly-lower part (roundoff remnants)
    for i in 0..n {
        for j in 0..i {
            h[(i, j)] = C64::new(0.0, 0.0);
        }
    }
    Ok((h, q))
}

/// Right eigenvectors of an upper triangular matrix by back-substitution,
/// returned as columns of an upper triangular matrix.
fn triangular_eigenvectors(t: &CMatrix) -> CMatrix {
    let n = t.dim();
    let scale = t.max_abs().max(f64::MIN_POSITIVE);
    let mut y = CMatrix::zeros(n);
    for k in 0..n {
        let lambda = t[(k, k)];
        y[(k, k)] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                s += t[(i, j)] * y[(j, k)];
            }
            let mut den = t[(i, i)] - lambda;
            if den.norm() < f64::EPSILON * scale {
                den = C64::new(f64::EPSILON * scale, 0.0);
            }
            y[(i, k)] = -s / den;
        }
    }
    y
}

/// Full simple-spectrum decomposition of a square complex matrix.
///
/// Eigenvalues are ordered by ascending real part when every imaginary part
/// is below `1e-10·scale`, otherwise by the deterministic key (Re, Im).
/// Ordering off the real axis is a tie-free initial labeling only; label
/// continuation along paths is the transport module's job.
pub fn eig_simple(h: &CMatrix, gap_tol: f64) -> Result<SpectralFrame, LinalgError> {
    let n = h.dim();
    if n < 2 {
        return Err(LinalgError::DimensionMismatch { expected: 2, got: n });
    }
    let (t, q) = schur(h)?;
    let y = triangular_eigenvectors(&t);
    let v = q.matmul(&y);

    let mut eigenvalues: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
    let scale = h.max_abs().max(f64::MIN_POSITIVE);

    // deterministic initial labeling
    let all_real = eigenvalues.iter().all(|e| e.im.abs() <= 1.0e-10 * scale);
    let mut order: Vec<usize> = (0..n).collect();
    if all_real {
        order.sort_by(|&a, &b| eigenvalues[a].re.total_cmp(&eigenvalues[b].re));
    } else {
        order.sort_by(|&a, &b| {
            eigenvalues[a]
                .re
                .total_cmp(&eigenvalues[b].re)
                .then(eigenvalues[a].im.total_cmp(&eigenvalues[b].im))
        });
    }
    eigenvalues = order.iter().map(|&i| eigenvalues[i]).collect();

    let mut min_gap = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            min_gap = min_gap.min((eigenvalues[i] - eigenvalues[j]).norm());
        }
    }
    if min_gap < gap_tol {
        return Err(LinalgError::DegenerateSpectrum { min_gap, gap_tol });
    }

    // right eigenvectors: unit norm, first component of largest modulus made
    // real positive so the labeling is convention-free
    let mut right_vectors: Vec<Vec<C64>> = Vec::with_capacity(n);
    let mut vmat = CMatrix::zeros(n);
    for (col_new, &col_old) in order.iter().enumerate() {
        let mut vec: Vec<C64> = v.col(col_old);
        let norm: f64 = vec.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let pivot = vec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .map(|(i, _)| i)
            .unwrap();
        let phase = vec[pivot] / vec[pivot].norm();
        for c in vec.iter_mut() {
            *c /= phase * norm;
        }
        for (i, &c) in vec.iter().enumerate() {
            vmat[(i, col_new)] = c;
        }
        right_vectors.push(vec);
    }

    let vinv = match lu_factorize(&vmat) {
        Ok(lu) => lu.inverse(),
        Err(LinalgError::Singular { .. }) => {
            return Err(LinalgError::Defective { overlap: 0.0 })
        }
        Err(e) => return Err(e),
    };

    // left vectors: stored so that ⟨l_j|r_j⟩ = l_j† r_j = 1 exactly
    let mut left_vectors: Vec<Vec<C64>> = Vec::with_capacity(n);
    let mut projectors: Vec<CMatrix> = Vec::with_capacity(n);
    for j in 0..n {
        let w: Vec<C64> = (0..n).map(|k| vinv[(j, k)].conj()).collect();
        let wnorm: f64 = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        // for unit right vectors, ⟨l̂|r̂⟩ = 1/‖l‖; tiny overlap means defective
        if wnorm > 1.0 / BIORTHOGONALITY_FLOOR {
            return Err(LinalgError::Defective { overlap: 1.0 / wnorm });
        }
        projectors.push(CMatrix::outer(&right_vectors[j], &w));
        left_vectors.push(w);
    }

    Ok(SpectralFrame {
        point: C64::new(0.0, 0.0),
        eigenvalues,
        right_vectors,
        left_vectors,
        projectors,
        min_gap,
    })
}

/// First-order perturbation formula for the projector derivatives:
/// `P_j' = Σ_{k≠j} (P_k H' P_j + P_j H' P_k) / (e_j - e_k)`.
///
/// Satisfies `Σ_j P_j' = 0` and `P_j P_j' P_j = 0` identically.
pub fn projector_derivative(
    hprime: &CMatrix,
    frame: &SpectralFrame,
) -> Result<Vec<CMatrix>, LinalgError> {
    let n = frame.dim();
    if hprime.dim() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: hprime.dim(),
        });
    }
    // g[k][j] = l_k† H' r_j
    let mut g = CMatrix::zeros(n);
    for j in 0..n {
        let hrj = hprime.matvec(&frame.right_vectors[j]);
        for k in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for i in 0..n {
                s += frame.left_vectors[k][i].conj() * hrj[i];
            }
            g[(k, j)] = s;
        }
    }
    let mut derivs = Vec::with_capacity(n);
    for j in 0..n {
        let mut pj = CMatrix::zeros(n);
        for k in 0..n {
            if k == j {
                continue;
            }
            let denom = frame.eigenvalues[j] - frame.eigenvalues[k];
            // P_k H' P_j = r_k (l_k† H' r_j) l_j†
            let a = CMatrix::outer(&frame.right_vectors[k], &frame.left_vectors[j])
                .scale(g[(k, j)] / denom);
            let b = CMatrix::outer(&frame.right_vectors[j], &frame.left_vectors[k])
                .scale(g[(j, k)] / denom);
            pj = pj.add(&a).add(&b);
        }
        derivs.push(pj);
    }
    Ok(derivs)
}

/// Transport generator `K = Σ_j P_j' P_j`.
pub fn k_matrix(frame: &SpectralFrame, derivs: &[CMatrix]) -> Result<CMatrix, LinalgError> {
    let n = frame.dim();
    if derivs.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: derivs.len(),
        });
    }
    let mut k = CMatrix::zeros(n);
    for j in 0..n {
        if derivs[j].dim() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                got: derivs[j].dim(),
            });
        }
        k = k.add(&derivs[j].matmul(&frame.projectors[j]));
    }
    Ok(k)
}

/// Default spectral gap tolerance: below `1e-8·‖H‖` the projector formulas
/// lose all significant digits.
pub fn default_gap_tol(h: &CMatrix) -> f64 {
    1.0e-8 * h.max_abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn identity_is_degenerate() {
        let h = CMatrix::identity(2);
        match eig_simple(&h, default_gap_tol(&h)) {
            Err(LinalgError::DegenerateSpectrum { .. }) => {}
            other => panic!("expected DegenerateSpectrum, got {other:?}"),
        }
    }

    #[test]
    fn diagonal_two_level() {
        let h = CMatrix::diag(&[c(-1.0, 0.0), c(1.0, 0.0)]);
        let f = eig_simple(&h, 1e-8).unwrap();
        assert!((f.eigenvalues[0] - c(-1.0, 0.0)).norm() < 1e-14);
        assert!((f.eigenvalues[1] - c(1.0, 0.0)).norm() < 1e-14);
        assert!((f.projectors[0][(0, 0)] - c(1.0, 0.0)).norm() < 1e-14);
        assert!(f.projectors[0][(1, 1)].norm() < 1e-14);
        assert!((f.projectors[1][(1, 1)] - c(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn symmetric_offdiagonal_matches_charpoly_roots() {
        // H = [[0, .5], [.5, 0]]: characteristic polynomial λ² - 0.25
        let h = CMatrix::from_rows(&[vec![c(0.0, 0.0), c(0.5, 0.0)], vec![c(0.5, 0.0), c(0.0, 0.0)]]);
        let f = eig_simple(&h, 1e-8).unwrap();
        assert!((f.eigenvalues[0] - c(-0.5, 0.0)).norm() < 1e-14);
        assert!((f.eigenvalues[1] - c(0.5, 0.0)).norm() < 1e-14);
    }

    fn frame_residuals(h: &CMatrix, f: &SpectralFrame) -> (f64, f64, f64) {
        let n = h.dim();
        let mut psum = CMatrix::zeros(n);
        for p in &f.projectors {
            psum = psum.add(p);
        }
        let id_res = psum.sub(&CMatrix::identity(n)).norm_fro();
        let mut orth_res: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let pipj = f.projectors[i].matmul(&f.projectors[j]);
                let expect = if i == j {
                    f.projectors[i].clone()
                } else {
                    CMatrix::zeros(n)
                };
                orth_res = orth_res.max(pipj.sub(&expect).norm_fro());
            }
        }
        let rec_res = f.reconstruct().sub(h).norm_fro();
        (id_res, orth_res, rec_res)
    }

    #[test]
    fn random_frames_satisfy_invariants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut tested = 0;
        while tested < 100 {
            let n = rng.random_range(2..=6);
            let h = CMatrix::from_fn(n, |_, _| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let f = match eig_simple(&h, default_gap_tol(&h)) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let (id_res, orth_res, rec_res) = frame_residuals(&h, &f);
            assert!(id_res < 1e-10, "sum-of-projectors residual {id_res}");
            assert!(orth_res < 1e-10, "orthogonality residual {orth_res}");
            assert!(rec_res < 1e-9 * h.norm_fro().max(1.0), "reconstruction {rec_res}");
            tested += 1;
        }
    }

    #[test]
    fn projector_derivative_zero_for_constant() {
        let h = CMatrix::diag(&[c(-1.0, 0.0), c(1.0, 0.0)]);
        let f = eig_simple(&h, 1e-8).unwrap();
        let hp = CMatrix::zeros(2);
        let d = projector_derivative(&hp, &f).unwrap();
        for m in &d {
            assert!(m.norm_fro() < 1e-14);
        }
    }

    #[test]
    fn projector_derivative_closed_form_two_level() {
        // H = diag(-1, 1), H' = [[0,1],[1,0]] → P1' = [[0,-1/2],[-1/2,0]]
        let h = CMatrix::diag(&[c(-1.0, 0.0), c(1.0, 0.0)]);
        let f = eig_simple(&h, 1e-8).unwrap();
        let hp = CMatrix::from_rows(&[vec![c(0.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]]);
        let d = projector_derivative(&hp, &f).unwrap();
        let expect = CMatrix::from_rows(&[
            vec![c(0.0, 0.0), c(-0.5, 0.0)],
            vec![c(-0.5, 0.0), c(0.0, 0.0)],
        ]);
        assert!(d[0].sub(&expect).norm_fro() < 1e-12);
        assert!(d[1].add(&expect).norm_fro() < 1e-12);
    }

    #[test]
    fn projector_derivative_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tested = 0;
        while tested < 25 {
            let n = rng.random_range(2..=6);
            let h = CMatrix::from_fn(n, |_, _| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let hp = CMatrix::from_fn(n, |_, _| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let f0 = match eig_simple(&h, default_gap_tol(&h)) {
                Ok(f) if f.min_gap > 0.15 => f,
                _ => continue,
            };
            let d = projector_derivative(&hp, &f0).unwrap();

            let fd_step = 1e-6;
            let hph = h.add(&hp.scale(c(fd_step, 0.0)));
            let hmh = h.sub(&hp.scale(c(fd_step, 0.0)));
            let fp = eig_simple(&hph, 1e-12).unwrap();
            let fm = eig_simple(&hmh, 1e-12).unwrap();
            // match labels by eigenvalue continuity
            let match_labels = |f: &SpectralFrame| -> Vec<usize> {
                (0..n)
                    .map(|j| {
                        (0..n)
                            .min_by(|&a, &b| {
                                (f.eigenvalues[a] - f0.eigenvalues[j])
                                    .norm()
                                    .total_cmp(&(f.eigenvalues[b] - f0.eigenvalues[j]).norm())
                            })
                            .unwrap()
                    })
                    .collect()
            };
            let lp = match_labels(&fp);
            let lm = match_labels(&fm);
            let mut sum = CMatrix::zeros(n);
            for j in 0..n {
                let fd = fp.projectors[lp[j]]
                    .sub(&fm.projectors[lm[j]])
                    .scale(c(1.0 / (2.0 * fd_step), 0.0));
                let res = fd.sub(&d[j]).norm_fro();
                assert!(
                    res < 1e-6 * (1.0 + d[j].norm_fro()),
                    "fd mismatch {res} at n={n}"
                );
                sum = sum.add(&d[j]);
            }
            assert!(sum.norm_fro() < 1e-10, "Σ P_j' = 0 violated: {}", sum.norm_fro());
            tested += 1;
        }
    }

    #[test]
    fn k_matrix_zero_and_antisymmetry_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = CMatrix::diag(&[c(-1.0, 0.0), c(1.0, 0.0)]);
        let f = eig_simple(&h, 1e-8).unwrap();
        let zero = vec![CMatrix::zeros(2), CMatrix::zeros(2)];
        assert!(k_matrix(&f, &zero).unwrap().norm_fro() < 1e-15);

        // random 3×3: K = Σ P_j' P_j = -Σ P_j P_j'
        loop {
            let h = CMatrix::from_fn(3, |_, _| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let f = match eig_simple(&h, default_gap_tol(&h)) {
                Ok(f) if f.min_gap > 0.2 => f,
                _ => continue,
            };
            let hp = CMatrix::from_fn(3, |_, _| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let d = projector_derivative(&hp, &f).unwrap();
            let k = k_matrix(&f, &d).unwrap();
            let mut k2 = CMatrix::zeros(3);
            for j in 0..3 {
                k2 = k2.add(&f.projectors[j].matmul(&d[j]));
            }
            assert!(k.add(&k2).norm_fro() < 1e-10);
            // P_j K P_j = 0
            for j in 0..3 {
                let pkp = f.projectors[j].matmul(&k).matmul(&f.projectors[j]);
                assert!(pkp.norm_fro() < 1e-9);
            }
            break;
        }
    }

    #[test]
    fn charpoly_of_diagonal() {
        let h = CMatrix::diag(&[c(1.0, 0.0), c(2.0, 0.0)]);
        let p = h.charpoly();
        // λ² - 3λ + 2
        assert!((p[0] - c(1.0, 0.0)).norm() < 1e-14);
        assert!((p[1] - c(-3.0, 0.0)).norm() < 1e-14);
        assert!((p[2] - c(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn lu_solve_and_det() {
        let m = CMatrix::from_rows(&[
            vec![c(2.0, 0.0), c(1.0, 1.0), c(0.0, 0.0)],
            vec![c(0.0, -1.0), c(3.0, 0.0), c(1.0, 0.0)],
            vec![c(1.0, 0.0), c(0.0, 0.0), c(4.0, 2.0)],
        ]);
        let lu = lu_factorize(&m).unwrap();
        let rhs = vec![c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.5)];
        let x = lu.solve(&rhs);
        let back = m.matvec(&x);
        for (b, r) in back.iter().zip(&rhs) {
            assert!((b - r).norm() < 1e-12);
        }
        let inv = lu.inverse();
        let prod = m.matmul(&inv).sub(&CMatrix::identity(3)).norm_fro();
        assert!(prod < 1e-12);
    }
}
