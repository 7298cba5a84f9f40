//! Dense real-matrix utilities with explicit tolerances.
//!
//! Every exact algebraic relation used by the certificate machinery
//! (`⪯ 0`, `= 0`, `im A ⊆ im B`) is realized here with a quantified
//! numerical slack, so callers can record the achieved margin instead of
//! a bare boolean.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::fmt;

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;
/// Dense real column vector.
pub type Vec64 = DVector<f64>;

/// Numerical slacks realizing the exact relations of the certificate algebra.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerance {
    /// Eigenvalue slack for definiteness tests.
    pub definiteness_tol: f64,
    /// Singular-value cutoff, relative to the largest singular value.
    pub rank_tol: f64,
    /// Relative least-squares residual for factor solves and equalities.
    pub residual_tol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            definiteness_tol: 1e-9,
            rank_tol: 1e-10,
            residual_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatError {
    NonSquare { rows: usize, cols: usize },
    AsymmetricBeyondTol { deviation: f64 },
    RowMismatch { left: usize, right: usize },
    NonFinite,
}

impl fmt::Display for MatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatError::NonSquare { rows, cols } => {
                write!(f, "matrix is not square ({rows}x{cols})")
            }
            MatError::AsymmetricBeyondTol { deviation } => {
                write!(f, "matrix is asymmetric beyond tolerance (deviation {deviation:.3e})")
            }
            MatError::RowMismatch { left, right } => {
                write!(f, "row counts differ ({left} vs {right})")
            }
            MatError::NonFinite => write!(f, "matrix has non-finite entries"),
        }
    }
}

impl std::error::Error for MatError {}

/// Outcome of a least-squares factor solve `X G = Y`.
#[derive(Debug, Clone)]
pub enum Factor {
    Feasible { gain: Mat, residual: f64 },
    Infeasible { residual: f64 },
}

impl Factor {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Factor::Feasible { .. })
    }

    /// Unwraps the gain, panicking on the infeasible branch.
    pub fn gain(self) -> Mat {
        match self {
            Factor::Feasible { gain, .. } => gain,
            Factor::Infeasible { residual } => {
                panic!("factor solve infeasible (residual {residual:.3e})")
            }
        }
    }
}

/// Max-norm of the entries; 0 for empty matrices.
pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

pub fn is_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// `(S + Sᵀ)/2` after gating the asymmetry against `residual_tol`.
pub fn symmetric_part_checked(s: &Mat, tol: &Tolerance) -> Result<Mat, MatError> {
    if s.nrows() != s.ncols() {
        return Err(MatError::NonSquare { rows: s.nrows(), cols: s.ncols() });
    }
    if !is_finite(s) {
        return Err(MatError::NonFinite);
    }
    let deviation = max_abs(&(s - s.transpose()));
    if deviation > tol.residual_tol * (1.0 + max_abs(s)) {
        return Err(MatError::AsymmetricBeyondTol { deviation });
    }
    Ok((s + s.transpose()) * 0.5)
}

fn symmetric_eigenvalues(s: &Mat) -> Vec<f64> {
    if s.nrows() == 0 {
        return Vec::new();
    }
    SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect()
}

/// Largest eigenvalue of the symmetrized matrix; `-inf` for empty matrices.
pub fn max_eig_sym(s: &Mat, tol: &Tolerance) -> Result<f64, MatError> {
    let sym = symmetric_part_checked(s, tol)?;
    Ok(symmetric_eigenvalues(&sym)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest eigenvalue of the symmetrized matrix; `+inf` for empty matrices.
pub fn min_eig_sym(s: &Mat, tol: &Tolerance) -> Result<f64, MatError> {
    let sym = symmetric_part_checked(s, tol)?;
    Ok(symmetric_eigenvalues(&sym)
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

/// `S ⪯ 0` within the definiteness slack.
pub fn is_negative_semidefinite(s: &Mat, tol: &Tolerance) -> Result<bool, MatError> {
    Ok(max_eig_sym(s, tol)? <= tol.definiteness_tol)
}

/// `S ≻ 0`: smallest eigenvalue strictly beyond the definiteness slack.
pub fn is_positive_definite(s: &Mat, tol: &Tolerance) -> Result<bool, MatError> {
    Ok(min_eig_sym(s, tol)? > tol.definiteness_tol)
}

/// Thin SVD `A = U diag(σ) Vᵀ` by one-sided Jacobi rotations, with
/// `σ` descending. Returns `(U: m×k, σ: k, V: n×k)` for `k = min(m, n)`;
/// columns of `U` belonging to zero singular values are zero.
///
/// Jacobi is used instead of a bidiagonalization SVD because exactly
/// rank-deficient inputs (orthogonal projectors, kernel complements) arise
/// throughout the certificate algebra and must come out machine-accurate.
pub fn thin_svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (Mat::zeros(m, 0), Vec::new(), Mat::zeros(n, 0));
    }
    if m < n {
        let (u, sigma, v) = one_sided_jacobi(a.transpose());
        return (v, sigma, u);
    }
    one_sided_jacobi(a.clone())
}

fn one_sided_jacobi(mut w: Mat) -> (Mat, Vec<f64>, Mat) {
    let n = w.ncols();
    let mut v = Mat::identity(n, n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = w.column(p).dot(&w.column(p));
                let beta = w.column(q).dot(&w.column(q));
                let gamma = w.column(p).dot(&w.column(q));
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..w.nrows() {
                    let wip = w[(i, p)];
                    let wiq = w[(i, q)];
                    w[(i, p)] = c * wip - s * wiq;
                    w[(i, q)] = s * wip + c * wiq;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut u = Mat::zeros(w.nrows(), n);
    for j in 0..n {
        if sigma[j] > 0.0 {
            u.set_column(j, &(w.column(j) / sigma[j]));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let u_sorted = Mat::from_fn(w.nrows(), n, |i, j| u[(i, order[j])]);
    let v_sorted = Mat::from_fn(n, n, |i, j| v[(i, order[j])]);
    sigma = order.iter().map(|&i| sigma[i]).collect();
    (u_sorted, sigma, v_sorted)
}

/// Singular values in descending order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    thin_svd(a).1
}

/// Numerical rank with the cutoff relative to the largest singular value.
pub fn rank(a: &Mat, tol: &Tolerance) -> usize {
    let sv = singular_values(a);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax <= 0.0 {
        return 0;
    }
    let cutoff = tol.rank_tol * smax;
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Horizontal concatenation. All blocks must share a row count.
pub fn hstack(blocks: &[&Mat]) -> Mat {
    assert!(!blocks.is_empty());
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Vertical concatenation. All blocks must share a column count.
pub fn vstack(blocks: &[&Mat]) -> Mat {
    assert!(!blocks.is_empty());
    let cols = blocks[0].ncols();
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn ones_col(n: usize) -> Mat {
    Mat::from_element(n, 1, 1.0)
}

/// `im A ⊆ im B`, decided as rank([B]) = rank([B | A]).
pub fn image_subset(a: &Mat, b: &Mat, tol: &Tolerance) -> Result<bool, MatError> {
    if a.nrows() != b.nrows() {
        return Err(MatError::RowMismatch { left: a.nrows(), right: b.nrows() });
    }
    if a.ncols() == 0 {
        return Ok(true);
    }
    if b.ncols() == 0 {
        return Ok(rank(a, tol) == 0);
    }
    let joint = hstack(&[b, a]);
    Ok(rank(b, tol) == rank(&joint, tol))
}

/// Moore-Penrose pseudoinverse via SVD with the relative rank cutoff.
pub fn pseudoinverse(a: &Mat, tol: &Tolerance) -> Mat {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Mat::zeros(n, m);
    }
    let (u, sigma, v) = thin_svd(a);
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = tol.rank_tol * smax;
    let k = sigma.len();
    let mut sigma_inv = Mat::zeros(k, k);
    for (i, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            sigma_inv[(i, i)] = 1.0 / s;
        }
    }
    v * sigma_inv * u.transpose()
}

/// Minimum-norm `G` with `X G = Y`, or `Infeasible` when the relative
/// residual exceeds `residual_tol`.
pub fn solve_factor(y: &Mat, x: &Mat, tol: &Tolerance) -> Result<Factor, MatError> {
    if y.nrows() != x.nrows() {
        return Err(MatError::RowMismatch { left: x.nrows(), right: y.nrows() });
    }
    let gain = pseudoinverse(x, tol) * y;
    let residual = (x * &gain - y).norm();
    if residual <= tol.residual_tol * (1.0 + y.norm()) {
        Ok(Factor::Feasible { gain, residual })
    } else {
        Ok(Factor::Infeasible { residual })
    }
}

/// Orthonormal basis of the null space; an `n×0` matrix when trivial.
pub fn kernel_basis(a: &Mat, tol: &Tolerance) -> Mat {
    let n = a.ncols();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    if a.nrows() == 0 {
        return Mat::identity(n, n);
    }
    // Pad with zero rows so the thin SVD carries all n right singular
    // vectors; padding does not change the singular values.
    let padded = if a.nrows() < n {
        vstack(&[a, &Mat::zeros(n - a.nrows(), n)])
    } else {
        a.clone()
    };
    let (_, sigma, v) = thin_svd(&padded);
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = tol.rank_tol * smax;
    let cols: Vec<usize> = (0..n)
        .filter(|&i| smax <= 0.0 || sigma[i] <= cutoff)
        .collect();
    let mut out = Mat::zeros(n, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        out.set_column(j, &v.column(i).into_owned());
    }
    out
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &Mat) -> f64 {
    singular_values(a).into_iter().fold(0.0, f64::max)
}

/// Schur complement of the trailing `k×k` block: `A11 - A12 A22⁺ A21`.
pub fn schur_complement(s: &Mat, k: usize, tol: &Tolerance) -> Result<Mat, MatError> {
    if s.nrows() != s.ncols() {
        return Err(MatError::NonSquare { rows: s.nrows(), cols: s.ncols() });
    }
    let n = s.nrows();
    assert!(k <= n, "trailing block larger than matrix");
    let h = n - k;
    let a11 = s.view((0, 0), (h, h)).into_owned();
    let a12 = s.view((0, h), (h, k)).into_owned();
    let a21 = s.view((h, 0), (k, h)).into_owned();
    let a22 = s.view((h, h), (k, k)).into_owned();
    Ok(a11 - a12 * pseudoinverse(&a22, tol) * a21)
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn sqrt_spd(s: &Mat, tol: &Tolerance) -> Result<Mat, MatError> {
    let sym = symmetric_part_checked(s, tol)?;
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym);
    let mut d = Mat::zeros(eig.eigenvalues.len(), eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        d[(i, i)] = l.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Nested row-major `Vec<Vec<f64>>` view, the wire format for matrices.
pub fn mat_to_rows(a: &Mat) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

/// Builds a matrix from nested row-major arrays, validating shape and finiteness.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat, MatError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(MatError::RowMismatch { left: c, right: rows.iter().map(|r| r.len()).max().unwrap_or(0) });
    }
    let m = Mat::from_fn(r, c, |i, j| rows[i][j]);
    if !is_finite(&m) {
        return Err(MatError::NonFinite);
    }
    Ok(m)
}

/// serde adapter serializing matrices as nested row-major arrays.
pub mod mat_serde {
    use super::{mat_from_rows, mat_to_rows, Mat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        mat_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        mat_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    fn random_mat(rng: &mut StdRng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    // ── brute-force eigenvalue oracle (char poly + Sturm chain), n ≤ 4 ──

    fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    fn char_poly(s: &Mat) -> Vec<f64> {
        // det(S - λI), expanded over all permutations (n ≤ 4).
        let n = s.nrows();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut total = vec![0.0; n + 1];
        permute(&mut idx, 0, &mut |perm, sign| {
            let mut term = vec![sign];
            for (i, &j) in perm.iter().enumerate() {
                let entry = if i == j {
                    vec![s[(i, j)], -1.0]
                } else {
                    vec![s[(i, j)]]
                };
                term = poly_mul(&term, &entry);
            }
            for (k, v) in term.iter().enumerate() {
                total[k] += v;
            }
        });
        total
    }

    fn permute(idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize], f64)) {
        if k == idx.len() {
            let mut sign = 1.0;
            for i in 0..idx.len() {
                for j in (i + 1)..idx.len() {
                    if idx[i] > idx[j] {
                        sign = -sign;
                    }
                }
            }
            f(idx, sign);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute(idx, k + 1, f);
            idx.swap(k, i);
        }
    }

    fn poly_eval(p: &[f64], x: f64) -> f64 {
        p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    fn poly_deriv(p: &[f64]) -> Vec<f64> {
        p.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect()
    }

    fn poly_rem(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut r = a.to_vec();
        let db = b.len() - 1;
        let lead = b[db];
        while r.len() - 1 >= db && r.len() > 1 {
            let dr = r.len() - 1;
            let coef = r[dr] / lead;
            for i in 0..=db {
                r[dr - db + i] -= coef * b[i];
            }
            while r.len() > 1 && r.last().unwrap().abs() < 1e-12 {
                r.pop();
            }
            if r.len() - 1 < db {
                break;
            }
        }
        r
    }

    fn sturm_chain(p: &[f64]) -> Vec<Vec<f64>> {
        let mut chain = vec![p.to_vec(), poly_deriv(p)];
        loop {
            let last = &chain[chain.len() - 1];
            if last.len() <= 1 {
                break;
            }
            let prev = &chain[chain.len() - 2];
            let mut rem = poly_rem(prev, last);
            for c in rem.iter_mut() {
                *c = -*c;
            }
            if rem.iter().all(|c| c.abs() < 1e-12) {
                break;
            }
            chain.push(rem);
        }
        chain
    }

    fn sign_changes(chain: &[Vec<f64>], x: f64) -> usize {
        let mut count = 0;
        let mut prev = 0.0f64;
        for p in chain {
            let v = poly_eval(p, x);
            if v.abs() < 1e-14 {
                continue;
            }
            if prev != 0.0 && v.signum() != prev.signum() {
                count += 1;
            }
            prev = v;
        }
        count
    }

    /// Largest root of det(S−λI) by Sturm-count bisection.
    fn max_eig_oracle(s: &Mat) -> f64 {
        let p = char_poly(s);
        let chain = sturm_chain(&p);
        let bound = 1.0 + (0..s.nrows())
            .map(|i| (0..s.ncols()).map(|j| s[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut lo = -bound;
        let mut hi = bound;
        // roots in (t, bound] = V(t) - V(bound)
        let v_hi = sign_changes(&chain, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if sign_changes(&chain, mid) - v_hi > 0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn complete_laplacian(n: usize) -> Mat {
        Mat::from_fn(n, n, |i, j| if i == j { n as f64 - 1.0 } else { -1.0 })
    }

    #[test]
    fn nsd_negated_identity() {
        let s = -Mat::identity(2, 2);
        assert!(is_negative_semidefinite(&s, &tol()).unwrap());
    }

    #[test]
    fn nsd_swap_matrix_fails() {
        // eigenvalues ±1 by hand
        let s = mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(!is_negative_semidefinite(&s, &tol()).unwrap());
        assert_abs_diff_eq!(max_eig_sym(&s, &tol()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nsd_complete_graph_laplacian() {
        let l = complete_laplacian(3);
        let s = -(&l + l.transpose());
        assert!(is_negative_semidefinite(&s, &tol()).unwrap());
    }

    #[test]
    fn nsd_rejects_nonsquare_and_asymmetric() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(
            is_negative_semidefinite(&a, &tol()),
            Err(MatError::NonSquare { .. })
        ));
        let b = mat_from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            is_negative_semidefinite(&b, &tol()),
            Err(MatError::AsymmetricBeyondTol { .. })
        ));
    }

    #[test]
    fn pd_examples() {
        assert!(is_positive_definite(&Mat::identity(3, 3), &tol()).unwrap());
        assert!(!is_positive_definite(&Mat::zeros(2, 2), &tol()).unwrap());
    }

    #[test]
    fn nsd_agrees_with_char_poly_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.random_range(1..=4);
            let a = random_mat(&mut rng, n, n);
            let s = (&a + a.transpose()) * 0.5;
            let expected = max_eig_oracle(&s) <= tol().definiteness_tol;
            assert_eq!(is_negative_semidefinite(&s, &tol()).unwrap(), expected);
        }
    }

    #[test]
    fn image_subset_examples() {
        let i2 = Mat::identity(2, 2);
        assert!(image_subset(&i2, &i2, &tol()).unwrap());
        // rank jumps 1 -> 2
        let a = mat_from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let b = mat_from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert!(!image_subset(&a, &b, &tol()).unwrap());
        let i3 = Mat::identity(3, 3);
        assert!(image_subset(&i3, &i3, &tol()).unwrap());
        assert!(matches!(
            image_subset(&i2, &i3, &tol()),
            Err(MatError::RowMismatch { .. })
        ));
    }

    #[test]
    fn solve_factor_examples() {
        let i2 = Mat::identity(2, 2);
        let f = solve_factor(&i2, &i2, &tol()).unwrap();
        match f {
            Factor::Feasible { gain, .. } => assert!((gain - &i2).norm() < 1e-12),
            _ => panic!("expected feasible"),
        }

        // A = 0, P = ones column, X = [P | -B] with B = I: minimum-norm G = 0
        let p = ones_col(3);
        let x = hstack(&[&p, &(-Mat::identity(3, 3))]);
        let y = Mat::zeros(3, 1);
        match solve_factor(&y, &x, &tol()).unwrap() {
            Factor::Feasible { gain, .. } => {
                assert_eq!(gain.shape(), (4, 1));
                assert!(max_abs(&gain) < 1e-12);
            }
            _ => panic!("expected feasible"),
        }

        let y = mat_from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let x = mat_from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert!(matches!(
            solve_factor(&y, &x, &tol()).unwrap(),
            Factor::Infeasible { .. }
        ));
    }

    #[test]
    fn solve_factor_agrees_with_image_subset() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..=5);
            let cx = rng.random_range(1..=4);
            let cy = rng.random_range(1..=3);
            let x = if rng.random_bool(0.5) {
                random_mat(&mut rng, n, cx)
            } else {
                // low-rank X so infeasibility actually occurs
                random_mat(&mut rng, n, 1) * random_mat(&mut rng, 1, cx)
            };
            let y = if rng.random_bool(0.5) {
                random_mat(&mut rng, n, cy)
            } else {
                &x * random_mat(&mut rng, cx, cy)
            };
            let feasible = solve_factor(&y, &x, &tol()).unwrap().is_feasible();
            assert_eq!(feasible, image_subset(&y, &x, &tol()).unwrap());
        }
    }

    #[test]
    fn image_subset_agrees_with_columnwise_solve() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.random_range(1..=5);
            let bc = rng.random_range(1..=4);
            let b = random_mat(&mut rng, n, bc);
            let a = if rng.random_bool(0.5) {
                random_mat(&mut rng, n, 2)
            } else {
                &b * random_mat(&mut rng, b.ncols(), 2)
            };
            let by_rank = image_subset(&a, &b, &tol()).unwrap();
            let by_cols = (0..a.ncols()).all(|j| {
                let col = a.column(j).into_owned();
                let colm = Mat::from_column_slice(n, 1, col.as_slice());
                solve_factor(&colm, &b, &tol()).unwrap().is_feasible()
            });
            assert_eq!(by_rank, by_cols);
        }
    }

    #[test]
    fn pseudoinverse_examples() {
        let i3 = Mat::identity(3, 3);
        assert!((pseudoinverse(&i3, &tol()) - &i3).norm() < 1e-12);

        // rank-1 column of ones: pinv = (1/3) * row of ones
        let ones = ones_col(3);
        let pinv = pseudoinverse(&ones, &tol());
        assert_eq!(pinv.shape(), (1, 3));
        for j in 0..3 {
            assert_abs_diff_eq!(pinv[(0, j)], 1.0 / 3.0, epsilon = 1e-12);
        }

        let z = Mat::zeros(2, 2);
        assert!(max_abs(&pseudoinverse(&z, &tol())) == 0.0);
    }

    #[test]
    fn thin_svd_accurate_on_rank_deficient_input() {
        let mut rng = StdRng::seed_from_u64(29);
        for trial in 0..200 {
            let n = rng.random_range(2..=6);
            let a = match trial % 3 {
                0 => {
                    let rows = rng.random_range(1..=6);
                    random_mat(&mut rng, rows, n)
                }
                1 => {
                    // exact projector complement, rank n - k
                    let k = rng.random_range(1..n);
                    let p = random_mat(&mut rng, n, k);
                    Mat::identity(n, n) - &p * pseudoinverse(&p, &tol())
                }
                _ => random_mat(&mut rng, n, 1) * random_mat(&mut rng, 1, n),
            };
            let (u, sigma, v) = thin_svd(&a);
            let mut d = Mat::zeros(sigma.len(), sigma.len());
            for (i, &s) in sigma.iter().enumerate() {
                d[(i, i)] = s;
            }
            let recon = (&u * d * v.transpose() - &a).norm();
            assert!(recon <= 1e-12 * (1.0 + a.norm()), "trial {trial}: reconstruction {recon}");
            assert!(sigma.windows(2).all(|w| w[0] >= w[1]), "descending order");
            // V orthonormal
            let vtv = v.transpose() * &v;
            assert!((vtv - Mat::identity(sigma.len().min(a.ncols()), sigma.len().min(a.ncols()))).norm() < 1e-12);
        }
    }

    #[test]
    fn pseudoinverse_exact_on_projectors() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.random_range(2..=6);
            let k = rng.random_range(1..n);
            let p = random_mat(&mut rng, n, k);
            let proj = Mat::identity(n, n) - &p * pseudoinverse(&p, &tol());
            // a projector is its own pseudoinverse
            assert!((pseudoinverse(&proj, &tol()) - &proj).norm() < 1e-11);
        }
    }

    #[test]
    fn pseudoinverse_penrose_identity() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..200 {
            let r = rng.random_range(1..=8);
            let c = rng.random_range(1..=8);
            let a = random_mat(&mut rng, r, c);
            let p = pseudoinverse(&a, &tol());
            let res = (&a * &p * &a - &a).norm();
            assert!(res <= tol().residual_tol * (1.0 + a.norm()), "residual {res}");
        }
    }

    #[test]
    fn kernel_basis_examples() {
        // A = [1, 0]: kernel spanned by e2
        let a = mat_from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = kernel_basis(&a, &tol());
        assert_eq!(k.shape(), (2, 1));
        assert_abs_diff_eq!(k[(0, 0)].abs(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k[(1, 0)].abs(), 1.0, epsilon = 1e-12);

        let k = kernel_basis(&Mat::identity(2, 2), &tol());
        assert_eq!(k.shape(), (2, 0));

        let k = kernel_basis(&Mat::zeros(1, 2), &tol());
        assert_eq!(k.shape(), (2, 2));
        // orthonormal
        assert!((k.transpose() * &k - Mat::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn kernel_basis_is_orthonormal_null_basis() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..100 {
            let r = rng.random_range(1..=5);
            let c = rng.random_range(1..=6);
            let a = random_mat(&mut rng, r, 1) * random_mat(&mut rng, 1, c);
            let k = kernel_basis(&a, &tol());
            assert_eq!(k.ncols(), c - rank(&a, &tol()));
            assert!((&a * &k).norm() < 1e-9 * (1.0 + a.norm()));
            assert!((k.transpose() * &k - Mat::identity(k.ncols(), k.ncols())).norm() < 1e-9);
        }
    }

    #[test]
    fn schur_complement_of_scalar_block() {
        let s = mat_from_rows(&[
            vec![2.0, 1.0],
            vec![1.0, -2.0],
        ])
        .unwrap();
        let sc = schur_complement(&s, 1, &tol()).unwrap();
        assert_abs_diff_eq!(sc[(0, 0)], 2.0 + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mat_serde_round_trip() {
        let a = mat_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let rows = mat_to_rows(&a);
        let b = mat_from_rows(&rows).unwrap();
        assert_eq!(a, b);
    }
}
