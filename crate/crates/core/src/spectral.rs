//! Dense spectral computations on layer weight matrices.
//!
//! Every quantity here is derived from the eigensystem of the Gram matrix
//! `WᵀW`: its eigenvalues are the squared singular values of `W` and its
//! eigenvectors are the right singular vectors.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Iteration budget handed to the symmetric eigen-solver.
const EIGEN_MAX_ITER: usize = 10_000;

/// Default relative cut used to select the positive part of a spectrum.
pub const DEFAULT_POSITIVE_TOL: f64 = 1e-12;

/// Relative gap below which two eigenvalues are considered repeated.
pub const SIMPLE_GAP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("weight matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("symmetric eigen-solver did not converge within {0} iterations")]
    ConvergenceFailure(usize),
    #[error("eigenvalue {index} is not simple (relative gap {gap:e})")]
    DegenerateEigenvalue { index: usize, gap: f64 },
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("matrix has an empty dimension ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },
    #[error("expected {expected} values for a {rows}x{cols} matrix, got {actual}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("eigenvalue index {index} out of range for spectrum of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Dense weight matrix of one fully-connected layer.
///
/// Layer `l` of a network with sizes `[n0, .., nL]` has shape
/// `n_{l-1} x n_l`, so a batch of row vectors is mapped with `X * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    /// Builds a matrix from row-major values, rejecting wrong lengths and non-finite entries.
    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self, SpectralError> {
        if rows == 0 || cols == 0 {
            return Err(SpectralError::Empty { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(SpectralError::ShapeMismatch {
                rows,
                cols,
                expected: rows * cols,
                actual: values.len(),
            });
        }
        let w = WeightMatrix(DMatrix::from_row_slice(rows, cols, values));
        w.check_finite()?;
        Ok(w)
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        WeightMatrix(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        WeightMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        WeightMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        WeightMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn as_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row_major_values(&self) -> Vec<f64> {
        let (rows, cols) = self.shape();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        WeightMatrix(&self.0 * c)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<(), SpectralError> {
        let rows = self.rows();
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            // column-major storage
            Some(idx) => Err(SpectralError::NonFinite {
                row: idx % rows,
                col: idx / rows,
            }),
        }
    }
}

impl From<DMatrix<f64>> for WeightMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        WeightMatrix(m)
    }
}

/// Eigensystem of `WᵀW`, eigenvalues descending.
///
/// `right_vectors` is `cols x m` where `m = min(rows, cols)`; column `j` is the
/// unit right singular vector paired with `eigenvalues[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub right_vectors: DMatrix<f64>,
    pub frobenius_sq: f64,
    pub lambda_max: f64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn vector(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.right_vectors.column(j)
    }

    /// `‖W‖_F² / ‖W‖_2²` read off the spectrum.
    pub fn stable_rank(&self) -> Result<f64, SpectralError> {
        if self.lambda_max <= 0.0 {
            return Err(SpectralError::ZeroMatrix);
        }
        Ok(self.frobenius_sq / self.lambda_max)
    }

    /// Relative gap separating eigenvalue `j` from its neighbours.
    pub fn relative_gap(&self, j: usize) -> f64 {
        if self.lambda_max <= 0.0 {
            return 0.0;
        }
        let ev = &self.eigenvalues;
        let mut gap = f64::INFINITY;
        if j > 0 {
            gap = gap.min(ev[j - 1] - ev[j]);
        }
        if j + 1 < ev.len() {
            gap = gap.min(ev[j] - ev[j + 1]);
        }
        gap / self.lambda_max
    }

    /// `true` when eigenvalues `j-1` and `j` are separated (or `j` is an end).
    pub fn boundary_is_simple(&self, j: usize) -> bool {
        if j == 0 || j >= self.eigenvalues.len() {
            return true;
        }
        self.lambda_max > 0.0
            && (self.eigenvalues[j - 1] - self.eigenvalues[j]) > SIMPLE_GAP_TOL * self.lambda_max
    }
}

/// Full eigensystem of `WᵀW`.
///
/// The solver runs on the smaller of `WᵀW` and `WWᵀ`; in the latter case the
/// left vectors `u_j` are mapped to right vectors through `v_j ∝ Wᵀu_j`.
pub fn gram_spectrum(w: &WeightMatrix) -> Result<Spectrum, SpectralError> {
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return Err(SpectralError::Empty { rows, cols });
    }
    w.check_finite()?;
    let m = w.as_matrix();
    let use_right = cols <= rows;
    let gram = if use_right {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let eig = gram
        .try_symmetric_eigen(f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(SpectralError::ConvergenceFailure(EIGEN_MAX_ITER))?;

    let dim = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..dim).collect();
    let clamped: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    order.sort_by(|&a, &b| clamped[b].total_cmp(&clamped[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| clamped[i]).collect();
    let lambda_max = eigenvalues[0];

    let mut right_vectors = DMatrix::zeros(cols, dim);
    if use_right {
        for (j, &src) in order.iter().enumerate() {
            right_vectors.set_column(j, &eig.eigenvectors.column(src));
        }
    } else {
        let sigma_max = lambda_max.sqrt();
        let mut filled = 0;
        for (j, &src) in order.iter().enumerate() {
            let mut v = m.tr_mul(&eig.eigenvectors.column(src));
            let norm = v.norm();
            if norm <= 1e-10 * sigma_max || norm == 0.0 {
                break;
            }
            v /= norm;
            orthogonalize_against(&mut v, &right_vectors, j);
            right_vectors.set_column(j, &v);
            filled = j + 1;
        }
        // null-space directions: complete with Gram-Schmidt over the standard basis
        complete_basis(&mut right_vectors, filled);
    }
    for j in 0..dim {
        fix_sign(&mut right_vectors, j);
    }

    let frobenius_sq = eigenvalues.iter().sum();
    Ok(Spectrum {
        eigenvalues,
        right_vectors,
        frobenius_sq,
        lambda_max,
    })
}

fn orthogonalize_against(v: &mut DVector<f64>, basis: &DMatrix<f64>, count: usize) {
    for _ in 0..2 {
        for k in 0..count {
            let b = basis.column(k);
            let proj = b.dot(v);
            v.axpy(-proj, &b, 1.0);
        }
    }
    let norm = v.norm();
    if norm > 0.0 {
        *v /= norm;
    }
}

fn complete_basis(basis: &mut DMatrix<f64>, mut filled: usize) {
    let n = basis.nrows();
    let want = basis.ncols();
    let mut e = 0;
    while filled < want && e < n {
        let mut v = DVector::zeros(n);
        v[e] = 1.0;
        orthogonalize_against(&mut v, basis, filled);
        // reject basis vectors already (nearly) spanned
        if (v.norm() - 1.0).abs() < 1e-6 && basis.columns(0, filled).tr_mul(&v).amax() < 1e-8 {
            basis.set_column(filled, &v);
            filled += 1;
        }
        e += 1;
    }
}

fn fix_sign(vectors: &mut DMatrix<f64>, j: usize) {
    let mut col = vectors.column_mut(j);
    if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenvalues strictly above `rel_tol * lambda_max`, descending.
pub fn positive_spectrum(s: &Spectrum, rel_tol: f64) -> Vec<f64> {
    if s.lambda_max <= 0.0 {
        return Vec::new();
    }
    let cut = rel_tol * s.lambda_max;
    s.eigenvalues.iter().copied().filter(|&l| l > cut).collect()
}

/// Gradient of eigenvalue `j` of `WᵀW` with respect to `W`: `2 W v_j v_jᵀ`.
pub fn eigenvalue_gradient(
    w: &WeightMatrix,
    s: &Spectrum,
    j: usize,
) -> Result<WeightMatrix, SpectralError> {
    if j >= s.len() {
        return Err(SpectralError::IndexOutOfRange {
            index: j,
            len: s.len(),
        });
    }
    let gap = s.relative_gap(j);
    if !(gap > SIMPLE_GAP_TOL) {
        return Err(SpectralError::DegenerateEigenvalue { index: j, gap });
    }
    let v = s.vector(j);
    let wv = w.as_matrix() * v;
    Ok(WeightMatrix((wv * v.transpose()) * 2.0))
}

/// Stable rank `‖W‖_F² / ‖W‖_2²`.
pub fn stable_rank(w: &WeightMatrix) -> Result<f64, SpectralError> {
    if w.as_matrix().iter().all(|&v| v == 0.0) {
        return Err(SpectralError::ZeroMatrix);
    }
    gram_spectrum(w)?.stable_rank()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> WeightMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightMatrix::from_matrix(DMatrix::from_fn(rows, cols, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    /// Power iteration with Hotelling deflation on the smaller Gram matrix.
    fn power_iteration_eigenvalues(w: &DMatrix<f64>) -> Vec<f64> {
        let mut g = if w.ncols() <= w.nrows() {
            w.transpose() * w
        } else {
            w * w.transpose()
        };
        let n = g.nrows();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7 + k * 3) % 11) as f64 * 0.1);
            v /= v.norm();
            let mut lambda = 0.0;
            for _ in 0..200_000 {
                let mut next = &g * &v;
                let rq = v.dot(&next);
                let norm = next.norm();
                if norm == 0.0 {
                    lambda = 0.0;
                    break;
                }
                next /= norm;
                let done = (rq - lambda).abs() <= 1e-16 * rq.abs().max(1e-300)
                    && (&next - &v).norm() < 1e-12;
                v = next;
                lambda = rq;
                if done {
                    break;
                }
            }
            out.push(lambda);
            g -= (&v * v.transpose()) * lambda;
        }
        out
    }

    #[test]
    fn diagonal_spectrum() {
        let w = WeightMatrix::from_diagonal(&[2.0, 1.0]);
        let s = gram_spectrum(&w).unwrap();
        assert_eq!(s.eigenvalues, vec![4.0, 1.0]);
        assert!((s.vector(0)[0] - 1.0).abs() < 1e-15 && s.vector(0)[1].abs() < 1e-15);
        assert!((s.vector(1)[1] - 1.0).abs() < 1e-15 && s.vector(1)[0].abs() < 1e-15);
    }

    #[test]
    fn identity_spectrum() {
        let s = gram_spectrum(&WeightMatrix::identity(3)).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert_eq!(s.frobenius_sq, 3.0);
        assert_eq!(s.lambda_max, 1.0);
    }

    #[test]
    fn matches_power_iteration_oracle() {
        for (rows, cols) in [(20, 30), (30, 20)] {
            let w = random_matrix(rows, cols, 7);
            let s = gram_spectrum(&w).unwrap();
            let oracle = power_iteration_eigenvalues(w.as_matrix());
            assert_eq!(s.len(), 20);
            for (a, b) in s.eigenvalues.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn wide_matrix_vectors_are_right_singular_vectors() {
        let w = random_matrix(6, 9, 3);
        let s = gram_spectrum(&w).unwrap();
        let gram = w.as_matrix().tr_mul(w.as_matrix());
        for j in 0..s.len() {
            let v = s.vector(j);
            assert!((v.norm() - 1.0).abs() < 1e-10);
            let resid = &gram * v - v * s.eigenvalues[j];
            assert!(resid.norm() < 1e-9 * s.lambda_max);
        }
    }

    #[test]
    fn wide_rank_deficient_vectors_stay_unit() {
        // 4x6 with rank 2
        let u = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let v = DMatrix::from_fn(2, 6, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let w = WeightMatrix::from_matrix(u * v);
        let s = gram_spectrum(&w).unwrap();
        assert_eq!(s.len(), 4);
        let vt_v = s.right_vectors.tr_mul(&s.right_vectors);
        assert!((vt_v - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn sign_convention_first_nonzero_positive() {
        let w = random_matrix(7, 5, 11);
        let s = gram_spectrum(&w).unwrap();
        let neg = w.scaled(-1.0);
        let s2 = gram_spectrum(&neg).unwrap();
        for j in 0..s.len() {
            let first = s.vector(j).iter().copied().find(|x| x.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
            assert!((s.vector(j) - s2.vector(j)).amax() < 1e-10);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut w = WeightMatrix::identity(2);
        w.as_matrix_mut()[(1, 0)] = f64::NAN;
        assert_eq!(
            gram_spectrum(&w),
            Err(SpectralError::NonFinite { row: 1, col: 0 })
        );
        assert!(WeightMatrix::from_row_major(1, 2, &[1.0, f64::INFINITY]).is_err());
        assert!(matches!(
            WeightMatrix::from_row_major(2, 2, &[1.0]),
            Err(SpectralError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn positive_spectrum_cases() {
        let s = gram_spectrum(&WeightMatrix::from_diagonal(&[2.0, 1.0, 0.0])).unwrap();
        assert_eq!(positive_spectrum(&s, DEFAULT_POSITIVE_TOL), vec![4.0, 1.0]);
        let s = gram_spectrum(&WeightMatrix::identity(3)).unwrap();
        assert_eq!(positive_spectrum(&s, DEFAULT_POSITIVE_TOL), vec![1.0, 1.0, 1.0]);
        let s = gram_spectrum(&WeightMatrix::zeros(3, 2)).unwrap();
        assert!(positive_spectrum(&s, DEFAULT_POSITIVE_TOL).is_empty());
    }

    #[test]
    fn rank_one_outer_product_keeps_one_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = WeightMatrix::from_matrix(&u * v.transpose());
        let s = gram_spectrum(&w).unwrap();
        assert_eq!(positive_spectrum(&s, DEFAULT_POSITIVE_TOL).len(), 1);
        assert!((stable_rank(&w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_gradient_diagonal() {
        let w = WeightMatrix::from_diagonal(&[2.0, 1.0]);
        let s = gram_spectrum(&w).unwrap();
        let g = eigenvalue_gradient(&w, &s, 0).unwrap();
        assert_eq!(g.row_major_values(), vec![4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn eigenvalue_gradient_matches_finite_differences() {
        let w = random_matrix(8, 5, 21);
        let s = gram_spectrum(&w).unwrap();
        let h = 1e-5;
        for j in 0..s.len() {
            let g = eigenvalue_gradient(&w, &s, j).unwrap();
            let mut fd = DMatrix::zeros(8, 5);
            for r in 0..8 {
                for c in 0..5 {
                    let mut plus = w.clone();
                    plus.as_matrix_mut()[(r, c)] += h;
                    let mut minus = w.clone();
                    minus.as_matrix_mut()[(r, c)] -= h;
                    let lp = gram_spectrum(&plus).unwrap().eigenvalues[j];
                    let lm = gram_spectrum(&minus).unwrap().eigenvalues[j];
                    fd[(r, c)] = (lp - lm) / (2.0 * h);
                }
            }
            let err = (g.as_matrix() - &fd).amax() / fd.amax();
            assert!(err <= 1e-4, "eigenvalue {j}: rel err {err:e}");
        }
    }

    #[test]
    fn eigenvalue_gradient_is_homogeneous() {
        let w = random_matrix(6, 4, 2);
        let c = 3.5;
        let cw = w.scaled(c);
        let (s, cs) = (gram_spectrum(&w).unwrap(), gram_spectrum(&cw).unwrap());
        for j in 0..4 {
            let g = eigenvalue_gradient(&w, &s, j).unwrap();
            let cg = eigenvalue_gradient(&cw, &cs, j).unwrap();
            assert!((cg.as_matrix() - g.as_matrix() * c).amax() < 1e-10 * cg.as_matrix().amax());
        }
    }

    #[test]
    fn eigenvalue_gradient_rejects_repeated() {
        let w = WeightMatrix::identity(3);
        let s = gram_spectrum(&w).unwrap();
        assert!(matches!(
            eigenvalue_gradient(&w, &s, 0),
            Err(SpectralError::DegenerateEigenvalue { index: 0, .. })
        ));
        assert!(matches!(
            eigenvalue_gradient(&w, &s, 3),
            Err(SpectralError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn stable_rank_examples() {
        assert_eq!(stable_rank(&WeightMatrix::identity(5)).unwrap(), 5.0);
        assert_eq!(stable_rank(&WeightMatrix::from_diagonal(&[2.0, 1.0])).unwrap(), 1.25);
        let uv = WeightMatrix::from_matrix(
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0])
                * DMatrix::from_row_slice(1, 4, &[0.5, 1.0, 3.0, -2.0]),
        );
        assert!((stable_rank(&uv).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(stable_rank(&WeightMatrix::zeros(2, 3)), Err(SpectralError::ZeroMatrix));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn stable_rank_bounds_and_scale_invariance(
            rows in 1usize..10, cols in 1usize..10, seed in any::<u64>(), c in 0.01f64..100.0
        ) {
            let w = random_matrix(rows, cols, seed);
            let sr = stable_rank(&w).unwrap();
            prop_assert!(sr >= 1.0 && sr <= rows.min(cols) as f64);
            let sr_c = stable_rank(&w.scaled(-c)).unwrap();
            prop_assert!((sr - sr_c).abs() <= 1e-12 * sr);
        }

        #[test]
        fn trace_identity(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            let w = random_matrix(rows, cols, seed);
            let s = gram_spectrum(&w).unwrap();
            let direct = w.frobenius_sq();
            prop_assert!((s.frobenius_sq - direct).abs() <= 1e-8 * direct);
            prop_assert_eq!(s.len(), rows.min(cols));
            prop_assert!(s.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(s.eigenvalues.iter().all(|&l| l >= 0.0));
            for j in 0..s.len() {
                prop_assert!((s.vector(j).norm() - 1.0).abs() < 1e-10);
            }
        }
    }
}
