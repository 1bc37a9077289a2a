//! Small dense linear-algebra helpers shared by the model, EVE and simulation code.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Relative singular-value cutoff used for every rank decision in the crate.
pub const RANK_CUTOFF: f64 = 1e-12;

/// SVD iterated to a tighter tolerance than nalgebra's default, which
/// deflates early and loses accuracy in the small singular vectors. The tight
/// iteration can stall on rank-deficient input, so its factors are checked
/// against `m` and the default tolerance is used when they do not reproduce it.
pub fn svd(m: &DMatrix<f64>) -> SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let reproduces = |s: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>| {
        s.singular_values.iter().all(|v| v.is_finite())
            && s.clone().recompose().is_ok_and(|r| (r - m).amax() <= 1e-12 * scale)
    };
    m.clone()
        .try_svd(true, true, 1e-18, 100_000)
        .filter(|s| reproduces(s))
        .unwrap_or_else(|| m.clone().svd(true, true))
}

/// Moore–Penrose pseudoinverse via SVD, discarding singular values below
/// `RANK_CUTOFF * s_max`. Returns the pseudoinverse and the numerical rank.
pub fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (DMatrix::zeros(c, r), 0);
    }
    let svd = svd(m);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = RANK_CUTOFF * s_max;
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            let ui = u.column(i);
            let vi = vt.row(i);
            out += (vi.transpose() * ui.transpose()) / s;
        }
    }
    (out, rank)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = svd(m).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().cloned().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Applies `f` to the spectrum of a symmetric matrix: `V f(Λ) Vᵀ`.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    v * d * v.transpose()
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues in
/// `[-clamp, 0)` are treated as roundoff and set to zero; anything more
/// negative yields `None`.
pub fn sym_sqrt_psd(m: &DMatrix<f64>, clamp: f64) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| l < -clamp) {
        return None;
    }
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Some(v * d * v.transpose())
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `min ‖Ax − b‖` for a full-column-rank `A` through SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (p, _) = pinv(a);
    p * b
}

/// Condition number `s_max / s_min` (infinite when `s_min == 0`).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Builds a matrix from row vectors; all rows must share a length.
pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// Inverse of [`from_rows`].
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_tall_full_rank_matches_normal_equations() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.25]);
        let (p, rank) = pinv(&m);
        assert_eq!(rank, 2);
        let normal = (m.transpose() * &m).try_inverse().unwrap() * m.transpose();
        assert!((p - normal).abs().max() < 1e-12);
    }

    #[test]
    fn pinv_drops_zero_column() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let (p, rank) = pinv(&m);
        assert_eq!(rank, 1);
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = sym_sqrt_psd(&m, 1e-12).unwrap();
        assert!((&s * &s - m).abs().max() < 1e-12);
        let neg = DMatrix::from_row_slice(1, 1, &[-1e-3]);
        assert!(sym_sqrt_psd(&neg, 1e-12).is_none());
    }
}
