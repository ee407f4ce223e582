//! Dense linear-algebra helpers shared by the linear and kernel modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn sorted_svd(a: &DMatrix<f64>) -> SortedSvd {
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let k = s.len();
    let mut su = DMatrix::zeros(u.nrows(), k);
    let mut sv = DMatrix::zeros(k, v_t.ncols());
    let mut ss = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_row(dst, &v_t.row(src));
        ss[dst] = s[src];
    }
    SortedSvd {
        u: su,
        singular_values: ss,
        v_t: sv,
    }
}

/// Conventional rank cutoff `max(rows, cols) * eps * s_max`.
pub fn default_cutoff(rows: usize, cols: usize, s_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * s_max
}

impl SortedSvd {
    /// Number of singular values strictly above `cutoff`.
    pub fn rank_above(&self, cutoff: f64) -> usize {
        self.singular_values.iter().take_while(|&&s| s > cutoff).count()
    }

    /// `A⁺ b` keeping only the leading `rank` singular triplets.
    pub fn pinv_apply(&self, b: &DVector<f64>, rank: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.v_t.ncols());
        for k in 0..rank {
            let coef = self.u.column(k).dot(b) / self.singular_values[k];
            out.axpy(coef, &self.v_t.row(k).transpose(), 1.0);
        }
        out
    }

    /// Orthogonal projector onto the span of the leading `rank` right singular vectors.
    pub fn row_projector(&self, rank: usize) -> DMatrix<f64> {
        let v = self.v_t.rows(0, rank);
        v.transpose() * v
    }

    /// Rank-`rank` truncation `U_k S_k V_kᵀ`.
    pub fn truncated(&self, rank: usize) -> DMatrix<f64> {
        let mut us = self.u.columns(0, rank).into_owned();
        for k in 0..rank {
            us.column_mut(k).scale_mut(self.singular_values[k]);
        }
        us * self.v_t.rows(0, rank)
    }
}

/// Minimum-norm least-squares solution `A⁺ b` with the default rank cutoff.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = sorted_svd(a);
    let s_max = svd.singular_values.get(0).copied().unwrap_or(0.0);
    let rank = svd.rank_above(default_cutoff(a.nrows(), a.ncols(), s_max));
    svd.pinv_apply(b, rank)
}

/// Pseudo-inverse of a symmetric PSD matrix restricted to eigenvalues above
/// `rel_cutoff * λ_max`. Returns the inverse and the retained rank.
pub fn sym_pinv(a: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(a.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let mut rank = 0;
    if lmax <= 0.0 {
        return (inv, 0);
    }
    let cut = rel_cutoff * lmax;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut {
            let z = eig.eigenvectors.column(k);
            inv.ger(1.0 / lam, &z, &z, 1.0);
            rank += 1;
        }
    }
    (inv, rank)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sample_std(xs: &[f64]) -> f64 {
    let (_, se) = mean_and_stderr(xs);
    se * (xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pinv_of_identity_returns_rhs() {
        let a = DMatrix::<f64>::identity(4, 4);
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_relative_eq!(pinv_solve(&a, &b), b, epsilon = 1e-14);
    }

    #[test]
    fn wide_system_gives_minimum_norm() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DVector::from_vec(vec![2.0]);
        let x = pinv_solve(&a, &b);
        assert_relative_eq!(x, DVector::from_vec(vec![2.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn singular_values_sorted() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let svd = sorted_svd(&a);
        assert_relative_eq!(svd.singular_values[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(svd.singular_values[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(svd.truncated(3), a, epsilon = 1e-12);
    }

    #[test]
    fn sym_pinv_drops_null_space() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let (inv, rank) = sym_pinv(&a, 1e-10);
        assert_eq!(rank, 1);
        assert_relative_eq!(inv[(0, 0)], 0.5, epsilon = 1e-14);
        assert_eq!(inv[(1, 1)], 0.0);
    }
}
