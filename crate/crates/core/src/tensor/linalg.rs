//! Dense linear algebra backed by `faer`: singular values, thin SVD,
//! inversion, and numerical rank.

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use serde::Serialize;

use super::dense::{DenseTensor, Matricization};
use crate::error::{invalid, shape_err, Error, Result};

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

fn to_faer(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

/// Singular values in non-increasing order.
pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>> {
    let spec = Spectrum::of(rows, cols, data)?;
    Ok((0..spec.len()).rev().map(|j| spec.smallest(j)).collect())
}

/// Singular values of a dense matrix, read off its bidiagonal form by
/// Sturm-count bisection.
///
/// faer's implicit-shift QR on the bidiagonal only deflates on a relative
/// test, so the noise-level block left by an exactly rank-deficient matrix
/// never converges. Bisection has no such failure mode and each count is
/// linear in the dimension.
#[derive(Clone, Debug, PartialEq)]
struct Spectrum {
    /// Squared off-diagonals of the Golub-Kahan form, scaled so the largest
    /// bidiagonal entry is 1.
    b2: Vec<f64>,
    scale: f64,
    upper: f64,
    n: usize,
}

impl Spectrum {
    fn of(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err!("{rows}x{cols} matrix with {} values", data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid!("matrix has non-finite entries"));
        }
        let (d, e) = bidiagonal(rows, cols, data);
        let n = d.len();
        let scale = d.iter().chain(&e).fold(0.0f64, |m, x| m.max(x.abs()));
        // Golub-Kahan tridiagonal: zero diagonal, off-diagonal d1, e1, d2, ..., dn;
        // its eigenvalues are the singular values and their negatives
        let mut b2 = Vec::with_capacity((2 * n).saturating_sub(1));
        if scale > 0.0 {
            for i in 0..n {
                b2.push((d[i] / scale).powi(2));
                if i + 1 < n {
                    b2.push((e[i] / scale).powi(2));
                }
            }
        }
        let mut upper = 0.0f64;
        for i in 0..b2.len() {
            let left = if i > 0 { b2[i - 1].sqrt() } else { 0.0 };
            upper = upper.max(left + b2[i].sqrt());
        }
        let upper = upper.max(b2.last().map_or(0.0, |b| b.sqrt())) * (1.0 + 4.0 * f64::EPSILON);
        Ok(Self { b2, scale, upper, n })
    }

    fn len(&self) -> usize {
        self.n
    }

    /// Number of singular values strictly below `x` (scaled units, `x > 0`).
    fn count_below(&self, x: f64) -> usize {
        if self.scale == 0.0 {
            return self.n;
        }
        let pivmin = f64::MIN_POSITIVE;
        let mut q = -x;
        let mut neg = (q < 0.0) as usize;
        for &b in &self.b2 {
            if q.abs() < pivmin {
                q = -pivmin;
            }
            q = -x - b / q;
            neg += (q < 0.0) as usize;
        }
        // the n negative eigenvalues are all below any positive x
        neg - self.n
    }

    /// The `j`-th smallest singular value, 0-based.
    fn smallest(&self, j: usize) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0f64, self.upper);
        let abs_tol = 2.0 * f64::EPSILON * self.upper;
        while hi - lo > abs_tol.max(2.0 * f64::EPSILON * hi) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) > j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        // below the bisection resolution; report an exact zero
        if lo == 0.0 {
            return 0.0;
        }
        0.5 * (lo + hi) * self.scale
    }

    /// Number of singular values strictly above `x` (unscaled).
    fn count_above(&self, x: f64) -> usize {
        if self.scale == 0.0 {
            return 0;
        }
        self.n - self.count_below(x / self.scale)
    }
}

/// Upper bidiagonal form `(diagonal, superdiagonal)` with the singular
/// values of the input. Wide matrices are reduced through their transpose.
fn bidiagonal(rows: usize, cols: usize, data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::qr::no_pivoting::factor::recommended_block_size;
    use faer::linalg::svd::bidiag::{bidiag_in_place, bidiag_in_place_scratch};

    let (m, n) = (rows.max(cols), rows.min(cols));
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut a = if rows >= cols { to_faer(rows, cols, data) } else { Mat::from_fn(m, n, |i, j| data[j * cols + i]) };
    let par = faer::get_global_parallelism();
    let bs = recommended_block_size::<f64>(m, n);
    let mut hl = Mat::<f64>::zeros(bs, n);
    let mut hr = Mat::<f64>::zeros(bs, n - 1);
    let mut buf = MemBuffer::new(bidiag_in_place_scratch::<f64>(m, n, par, Default::default()));
    bidiag_in_place(a.as_mut(), hl.as_mut(), hr.as_mut(), par, MemStack::new(&mut buf), Default::default());
    let d = (0..n).map(|i| a[(i, i)]).collect();
    let e = (0..n - 1).map(|i| a[(i, i + 1)]).collect();
    (d, e)
}

/// Thin SVD `A = U diag(s) V^T`; `u` is `rows x k`, `vt` is `k x cols`, both
/// row-major, with `k = min(rows, cols)` and `s` non-increasing.
///
/// Columns of `u` belonging to singular values near round-off level are only
/// approximately orthogonal to the rest; the product still reproduces `A`.
pub struct ThinSvd {
    pub k: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub vt: Vec<f64>,
}

/// Relative size of the ridge appended below the matrix in [`thin_svd`].
const RIDGE: f64 = 1e-12;

pub fn thin_svd(rows: usize, cols: usize, data: &[f64]) -> Result<ThinSvd> {
    if rows * cols != data.len() {
        return Err(shape_err!("{rows}x{cols} matrix with {} values", data.len()));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("matrix has non-finite entries"));
    }
    if rows < cols {
        // A^T = V diag(s) U^T
        let t: Vec<f64> = (0..cols * rows).map(|x| data[(x % rows) * cols + x / rows]).collect();
        let svd = thin_svd(cols, rows, &t)?;
        let k = svd.k;
        let u = (0..rows * k).map(|x| svd.vt[(x % k) * rows + x / k]).collect();
        let vt = (0..k * cols).map(|x| svd.u[(x % cols) * k + x / cols]).collect();
        return Ok(ThinSvd { k, u, s: svd.s, vt });
    }
    let k = cols;
    if k == 0 {
        return Ok(ThinSvd { k, u: Vec::new(), s: Vec::new(), vt: Vec::new() });
    }
    // [A; delta I] has the right singular vectors of A, and its bidiagonal QR
    // always deflates; faer's iteration can stall on the round-off block of
    // an exactly rank-deficient A
    let fro = data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let delta = RIDGE * fro;
    let stacked = Mat::from_fn(rows + k, k, |i, j| {
        if i < rows {
            data[i * cols + j]
        } else if i - rows == j {
            delta
        } else {
            0.0
        }
    });
    let svd = stacked.thin_svd().map_err(|_| Error::NoConvergence)?;
    let (us, ss, v) = (svd.U(), svd.S().column_vector(), svd.V());
    // A v_j = sigma'_j * (top block of u'_j); its norm is the singular value
    let mut cols_out: Vec<(f64, usize)> = (0..k)
        .map(|j| {
            let norm = (0..rows).map(|i| us[(i, j)].powi(2)).sum::<f64>().sqrt();
            (ss[j] * norm, j)
        })
        .collect();
    cols_out.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut u = vec![0.0; rows * k];
    let mut vt = vec![0.0; k * cols];
    let mut s = Vec::with_capacity(k);
    for (new, &(sigma, old)) in cols_out.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            let f = ss[old] / sigma;
            for i in 0..rows {
                u[i * k + new] = us[(i, old)] * f;
            }
        }
        for j in 0..cols {
            vt[new * cols + j] = v[(j, old)];
        }
    }
    Ok(ThinSvd { k, u, s, vt })
}

/// Inverse of a square order-2 tensor. Fails on numerically singular input
/// (smallest singular value at most `1e-10` times the largest).
pub fn inverse(a: &DenseTensor) -> Result<DenseTensor> {
    let n = square_dim(a)?;
    let cond = Conditioning::of(a)?;
    if !cond.is_invertible() {
        return Err(Error::Singular(format!("sigma_min / sigma_max = {:.3e}", cond.inverse_condition())));
    }
    let m = to_faer(n, n, a.data());
    let inv = m.partial_piv_lu().inverse();
    DenseTensor::from_fn(&[n, n], |ix| inv[(ix[0], ix[1])])
}

fn square_dim(a: &DenseTensor) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(shape_err!("expected a square matrix, got {s:?}")),
    }
}

/// Extreme singular values of a square matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Conditioning {
    pub sigma_max: f64,
    pub sigma_min: f64,
}

/// `sigma_min > INVERTIBILITY_TOL * sigma_max` counts as invertible.
pub const INVERTIBILITY_TOL: f64 = 1e-10;

impl Conditioning {
    pub fn of(a: &DenseTensor) -> Result<Self> {
        let n = square_dim(a)?;
        if n == 0 {
            return Err(shape_err!("empty matrix"));
        }
        let spec = Spectrum::of(n, n, a.data())?;
        Ok(Self { sigma_max: spec.smallest(n - 1), sigma_min: spec.smallest(0) })
    }

    pub fn inverse_condition(&self) -> f64 {
        if self.sigma_max == 0.0 {
            0.0
        } else {
            self.sigma_min / self.sigma_max
        }
    }

    pub fn condition_number(&self) -> f64 {
        self.sigma_max / self.sigma_min
    }

    pub fn is_invertible(&self) -> bool {
        self.sigma_max > 0.0 && self.sigma_min > INVERTIBILITY_TOL * self.sigma_max
    }
}

/// How many of the largest and smallest singular values a rank estimate
/// keeps for reporting.
pub const REPORTED_VALUES: usize = 5;

/// Numerical rank together with the extremes of the spectrum it was read
/// from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankEstimate {
    pub rank: usize,
    pub rel_tol: f64,
    /// Number of singular values, `min(rows, cols)`.
    pub dim: usize,
    /// Largest singular values, non-increasing.
    pub top: Vec<f64>,
    /// Smallest singular values, non-increasing.
    pub bottom: Vec<f64>,
    #[serde(skip)]
    spectrum: Spectrum,
}

impl RankEstimate {
    /// The full spectrum, non-increasing. Computed on demand.
    pub fn singular_values(&self) -> Vec<f64> {
        (0..self.dim).rev().map(|j| self.spectrum.smallest(j)).collect()
    }

    /// Rank under a different relative tolerance, without refactoring.
    pub fn rank_at(&self, rel_tol: f64) -> usize {
        let smax = self.sigma_max();
        if smax == 0.0 {
            0
        } else {
            self.spectrum.count_above(rel_tol * smax)
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.top.first().copied().unwrap_or(0.0)
    }

    /// The `n` largest singular values, at most `REPORTED_VALUES`.
    pub fn head(&self, n: usize) -> &[f64] {
        &self.top[..n.min(self.top.len())]
    }

    /// The `n` smallest singular values, at most `REPORTED_VALUES`.
    pub fn tail(&self, n: usize) -> &[f64] {
        let len = self.bottom.len();
        &self.bottom[len - n.min(len)..]
    }
}

/// Counts singular values strictly above `rel_tol * sigma_max`; the zero
/// matrix has rank 0.
pub fn numerical_rank(m: &Matricization, rel_tol: f64) -> Result<RankEstimate> {
    matrix_rank(m.rows, m.cols, &m.data, rel_tol)
}

pub fn matrix_rank(rows: usize, cols: usize, data: &[f64], rel_tol: f64) -> Result<RankEstimate> {
    if !(rel_tol > 0.0) {
        return Err(invalid!("rank tolerance must be positive, got {rel_tol}"));
    }
    let spec = Spectrum::of(rows, cols, data)?;
    let n = spec.len();
    let k = REPORTED_VALUES.min(n);
    let top: Vec<f64> = (0..k).map(|i| spec.smallest(n - 1 - i)).collect();
    let bottom: Vec<f64> = (0..k).rev().map(|j| spec.smallest(j)).collect();
    let mut est = RankEstimate { rank: 0, rel_tol, dim: n, top, bottom, spectrum: spec };
    est.rank = est.rank_at(rel_tol);
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_of(n: usize, f: impl Fn(usize, usize) -> f64) -> usize {
        let data: Vec<f64> = (0..n * n).map(|k| f(k / n, k % n)).collect();
        matrix_rank(n, n, &data, DEFAULT_RANK_TOL).unwrap().rank
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(5, |i, j| (i == j) as u8 as f64), 5);
        assert_eq!(rank_of(4, |_, _| 1.0), 1);
        assert_eq!(rank_of(4, |_, _| 0.0), 0);
        let est = matrix_rank(2, 2, &[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let s = est.singular_values();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] == 0.0, "{s:?}");
        for n in 2..8 {
            assert_eq!(rank_of(n, |i, j| (i != j) as u8 as f64), n, "J - I, n = {n}");
        }
    }

    #[test]
    fn ones_minus_identity_spectrum() {
        // eigenvalues n-1 (once) and -1 (n-1 times)
        let n = 6;
        let data: Vec<f64> = (0..n * n).map(|k| (k / n != k % n) as u8 as f64).collect();
        let est = matrix_rank(n, n, &data, 1e-8).unwrap();
        assert_eq!(est.rank, 6);
        assert!((est.sigma_max() - 5.0).abs() < 1e-12);
        assert!(est.head(5)[1..].iter().chain(est.tail(5)).all(|s| (s - 1.0).abs() < 1e-12));
        assert_eq!(est.singular_values(), singular_values(n, n, &data).unwrap());
        let all = est.singular_values();
        assert!((all[0] - 5.0).abs() < 1e-12);
        assert!(all[1..].iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rank_rejects_nonpositive_tolerance() {
        assert!(matrix_rank(1, 1, &[1.0], 0.0).is_err());
    }

    #[test]
    fn inverse_and_conditioning() {
        let a = DenseTensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let inv = inverse(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&DenseTensor::identity(2)).unwrap() < 1e-14);
        let singular = DenseTensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(inverse(&singular), Err(Error::Singular(_))));
    }

    #[test]
    fn thin_svd_reconstructs() {
        let (r, c) = (4, 3);
        let data: Vec<f64> = (0..12).map(|k| ((k * 7 % 5) as f64) - 1.5).collect();
        let svd = thin_svd(r, c, &data).unwrap();
        for i in 0..r {
            for j in 0..c {
                let v: f64 = (0..svd.k).map(|p| svd.u[i * svd.k + p] * svd.s[p] * svd.vt[p * c + j]).sum();
                assert!((v - data[i * c + j]).abs() < 1e-12);
            }
        }
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    }

    /// `Q1 diag(s) Q2^T` with orthonormal factors from QR of seeded random
    /// matrices, so the spectrum is known in advance.
    fn with_spectrum(rows: usize, cols: usize, s: &[f64], seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut q = |n: usize| {
            let g = Mat::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
            g.qr().compute_Q()
        };
        let (q1, q2) = (q(rows), q(cols));
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = (0..s.len()).map(|k| q1[(i, k)] * s[k] * q2[(j, k)]).sum();
            }
        }
        out
    }

    #[test]
    fn known_spectrum_tall_and_wide() {
        let s = [9.0, 4.0, 2.5, 1.0, 0.125, 1e-3];
        for (r, c) in [(12, 6), (6, 12), (6, 6), (40, 17)] {
            let data = with_spectrum(r, c, &s, (r * 100 + c) as u64);
            let got = singular_values(r, c, &data).unwrap();
            assert_eq!(got.len(), r.min(c));
            for (k, g) in got.iter().enumerate() {
                let want = s.get(k).copied().unwrap_or(0.0);
                assert!((g - want).abs() < 1e-12 * 9.0 * 50.0, "{r}x{c} sigma_{k}: {g} vs {want}");
            }
        }
    }

    #[test]
    fn exactly_rank_deficient_large() {
        // a product of thin integer factors has exact rank 7
        let (n, k) = (300, 7);
        let a: Vec<f64> = (0..n * k).map(|x| ((x * 31 + 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|x| ((x * 17 + 3) % 13) as f64 - 6.0).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let est = matrix_rank(n, n, &data, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(est.rank, k);
        assert_eq!(est.dim, n);
        assert!(est.tail(5).iter().all(|&s| s < 1e-10 * est.sigma_max()));
        assert!(est.head(5).windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_counts_threshold() {
        let s = [1.0, 1e-4, 1e-7, 1e-9, 1e-12];
        let data = with_spectrum(8, 5, &s, 3);
        let base = matrix_rank(8, 5, &data, 1e-8).unwrap();
        for (tol, want) in [(1e-2, 1), (1e-5, 2), (1e-8, 3), (1e-10, 4)] {
            assert_eq!(matrix_rank(8, 5, &data, tol).unwrap().rank, want, "tol {tol}");
            assert_eq!(base.rank_at(tol), want, "tol {tol}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matrix_rank(1, 2, &[1.0, f64::NAN], 1e-8).is_err());
    }

    fn reconstruct(svd: &ThinSvd, r: usize, c: usize) -> Vec<f64> {
        (0..r * c)
            .map(|x| (0..svd.k).map(|p| svd.u[(x / c) * svd.k + p] * svd.s[p] * svd.vt[p * c + x % c]).sum())
            .collect()
    }

    #[test]
    fn thin_svd_wide_and_deficient() {
        let s = [3.0, 2.0, 0.5];
        for (r, c) in [(5, 9), (9, 5), (7, 7)] {
            let data = with_spectrum(r, c, &s, 11);
            let svd = thin_svd(r, c, &data).unwrap();
            assert_eq!(svd.k, r.min(c));
            for (k, g) in svd.s.iter().enumerate() {
                let want = s.get(k).copied().unwrap_or(0.0);
                assert!((g - want).abs() < 1e-10, "{r}x{c} sigma_{k}: {g} vs {want}");
            }
            let back = reconstruct(&svd, r, c);
            assert!(back.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-12));
            // leading left vectors are orthonormal
            for p in 0..3 {
                for q in 0..3 {
                    let d: f64 = (0..r).map(|i| svd.u[i * svd.k + p] * svd.u[i * svd.k + q]).sum();
                    assert!((d - (p == q) as u8 as f64).abs() < 1e-10);
                }
            }
        }
    }
}
