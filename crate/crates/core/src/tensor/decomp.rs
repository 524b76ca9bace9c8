//! CP and TT formats: expansion to full tensors and TT-SVD.

use super::cap::check_capacity;
use super::dense::{outer, DenseTensor};
use super::linalg::thin_svd;
use crate::error::{invalid, shape_err, Result};

/// `W = sum_r lambda_r v_r^(1) x ... x v_r^(T)`; factor `t` is an
/// `M_t x R` matrix whose column `r` is `v_r^(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpFactors {
    pub lambdas: Vec<f64>,
    pub factors: Vec<DenseTensor>,
}

impl CpFactors {
    pub fn new(lambdas: Vec<f64>, factors: Vec<DenseTensor>) -> Result<Self> {
        let r = lambdas.len();
        if r == 0 {
            return Err(invalid!("CP rank must be at least 1"));
        }
        if factors.is_empty() {
            return Err(invalid!("CP format needs at least one factor"));
        }
        for (t, f) in factors.iter().enumerate() {
            if f.order() != 2 || f.shape()[1] != r {
                return Err(shape_err!("factor {t} has shape {:?}, expected (M, {r})", f.shape()));
            }
        }
        Ok(Self { lambdas, factors })
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.shape()[0]).collect()
    }
}

pub fn cp_to_full(f: &CpFactors) -> Result<DenseTensor> {
    let shape = f.mode_sizes();
    check_capacity(&shape)?;
    let mut acc = DenseTensor::zeros(&shape)?;
    for r in 0..f.rank() {
        let mut term = DenseTensor::scalar(f.lambdas[r]);
        for factor in &f.factors {
            term = outer(&term, &DenseTensor::vector(factor.column(r))?)?;
        }
        acc.add_scaled(1.0, &term)?;
    }
    Ok(acc)
}

/// Tensor-train cores; core `t` has shape `n_t x R_{t-1} x R_t` with
/// `R_0 = R_T = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TtCores {
    cores: Vec<DenseTensor>,
}

impl TtCores {
    pub fn new(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(invalid!("TT format needs at least one core"));
        }
        for (t, c) in cores.iter().enumerate() {
            if c.order() != 3 {
                return Err(shape_err!("core {t} has order {}, expected 3", c.order()));
            }
        }
        if cores[0].shape()[1] != 1 || cores[cores.len() - 1].shape()[2] != 1 {
            return Err(shape_err!("boundary TT-ranks must be 1"));
        }
        for t in 0..cores.len() - 1 {
            let (a, b) = (cores[t].shape()[2], cores[t + 1].shape()[1]);
            if a != b {
                return Err(shape_err!("rank chain broken between cores {t} and {}: {a} vs {b}", t + 1));
            }
        }
        Ok(Self { cores })
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<DenseTensor> {
        self.cores
    }

    /// Internal TT-ranks `R_1 .. R_{T-1}`.
    pub fn ranks(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1].iter().map(|c| c.shape()[2]).collect()
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape()[0]).collect()
    }
}

/// Contracts the train left to right: after core `t` the partial result is an
/// `(n_1 ... n_t) x R_t` matrix.
pub fn tt_to_full(c: &TtCores) -> Result<DenseTensor> {
    let shape = c.mode_sizes();
    check_capacity(&shape)?;
    let mut acc = vec![1.0];
    let mut rows = 1usize;
    let mut rank = 1usize;
    for core in c.cores() {
        let (n, rp, rn) = (core.shape()[0], core.shape()[1], core.shape()[2]);
        debug_assert_eq!(rp, rank);
        let g = core.data();
        let mut next = vec![0.0; rows * n * rn];
        for a in 0..rows {
            for i in 0..n {
                let out = &mut next[(a * n + i) * rn..(a * n + i + 1) * rn];
                for j in 0..rp {
                    let w = acc[a * rp + j];
                    let grow = &g[(i * rp + j) * rn..(i * rp + j + 1) * rn];
                    for (o, gv) in out.iter_mut().zip(grow) {
                        *o += w * gv;
                    }
                }
            }
        }
        acc = next;
        rows *= n;
        rank = rn;
    }
    DenseTensor::new(shape, acc)
}

/// TT-SVD with per-unfolding truncation threshold `eps * |h| / sqrt(T - 1)`,
/// so that the reconstruction error is at most `eps * |h|` in Frobenius norm.
///
/// Singular values at round-off level (below `16 * n * f64::EPSILON` times
/// the leading one of each unfolding) are always dropped, which keeps ranks
/// minimal for `eps = 0`.
pub fn tt_decompose(h: &DenseTensor, eps: f64) -> Result<TtCores> {
    if !(eps >= 0.0) {
        return Err(invalid!("eps must be non-negative, got {eps}"));
    }
    let shape = h.shape().to_vec();
    let order = shape.len();
    if order == 0 {
        return Err(invalid!("cannot TT-decompose an order-0 tensor"));
    }
    if order == 1 {
        return TtCores::new(vec![h.clone().reshape(vec![shape[0], 1, 1])?]);
    }
    let norm = h.frobenius_norm();
    let delta = eps * norm / ((order - 1) as f64).sqrt();

    let mut cores = Vec::with_capacity(order);
    let mut rest = h.data().to_vec();
    let mut rank = 1usize;
    let mut remaining: usize = shape.iter().product();
    for &n in &shape[..order - 1] {
        let rows = rank * n;
        let cols = remaining / n;
        let svd = thin_svd(rows, cols, &rest)?;
        let keep = truncation_rank(&svd.s, delta, rows.max(cols));
        // U[:, :keep] is (rank * n) x keep with row index (r_prev, i); store
        // as (i, r_prev, r_next).
        let core = DenseTensor::from_fn(&[n, rank, keep], |ix| svd.u[(ix[1] * n + ix[0]) * svd.k + ix[2]])?;
        cores.push(core);
        let mut next = vec![0.0; keep * cols];
        for p in 0..keep {
            for j in 0..cols {
                next[p * cols + j] = svd.s[p] * svd.vt[p * cols + j];
            }
        }
        rest = next;
        rank = keep;
        remaining = cols;
    }
    let n = shape[order - 1];
    let last = DenseTensor::from_fn(&[n, rank, 1], |ix| rest[ix[1] * n + ix[0]])?;
    cores.push(last);
    TtCores::new(cores)
}

fn truncation_rank(s: &[f64], delta: f64, dim: usize) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 1;
    }
    let floor = 16.0 * dim as f64 * f64::EPSILON * smax;
    // smallest r with sum_{i >= r} s_i^2 <= delta^2
    let mut tail = 0.0;
    let mut keep = s.len();
    for (i, &v) in s.iter().enumerate().rev() {
        let next = tail + v * v;
        if next > delta * delta && v > floor {
            break;
        }
        tail = next;
        keep = i;
    }
    keep.max(1)
}
