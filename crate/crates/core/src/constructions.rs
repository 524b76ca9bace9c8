//! Explicit weight settings: adding RNNs, embedding shallow networks into
//! RNNs, one-hot and universal constructions, absorbing input matrices, and
//! the two expressivity example networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::TemplateSet;
use crate::networks::{FeatureMap, RnnCell, RnnNet, ShallowNet};
use crate::tensor::cap::{check_count, element_count};
use crate::tensor::{dot, tt_decompose, DenseTensor};
use crate::xi::Xi;

/// Position of a cell within the sequence; decides which block layout
/// `rnn_add` uses.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Only,
    First,
    Middle,
    Last,
}

fn slot(t: usize, steps: usize) -> Slot {
    match (t == 0, t + 1 == steps) {
        (true, true) => Slot::Only,
        (true, false) => Slot::First,
        (false, true) => Slot::Last,
        (false, false) => Slot::Middle,
    }
}

fn add_cells(a: &RnnCell, b: &RnnCell, wa: f64, wb: f64, slot: Slot) -> Result<RnnCell> {
    let (la, lb) = (a.rows(), b.rows());
    let m = a.input.shape()[1];
    let mut input = Vec::with_capacity((la + lb) * m);
    input.extend_from_slice(a.input.data());
    input.extend_from_slice(b.input.data());
    let input = DenseTensor::matrix(la + lb, m, input)?;

    // rank offsets of the B block along the previous and next rank modes
    let (rpa, rna) = (a.rank_in(), a.rank_out());
    let (rp, op) = match slot {
        Slot::Only | Slot::First => (1, 0),
        Slot::Middle | Slot::Last => (rpa + b.rank_in(), rpa),
    };
    let (rn, on) = match slot {
        Slot::Only | Slot::Last => (1, 0),
        Slot::First | Slot::Middle => (rna + b.rank_out(), rna),
    };
    let (sa, sb) = match slot {
        Slot::Only | Slot::Last => (wa, wb),
        Slot::First | Slot::Middle => (1.0, 1.0),
    };
    let mut core = DenseTensor::zeros(&[la + lb, rp, rn])?;
    for (src, rows_off, p_off, n_off, s) in [(a, 0, 0, 0, sa), (b, la, op, on, sb)] {
        let (l, sp, sn) = (src.rows(), src.rank_in(), src.rank_out());
        for i in 0..l {
            for j in 0..sp {
                for k in 0..sn {
                    core.set(&[rows_off + i, p_off + j, n_off + k], s * src.core.get(&[i, j, k]));
                }
            }
        }
    }
    Ok(RnnCell { input, core })
}

/// Network whose grid tensor is `a * Gamma_A + b * Gamma_B`: input matrices
/// are stacked, cores are block diagonal, and `a`, `b` scale the last core.
/// The result keeps shared storage when both inputs are shared.
pub fn rnn_add(na: &RnnNet, nb: &RnnNet, a: f64, b: f64) -> Result<RnnNet> {
    if na.xi != nb.xi {
        return Err(invalid!("cannot add networks with xi {} and {}", na.xi, nb.xi));
    }
    if na.len() != nb.len() {
        return Err(invalid!("cannot add networks of lengths {} and {}", na.len(), nb.len()));
    }
    if na.feature_map != nb.feature_map {
        return Err(invalid!("cannot add networks with different feature maps"));
    }
    na.check()?;
    nb.check()?;
    let steps = na.len();
    if na.is_stored_shared() && nb.is_stored_shared() {
        let cell = |s: usize, sl| add_cells(&na.cells[s], &nb.cells[s], a, b, sl);
        return RnnNet::new_shared(
            na.xi,
            steps,
            cell(0, Slot::First)?,
            cell(1, Slot::Middle)?,
            cell(2, Slot::Last)?,
            na.feature_map.clone(),
        );
    }
    let cells =
        (0..steps).map(|t| add_cells(na.cell(t), nb.cell(t), a, b, slot(t, steps))).collect::<Result<Vec<_>>>()?;
    RnnNet::new(na.xi, cells, na.feature_map.clone())
}

/// Sums networks with a balanced tree of `rnn_add` calls, preserving order.
pub fn rnn_sum(nets: &[RnnNet]) -> Result<RnnNet> {
    match nets {
        [] => Err(invalid!("sum of zero networks")),
        [one] => Ok(one.clone()),
        _ => {
            let (l, r) = nets.split_at(nets.len() / 2);
            rnn_add(&rnn_sum(l)?, &rnn_sum(r)?, 1.0, 1.0)
        }
    }
}

/// Unit-rank RNN with `C^(t) = (v^(t))^T`, `G^(t) = 1` and `G^(T) = lambda`.
pub fn shallow_rank1_to_rnn(net: &ShallowNet) -> Result<RnnNet> {
    net.check()?;
    if net.rank() != 1 {
        return Err(invalid!("expected a rank-1 shallow network, got rank {}", net.rank()));
    }
    rank1_term(net, 0)
}

fn rank1_term(net: &ShallowNet, r: usize) -> Result<RnnNet> {
    let steps = net.len();
    let cells = (0..steps)
        .map(|t| {
            let v = net.factors[t].column(r);
            let g = if t + 1 == steps { net.lambdas[r] } else { 1.0 };
            Ok(RnnCell { input: DenseTensor::matrix(1, v.len(), v)?, core: DenseTensor::new(vec![1, 1, 1], vec![g])? })
        })
        .collect::<Result<Vec<_>>>()?;
    RnnNet::new(net.xi, cells, net.feature_map.clone())
}

/// RNN of rank `R` in every internal mode with the same grid tensor as a rank
/// `R` shallow network.
pub fn shallow_to_rnn(net: &ShallowNet) -> Result<RnnNet> {
    net.check()?;
    let terms = (0..net.rank()).map(|r| rank1_term(net, r)).collect::<Result<Vec<_>>>()?;
    rnn_sum(&terms)
}

/// Position `(j_1, ..., j_T)` (0-based) of the single unit entry of a one-hot
/// tensor with mode size `M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotSpec {
    pub m: usize,
    pub indices: Vec<usize>,
}

impl OneHotSpec {
    pub fn new(m: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid!("one-hot index must have at least one mode"));
        }
        if let Some(&j) = indices.iter().find(|&&j| j >= m) {
            return Err(invalid!("one-hot index {j} out of range 0..{m}"));
        }
        Ok(Self { m, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn template_map(ts: &TemplateSet) -> FeatureMap {
    FeatureMap::Template { f: ts.f.clone() }
}

/// Rank-2 rect_max shallow network whose grid tensor is the one-hot tensor
/// `E^(j_1 .. j_T)`.
///
/// With `w^(t) = F v^(t)` the values taken on the templates: the first term
/// has `w^(1) = 1`, `w^(t) = 0` otherwise, so it is 1 everywhere. The second
/// has weight -1 and `w^(t) = 1 - e_{j_t}`, so its rectified max is 0 exactly
/// at the target entry and 1 elsewhere.
pub fn onehot_shallow(spec: &OneHotSpec, ts: &TemplateSet) -> Result<ShallowNet> {
    let finv = checked_inverse(ts, spec.m)?;
    onehot_with_inverse(spec, ts, &finv, 1.0)
}

fn checked_inverse(ts: &TemplateSet, m: usize) -> Result<DenseTensor> {
    if ts.len() != m {
        return Err(shape_err!("{} templates for mode size {m}", ts.len()));
    }
    ts.f_inverse()
}

fn onehot_with_inverse(spec: &OneHotSpec, ts: &TemplateSet, finv: &DenseTensor, scale: f64) -> Result<ShallowNet> {
    let m = spec.m;
    let factors = spec
        .indices
        .iter()
        .enumerate()
        .map(|(t, &j)| {
            let w1: Vec<f64> = vec![if t == 0 { 1.0 } else { 0.0 }; m];
            let w2: Vec<f64> = (0..m).map(|i| if i == j { 0.0 } else { 1.0 }).collect();
            let (v1, v2) = (finv.matvec(&w1)?, finv.matvec(&w2)?);
            let data = (0..m).flat_map(|i| [v1[i], v2[i]]).collect();
            DenseTensor::matrix(m, 2, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ShallowNet::new(Xi::RectMax, vec![scale, -scale], factors, template_map(ts))
}

fn nonzero_entries(h: &DenseTensor, m: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    if h.order() == 0 || h.shape().iter().any(|&n| n != m) {
        return Err(shape_err!("target tensor {:?} must have every mode of size {m}", h.shape()));
    }
    Ok(h.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(flat, &v)| (h.multi_index(flat), v)).collect())
}

/// Empty-sum convention: a single unit-rank network with zero weights.
fn zero_shallow(ts: &TemplateSet, steps: usize) -> Result<ShallowNet> {
    let m = ts.len();
    ShallowNet::new(Xi::RectMax, vec![0.0], vec![DenseTensor::zeros(&[m, 1])?; steps], template_map(ts))
}

/// Rect_max shallow network realizing `H` as a sum of scaled one-hot terms;
/// its rank is twice the number of nonzero entries.
pub fn shallow_from_grid_relu(h: &DenseTensor, ts: &TemplateSet) -> Result<ShallowNet> {
    let m = ts.len();
    let entries = nonzero_entries(h, m)?;
    if entries.is_empty() {
        return zero_shallow(ts, h.order());
    }
    let finv = checked_inverse(ts, m)?;
    let rank = 2 * entries.len();
    check_count(element_count(&[h.order(), m, rank]))?;
    let mut lambdas = Vec::with_capacity(rank);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(m * rank); h.order()];
    for (ix, v) in entries {
        let term = onehot_with_inverse(&OneHotSpec::new(m, ix)?, ts, &finv, v)?;
        lambdas.extend_from_slice(&term.lambdas);
        for (t, f) in term.factors.iter().enumerate() {
            cols[t].extend((0..m).flat_map(|i| [f.get(&[i, 0]), f.get(&[i, 1])]));
        }
    }
    // cols[t] holds, per term, an M x 2 block in row-major order; regroup
    // into M x rank.
    let terms = rank / 2;
    let factors = cols
        .into_iter()
        .map(|blocks| {
            DenseTensor::from_fn(&[m, rank], |ix| {
                let (term, c) = (ix[1] / 2, ix[1] % 2);
                blocks[term * 2 * m + ix[0] * 2 + c]
            })
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(terms * 2, lambdas.len());
    ShallowNet::new(Xi::RectMax, lambdas, factors, template_map(ts))
}

/// Rect_max RNN with grid tensor exactly `H`: one rank-2 one-hot network per
/// nonzero entry, scaled by the entry and summed with a balanced tree.
pub fn rnn_from_grid_relu(h: &DenseTensor, ts: &TemplateSet) -> Result<RnnNet> {
    let m = ts.len();
    let entries = nonzero_entries(h, m)?;
    if entries.is_empty() {
        return shallow_rank1_to_rnn(&zero_shallow(ts, h.order())?);
    }
    let finv = checked_inverse(ts, m)?;
    // middle cores are L x R x R with L = R = 2 * nnz
    let width = 2 * entries.len();
    check_count(element_count(&[width, width, width]))?;
    if entries.len() > 64 {
        log::info!("universal construction with {} nonzero entries has rank {width}", entries.len());
    }
    let terms = entries
        .into_iter()
        .map(|(ix, v)| shallow_to_rnn(&onehot_with_inverse(&OneHotSpec::new(m, ix)?, ts, &finv, v)?))
        .collect::<Result<Vec<_>>>()?;
    rnn_sum(&terms)
}

/// `out[.., l, ..] = sum_i a[l][i] * h[.., i, ..]` along `mode`.
fn mode_product(h: &DenseTensor, mode: usize, a: &DenseTensor) -> Result<DenseTensor> {
    let n = h.shape()[mode];
    if a.shape() != [n, n] {
        return Err(shape_err!("mode product of {:?} with {:?}", h.shape(), a.shape()));
    }
    let outer: usize = h.shape()[..mode].iter().product();
    let inner: usize = h.shape()[mode + 1..].iter().product();
    let mut out = vec![0.0; h.len()];
    let src = h.data();
    for o in 0..outer {
        for l in 0..n {
            let dst = &mut out[(o * n + l) * inner..(o * n + l + 1) * inner];
            for i in 0..n {
                let w = a.get(&[l, i]);
                if w == 0.0 {
                    continue;
                }
                let s = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, x) in dst.iter_mut().zip(s) {
                    *d += w * x;
                }
            }
        }
    }
    DenseTensor::new(h.shape().to_vec(), out)
}

/// Multiplicative RNN with `C^(t) = I` whose grid tensor approximates `H`.
///
/// The score is `<H_hat, Phi(X)>` with `H_hat = H x_1 F^{-1} ... x_T F^{-1}`,
/// so that the grid entry at `(i_1, ..., i_T)` is
/// `sum_l H_hat_l prod_t F_{i_t l_t} = H_i`. `H_hat` is then TT-decomposed.
pub fn net_from_grid_product(h: &DenseTensor, ts: &TemplateSet, eps: f64) -> Result<RnnNet> {
    let m = ts.len();
    if h.order() == 0 || h.shape().iter().any(|&n| n != m) {
        return Err(shape_err!("target tensor {:?} must have every mode of size {m}", h.shape()));
    }
    let finv = checked_inverse(ts, m)?;
    let mut hat = h.clone();
    for mode in 0..h.order() {
        hat = mode_product(&hat, mode, &finv)?;
    }
    let cores = tt_decompose(&hat, eps)?;
    let cells = cores.into_cores().into_iter().map(|core| RnnCell { input: DenseTensor::identity(m), core }).collect();
    RnnNet::new(Xi::Product, cells, template_map(ts))
}

/// For `xi = product`: `G~_{ljk} = sum_i G_{ijk} C_{il}` and `C = I`.
pub fn absorb_input_matrices(net: &RnnNet) -> Result<RnnNet> {
    if net.xi != Xi::Product {
        return Err(invalid!("input matrices can only be absorbed for xi = product, got {}", net.xi));
    }
    net.check()?;
    let m = net.input_dim();
    let cells = net
        .cells
        .iter()
        .map(|cell| {
            let (l, rp, rn) = (cell.rows(), cell.rank_in(), cell.rank_out());
            let mut core = DenseTensor::zeros(&[m, rp, rn])?;
            for i in 0..l {
                for ll in 0..m {
                    let c = cell.input.get(&[i, ll]);
                    for j in 0..rp {
                        for k in 0..rn {
                            let v = core.get(&[ll, j, k]) + cell.core.get(&[i, j, k]) * c;
                            core.set(&[ll, j, k], v);
                        }
                    }
                }
            }
            Ok(RnnCell { input: DenseTensor::identity(m), core })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RnnNet { cells, ..net.clone() })
}

/// Rect_max RNN of ranks `(R, 1, R, 1, ..., R)` on standard-basis templates
/// whose grid tensor is 1 everywhere except 0 at the entries
/// `(i_1, i_1, i_2, i_2, ...)` with every `i < min(M, R)`.
pub fn thm2_example(m: usize, r: usize, t: usize) -> Result<RnnNet> {
    thm2_example_with_templates(m, r, t, &TemplateSet::identity(m))
}

/// As [`thm2_example`] for an arbitrary invertible feature matrix: every
/// input matrix is pre-composed with `(F^T)^{-1}`.
pub fn thm2_example_with_templates(m: usize, r: usize, t: usize, ts: &TemplateSet) -> Result<RnnNet> {
    if t == 0 || !t.is_multiple_of(2) {
        return Err(invalid!("sequence length must be even and positive, got {t}"));
    }
    if m == 0 || r == 0 {
        return Err(invalid!("M and R must be positive"));
    }
    let to_templates = if ts.f == DenseTensor::identity(m) { None } else { Some(checked_inverse(ts, m)?.transpose()?) };
    let odd_c = DenseTensor::from_fn(&[m, m], |ix| (ix[0] != ix[1]) as u8 as f64)?;
    let even_c = DenseTensor::from_fn(&[m + 1, m], |ix| (ix[0] != ix[1]) as u8 as f64)?;
    let odd_g = DenseTensor::from_fn(&[m, 1, r], |ix| (ix[0] == ix[2]) as u8 as f64)?;
    let b0 = 1.0 - m.min(r) as f64;
    let even_g = DenseTensor::from_fn(&[m + 1, r, 1], |ix| {
        if ix[0] < m {
            (ix[0] == ix[1]) as u8 as f64
        } else if ix[1] == 0 {
            b0
        } else {
            0.0
        }
    })?;
    let adapt = |c: &DenseTensor| match &to_templates {
        Some(ft_inv) => c.matmul(ft_inv),
        None => Ok(c.clone()),
    };
    let (odd_c, even_c) = (adapt(&odd_c)?, adapt(&even_c)?);
    let cells = (0..t)
        .map(|s| {
            if s % 2 == 0 {
                RnnCell { input: odd_c.clone(), core: odd_g.clone() }
            } else {
                RnnCell { input: even_c.clone(), core: even_g.clone() }
            }
        })
        .collect();
    RnnNet::new(Xi::RectMax, cells, template_map(ts))
}

/// Weight settings whose grid tensor stays rank 1 under small perturbation.
#[derive(Clone, Debug)]
pub struct Thm3Example {
    pub rnn: RnnNet,
    /// Rank-1 shallow network with the same grid tensor.
    pub witness: ShallowNet,
    /// The grid tensor depends on the first template only: `g[m_1]`.
    pub profile: Vec<f64>,
    /// Smallest observed `min Gamma^{t-1} - max P^(t)` over steps `t >= 2`.
    pub margin: f64,
}

/// Rect_max RNN with `C^(t) = (F^T)^{-1}`, `G^(1) = 2`, other cores all
/// ones, every weight jittered i.i.d. uniformly in `[-eps_scale, eps_scale]`,
/// plus its rank-1 shallow witness.
///
/// Fails with [`Error::OutsideValidity`] when the hidden values do not dominate
/// the input projections by at least `10 * eps_scale` at every step after the
/// first, which is the condition that collapses `A x_xi B` to `A x 1`.
pub fn thm3_example(m: usize, r: usize, t: usize, ts: &TemplateSet, eps_scale: f64, seed: u64) -> Result<Thm3Example> {
    if t == 0 || m == 0 || r == 0 {
        return Err(invalid!("M, R and T must be positive"));
    }
    if !(eps_scale >= 0.0) {
        return Err(invalid!("perturbation scale must be non-negative, got {eps_scale}"));
    }
    let finv = checked_inverse(ts, m)?;
    let c0 = finv.transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |x: &DenseTensor| {
        if eps_scale == 0.0 {
            x.clone()
        } else {
            let data = x.data().iter().map(|v| v + rng.gen_range(-eps_scale..=eps_scale)).collect();
            DenseTensor::new(x.shape().to_vec(), data).expect("same shape")
        }
    };
    let mut ranks = vec![1];
    ranks.extend(std::iter::repeat_n(r, t - 1));
    ranks.push(1);
    let mut cells = Vec::with_capacity(t);
    for s in 0..t {
        let g = if s == 0 { 2.0 } else { 1.0 };
        let core = DenseTensor::filled(&[m, ranks[s], ranks[s + 1]], g)?;
        cells.push(RnnCell { input: jitter(&c0), core: jitter(&core) });
    }
    let rnn = RnnNet::new(Xi::RectMax, cells, template_map(ts))?;

    // Collapse the grid recursion: Gamma^1 = sum_i G_{i1k} max(P_{i m}, 0);
    // afterwards, if every hidden value exceeds every projection, the xi step
    // returns the hidden value and the recursion is linear in it.
    let proj = |cell: &RnnCell| -> Vec<Vec<f64>> {
        (0..cell.rows()).map(|i| (0..m).map(|mm| dot(cell.input.row(i), ts.f.row(mm))).collect()).collect()
    };
    let first = &rnn.cells[0];
    let p1 = proj(first);
    let mut gamma: Vec<Vec<f64>> = (0..first.rank_out())
        .map(|k| {
            (0..m).map(|mm| (0..first.rows()).map(|i| first.core.get(&[i, 0, k]) * p1[i][mm].max(0.0)).sum()).collect()
        })
        .collect();
    let mut margin = f64::INFINITY;
    for s in 1..t {
        let cell = &rnn.cells[s];
        let pmax = proj(cell).iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let gmin = gamma.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
        margin = margin.min(gmin - pmax);
        let weights: Vec<Vec<f64>> = (0..cell.rank_in())
            .map(|j| (0..cell.rank_out()).map(|k| (0..cell.rows()).map(|i| cell.core.get(&[i, j, k])).sum()).collect())
            .collect();
        gamma = (0..cell.rank_out())
            .map(|k| (0..m).map(|mm| (0..cell.rank_in()).map(|j| weights[j][k] * gamma[j][mm]).sum()).collect())
            .collect();
    }
    let needed = 10.0 * eps_scale;
    if t > 1 && !(margin > 0.0 && margin >= needed) {
        return Err(Error::OutsideValidity(format!("dominance margin {margin:.3e} below required {needed:.3e}")));
    }
    let profile = gamma.swap_remove(0);
    if let Some(g) = profile.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::OutsideValidity(format!("grid value {g:.3e} is not positive")));
    }
    let v1 = finv.matvec(&profile)?;
    let mut factors = vec![DenseTensor::matrix(m, 1, v1)?];
    factors.extend((1..t).map(|_| DenseTensor::zeros(&[m, 1]).expect("small")));
    let witness = ShallowNet::new(Xi::RectMax, vec![1.0], factors, template_map(ts))?;
    Ok(Thm3Example { rnn, witness, profile, margin })
}
