//! Template sets and grid tensors: the values of a score function on every
//! combination of templates.

use log::warn;
use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::networks::{FeatureMap, Network, RnnNet, ShallowNet, Token};
use crate::tensor::cap::{check_capacity, check_count, pow_count};
use crate::tensor::linalg::{inverse, Conditioning};
use crate::tensor::{dot, gen_outer, DenseTensor};

/// Templates `x^(1) .. x^(M)` with the feature matrix `F` they induce
/// (row `i` is `f(x^(i))`).
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<Token>,
    pub f: DenseTensor,
    pub invertible: bool,
    pub conditioning: Conditioning,
}

impl TemplateSet {
    /// Index templates `0..M` under the identity feature map.
    pub fn identity(m: usize) -> Self {
        feature_matrix(&FeatureMap::identity(m), &index_templates(m)).expect("identity templates")
    }

    /// Index templates `0..M` of a template-mode feature map.
    pub fn of_template_map(fm: &FeatureMap) -> Result<Self> {
        match fm {
            FeatureMap::Template { f } => feature_matrix(fm, &index_templates(f.shape()[0])),
            FeatureMap::Affine { .. } => Err(invalid!("affine feature maps need explicit template vectors")),
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.f.row(i).to_vec()).collect()
    }

    /// `F^{-1}`; fails loudly on an ill-conditioned `F`.
    pub fn f_inverse(&self) -> Result<DenseTensor> {
        inverse(&self.f)
    }
}

pub fn index_templates(m: usize) -> Vec<Token> {
    (0..m).map(Token::Index).collect()
}

/// Evaluates the feature map on every template. A singular `F` is logged and
/// flagged but not rejected.
pub fn feature_matrix(fm: &FeatureMap, templates: &[Token]) -> Result<TemplateSet> {
    fm.check()?;
    let m = fm.dim();
    if templates.len() != m {
        return Err(shape_err!("{} templates for a feature map of dimension {m}", templates.len()));
    }
    for (i, a) in templates.iter().enumerate() {
        if templates[..i].contains(a) {
            return Err(invalid!("template {i} duplicates an earlier template"));
        }
    }
    let mut data = Vec::with_capacity(m * m);
    for x in templates {
        data.extend(fm.eval(x)?);
    }
    let f = DenseTensor::matrix(m, m, data)?;
    let conditioning = Conditioning::of(&f)?;
    let invertible = conditioning.is_invertible();
    if !invertible {
        warn!(
            "feature matrix is numerically singular (sigma_min / sigma_max = {:.3e})",
            conditioning.inverse_condition()
        );
    }
    Ok(TemplateSet { templates: templates.to_vec(), f, invertible, conditioning })
}

fn grid_shape(m: usize, t: usize) -> Result<Vec<usize>> {
    check_count(pow_count(m, t))?;
    Ok(vec![m; t])
}

fn check_templates(ts: &TemplateSet, m: usize) -> Result<()> {
    if ts.len() != m {
        return Err(shape_err!("{} templates, network input dimension {m}", ts.len()));
    }
    Ok(())
}

/// `sum_r lambda_r (F v_r^(1)) x_xi ... x_xi (F v_r^(T))`.
pub fn grid_shallow(net: &ShallowNet, ts: &TemplateSet) -> Result<DenseTensor> {
    net.check()?;
    let m = ts.len();
    check_templates(ts, net.feature_map.dim())?;
    let shape = grid_shape(m, net.len())?;
    let feats = ts.features();
    let mut total = DenseTensor::zeros(&shape)?;
    for r in 0..net.rank() {
        let mut acc = DenseTensor::scalar(net.xi.unit());
        for t in 0..net.len() {
            let fv: Vec<f64> = feats.iter().map(|f| net.projection(t, r, f)).collect();
            acc = gen_outer(net.xi, &acc, &DenseTensor::vector(fv)?)?;
        }
        let lambda = net.lambdas[r];
        for (o, a) in total.data_mut().iter_mut().zip(acc.data()) {
            *o += lambda * a;
        }
    }
    Ok(total)
}

pub fn grid_rnn(net: &RnnNet, ts: &TemplateSet) -> Result<DenseTensor> {
    grid_rnn_traced(net, ts).map(|(g, _)| g)
}

/// Grid tensor of an RNN through the recursion over time steps, together with
/// the number of elements held by each intermediate `Gamma^t`.
///
/// `Gamma^t` is stored as `[m_1 .. m_t][k]` (rank index trailing) so the
/// innermost contraction over `k` is contiguous.
pub fn grid_rnn_traced(net: &RnnNet, ts: &TemplateSet) -> Result<(DenseTensor, Vec<usize>)> {
    net.check()?;
    let m = ts.len();
    check_templates(ts, net.input_dim())?;
    let shape = grid_shape(m, net.len())?;
    let mut gamma = vec![net.h0];
    let mut rank = 1usize;
    let mut paths = 1usize;
    let mut trace = Vec::with_capacity(net.len());
    for t in 0..net.len() {
        let cell = net.cell(t);
        let (l, rp, rn) = (cell.core.shape()[0], cell.core.shape()[1], cell.core.shape()[2]);
        debug_assert_eq!(rp, rank);
        // P = C F^T: P[i][m] = (C f(x^(m)))_i
        let p: Vec<f64> = (0..l)
            .flat_map(|i| (0..m).map(move |mm| (i, mm)))
            .map(|(i, mm)| dot(cell.input.row(i), ts.f.row(mm)))
            .collect();
        let active: Vec<(usize, usize)> = (0..l)
            .flat_map(|i| (0..rp).map(move |j| (i, j)))
            .filter(|&(i, j)| cell.core.data()[(i * rp + j) * rn..(i * rp + j + 1) * rn].iter().any(|&g| g != 0.0))
            .collect();
        let len = check_capacity(&[paths, m, rn])?;
        let mut next = vec![0.0; len];
        let gd = cell.core.data();
        let xi = net.xi;
        next.par_chunks_mut(m * rn).enumerate().for_each(|(path, block)| {
            let h = &gamma[path * rank..(path + 1) * rank];
            for (mm, out) in block.chunks_mut(rn).enumerate() {
                for &(i, j) in &active {
                    let v = xi.apply2(p[i * m + mm], h[j]);
                    let grow = &gd[(i * rp + j) * rn..(i * rp + j + 1) * rn];
                    for (o, g) in out.iter_mut().zip(grow) {
                        *o += g * v;
                    }
                }
            }
        });
        trace.push(len);
        gamma = next;
        rank = rn;
        paths *= m;
    }
    Ok((DenseTensor::new(shape, gamma)?, trace))
}

pub fn grid(net: &Network, ts: &TemplateSet) -> Result<DenseTensor> {
    match net {
        Network::Shallow(n) => grid_shallow(n, ts),
        Network::Rnn(n) => grid_rnn(n, ts),
    }
}

/// Oracle: scores every template combination one sequence at a time.
pub fn grid_bruteforce(net: &Network, ts: &TemplateSet) -> Result<DenseTensor> {
    let m = ts.len();
    check_templates(ts, net.feature_map().dim())?;
    let shape = grid_shape(m, net.len())?;
    let feats: Vec<Vec<f64>> = ts.templates.iter().map(|x| net.feature_map().eval(x)).collect::<Result<_>>()?;
    let total = shape.iter().product::<usize>();
    let t = shape.len();
    let data = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut rem = flat;
            let mut seq = vec![Vec::new(); t];
            for k in (0..t).rev() {
                seq[k] = feats[rem % m].clone();
                rem /= m;
            }
            net.score_features(&seq)
        })
        .collect::<Result<Vec<f64>>>()?;
    DenseTensor::new(shape, data)
}
