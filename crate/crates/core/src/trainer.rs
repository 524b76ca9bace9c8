//! Reverse-mode gradients of score networks and full-batch gradient descent
//! on a synthetic sequence classification task.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::networks::{FeatureMap, Network, RnnCell, RnnNet, ShallowNet};
use crate::tensor::DenseTensor;
use crate::xi::Xi;

/// Number of trainable weights.
pub fn param_count(net: &Network) -> usize {
    match net {
        Network::Shallow(n) => n.lambdas.len() + n.factors.iter().map(DenseTensor::len).sum::<usize>(),
        Network::Rnn(n) => n.cells.iter().map(|c| c.input.len() + c.core.len()).sum(),
    }
}

/// Flattened weights. Shallow: `lambdas`, then each factor in step order.
/// RNN: for each stored cell, `C` then `G`.
pub fn params(net: &Network) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(net));
    match net {
        Network::Shallow(n) => {
            out.extend_from_slice(&n.lambdas);
            for f in &n.factors {
                out.extend_from_slice(f.data());
            }
        }
        Network::Rnn(n) => {
            for c in &n.cells {
                out.extend_from_slice(c.input.data());
                out.extend_from_slice(c.core.data());
            }
        }
    }
    out
}

pub fn set_params(net: &mut Network, values: &[f64]) -> Result<()> {
    if values.len() != param_count(net) {
        return Err(invalid!("{} values for {} parameters", values.len(), param_count(net)));
    }
    let mut rest = values;
    let mut take = |dst: &mut [f64]| {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    };
    match net {
        Network::Shallow(n) => {
            take(&mut n.lambdas);
            for f in &mut n.factors {
                take(f.data_mut());
            }
        }
        Network::Rnn(n) => {
            for c in &mut n.cells {
                take(c.input.data_mut());
                take(c.core.data_mut());
            }
        }
    }
    Ok(())
}

/// Gradient of `upstream * score(X)` with respect to the weights, laid out
/// as in [`params`]. Non-differentiable points use the fixed subgradients of
/// [`Xi::subgradient`]; the initial hidden state is a constant.
pub fn grad(net: &Network, feats: &[Vec<f64>], upstream: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; param_count(net)];
    accumulate_grad(net, feats, upstream, &mut out)?;
    Ok(out)
}

fn accumulate_grad(net: &Network, feats: &[Vec<f64>], upstream: f64, out: &mut [f64]) -> Result<()> {
    if feats.len() != net.len() {
        return Err(invalid!("sequence length {}, network expects {}", feats.len(), net.len()));
    }
    match net {
        Network::Shallow(n) => shallow_grad(n, feats, upstream, out),
        Network::Rnn(n) => rnn_grad(n, feats, upstream, out),
    }
    Ok(())
}

fn shallow_grad(net: &ShallowNet, feats: &[Vec<f64>], upstream: f64, out: &mut [f64]) {
    let (rank, steps) = (net.rank(), net.len());
    let xi = net.xi;
    let mut accs = vec![0.0; steps + 1];
    let mut projs = vec![0.0; steps];
    for r in 0..rank {
        accs[0] = xi.unit();
        for t in 0..steps {
            projs[t] = net.projection(t, r, &feats[t]);
            accs[t + 1] = xi.apply2(accs[t], projs[t]);
        }
        out[r] += upstream * accs[steps];
        let mut d = upstream * net.lambdas[r];
        for t in (0..steps).rev() {
            let (da, dp) = xi.subgradient(accs[t], projs[t]);
            let g = d * dp;
            if g != 0.0 {
                let base = rank + t * feats[t].len() * rank;
                for (l, f) in feats[t].iter().enumerate() {
                    out[base + l * rank + r] += g * f;
                }
            }
            d *= da;
        }
    }
}

fn rnn_grad(net: &RnnNet, feats: &[Vec<f64>], upstream: f64, out: &mut [f64]) {
    let xi = net.xi;
    let offsets: Vec<usize> = net
        .cells
        .iter()
        .scan(0, |acc, c| {
            let o = *acc;
            *acc += c.input.len() + c.core.len();
            Some(o)
        })
        .collect();
    let mut hs = vec![vec![net.h0]];
    let mut ps = Vec::with_capacity(net.len());
    for (t, f) in feats.iter().enumerate() {
        let cell = net.cell(t);
        let p = cell.input.matvec(f).expect("validated shapes");
        let h = step(xi, cell, &p, &hs[t]);
        ps.push(p);
        hs.push(h);
    }
    let mut delta = vec![upstream];
    for t in (0..net.len()).rev() {
        let cell = net.cell(t);
        let (l, rp, rn) = (cell.rows(), cell.rank_in(), cell.rank_out());
        let m = cell.input.shape()[1];
        let off = offsets[net.cell_index(t)];
        let core_off = off + l * m;
        let (h, p) = (&hs[t], &ps[t]);
        let g = cell.core.data();
        let mut dh = vec![0.0; rp];
        let mut dp = vec![0.0; l];
        for i in 0..l {
            for j in 0..rp {
                let v = xi.apply2(p[i], h[j]);
                let (a, b) = xi.subgradient(p[i], h[j]);
                let base = (i * rp + j) * rn;
                let mut s = 0.0;
                for k in 0..rn {
                    out[core_off + base + k] += delta[k] * v;
                    s += delta[k] * g[base + k];
                }
                dp[i] += s * a;
                dh[j] += s * b;
            }
        }
        for i in 0..l {
            if dp[i] != 0.0 {
                for (x, fl) in out[off + i * m..off + (i + 1) * m].iter_mut().zip(&feats[t]) {
                    *x += dp[i] * fl;
                }
            }
        }
        delta = dh;
    }
}

fn step(xi: Xi, cell: &RnnCell, p: &[f64], h: &[f64]) -> Vec<f64> {
    let (rp, rn) = (cell.rank_in(), cell.rank_out());
    let g = cell.core.data();
    let mut out = vec![0.0; rn];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &hj) in h.iter().enumerate() {
            let v = xi.apply2(pi, hj);
            for (o, gv) in out.iter_mut().zip(&g[(i * rp + j) * rn..(i * rp + j + 1) * rn]) {
                *o += gv * v;
            }
        }
    }
    out
}

/// Distance of the forward pass from the nearest non-differentiable point of
/// `xi`, minimised over every operator application.
pub fn kink_margin(net: &Network, feats: &[Vec<f64>]) -> f64 {
    let mut margin = f64::INFINITY;
    match net {
        Network::Shallow(n) => {
            for r in 0..n.rank() {
                let mut acc = n.xi.unit();
                for (t, f) in feats.iter().enumerate() {
                    let p = n.projection(t, r, f);
                    margin = margin.min(n.xi.kink_distance(acc, p));
                    acc = n.xi.apply2(acc, p);
                }
            }
        }
        Network::Rnn(n) => {
            let mut h = vec![n.h0];
            for (t, f) in feats.iter().enumerate() {
                let cell = n.cell(t);
                let p = cell.input.matvec(f).expect("validated shapes");
                for &pi in &p {
                    for &hj in &h {
                        margin = margin.min(n.xi.kink_distance(pi, hj));
                    }
                }
                h = step(n.xi, cell, &p, &h);
            }
        }
    }
    margin
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Label 1 when some template appears at two adjacent positions.
    #[default]
    RepeatedAdjacentPair,
}

impl Rule {
    pub fn label(self, seq: &[usize]) -> usize {
        match self {
            Rule::RepeatedAdjacentPair => seq.windows(2).any(|w| w[0] == w[1]) as usize,
        }
    }

    pub fn classes(self) -> usize {
        2
    }
}

/// Sequences of template indices with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub m: usize,
    pub t: usize,
    pub rule: Rule,
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    /// `n` uniformly random sequences; regenerating with the same arguments
    /// gives the same data.
    pub fn generate(m: usize, t: usize, n: usize, rule: Rule, seed: u64) -> Result<Self> {
        if m == 0 || t == 0 {
            return Err(invalid!("M and T must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences: Vec<Vec<usize>> = (0..n).map(|_| (0..t).map(|_| rng.gen_range(0..m)).collect()).collect();
        let labels = sequences.iter().map(|s| rule.label(s)).collect();
        Ok(Self { m, t, rule, sequences, labels })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fraction of examples in each class.
    pub fn class_balance(&self) -> Vec<f64> {
        let k = self.rule.classes();
        let mut counts = vec![0usize; k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.len().max(1) as f64).collect()
    }
}

/// One score network per class; logits go through a softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub nets: Vec<Network>,
}

impl Classifier {
    pub fn new(nets: Vec<Network>) -> Result<Self> {
        let first = nets.first().ok_or_else(|| invalid!("classifier needs at least one network"))?;
        let n = param_count(first);
        if nets.iter().any(|x| param_count(x) != n || x.len() != first.len()) {
            return Err(invalid!("class networks must be structurally identical"));
        }
        Ok(Self { nets })
    }

    pub fn logits(&self, feats: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.nets.iter().map(|n| n.score_features(feats)).collect()
    }

    pub fn predict(&self, feats: &[Vec<f64>]) -> Result<usize> {
        let z = self.logits(feats)?;
        Ok(argmax(&z))
    }

    pub fn params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(params).collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let mut rest = values;
        for n in &mut self.nets {
            let (head, tail) = rest.split_at(param_count(n).min(rest.len()));
            set_params(n, head)?;
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(invalid!("{} surplus parameter values", rest.len()));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy and its gradient over the whole dataset.
    pub fn loss_and_grad(&self, data: &ToyDataset) -> Result<(f64, Vec<f64>)> {
        let idx: Vec<usize> = (0..data.len()).collect();
        self.loss_and_grad_on(data, &idx)
    }

    /// Mean loss and gradient over the examples `idx` of `data`.
    pub fn loss_and_grad_on(&self, data: &ToyDataset, idx: &[usize]) -> Result<(f64, Vec<f64>)> {
        let sizes: Vec<usize> = self.nets.iter().map(param_count).collect();
        let total: usize = sizes.iter().sum();
        // fixed chunks summed in order keep the result independent of threads
        let parts = idx
            .par_chunks(64)
            .map(|chunk| {
                let mut loss = 0.0;
                let mut g = vec![0.0; total];
                for &e in chunk {
                    let feats = one_hot_feats(data.m, &data.sequences[e]);
                    let z = self.logits(&feats)?;
                    let p = softmax(&z);
                    let y = data.labels[e];
                    loss += logsumexp(&z) - z[y];
                    let mut off = 0;
                    for (k, net) in self.nets.iter().enumerate() {
                        let up = p[k] - (k == y) as u8 as f64;
                        if up != 0.0 {
                            accumulate_grad(net, &feats, up, &mut g[off..off + sizes[k]])?;
                        }
                        off += sizes[k];
                    }
                }
                Ok((loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = idx.len().max(1) as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; total];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for a in &mut grad {
            *a /= n;
        }
        Ok((loss / n, grad))
    }

    pub fn accuracy(&self, data: &ToyDataset) -> Result<f64> {
        Ok(self.evaluate(data)?.1)
    }

    /// Mean loss and accuracy, forward passes only.
    pub fn evaluate(&self, data: &ToyDataset) -> Result<(f64, f64)> {
        let per = data
            .sequences
            .par_iter()
            .zip(&data.labels)
            .map(|(s, &y)| {
                let z = self.logits(&one_hot_feats(data.m, s))?;
                Ok((logsumexp(&z) - z[y], (argmax(&z) == y) as usize))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = data.len().max(1) as f64;
        let loss: f64 = per.iter().map(|p| p.0).sum();
        let correct: usize = per.iter().map(|p| p.1).sum();
        Ok((loss / n, correct as f64 / n))
    }
}

fn one_hot_feats(m: usize, seq: &[usize]) -> Vec<Vec<f64>> {
    seq.iter().map(|&i| (0..m).map(|j| (i == j) as u8 as f64).collect()).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    best
}

fn logsumexp(z: &[f64]) -> f64 {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + z.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Rnn,
    Shallow,
}

fn d_m() -> usize {
    8
}
fn d_t() -> usize {
    6
}
fn d_rank() -> usize {
    8
}
fn d_xi() -> Xi {
    Xi::RectMax
}
fn d_train() -> usize {
    4000
}
fn d_test() -> usize {
    1000
}
fn d_epochs() -> usize {
    200
}
fn d_step() -> f64 {
    0.015
}
fn d_batch() -> Option<usize> {
    Some(25)
}
fn d_init() -> f64 {
    0.7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "M", default = "d_m")]
    pub m: usize,
    #[serde(rename = "T", default = "d_t")]
    pub t: usize,
    #[serde(default)]
    pub arch: Arch,
    /// TT-rank for RNNs, CP-rank for shallow networks.
    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default = "d_xi")]
    pub xi: Xi,
    #[serde(default)]
    pub shared: bool,
    #[serde(default)]
    pub rule: Rule,
    #[serde(default = "d_train")]
    pub n_train: usize,
    #[serde(default = "d_test")]
    pub n_test: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_step")]
    pub step: f64,
    /// Multiplies the default `1 / sqrt(fan_in)` initialization scale.
    #[serde(default = "d_init")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Examples per update; an epoch is one pass over the shuffled
    /// training set. Absent means full-batch.
    #[serde(default = "d_batch")]
    pub batch_size: Option<usize>,
    /// Rows `L` of the RNN input matrices; defaults to `M`.
    #[serde(default, rename = "L")]
    pub input_rows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.m == 0 || self.t == 0 || self.rank == 0 {
            return Err(invalid!("M, T and rank must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(invalid!("batch_size must be positive"));
        }
        if self.input_rows == Some(0) {
            return Err(invalid!("L must be positive"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(invalid!("train and test sets must be non-empty"));
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(invalid!("step must be finite and non-negative, got {}", self.step));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(invalid!("init_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
    let d = Normal::new(0.0, std).map_err(|e| invalid!("{e}"))?;
    DenseTensor::from_fn(shape, |_| d.sample(rng))
}

/// Network drawn from `normal(0, init_scale / sqrt(fan_in))` per weight
/// group, with the identity feature map on template indices.
pub fn init_network(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Network> {
    let (m, t, r, s) = (cfg.m, cfg.t, cfg.rank, cfg.init_scale);
    let fm = FeatureMap::identity(m);
    match cfg.arch {
        Arch::Shallow => {
            let lambdas = normal(&[r], s / (r as f64).sqrt(), rng)?.into_data();
            let factors = (0..t).map(|_| normal(&[m, r], s / (m as f64).sqrt(), rng)).collect::<Result<Vec<_>>>()?;
            Ok(ShallowNet::new(cfg.xi, lambdas, factors, fm)?.into())
        }
        Arch::Rnn => {
            let l = cfg.input_rows.unwrap_or(m);
            let mut cell = |rp: usize, rn: usize| -> Result<RnnCell> {
                Ok(RnnCell {
                    input: normal(&[l, m], s / (m as f64).sqrt(), rng)?,
                    core: normal(&[l, rp, rn], s / ((l * rp) as f64).sqrt(), rng)?,
                })
            };
            if cfg.shared && t >= 3 {
                let (a, b, c) = (cell(1, r)?, cell(r, r)?, cell(r, 1)?);
                return Ok(RnnNet::new_shared(cfg.xi, t, a, b, c, fm)?.into());
            }
            let cells = (0..t)
                .map(|k| cell(if k == 0 { 1 } else { r }, if k + 1 == t { 1 } else { r }))
                .collect::<Result<Vec<_>>>()?;
            Ok(RnnNet::new(cfg.xi, cells, fm)?.into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub metrics: Vec<EpochMetrics>,
    pub param_count: usize,
}

impl TrainOutcome {
    pub fn final_test_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.test_accuracy)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for m in &self.metrics {
            out.serialize(m)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Epochs during which a loss increase undoes the step and halves the step
/// size.
const WARMUP_EPOCHS: usize = 10;

/// Mini-batch gradient descent on the toy task, one shuffled pass per epoch.
/// Row `e` of the metrics is measured before epoch `e + 1`; the last row is
/// after the final epoch.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.check()?;
    let train = ToyDataset::generate(cfg.m, cfg.t, cfg.n_train, cfg.rule, cfg.seed)?;
    let test = ToyDataset::generate(cfg.m, cfg.t, cfg.n_test, cfg.rule, cfg.seed ^ 0x5EED_7E57)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let nets = (0..cfg.rule.classes()).map(|_| init_network(cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
    let mut clf = Classifier::new(nets)?;
    let count = clf.params().len();

    let mut step = cfg.step;
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut theta = clf.params();
    let (mut loss, mut train_acc) = clf.evaluate(&train)?;
    guard(loss, 0)?;
    let batch = cfg.batch_size.unwrap_or(train.len()).clamp(1, train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..=cfg.epochs {
        metrics.push(EpochMetrics {
            epoch,
            loss,
            train_accuracy: train_acc,
            test_accuracy: clf.accuracy(&test)?,
            step,
        });
        if epoch == cfg.epochs {
            break;
        }
        order.shuffle(&mut rng);
        loop {
            let mut next = theta.clone();
            for chunk in order.chunks(batch) {
                clf.set_params(&next)?;
                let (_, g) = clf.loss_and_grad_on(&train, chunk)?;
                for (w, d) in next.iter_mut().zip(&g) {
                    *w -= step * d;
                }
            }
            clf.set_params(&next)?;
            let (l2, acc2) = clf.evaluate(&train)?;
            // early epochs retry with a halved step instead of accepting a worse loss
            if epoch < WARMUP_EPOCHS && !(l2 <= loss) && step > cfg.step * 1e-6 {
                step /= 2.0;
                continue;
            }
            guard(l2, epoch + 1)?;
            theta = next;
            loss = l2;
            train_acc = acc2;
            break;
        }
    }
    Ok(TrainOutcome { classifier: clf, metrics, param_count: count })
}

fn guard(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("loss {loss} at epoch {epoch}")))
    }
}

/// Smallest shallow rank whose parameter count reaches `target`.
pub fn matched_shallow_rank(m: usize, t: usize, target: usize) -> usize {
    target.div_ceil(1 + t * m).max(1)
}
