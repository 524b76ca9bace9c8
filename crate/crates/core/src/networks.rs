//! Feature maps, generalized shallow networks and generalized RNNs.
//!
//! A shallow network scores a sequence as
//! `sum_r lambda_r xi(<f(x_1), v_r^(1)>, ..., <f(x_T), v_r^(T)>)`,
//! and an RNN folds `h'_k = sum_{i,j} G_{ijk} xi((C f(x))_i, h_j)` over the
//! sequence starting from the unit of `xi`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{dot, outer, DenseTensor};
use crate::xi::Xi;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// One element of an input sequence: a raw vector for affine feature maps,
/// or a template index for template-index feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Token {
    Index(usize),
    Vector(Vec<f64>),
}

impl From<usize> for Token {
    fn from(i: usize) -> Self {
        Token::Index(i)
    }
}

/// Converts a slice of template indices into a token sequence.
pub fn index_seq(indices: &[usize]) -> Vec<Token> {
    indices.iter().copied().map(Token::Index).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    /// `f(x) = sigma(A x + b)` with `A` of shape `M x N`.
    Affine { a: DenseTensor, b: Vec<f64>, sigma: Activation },
    /// `f(x^(i)) = row i of F`, `F` square `M x M`.
    Template { f: DenseTensor },
}

impl FeatureMap {
    pub fn identity(m: usize) -> Self {
        FeatureMap::Template { f: DenseTensor::identity(m) }
    }

    /// Output dimension `M`.
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Affine { a, .. } => a.shape()[0],
            FeatureMap::Template { f } => f.shape()[0],
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            FeatureMap::Affine { a, b, .. } => {
                if a.order() != 2 || a.shape()[0] != b.len() {
                    return Err(shape_err!("affine map A {:?} with bias of length {}", a.shape(), b.len()));
                }
            }
            FeatureMap::Template { f } => {
                if f.order() != 2 || f.shape()[0] != f.shape()[1] {
                    return Err(shape_err!("template feature matrix must be square, got {:?}", f.shape()));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &Token) -> Result<Vec<f64>> {
        match (self, x) {
            (FeatureMap::Affine { a, b, sigma }, Token::Vector(v)) => {
                let z = a.matvec(v)?;
                Ok(z.iter().zip(b).map(|(z, b)| sigma.apply(z + b)).collect())
            }
            (FeatureMap::Template { f }, Token::Index(i)) => {
                if *i >= f.shape()[0] {
                    return Err(invalid!("template index {i} out of range 0..{}", f.shape()[0]));
                }
                Ok(f.row(*i).to_vec())
            }
            (FeatureMap::Affine { .. }, Token::Index(_)) => Err(invalid!("affine feature map expects vector inputs")),
            (FeatureMap::Template { .. }, Token::Vector(_)) => {
                Err(invalid!("template feature map expects index inputs"))
            }
        }
    }

    pub fn eval_seq(&self, xs: &[Token]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.eval(x)).collect()
    }
}

/// `Phi(X) = f(x_1) x ... x f(x_T)`.
pub fn feature_tensor(fm: &FeatureMap, xs: &[Token]) -> Result<DenseTensor> {
    if xs.is_empty() {
        return Err(invalid!("feature tensor of an empty sequence"));
    }
    let mut phi = DenseTensor::scalar(1.0);
    for x in xs {
        phi = outer(&phi, &DenseTensor::vector(fm.eval(x)?)?)?;
    }
    Ok(phi)
}

/// Generalized shallow network of rank `R`; `factors[t]` is `M x R` with
/// column `r` holding `v_r^(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowNet {
    pub xi: Xi,
    pub lambdas: Vec<f64>,
    pub factors: Vec<DenseTensor>,
    pub feature_map: FeatureMap,
}

impl ShallowNet {
    pub fn new(xi: Xi, lambdas: Vec<f64>, factors: Vec<DenseTensor>, feature_map: FeatureMap) -> Result<Self> {
        let net = Self { xi, lambdas, factors, feature_map };
        net.check()?;
        Ok(net)
    }

    pub fn check(&self) -> Result<()> {
        into_result(self.validate())
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Err(e) = self.feature_map.check() {
            out.push(Violation::new("feature_map", e.to_string()));
        }
        let r = self.lambdas.len();
        if r == 0 {
            out.push(Violation::new("lambdas", "rank must be at least 1"));
        }
        if self.factors.is_empty() {
            out.push(Violation::new("factors", "sequence length must be at least 1"));
        }
        let m = self.feature_map.dim();
        for (t, f) in self.factors.iter().enumerate() {
            if f.shape() != [m, r] {
                out.push(Violation::new(
                    format!("factors[{t}]"),
                    format!("shape {:?}, expected [{m}, {r}]", f.shape()),
                ));
            }
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn score(&self, xs: &[Token]) -> Result<f64> {
        self.check_len(xs.len())?;
        self.score_features(&self.feature_map.eval_seq(xs)?)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(invalid!("sequence length {n}, network expects {}", self.len()));
        }
        Ok(())
    }

    /// Score from precomputed feature vectors. The xi-fold starts from the
    /// unit so that `T = 1` evaluates `xi(a, u)`, matching the RNN.
    pub fn score_features(&self, feats: &[Vec<f64>]) -> Result<f64> {
        self.check_len(feats.len())?;
        let mut total = 0.0;
        for r in 0..self.rank() {
            let mut acc = self.xi.unit();
            for (t, f) in feats.iter().enumerate() {
                acc = self.xi.apply2(acc, self.projection(t, r, f));
            }
            total += self.lambdas[r] * acc;
        }
        Ok(total)
    }

    /// `<f, v_r^(t)>`.
    pub fn projection(&self, t: usize, r: usize, f: &[f64]) -> f64 {
        let v = &self.factors[t];
        let rank = self.rank();
        f.iter().enumerate().map(|(l, x)| x * v.data()[l * rank + r]).sum()
    }
}

/// Weights used at one time step: input matrix `C` (`L x M`) and core `G`
/// (`L x R_prev x R_next`).
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCell {
    pub input: DenseTensor,
    pub core: DenseTensor,
}

impl RnnCell {
    pub fn rows(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn rank_in(&self) -> usize {
        self.core.shape()[1]
    }

    pub fn rank_out(&self) -> usize {
        self.core.shape()[2]
    }
}

/// Generalized RNN.
///
/// `cells` holds one cell per time step, except for shared networks with
/// `T >= 3`, which store exactly three cells: first, shared middle, last.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnNet {
    pub xi: Xi,
    pub steps: usize,
    pub cells: Vec<RnnCell>,
    pub shared: bool,
    pub h0: f64,
    pub feature_map: FeatureMap,
}

impl RnnNet {
    /// Unshared network with one cell per step.
    pub fn new(xi: Xi, cells: Vec<RnnCell>, feature_map: FeatureMap) -> Result<Self> {
        let net = Self { xi, steps: cells.len(), cells, shared: false, h0: xi.unit(), feature_map };
        net.check()?;
        Ok(net)
    }

    /// Shared network of length `steps >= 3` whose middle steps reuse `mid`.
    pub fn new_shared(
        xi: Xi,
        steps: usize,
        first: RnnCell,
        mid: RnnCell,
        last: RnnCell,
        feature_map: FeatureMap,
    ) -> Result<Self> {
        if steps < 3 {
            return Err(invalid!("shared networks need at least 3 steps, got {steps}"));
        }
        let net = Self { xi, steps, cells: vec![first, mid, last], shared: true, h0: xi.unit(), feature_map };
        net.check()?;
        Ok(net)
    }

    pub fn is_stored_shared(&self) -> bool {
        self.shared && self.steps >= 3
    }

    /// Storage slot used at step `t` (0-based).
    pub fn cell_index(&self, t: usize) -> usize {
        if self.is_stored_shared() {
            if t == 0 {
                0
            } else if t + 1 == self.steps {
                2
            } else {
                1
            }
        } else {
            t
        }
    }

    pub fn cell(&self, t: usize) -> &RnnCell {
        &self.cells[self.cell_index(t)]
    }

    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn input_dim(&self) -> usize {
        self.feature_map.dim()
    }

    /// Full rank list `R_0, R_1, ..., R_T`.
    pub fn rank_chain(&self) -> Vec<usize> {
        let mut out = vec![self.cell(0).rank_in()];
        out.extend((0..self.steps).map(|t| self.cell(t).rank_out()));
        out
    }

    /// Internal ranks `R_1 .. R_{T-1}`.
    pub fn ranks(&self) -> Vec<usize> {
        let chain = self.rank_chain();
        chain[1..chain.len() - 1].to_vec()
    }

    /// Copy with every step stored explicitly.
    pub fn unshared(&self) -> RnnNet {
        RnnNet {
            xi: self.xi,
            steps: self.steps,
            cells: (0..self.steps).map(|t| self.cell(t).clone()).collect(),
            shared: false,
            h0: self.h0,
            feature_map: self.feature_map.clone(),
        }
    }

    pub fn check(&self) -> Result<()> {
        into_result(self.validate())
    }

    /// Structural diagnostics; an empty list means the network is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Err(e) = self.feature_map.check() {
            out.push(Violation::new("feature_map", e.to_string()));
        }
        if self.steps == 0 {
            out.push(Violation::new("steps", "sequence length must be at least 1"));
            return out;
        }
        let expected_cells = if self.is_stored_shared() { 3 } else { self.steps };
        if self.cells.len() != expected_cells {
            out.push(Violation::new("cells", format!("{} cells stored, expected {expected_cells}", self.cells.len())));
            return out;
        }
        let m = self.input_dim();
        for (s, cell) in self.cells.iter().enumerate() {
            if cell.input.order() != 2 || cell.input.shape()[1] != m {
                out.push(Violation::new(
                    format!("cell {s}"),
                    format!("input matrix {:?} must be L x {m}", cell.input.shape()),
                ));
                continue;
            }
            if cell.core.order() != 3 {
                out.push(Violation::new(
                    format!("cell {s}"),
                    format!("core {:?} must have order 3", cell.core.shape()),
                ));
                continue;
            }
            if cell.core.shape()[0] != cell.input.shape()[0] {
                out.push(Violation::new(
                    format!("cell {s}"),
                    format!("core has {} input rows but C has {}", cell.core.shape()[0], cell.input.shape()[0]),
                ));
            }
        }
        if !out.is_empty() {
            return out;
        }
        if self.cell(0).rank_in() != 1 {
            out.push(Violation::new("core 1", "R_0 must be 1"));
        }
        if self.cell(self.steps - 1).rank_out() != 1 {
            out.push(Violation::new(format!("core {}", self.steps), "R_T must be 1"));
        }
        for t in 0..self.steps - 1 {
            let (a, b) = (self.cell(t).rank_out(), self.cell(t + 1).rank_in());
            if a != b {
                out.push(Violation::new(
                    format!("cores {}, {}", t + 1, t + 2),
                    format!("rank chain broken: {a} vs {b}"),
                ));
            }
        }
        let unit = self.xi.unit();
        if self.h0 != unit {
            out.push(Violation::new(
                "h0",
                format!("initial hidden state {} differs from the unit {} of {}", self.h0, unit, self.xi),
            ));
        }
        out
    }

    pub fn score(&self, xs: &[Token]) -> Result<f64> {
        self.check_len(xs.len())?;
        self.score_features(&self.feature_map.eval_seq(xs)?)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.steps {
            return Err(invalid!("sequence length {n}, network expects {}", self.steps));
        }
        Ok(())
    }

    pub fn score_features(&self, feats: &[Vec<f64>]) -> Result<f64> {
        self.check_len(feats.len())?;
        let mut h = vec![self.h0];
        for (t, f) in feats.iter().enumerate() {
            let cell = self.cell(t);
            h = rnn_step(self.xi, &cell.input, &cell.core, &h, f)?;
        }
        Ok(h[0])
    }

    /// Hidden states `h^(1) .. h^(T)`.
    pub fn hidden_states(&self, feats: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_len(feats.len())?;
        let mut h = vec![self.h0];
        let mut out = Vec::with_capacity(self.steps);
        for (t, f) in feats.iter().enumerate() {
            let cell = self.cell(t);
            h = rnn_step(self.xi, &cell.input, &cell.core, &h, f)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// One recurrence step: `h'_k = sum_{i,j} G_{ijk} xi((C fx)_i, h_j)`.
pub fn rnn_step(xi: Xi, c: &DenseTensor, g: &DenseTensor, h: &[f64], fx: &[f64]) -> Result<Vec<f64>> {
    if c.order() != 2 || g.order() != 3 {
        return Err(shape_err!("C {:?} / G {:?}", c.shape(), g.shape()));
    }
    let (l, rp, rn) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    if c.shape() != [l, fx.len()] || h.len() != rp {
        return Err(shape_err!("C {:?}, G {:?}, h [{}], f(x) [{}]", c.shape(), g.shape(), h.len(), fx.len()));
    }
    let gd = g.data();
    let mut out = vec![0.0; rn];
    for i in 0..l {
        let ci = dot(c.row(i), fx);
        for (j, &hj) in h.iter().enumerate() {
            let v = xi.apply2(ci, hj);
            let grow = &gd[(i * rp + j) * rn..(i * rp + j + 1) * rn];
            for (o, gv) in out.iter_mut().zip(grow) {
                *o += gv * v;
            }
        }
    }
    Ok(out)
}

/// A structural problem found by `validate`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl Violation {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self { location: location.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

fn into_result(v: Vec<Violation>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        Err(shape_err!("{}", msg.join("; ")))
    }
}

/// Either kind of score network.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Shallow(ShallowNet),
    Rnn(RnnNet),
}

impl Network {
    pub fn xi(&self) -> Xi {
        match self {
            Network::Shallow(n) => n.xi,
            Network::Rnn(n) => n.xi,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Network::Shallow(n) => n.len(),
            Network::Rnn(n) => n.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_map(&self) -> &FeatureMap {
        match self {
            Network::Shallow(n) => &n.feature_map,
            Network::Rnn(n) => &n.feature_map,
        }
    }

    pub fn score(&self, xs: &[Token]) -> Result<f64> {
        match self {
            Network::Shallow(n) => n.score(xs),
            Network::Rnn(n) => n.score(xs),
        }
    }

    pub fn score_features(&self, feats: &[Vec<f64>]) -> Result<f64> {
        match self {
            Network::Shallow(n) => n.score_features(feats),
            Network::Rnn(n) => n.score_features(feats),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        match self {
            Network::Shallow(n) => n.validate(),
            Network::Rnn(n) => n.validate(),
        }
    }
}

impl From<ShallowNet> for Network {
    fn from(n: ShallowNet) -> Self {
        Network::Shallow(n)
    }
}

impl From<RnnNet> for Network {
    fn from(n: RnnNet) -> Self {
        Network::Rnn(n)
    }
}
