//! Matricization-rank analysis: lower bounds on the width of an equivalent
//! rect_max shallow network, random-network experiments, and a report of
//! constructive property checks.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constructions::{
    net_from_grid_product, rnn_add, rnn_from_grid_relu, shallow_from_grid_relu, thm2_example, thm3_example,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{grid_rnn, grid_shallow, TemplateSet};
use crate::networks::{feature_tensor, index_seq, FeatureMap, RnnCell, RnnNet};
use crate::tensor::{
    inner, matricize, numerical_rank, tt_to_full, DenseTensor, Matricization, RankEstimate, TtCores, DEFAULT_RANK_TOL,
};
use crate::xi::Xi;

/// Odd modes `(1, 3, ..)` as rows, even modes `(2, 4, ..)` as columns.
pub fn odd_even_matricize(g: &DenseTensor) -> Result<Matricization> {
    let t = g.order();
    if t == 0 || !t.is_multiple_of(2) {
        return Err(invalid!("odd/even matricization needs an even order, got {t}"));
    }
    let odd: Vec<usize> = (0..t).step_by(2).collect();
    let even: Vec<usize> = (1..t).step_by(2).collect();
    matricize(g, &odd, &even)
}

/// `ceil(2 * rank / (T * M))`, at least 1 for a nonzero rank and 0 otherwise.
pub fn bound_from_rank(rank: usize, m: usize, t: usize) -> usize {
    if rank == 0 {
        return 0;
    }
    let tm = t * m;
    ((2 * rank).div_ceil(tm)).max(1)
}

/// Matricization rank of a grid tensor and the shallow width it forces.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankBound {
    pub rank: usize,
    pub bound: usize,
    #[serde(skip)]
    pub estimate: RankEstimate,
}

pub fn rank_bound(g: &DenseTensor, tol: f64) -> Result<RankBound> {
    let t = g.order();
    let m = g.shape().first().copied().unwrap_or(0);
    if g.shape().iter().any(|&n| n != m) {
        return Err(invalid!("grid tensor {:?} must have equal mode sizes", g.shape()));
    }
    let estimate = numerical_rank(&odd_even_matricize(g)?, tol)?;
    Ok(RankBound { rank: estimate.rank, bound: bound_from_rank(estimate.rank, m, t), estimate })
}

/// Smallest rank of a rect_max shallow network that can have grid tensor `g`,
/// as implied by its odd/even matricization rank.
pub fn shallow_lower_bound(g: &DenseTensor, tol: f64) -> Result<usize> {
    rank_bound(g, tol).map(|r| r.bound)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightDist {
    Normal {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
    Uniform {
        #[serde(default = "minus_one")]
        low: f64,
        #[serde(default = "one")]
        high: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn minus_one() -> f64 {
    -1.0
}

impl Default for WeightDist {
    fn default() -> Self {
        WeightDist::Normal { mean: 0.0, std: 1.0 }
    }
}

impl WeightDist {
    fn check(&self) -> Result<()> {
        match *self {
            WeightDist::Normal { std, .. } if !(std >= 0.0 && std.is_finite()) => {
                Err(invalid!("normal std must be finite and non-negative, got {std}"))
            }
            WeightDist::Uniform { low, high } if !(low < high) => {
                Err(invalid!("uniform bounds must satisfy low < high, got [{low}, {high}]"))
            }
            _ => Ok(()),
        }
    }

    fn tensor(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
        match *self {
            WeightDist::Normal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| invalid!("{e}"))?;
                DenseTensor::from_fn(shape, |_| d.sample(rng))
            }
            WeightDist::Uniform { low, high } => {
                let d = Uniform::new(low, high);
                DenseTensor::from_fn(shape, |_| d.sample(rng))
            }
        }
    }
}

impl fmt::Display for WeightDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightDist::Normal { mean, std } => write!(f, "normal({mean}, {std})"),
            WeightDist::Uniform { low, high } => write!(f, "uniform({low}, {high})"),
        }
    }
}

fn default_trials() -> usize {
    100
}

fn default_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn default_xi() -> Xi {
    Xi::RectMax
}

/// Parameters of a random-network expressivity experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub ranks: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_xi")]
    pub xi: Xi,
    #[serde(default)]
    pub shared: bool,
    #[serde(default)]
    pub distribution: WeightDist,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub rank_tol: f64,
}

impl ExperimentConfig {
    pub fn new(m: usize, t: usize, ranks: Vec<usize>, trials: usize, xi: Xi, shared: bool) -> Self {
        Self {
            m,
            t,
            ranks,
            trials,
            xi,
            shared,
            distribution: WeightDist::default(),
            seed: 0,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid!("M must be positive"));
        }
        if self.t == 0 || !self.t.is_multiple_of(2) {
            return Err(invalid!("T must be even and positive, got {}", self.t));
        }
        if self.trials == 0 {
            return Err(invalid!("trials must be at least 1"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(invalid!("ranks must be a non-empty list of positive integers"));
        }
        if !(self.rank_tol > 0.0) {
            return Err(invalid!("rank_tol must be positive, got {}", self.rank_tol));
        }
        self.distribution.check()
    }

    /// Seed for one trial; mixes the base seed with the rank slot and trial
    /// index so trials are independent of scheduling.
    pub fn trial_seed(&self, rank_slot: usize, trial: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(((rank_slot as u64) << 32) | trial as u64))
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random RNN with `L = M`, internal ranks all equal to `rank`, and i.i.d.
/// weights from the configured distribution.
pub fn random_rnn(cfg: &ExperimentConfig, rank: usize, seed: u64) -> Result<RnnNet> {
    let (m, t) = (cfg.m, cfg.t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell = |rp: usize, rn: usize| -> Result<RnnCell> {
        Ok(RnnCell {
            input: cfg.distribution.tensor(&[m, m], &mut rng)?,
            core: cfg.distribution.tensor(&[m, rp, rn], &mut rng)?,
        })
    };
    let fm = FeatureMap::identity(m);
    if cfg.shared && t >= 3 {
        let first = cell(1, rank)?;
        let mid = cell(rank, rank)?;
        let last = cell(rank, 1)?;
        return RnnNet::new_shared(cfg.xi, t, first, mid, last, fm);
    }
    let cells = (0..t)
        .map(|s| {
            let rp = if s == 0 { 1 } else { rank };
            let rn = if s + 1 == t { 1 } else { rank };
            cell(rp, rn)
        })
        .collect::<Result<Vec<_>>>()?;
    RnnNet::new(cfg.xi, cells, fm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    /// Configured TT-rank of the network.
    pub r: usize,
    pub trial: usize,
    pub seed: u64,
    pub matricization_rank: usize,
    pub bound: usize,
    /// The five largest singular values.
    pub top: Vec<f64>,
    /// The five smallest singular values.
    pub bottom: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub xi: Xi,
    pub shared: bool,
    #[serde(rename = "R")]
    pub r: usize,
    pub bound: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankSummary {
    #[serde(rename = "R")]
    pub r: usize,
    pub mean_bound: f64,
    pub min_bound: usize,
    pub max_bound: usize,
    pub mean_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub config: ExperimentConfig,
    pub distribution: String,
    pub records: Vec<TrialRecord>,
    pub histogram: Vec<HistogramRow>,
    pub summary: Vec<RankSummary>,
}

impl RankReport {
    /// Mean bound is non-decreasing along the configured rank list.
    pub fn means_non_decreasing(&self) -> bool {
        self.summary.windows(2).all(|w| w[1].mean_bound >= w[0].mean_bound)
    }

    pub fn mean_for(&self, r: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.r == r).map(|s| s.mean_bound)
    }

    pub fn write_histogram_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.histogram {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["R", "trial", "seed", "matricization_rank", "bound", "top", "bottom"])?;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";");
        for r in &self.records {
            out.write_record([
                r.r.to_string(),
                r.trial.to_string(),
                r.seed.to_string(),
                r.matricization_rank.to_string(),
                r.bound.to_string(),
                join(&r.top),
                join(&r.bottom),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Configuration, distribution and per-rank means.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a ExperimentConfig,
            distribution: &'a str,
            summary: &'a [RankSummary],
            means_non_decreasing: bool,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            config: &self.config,
            distribution: &self.distribution,
            summary: &self.summary,
            means_non_decreasing: self.means_non_decreasing(),
        })?)
    }
}

pub fn expressivity_experiment(cfg: &ExperimentConfig) -> Result<RankReport> {
    expressivity_experiment_with(cfg, |r, seed| random_rnn(cfg, r, seed))
}

/// Runs the experiment with networks from `build(rank, seed)`. Trials run in
/// parallel and are collected in (rank, trial) order, so the report does not
/// depend on scheduling.
pub fn expressivity_experiment_with<B>(cfg: &ExperimentConfig, build: B) -> Result<RankReport>
where
    B: Fn(usize, u64) -> Result<RnnNet> + Sync,
{
    cfg.check()?;
    let ts = TemplateSet::identity(cfg.m);
    let jobs: Vec<(usize, usize)> =
        (0..cfg.ranks.len()).flat_map(|slot| (0..cfg.trials).map(move |trial| (slot, trial))).collect();
    let records = jobs
        .par_iter()
        .map(|&(slot, trial)| {
            let r = cfg.ranks[slot];
            let seed = cfg.trial_seed(slot, trial);
            let net = build(r, seed)?;
            let g = grid_rnn(&net, &ts)?;
            let rb = rank_bound(&g, cfg.rank_tol)?;
            Ok(TrialRecord {
                r,
                trial,
                seed,
                matricization_rank: rb.rank,
                bound: rb.bound,
                top: rb.estimate.head(5).to_vec(),
                bottom: rb.estimate.tail(5).to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let max_bound = records.iter().map(|r| r.bound).max().unwrap_or(0);
    let min_bound = records.iter().map(|r| r.bound).min().unwrap_or(0).min(1);
    let mut histogram = Vec::new();
    let mut summary = Vec::new();
    for (slot, &r) in cfg.ranks.iter().enumerate() {
        let group = &records[slot * cfg.trials..(slot + 1) * cfg.trials];
        for bound in min_bound..=max_bound {
            let count = group.iter().filter(|x| x.bound == bound).count();
            histogram.push(HistogramRow { xi: cfg.xi, shared: cfg.shared, r, bound, count });
        }
        let n = group.len() as f64;
        summary.push(RankSummary {
            r,
            mean_bound: group.iter().map(|x| x.bound as f64).sum::<f64>() / n,
            min_bound: group.iter().map(|x| x.bound).min().unwrap_or(0),
            max_bound: group.iter().map(|x| x.bound).max().unwrap_or(0),
            mean_rank: group.iter().map(|x| x.matricization_rank as f64).sum::<f64>() / n,
        });
    }
    Ok(RankReport { config: cfg.clone(), distribution: cfg.distribution.to_string(), records, histogram, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.status, self.name, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub lines: Vec<CheckLine>,
}

impl VerifyReport {
    pub fn any_failed(&self) -> bool {
        self.lines.iter().any(|l| l.status == Status::Fail)
    }

    pub fn status_of(&self, name: &str) -> Option<Status> {
        self.lines.iter().find(|l| l.name == name).map(|l| l.status)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub m: usize,
    pub r: usize,
    pub t: usize,
    pub trials: usize,
    pub eps_scale: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { m: 3, r: 3, t: 4, trials: 50, eps_scale: 1e-3, seed: 0 }
    }
}

fn line(name: &str, status: Status, detail: impl Into<String>) -> CheckLine {
    CheckLine { name: name.to_string(), status, detail: detail.into() }
}

fn from_result(name: &str, r: Result<CheckLine>) -> CheckLine {
    r.unwrap_or_else(|e| match e {
        Error::Capacity { .. } => line(name, Status::Skip, e.to_string()),
        _ => line(name, Status::Fail, e.to_string()),
    })
}

/// Expected odd/even matricization rank of the `thm2_example` grid.
pub fn thm2_expected_rank(m: usize, r: usize, t: usize) -> usize {
    let half = (t / 2) as u32;
    if r >= m {
        m.pow(half)
    } else {
        r.pow(half) + 1
    }
}

/// Runs every constructive check and reports one line per property. Failures
/// are report content, never errors.
pub fn verify_theorems(cfg: &VerifyConfig) -> VerifyReport {
    let mut lines = Vec::new();
    if cfg.m == 0 || cfg.r == 0 || cfg.t == 0 || cfg.trials == 0 {
        lines.push(line("config", Status::Fail, "M, R, T and trials must be positive"));
        return VerifyReport { lines };
    }
    lines.push(from_result("tt_score_equivalence", check_tt_score(cfg)));
    lines.push(from_result("universality_rect_max", check_universality_relu(cfg)));
    lines.push(from_result("universality_product", check_universality_product(cfg)));
    lines.push(from_result("addition_identity", check_addition(cfg)));
    lines.push(from_result("pair_detector_rank", check_pair_detector(cfg)));
    lines.push(from_result("rank_one_open_set", check_rank_one(cfg)));
    VerifyReport { lines }
}

fn rng_for(cfg: &VerifyConfig, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(salt)))
}

fn random_cell(l: usize, m: usize, rp: usize, rn: usize, rng: &mut ChaCha8Rng) -> Result<RnnCell> {
    Ok(RnnCell {
        input: DenseTensor::from_fn(&[l, m], |_| rng.gen_range(-1.0..1.0))?,
        core: DenseTensor::from_fn(&[l, rp, rn], |_| rng.gen_range(-1.0..1.0))?,
    })
}

fn random_net(xi: Xi, m: usize, r: usize, t: usize, rng: &mut ChaCha8Rng) -> Result<RnnNet> {
    let cells = (0..t)
        .map(|s| {
            let rp = if s == 0 { 1 } else { r };
            let rn = if s + 1 == t { 1 } else { r };
            random_cell(m, m, rp, rn, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    RnnNet::new(xi, cells, FeatureMap::identity(m))
}

fn check_tt_score(cfg: &VerifyConfig) -> Result<CheckLine> {
    const NAME: &str = "tt_score_equivalence";
    let mut rng = rng_for(cfg, 1);
    let ts = TemplateSet::identity(cfg.m);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.trials {
        let mut net = random_net(Xi::Product, cfg.m, cfg.r, cfg.t, &mut rng)?;
        for c in &mut net.cells {
            c.input = DenseTensor::identity(cfg.m);
        }
        let w = tt_to_full(&TtCores::new(net.cells.iter().map(|c| c.core.clone()).collect())?)?;
        let g = grid_rnn(&net, &ts)?;
        for flat in 0..g.len() {
            let phi = feature_tensor(&net.feature_map, &index_seq(&g.multi_index(flat)))?;
            let o = inner(&w, &phi)?;
            worst = worst.max((g.data()[flat] - o).abs() / o.abs().max(f64::MIN_POSITIVE));
        }
    }
    let status = if worst <= 1e-10 { Status::Pass } else { Status::Fail };
    Ok(line(NAME, status, format!("{} nets, max relative error {worst:.2e}", cfg.trials)))
}

fn random_int_tensor(m: usize, t: usize, k: i32, rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
    DenseTensor::from_fn(&vec![m; t], |_| rng.gen_range(-k..=k) as f64)
}

fn check_universality_relu(cfg: &VerifyConfig) -> Result<CheckLine> {
    const NAME: &str = "universality_rect_max";
    let mut rng = rng_for(cfg, 2);
    let ts = TemplateSet::identity(cfg.m);
    let trials = cfg.trials.min(10);
    for i in 0..trials {
        let h = random_int_tensor(cfg.m, cfg.t, 3, &mut rng)?;
        let rnn = grid_rnn(&rnn_from_grid_relu(&h, &ts)?, &ts)?;
        let shallow = grid_shallow(&shallow_from_grid_relu(&h, &ts)?, &ts)?;
        if rnn != h || shallow != h {
            return Ok(line(NAME, Status::Fail, format!("tensor {i} not reconstructed exactly")));
        }
    }
    Ok(line(NAME, Status::Pass, format!("{trials} integer tensors reconstructed exactly")))
}

fn check_universality_product(cfg: &VerifyConfig) -> Result<CheckLine> {
    const NAME: &str = "universality_product";
    let mut rng = rng_for(cfg, 3);
    let ts = TemplateSet::identity(cfg.m);
    let mut worst: f64 = 0.0;
    let trials = cfg.trials.min(10);
    for _ in 0..trials {
        let h = DenseTensor::from_fn(&vec![cfg.m; cfg.t], |_| rng.gen_range(-1.0..1.0))?;
        let g = grid_rnn(&net_from_grid_product(&h, &ts, 0.0)?, &ts)?;
        worst = worst.max(g.sub(&h)?.frobenius_norm() / h.frobenius_norm());
    }
    let status = if worst < 1e-9 { Status::Pass } else { Status::Fail };
    Ok(line(NAME, status, format!("{trials} tensors, max relative error {worst:.2e}")))
}

fn check_addition(cfg: &VerifyConfig) -> Result<CheckLine> {
    const NAME: &str = "addition_identity";
    let mut rng = rng_for(cfg, 4);
    let ts = TemplateSet::identity(cfg.m);
    let mut worst: f64 = 0.0;
    for xi in Xi::ALL {
        for _ in 0..cfg.trials {
            let na = random_net(xi, cfg.m, cfg.r, cfg.t, &mut rng)?;
            let nb = random_net(xi, cfg.m, cfg.r, cfg.t, &mut rng)?;
            let (a, b) = (rng.gen_range(-2..=2) as f64, rng.gen_range(-2..=2) as f64);
            let mut expected = grid_rnn(&na, &ts)?.scaled(a);
            expected.add_scaled(b, &grid_rnn(&nb, &ts)?)?;
            let got = grid_rnn(&rnn_add(&na, &nb, a, b)?, &ts)?;
            worst = worst.max(got.max_abs_diff(&expected)?);
        }
    }
    let status = if worst <= 1e-9 { Status::Pass } else { Status::Fail };
    Ok(line(NAME, status, format!("{} pairs per xi, max abs error {worst:.2e}", cfg.trials)))
}

fn check_pair_detector(cfg: &VerifyConfig) -> Result<CheckLine> {
    const NAME: &str = "pair_detector_rank";
    if !cfg.t.is_multiple_of(2) {
        return Ok(line(NAME, Status::Skip, format!("T = {} is odd", cfg.t)));
    }
    let g = grid_rnn(&thm2_example(cfg.m, cfg.r, cfg.t)?, &TemplateSet::identity(cfg.m))?;
    let rb = rank_bound(&g, DEFAULT_RANK_TOL)?;
    let expected = thm2_expected_rank(cfg.m, cfg.r, cfg.t);
    let status = if rb.rank == expected { Status::Pass } else { Status::Fail };
    Ok(line(NAME, status, format!("rank {} (expected {expected}), shallow lower bound {}", rb.rank, rb.bound)))
}

fn check_rank_one(cfg: &VerifyConfig) -> Result<CheckLine> {
    const NAME: &str = "rank_one_open_set";
    let ts = TemplateSet::identity(cfg.m);
    let base = thm3_example(cfg.m, cfg.r, cfg.t, &ts, 0.0, 0)?;
    let expected = 2.0 * ((cfg.m * cfg.r) as f64).powi(cfg.t as i32 - 1);
    let g0 = grid_rnn(&base.rnn, &ts)?;
    if g0.data().iter().any(|&x| x != expected) {
        return Ok(line(NAME, Status::Fail, format!("unperturbed grid is not constant {expected}")));
    }
    let rank_of = |g: &DenseTensor| -> Result<usize> {
        if g.order().is_multiple_of(2) {
            Ok(rank_bound(g, DEFAULT_RANK_TOL)?.rank)
        } else {
            // first mode against the rest
            let rest: Vec<usize> = (1..g.order()).collect();
            Ok(numerical_rank(&matricize(g, &[0], &rest)?, DEFAULT_RANK_TOL)?.rank)
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..cfg.trials {
        let seed = splitmix64(cfg.seed ^ (i as u64 + 1));
        let ex = match thm3_example(cfg.m, cfg.r, cfg.t, &ts, cfg.eps_scale, seed) {
            Ok(ex) => ex,
            Err(Error::OutsideValidity(why)) => {
                return Ok(line(
                    NAME,
                    Status::Skip,
                    format!("eps_scale {} outside validity radius: {why}", cfg.eps_scale),
                ))
            }
            Err(e) => return Err(e),
        };
        let g = grid_rnn(&ex.rnn, &ts)?;
        let rank = rank_of(&g)?;
        let diff = g.max_abs_diff(&grid_shallow(&ex.witness, &ts)?)?;
        worst = worst.max(diff);
        if rank != 1 || diff > 1e-9 {
            return Ok(line(NAME, Status::Fail, format!("trial {i}: rank {rank}, witness difference {diff:.2e}")));
        }
    }
    Ok(line(
        NAME,
        Status::Pass,
        format!(
            "{} perturbed nets of scale {} have rank 1, witness error {worst:.2e}; unperturbed value {expected}",
            cfg.trials, cfg.eps_scale
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ShallowNet;

    #[test]
    fn odd_even_examples() {
        let e = DenseTensor::one_hot(&[2, 2], &[0, 1]).unwrap();
        let m = odd_even_matricize(&e).unwrap();
        assert_eq!(m.data, vec![0.0, 1.0, 0.0, 0.0]);

        let g = grid_rnn(&thm2_example(2, 2, 2).unwrap(), &TemplateSet::identity(2)).unwrap();
        assert_eq!(odd_even_matricize(&g).unwrap().data, vec![0.0, 1.0, 1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = DenseTensor::from_fn(&[2, 3, 2, 3], |_| rng.gen()).unwrap();
        let m = odd_even_matricize(&h).unwrap();
        assert_eq!((m.rows, m.cols), (4, 9));
        for (a, b, c, d) in itertools_product() {
            assert_eq!(m.get(a * 2 + c, b * 3 + d), h.get(&[a, b, c, d]));
        }
        assert!(odd_even_matricize(&DenseTensor::zeros(&[2, 2, 2]).unwrap()).is_err());
    }

    fn itertools_product() -> Vec<(usize, usize, usize, usize)> {
        let mut v = Vec::new();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    for d in 0..3 {
                        v.push((a, b, c, d));
                    }
                }
            }
        }
        v
    }

    #[test]
    fn lower_bound_examples() {
        assert_eq!(shallow_lower_bound(&DenseTensor::filled(&[3, 3, 3, 3], 2.0).unwrap(), 1e-8).unwrap(), 1);
        assert_eq!(shallow_lower_bound(&DenseTensor::zeros(&[3, 3]).unwrap(), 1e-8).unwrap(), 0);
        assert_eq!(bound_from_rank(1000, 10, 6), 34);
        assert_eq!(bound_from_rank(60, 10, 6), 2);
        assert_eq!(bound_from_rank(30, 10, 6), 1);
    }

    #[test]
    fn shallow_bound_never_exceeds_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let m = rng.gen_range(2..=4);
            let r = rng.gen_range(1..=6);
            let f = DenseTensor::from_fn(&[m, m], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let fm = FeatureMap::Template { f };
            let factors =
                (0..4).map(|_| DenseTensor::from_fn(&[m, r], |_| rng.gen_range(-1.0..1.0)).unwrap()).collect();
            let lambdas = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let net = ShallowNet::new(Xi::RectMax, lambdas, factors, fm.clone()).unwrap();
            let g = grid_shallow(&net, &TemplateSet::of_template_map(&fm).unwrap()).unwrap();
            assert!(shallow_lower_bound(&g, DEFAULT_RANK_TOL).unwrap() <= r);
        }
    }

    #[test]
    fn config_parsing() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"M": 3, "T": 4, "ranks": [1, 2]}"#).unwrap();
        assert_eq!(cfg.trials, 100);
        assert_eq!(cfg.xi, Xi::RectMax);
        assert_eq!(cfg.distribution, WeightDist::Normal { mean: 0.0, std: 1.0 });
        assert_eq!(cfg.rank_tol, 1e-8);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"M": 3, "T": 4, "ranks": [1], "bogus": 1}"#).is_err());
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"M": 3, "T": 4, "ranks": [1], "distribution": {"kind": "uniform"}}"#).unwrap();
        assert_eq!(cfg.distribution, WeightDist::Uniform { low: -1.0, high: 1.0 });
        let mut odd = cfg.clone();
        odd.t = 3;
        assert!(odd.check().is_err());
    }

    #[test]
    fn random_rnn_examples() {
        let mut cfg = ExperimentConfig::new(3, 4, vec![1], 1, Xi::RectMax, false);
        assert_eq!(random_rnn(&cfg, 2, 7).unwrap(), random_rnn(&cfg, 2, 7).unwrap());
        assert_ne!(random_rnn(&cfg, 2, 7).unwrap(), random_rnn(&cfg, 2, 8).unwrap());
        assert_eq!(random_rnn(&cfg, 1, 0).unwrap().ranks(), vec![1, 1, 1]);
        cfg.shared = true;
        let net = random_rnn(&cfg, 2, 3).unwrap();
        assert_eq!(net.cells.len(), 3);
        assert!(std::ptr::eq(net.cell(1), net.cell(2)));
    }

    #[test]
    fn experiment_with_injected_pair_detector() {
        let cfg = ExperimentConfig::new(3, 4, vec![2, 3], 2, Xi::RectMax, false);
        let report = expressivity_experiment_with(&cfg, |r, _| thm2_example(3, r, 4)).unwrap();
        for rec in &report.records {
            let expected = bound_from_rank(thm2_expected_rank(3, rec.r, 4), 3, 4);
            assert_eq!(rec.bound, expected);
        }
        assert_eq!(report.records.len(), 4);
    }

    #[test]
    fn product_rank1_nets_have_rank_one_grids() {
        let mut cfg = ExperimentConfig::new(3, 4, vec![1], 10, Xi::Product, false);
        cfg.seed = 5;
        let report = expressivity_experiment(&cfg).unwrap();
        assert!(report.records.iter().all(|r| r.matricization_rank <= 1));
    }

    #[test]
    fn experiment_is_deterministic() {
        let mut cfg = ExperimentConfig::new(3, 4, vec![1, 2], 5, Xi::RectMax, true);
        cfg.seed = 11;
        let a = expressivity_experiment(&cfg).unwrap();
        let b = expressivity_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_histogram_csv(&mut ca).unwrap();
        b.write_histogram_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with("xi,shared,R,bound,count\n"));
        let total: usize = a.histogram.iter().map(|h| h.count).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn verify_small_config() {
        let cfg = VerifyConfig { m: 2, r: 2, t: 4, trials: 3, eps_scale: 1e-3, seed: 1 };
        let report = verify_theorems(&cfg);
        assert!(!report.any_failed(), "{report}");
        assert_eq!(report.lines.len(), 6);

        let wide = VerifyConfig { eps_scale: 0.5, ..cfg };
        assert_eq!(verify_theorems(&wide).status_of("rank_one_open_set"), Some(Status::Skip));
    }

    #[test]
    fn pair_detector_rank_through_verify() {
        let cfg = VerifyConfig { m: 4, r: 2, t: 4, trials: 1, eps_scale: 0.0, seed: 0 };
        let l = check_pair_detector(&cfg).unwrap();
        assert_eq!(l.status, Status::Pass);
        assert!(l.detail.starts_with("rank 5"));
    }
}
