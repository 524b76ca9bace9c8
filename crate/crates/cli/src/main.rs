use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gentn::analysis::{expressivity_experiment, rank_bound, verify_theorems, ExperimentConfig, VerifyConfig};
use gentn::constructions::{
    absorb_input_matrices, net_from_grid_product, onehot_shallow, rnn_add, rnn_from_grid_relu, shallow_from_grid_relu,
    shallow_to_rnn, thm2_example_with_templates, thm3_example, OneHotSpec,
};
use gentn::grid::{feature_matrix, grid, grid_bruteforce, TemplateSet};
use gentn::io::{parse_config, read_network, read_tensor, write_atomic, write_network, write_tensor};
use gentn::networks::index_seq;
use gentn::tensor::cap::set_max_elements;
use gentn::tensor::DEFAULT_RANK_TOL;
use gentn::trainer::{train_toy, TrainConfig};
use gentn::{Error, FeatureMap, Network, Token};
use serde::Serialize;

/// Generalized tensor networks: construct, evaluate and analyze shallow and
/// recurrent networks with associative nonlinearities.
#[derive(Parser, Debug)]
#[command(name = "gentn", version)]
struct Cli {
    /// Seed overriding the one in configs; also seeds randomized constructions.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Relative singular-value threshold for numerical ranks.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Largest tensor (in elements) any command may materialize.
    #[arg(long, global = true)]
    max_elements: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score of a network on one input sequence.
    Eval {
        #[arg(long)]
        net: PathBuf,
        /// Comma-separated template indices (0-based).
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        seq: Option<String>,
        /// JSON list of tokens: template indices or raw input vectors.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Grid tensor of a network on its templates.
    Grid {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON list of template tokens; required for affine feature maps.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Evaluate every entry with the network's score function instead.
        #[arg(long)]
        bruteforce: bool,
        /// Store values inside the JSON header rather than a `.bin` file.
        #[arg(long)]
        inline: bool,
    },
    /// Build networks from closed-form constructions.
    Construct {
        #[command(subcommand)]
        kind: Construct,
    },
    /// Matricization analysis of grid tensors.
    Analyze {
        #[command(subcommand)]
        kind: Analyze,
    },
    /// Random-network rank experiment; writes histogram, trial and summary files.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Constructive property checks; exits 3 if any fails.
    Verify {
        #[arg(long)]
        all: bool,
        #[arg(long = "M", default_value_t = 3)]
        m: usize,
        #[arg(long = "R", default_value_t = 3)]
        r: usize,
        #[arg(long = "T", default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Train a classifier on the synthetic sequence task.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Parse a network file and print it in canonical form.
    Roundtrip {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Templates {
    /// Template feature matrix `F` (tensor file); defaults to the identity.
    #[arg(long)]
    features: Option<PathBuf>,
}

impl Templates {
    fn load(&self, m: usize) -> anyhow::Result<TemplateSet> {
        match &self.features {
            None => Ok(TemplateSet::identity(m)),
            Some(p) => {
                let f = read_tensor(p).with_context(|| format!("reading {}", p.display()))?;
                if f.shape() != [m, m] {
                    bail!(Error::Shape(format!("feature matrix {:?} must be {m} x {m}", f.shape())));
                }
                Ok(TemplateSet::of_template_map(&FeatureMap::Template { f })?)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReluArch {
    Rnn,
    Shallow,
}

#[derive(Subcommand, Debug)]
enum Construct {
    /// Rank-2 rect_max shallow network with a one-hot grid tensor.
    Onehot {
        #[arg(long = "M")]
        m: usize,
        /// Comma-separated 0-based position of the unit entry.
        #[arg(long)]
        indices: String,
        #[command(flatten)]
        templates: Templates,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rect_max network whose grid tensor equals a given tensor.
    FromTensor {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, value_enum, default_value = "rnn")]
        arch: ReluArch,
        #[command(flatten)]
        templates: Templates,
        #[arg(long)]
        out: PathBuf,
    },
    /// Product RNN realizing a tensor via TT-SVD with relative accuracy `eps`.
    ProductUniversal {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[command(flatten)]
        templates: Templates,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rect_max pair-detector RNN with a high-rank grid tensor.
    Thm2 {
        #[arg(long = "M")]
        m: usize,
        #[arg(long = "R")]
        r: usize,
        #[arg(long = "T")]
        t: usize,
        #[command(flatten)]
        templates: Templates,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturbed rect_max RNN whose grid tensor stays rank 1.
    Thm3 {
        #[arg(long = "M")]
        m: usize,
        #[arg(long = "R")]
        r: usize,
        #[arg(long = "T")]
        t: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[command(flatten)]
        templates: Templates,
        #[arg(long)]
        out: PathBuf,
        /// Also write the rank-1 shallow network with the same grid tensor.
        #[arg(long)]
        witness: Option<PathBuf>,
    },
    /// RNN with grid tensor `alpha * grid(a) + beta * grid(b)`.
    Add {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// RNN with the same score as a shallow network.
    ToRnn {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold input matrices into the cores of a product RNN.
    Absorb {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Odd/even matricization rank and the shallow rank lower bound it implies.
    RankBound {
        /// Grid tensor file.
        #[arg(conflicts_with = "net", required_unless_present = "net")]
        tensor: Option<PathBuf>,
        /// Network file; its grid tensor is computed first.
        #[arg(long)]
        net: Option<PathBuf>,
    },
}

fn load_net(p: &Path) -> anyhow::Result<Network> {
    read_network(p).with_context(|| format!("reading {}", p.display()))
}

fn load_config<T: for<'de> serde::Deserialize<'de>>(p: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    parse_config(&text).with_context(|| format!("parsing {}", p.display()))
}

fn parse_indices(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| Error::Invalid(format!("bad index `{x}`: {e}")).into()))
        .collect()
}

fn templates_for(net: &Network, path: Option<&Path>) -> anyhow::Result<TemplateSet> {
    match path {
        Some(p) => {
            let tokens: Vec<Token> = load_config(p)?;
            Ok(feature_matrix(net.feature_map(), &tokens)?)
        }
        None => match net.feature_map() {
            FeatureMap::Template { .. } => Ok(TemplateSet::of_template_map(net.feature_map())?),
            FeatureMap::Affine { .. } => {
                bail!(Error::Invalid("affine feature maps need --templates".into()))
            }
        },
    }
}

fn to_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(cap) = cli.max_elements {
        set_max_elements(cap);
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let tol = cli.tol.unwrap_or(DEFAULT_RANK_TOL);
    let seed = cli.seed;
    match cli.command {
        Command::Eval { net, seq, input } => {
            let net = load_net(&net)?;
            let xs = match (seq, input) {
                (Some(s), _) => index_seq(&parse_indices(&s)?),
                (None, Some(p)) => load_config::<Vec<Token>>(&p)?,
                (None, None) => unreachable!("clap requires one of --seq, --input"),
            };
            println!("{:e}", net.score(&xs)?);
        }
        Command::Grid { net, out, templates, bruteforce, inline } => {
            let net = load_net(&net)?;
            let ts = templates_for(&net, templates.as_deref())?;
            let g = if bruteforce { grid_bruteforce(&net, &ts)? } else { grid(&net, &ts)? };
            write_tensor(&out, &g, inline)?;
            log::info!("wrote grid tensor {:?} to {}", g.shape(), out.display());
        }
        Command::Construct { kind } => construct(kind, seed)?,
        Command::Analyze { kind: Analyze::RankBound { tensor, net } } => {
            let g = match (tensor, net) {
                (Some(p), _) => read_tensor(&p).with_context(|| format!("reading {}", p.display()))?,
                (None, Some(p)) => {
                    let net = load_net(&p)?;
                    grid(&net, &templates_for(&net, None)?)?
                }
                (None, None) => unreachable!("clap requires a tensor or --net"),
            };
            let rb = rank_bound(&g, tol)?;
            #[derive(Serialize)]
            struct Out<'a> {
                shape: &'a [usize],
                rank: usize,
                bound: usize,
                tol: f64,
                top: &'a [f64],
                bottom: &'a [f64],
            }
            print!(
                "{}",
                to_json(&Out {
                    shape: g.shape(),
                    rank: rb.rank,
                    bound: rb.bound,
                    tol,
                    top: rb.estimate.head(5),
                    bottom: rb.estimate.tail(5),
                })?
            );
        }
        Command::Experiment { config, out_dir } => {
            let mut cfg: ExperimentConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = cli.tol {
                cfg.rank_tol = t;
            }
            let rep = expressivity_experiment(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut hist = Vec::new();
            rep.write_histogram_csv(&mut hist)?;
            write_atomic(&out_dir.join("histogram.csv"), &hist)?;
            let mut trials = Vec::new();
            rep.write_trials_csv(&mut trials)?;
            write_atomic(&out_dir.join("trials.csv"), &trials)?;
            write_atomic(&out_dir.join("summary.json"), (rep.summary_json()? + "\n").as_bytes())?;
            for s in &rep.summary {
                eprintln!(
                    "R={} mean bound {:.3} max bound {} mean rank {:.1}",
                    s.r, s.mean_bound, s.max_bound, s.mean_rank
                );
            }
        }
        Command::Verify { all, m, r, t, trials, eps } => {
            if !all {
                bail!(Error::Invalid("verify currently runs every check; pass --all".into()));
            }
            let cfg = VerifyConfig { m, r, t, trials, eps_scale: eps, seed: seed.unwrap_or(0) };
            let report = verify_theorems(&cfg);
            print!("{report}");
            if report.any_failed() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Train { config, out_dir } => {
            let mut cfg: TrainConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train_toy(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut csv = Vec::new();
            outcome.write_csv(&mut csv)?;
            write_atomic(&out_dir.join("metrics.csv"), &csv)?;
            for (k, net) in outcome.classifier.nets.iter().enumerate() {
                write_network(&out_dir.join(format!("class_{k}.json")), net)?;
            }
            let last = outcome.metrics.last().expect("at least the initial epoch");
            eprintln!(
                "epoch {} loss {:.4} train {:.3} test {:.3} ({} parameters)",
                last.epoch, last.loss, last.train_accuracy, last.test_accuracy, outcome.param_count
            );
        }
        Command::Roundtrip { net, out } => {
            let text = std::fs::read_to_string(&net).with_context(|| format!("reading {}", net.display()))?;
            let parsed = gentn::io::network_from_json(&text)?;
            let canonical = gentn::io::network_to_json(&parsed)?;
            match out {
                Some(p) => write_atomic(&p, canonical.as_bytes())?,
                None => print!("{canonical}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn construct(kind: Construct, seed: Option<u64>) -> anyhow::Result<()> {
    let (net, out): (Network, PathBuf) = match kind {
        Construct::Onehot { m, indices, templates, out } => {
            let spec = OneHotSpec::new(m, parse_indices(&indices)?)?;
            (onehot_shallow(&spec, &templates.load(m)?)?.into(), out)
        }
        Construct::FromTensor { tensor, arch, templates, out } => {
            let h = read_tensor(&tensor).with_context(|| format!("reading {}", tensor.display()))?;
            let ts = templates.load(h.shape().first().copied().unwrap_or(0))?;
            let net: Network = match arch {
                ReluArch::Rnn => rnn_from_grid_relu(&h, &ts)?.into(),
                ReluArch::Shallow => shallow_from_grid_relu(&h, &ts)?.into(),
            };
            (net, out)
        }
        Construct::ProductUniversal { tensor, eps, templates, out } => {
            let h = read_tensor(&tensor).with_context(|| format!("reading {}", tensor.display()))?;
            let ts = templates.load(h.shape().first().copied().unwrap_or(0))?;
            (net_from_grid_product(&h, &ts, eps)?.into(), out)
        }
        Construct::Thm2 { m, r, t, templates, out } => {
            (thm2_example_with_templates(m, r, t, &templates.load(m)?)?.into(), out)
        }
        Construct::Thm3 { m, r, t, eps, templates, out, witness } => {
            let ex = thm3_example(m, r, t, &templates.load(m)?, eps, seed.unwrap_or(0))?;
            if let Some(p) = witness {
                write_network(&p, &ex.witness.into())?;
            }
            eprintln!("dominance margin {:e}", ex.margin);
            (ex.rnn.into(), out)
        }
        Construct::Add { a, b, alpha, beta, out } => {
            let (na, nb) = (load_net(&a)?, load_net(&b)?);
            let rnn = |n: Network, p: &Path| match n {
                Network::Rnn(r) => Ok(r),
                Network::Shallow(s) => shallow_to_rnn(&s).with_context(|| format!("converting {}", p.display())),
            };
            (rnn_add(&rnn(na, &a)?, &rnn(nb, &b)?, alpha, beta)?.into(), out)
        }
        Construct::ToRnn { net, out } => match load_net(&net)? {
            Network::Shallow(s) => (shallow_to_rnn(&s)?.into(), out),
            Network::Rnn(_) => bail!(Error::Invalid(format!("{} is already an RNN", net.display()))),
        },
        Construct::Absorb { net, out } => match load_net(&net)? {
            Network::Rnn(r) => (absorb_input_matrices(&r)?.into(), out),
            Network::Shallow(_) => bail!(Error::Invalid("absorb needs an RNN".into())),
        },
    };
    Ok(write_network(&out, &net)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Capacity { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
