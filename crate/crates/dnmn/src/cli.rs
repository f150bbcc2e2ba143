//! Command-line surface: learn a dependency network, convert it to a Markov
//! network, re-learn weights as a baseline, and evaluate either kind of
//! model. Every produced model gets a `<path>.manifest.json` next to it;
//! commands without an output file report the manifest on stderr.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::convert::{
    convert, estimate_marginals, BaseMode, ConversionConfig, OrderMode, VariableOrder,
};
use crate::cpd::{learn_dn_lr, learn_dn_tree, DependencyNetwork, SweepRule, TunedDn};
use crate::error::{Error, Result};
use crate::inference::{eval_cmll, eval_pll, partition_variables, GibbsConfig, QueryPartition};
use crate::io::{load_dataset, load_dn, load_mn, Dataset, RunManifest};
use crate::model::{Assignment, ConditionalModel, MarkovNetwork};
use crate::weights::{dedupe_features, learn_weights_from, tune_sigma};

const DEFAULT_KAPPA_GRID: &str = "0.0001,0.001,0.01,0.1,1";
const DEFAULT_L1_GRID: &str = "0.1,0.2,0.5,1,2,5,10,20,50,100,200,500,1000";
const DEFAULT_SIGMA_GRID: &str = "0.05,0.1,0.2,0.5,1";

#[derive(Parser)]
#[command(
    name = "dnmn",
    version,
    about = "Learn dependency networks and convert them to log-linear Markov networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a dependency network (one CPD per variable) from data.
    Dnlearn(DnlearnArgs),
    /// Convert a dependency network to a Markov network in closed form.
    Dn2mn(Dn2mnArgs),
    /// Learn feature weights by penalized pseudo-likelihood (the baseline).
    Mnlearnw(MnlearnwArgs),
    /// Evaluate a model on a test set.
    Eval(EvalArgs),
    /// Print the exact joint of a small Markov network.
    Enumerate(EnumerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CpdKind {
    Tree,
    Lr,
}

#[derive(Args)]
struct DnlearnArgs {
    /// CPD family to learn.
    #[arg(long, value_enum, default_value_t = CpdKind::Tree)]
    cpd: CpdKind,
    /// Structure-prior grid for tree CPDs (comma-separated, ascending).
    #[arg(long)]
    kappa: Option<String>,
    /// L1 penalty grid for logistic-regression CPDs (comma-separated).
    #[arg(long = "l1")]
    l1: Option<String>,
    /// Training data.
    #[arg(short = 'i', long = "train")]
    train: PathBuf,
    /// Held-out tuning data (required when a grid has more than one value).
    #[arg(short = 't', long = "tune")]
    tune: Option<PathBuf>,
    /// Schema file (one line of comma-separated arities).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output model path.
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaseKind {
    /// One fixed base instance (see --xprime).
    Single,
    /// Expectation over all base instances via training marginals.
    Marginal,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderKind {
    /// The identity ordering only.
    Single,
    /// The identity ordering and its reverse.
    Pair,
    /// All rotations of the identity ordering.
    Rot1,
    /// All rotations of the identity ordering and its reverse.
    Rot2,
    /// All orderings of each feature's tests.
    All,
}

#[derive(Args)]
struct Dn2mnArgs {
    /// Dependency network to convert.
    #[arg(short = 'm', long = "model")]
    model: PathBuf,
    /// Training data, used to estimate marginals for --base marginal.
    #[arg(short = 'i', long = "train")]
    train: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Base-instance treatment.
    #[arg(long, value_enum, default_value_t = BaseKind::Marginal)]
    base: BaseKind,
    /// Base instance for --base single: comma-separated values or "zeros".
    #[arg(long)]
    xprime: Option<String>,
    /// Ordering averaging mode.
    #[arg(long, value_enum, default_value_t = OrderKind::Rot2)]
    order: OrderKind,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct MnlearnwArgs {
    /// Feature source: a dependency network or a Markov network.
    #[arg(short = 'm', long = "model")]
    model: PathBuf,
    #[arg(short = 'i', long = "train")]
    train: PathBuf,
    #[arg(short = 't', long = "tune")]
    tune: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Gaussian prior standard-deviation grid (comma-separated).
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long = "max-iter", default_value_t = 100)]
    max_iter: usize,
    /// Start from the model's own weights instead of zeros (Markov network
    /// feature sources only).
    #[arg(long = "init-from-model", default_value_t = false)]
    init_from_model: bool,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Pll,
    Npll,
    Cmll,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Model to evaluate (Markov network or dependency network).
    #[arg(short = 'm', long = "model")]
    model: PathBuf,
    /// Test data.
    #[arg(short = 'i', long = "test")]
    test: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "burn-in", default_value_t = 100)]
    burn_in: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(short = 'm', long = "model")]
    model: PathBuf,
}

/// Runs the CLI on the given argument list and returns the process exit code:
/// 0 on success, 1 on operational failure, 2 on usage errors.
pub fn cli_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Dnlearn(args) => run_dnlearn(args),
        Command::Dn2mn(args) => run_dn2mn(args),
        Command::Mnlearnw(args) => run_mnlearnw(args),
        Command::Eval(args) => run_eval(args),
        Command::Enumerate(args) => run_enumerate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_grid(text: &str, what: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = text
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidModel(format!("bad {what} grid value '{}'", tok.trim())))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::InvalidModel(format!("empty {what} grid")));
    }
    Ok(grid)
}

fn load_tune(
    path: &Option<PathBuf>,
    schema: &Option<PathBuf>,
    needed_for: &str,
) -> Result<Dataset> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::InvalidModel(format!("{needed_for} requires a tune set (-t)")))?;
    load_dataset(path, schema.as_deref())
}

/// A model file of either kind, recognized by its header line.
enum ModelFile {
    Mn(MarkovNetwork),
    Dn(DependencyNetwork),
}

fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if text.starts_with("MN ") {
        load_mn(path).map(ModelFile::Mn)
    } else if text.starts_with("DN ") {
        load_dn(path).map(ModelFile::Dn)
    } else {
        Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "expected an 'MN <n>' or 'DN <n>' header".into(),
        })
    }
}

fn run_dnlearn(args: DnlearnArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("dnlearn");
    manifest.input(&args.train);
    let train = load_dataset(&args.train, args.schema.as_deref())?;

    let (dn, param_name, chosen, grid): (DependencyNetwork, &str, f64, Vec<f64>) = match args.cpd {
        CpdKind::Tree => {
            let grid = parse_grid(args.kappa.as_deref().unwrap_or(DEFAULT_KAPPA_GRID), "kappa")?;
            let dn = if grid.len() == 1 {
                TunedDn {
                    value: grid[0],
                    tune_score: f64::NAN,
                    dn: learn_dn_tree(&train, grid[0])?,
                }
            } else {
                manifest.input(args.tune.as_ref().unwrap_or(&PathBuf::new()));
                let tune = load_tune(&args.tune, &args.schema, "a kappa grid")?;
                crate::cpd::tune_hyperparameter(
                    |k| learn_dn_tree(&train, k),
                    &grid,
                    SweepRule::AscendEarlyStop,
                    &tune,
                )?
            };
            (dn.dn, "kappa", dn.value, grid)
        }
        CpdKind::Lr => {
            let grid = parse_grid(args.l1.as_deref().unwrap_or(DEFAULT_L1_GRID), "l1")?;
            let dn = if grid.len() == 1 {
                TunedDn {
                    value: grid[0],
                    tune_score: f64::NAN,
                    dn: learn_dn_lr(&train, grid[0])?,
                }
            } else {
                manifest.input(args.tune.as_ref().unwrap_or(&PathBuf::new()));
                let tune = load_tune(&args.tune, &args.schema, "an l1 grid")?;
                crate::cpd::tune_hyperparameter(
                    |l| learn_dn_lr(&train, l),
                    &grid,
                    SweepRule::BestOfGrid,
                    &tune,
                )?
            };
            (dn.dn, "lambda", dn.value, grid)
        }
    };

    crate::io::save_dn(&args.out, &dn)?;
    manifest.param(
        "cpd",
        match args.cpd {
            CpdKind::Tree => "tree",
            CpdKind::Lr => "lr",
        },
    );
    manifest.param(param_name, chosen);
    manifest.param(
        &format!("{param_name}_grid"),
        grid.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.output = Some(args.out.display().to_string());
    manifest.finish(start.elapsed());
    manifest.save_alongside(&args.out)?;
    eprintln!("{}", manifest.to_json());
    Ok(())
}

fn parse_xprime(raw: Option<&str>, dn: &DependencyNetwork) -> Result<Assignment> {
    let n = dn.schema().len();
    match raw {
        None | Some("zeros") => Ok(Assignment::zeros(dn.schema())),
        Some(csv) => {
            let values: Vec<usize> = csv
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|_| {
                        Error::InvalidModel(format!("bad xprime value '{}'", tok.trim()))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != n {
                return Err(Error::InvalidModel(format!(
                    "xprime has {} values for {n} variables",
                    values.len()
                )));
            }
            Assignment::new(values, dn.schema())
        }
    }
}

fn run_dn2mn(args: Dn2mnArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("dn2mn");
    manifest.input(&args.model);
    let dn = load_dn(&args.model)?;
    let n = dn.schema().len();

    let base = match args.base {
        BaseKind::Single => {
            let xp = parse_xprime(args.xprime.as_deref(), &dn)?;
            manifest.param("xprime", args.xprime.as_deref().unwrap_or("zeros"));
            BaseMode::Single(xp)
        }
        BaseKind::Marginal => {
            let train_path = args.train.as_ref().ok_or_else(|| {
                Error::InvalidModel("--base marginal requires training data (-i)".into())
            })?;
            manifest.input(train_path);
            let train = load_dataset(train_path, args.schema.as_deref())?;
            if train.schema() != dn.schema() {
                return Err(Error::SchemaViolation(
                    "training data schema differs from the model schema".into(),
                ));
            }
            BaseMode::Expectation(estimate_marginals(&train)?)
        }
    };
    let identity = VariableOrder::identity(n);
    let order = match args.order {
        OrderKind::Single => OrderMode::Single(identity),
        OrderKind::Pair => OrderMode::OppositePair(identity),
        OrderKind::Rot1 => OrderMode::Rotations(identity),
        OrderKind::Rot2 => OrderMode::RotationsPair(identity),
        OrderKind::All => OrderMode::AllOrderings,
    };
    manifest.param(
        "base",
        match args.base {
            BaseKind::Single => "single",
            BaseKind::Marginal => "marginal",
        },
    );
    manifest.param(
        "order",
        match args.order {
            OrderKind::Single => "single",
            OrderKind::Pair => "pair",
            OrderKind::Rot1 => "rot1",
            OrderKind::Rot2 => "rot2",
            OrderKind::All => "all",
        },
    );

    let m = convert(&dn, &ConversionConfig::new(base, order))?;
    crate::io::save_mn(&args.out, &m)?;
    manifest.param("features", m.features().len());
    manifest.output = Some(args.out.display().to_string());
    manifest.finish(start.elapsed());
    manifest.save_alongside(&args.out)?;
    eprintln!("{}", manifest.to_json());
    Ok(())
}

fn run_mnlearnw(args: MnlearnwArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("mnlearnw");
    manifest.input(&args.model);
    manifest.input(&args.train);
    let train = load_dataset(&args.train, args.schema.as_deref())?;

    let (deduped, init) = match load_model(&args.model)? {
        ModelFile::Mn(m) => {
            let deduped = dedupe_features(m.features());
            let init = args
                .init_from_model
                .then(|| deduped.iter().map(|wf| wf.weight).collect::<Vec<f64>>());
            (deduped, init)
        }
        ModelFile::Dn(dn) => {
            if args.init_from_model {
                return Err(Error::InvalidModel(
                    "--init-from-model needs a Markov network feature source".into(),
                ));
            }
            let all: Vec<_> = dn
                .cpds()
                .iter()
                .flat_map(|c| c.to_features(dn.schema()))
                .collect();
            (dedupe_features(&all), None)
        }
    };
    let features: Vec<_> = deduped.into_iter().map(|wf| wf.feature).collect();

    let grid = parse_grid(args.sigma.as_deref().unwrap_or(DEFAULT_SIGMA_GRID), "sigma")?;
    let (sigma, m) = if grid.len() == 1 {
        let (m, info) =
            learn_weights_from(&features, &train, grid[0], args.max_iter, init.as_deref())?;
        manifest.param("iterations", info.iterations);
        manifest.param("converged", info.converged);
        (grid[0], m)
    } else {
        if init.is_some() {
            return Err(Error::InvalidModel(
                "--init-from-model requires a single --sigma value".into(),
            ));
        }
        manifest.input(args.tune.as_ref().unwrap_or(&PathBuf::new()));
        let tune = load_tune(&args.tune, &args.schema, "a sigma grid")?;
        tune_sigma(&features, &train, &tune, &grid, args.max_iter)?
    };

    crate::io::save_mn(&args.out, &m)?;
    manifest.param("sigma", sigma);
    manifest.param("max_iter", args.max_iter);
    manifest.param("features", features.len());
    manifest.output = Some(args.out.display().to_string());
    manifest.finish(start.elapsed());
    manifest.save_alongside(&args.out)?;
    eprintln!("{}", manifest.to_json());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let start = Instant::now();
    if args.samples == 0 || args.chains == 0 {
        return Err(Error::InvalidModel(
            "--samples and --chains must be at least 1".into(),
        ));
    }
    let mut manifest = RunManifest::new("eval");
    manifest.input(&args.model);
    manifest.input(&args.test);
    manifest.seed = Some(args.seed);
    let test = load_dataset(&args.test, args.schema.as_deref())?;
    let model = load_model(&args.model)?;

    let metric_name = match args.metric {
        Metric::Pll => "pll",
        Metric::Npll => "npll",
        Metric::Cmll => "cmll",
    };
    manifest.param("metric", metric_name);

    let output = match model {
        ModelFile::Mn(m) => eval_model(&m, &test, &args)?,
        ModelFile::Dn(dn) => eval_model(&dn, &test, &args)?,
    };
    print!("{output}");

    manifest.finish(start.elapsed());
    eprintln!("{}", manifest.to_json());
    Ok(())
}

fn eval_model<M: ConditionalModel + Sync>(
    model: &M,
    test: &Dataset,
    args: &EvalArgs,
) -> Result<String> {
    match args.metric {
        Metric::Pll => {
            let s = eval_pll(model, test)?;
            Ok(format!("pll_per_instance\t{}\n", s.pll_per_instance))
        }
        Metric::Npll => {
            let s = eval_pll(model, test)?;
            Ok(format!("npll\t{}\n", s.npll))
        }
        Metric::Cmll => {
            let n = model.schema().len();
            let partition: QueryPartition = if n >= 4 {
                partition_variables(n, args.seed)?
            } else {
                QueryPartition::singletons(n)?
            };
            let cfg = GibbsConfig {
                burn_in: args.burn_in,
                samples: args.samples,
                seed: args.seed,
                chains: args.chains,
            };
            let v = eval_cmll(model, test, &partition, &cfg)?;
            Ok(format!("cmll_per_instance\t{v}\n"))
        }
    }
}

fn run_enumerate(args: EnumerateArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("enumerate");
    manifest.input(&args.model);
    let m = match load_model(&args.model)? {
        ModelFile::Mn(m) => m,
        ModelFile::Dn(_) => {
            return Err(Error::InvalidModel(
                "enumerate requires a Markov network; convert the DN first".into(),
            ))
        }
    };
    let joint = m.enumerate_joint()?;
    let mut out = String::new();
    for idx in 0..joint.len() {
        let a = m.schema().assignment_from_index(idx);
        let values: Vec<String> = a.values().iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{}\t{}\n", values.join(","), joint.get(idx)));
    }
    print!("{out}");
    manifest.finish(start.elapsed());
    eprintln!("{}", manifest.to_json());
    Ok(())
}
