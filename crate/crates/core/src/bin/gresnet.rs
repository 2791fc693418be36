//! Command-line driver for MNIST experiments with classical, residual and
//! scalar-gated residual networks.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gresnet::data::{Dataset, MnistPaths, Split};
use gresnet::experiment::{self, train_into};
use gresnet::model::{init_distance_report, load_checkpoint, Family, InitScheme};
use gresnet::pruning::{area_under_curve, mean_curve, prune_curve, random_curves, PruneReport, PruneStrategy};
use gresnet::train::{error_rate, TrainConfig};
use gresnet::{Error, Result, SeededRng};

const DATA_ENV: &str = "GRN_DATA_DIR";

#[derive(Parser)]
#[command(name = "gresnet", version, about = "Train, evaluate and prune gated residual networks on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write report.json, epochs.csv and checkpoint.bin.
    Train(TrainArgs),
    /// Error rate (%) of a checkpoint, batch norm in inference mode.
    Eval(EvalArgs),
    /// Accuracy curves while removing blocks, as CSV.
    Prune(PruneArgs),
    /// Depth x architecture grid; writes table1.csv and table2.csv.
    Sweep(SweepArgs),
    /// Expected distance of initial weights from the origin, as CSV.
    AnalyzeInit(InitArgs),
}

#[derive(Args, Clone)]
struct Hyper {
    #[arg(long, default_value_t = 50)]
    width: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    k_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    bn_momentum: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory holding the four MNIST IDX files [env: GRN_DATA_DIR].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Hyper {
    fn config(&self, family: Family, depth: usize, in_dim: usize) -> TrainConfig {
        let mut cfg = TrainConfig::mnist(family, depth, self.seed);
        cfg.network.width = self.width;
        cfg.network.in_dim = in_dim;
        cfg.network.bn_momentum = self.bn_momentum;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.optimizer.lr = self.lr;
        cfg.optimizer.beta1 = self.beta1;
        cfg.optimizer.weight_decay = self.weight_decay;
        cfg.optimizer.k_decay = self.k_decay;
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Family,
    #[arg(long)]
    depth: usize,
    #[command(flatten)]
    hyper: Hyper,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StrategyArg {
    Greedy,
    Random,
    Both,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "both")]
    strategy: StrategyArg,
    /// Number of random permutations.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First permutation seed; the others follow consecutively.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,10,20,50,100")]
    depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "classical,resnet,gresnet")]
    archs: Vec<Family>,
    #[command(flatten)]
    hyper: Hyper,
    /// Root directory; one sub-directory per run plus the two tables.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "he_uniform,glorot_uniform,he_normal")]
    schemes: Vec<InitScheme>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn data_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn load_data(flag: &Option<PathBuf>) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let paths = MnistPaths::new(data_dir(flag));
    paths.check()?;
    Ok((paths.load(Split::Train)?, paths.load(Split::Test)?))
}

fn csv_sink(out: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>> {
    let w: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(io::stdout()),
    };
    Ok(csv::Writer::from_writer(w))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (train, test) = load_data(&args.hyper.data_dir)?;
    let cfg = args.hyper.config(args.arch, args.depth, train.features());
    cfg.validate()?;
    let (_, report) = train_into(&args.out, &cfg, &train, &test)?;
    println!(
        "{}",
        json!({
            "out": args.out,
            "final_test_error": report.final_test_error,
            "mean_k": report.mean_k,
            "wall_time": report.wall_time,
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (net, _) = load_checkpoint::<f64>(&args.checkpoint)?;
    let paths = MnistPaths::new(data_dir(&args.data_dir));
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = paths.load::<f64>(split)?;
    let error = error_rate(&net, &ds)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    println!("{}", json!({ "split": name, "error": error }));
    Ok(())
}

fn write_curve(w: &mut csv::Writer<Box<dyn Write>>, strategy: &str, seed: &str, curve: &[(usize, f64)]) -> Result<()> {
    for &(n, acc) in curve {
        w.write_record([strategy, seed, &n.to_string(), &acc.to_string()])?;
    }
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let (net, _) = load_checkpoint::<f64>(&args.checkpoint)?;
    let want_greedy = matches!(args.strategy, StrategyArg::Greedy | StrategyArg::Both);
    let want_random = matches!(args.strategy, StrategyArg::Random | StrategyArg::Both);
    if want_greedy && net.family() != Family::Gresnet {
        return Err(Error::InvalidArgument(format!(
            "greedy pruning ranks blocks by k; {} has none",
            net.family()
        )));
    }
    if want_random && args.seeds == 0 {
        return Err(Error::InvalidArgument("random pruning needs at least one seed".into()));
    }
    let test = MnistPaths::new(data_dir(&args.data_dir)).load::<f64>(Split::Test)?;

    let mut w = csv_sink(&args.out)?;
    w.write_record(["strategy", "seed", "num_removed", "accuracy"])?;
    let mut summary = serde_json::Map::new();
    if want_greedy {
        let r = prune_curve(&net, &test, PruneStrategy::GreedyK, &mut SeededRng::new(0))?;
        write_curve(&mut w, r.strategy.as_str(), "", &r.accuracy_curve)?;
        summary.insert("greedy_auc".into(), json!(area_under_curve(&r.accuracy_curve)));
    }
    if want_random {
        let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
        let reports: Vec<PruneReport> = random_curves(&net, &test, &seeds)?;
        for r in &reports {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
            write_curve(&mut w, r.strategy.as_str(), &seed, &r.accuracy_curve)?;
        }
        let mean = mean_curve(&reports)?;
        write_curve(&mut w, "random", "mean", &mean)?;
        summary.insert("random_mean_auc".into(), json!(area_under_curve(&mean)));
    }
    w.flush().map_err(|e| Error::io(args.out.as_deref().unwrap_or(Path::new("-")), e))?;
    if args.out.is_some() {
        println!("{}", serde_json::Value::Object(summary));
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (train, test) = load_data(&args.hyper.data_dir)?;
    // Families without gates keep k_decay at 0; only gresnet cells use it.
    let base = args.hyper.config(Family::Gresnet, 2, train.features());
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cells = experiment::sweep(&args.out, &base, &args.depths, &args.archs, &train, &test, |c| {
        eprintln!(
            "{} d={} test_error={:.2}",
            c.family, c.depth, c.report.final_test_error
        );
    })?;

    let t1 = args.out.join("table1.csv");
    let mut w = csv::Writer::from_path(&t1)?;
    w.write_record(["depth", "arch", "test_error"])?;
    for c in &cells {
        w.write_record([c.depth.to_string(), c.family.to_string(), c.report.final_test_error.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&t1, e))?;

    let t2 = args.out.join("table2.csv");
    let mut w = csv::Writer::from_path(&t2)?;
    w.write_record(["depth", "mean_k"])?;
    for c in cells.iter().filter(|c| c.family == Family::Gresnet) {
        if let Some(k) = c.report.mean_k {
            w.write_record([c.depth.to_string(), k.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&t2, e))?;
    Ok(())
}

fn cmd_analyze_init(args: InitArgs) -> Result<()> {
    let mut w = csv_sink(&args.out)?;
    w.write_record(["n", "scheme", "per_component_var", "total_abs_distance"])?;
    for scheme in &args.schemes {
        for &n in &args.sizes {
            let r = init_distance_report(*scheme, n, args.trials, args.seed)?;
            w.write_record([
                n.to_string(),
                r.scheme,
                r.per_component_expected_sq_distance.to_string(),
                r.total_abs_distance.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(args.out.as_deref().unwrap_or(Path::new("-")), e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AnalyzeInit(a) => cmd_analyze_init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
