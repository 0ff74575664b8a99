use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfhi_core::config::RunConfig;
use mfhi_core::dataset::synthetic::generate_synthetic;
use mfhi_core::dataset::Dataset;
use mfhi_core::model::Mode;
use mfhi_core::recognition::{evaluate, Protocol};
use mfhi_core::sgsa::write_attention_dump;
use mfhi_core::sweep::run_sweep;
use mfhi_core::trainer::{fit, Checkpoint};
use mfhi_core::{Error, ErrorClass};

const SEED_ENV: &str = "MFHI_SEED";

/// Modality-free human identification on precomputed feature maps.
#[derive(Debug, Parser)]
#[command(name = "mfhi", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset
    Gen(GenArgs),
    /// Train a model with episodic optimization
    Train(TrainArgs),
    /// Evaluate a checkpoint under one recognition protocol
    Eval(EvalArgs),
    /// Train and evaluate over a grid of r, d and D values
    Sweep(SweepArgs),
    /// Write attention maps of selected images
    DumpAttention(DumpArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration [default: built-in settings]
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Write into a non-empty directory
    #[arg(long, default_value_t = false)]
    force: bool,
    /// Generator seed [default: $MFHI_SEED, then the config file]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output run directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Prototype source: i2a trains the attribute MLP, i2i a classifier [default: config file, then i2a]
    #[arg(long, value_parser = ["i2a", "a2i", "i2i"])]
    mode: Option<String>,
    /// Number of episodes [default: config file, then 2000]
    #[arg(long)]
    episodes: Option<usize>,
    /// Training seed [default: $MFHI_SEED, then the config file]
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint directory
    #[arg(long, value_name = "DIR")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint directory
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_parser = ["i2a", "a2i", "i2i"])]
    protocol: String,
    /// Rank cut-offs [default: config file, then 1,5,10]
    #[arg(long, value_delimiter = ',')]
    top: Option<Vec<usize>>,
    /// Report directory [default: parent of the checkpoint directory]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Directory receiving one run per grid point and seed
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: PathBuf,
    /// Grid axes such as r=8,64 d=0.15,0.3 D=5,10,14 [default: config file]
    #[arg(long, num_args = 1.., value_name = "KEY=VALUES")]
    grid: Vec<String>,
    /// Seeds per grid point [default: config file, then 0]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Episodes per grid point [default: config file]
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct DumpArgs {
    /// Checkpoint directory
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Image ids
    #[arg(long, value_delimiter = ',', required = true)]
    images: Vec<String>,
    /// Dump directory [default: <checkpoint>/../attention]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    /// Some work was done, but not all of it.
    Partial(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e.class() {
                ErrorClass::Validation => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Io => 5,
            },
            Failure::Partial(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Partial(msg) => f.write_str(msg),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    match &arg.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64, Error> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("{SEED_ENV}={text:?} is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn is_nonempty_dir(path: &Path) -> Result<bool, Error> {
    match std::fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) if e.kind() == std::io::ErrorKind::NotADirectory => {
            Err(Error::Argument(format!("{} exists and is not a directory", path.display())))
        }
        Err(source) => Err(Error::Io { path: path.to_path_buf(), source }),
    }
}

fn run_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_gen(args: GenArgs) -> Outcome {
    let mut cfg = load_config(&args.config)?.r#gen;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    if !args.force && is_nonempty_dir(&args.out)? {
        return Err(Error::Argument(format!("{} is not empty; pass --force to write into it", args.out.display())).into());
    }
    let s = generate_synthetic(&cfg, &args.out)?;
    let [c, h, w] = s.feature_shape;
    println!(
        "K={} L={} Q={} features={c}x{h}x{w} images={} flavor={} seed={} -> {}",
        s.train_identities,
        s.test_identities,
        s.attributes,
        s.images,
        cfg.flavor,
        cfg.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut cfg = load_config(&args.config)?.train;
    if let Some(m) = &args.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(e) = args.episodes {
        cfg.episodes = e;
    }
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    let dataset = Dataset::open(&args.data)?;
    let summary = fit(&dataset, &cfg, &args.out, args.resume.as_deref())?;
    match summary.losses.last() {
        Some(l) => println!(
            "trained {} episodes (config {}): cea {:.6} dcm {:.6} total {:.6} -> {}",
            summary.episodes,
            summary.config_hash,
            l.cea,
            l.dcm,
            l.total,
            summary.model_dir.display()
        ),
        None => println!(
            "trained {} episodes (config {}) -> {}",
            summary.episodes,
            summary.config_hash,
            summary.model_dir.display()
        ),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let mut cfg = load_config(&args.config)?.eval;
    if let Some(top) = args.top {
        cfg.top = top;
    }
    let protocol: Protocol = args.protocol.parse()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::open(&args.data)?;
    let report = evaluate(protocol, &ckpt, &dataset, &cfg)?;
    let out = args.out.unwrap_or_else(|| run_dir_of(&args.checkpoint));
    let (text, json) = report.write(&out)?;
    print!("{}", report.to_text());
    println!("wrote {} and {}", text.display(), json.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Outcome {
    let run = load_config(&args.config)?;
    let mut sweep = run.sweep;
    sweep.apply_grid(&args.grid)?;
    if let Some(seeds) = args.seeds {
        sweep.seeds = seeds;
    }
    if let Some(e) = args.episodes {
        sweep.episodes = Some(e);
    }
    let dataset = Dataset::open(&args.data)?;
    let outcome = run_sweep(&dataset, &run.train, &sweep, &run.eval, &args.checkpoint_dir)?;
    print!("{}", outcome.table.to_tsv());
    println!("wrote {} and {}", outcome.tsv.display(), outcome.json.display());
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Outcome {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::open(&args.data)?;
    ckpt.meta.dataset.check(&dataset)?;
    let out = args.out.unwrap_or_else(|| run_dir_of(&args.checkpoint).join("attention"));
    let attention = ckpt.meta.train.attention;
    let mut unknown = Vec::new();
    for id in &args.images {
        let Some(image) = dataset.image(id) else {
            unknown.push(id.as_str());
            continue;
        };
        let output = ckpt.model.visual_feature(&image.features, &attention)?;
        let paths = write_attention_dump(&out, id, &output, &dataset.manifest.attribute_names)?;
        println!("{id}: {}", paths.tensor.display());
    }
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(format!("unknown image ids skipped: {}", unknown.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::DumpAttention(a) => cmd_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mfhi: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
