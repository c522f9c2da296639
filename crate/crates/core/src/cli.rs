//! Command-line front end. Exit codes: 0 success, 1 domain failure, 2 usage.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::engine::{self, io as kio, BlockKernel, Shape};
use crate::error::{Error, Result};
use crate::permutation::Regime;
use crate::planner::{
    enumerate_factorizations, flop_count, format_design_table, optimal_depth, plan_igcv2_star,
    NetworkRecipe,
};
use crate::structure::{verify_complementary, ChainDocument, FactorChain, Mode};
use crate::train::{load_cifar10, synth_dataset, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "igc",
    version,
    about = "Interleaved structured sparse convolutions"
)]
pub struct Cli {
    /// Human-readable output even when stdout is not a terminal.
    #[arg(long, global = true)]
    pub pretty: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate and rank factorizations of a C-channel convolution.
    Plan(PlanArgs),
    /// Check that a chain joins every input/output pair by exactly one path.
    Verify(VerifyArgs),
    /// Multiply a factorized kernel out into a dense kernel file.
    Compose(ComposeArgs),
    /// Time a factorized block against its dense equivalent.
    Bench(BenchArgs),
    /// Parameter and multiply-add counts of a chain or network recipe.
    Count(CountArgs),
    /// Train a network recipe and write per-epoch metrics.
    Train(TrainArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeArg {
    Separated,
    Coupled,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Separated => Regime::Separated,
            RegimeArg::Coupled => Regime::Coupled,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub channels: usize,
    #[arg(long, default_value_t = 9)]
    pub spatial: usize,
    #[arg(long, value_enum, default_value = "separated")]
    pub regime: RegimeArg,
    #[arg(long, conflicts_with = "branch_width")]
    pub depth: Option<usize>,
    /// IGCV2* design with fixed branch width K.
    #[arg(long)]
    pub branch_width: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub chain: PathBuf,
    #[arg(long)]
    pub loose: bool,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    pub chain: PathBuf,
    /// Raw little-endian f64 weights or a kernel file.
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub chain: PathBuf,
    /// N,C,H,W
    #[arg(long)]
    pub input: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Network recipe or chain document.
    pub input: PathBuf,
    /// H,W
    #[arg(long, default_value = "32,32")]
    pub input_size: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub recipe: PathBuf,
    /// CIFAR-10 binary directory or file, or `synthetic`.
    pub data: String,
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

/// What a command printed and how the process should exit.
pub struct Outcome {
    pub code: i32,
    pub json: Value,
    pub human: Option<String>,
}

impl Outcome {
    fn ok(json: Value) -> Self {
        Outcome {
            code: EXIT_OK,
            json,
            human: None,
        }
    }
}

/// Parses `args`, runs the command and writes to stdout/stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            diagnostic("usage", first);
            return EXIT_USAGE;
        }
    };
    if let Err(e) = configure_threads() {
        diagnostic(e.kind(), &e.to_string());
        return EXIT_USAGE;
    }
    let pretty = cli.pretty || io::stdout().is_terminal();
    match run(cli.command) {
        Ok(out) => {
            let text = match (&out.human, pretty) {
                (Some(h), true) => h.clone(),
                (None, true) => serde_json::to_string_pretty(&out.json).expect("json"),
                _ => serde_json::to_string(&out.json).expect("json"),
            };
            println!("{text}");
            out.code
        }
        Err(e) => {
            diagnostic(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn diagnostic(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("IGC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Usage(format!(
                "IGC_THREADS must be a positive integer, got `{value}`"
            ))
        })?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Plan(a) => plan(a),
        Command::Verify(a) => verify(a),
        Command::Compose(a) => compose(a),
        Command::Bench(a) => bench(a),
        Command::Count(a) => count(a),
        Command::Train(a) => train_cmd(a),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn parse_list<const N: usize>(text: &str, what: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Usage(format!("{what} must be {N} comma-separated integers")))?;
    parts
        .try_into()
        .map_err(|_| Error::Usage(format!("{what} must be {N} comma-separated integers")))
}

fn read_chain(path: &Path) -> Result<FactorChain> {
    FactorChain::from_json(&std::fs::read_to_string(path)?)
}

fn plan(a: PlanArgs) -> Result<Outcome> {
    if a.channels == 0 || a.spatial == 0 || a.top == 0 || a.depth == Some(0) {
        return Err(Error::Usage(
            "channels, spatial, top and depth must be positive".into(),
        ));
    }
    let regime: Regime = a.regime.into();
    let best = (a.channels * a.spatial > 1)
        .then(|| optimal_depth(a.channels, a.spatial))
        .transpose()?;
    let best_depth = best.as_ref().map_or(1, |b| b.best_depth);
    let mut points = match a.branch_width {
        Some(k) => vec![plan_igcv2_star(a.channels, k, a.spatial)?],
        None => {
            enumerate_factorizations(a.channels, a.depth.unwrap_or(best_depth), regime, a.spatial)
        }
    };
    points.truncate(a.top);
    let json = json!({
        "channels": a.channels,
        "spatial_taps": a.spatial,
        "regime": regime,
        "best_depth": best_depth,
        "stationary_depth": best.as_ref().map(|b| b.stationary),
        "candidates": points,
    });
    if let Some(path) = &a.out {
        std::fs::write(path, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    if points.is_empty() {
        return Err(Error::Structural(format!(
            "no feasible {regime:?} factorization of {} channels",
            a.channels
        )));
    }
    let human = format!("best L = {best_depth}\n{}", format_design_table(&points));
    Ok(Outcome {
        code: EXIT_OK,
        json,
        human: Some(human),
    })
}

fn verify(a: VerifyArgs) -> Result<Outcome> {
    let chain = read_chain(&a.chain)?;
    let mode = if a.loose { Mode::Loose } else { Mode::Strict };
    let report = verify_complementary(&chain, mode)?;
    let human = format!(
        "{}: paths per pair {}..{}, covered fraction {:.6}",
        if report.pass { "PASS" } else { "FAIL" },
        report.min_paths,
        report.max_paths,
        report.covered_fraction
    );
    Ok(Outcome {
        code: if report.pass { EXIT_OK } else { EXIT_FAILURE },
        json: to_value(&report),
        human: Some(human),
    })
}

fn compose(a: ComposeArgs) -> Result<Outcome> {
    let chain = read_chain(&a.chain)?;
    let bytes = kio::load(&a.weights)?;
    let kernel: BlockKernel<f64> = if kio::is_kernel_manifest(&bytes) {
        let (stored, kernel) = kio::decode_block_kernel(&bytes)?;
        if stored != chain {
            return Err(Error::Structural(
                "kernel file was written for a different chain".into(),
            ));
        }
        kernel
    } else {
        kio::decode_weights(&chain, &bytes)?
    };
    let dense = engine::compose_dense_kernel(&chain, &kernel)?;
    let encoded = kio::encode_dense_kernel(&dense)?;
    kio::save(&a.out, &encoded)?;
    Ok(Outcome::ok(json!({
        "out": a.out,
        "channels_out": dense.channels_out,
        "channels_in": dense.channels_in,
        "taps": dense.taps,
        "bytes": encoded.len(),
    })))
}

fn bench(a: BenchArgs) -> Result<Outcome> {
    let chain = read_chain(&a.chain)?;
    let [n, c, h, w] = parse_list::<4>(&a.input, "--input")?;
    let shape = Shape::new(n, c, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = match a.dtype {
        DtypeArg::F32 => engine::benchmark(
            &chain,
            &BlockKernel::<f32>::random(&chain, &mut rng)?,
            shape,
            a.stride,
            a.reps,
        )?,
        DtypeArg::F64 => engine::benchmark(
            &chain,
            &BlockKernel::<f64>::random(&chain, &mut rng)?,
            shape,
            a.stride,
            a.reps,
        )?,
    };
    Ok(Outcome::ok(to_value(&report)))
}

fn count(a: CountArgs) -> Result<Outcome> {
    let [h, w] = parse_list::<2>(&a.input_size, "--input-size")?;
    let text = std::fs::read_to_string(&a.input)?;
    if let Ok(doc) = serde_json::from_str::<ChainDocument>(&text) {
        let chain = FactorChain::from_document(&doc)?;
        let factors: Vec<Value> = chain
            .factors()
            .iter()
            .map(|f| json!({"params": f.nonzeros(), "flops": f.nonzeros() * (h * w) as u64}))
            .collect();
        let json = json!({
            "input_size": [h, w],
            "params": chain.nonzeros(),
            "flops": flop_count(&chain, h, w, 1)?,
            "factors": factors,
        });
        return Ok(Outcome::ok(json));
    }
    let recipe = NetworkRecipe::from_json(&text)?;
    Ok(Outcome::ok(to_value(&recipe.count(h, w)?)))
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let recipe = NetworkRecipe::from_json(&std::fs::read_to_string(&a.recipe)?)?;
    let config = TrainConfig::from_json(&std::fs::read_to_string(&a.config)?)?;
    let data = if a.data == "synthetic" {
        let s = config.synthetic.as_ref().ok_or_else(|| {
            Error::Usage("`synthetic` data needs a `synthetic` block in the config".into())
        })?;
        synth_dataset(s.classes, s.samples, s.seed)?
    } else {
        load_cifar10(&a.data)?
    };
    let mut sink = BufWriter::new(File::create(&a.out)?);
    let outcome = train(&recipe, &data, &config, a.checkpoints.as_deref(), |m| {
        serde_json::to_writer(&mut sink, m)?;
        sink.write_all(b"\n")?;
        sink.flush()?;
        Ok(())
    });
    sink.flush()?;
    let outcome = outcome?;
    let last = outcome.metrics.last().expect("initial record");
    Ok(Outcome::ok(json!({
        "metrics": a.out,
        "epochs": last.epoch,
        "parameters": outcome.network.parameter_count(),
        "final": last,
    })))
}
