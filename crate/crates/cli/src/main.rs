//! Command-line front end: data generation, training, evaluation,
//! sampling, and structure export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use att_core::data::{
    binarize_returns, gen_random_patterns, sample_polytree, split_train_test, PatternSpec,
};
use att_core::error::{DataError, Error as CoreError, ModelError, TrainError};
use att_core::io as attio;
use att_core::{
    bmi_exact, sample, train_from_model, train_with_hooks, BatchRefresh, CenterMode, DataBatch,
    Edge, InitTopology, TensorTreeModel, TrainConfig, TrainEvent, TrainReport,
};

#[derive(Parser)]
#[command(
    name = "att",
    about = "Adaptive tensor tree Born machine: generative modeling over binary variables",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data sets
    #[command(subcommand)]
    Gen(GenCommand),
    /// Train a model
    Train(TrainArgs),
    /// Evaluate the NLL of a model on data
    Eval(EvalArgs),
    /// Draw samples from a model
    Sample(SampleArgs),
    /// Export structure (DOT, center-distance ranking)
    Export(ExportArgs),
}

#[derive(Subcommand)]
enum GenCommand {
    /// Random bit patterns with a zero middle block
    Patterns(GenPatternsArgs),
    /// Samples from a Bayesian polytree spec
    Polytree(GenPolytreeArgs),
    /// Binarize a CSV of change rates against the per-row mean
    Returns(GenReturnsArgs),
}

#[derive(Args)]
struct GenPatternsArgs {
    /// Total bits per pattern
    #[arg(long, default_value_t = 128)]
    total: usize,
    /// Random bits on the left margin
    #[arg(long, default_value_t = 32)]
    left: usize,
    /// Random bits on the right margin
    #[arg(long, default_value_t = 32)]
    right: usize,
    /// Number of distinct patterns
    #[arg(long, default_value_t = 10)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenPolytreeArgs {
    /// Polytree spec file: first line n, then `parent child` lines, then `r <value>`
    #[arg(long)]
    spec: PathBuf,
    /// Number of samples
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenReturnsArgs {
    /// CSV of change rates: header row of tickers, then one row per day
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a held-out split
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Fraction of rows for the training side
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training batch file
    #[arg(long)]
    data: PathBuf,
    /// Optional test batch for generalization tracking
    #[arg(long)]
    test: Option<PathBuf>,
    /// Maximum bond dimension
    #[arg(long)]
    chi: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    /// Initial network structure
    #[arg(long, value_enum, default_value_t = InitChoice::Random)]
    init: InitChoice,
    /// Resume from a saved model instead of a fresh initialization
    #[arg(long)]
    init_model: Option<PathBuf>,
    /// Keep the structure fixed (gradient descent only)
    #[arg(long)]
    fixed_structure: bool,
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    /// Refresh policy: `sweep` or `steps:K`
    #[arg(long, default_value = "sweep")]
    refresh: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient updates on the combined tensor
    #[arg(long, default_value_t = 1)]
    combined_updates: usize,
    /// Gradient updates per candidate decomposition
    #[arg(long, default_value_t = 10)]
    candidate_updates: usize,
    /// Worker threads for evaluation paths
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Checkpoint the model every N iterations (0 = never)
    #[arg(long, default_value_t = 0)]
    checkpoint: u64,
    /// Record the topology every N iterations (0 = never)
    #[arg(long, default_value_t = 0)]
    snapshot_interval: u64,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
    /// DOT output path (defaults to the model path with `.dot` appended)
    #[arg(long)]
    out_dot: Option<PathBuf>,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum InitChoice {
    Train,
    Balanced,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// DOT output path
    #[arg(long)]
    dot: PathBuf,
    /// Label file: lines `variable label`; labels starting with `#` become
    /// fill colors
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Write the center-distance ranking as CSV
    #[arg(long)]
    rank_csv: Option<PathBuf>,
    /// Batch file for empirical BMI estimates on models too large for
    /// exact enumeration
    #[arg(long)]
    data: Option<PathBuf>,
    /// Center definition for the ranking
    #[arg(long, value_enum, default_value_t = CenterChoice::Centroid)]
    center: CenterChoice,
}

#[derive(Copy, Clone, ValueEnum)]
enum CenterChoice {
    Centroid,
    GraphCenter,
}

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::WrongLength { .. } => CliError::Data(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Data(d.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Data(d) => d.into(),
            CoreError::Model(m) => m.into(),
            CoreError::Train(t) => t.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

/// Everything needed to reproduce a run, written next to the model.
#[derive(Serialize)]
struct RunManifest {
    format_version: u16,
    command: String,
    seed: u64,
    dataset: DatasetInfo,
    config: ConfigEcho,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct DatasetInfo {
    path: String,
    variables: usize,
    rows: usize,
    test_path: Option<String>,
    test_rows: Option<usize>,
}

#[derive(Serialize)]
struct ConfigEcho {
    chi: usize,
    learning_rate: f64,
    combined_updates: usize,
    candidate_updates: usize,
    max_iterations: u64,
    batch_size: usize,
    batch_refresh: String,
    structure_fixed: bool,
    initial_topology: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(GenCommand::Patterns(a)) => gen_patterns(a),
        Command::Gen(GenCommand::Polytree(a)) => gen_polytree(a),
        Command::Gen(GenCommand::Returns(a)) => gen_returns(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn gen_patterns(a: GenPatternsArgs) -> Result<(), CliError> {
    let spec = PatternSpec {
        total_bits: a.total,
        left_random: a.left,
        right_random: a.right,
        num_patterns: a.num,
    };
    let batch = gen_random_patterns(&spec, a.seed)?;
    attio::save_batch(&a.out, &batch)?;
    println!(
        "{} rows x {} variables -> {}",
        batch.len(),
        batch.n(),
        a.out.display()
    );
    Ok(())
}

fn gen_polytree(a: GenPolytreeArgs) -> Result<(), CliError> {
    let bn = attio::load_polytree_spec(&a.spec)?;
    let batch = sample_polytree(&bn, a.count, a.seed)?;
    attio::save_batch(&a.out, &batch)?;
    println!(
        "{} rows x {} variables -> {}",
        batch.len(),
        batch.n(),
        a.out.display()
    );
    Ok(())
}

fn gen_returns(a: GenReturnsArgs) -> Result<(), CliError> {
    let rows = read_returns_csv(&a.csv)?;
    let batch = binarize_returns(&rows)?;
    if let Some(test_out) = &a.test_out {
        let (train, test) = split_train_test(&batch, a.fraction, a.seed)?;
        attio::save_batch(&a.out, &train)?;
        attio::save_batch(test_out, &test)?;
        println!(
            "{} rows x {} variables -> {} ({} train) + {} ({} test)",
            batch.len(),
            batch.n(),
            a.out.display(),
            train.len(),
            test_out.display(),
            test.len()
        );
    } else {
        attio::save_batch(&a.out, &batch)?;
        println!(
            "{} rows x {} variables -> {}",
            batch.len(),
            batch.n(),
            a.out.display()
        );
    }
    Ok(())
}

fn read_returns_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{path:?}: {e}")))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            // header row of tickers
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|_| CliError::Data(format!("bad CSV row {}: {line:?}", i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data("CSV holds no data rows".into()));
    }
    Ok(rows)
}

fn parse_refresh(s: &str) -> Result<BatchRefresh, CliError> {
    if s == "sweep" {
        return Ok(BatchRefresh::Sweep);
    }
    if let Some(k) = s.strip_prefix("steps:") {
        let k: u64 = k
            .parse()
            .map_err(|_| CliError::Usage(format!("bad refresh interval {k:?}")))?;
        if k == 0 {
            return Err(CliError::Usage("refresh interval must be positive".into()));
        }
        return Ok(BatchRefresh::Steps(k));
    }
    Err(CliError::Usage(format!(
        "refresh must be `sweep` or `steps:K`, got {s:?}"
    )))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let data = attio::load_batch(&a.data)?;
    let test = a.test.as_ref().map(|p| attio::load_batch(p)).transpose()?;
    if let Some(t) = &test {
        if t.n() != data.n() {
            return Err(CliError::Data(format!(
                "test data has {} variables, training data has {}",
                t.n(),
                data.n()
            )));
        }
    }
    let refresh = parse_refresh(&a.refresh)?;
    let initial_topology = match a.init {
        InitChoice::Train => InitTopology::Train,
        InitChoice::Balanced => InitTopology::Balanced,
        InitChoice::Random => InitTopology::Random,
    };
    let cfg = TrainConfig {
        chi: a.chi,
        learning_rate: a.lr,
        combined_updates: a.combined_updates,
        candidate_updates: a.candidate_updates,
        max_iterations: a.iters,
        batch_size: a.batch_size.min(data.len()),
        batch_refresh: refresh,
        seed: a.seed,
        structure_fixed: a.fixed_structure,
        initial_topology,
        clamp_zero_amplitudes: true,
        snapshot_interval: a.snapshot_interval,
    };

    let progress_every = (a.iters / 20).max(1);
    let mut hook = |ev: TrainEvent| {
        if !a.quiet && (ev.iteration % progress_every == 0 || ev.iteration == a.iters) {
            eprintln!("iter {:>8}  train nll {:.6}", ev.iteration, ev.train_nll);
        }
        if a.checkpoint > 0 && ev.iteration % a.checkpoint == 0 {
            if let Err(e) = attio::save_model(&a.out_model, ev.model) {
                eprintln!("checkpoint failed: {e}");
            }
        }
    };
    let (model, report) = if let Some(init_path) = &a.init_model {
        let start = attio::load_model(init_path)?;
        if start.n() != data.n() {
            return Err(CliError::Data(format!(
                "initial model has {} variables, data has {}",
                start.n(),
                data.n()
            )));
        }
        train_from_model(start, &data, test.as_ref(), &cfg, &mut hook)?
    } else {
        train_with_hooks(&data, test.as_ref(), &cfg, &mut hook)?
    };

    attio::save_model(&a.out_model, &model)?;
    let mut report_file = std::fs::File::create(&a.out_report)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.out_report.display())))?;
    attio::write_report_csv(&mut report_file, &report)?;

    let dot_path = a
        .out_dot
        .clone()
        .unwrap_or_else(|| with_appended_extension(&a.out_model, "dot"));
    write_dot(&model, Some(&report), None, &dot_path)?;

    let manifest = RunManifest {
        format_version: attio::MODEL_VERSION,
        command: "train".into(),
        seed: a.seed,
        dataset: DatasetInfo {
            path: a.data.display().to_string(),
            variables: data.n(),
            rows: data.len(),
            test_path: a.test.as_ref().map(|p| p.display().to_string()),
            test_rows: test.as_ref().map(|t| t.len()),
        },
        config: ConfigEcho {
            chi: cfg.chi,
            learning_rate: cfg.learning_rate,
            combined_updates: cfg.combined_updates,
            candidate_updates: cfg.candidate_updates,
            max_iterations: cfg.max_iterations,
            batch_size: cfg.batch_size,
            batch_refresh: a.refresh.clone(),
            structure_fixed: cfg.structure_fixed,
            initial_topology: format!("{:?}", cfg.initial_topology),
        },
        outputs: BTreeMap::from([
            ("model".into(), a.out_model.display().to_string()),
            ("report".into(), a.out_report.display().to_string()),
            ("dot".into(), dot_path.display().to_string()),
        ]),
    };
    let manifest_path = with_appended_extension(&a.out_model, "manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;

    let final_nll = report.nll_history.last().copied().unwrap_or(f64::NAN);
    println!("final train nll {final_nll:.6}");
    if let Some(best) = &report.best_model {
        println!(
            "best test nll {:.6} at iteration {}",
            best.test_nll, best.iteration
        );
    }
    Ok(())
}

fn with_appended_extension(path: &Path, ext: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".");
    os.push(ext);
    PathBuf::from(os)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let model = attio::load_model(&a.model)?;
    let data = attio::load_batch(&a.data)?;
    if data.n() != model.n() {
        return Err(CliError::Data(format!(
            "model has {} variables, data has {}",
            model.n(),
            data.n()
        )));
    }
    let nll = if a.threads > 1 {
        parallel_nll(&model, &data, a.threads)?
    } else {
        model.nll(&data)?
    };
    println!("{nll:.6}");
    Ok(())
}

/// Mean NLL with rows split across a thread pool. Summation order differs
/// from the single-threaded path in the last bits.
fn parallel_nll(
    model: &TensorTreeModel,
    data: &DataBatch,
    threads: usize,
) -> Result<f64, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let rows: Vec<Vec<u8>> = data.rows().map(|r| r.to_vec()).collect();
    let logs: Result<Vec<f64>, ModelError> = pool.install(|| {
        use rayon::prelude::*;
        rows.par_iter().map(|r| model.log_prob(r)).collect()
    });
    let logs = logs?;
    let mut acc = 0.0;
    for lp in logs {
        if lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        acc -= lp;
    }
    Ok(acc / data.len() as f64)
}

fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    let model = attio::load_model(&a.model)?;
    if a.count == 0 {
        return Err(CliError::Usage("sample count must be positive".into()));
    }
    // one independent stream per sample, so the output is identical for
    // any thread count
    let draw = |i: usize| -> Vec<u8> {
        let mut rng = StdRng::seed_from_u64(mix_seed(a.seed, i as u64));
        sample(&model, &mut rng)
    };
    let rows: Vec<Vec<u8>> = if a.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(a.threads)
            .build()
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..a.count).into_par_iter().map(draw).collect()
        })
    } else {
        (0..a.count).map(draw).collect()
    };
    let batch = DataBatch::from_rows(&rows)?;
    attio::save_batch(&a.out, &batch)?;
    println!(
        "{} rows x {} variables -> {}",
        batch.len(),
        batch.n(),
        a.out.display()
    );
    Ok(())
}

/// splitmix64 finalizer over (seed, index).
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn cmd_export(a: ExportArgs) -> Result<(), CliError> {
    let mut model = attio::load_model(&a.model)?;
    let labels = a.labels.as_ref().map(|p| read_labels(p)).transpose()?;
    if model.n() > att_core::bmi::BMI_EXACT_MAX_N {
        if let Some(data_path) = &a.data {
            let batch = attio::load_batch(data_path)?;
            let bmi = walk_empirical_bmi(&mut model, &batch)?;
            let dot = model.topology().to_dot(&bmi, labels.as_ref());
            std::fs::write(&a.dot, dot)
                .map_err(|e| CliError::Data(format!("{}: {e}", a.dot.display())))?;
        } else {
            write_dot(&model, None, labels.as_ref(), &a.dot)?;
        }
    } else {
        write_dot(&model, None, labels.as_ref(), &a.dot)?;
    }
    if let Some(rank_path) = &a.rank_csv {
        let mode = match a.center {
            CenterChoice::Centroid => CenterMode::Centroid,
            CenterChoice::GraphCenter => CenterMode::GraphCenter,
        };
        let ranks = model.topology().center_distance_ranking(mode);
        let mut out = std::fs::File::create(rank_path)
            .map_err(|e| CliError::Data(format!("{}: {e}", rank_path.display())))?;
        writeln!(out, "variable,rank").map_err(|e| CliError::Data(e.to_string()))?;
        for (var, rank) in ranks {
            writeln!(out, "{var},{rank}").map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    println!("wrote {}", a.dot.display());
    Ok(())
}

/// DOT with BMI coloring: exact values for small models, last training
/// estimates otherwise.
fn write_dot(
    model: &TensorTreeModel,
    report: Option<&TrainReport>,
    labels: Option<&BTreeMap<u32, String>>,
    path: &Path,
) -> Result<(), CliError> {
    let mut bmi: BTreeMap<Edge, f64> = BTreeMap::new();
    if model.n() <= att_core::bmi::BMI_EXACT_MAX_N {
        for e in model.topology().edges() {
            bmi.insert(e, bmi_exact(model, e)?);
        }
    } else if let Some(r) = report {
        bmi = r.edge_bmi.clone();
    }
    let dot = model.topology().to_dot(&bmi, labels);
    std::fs::write(path, dot).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Empirical BMI for every edge by walking the root across the tree.
fn walk_empirical_bmi(
    model: &mut TensorTreeModel,
    batch: &DataBatch,
) -> Result<BTreeMap<Edge, f64>, CliError> {
    if batch.n() != model.n() {
        return Err(CliError::Data(format!(
            "model has {} variables, data has {}",
            model.n(),
            batch.n()
        )));
    }
    let mut out = BTreeMap::new();
    for e in model.topology().edges() {
        model.move_root_along_path(e)?;
        let v = att_core::bmi_empirical(model, e, batch)?;
        out.insert(e, v);
    }
    Ok(out)
}

fn read_labels(path: &Path) -> Result<BTreeMap<u32, String>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{path:?}: {e}")))?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') && line.split_whitespace().count() < 2 {
            continue;
        }
        let mut parts = line.splitn(2, char::is_whitespace);
        let var: u32 = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| CliError::Data(format!("labels line {}: bad variable index", i + 1)))?;
        let label = parts
            .next()
            .ok_or_else(|| CliError::Data(format!("labels line {}: missing label", i + 1)))?
            .trim()
            .to_string();
        out.insert(var, label);
    }
    Ok(out)
}
