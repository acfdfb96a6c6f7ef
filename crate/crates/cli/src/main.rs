//! `fseval`: evaluate few-shot classification accuracy over FVB1 feature
//! banks, sweep pipeline parameters, generate synthetic banks, and validate
//! bank files.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on data errors
//! (unreadable or invalid banks, infeasible sampling). Results go to stdout
//! or `--out`; diagnostics and timing go to stderr.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use fewshot_core::evaluator::{
    self, csv_header, csv_row, summary_json, EvalError, EvalInputs, EvalSummary, PipelineConfig,
    QueryProtocol, SweepParam, SweepPoint,
};
use fewshot_core::feature_store::{
    ensemble_compatibility, load_feature_bank, load_feature_bank_lenient, write_feature_bank,
    BankError, FORMAT_SPEC,
};
use fewshot_core::preprocessing::{concat_features, Mode};
use fewshot_core::sampler::ImbalanceSpec;
use fewshot_core::synthetic::{class_means, generate_ensemble, SyntheticError, SyntheticSpec};
use fewshot_core::{FeatureBank64, FeatureVector64};

#[derive(Parser)]
#[command(
    name = "fseval",
    version,
    about = "Few-shot classification evaluation over FVB1 feature banks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate few-shot accuracy over many sampled episodes
    Eval(EvalArgs),
    /// Evaluate once per value of a swept parameter, with paired seeds
    Sweep(SweepArgs),
    /// Generate synthetic Gaussian feature banks from a JSON spec
    GenSynth(GenSynthArgs),
    /// Report bank invariant violations and ensemble compatibility
    Validate(ValidateArgs),
    /// Print the FVB1 byte layout
    FmtSpec,
}

#[derive(Args)]
struct InputArgs {
    /// FVB1 feature bank file(s)
    #[arg(long = "features", value_name = "FILE", num_args = 1..)]
    features: Vec<PathBuf>,
    /// Enable the ensemble step (E); bank files may be listed here directly
    #[arg(long, value_name = "FILE", num_args = 0..)]
    ensemble: Option<Vec<PathBuf>>,
    /// Generate bank(s) in memory from a synthetic spec JSON instead of files
    #[arg(long, value_name = "SPEC.json")]
    synth: Option<PathBuf>,
    /// How many synthetic banks to generate (>1 implies the ensemble step)
    #[arg(long, value_name = "N", default_value_t = 1)]
    synth_banks: usize,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Inductive)]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Queries per class (balanced protocol)
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 10_000)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Soft K-means temperature
    #[arg(long, default_value_t = 5.0)]
    beta: f64,
    #[arg(long, default_value_t = 30)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    shift_tol: f64,
    /// Cap on how many leading views are averaged (default: all)
    #[arg(long, value_name = "L")]
    views: Option<usize>,
    /// Disable view averaging (AS); the first view stands for each image
    #[arg(long = "no-as")]
    no_as: bool,
    /// Disable centering (C)
    #[arg(long = "no-center")]
    no_center: bool,
    /// Disable hypersphere projection (H)
    #[arg(long = "no-normalize")]
    no_normalize: bool,
    /// Use the imbalanced query protocol (hidden Dirichlet per-class counts)
    #[arg(long)]
    imbalanced: bool,
    /// Total queries per task under --imbalanced
    #[arg(long, default_value_t = 75)]
    q_total: usize,
    /// Symmetric Dirichlet concentration under --imbalanced
    #[arg(long, default_value_t = 2.0)]
    dirichlet_a: f64,
    /// Worker threads (default: machine parallelism); results do not depend on it
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
struct OutputArgs {
    /// Write results here instead of stdout
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Which parameter to sweep
    #[arg(long, value_enum)]
    param: ParamArg,
    /// Comma-separated list of parameter values
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Synthetic spec JSON file
    #[arg(long, value_name = "SPEC.json")]
    spec: PathBuf,
    /// Output bank path; with --banks > 1, an index is inserted before the extension
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of independent banks sharing the spec's class means
    #[arg(long, default_value_t = 1)]
    banks: usize,
}

#[derive(Args)]
struct ValidateArgs {
    /// FVB1 feature bank file(s); several files are also checked for
    /// ensemble compatibility against the first
    #[arg(long = "features", value_name = "FILE", num_args = 1.., required = true)]
    features: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inductive,
    Transductive,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Inductive => Mode::Inductive,
            ModeArg::Transductive => Mode::Transductive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Beta,
    Views,
    Backbones,
}

impl From<ParamArg> for SweepParam {
    fn from(p: ParamArg) -> SweepParam {
        match p {
            ParamArg::Beta => SweepParam::Beta,
            ParamArg::Views => SweepParam::Views,
            ParamArg::Backbones => SweepParam::Backbones,
        }
    }
}

/// CLI failure, carrying the exit code contract.
enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Data(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Validate(args) => cmd_validate(args),
        Command::FmtSpec => {
            println!("{FORMAT_SPEC}");
            Ok(0)
        }
    }
}

/// Banks plus everything needed to echo their provenance into the output.
struct LoadedInputs {
    banks: Vec<FeatureBank64>,
    pinned: Option<Vec<FeatureVector64>>,
    use_ensemble: bool,
    provenance: serde_json::Value,
}

fn load_inputs(input: &InputArgs) -> Result<LoadedInputs, CliError> {
    if let Some(spec_path) = &input.synth {
        if !input.features.is_empty() || input.ensemble.is_some() {
            return Err(CliError::Config(
                "--synth replaces --features/--ensemble; pass one input source".into(),
            ));
        }
        if input.synth_banks == 0 {
            return Err(CliError::Config("--synth-banks must be positive".into()));
        }
        let spec = read_spec(spec_path)?;
        let banks: Vec<FeatureBank64> = generate_ensemble(&spec, input.synth_banks)?;
        let pinned = if spec.pin_supports_to_means {
            let means: Vec<FeatureVector64> = class_means(&spec)?;
            let composed = means
                .iter()
                .map(|m| concat_features(&vec![m.clone(); banks.len()]))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Some(composed)
        } else {
            None
        };
        let provenance = serde_json::json!({
            "synthetic": serde_json::to_value(&spec).expect("spec serializes"),
            "synth_banks": input.synth_banks,
        });
        return Ok(LoadedInputs {
            use_ensemble: banks.len() > 1,
            banks,
            pinned,
            provenance,
        });
    }

    let (paths, use_ensemble) = match &input.ensemble {
        Some(files) if !files.is_empty() => {
            if !input.features.is_empty() {
                return Err(CliError::Config(
                    "list bank files under --features or --ensemble, not both".into(),
                ));
            }
            (files.clone(), true)
        }
        Some(_) => (input.features.clone(), true),
        None => (input.features.clone(), false),
    };
    if paths.is_empty() {
        return Err(CliError::Config(
            "no input: pass --features/--ensemble bank files or --synth spec.json".into(),
        ));
    }
    let banks = paths
        .iter()
        .map(|p| load_feature_bank::<f64>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let provenance = serde_json::json!({
        "features": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    Ok(LoadedInputs {
        banks,
        pinned: None,
        use_ensemble,
        provenance,
    })
}

fn read_spec(path: &Path) -> Result<SyntheticSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid synthetic spec {}: {e}", path.display())))
}

fn build_config(args: &ConfigArgs, use_ensemble: bool) -> PipelineConfig {
    let queries = if args.imbalanced {
        QueryProtocol::Imbalanced(ImbalanceSpec {
            q_total: args.q_total,
            dirichlet_a: args.dirichlet_a,
        })
    } else {
        QueryProtocol::PerClass(args.queries)
    };
    PipelineConfig {
        mode: args.mode.into(),
        use_view_average: !args.no_as,
        use_ensemble,
        use_center: !args.no_center,
        use_normalize: !args.no_normalize,
        ways: args.ways,
        shots: args.shots,
        queries,
        beta: args.beta,
        max_iters: args.max_iters,
        shift_tol: args.shift_tol,
        views: args.views,
        n_runs: args.runs,
        seed: args.seed,
    }
}

fn with_thread_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T, EvalError> + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(f()?),
        Some(0) => Err(CliError::Config("--threads must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f)?)
        }
    }
}

fn emit(output: &OutputArgs, text: &str) -> Result<(), CliError> {
    match &output.out {
        Some(path) => fs::write(path, text)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<u8, CliError> {
    let loaded = load_inputs(&args.input)?;
    let config = build_config(&args.config, loaded.use_ensemble);
    let inputs = EvalInputs {
        banks: &loaded.banks,
        pinned_supports: loaded.pinned.as_deref(),
        base_stats: None,
    };
    let summary = with_thread_pool(args.config.threads, || evaluator::evaluate(&inputs, &config))?;
    eprintln!(
        "{} runs in {:.3}s (mean {:.4} ± {:.4})",
        summary.n_runs, summary.seconds, summary.mean_accuracy, summary.half_interval_95
    );
    let text = match args.output.format {
        FormatArg::Json => render_eval_json(&config, &summary, &loaded.provenance)?,
        FormatArg::Csv => format!("{}\n{}", csv_header(), csv_row(&config, &summary)),
    };
    emit(&args.output, &text)?;
    Ok(0)
}

fn render_eval_json(
    config: &PipelineConfig,
    summary: &EvalSummary,
    provenance: &serde_json::Value,
) -> Result<String, CliError> {
    let mut doc = summary_json(config, summary);
    merge_provenance(&mut doc, provenance);
    serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))
}

fn merge_provenance(doc: &mut serde_json::Value, provenance: &serde_json::Value) {
    if let (Some(config), Some(extra)) = (doc["config"].as_object_mut(), provenance.as_object()) {
        for (key, value) in extra {
            config.insert(key.clone(), value.clone());
        }
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<u8, CliError> {
    let loaded = load_inputs(&args.input)?;
    let param: SweepParam = args.param.into();
    if matches!(param, SweepParam::Backbones) && loaded.pinned.is_some() {
        return Err(CliError::Config(
            "backbones sweeps do not support pinned supports (the composed dimension varies)"
                .into(),
        ));
    }
    // A backbones sweep toggles the ensemble step per point; other sweeps
    // honor the bank count as usual.
    let use_ensemble = loaded.use_ensemble && !matches!(param, SweepParam::Backbones);
    let config = build_config(&args.config, use_ensemble);
    let inputs = EvalInputs {
        banks: &loaded.banks,
        pinned_supports: loaded.pinned.as_deref(),
        base_stats: None,
    };
    let values = args.values.clone();
    let points = with_thread_pool(args.config.threads, || {
        evaluator::sweep(param, &values, &inputs, &config)
    })?;
    for point in &points {
        eprintln!(
            "{param}={}: {} runs in {:.3}s (mean {:.4} ± {:.4})",
            point.value,
            point.summary.n_runs,
            point.summary.seconds,
            point.summary.mean_accuracy,
            point.summary.half_interval_95
        );
    }
    let text = match args.output.format {
        FormatArg::Json => render_sweep_json(param, &points, &loaded.provenance)?,
        FormatArg::Csv => render_sweep_csv(param, &points),
    };
    emit(&args.output, &text)?;
    Ok(0)
}

fn render_sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut out = format!("param,value,{}\n", csv_header());
    for point in points {
        out.push_str(&format!(
            "{param},{},{}\n",
            point.value,
            csv_row(&point.config, &point.summary)
        ));
    }
    out.pop();
    out
}

fn render_sweep_json(
    param: SweepParam,
    points: &[SweepPoint],
    provenance: &serde_json::Value,
) -> Result<String, CliError> {
    let rows: Vec<serde_json::Value> = points
        .iter()
        .map(|point| {
            let mut doc = summary_json(&point.config, &point.summary);
            merge_provenance(&mut doc, provenance);
            doc["value"] = serde_json::json!(point.value);
            doc
        })
        .collect();
    let doc = serde_json::json!({
        "param": param.to_string(),
        "points": rows,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))
}

/// `bank.fvb` with index 2 becomes `bank-2.fvb`.
fn indexed_path(path: &Path, index: usize) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{index}"),
    };
    path.with_file_name(name)
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<u8, CliError> {
    if args.banks == 0 {
        return Err(CliError::Config("--banks must be positive".into()));
    }
    let spec = read_spec(&args.spec)?;
    // generate at storage precision; values are quantized to f32 anyway
    let banks: Vec<fewshot_core::FeatureBank32> = generate_ensemble(&spec, args.banks)?;
    let mut written = Vec::new();
    for (index, bank) in banks.iter().enumerate() {
        let path = if banks.len() == 1 {
            args.out.clone()
        } else {
            indexed_path(&args.out, index)
        };
        write_feature_bank(bank, &path)?;
        written.push(path);
    }
    for path in &written {
        println!("{}", path.display());
    }
    Ok(0)
}

fn cmd_validate(args: ValidateArgs) -> Result<u8, CliError> {
    let mut clean = true;
    let mut banks = Vec::new();
    for path in &args.features {
        let (bank, violations) = load_feature_bank_lenient::<f64>(path)?;
        if violations.is_empty() {
            println!(
                "{}: ok ({} classes, {} images, dim {}, {} views)",
                path.display(),
                bank.n_classes(),
                bank.total_images(),
                bank.dim(),
                bank.n_views()
            );
        } else {
            clean = false;
            println!("{}: {} violation(s)", path.display(), violations.len());
            for violation in &violations {
                println!("  {violation}");
            }
        }
        banks.push(bank);
    }
    if banks.len() > 1 {
        let report = ensemble_compatibility(&banks);
        if report.is_empty() {
            println!("ensemble: compatible");
        } else {
            clean = false;
            println!("ensemble: {} incompatibilit(ies)", report.len());
            for violation in &report {
                println!("  {violation}");
            }
        }
    }
    Ok(if clean { 0 } else { 2 })
}
