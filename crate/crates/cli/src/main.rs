//! `attrib-eval`: command-line front end for the attribution evaluation
//! toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 endpoint error.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use attrib_eval::data::{
    load_dataset, subsample, write_attributions, write_dataset, DataError, Method,
};
use attrib_eval::faithfulness::{faithfulness_curve_with, FaithfulnessError, DEFAULT_THRESHOLDS};
use attrib_eval::harness::{
    aggregate, attributions_from_file, compute_attributions, load_records, plot_tables,
    run_experiment, significance_report, write_atomic, Comparison, ExperimentConfig, GroupField,
    HarnessError, StatMetric,
};
use attrib_eval::plausibility::{
    plausibility_with, random_baseline, PlausibilityError, PlausibilityOptions,
};
use attrib_eval::scorer::server::{serve_http, serve_stdio};
use attrib_eval::scorer::{
    Endpoint, Gateway, Scorer, ScorerError, SyntheticScorer, SyntheticScorerSpec,
};
use attrib_eval::shapley::{ShapleyConfig, ShapleyError};
use attrib_eval::stats::{Adjustment, StatsError};
use attrib_eval::synth::{generate, SynthError, SynthParams};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "attrib-eval",
    version,
    about = "Evaluate token attributions for plausibility and faithfulness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its paired scorer spec.
    Synth(SynthArgs),
    /// Compute attribution records for one method.
    Attribute(AttributeArgs),
    /// Score attributions against gold rationales (average precision).
    Plausibility(PlausibilityArgs),
    /// Run the masking protocol and report the performance curve.
    Faithfulness(FaithfulnessArgs),
    /// Kruskal-Wallis and Dunn tests over run records.
    Stats(StatsArgs),
    /// Run an experiment sweep from a TOML config.
    Run(RunArgs),
    /// Write summary and plot tables from run records.
    Report(ReportArgs),
    /// Expected plausibility of uniform-random scores on a dataset.
    Baseline(BaselineArgs),
    /// Draw a class-covering subsample of a training split.
    Subsample(SubsampleArgs),
    /// Serve a synthetic scorer over HTTP or stdio.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of instances.
    #[arg(long, default_value_t = 200)]
    num_instances: usize,
    /// Vocabulary size.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    /// Fraction of rationale tokens per instance, in (0, 1).
    #[arg(long, default_value_t = 0.3)]
    rationale_prevalence: f64,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    num_labels: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives dataset.jsonl and scorer.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset file (one JSON record per line).
    #[arg(long)]
    dataset: PathBuf,
    /// Expected label set, comma separated; defaults to the labels in the file.
    #[arg(long, value_delimiter = ',')]
    label_set: Option<Vec<String>>,
}

#[derive(Args)]
struct EndpointArgs {
    /// Scorer endpoint: synthetic:<spec.json>, http://host:port or stdio:<command>.
    #[arg(long)]
    endpoint: Option<String>,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Worker budget for batched scoring.
    #[arg(long, env = "ATTRIB_EVAL_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct AttributeArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Attribution method: attn, ig, shap, gold or random.
    #[arg(long)]
    method: Method,
    /// Seed for shap permutations and random scores.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permutations per instance for shap.
    #[arg(long, default_value_t = 25)]
    permutations: usize,
    /// Model id stored in the records; defaults to the endpoint's id.
    #[arg(long)]
    model_id: Option<String>,
    /// Output attribution file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlausibilityArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Attribution file.
    #[arg(long)]
    attributions: PathBuf,
    /// Rank by absolute score.
    #[arg(long = "abs")]
    abs_scores: bool,
    /// Write the JSON result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FaithfulnessArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Attribution file (must contain exactly one method).
    #[arg(long)]
    attributions: PathBuf,
    /// Masking thresholds in percent, comma separated and ascending.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    thresholds: Vec<u32>,
    /// Write the JSON curve here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Experiment output directory (or a directory of run records).
    #[arg(long)]
    records: PathBuf,
    /// methods_pairwise or paradigm_low_vs_high.
    #[arg(long, default_value = "methods_pairwise")]
    comparison: Comparison,
    /// Sampling unit: plausibility (per-instance AP) or faithfulness (per-run AUC).
    #[arg(long, default_value = "plausibility")]
    metric: StatMetric,
    /// Multiple-comparison adjustment: none, bonferroni or holm.
    #[arg(long, default_value = "holm")]
    adjustment: Adjustment,
    /// Restrict methods_pairwise to these training sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Write the JSON reports here in addition to the table on standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Worker budget; overrides the config value.
    #[arg(long, env = "ATTRIB_EVAL_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directory (or a directory of run records).
    #[arg(long)]
    records: PathBuf,
    /// Output directory for the tables; defaults to --records.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary grouping fields, comma separated (model, paradigm, method, training_size, seed).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "paradigm,method,training_size"
    )]
    group_by: Vec<GroupField>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Random draws per instance.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Seed for the random draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SubsampleArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Number of instances to draw.
    #[arg(long)]
    size: usize,
    /// Draw seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accept draws that miss some classes when size < number of classes.
    #[arg(long)]
    allow_partial_coverage: bool,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Synthetic scorer spec.
    #[arg(long)]
    spec: PathBuf,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080", conflicts_with = "stdio")]
    addr: String,
    /// Speak the line protocol on standard input/output instead of HTTP.
    #[arg(long)]
    stdio: bool,
    /// HTTP worker threads.
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn endpoint(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(e)
    }
}

impl From<ScorerError> for Failure {
    fn from(e: ScorerError) -> Self {
        match e {
            ScorerError::InvalidRequest { .. } => Failure::data(e),
            _ => Failure::endpoint(e),
        }
    }
}

impl From<PlausibilityError> for Failure {
    fn from(e: PlausibilityError) -> Self {
        Failure::data(e)
    }
}

impl From<FaithfulnessError> for Failure {
    fn from(e: FaithfulnessError) -> Self {
        match e {
            FaithfulnessError::Scorer(s) => s.into(),
            other => Failure::data(other),
        }
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        Failure::data(e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::usage(e),
            HarnessError::EndpointDown { .. } => Failure::endpoint(e),
            HarnessError::Scorer(s) | HarnessError::Shapley(ShapleyError::Scorer(s)) => s.into(),
            HarnessError::Faithfulness(f) => f.into(),
            other => Failure::data(other),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Data(d) => d.into(),
            other => Failure::usage(other),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Plausibility(a) => cmd_plausibility(a),
        Command::Faithfulness(a) => cmd_faithfulness(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Subsample(a) => cmd_subsample(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("result serializes");
    text.push('\n');
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).map_err(Failure::from),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::data(format!("stdout: {e}"))),
    }
}

fn connect(args: &EndpointArgs) -> Result<(Gateway, String), Failure> {
    let address = args
        .endpoint
        .as_deref()
        .ok_or_else(|| Failure::usage("--endpoint is required"))?;
    let endpoint: Endpoint = address.parse().map_err(Failure::usage)?;
    let down = |e: ScorerError| Failure::endpoint(format!("endpoint {address} is down: {e}"));
    let scorer = endpoint
        .connect(Duration::from_secs(args.timeout))
        .map_err(down)?;
    let (gateway, info) = Gateway::connect(scorer).map_err(down)?;
    if args.workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    Ok((gateway.with_parallelism(args.workers), info.model_id))
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let params = SynthParams {
        num_instances: a.num_instances,
        vocab_size: a.vocab_size,
        rationale_prevalence: a.rationale_prevalence,
        seed: a.seed,
        num_labels: a.num_labels,
        ..SynthParams::default()
    };
    let (dataset, spec) = generate(&params)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let dataset_path = a.out.join("dataset.jsonl");
    let spec_path = a.out.join("scorer.json");
    write_dataset(&dataset_path, &dataset)?;
    spec.save(&spec_path)?;
    println!("{}", dataset_path.display());
    println!("{}", spec_path.display());
    Ok(())
}

fn cmd_attribute(a: AttributeArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data.dataset, a.data.label_set.as_deref())?;
    let connected = match (a.method, &a.endpoint.endpoint) {
        (Method::Gold | Method::Random, None) => None,
        _ => Some(connect(&a.endpoint)?),
    };
    let model_id = a
        .model_id
        .clone()
        .or_else(|| connected.as_ref().map(|(_, id)| id.clone()))
        .unwrap_or_else(|| "none".into());
    let shapley = ShapleyConfig {
        num_permutations: a.permutations,
        ..ShapleyConfig::default()
    };
    if a.permutations == 0 {
        return Err(Failure::usage("--permutations must be at least 1"));
    }
    let records = compute_attributions(
        &dataset,
        a.method,
        &model_id,
        a.seed,
        connected.as_ref().map(|(g, _)| g),
        &shapley,
    )?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    write_attributions(&a.out, &records)?;
    eprintln!(
        "wrote {} {} records to {}",
        records.len(),
        a.method,
        a.out.display()
    );
    Ok(())
}

fn single_method(path: &Path) -> Result<Method, Failure> {
    let methods: BTreeSet<Method> = attrib_eval::data::read_attributions(path)?
        .iter()
        .map(|r| r.method)
        .collect();
    match methods.len() {
        1 => Ok(*methods.first().expect("one method")),
        0 => Err(Failure::data(format!(
            "{}: no attribution records",
            path.display()
        ))),
        _ => Err(Failure::data(format!(
            "{}: contains several methods {methods:?}",
            path.display()
        ))),
    }
}

fn cmd_plausibility(a: PlausibilityArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data.dataset, a.data.label_set.as_deref())?;
    let records = attrib_eval::data::read_attributions(&a.attributions)?;
    let options = PlausibilityOptions {
        absolute: a.abs_scores,
    };
    let result = plausibility_with(&dataset, &records, options)?;
    emit_json(&result, a.out.as_deref())
}

fn cmd_faithfulness(a: FaithfulnessArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data.dataset, a.data.label_set.as_deref())?;
    let method = single_method(&a.attributions)?;
    let (gateway, model_id) = connect(&a.endpoint)?;
    let records = attributions_from_file(&dataset, &a.attributions, method, &model_id)?;
    let curve = faithfulness_curve_with(&dataset, &records, &gateway, &a.thresholds)?;
    emit_json(&curve, a.out.as_deref())
}

fn cmd_stats(a: StatsArgs) -> Result<(), Failure> {
    let records = load_records(&a.records)?;
    let sizes = a.sizes.map(|s| s.into_iter().collect::<BTreeSet<_>>());
    let reports = significance_report(
        &records,
        a.comparison,
        a.metric,
        sizes.as_ref(),
        a.adjustment,
    )?;
    let mut stdout = io::stdout().lock();
    for r in &reports {
        writeln!(stdout, "# groups: {}", group_list(r))
            .map_err(|e| Failure::data(format!("stdout: {e}")))?;
        stdout
            .write_all(r.to_tsv().as_bytes())
            .map_err(|e| Failure::data(format!("stdout: {e}")))?;
    }
    if let Some(out) = &a.out {
        emit_json(&reports, Some(out))?;
    }
    Ok(())
}

fn group_list(r: &attrib_eval::harness::SignificanceReport) -> String {
    r.groups
        .iter()
        .map(|g| format!("{}(n={})", g.name, g.size))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        config.workers = w;
    }
    let records = run_experiment(&config)?;
    eprintln!(
        "{} run records in {}",
        records.len(),
        attrib_eval::harness::runs_dir(&config.output_dir).display()
    );
    print!(
        "{}",
        fs::read_to_string(config.output_dir.join("summary.tsv"))
            .map_err(|e| io_failure(&config.output_dir, e))?
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let records = load_records(&a.records)?;
    let out = a.out.unwrap_or_else(|| a.records.clone());
    let summary = aggregate(&records, &a.group_by)?.to_tsv();
    let (plausibility, gap) = plot_tables(&records)?;
    write_atomic(&out.join("summary.tsv"), summary.as_bytes())?;
    write_atomic(&out.join("plot_plausibility.tsv"), plausibility.as_bytes())?;
    write_atomic(&out.join("plot_faithfulness_gap.tsv"), gap.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data.dataset, a.data.label_set.as_deref())?;
    let baseline = random_baseline(&dataset, a.trials, a.seed)?;
    emit_json(&baseline, None)
}

fn cmd_subsample(a: SubsampleArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.data.dataset, a.data.label_set.as_deref())?;
    let sample = subsample(&dataset, a.size, a.seed, a.allow_partial_coverage)?;
    write_dataset(&a.out, &sample)?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), Failure> {
    let spec = SyntheticScorerSpec::load(&a.spec)?;
    let scorer = SyntheticScorer::new(spec).map_err(Failure::data)?;
    if a.stdio {
        let stdin = io::stdin().lock();
        let stdout = io::stdout().lock();
        return serve_stdio(&scorer, stdin, stdout)
            .map_err(|e| Failure::data(format!("stdio: {e}")));
    }
    let scorer: Arc<dyn Scorer> = Arc::new(scorer);
    let handle = serve_http(scorer, &a.addr, a.threads)
        .map_err(|e| Failure::endpoint(format!("{}: {e}", a.addr)))?;
    eprintln!("listening on {}", handle.url());
    handle.join();
    Ok(())
}
