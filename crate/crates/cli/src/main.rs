//! `unicr`: batch front end for feature extraction, training, inference,
//! evaluation and the conformal validity simulation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 unsatisfiable risk constraint (the trained policy abstains always).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use unicr::artifact::{load_artifact, load_artifact_checked, save_artifact, write_atomic};
use unicr::config::RunConfig;
use unicr::eval::{rc_curve, rc_curve_csv, reliability_csv, summarize};
use unicr::evidence::{assemble_features, RawSignalsRecord};
use unicr::metrics::{reliability_data, BinScheme};
use unicr::pipeline::{infer, train, Decision, DecisionRecord, RetrievalRefresh};
use unicr::risk::PolicyMode;
use unicr::simulate::{run_simulation, SimulationSpec};
use unicr::targets::CorrectnessLabel;

#[derive(Parser)]
#[command(name = "unicr", version, about = "Evidence calibration and risk-controlled abstention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble feature vectors from raw signal records.
    Extract(ExtractArgs),
    /// Fit the calibration head and thresholds; writes artifact.json.
    Train(TrainArgs),
    /// Answer-or-abstain decisions for records; writes decisions.jsonl.
    Infer(InferArgs),
    /// Metrics, risk-coverage and reliability data; writes summary.json and CSVs.
    Eval(EvalArgs),
    /// Monte Carlo validity experiment; writes validity_report.json.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Validation,
    Conformal,
    Bucketed,
}

impl From<ModeArg> for PolicyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Validation => PolicyMode::Validation,
            ModeArg::Conformal => PolicyMode::Conformal,
            ModeArg::Bucketed => PolicyMode::ConformalBucketed,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, env = "UNICR_SEED")]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PolicyArgs {
    /// Conformal risk level.
    #[arg(long, conflicts_with = "rho")]
    alpha: Option<f64>,
    /// Validation risk budget.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Black-box features only: drop the likelihood and entropy families.
    #[arg(long, alias = "api-only")]
    k_features: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Raw signal records (JSONL).
    input: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long, alias = "api-only")]
    k_features: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Labelled raw signal records (JSONL).
    input: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Records to decide on (JSONL).
    input: PathBuf,
    #[arg(long)]
    artifact: PathBuf,
    /// Refreshed-retrieval variants of records, keyed by id (JSONL).
    #[arg(long)]
    refresh: Option<PathBuf>,
    /// Reject the artifact unless it was built in this mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Decisions or scored lines (JSONL) with `confidence` and either `label`
    /// or an `id` found in `--records`.
    input: PathBuf,
    /// Labelled records to join by id.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Risk level for coverage at risk and violation rates.
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec (JSON); defaults are used when omitted.
    spec: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, env = "UNICR_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let is_config = e
            .chain()
            .filter_map(|c| c.downcast_ref::<unicr::Error>())
            .any(|u| matches!(u.root(), unicr::Error::Config(_)));
        if is_config {
            Failure::Config(e)
        } else {
            Failure::Data(e)
        }
    }
}

impl From<unicr::Error> for Failure {
    fn from(e: unicr::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_error(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).map_err(Failure::Config)?;
            RunConfig::from_json(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_policy_args(cfg: &mut RunConfig, args: &PolicyArgs) -> CliResult<()> {
    if let Some(mode) = args.mode {
        cfg.policy.mode = mode.into();
    }
    if let Some(a) = args.alpha.or(args.rho) {
        cfg.policy.alpha = a;
    }
    if args.rho.is_some() && args.mode.is_none() {
        cfg.policy.mode = PolicyMode::Validation;
    }
    if args.k_features {
        cfg.features = cfg.features.clone().api_only();
    }
    cfg.validate()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(item);
    }
    Ok(out)
}

fn read_records(path: &Path) -> CliResult<Vec<RawSignalsRecord>> {
    let records: Vec<RawSignalsRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().with_context(|| format!("{} record {}", path.display(), i + 1))?;
    }
    Ok(records)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> CliResult<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).map_err(|e| Failure::Data(e.into()))?);
        s.push('\n');
    }
    Ok(s)
}

fn write_output(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_meta(dir: &Path, command: &str, config_hash: &str, extra: serde_json::Value) -> CliResult<()> {
    let mut meta = json!({ "command": command, "config_hash": config_hash });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Failure::Data(e.into()))? + "\n";
    write_output(dir, &format!("{command}.meta.json"), &text)?;
    Ok(())
}

#[derive(Serialize)]
struct FeatureLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    features: unicr::evidence::FeatureVector,
}

fn cmd_extract(args: ExtractArgs) -> CliResult<ExitCode> {
    let mut cfg = load_config(&args.common)?;
    if args.k_features {
        cfg.features = cfg.features.clone().api_only();
    }
    cfg.features.validate()?;
    let records = read_records(&args.input)?;
    let mut lines = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let features = assemble_features(r, &cfg.features).with_context(|| format!("{} line {}", args.input.display(), i + 1))?;
        lines.push(FeatureLine { id: &r.id, features });
    }
    write_output(&args.common.out_dir, "features.jsonl", &to_jsonl(&lines)?)?;
    write_meta(&args.common.out_dir, "extract", &cfg.config_hash(), json!({ "records": records.len() }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> CliResult<ExitCode> {
    let mut cfg = load_config(&args.common)?;
    apply_policy_args(&mut cfg, &args.policy)?;
    let records = read_records(&args.input)?;
    let artifact = train(&records, &cfg)?;
    fs::create_dir_all(&args.common.out_dir).with_context(|| format!("creating {}", args.common.out_dir.display()))?;
    let path = args.common.out_dir.join("artifact.json");
    save_artifact(&artifact, &path).with_context(|| format!("writing {}", path.display()))?;
    let flags = artifact.policy.threshold.flags;
    write_meta(
        &args.common.out_dir,
        "train",
        &cfg.config_hash(),
        json!({
            "records": records.len(),
            "global_tau": artifact.policy.threshold.global_tau,
            "abstain_always": flags.abstain_always,
            "no_errors_observed": flags.no_errors_observed,
        }),
    )?;
    if flags.abstain_always {
        eprintln!("unicr: no threshold satisfies the risk constraint; the policy abstains on every input");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

/// Looks up refreshed variants by record id.
struct RefreshTable(HashMap<String, RawSignalsRecord>);

impl RetrievalRefresh for RefreshTable {
    fn refresh(&mut self, record: &RawSignalsRecord) -> Result<RawSignalsRecord, String> {
        self.0
            .get(&record.id)
            .cloned()
            .ok_or_else(|| format!("no refreshed variant for record {}", record.id))
    }
}

fn cmd_infer(args: InferArgs) -> CliResult<ExitCode> {
    let artifact = match args.mode {
        Some(m) => load_artifact_checked(&args.artifact, m.into()),
        None => load_artifact(&args.artifact),
    }
    .with_context(|| format!("artifact {}", args.artifact.display()))?;
    if args.common.config.is_some() {
        let cfg = load_config(&args.common)?;
        if cfg.policy.mode != artifact.policy.threshold.mode {
            return Err(Failure::Data(anyhow!(
                "artifact was built in {:?} mode but the config requests {:?}",
                artifact.policy.threshold.mode,
                cfg.policy.mode
            )));
        }
    }
    let records = read_records(&args.input)?;
    let mut table = match &args.refresh {
        Some(p) => Some(RefreshTable(read_records(p)?.into_iter().map(|r| (r.id.clone(), r)).collect())),
        None => None,
    };
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let refresh = table.as_mut().map(|t| t as &mut dyn RetrievalRefresh);
        let outcome = infer(&artifact, r, refresh, None).with_context(|| format!("{} line {}", args.input.display(), i + 1))?;
        out.push(DecisionRecord::new(&r.id, &outcome));
    }
    write_output(&args.common.out_dir, "decisions.jsonl", &to_jsonl(&out)?)?;
    let answered = out.iter().filter(|d| d.decision == Decision::Answer).count();
    write_meta(
        &args.common.out_dir,
        "infer",
        &artifact.provenance.config_hash,
        json!({ "records": out.len(), "answered": answered }),
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct ScoredLine {
    #[serde(default)]
    id: Option<String>,
    confidence: f64,
    #[serde(default)]
    decision: Option<Decision>,
    #[serde(default)]
    label: Option<CorrectnessLabel>,
}

fn cmd_eval(args: EvalArgs) -> CliResult<ExitCode> {
    if !(0.0..=1.0).contains(&args.rho) {
        return Err(config_error(format!("rho = {} outside [0, 1]", args.rho)));
    }
    if args.bootstrap < 100 {
        return Err(config_error("--bootstrap needs at least 100 resamples"));
    }
    let cfg = load_config(&args.common)?;
    let lines: Vec<ScoredLine> = read_jsonl(&args.input)?;
    let labels_by_id: HashMap<String, CorrectnessLabel> = match &args.records {
        Some(p) => read_records(p)?
            .into_iter()
            .filter_map(|r| r.label.map(|l| (r.id, l)))
            .collect(),
        None => HashMap::new(),
    };
    let mut c = Vec::with_capacity(lines.len());
    let mut r = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let label = line
            .label
            .or_else(|| line.id.as_ref().and_then(|id| labels_by_id.get(id).copied()))
            .ok_or_else(|| Failure::Data(anyhow!("{} line {}: no label", args.input.display(), i + 1)))?;
        c.push(line.confidence);
        r.push(label.value);
    }
    let mask: Option<Vec<bool>> = if lines.iter().all(|l| l.decision.is_some()) && !lines.is_empty() {
        Some(lines.iter().map(|l| l.decision == Some(Decision::Answer)).collect())
    } else {
        None
    };
    let summary = summarize(&c, &r, mask.as_deref(), args.rho, args.bootstrap, cfg.seed)?;
    let dir = &args.common.out_dir;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Data(e.into()))? + "\n";
    write_output(dir, "summary.json", &text)?;
    write_output(dir, "rc_curve.csv", &rc_curve_csv(&rc_curve(&c, &r)))?;
    write_output(dir, "reliability.csv", &reliability_csv(&reliability_data(&c, &r, BinScheme::Fixed15)))?;
    write_meta(dir, "eval", &cfg.config_hash(), json!({ "records": c.len() }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<ExitCode> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Config)?;
            serde_json::from_str::<SimulationSpec>(&text)
                .with_context(|| format!("spec {}", p.display()))
                .map_err(Failure::Config)?
        }
        None => SimulationSpec::default(),
    };
    if let Some(a) = args.alpha {
        spec.alpha = a;
    }
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if args.threads.is_some() {
        spec.threads = args.threads;
    }
    let report = run_simulation(&spec)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.into()))? + "\n";
    write_output(&args.out_dir, "validity_report.json", &text)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let code = f.code();
            let (Failure::Config(e) | Failure::Data(e)) = f;
            eprintln!("unicr: {e:#}");
            ExitCode::from(code)
        }
    }
}
