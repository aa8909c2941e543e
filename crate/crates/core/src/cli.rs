//! The `crossstate` command line.
//!
//! Exit status: 0 on success (and on an accepted `verify`), 1 on a failed
//! command or a rejected `verify`, 2 on usage and configuration errors.
//! Failures print `{"code": ..., "message": ...}` on standard error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::adaptive_auth::{identify, verify, Decision, Gallery};
use crate::config::RunConfig;
use crate::data_io::{read_bytes, read_record, write_bytes, write_synth_dataset, SplitMode, SynthDatasetSpec};
use crate::error::{Error, Result};
use crate::evaluate::{embed_segments, enroll_users, evaluate_saved, run_ablation, run_scenario, TABLE_CSV};
use crate::model::{Ablation, Model};
use crate::preprocess::{load_segments, preprocess_record, read_segments, write_segment_dir, Segment};

#[derive(Debug, Parser)]
#[command(name = "crossstate", version, about = "Cross-state ECG biometrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic rest/exercise dataset.
    Synth(SynthArgs),
    /// Filter, segment and quality-gate a raw dataset.
    Preprocess(PreprocessArgs),
    /// Train a model and evaluate it on the configured scenario.
    Train(TrainArgs),
    /// Evaluate one scenario, training first unless a model is given.
    Eval(EvalArgs),
    /// Run the A1–A5 ablations on the rest-to-exercise scenario.
    Ablation(AblationArgs),
    /// Build a gallery of templates and adaptive thresholds.
    Enroll(EnrollArgs),
    /// Check a probe against one enrolled user.
    Verify(VerifyArgs),
    /// Name the enrolled user closest to a probe.
    Identify(IdentifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long = "rest-sec", default_value_t = 120.0)]
    pub rest_sec: f64,
    #[arg(long = "ex-sec", default_value_t = 120.0)]
    pub ex_sec: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 300.0)]
    pub fs: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Quality report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Run config whose `preprocess` section applies.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Raw or preprocessed dataset; overrides `data.dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario; defaults to `data.mode`.
    #[arg(long)]
    pub mode: Option<SplitMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub mode: Option<SplitMode>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained run directory to score instead of training afresh.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Subset to run, e.g. `--only A1 --only A3`.
    #[arg(long = "only")]
    pub only: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    /// Directory holding `model.json` and the checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying the threshold weights and preprocessing.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// JSON embedding, `.ecg` record or segment archive.
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub user: String,
    /// Needed when the probe is a signal rather than an embedding.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({"code": e.code(), "message": e.to_string()}));
            match e {
                Error::ConfigError(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablation(a) => ablation(a),
        Command::Enroll(a) => enroll(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Identify(a) => identify_cmd(a),
    }
}

fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    // a closed pipe downstream is not a failure of the command
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("value serialises"));
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_bytes(path, &serde_json::to_vec_pretty(v).expect("value serialises"))
}

fn synth(a: SynthArgs) -> Result<i32> {
    let spec = SynthDatasetSpec {
        n_subjects: a.subjects,
        rest_s: a.rest_sec,
        exercise_s: a.ex_sec,
        seed: a.seed,
        fs_hz: a.fs,
        noise_std: a.noise,
    };
    let manifest = write_synth_dataset(&spec, &a.out)?;
    print_json(&json!({"records": manifest.records.len(), "subjects": manifest.subjects().len(), "out": a.out}));
    Ok(0)
}

fn preprocess(a: PreprocessArgs) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.preprocess,
        None => Default::default(),
    };
    let (segments, report) = crate::preprocess::preprocess_dataset(&a.input, &cfg)?;
    write_segment_dir(&segments, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    print_json(&json!({"segments": segments.len(), "quality": report}));
    Ok(0)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Segment>> {
    let dir = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.dataset.clone())
        .ok_or_else(|| Error::ConfigError(vec!["no dataset: pass --data or set data.dataset".into()]))?;
    Ok(load_segments(dir, &cfg.preprocess)?.0)
}

fn train(a: TrainArgs) -> Result<i32> {
    let cfg = RunConfig::load(&a.config)?;
    let segments = dataset(&cfg, a.data.as_deref())?;
    let outcome = run_scenario(&cfg, a.mode.unwrap_or(cfg.data.mode), &segments, Some(&a.out))?;
    print_json(&serde_json::to_value(outcome.report()).expect("report serialises"));
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let cfg = RunConfig::load(&a.config)?;
    let mode = a.mode.unwrap_or(cfg.data.mode);
    let segments = dataset(&cfg, a.data.as_deref())?;
    let report = match &a.model {
        Some(dir) => evaluate_saved(dir, &cfg, mode, &segments)?.report,
        None => {
            let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let run_dir = parent.join(mode.as_str());
            run_scenario(&cfg, mode, &segments, Some(&run_dir))?.evaluation.report
        }
    };
    write_json(&a.out, &report)?;
    print_json(&serde_json::to_value(&report).expect("report serialises"));
    Ok(0)
}

fn ablation(a: AblationArgs) -> Result<i32> {
    let cfg = RunConfig::load(&a.config)?;
    let segments = dataset(&cfg, a.data.as_deref())?;
    let which = if a.only.is_empty() { Ablation::ALL.to_vec() } else { a.only.clone() };
    let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let rows = run_ablation(&cfg, &segments, &which, Some(parent))?;
    if a.out.file_name().is_some_and(|n| n != TABLE_CSV) {
        let table = read_bytes(&parent.join(TABLE_CSV))?;
        write_bytes(&a.out, &table)?;
    }
    print_json(&serde_json::to_value(&rows).expect("rows serialise"));
    Ok(0)
}

fn enroll(a: EnrollArgs) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (model, _) = Model::<f32>::load(&a.model)?;
    let (segments, _) = load_segments(&a.data, &cfg.preprocess)?;
    let (emb, _) = embed_segments(&model, &segments)?;
    let users: Vec<String> = segments.iter().map(|s| s.subject_id.clone()).collect();
    let e = enroll_users(&emb, &users, &emb, &users, &cfg.weights)?;
    let gallery = Gallery::from_parts(&e.templates, &e.profiles)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
    }
    gallery.save(&a.out)?;
    let thresholds: serde_json::Map<String, serde_json::Value> = e.profiles.iter().map(|p| (p.user.clone(), json!(p.tau_p))).collect();
    print_json(&json!({"users": gallery.users.len(), "tau_b": e.tau_b, "thresholds": thresholds}));
    Ok(0)
}

/// The probe as one unit embedding: a JSON vector is used as is, a signal is
/// segmented and its segment embeddings averaged.
fn probe_embedding(path: &Path, model: Option<&Path>) -> Result<Vec<f64>> {
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        });
    }
    let dir = model.ok_or_else(|| Error::ConfigError(vec!["a signal probe needs --model".into()]))?;
    let (model, _) = Model::<f32>::load(dir)?;
    let segments = match read_record(path) {
        Ok(rec) => preprocess_record(&rec, &Default::default())?.0,
        Err(Error::MalformedHeader { .. }) => read_segments(path)?,
        Err(e) => return Err(e),
    };
    if segments.is_empty() {
        return Err(Error::InsufficientData(format!("{} yields no usable segments", path.display())));
    }
    let (emb, _) = embed_segments(&model, &segments)?;
    Ok(crate::adaptive_auth::enroll("probe", &emb)?.vector)
}

fn verify_cmd(a: VerifyArgs) -> Result<i32> {
    let gallery = Gallery::load(&a.gallery)?;
    let (template, tau_p) = gallery
        .entry(&a.user)
        .ok_or_else(|| Error::InsufficientData(format!("user {} is not enrolled", a.user)))?;
    let probe = probe_embedding(&a.probe, a.model.as_deref())?;
    let (decision, score) = verify(&probe, &template, tau_p);
    print_json(&json!({"user": a.user, "score": score, "tau_p": tau_p, "decision": decision}));
    Ok(if decision == Decision::Accept { 0 } else { 1 })
}

fn identify_cmd(a: IdentifyArgs) -> Result<i32> {
    let gallery = Gallery::load(&a.gallery)?;
    let probe = probe_embedding(&a.probe, a.model.as_deref())?;
    let templates = gallery.templates();
    let (best, score) = identify(&probe, &templates)?;
    print_json(&json!({"user": best.user, "score": score}));
    Ok(0)
}
