//! Command-line surface.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use setinfer_core::afa::{acquire, run_batch_afa, suggest_next, write_session_log, AfaConfig, AfaSession, Suggestion};
use setinfer_core::eval::{eval_few_shot, render_svg, write_metric_curve, EvalReport, Series};
use setinfer_core::schema::{load_csv, load_dataset_with_warnings};
use setinfer_core::synth::{synth_generate, GeneratorSpec, FAMILIES};
use setinfer_core::trainer::{finetune, fit, split_bundle, write_curve, Precision};
use setinfer_core::{DatasetBundle, FeatureSpec, FeatureType, Model};

use crate::config::RunConfig;
use crate::service::{serve, AppState};
use crate::wire::value_from_wire;

#[derive(Debug, Parser)]
#[command(name = "setinfer", version, about = "Set-based tabular inference with feature semantics")]
pub struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (TOML or JSON) with `[model]` and `[train]` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parameter precision during training.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bundle file.
    Synth(SynthArgs),
    /// Train a model on one or more bundles.
    Train(TrainArgs),
    /// Continue training a checkpoint on one bundle.
    Finetune(FinetuneArgs),
    /// Few-shot evaluation on a held-out split.
    Eval(EvalArgs),
    /// Acquisition curves, or an interactive terminal session.
    Afa(AfaArgs),
    /// Serve the HTTP interface.
    Serve(ServeArgs),
    /// Summarise a checkpoint, report or bundle.
    Inspect(InspectArgs),
    /// Draft a schema sidecar for a CSV file.
    Author(AuthorArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// One of: linear-gaussian, categorical-bayes-net, copy, random-bayes-net, xor-style, mixed.
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    /// Prefix added to every feature id.
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Bundle files; repeat for a collection.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited training curve.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Demonstrations per test row.
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Target when the bundle designates none.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AfaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub budget: f64,
    /// Rows to run, from the start of the bundle.
    #[arg(long, default_value_t = 100)]
    pub rows: usize,
    /// Line-delimited `{step, metric}` curve.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Vector-graphic render of the curve.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Session log of the interactive run.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Ask for each value on the terminal.
    #[arg(long)]
    pub interactive: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bundles whose schemas are served; repeatable.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuthorArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_overrides(cli.seed, cli.precision.map(Into::into));
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    match cli.command {
        Command::Synth(a) => synth(&a, seed),
        Command::Train(a) => train(&a, cfg),
        Command::Finetune(a) => finetune_cmd(&a, cfg, cli.config.is_some()),
        Command::Eval(a) => eval(&a, seed),
        Command::Afa(a) => afa(&a, seed),
        Command::Serve(a) => serve_cmd(&a, seed),
        Command::Inspect(a) => inspect(&a.path),
        Command::Author(a) => author(&a),
    }
}

fn load_bundle(path: &Path) -> anyhow::Result<DatasetBundle> {
    let (b, warnings) = load_dataset_with_warnings(path).with_context(|| format!("loading {}", path.display()))?;
    if !warnings.is_empty() {
        log::warn!("{}: {} values clamped to their ranges", path.display(), warnings.len());
    }
    Ok(b)
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: &SynthArgs, seed: u64) -> anyhow::Result<()> {
    let spec = GeneratorSpec::by_name(&a.family, a.rows)
        .with_context(|| format!("families: {}", FAMILIES.join(", ")))?
        .with_prefix(&a.prefix);
    let b = synth_generate(&spec, seed)?;
    b.save(&a.out)?;
    println!("wrote {} rows of `{}` to {}", b.rows.len(), b.name(), a.out.display());
    Ok(())
}

fn print_point(p: &setinfer_core::trainer::CurvePoint) {
    match p.val_nll {
        Some(v) => println!("step {:>6}  loss {:>9.4}  val_nll {:>9.4}", p.step, p.loss, v),
        None => println!("step {:>6}  loss {:>9.4}", p.step, p.loss),
    }
}

fn train(a: &TrainArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let data = a.data.iter().map(|p| load_bundle(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let model = Model::new(cfg.model.clone())?;
    let out = fit(model, &data, &cfg.train)?;
    out.curve.iter().for_each(print_point);
    out.model.save(&a.out)?;
    if let Some(c) = &a.curve {
        write_curve(c, &out.curve)?;
    }
    println!("saved {} (config {})", a.out.display(), out.model.config.digest());
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs, mut cfg: RunConfig, has_config: bool) -> anyhow::Result<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let model = load_model(&a.checkpoint)?;
    // Without a config file, the checkpoint's own model config is expected.
    let expected = if has_config { cfg.model.clone() } else { model.config.clone() };
    let bundle = load_bundle(&a.data)?;
    let out = finetune(model, &expected, &bundle, &cfg.train)?;
    out.curve.iter().for_each(print_point);
    out.model.save(&a.out)?;
    if let Some(c) = &a.curve {
        write_curve(c, &out.curve)?;
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut bundle = load_bundle(&a.data)?;
    if let Some(t) = &a.target {
        bundle.schema.require(t)?;
        bundle.target_ids = vec![t.clone()];
    }
    let (train, test) = split_bundle(&bundle, a.test_fraction, seed);
    let seeds: Vec<u64> = (0..a.seeds).map(|k| seed + k).collect();
    let report = eval_few_shot(&model, &train, &test, a.shots, &seeds, &model.config.digest())?;
    print_report(&report);
    if let Some(o) = &a.out {
        report.save(o)?;
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("{}: {} test rows, {} shots, seeds {:?}", r.dataset, r.test_rows, r.shots, r.seeds);
    for s in &r.per_seed {
        let m: Vec<String> = s.targets.iter().map(|t| format!("{} {} {:.4}", t.feature_id, t.metric, t.value)).collect();
        println!("  seed {:>4}  nll {:>9.4}  {}", s.seed, s.nll, m.join("  "));
    }
    let m: Vec<String> = r.mean.targets.iter().map(|t| format!("{} {} {:.4}", t.feature_id, t.metric, t.value)).collect();
    println!("  mean       nll {:>9.4}  {}", r.mean.nll, m.join("  "));
}

fn afa(a: &AfaArgs, seed: u64) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let bundle = load_bundle(&a.data)?;
    let cfg = AfaConfig::new(&a.target, a.budget);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if a.interactive {
        let stdin = std::io::stdin();
        return interactive(&model, &bundle, cfg, &mut rng, &mut stdin.lock(), &mut std::io::stdout(), a.log.as_deref());
    }
    let curve = run_batch_afa(&bundle, &model, &cfg, &mut rng, a.rows)?;
    for p in &curve.points {
        println!("step {}  {} {:.4}", p.step, curve.metric, p.metric);
    }
    let points: Vec<(usize, f64)> = curve.points.iter().map(|p| (p.step, p.metric)).collect();
    if let Some(o) = &a.out {
        write_metric_curve(o, &points)?;
    }
    if let Some(s) = &a.svg {
        let series = Series {
            label: bundle.name().to_string(),
            points: points.iter().map(|&(k, m)| (k as f64, m)).collect(),
        };
        let title = format!("{} of `{}` by acquisition step", curve.metric, a.target);
        std::fs::write(s, render_svg(&title, "acquired features", &curve.metric, &[series]))?;
    }
    Ok(())
}

/// Terminal loop: show the suggestion, read `value` for it or
/// `feature=value` for any feature, `stop` to end.
pub fn interactive(
    model: &Model,
    bundle: &DatasetBundle,
    cfg: AfaConfig,
    rng: &mut ChaCha8Rng,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    log_path: Option<&Path>,
) -> anyhow::Result<()> {
    let mut session = AfaSession::new(bundle.schema.clone(), cfg)?;
    loop {
        let pred = session.predict_target(model)?;
        writeln!(out, "prediction: {}", serde_json::to_string(&pred.targets[0].summary_compact())?)?;
        writeln!(out, "remaining budget: {}", session.remaining)?;
        let suggested = match suggest_next(&mut session, model, rng)? {
            Suggestion::Acquire {
                feature_id,
                mi_estimate,
                cost,
                ..
            } => {
                let f = session.schema.require(&feature_id)?;
                writeln!(
                    out,
                    "suggest `{feature_id}` ({}) cost {cost}, information {mi_estimate:.4}{}",
                    f.desc,
                    choices_hint(f)
                )?;
                feature_id
            }
            Suggestion::Stop { reason } => {
                writeln!(out, "stop: {}", serde_json::to_string(&reason)?)?;
                break;
            }
        };
        write!(out, "> ")?;
        out.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim();
        if line == "stop" {
            break;
        }
        let (fid, raw) = match line.split_once('=') {
            Some((f, v)) => (f.trim().to_string(), v.trim()),
            None => (suggested, line),
        };
        let json = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let result = value_from_wire(&session.schema, &fid, &json)
            .and_then(|v| acquire(&mut session, &fid, v, model).map(|_| ()));
        if let Err(e) = result {
            writeln!(out, "rejected: {e}")?;
        }
    }
    if let Some(p) = log_path {
        write_session_log(p, &session)?;
    }
    Ok(())
}

fn choices_hint(f: &FeatureSpec) -> String {
    match (f.ftype, f.range) {
        (FeatureType::Categorical, _) => format!(" one of {}", f.choices.join("|")),
        (FeatureType::Continuous, Some((lo, hi))) => format!(" in [{lo}, {hi}]"),
        (FeatureType::Continuous, None) => String::new(),
    }
}

trait Compact {
    fn summary_compact(&self) -> serde_json::Value;
}

impl Compact for setinfer_core::dist::TargetPrediction {
    /// Probabilities for categories, mean and spread for numbers.
    fn summary_compact(&self) -> serde_json::Value {
        match self.summary() {
            setinfer_core::dist::Summary::Categorical { choices, probs, .. } => {
                let m: serde_json::Map<String, serde_json::Value> = choices
                    .into_iter()
                    .zip(probs)
                    .map(|(c, p)| (c, serde_json::json!((p * 1e4).round() / 1e4)))
                    .collect();
                serde_json::Value::Object(m)
            }
            setinfer_core::dist::Summary::Gmm { mean_raw, sd_raw, .. } => {
                serde_json::json!({ "mean": mean_raw, "sd": sd_raw })
            }
        }
    }
}

fn serve_cmd(a: &ServeArgs, seed: u64) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = a.data.iter().map(|p| load_bundle(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let state = Arc::new(AppState::new(Arc::new(model), &data, seed));
    tokio::runtime::Runtime::new()?.block_on(serve(state, a.addr))
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if v.get("rows").is_some() && v.get("features").is_some() {
                let b = load_bundle(path)?;
                println!("bundle `{}`: {} rows, targets {:?}", b.name(), b.rows.len(), b.target_ids);
                for f in b.features() {
                    println!("  {:<16} {:?} {}", f.id, f.ftype, f.desc);
                }
            } else {
                println!("{}", serde_json::to_string_pretty(&v)?);
            }
        }
        "jsonl" => {
            let text = std::fs::read_to_string(path)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            println!("{} records", lines.len());
            for l in lines.iter().take(3).chain(lines.iter().skip(3).rev().take(1)) {
                println!("  {l}");
            }
        }
        _ => {
            let model = load_model(path)?;
            println!("config digest {}", model.config.digest());
            println!("parameter digest {}", model.param_digest());
            println!(
                "{} tensors, {} scalars",
                model.params.len(),
                model.params.num_scalars()
            );
            println!("{}", serde_json::to_string_pretty(&model.config)?);
        }
    }
    Ok(())
}

/// Infer feature types and ranges from a CSV and write a sidecar whose
/// descriptions and context are left empty for the author; loading fails
/// until they are filled in.
fn author(a: &AuthorArgs) -> anyhow::Result<()> {
    let mut reader = csv::Reader::from_path(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut cols: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in reader.records() {
        for (i, cell) in rec?.iter().enumerate().take(header.len()) {
            let c = cell.trim();
            if !c.is_empty() {
                cols[i].push(c.to_string());
            }
        }
    }
    let features: Vec<serde_json::Value> = header
        .iter()
        .zip(&cols)
        .map(|(id, vals)| draft_feature(id, vals))
        .collect::<anyhow::Result<_>>()?;
    let name = a
        .name
        .clone()
        .or_else(|| a.csv.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let sidecar = serde_json::json!({ "name": name, "context": "", "features": features });
    std::fs::write(&a.out, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    println!(
        "wrote {} features to {}; fill in `context` and every `desc` before loading",
        header.len(),
        a.out.display()
    );
    Ok(())
}

fn draft_feature(id: &str, vals: &[String]) -> anyhow::Result<serde_json::Value> {
    if vals.is_empty() {
        bail!("column `{id}` has no values");
    }
    let nums: Option<Vec<f64>> = vals.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
    Ok(match nums {
        Some(n) if n.iter().any(|x| x.fract() != 0.0) || distinct(vals) > 10 => {
            let lo = n.iter().copied().fold(f64::INFINITY, f64::min);
            let mut hi = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                hi = lo + 1.0;
            }
            serde_json::json!({ "id": id, "desc": "", "type": "continuous", "range": [lo, hi] })
        }
        _ => {
            let mut choices: Vec<&String> = vals.iter().collect();
            choices.sort();
            choices.dedup();
            serde_json::json!({ "id": id, "desc": "", "type": "categorical", "choices": choices })
        }
    })
}

fn distinct(vals: &[String]) -> usize {
    vals.iter().collect::<std::collections::BTreeSet<_>>().len()
}

/// Load a CSV with a completed sidecar, for scripts that call the library.
pub fn load_authored(csv: &Path, sidecar: &Path) -> anyhow::Result<DatasetBundle> {
    Ok(load_csv(csv, sidecar)?.0)
}
