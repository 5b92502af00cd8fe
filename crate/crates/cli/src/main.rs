mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alans::dataset::{generate_split, load_manifest, manifest_file_name, read_dataset, DatasetManifest};
use alans::experiment::{evaluate_report, solve_trace, train_variant, AblationRow, AblationTable, Variant};
use alans::reasoner::answer_distribution;
use alans::rpm::{DistractorStrategy, Phase, Regime, RpmInstance};
use alans::trainer::{grad_check, GradCheckConfig, TrainConfig, TrainError};
use alans::{Checkpoint, Model, ReasonerConfig};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::ConfigFile;

/// Raised for bad flag or config values; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "alans", version, about = "Algebraic abstract reasoning on symbolic progressive matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test splits and a manifest
    Gen(GenArgs),
    /// Train a model variant and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report tables
    Eval(EvalArgs),
    /// Trace the solution of a single instance
    Solve(SolveArgs),
    /// Train and compare the Peano and independent encodings
    Ablate(TrainArgs),
    /// Compare reverse-mode gradients with central differences
    Gradcheck(GradArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key = value experiment file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regime: Option<String>,
    /// alans | alans-ind | alans-gt
    #[arg(long)]
    variant: Option<String>,
    /// Perception noise level
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Total instances across the three folds
    #[arg(long)]
    n: Option<usize>,
    /// perturb_one | hierarchical
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding the manifest and split files
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validation instances scored per epoch
    #[arg(long)]
    val_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fold to evaluate (default test)
    #[arg(long)]
    phase: Option<String>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Instance id inside the chosen fold
    #[arg(long)]
    id: u64,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    d: Option<usize>,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Number of seeds, starting at --seed
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

/// Settings shared by all commands after merging flags with the config file.
#[derive(Clone)]
struct Resolved {
    file: ConfigFile,
    seed: u64,
    regime: Option<Regime>,
    variant: Option<Variant>,
    noise: f64,
    out: Option<PathBuf>,
}

fn parse_with<T: std::str::FromStr<Err = String>>(value: Option<String>, what: &str) -> Result<Option<T>> {
    match value {
        None => Ok(None),
        Some(v) => match v.parse() {
            Ok(x) => Ok(Some(x)),
            Err(e) => usage(format!("--{what}: {e}")),
        },
    }
}

fn resolve(common: &Common) -> Result<Resolved> {
    let file = match &common.config {
        Some(p) => ConfigFile::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => ConfigFile::default(),
    };
    let pick_str = |flag: &Option<String>, key: &str| -> Result<Option<String>> { file.pick(flag.clone(), key) };
    let regime = parse_with(pick_str(&common.regime, "regime")?, "regime")?;
    let variant = parse_with(pick_str(&common.variant, "variant")?, "variant")?;
    let noise = file.pick(common.noise, "noise").map_err(usage_err)?.unwrap_or(0.1);
    if !(0.0..1.0).contains(&noise) {
        return usage(format!("--noise must lie in [0, 1), got {noise}"));
    }
    Ok(Resolved {
        seed: file.pick(common.seed, "seed").map_err(usage_err)?.unwrap_or(0),
        regime,
        variant,
        noise,
        out: file.pick(common.out.clone(), "out").map_err(usage_err)?,
        file,
    })
}

fn usage_err(e: anyhow::Error) -> anyhow::Error {
    UsageError(format!("{e:#}")).into()
}

fn strategy(r: &Resolved, flag: &Option<String>) -> Result<DistractorStrategy> {
    Ok(parse_with(r.file.pick(flag.clone(), "strategy").map_err(usage_err)?, "strategy")?.unwrap_or(DistractorStrategy::PerturbOne))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    match value {
        Some(v) => Ok(v),
        None => usage(format!("--{flag} is required")),
    }
}

fn load_split(dir: &Path, regime: Regime, strategy: DistractorStrategy, phase: Phase) -> Result<(DatasetManifest, Vec<RpmInstance>)> {
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    let manifest = load_manifest(&dir.join(manifest_file_name(regime, strategy)))?;
    let path = manifest
        .path_of(dir, phase)
        .ok_or_else(|| anyhow!("manifest lists no {phase} file"))?;
    let instances = read_dataset(&path)?;
    Ok((manifest, instances))
}

fn train_config(r: &Resolved, a: &TrainArgs) -> Result<TrainConfig> {
    let f = &r.file;
    let mut cfg = TrainConfig {
        seed: r.seed,
        ..TrainConfig::default()
    };
    let pick = |e: Result<Option<usize>>| e.map_err(usage_err);
    if let Some(v) = pick(f.pick(a.d, "d"))? {
        cfg.d = v;
    }
    if let Some(v) = f.pick(a.lr, "lr").map_err(usage_err)? {
        cfg.learning_rate = v;
    }
    if let Some(v) = pick(f.pick(a.stage1_epochs, "stage1_epochs"))? {
        cfg.stage1_epochs = v;
    }
    if let Some(v) = pick(f.pick(a.stage2_epochs, "stage2_epochs"))? {
        cfg.stage2_epochs = v;
    }
    if let Some(v) = pick(f.pick(a.batch_size, "batch_size"))? {
        cfg.batch_size = v;
    }
    cfg.val_limit = pick(f.pick(a.val_limit, "val_limit"))?;
    if let Some(v) = f.pick::<f64>(None, "aux_weight_cyclic").map_err(usage_err)? {
        cfg.aux_weight_cyclic = v;
    }
    if let Some(v) = f.pick::<f64>(None, "aux_weight_joint").map_err(usage_err)? {
        cfg.aux_weight_joint = v;
    }
    if let Some(v) = f.pick::<f64>(None, "lambda").map_err(usage_err)? {
        cfg.reasoner.lambda = [v; 5];
    }
    if let Some(v) = f.pick::<f64>(None, "tau").map_err(usage_err)? {
        cfg.reasoner.tau_operator = v;
        cfg.reasoner.tau_decode = v;
        cfg.reasoner.tau_select = v;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let r = resolve(&a.common)?;
    let n = r.file.pick(a.n, "n").map_err(usage_err)?.unwrap_or(10_000);
    if n < 10 {
        return usage(format!("--n must be at least 10, got {n}"));
    }
    let strategy = strategy(&r, &a.strategy)?;
    let dir = r.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let regimes = r.regime.map_or(Regime::ALL.to_vec(), |x| vec![x]);
    for regime in regimes {
        let m = generate_split(regime, strategy, n, r.seed, &dir)?;
        println!(
            "{regime} {}: train {} val {} test {}  checksum {}",
            strategy.name(),
            m.folds.train,
            m.folds.val,
            m.folds.test,
            m.checksum
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_training(r: &Resolved, a: &TrainArgs, variant: Variant, regime: Regime) -> Result<(Model, Checkpoint, Vec<RpmInstance>)> {
    let data = required(r.file.pick(a.data.clone(), "data").map_err(usage_err)?, "data")?;
    let strategy = strategy(r, &a.strategy)?;
    let cfg = train_config(r, a)?;
    let (_, train_set) = load_split(&data, regime, strategy, Phase::Train)?;
    let (_, val_set) = load_split(&data, regime, strategy, Phase::Val)?;
    let (_, test_set) = load_split(&data, regime, strategy, Phase::Test)?;
    eprintln!(
        "training {variant} on {regime}: {} train, {} val, d={}, epochs {}+{}",
        train_set.len(),
        val_set.len(),
        cfg.d,
        cfg.stage1_epochs,
        cfg.stage2_epochs
    );
    let trained = match train_variant(variant, r.noise, &train_set, &val_set, &cfg) {
        Ok(t) => t,
        Err(TrainError::DivergenceDetected {
            epoch,
            batch,
            last_good,
            report,
        }) => {
            if let Some(out) = &r.out {
                let ck = Checkpoint::from_model(&last_good, None, json!({"variant": variant.name(), "diverged": true}));
                ck.save(out)?;
                eprintln!("last good model written to {}", out.display());
            }
            bail!(
                "loss diverged at epoch {epoch}, batch {batch} after {} completed epochs",
                report.epochs.len()
            );
        }
        Err(e) => return Err(e.into()),
    };
    for e in &trained.report.epochs {
        eprintln!(
            "epoch {:>3} stage {} loss {:.4} acc {:.4} val acc {:.4}",
            e.epoch, e.stage, e.train_loss, e.train_accuracy, e.val_accuracy
        );
    }
    let meta = json!({
        "variant": variant.name(),
        "regime": regime.name(),
        "strategy": strategy.name(),
        "noise": if variant == Variant::AlansGt { 0.0 } else { r.noise },
        "seed": r.seed,
        "best_epoch": trained.report.best_epoch,
        "best_val_accuracy": trained.report.best_val_accuracy,
        "train": cfg,
    });
    let ck = Checkpoint::from_model(&trained.model, Some(trained.optimizer.record()), meta);
    if let Some(out) = &r.out {
        ck.save(out)?;
        let log = out.with_extension("train.ndjson");
        let mut buf = Vec::new();
        trained.report.write_ndjson(&mut buf)?;
        fs::write(&log, buf).with_context(|| format!("writing {}", log.display()))?;
        eprintln!("checkpoint {} (best epoch {}), log {}", out.display(), trained.report.best_epoch, log.display());
    }
    Ok((trained.model, ck, test_set))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut r = resolve(&a.common)?;
    let regime = required(r.regime, "regime")?;
    let variant = r.variant.unwrap_or(Variant::Alans);
    if r.out.is_none() {
        r.out = Some(PathBuf::from("checkpoint.json"));
    }
    run_training(&r, &a, variant, regime)?;
    Ok(())
}

fn checkpoint_variant(ck: &Checkpoint, flag: Option<Variant>) -> Result<Variant> {
    let variant = match flag {
        Some(v) => v,
        None => ck
            .meta
            .get("variant")
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or(Variant::Alans),
    };
    if variant.encoding() != ck.kind {
        bail!("variant {variant} does not match the checkpoint's {:?} encodings", ck.kind);
    }
    Ok(variant)
}

fn load_for_eval(a: &EvalArgs) -> Result<(Resolved, Model, Variant, Vec<RpmInstance>)> {
    let r = resolve(&a.common)?;
    let data = required(r.file.pick(a.data.clone(), "data").map_err(usage_err)?, "data")?;
    let ck_path = required(r.file.pick(a.checkpoint.clone(), "checkpoint").map_err(usage_err)?, "checkpoint")?;
    let phase = parse_with(r.file.pick(a.phase.clone(), "phase").map_err(usage_err)?, "phase")?.unwrap_or(Phase::Test);
    let regime = required(r.regime, "regime")?;
    let strategy = strategy(&r, &a.strategy)?;
    let ck = Checkpoint::load(&ck_path)?;
    let model = ck.to_model().map_err(|e| anyhow!(e))?;
    let variant = checkpoint_variant(&ck, r.variant)?;
    let (_, instances) = load_split(&data, regime, strategy, phase)?;
    Ok((r, model, variant, instances))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (r, model, variant, instances) = load_for_eval(&a)?;
    let report = evaluate_report(&model, &instances, variant, r.noise, r.seed, &ReasonerConfig::default())?;
    print!("{}", report.to_text());
    if let Some(dir) = &r.out {
        fs::create_dir_all(dir)?;
        let mut summary = serde_json::to_value(&report)?;
        summary.as_object_mut().expect("report is an object").remove("records");
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        fs::write(dir.join("records.ndjson"), report.records_ndjson())?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        eprintln!("reports written to {}", dir.display());
    }
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let (r, model, variant, instances) = load_for_eval(&a.eval)?;
    let inst = instances
        .iter()
        .find(|i| i.id == a.id)
        .ok_or_else(|| anyhow!("no instance with id {} in the chosen fold", a.id))?;
    let beliefs = alans::experiment::beliefs_for(inst, variant, r.noise, r.seed)?;
    let dist = answer_distribution(&beliefs, &model, &ReasonerConfig::default());
    let trace = solve_trace(inst, &dist);
    print!("{trace}");
    if let Some(out) = &r.out {
        fs::write(out, &trace)?;
    }
    Ok(())
}

fn cmd_ablate(a: TrainArgs) -> Result<()> {
    let r = resolve(&a.common)?;
    let regimes = r.regime.map_or(Regime::ALL.to_vec(), |x| vec![x]);
    let mut rows = Vec::new();
    for regime in regimes {
        let mut acc = [0.0; 2];
        for (slot, variant) in [Variant::Alans, Variant::AlansInd].into_iter().enumerate() {
            let (model, _, test_set) = run_training(&Resolved { out: None, ..r.clone() }, &a, variant, regime)?;
            let report = evaluate_report(&model, &test_set, variant, r.noise, r.seed, &ReasonerConfig::default())?;
            acc[slot] = report.answer_accuracy;
        }
        rows.push(AblationRow::new(regime, acc[0], acc[1]));
    }
    let table = AblationTable { noise: r.noise, rows };
    print!("{}", table.to_text());
    if let Some(out) = &r.out {
        fs::write(out, serde_json::to_string_pretty(&table)? + "\n")?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> Result<()> {
    let r = resolve(&a.common)?;
    let variant = r.variant.unwrap_or(Variant::Alans);
    let d = r.file.pick(a.d, "d").map_err(usage_err)?.unwrap_or(3);
    if !(2..=32).contains(&d) {
        return usage(format!("--d must lie in 2..=32, got {d}"));
    }
    let cfg = GradCheckConfig {
        d,
        kind: variant.encoding(),
        h: a.h,
        noise: variant.noise(r.noise).eps,
        ..GradCheckConfig::default()
    };
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for seed in r.seed..r.seed + a.seeds {
        let rep = grad_check(&cfg, seed)?;
        println!(
            "seed {:>3}  params {:>4}  max rel err {:.3e}  max abs err {:.3e}",
            rep.seed, rep.params, rep.max_rel_error, rep.max_abs_error
        );
        worst = worst.max(rep.max_rel_error);
        lines.push(serde_json::to_string(&rep)?);
    }
    println!("worst relative error {worst:.3e} (h = {})", a.h);
    if let Some(out) = &r.out {
        fs::write(out, lines.join("\n") + "\n")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
