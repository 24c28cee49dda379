//! `ranksemi` command-line driver: data generation, training, evaluation,
//! ablation runs and pseudo-label audits.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ranksemi::audit::{audit, AuditConfig};
use ranksemi::config::KeyValueTarget;
use ranksemi::dataset::load_dataset;
use ranksemi::metrics::{evaluate, write_histogram_csv};
use ranksemi::pseudolabel::write_audit_csv;
use ranksemi::synthgen::{generate, read_noise_csv, SynthSpec};
use ranksemi::trainer::{fraction_pools, run_ablation, train, SplitData, Variant};
use ranksemi::{Dataset, Error, Method, RelationModel, ScoreSource, TrainingConfig};

#[derive(Parser)]
#[command(name = "ranksemi", version, about = "Semi-supervised important-people detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled test set.
    Eval(EvalArgs),
    /// Train every variant over seeds and labelled fractions.
    Ablate(AblateArgs),
    /// Dump the pseudo-labels each method would assign to an unlabelled pool.
    Audit(AuditArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding labelled.jsonl, unlabelled.jsonl and val.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "score-source")]
    score_source: Option<String>,
    /// Keep this fraction of labelled images; the rest join the unlabelled pool.
    #[arg(long = "labelled-fraction", default_value_t = 1.0)]
    labelled_fraction: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "cmc-ranks", default_value_t = 5)]
    cmc_ranks: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Use this dataset directory for every seed instead of generating one per seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic-data config file used when --data is absent.
    #[arg(long = "synth-config")]
    synth_config: Option<PathBuf>,
    /// Synthetic-data override (repeatable).
    #[arg(long = "synth-set", value_name = "KEY=VALUE")]
    synth_overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    fractions: Vec<f64>,
    /// `method` or `method@score_source` entries.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "supervised,ours,ours_no_EW,ours_no_ISW_EW,ours_no_RankS_ISW_EW"
    )]
    variants: Vec<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; unlabelled.jsonl is audited, labelled.jsonl anchors LP.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mean-teacher checkpoint for the MT dump (defaults to --checkpoint).
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Distinguishes bad invocations (exit 2) from failures while running (exit 1).
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Audit(a) => cmd_audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn configured<C: KeyValueTarget>(mut target: C, args: &ConfigArgs) -> CliResult<C> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        target.apply_text(&text)?;
    }
    target.apply_overrides(&args.overrides)?;
    Ok(target)
}

fn training_config(args: &ConfigArgs) -> CliResult<TrainingConfig> {
    let cfg = configured(TrainingConfig::default(), args)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> CliResult {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Runtime(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load(dir: &Path, name: &str) -> CliResult<Dataset<f64>> {
    let path = dir.join(name);
    load_dataset(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_optional(dir: &Path, name: &str, dim: usize) -> CliResult<Dataset<f64>> {
    if dir.join(name).exists() {
        load(dir, name)
    } else {
        Ok(Dataset::empty(dim))
    }
}

fn load_noise(dir: &Path) -> CliResult<Option<BTreeMap<String, bool>>> {
    let path = dir.join("noise.csv");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_noise_csv(&fs::read_to_string(path)?)?))
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let mut spec = configured(SynthSpec::default(), &a.cfg)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = generate::<f64>(&spec)?;
    data.write_dir(&a.out)?;
    println!(
        "wrote {} labelled, {} unlabelled ({} noise), {} val, {} test images to {}",
        data.labelled.len(),
        data.unlabelled.len(),
        spec.noise_count(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = training_config(&a.cfg)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &a.method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(s) = &a.score_source {
        cfg.score_source = s.parse::<ScoreSource>()?;
    }
    if !(a.labelled_fraction > 0.0 && a.labelled_fraction <= 1.0) {
        return Err(Failure::Usage(format!(
            "--labelled-fraction must lie in (0, 1], got {}",
            a.labelled_fraction
        )));
    }
    let labelled = load(&a.data, "labelled.jsonl")?;
    let dim = labelled.feature_dim();
    let split = SplitData {
        unlabelled: load_optional(&a.data, "unlabelled.jsonl", dim)?,
        val: load_optional(&a.data, "val.jsonl", dim)?,
        test: Dataset::empty(dim),
        labelled,
    };
    let (lab, unl) = fraction_pools(&split, a.labelled_fraction, cfg.seed)?;
    let (model, history) = train(&cfg, &lab, &unl, &split.val)?;

    fs::create_dir_all(&a.out)?;
    model.save(a.out.join("model.ckpt"))?;
    let mut w = create(&a.out, "history.csv")?;
    history.write_csv(&mut w)?;
    w.flush()?;
    let pseudo = history.pseudo_labels.map(|p| {
        serde_json::json!({
            "RankS": p.ranking.to_json(),
            "PL": p.thresholding.to_json(),
        })
    });
    write_json(
        &a.out,
        "summary.json",
        &serde_json::json!({
            "method": cfg.method.to_string(),
            "score_source": cfg.score_source.to_string(),
            "seed": cfg.seed,
            "epochs": history.epochs.len(),
            "best_epoch": history.best_epoch,
            "best_val_map": history.best_epoch.and_then(|e| history.epochs.get(e)).and_then(|r| r.val_map),
            "labelled_images": lab.len(),
            "unlabelled_images": unl.len(),
            "pseudo_label_histograms": pseudo,
        }),
    )?;
    println!(
        "trained {} for {} epochs (best epoch {:?}); wrote {}",
        cfg.method,
        history.epochs.len(),
        history.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    if a.cmc_ranks == 0 {
        return Err(Failure::Usage("--cmc-ranks must be at least 1".into()));
    }
    let model = RelationModel::<f64>::load(&a.checkpoint)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let test = load_dataset::<f64>(&a.test).map_err(|e| Failure::Runtime(format!("{}: {e}", a.test.display())))?;
    let report = evaluate(&model, &test, a.cmc_ranks)?;
    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out, "per_image_ap.csv")?;
    report.write_per_image_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&a.out, "cmc.csv")?;
    report.write_cmc_csv(&mut w)?;
    w.flush()?;
    write_json(&a.out, "summary.json", &report.summary_json())?;
    println!("mAP {:.4} over {} images", report.map, test.len());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let cfg = training_config(&a.cfg)?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<ranksemi::Result<Vec<_>>>()?;
    let spec = configured(
        SynthSpec::default(),
        &ConfigArgs {
            config: a.synth_config.clone(),
            overrides: a.synth_overrides.clone(),
        },
    )?;
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let fixed = match &a.data {
        Some(dir) => {
            let labelled = load(dir, "labelled.jsonl")?;
            let dim = labelled.feature_dim();
            Some(SplitData {
                unlabelled: load_optional(dir, "unlabelled.jsonl", dim)?,
                val: load_optional(dir, "val.jsonl", dim)?,
                test: load(dir, "test.jsonl")?,
                labelled,
            })
        }
        None => None,
    };
    let data_for_seed = |seed: u64| match &fixed {
        Some(d) => Ok(d.clone()),
        None => {
            let g = generate::<f64>(&SynthSpec { seed, ..spec.clone() })?;
            Ok(SplitData {
                labelled: g.labelled,
                unlabelled: g.unlabelled,
                val: g.val,
                test: g.test,
            })
        }
    };

    let threads = match std::env::var("RANKSEMI_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("RANKSEMI_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let table = pool.install(|| run_ablation(&cfg, &variants, &a.seeds, &a.fractions, data_for_seed))?;

    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out, "ablation.csv")?;
    table.write_csv(&mut w)?;
    w.flush()?;
    for c in &table.cells {
        println!(
            "{:<28} fraction {:<5} mAP {:.4} ± {:.4}",
            c.variant.to_string(),
            c.labelled_fraction,
            c.mean,
            c.std
        );
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> CliResult {
    let cfg = training_config(&a.cfg)?;
    let model = RelationModel::<f64>::load(&a.checkpoint)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let teacher = match &a.teacher {
        Some(p) => Some(RelationModel::<f64>::load(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let unlabelled = load(&a.data, "unlabelled.jsonl")?;
    let anchors = load_optional(&a.data, "labelled.jsonl", unlabelled.feature_dim())?;
    let noise = load_noise(&a.data)?;
    let audit_cfg = AuditConfig {
        alpha: cfg.alpha,
        k: cfg.k,
        seed: a.seed.unwrap_or(cfg.seed),
        lp: cfg.lp_params(),
        lp_batch: cfg.batch_unlabelled,
    };
    let anchors = (!anchors.is_empty()).then_some(&anchors);
    let report = audit(&model, teacher.as_ref(), &unlabelled, anchors, &audit_cfg)?;

    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out, "ranks.csv")?;
    write_audit_csv(&mut w, &report.ranking)?;
    w.flush()?;
    let mut dumps = vec![("pl.csv", &report.pl), ("mt.csv", &report.mt)];
    if let Some(lp) = &report.lp {
        dumps.push(("lp.csv", lp));
    }
    for (name, dump) in dumps {
        let mut w = create(&a.out, name)?;
        dump.write_csv(&mut w, &report.image_ids)?;
        w.flush()?;
    }
    let mut w = create(&a.out, "histograms.csv")?;
    write_histogram_csv(&mut w, &report.histograms())?;
    w.flush()?;
    let mut w = create(&a.out, "ew.csv")?;
    report.write_ew_csv(&mut w, noise.as_ref())?;
    w.flush()?;

    let mut summary = report.summary_json();
    if let Some(flags) = &noise {
        summary["mean_epsilon_noise"] = serde_json::json!(report.mean_epsilon_where(flags, true));
        summary["mean_epsilon_clean"] = serde_json::json!(report.mean_epsilon_where(flags, false));
    }
    write_json(&a.out, "summary.json", &summary)?;
    for (name, h) in report.histograms() {
        println!("{name:<6} important per image {:?}", h.counts);
    }
    Ok(())
}
