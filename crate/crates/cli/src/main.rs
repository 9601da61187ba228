mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use derma_core::dataset::{ingest_directory, load_image, stratified_split, ClassTaxonomy, DatasetManifest, SplitRatios};
use derma_core::explain::{gradcam_explain, lime_explain, write_explanation, ExplanationSidecar, LimeSummary};
use derma_core::metrics::{comparison_table, evaluate, write_confusion_png};
use derma_core::model::{load_checkpoint, BackboneSpec, ClassifierModel, HeadConfig, TrainableStage};
use derma_core::train::{train_with, TrainOptions};

use config::Config;

#[derive(Parser)]
#[command(name = "derma", version, about = "Skin-lesion classification: data, training, evaluation, explanations, serving")]
struct Cli {
    /// TOML file with [model], [split], [training], [explain] and [serve] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory image tree into a manifest.
    Ingest(IngestArgs),
    /// Assign stratified train/val/test splits.
    Split(SplitArgs),
    /// Train a classifier; writes model.ckpt and history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Render LIME / Grad-CAM composites for images.
    Explain(ExplainArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
    /// Compare several checkpoints on one test split.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// `dirs` (sorted subdirectory names), `arsenicosis` (the 20-class
    /// default), or a file with one class name per line.
    #[arg(long, default_value = "dirs")]
    taxonomy: String,
    #[arg(long, default_value = "local")]
    source: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train,val,test fractions, e.g. `0.7,0.15,0.15`.
    #[arg(long)]
    ratios: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Backbone layers to fine-tune (0 = frozen backbone).
    #[arg(long)]
    unfreeze_last: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for report.json, report.txt, confusion.csv and confusion.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Lime,
    Gradcam,
    Both,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image(s) to explain.
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Class name or index to explain; defaults to the predicted class.
    #[arg(long)]
    class: Option<String>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grad-CAM layer; defaults to the backbone's feature layer.
    #[arg(long)]
    layer: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    upload_limit: Option<usize>,
    /// LIME perturbations per request.
    #[arg(long)]
    lime_samples: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Table file to write; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a, &cfg),
        Command::Train(a) => train(a, cfg),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a, cfg),
        Command::Serve(a) => serve(a, cfg),
        Command::Report(a) => report(a),
    }
}

fn read_taxonomy(spec: &str, root: &Path) -> Result<ClassTaxonomy> {
    match spec {
        "arsenicosis" => Ok(ClassTaxonomy::arsenicosis_default()),
        "dirs" => {
            let mut names: Vec<String> = std::fs::read_dir(root)
                .with_context(|| format!("reading dataset root {}", root.display()))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            Ok(ClassTaxonomy::new(names)?)
        }
        file => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading taxonomy file {file}"))?;
            Ok(ClassTaxonomy::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))?)
        }
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let taxonomy = read_taxonomy(&a.taxonomy, &a.root)?;
    let outcome = ingest_directory(&a.root, &taxonomy, &a.source)?;
    outcome.manifest.save(&a.out)?;
    println!(
        "ingested {} images over {} classes into {} ({} skipped)",
        outcome.manifest.len(),
        taxonomy.len(),
        a.out.display(),
        outcome.skipped_count()
    );
    for p in &outcome.skipped {
        eprintln!("skipped undecodable file {}", p.display());
    }
    Ok(())
}

fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("ratios {s:?} must be three comma-separated numbers"))?;
    let [train, val, test] = parts[..] else {
        bail!("ratios {s:?} must have exactly three parts");
    };
    Ok(SplitRatios::new(train, val, test)?)
}

fn split(a: SplitArgs, cfg: &Config) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ratios = match &a.ratios {
        Some(s) => parse_ratios(s)?,
        None => cfg.split.ratios,
    };
    let seed = a.seed.unwrap_or(cfg.split.seed);
    let out = stratified_split(&manifest, ratios, seed)?;
    let path = a.out.unwrap_or(a.manifest);
    out.save(&path)?;
    let n = |s| out.split_len(s);
    use derma_core::dataset::Split::*;
    println!(
        "split {} records (train {}, val {}, test {}) with seed {seed} into {}",
        out.len(),
        n(Train),
        n(Val),
        n(Test),
        path.display()
    );
    Ok(())
}

fn train(a: TrainArgs, mut cfg: Config) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    if let Some(b) = a.backbone {
        cfg.model.backbone = b;
    }
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.training.max_epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(n) = a.unfreeze_last {
        cfg.model.unfreeze_last = n;
    }
    cfg.training.validate()?;

    let mut spec = BackboneSpec::named(&cfg.model.backbone)?;
    if let Some(size) = cfg.model.input_size {
        spec = spec.with_input_size(size);
    }
    let head = HeadConfig {
        dense_units: cfg.model.dense_units.clone(),
        dropout_rate: cfg.model.dropout_rate,
        use_batch_norm: cfg.model.batch_norm,
        num_classes: manifest.taxonomy.len(),
    };
    let mut model = ClassifierModel::build(&spec, &head, &manifest.taxonomy, cfg.training.seed)?;
    if cfg.model.unfreeze_last > 0 {
        model.set_trainable_stage(TrainableStage::Partial { last_n: cfg.model.unfreeze_last })?;
    }
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let options = TrainOptions {
        checkpoint_path: Some(ckpt.clone()),
        on_epoch: Some(Box::new(|r| {
            println!(
                "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.2e}",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.learning_rate
            )
        })),
    };
    let outcome = train_with(model, &manifest, &cfg.training, options)?;
    let history = a.out.join("history.csv");
    outcome.history.write_csv(&history)?;
    let best = outcome.history.best_record();
    println!(
        "best epoch {} (val_loss {:.4}, val_acc {:.4}){}; wrote {} and {}",
        best.epoch,
        best.val_loss,
        best.val_accuracy,
        if outcome.history.stopped_early { ", stopped early" } else { "" },
        ckpt.display(),
        history.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = evaluate(&loaded.model, &manifest)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("report.json"), report.to_json())?;
    std::fs::write(a.out.join("report.txt"), report.to_text())?;
    std::fs::write(a.out.join("confusion.csv"), report.confusion_csv())?;
    write_confusion_png(&report.confusion, &a.out.join("confusion.png"))?;
    print!("{}", report.to_text());
    println!("wrote report.json, report.txt, confusion.csv, confusion.png to {}", a.out.display());
    Ok(())
}

fn resolve_class(model: &ClassifierModel, spec: &str) -> Result<usize> {
    if let Some(i) = model.taxonomy.index_of(spec) {
        return Ok(i);
    }
    match spec.parse::<usize>() {
        Ok(i) if i < model.num_classes() => Ok(i),
        _ => Err(anyhow!("unknown class {spec:?}; classes are {:?}", model.taxonomy.classes())),
    }
}

fn explain(a: ExplainArgs, cfg: Config) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = &loaded.model;
    let method = match a.method {
        Some(m) => m,
        None => Method::from_str(&cfg.explain.method, true).map_err(|e| anyhow!("[explain] method: {e}"))?,
    };
    let mut lime_cfg = cfg.explain.lime.clone();
    if let Some(s) = a.seed {
        lime_cfg.seed = s;
    }
    let layer = a.layer.or(cfg.explain.gradcam_layer);
    std::fs::create_dir_all(&a.out)?;
    for path in &a.image {
        let img = load_image(path)?;
        let rgb = img.to_rgb8();
        let probs = model.predict_image(&img)?;
        let target = match &a.class {
            Some(c) => resolve_class(model, c)?,
            None => derma_core::metrics::argmax_with_tie(&probs).0,
        };
        let lime = match method {
            Method::Lime | Method::Both => Some(lime_explain(model, &rgb, target, &lime_cfg)?),
            Method::Gradcam => None,
        };
        let gradcam = match method {
            Method::Gradcam | Method::Both => Some(gradcam_explain(model, &rgb, target, layer.as_deref())?),
            Method::Lime => None,
        };
        let sidecar = ExplanationSidecar {
            source: path.display().to_string(),
            target_class: target,
            target_label: model.taxonomy.name(target).unwrap_or_default().to_string(),
            probability: probs[target],
            lime: lime.as_ref().map(|e| LimeSummary::new(e, &lime_cfg)),
            gradcam: gradcam.clone(),
        };
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let written = write_explanation(&a.out, &stem, &rgb, lime.as_ref(), gradcam.as_ref(), &sidecar)?;
        println!(
            "{}: {} ({:.3}) -> {}",
            path.display(),
            sidecar.target_label,
            sidecar.probability,
            written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        );
    }
    Ok(())
}

fn serve(a: ServeArgs, cfg: Config) -> Result<()> {
    let mut section = cfg.serve;
    if let Some(p) = a.port {
        section.port = p;
    }
    if let Some(h) = a.host {
        section.host = h;
    }
    if let Some(s) = a.seed {
        section.service.explain_seed = s;
    }
    if let Some(l) = a.upload_limit {
        section.service.upload_limit_bytes = l;
    }
    if let Some(n) = a.lime_samples {
        section.service.explain.lime_samples = n;
    }
    let addr = format!("{}:{}", section.host, section.port)
        .parse()
        .with_context(|| format!("invalid address {}:{}", section.host, section.port))?;
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(derma_serve::run(addr, &a.checkpoint, section.service))?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let loaded = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        // Checkpoints usually share a file name, so include the run directory.
        let stem = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let name = match path.parent().and_then(|p| p.file_name()) {
            Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
            None => stem,
        };
        let name = format!("{name} ({})", loaded.model.backbone.spec.name);
        rows.push((name, evaluate(&loaded.model, &manifest)?));
    }
    let table = comparison_table(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, &table)?;
    }
    Ok(())
}
