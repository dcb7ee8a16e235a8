mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use xdet_core::eval::{coco_report, read_detections_jsonl, voc_report, wider_report, write_detections_jsonl, EvalReport};
use xdet_core::ingest::{build_manifest, HybridManifest};
use xdet_core::label_space::HybridLabelSpace;
use xdet_core::synth::experiment::{detect_manifest, Checkpoint};
use xdet_core::synth::gradcheck::gradient_suite;
use xdet_core::synth::trainer::history_csv;
use xdet_core::synth::{generate_world, train, SynthWorld, TrainMode};

use io::{
    check_outputs, load_dataset, load_experiment, load_merge_config, read_input, usage_error, write_output, CliResult,
    DatasetSpec, UsageExt,
};

/// Cross-dataset object detection toolkit: merged label spaces, hybrid
/// manifests, dataset-aware training on synthetic data and evaluation.
#[derive(Parser)]
#[command(name = "xdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge the class lists of several datasets into one hybrid label space.
    MergeLabels(MergeLabelsArgs),
    /// Convert annotated datasets into one hybrid manifest.
    BuildManifest(BuildManifestArgs),
    /// Generate a synthetic world with partially labeled datasets.
    SynthGen(SynthGenArgs),
    /// Train a detection head on a synthetic manifest.
    Train(TrainArgs),
    /// Run a trained head on every image of a manifest.
    Infer(InferArgs),
    /// Score detections against a manifest.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset as <id>:<format>:<path>; format is coco (JSON), voc (directory
    /// of XML files), wider (bbx_gt txt) or classes (one name per line).
    #[arg(long = "dataset", required = true)]
    datasets: Vec<DatasetSpec>,
    /// JSON merge/conflict config; without it labels are concatenated.
    #[arg(long)]
    merge_config: Option<PathBuf>,
}

#[derive(Args)]
struct MergeLabelsArgs {
    #[command(flatten)]
    inputs: DatasetArgs,
    /// Where to write the label space JSON.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct BuildManifestArgs {
    #[command(flatten)]
    inputs: DatasetArgs,
    /// Where to write the manifest JSON.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON, or TOML by .toml extension); defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw (world, shuffling, initialization).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthGenArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Directory receiving world.json, manifest.json and test_manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// World written by synth-gen (source of features).
    #[arg(long)]
    world: PathBuf,
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// dataset-aware, naive-concat or solo:<dataset>.
    #[arg(long, default_value = "dataset-aware")]
    mode: String,
    /// Where to write the checkpoint JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional loss history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Must match the config and seed used for training.
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// World written by synth-gen.
    #[arg(long)]
    world: PathBuf,
    /// Manifest whose images are scanned.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write detections (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Detections as JSON lines.
    #[arg(long)]
    detections: PathBuf,
    /// Also report VOC-style mAP at IoU 0.5.
    #[arg(long)]
    voc: bool,
    /// Where to write the JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-class AP CSV.
    #[arg(long)]
    per_class_csv: Option<PathBuf>,
    /// Optional easy/medium/hard PR curves as (recall, precision) CSV.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Random points for each scalar loss term.
    #[arg(long, default_value_t = 1000)]
    points: usize,
    /// Random heads checked per mask mode.
    #[arg(long, default_value_t = 5)]
    head_trials: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn merge_inputs(args: &DatasetArgs) -> CliResult<(Vec<xdet_core::ingest::RawDataset>, HybridLabelSpace, xdet_core::label_space::ConflictMatrix)> {
    let merge = load_merge_config(args.merge_config.as_deref())?;
    let raw = args.datasets.iter().map(load_dataset).collect::<CliResult<Vec<_>>>()?;
    let sources: Vec<_> = raw.iter().map(|r| r.source_list()).collect();
    let (space, conflicts) = merge.build(&sources).context("invalid merge config").usage()?;
    Ok((raw, space, conflicts))
}

fn merge_labels(args: MergeLabelsArgs) -> CliResult<()> {
    check_outputs([args.out.as_path()], args.output.force)?;
    let (_, space, _) = merge_inputs(&args.inputs)?;
    write_output(&args.out, &serde_json::to_string_pretty(&space)?)?;
    let groups = space.num_merged_groups();
    println!("{} classes ({} merged group{})", space.num_classes(), groups, if groups == 1 { "" } else { "s" });
    Ok(())
}

fn build_manifest_cmd(args: BuildManifestArgs) -> CliResult<()> {
    check_outputs([args.out.as_path()], args.output.force)?;
    let (raw, space, conflicts) = merge_inputs(&args.inputs)?;
    let manifest = build_manifest(&raw, &space, &conflicts).context("cannot build manifest").usage()?;
    write_output(&args.out, &manifest.to_json()?)?;
    for (d, (images, boxes)) in manifest.counts_by_dataset() {
        println!("{d}: {images} images, {boxes} boxes");
    }
    Ok(())
}

fn synth_gen(args: SynthGenArgs) -> CliResult<()> {
    let paths = ["world.json", "manifest.json", "test_manifest.json"].map(|f| args.out_dir.join(f));
    check_outputs(paths.iter().map(PathBuf::as_path), args.output.force)?;
    let cfg = load_experiment(args.experiment.config.as_deref(), args.experiment.seed)?;
    let world = generate_world(&cfg.world, &cfg.policy).usage()?;
    let manifest = world.manifest(&cfg.merge).context("invalid merge config").usage()?;
    let test = world.test_manifest()?;
    write_output(&paths[0], &world.to_json()?)?;
    write_output(&paths[1], &manifest.to_json()?)?;
    write_output(&paths[2], &test.to_json()?)?;
    println!(
        "{} training images, {} test images, {} classes",
        manifest.images.len(),
        test.images.len(),
        manifest.label_space.num_classes()
    );
    Ok(())
}

fn load_manifest(path: &Path) -> CliResult<HybridManifest> {
    HybridManifest::from_json(&read_input(path)?).with_context(|| format!("invalid manifest {}", path.display())).usage()
}

fn load_world(path: &Path) -> CliResult<SynthWorld> {
    SynthWorld::from_json(&read_input(path)?).with_context(|| format!("invalid world {}", path.display())).usage()
}

fn train_cmd(args: TrainArgs) -> CliResult<()> {
    check_outputs(std::iter::once(args.out.as_path()).chain(args.history.as_deref()), args.output.force)?;
    let cfg = load_experiment(args.experiment.config.as_deref(), args.experiment.seed)?;
    let mode: TrainMode = args.mode.parse().usage()?;
    let manifest = load_manifest(&args.manifest)?;
    let world = load_world(&args.world)?;
    let out = train(&manifest, &world, &cfg.anchors, &cfg.loss, &cfg.train, &mode)?;
    let ckpt = Checkpoint { fingerprint: cfg.fingerprint(), mode, head: out.head };
    write_output(&args.out, &ckpt.to_json()?)?;
    if let Some(h) = &args.history {
        write_output(h, &history_csv(&out.history))?;
    }
    if let (Some(first), Some(last)) = (out.history.first(), out.history.last()) {
        println!("{} steps, loss {:.4} -> {:.4}", out.history.len(), first.loss, last.loss);
    }
    Ok(())
}

fn infer_cmd(args: InferArgs) -> CliResult<()> {
    check_outputs([args.out.as_path()], args.output.force)?;
    let cfg = load_experiment(args.experiment.config.as_deref(), args.experiment.seed)?;
    let ckpt = Checkpoint::from_json(&read_input(&args.checkpoint)?).context("invalid checkpoint").usage()?;
    if ckpt.fingerprint != cfg.fingerprint() {
        return Err(usage_error("checkpoint was trained with a different config or seed"));
    }
    let manifest = load_manifest(&args.manifest)?;
    let world = load_world(&args.world)?;
    let dets = detect_manifest(&ckpt.head, &world, &manifest, &cfg.anchors, &cfg.infer)?;
    write_output(&args.out, &write_detections_jsonl(&dets)?)?;
    println!("{} detections on {} images", dets.len(), manifest.images.len());
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult<()> {
    let outputs = std::iter::once(args.out.as_path()).chain(args.per_class_csv.as_deref()).chain(args.pr_csv.as_deref());
    check_outputs(outputs, args.output.force)?;
    let manifest = load_manifest(&args.manifest)?;
    let dets = read_detections_jsonl(&read_input(&args.detections)?)
        .with_context(|| format!("invalid detections {}", args.detections.display()))
        .usage()?;
    let coco = coco_report(&dets, &manifest).usage()?;
    let voc = if args.voc { Some(voc_report(&dets, &manifest).usage()?) } else { None };
    let mut wider = Vec::new();
    for class in manifest.label_space.classes() {
        let tagged = manifest
            .images
            .iter()
            .flat_map(|i| &i.annotations)
            .filter(|a| a.hybrid_class == class.index)
            .all(|a| a.difficulty.is_some());
        let has_gt = coco.per_class[class.index].num_gt > 0;
        if tagged && has_gt {
            wider.push(wider_report(&dets, &manifest, class.index)?);
        }
    }

    println!("{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "class", "AP", "AP50", "AP75", "Easy", "Medium", "Hard");
    for c in &coco.per_class {
        let w = wider.iter().find(|w| w.class == c.class);
        println!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            c.name,
            fmt_metric(c.ap),
            fmt_metric(c.ap50),
            fmt_metric(c.ap75),
            fmt_metric(w.map(|w| w.easy.ap)),
            fmt_metric(w.map(|w| w.medium.ap)),
            fmt_metric(w.map(|w| w.hard.ap)),
        );
    }
    println!(
        "{:<16} {:>6} {:>6} {:>6}",
        "all",
        fmt_metric(Some(coco.ap)),
        fmt_metric(Some(coco.ap50)),
        fmt_metric(Some(coco.ap75))
    );
    if let Some(v) = &voc {
        println!("VOC mAP@0.5 {}", fmt_metric(Some(v.map)));
    }

    if let Some(path) = &args.per_class_csv {
        let mut csv = String::from("class,name,num_gt,ap,ap50,ap75,ap_s,ap_m,ap_l,voc_ap\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for c in &coco.per_class {
            let voc_ap = voc.as_ref().and_then(|v| v.per_class[c.class].ap);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.class,
                c.name,
                c.num_gt,
                cell(c.ap),
                cell(c.ap50),
                cell(c.ap75),
                cell(c.ap_s),
                cell(c.ap_m),
                cell(c.ap_l),
                cell(voc_ap)
            ));
        }
        write_output(path, &csv)?;
    }
    if let Some(path) = &args.pr_csv {
        let mut csv = String::from("class,subset,recall,precision\n");
        for w in &wider {
            for (name, subset) in [("easy", &w.easy), ("medium", &w.medium), ("hard", &w.hard)] {
                for (r, p) in &subset.pr_curve {
                    csv.push_str(&format!("{},{name},{r},{p}\n", w.class));
                }
            }
        }
        write_output(path, &csv)?;
    }
    let report = EvalReport { coco: Some(coco), voc, wider };
    write_output(&args.out, &serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> CliResult<()> {
    let cfg = load_experiment(args.experiment.config.as_deref(), args.experiment.seed)?;
    let suite = gradient_suite(&cfg, args.experiment.seed, args.points, args.head_trials)?;
    for (name, c) in [("focal", suite.focal), ("regression", suite.regression), ("head", suite.head)] {
        println!("{name:<10} {:>6} points  max relative error {:.3e}", c.points, c.max_relative_error);
    }
    let worst = suite.max_relative_error();
    println!("total {} points, max relative error {:.3e}", suite.points(), worst);
    if worst > args.tolerance {
        return Err(anyhow::anyhow!("gradient check exceeds tolerance {:e}", args.tolerance).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MergeLabels(a) => merge_labels(a),
        Command::BuildManifest(a) => build_manifest_cmd(a),
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
