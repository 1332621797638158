//! `dahoi`: splits, training, inference, evaluation and diagnostics from the
//! command line.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hoi_core::eval::{map_report, EvalConfig};
use hoi_core::io::{
    load_detections, load_ground_truth, load_predictions, predictions_to_json, to_json_pretty, write_atomic,
    GroundTruthImage, ImageDetections, ImagePredictions,
};
use hoi_core::pairing::{build_zero_shot_split, HoldOut};
use hoi_core::{BBox, Detection, HOPair, ObjectId, SplitSetting, SplitSpec, Taxonomy};
use hoi_model::checkpoint::{Checkpoint, ModelConfig};
use hoi_model::inference::{
    benchmark_latency, dump_attention, fuse_scores, run_image, InferenceConfig, InteractionScorer, LatencyInput,
    ModelScorer, ScoringMode,
};
use hoi_model::training::{train_stage1, train_stage2, TrainConfig, TrainingSample};
use hoi_model::ModelError;
use hoi_toyworld::ToySceneSpec;
use image::RgbImage;
use log::info;
use rayon::prelude::*;

/// Failure classes that map onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<hoi_core::Error> for CliError {
    fn from(e: hoi_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<hoi_toyworld::ToyError> for CliError {
    fn from(e: hoi_toyworld::ToyError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "dahoi", version, about = "Detector-agnostic human-object interaction toolkit")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (1 = sequential). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// More log output on stderr (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a zero-shot split file.
    BuildSplits(BuildSplitsArgs),
    /// Run stage-1 or stage-2 training.
    Train(TrainArgs),
    /// Turn detections into scored triplets.
    Infer(InferArgs),
    /// mAP of predictions against ground truth.
    Eval(EvalArgs),
    /// Print candidate scores for one human-object pair.
    ScorePair(ScorePairArgs),
    /// Write SAP cross-attention maps as PNGs.
    DumpAttention(DumpAttentionArgs),
    /// Per-image latency of both scoring modes.
    Bench(BenchArgs),
    /// Generate a synthetic dataset.
    GenToy(GenToyArgs),
}

#[derive(Debug, Args)]
struct BuildSplitsArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// RF-UC, NF-UC, UO, UV or full.
    #[arg(long)]
    setting: String,
    /// Number of interactions to hold out (RF-UC / NF-UC).
    #[arg(long, conflicts_with = "ids")]
    hold_out: Option<usize>,
    /// Comma-separated ids to hold out: interactions, objects (UO) or verbs (UV).
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<u32>>,
    /// Ground truth used to count training instances for rare-first ordering.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// 1 trains SAP, 2 the language-model adapters.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Directory with gt.json and images/.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to <data>/taxonomy.json.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Training configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model architecture JSON for a fresh stage-1 checkpoint.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Checkpoint to continue from (required for stage 2).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Inference configuration JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Defaults to images/ next to the detections file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Checked against the checkpoint's taxonomy when given.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Defaults to taxonomy.json next to the ground truth.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-class report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScorePairArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// x1,y1,x2,y2 in pixels.
    #[arg(long, value_delimiter = ',', required = true)]
    human: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    object: Vec<f64>,
    /// Object category id.
    #[arg(long)]
    category: u32,
    /// Overrides the config's scoring mode.
    #[arg(long, value_parser = ["generation", "matching"])]
    mode: Option<String>,
}

#[derive(Debug, Args)]
struct DumpAttentionArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Use at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    /// Report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Pixel noise on the emitted detections.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Scene generation JSON (canvas, counts, probabilities).
    #[arg(long)]
    spec: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command, returns the exit
/// code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    match &cli.command {
        Command::BuildSplits(a) => build_splits(a),
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Eval(a) => eval(a),
        Command::ScorePair(a) => score_pair(a),
        Command::DumpAttention(a) => dump_attention_cmd(a),
        Command::Bench(a) => bench(a),
        Command::GenToy(a) => gen_toy(cli, a),
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(hoi_core::io::read_json(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn load_image(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(invalid(format!("image {} does not exist", path.display())));
    }
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| CliError::Runtime(format!("cannot read image {}: {e}", path.display())))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn build_splits(a: &BuildSplitsArgs) -> Result<()> {
    let mut tax = Taxonomy::load(&a.taxonomy)?;
    let setting: SplitSetting = a.setting.parse()?;
    if let Some(gt) = &a.gt {
        let images = load_ground_truth(gt, Some(&tax))?;
        let mut counts = vec![0u64; tax.interactions().len()];
        for t in images.iter().flat_map(|i| &i.triplets) {
            if let Some(id) = tax.lookup(t.verb_id, t.object_id) {
                counts[id.0 as usize] += 1;
            }
        }
        tax = tax.with_train_counts(&counts)?;
    }
    let hold = match (&a.hold_out, &a.ids) {
        (Some(n), None) => HoldOut::Count(*n),
        (None, Some(ids)) => HoldOut::Ids(ids.clone()),
        (None, None) => HoldOut::Count(0),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    let split = build_zero_shot_split(&tax, setting, &hold)?;
    write_text(&a.out, &to_json_pretty(&split))?;
    println!(
        "{}: {} unseen of {} interactions",
        split.setting,
        split.unseen_interaction_ids.len(),
        tax.interactions().len()
    );
    Ok(())
}

fn load_split(path: Option<&PathBuf>, tax: &Taxonomy) -> Result<SplitSpec> {
    match path {
        Some(p) => Ok(SplitSpec::load(p, tax)?),
        None => Ok(SplitSpec::full()),
    }
}

fn training_data(dir: &Path, tax: &Taxonomy) -> Result<Vec<TrainingSample>> {
    let gt = load_ground_truth(&dir.join("gt.json"), Some(tax))?;
    gt.into_iter()
        .map(|g| {
            let image = load_image(&dir.join("images").join(format!("{}.png", g.id)))?;
            if image.dimensions() != (g.width, g.height) {
                return Err(invalid(format!(
                    "image {} is {}x{}, ground truth says {}x{}",
                    g.id,
                    image.width(),
                    image.height(),
                    g.width,
                    g.height
                )));
            }
            Ok(TrainingSample { image, gt: g })
        })
        .collect()
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let tax_path = a.taxonomy.clone().unwrap_or_else(|| a.data.join("taxonomy.json"));
    let tax = Taxonomy::load(&tax_path)?;
    let split = load_split(a.split.as_ref(), &tax)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None if a.stage == 2 => TrainConfig::stage2(),
        None => TrainConfig::default(),
    };
    cfg.stage = a.stage;
    cfg.seed = cli.seed;
    cfg.jobs = cli.jobs;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let mut ckpt = match (&a.init, a.stage) {
        (Some(p), _) => {
            let c = Checkpoint::load(p)?;
            c.check_taxonomy(&tax)?;
            c
        }
        (None, 1) => {
            let mc: ModelConfig = match &a.model_config {
                Some(p) => read_config(p)?,
                None => ModelConfig::default(),
            };
            Checkpoint::init(mc, tax)?
        }
        (None, _) => return Err(invalid("stage 2 needs --init with a stage-1 checkpoint")),
    };
    let data = training_data(&a.data, &ckpt.taxonomy)?;
    let report = if a.stage == 1 {
        train_stage1(&mut ckpt, &data, &split, &cfg)?
    } else {
        train_stage2(&mut ckpt, &data, &split, &cfg)?
    };
    ckpt.save(&a.out)?;
    if let Some(last) = report.history.last() {
        println!(
            "stage {} done: {} epochs, final loss {:.6}, accuracy {}",
            a.stage,
            report.history.len(),
            last.loss,
            last.accuracy.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

/// Loads the inference config and its checkpoint. A relative checkpoint
/// path is taken relative to the config file.
fn load_inference(path: &Path) -> Result<(InferenceConfig, Checkpoint)> {
    let mut cfg: InferenceConfig = read_config(path)?;
    cfg.validate()?;
    let ck = cfg
        .checkpoint_path
        .clone()
        .ok_or_else(|| invalid(format!("{}: checkpoint_path is required", path.display())))?;
    let ck = if ck.is_relative() { sibling(path, "").join(ck) } else { ck };
    if let Some(dir) = &cfg.attention_dir {
        if dir.is_relative() {
            cfg.attention_dir = Some(sibling(path, "").join(dir));
        }
    }
    if !ck.exists() {
        return Err(invalid(format!("checkpoint {} does not exist", ck.display())));
    }
    let ckpt = Checkpoint::load(&ck)?;
    Ok((cfg, ckpt))
}

fn image_dir(images: &Option<PathBuf>, detections: &Path) -> PathBuf {
    images.clone().unwrap_or_else(|| sibling(detections, "images"))
}

fn load_inputs(detections: &Path, images: &Path, tax: &Taxonomy) -> Result<Vec<(ImageDetections, RgbImage)>> {
    let dets = load_detections(detections, Some(tax))?;
    dets.into_iter()
        .map(|d| {
            let img = load_image(&images.join(format!("{}.png", d.id)))?;
            Ok((d, img))
        })
        .collect()
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let (cfg, ckpt) = load_inference(&a.config)?;
    let tax = match &a.taxonomy {
        Some(p) => Taxonomy::load(p)?,
        None => ckpt.taxonomy.clone(),
    };
    let scorer = ModelScorer::new(&ckpt, &tax, &cfg)?;
    let inputs = load_inputs(&a.detections, &image_dir(&a.images, &a.detections), &tax)?;
    let results: Vec<_> = with_pool(cli.jobs, || {
        inputs
            .par_iter()
            .map(|(d, img)| run_image(&scorer, &d.id, img, &d.detections, &cfg).map(|o| (d.id.clone(), o)))
            .collect::<std::result::Result<Vec<_>, _>>()
    })??;
    let preds: Vec<ImagePredictions> = results
        .iter()
        .map(|(id, o)| ImagePredictions {
            id: id.clone(),
            triplets: o.predictions.clone(),
        })
        .collect();
    write_text(&a.out, &predictions_to_json(&preds))?;
    let total: usize = preds.iter().map(|p| p.triplets.len()).sum();
    info!("wrote {total} triplets for {} images", preds.len());
    println!("{} images, {total} triplets -> {}", preds.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let tax_path = a.taxonomy.clone().unwrap_or_else(|| sibling(&a.gt, "taxonomy.json"));
    let tax = Taxonomy::load(&tax_path)?;
    let split = load_split(a.split.as_ref(), &tax)?;
    let gt: Vec<GroundTruthImage> = load_ground_truth(&a.gt, Some(&tax))?;
    let preds = load_predictions(&a.pred)?;
    let report = map_report(&preds, &gt, &tax, &split, &EvalConfig::default())?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.4}", 100.0 * x));
    let ag = &report.aggregates;
    println!("setting: {}", report.setting);
    println!("Full mAP: {}", show(ag.full));
    println!("Seen mAP: {}", show(ag.seen));
    println!("Unseen mAP: {}", show(ag.unseen));
    println!("Rare mAP: {}", show(ag.rare));
    println!("Non-Rare mAP: {}", show(ag.non_rare));
    if let Some(p) = &a.out {
        write_text(p, &to_json_pretty(&report))?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv()?)?;
    }
    Ok(())
}

fn parse_box(v: &[f64], what: &str, size: (u32, u32)) -> Result<BBox> {
    let [x1, y1, x2, y2] = v else {
        return Err(invalid(format!("--{what} needs x1,y1,x2,y2")));
    };
    let b = BBox::from_corners(*x1, *y1, *x2, *y2)?;
    if b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > size.0 as f64 || b.y2() > size.1 as f64 {
        return Err(invalid(format!(
            "--{what} {:?} is not inside the {}x{} image",
            b.corners(),
            size.0,
            size.1
        )));
    }
    Ok(b)
}

fn score_pair(a: &ScorePairArgs) -> Result<()> {
    let (mut cfg, ckpt) = load_inference(&a.config)?;
    if let Some(m) = &a.mode {
        cfg.mode = if m == "generation" { ScoringMode::Generation } else { ScoringMode::Matching };
    }
    let tax = &ckpt.taxonomy;
    let category = ObjectId(a.category);
    tax.object(category)?;
    let candidates = tax.all_candidates(category).to_vec();
    if candidates.is_empty() {
        return Err(invalid(format!(
            "object category {} ({}) has no candidate interactions to score",
            a.category,
            tax.object(category)?.name
        )));
    }
    let image = load_image(&a.image)?;
    let human = parse_box(&a.human, "human", image.dimensions())?;
    let object = parse_box(&a.object, "object", image.dimensions())?;
    let pair = HOPair {
        human: Detection::new(human, tax.human(), 1.0)?,
        object: Detection::new(object, category, 1.0)?,
        human_index: 0,
        object_index: 1,
        candidates,
        interactiveness_label: None,
        interaction_labels: None,
    };
    let scorer = ModelScorer::new(&ckpt, tax, &cfg)?;
    let id = a.image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let prepared = scorer.prepare(&id, &image)?;
    let assessed = scorer.assess(&prepared, &pair)?;
    let s_v = scorer.score(&prepared, &pair, &assessed.state)?;
    println!("interactiveness\t{:.6}", assessed.interactiveness);
    println!("k\tinteraction\tS_v\tS_int\tfused");
    for (k, (&cand, s)) in pair.candidates.iter().zip(&s_v).enumerate() {
        println!(
            "{k}\t{}\t{s:.6}\t{:.6}\t{:.6}",
            tax.interaction_phrase(cand)?,
            assessed.interactiveness,
            fuse_scores(*s, assessed.interactiveness, 1.0, 1.0)
        );
    }
    Ok(())
}

fn dump_attention_cmd(a: &DumpAttentionArgs) -> Result<()> {
    let (cfg, ckpt) = load_inference(&a.config)?;
    let scorer = ModelScorer::new(&ckpt, &ckpt.taxonomy, &cfg)?;
    let inputs = load_inputs(&a.detections, &image_dir(&a.images, &a.detections), &ckpt.taxonomy)?;
    let mut written = 0;
    for (d, img) in &inputs {
        let prepared = scorer.prepare(&d.id, img)?;
        let pairs = hoi_core::pairing::associate_pairs(&d.detections, &ckpt.taxonomy, None);
        for (i, p) in pairs.iter().filter(|p| !p.candidates.is_empty()).enumerate() {
            if let Some(att) = scorer.assess(&prepared, p)?.attention {
                dump_attention(&att, img.dimensions(), &d.id, i, &a.out_dir)?;
                written += 1;
            }
        }
    }
    println!("{written} attention maps -> {}", a.out_dir.display());
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let (cfg, ckpt) = load_inference(&a.config)?;
    let mut inputs = load_inputs(&a.detections, &image_dir(&a.images, &a.detections), &ckpt.taxonomy)?;
    if let Some(n) = a.limit {
        inputs.truncate(n);
    }
    let sample: Vec<LatencyInput<'_>> = inputs
        .iter()
        .map(|(d, img)| LatencyInput {
            id: &d.id,
            image: img,
            detections: &d.detections,
        })
        .collect();
    let mut reports = serde_json::Map::new();
    for mode in [ScoringMode::Generation, ScoringMode::Matching] {
        let c = InferenceConfig { mode, ..cfg.clone() };
        let scorer = ModelScorer::new(&ckpt, &ckpt.taxonomy, &c)?;
        let r = benchmark_latency(&scorer, &sample, &c)?;
        let name = if mode == ScoringMode::Generation { "generation" } else { "matching" };
        println!(
            "{name}: mean {:.2} ms, median {:.2} ms (pairing {:.2}, sap {:.2}, scoring {:.2}); {} pairs, {} backend calls",
            r.mean_ms,
            r.median_ms,
            r.mean_phases.pairing_ms,
            r.mean_phases.sap_ms,
            r.mean_phases.scoring_ms,
            r.retained_pairs,
            r.backend_calls
        );
        reports.insert(name.into(), serde_json::to_value(&r).expect("report serializes"));
    }
    if let Some(p) = &a.out {
        write_text(p, &to_json_pretty(&reports))?;
    }
    Ok(())
}

fn gen_toy(cli: &Cli, a: &GenToyArgs) -> Result<()> {
    if !(a.jitter >= 0.0 && a.jitter.is_finite()) {
        return Err(invalid("--jitter must be a non-negative number"));
    }
    let mut spec: ToySceneSpec = match &a.spec {
        Some(p) => read_config(p)?,
        None => ToySceneSpec::default(),
    };
    spec.seed = cli.seed;
    let data = with_pool(cli.jobs, || hoi_toyworld::generate(&spec, a.n))??;
    hoi_toyworld::write_dataset(&a.out, &data, a.jitter)?;
    let triplets: usize = data.images.iter().map(|i| i.gt.triplets.len()).sum();
    println!("{} images, {triplets} triplets -> {}", data.images.len(), a.out.display());
    Ok(())
}
