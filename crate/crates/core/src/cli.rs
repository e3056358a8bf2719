//! Command-line surface. Exit status 0 on success, 1 on validation errors
//! (including usage errors), 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mothwatch::checkpoint::{self, classifier_hash, detector_hash, require_hash};
use mothwatch::classifier::{classify, classify_auto, train_classifier, ClassifierError, ClassifierModel};
use mothwatch::config::PipelineConfig;
use mothwatch::data::{generate_synthetic, load_dataset, make_split, DataError, DatasetIndex};
use mothwatch::detector::{train_detector, Detector, DetectorError};
use mothwatch::error::{Error, ErrorClass};
use mothwatch::imaging::{draw_rect, to_rgb};
use mothwatch::metrics::{accuracy, macro_f1, ClassSplit, MetricsError, MetricsReport};
use mothwatch::parts::{heatmap_image, mine_parts, overlay_parts};
use mothwatch::pipeline::{
    classification_samples, combination_sweep, cross_subset_detection, detection_samples, evaluate_detector, evaluate_pipeline,
    inputs_from_dir, padded_crop, run_pipeline, ImageSource, InputImage, Stages,
};
use mothwatch::train::TrainLog;

#[derive(Debug, Parser)]
#[command(name = "mothwatch", version, about = "Moth detection and part-based species classification")]
struct Cli {
    /// TOML config file; omitted sections take the desk-scale defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; every relative path resolves against it.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic train and test datasets under the output directory.
    SynthData,
    /// Train the detector on the training set and write its checkpoint.
    TrainDetector(TrainArgs),
    /// Train the classifier on padded ground-truth crops and write its checkpoint.
    TrainClassifier(TrainArgs),
    /// AP@0.5 and AP@0.75 of a detector checkpoint on the test set.
    EvalDetector(EvalDetectorArgs),
    /// Accuracy of a classifier checkpoint on padded ground-truth test crops.
    EvalClassifier(EvalArgs),
    /// Detect and classify every image in a directory.
    Run(RunArgs),
    /// Pipeline accuracy against the classify-uncropped baseline on the test set.
    EvalPipeline(EvalPipelineArgs),
    /// Write detection and part overlays and saliency heatmaps.
    Visualize(RunArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Checkpoint to write (default: the configured name under --out).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset root (default: the configured training root).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset root (default: the configured test root).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalDetectorArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Also train per-subset detectors and write the cross-subset table.
    #[arg(long)]
    cross_subset: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Image file or directory of images.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long = "detector-checkpoint", value_name = "PATH")]
    detector: Option<PathBuf>,
    #[arg(long = "classifier-checkpoint", value_name = "PATH")]
    classifier: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalPipelineArgs {
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Repeat to sweep several detectors.
    #[arg(long = "detector-checkpoint", value_name = "PATH")]
    detectors: Vec<PathBuf>,
    /// Repeat to sweep several classifiers.
    #[arg(long = "classifier-checkpoint", value_name = "PATH")]
    classifiers: Vec<PathBuf>,
    /// Evaluate without the detector; both rows then coincide.
    #[arg(long)]
    no_detector: bool,
}

/// Parse `argv`, run the command and map the outcome to an exit status.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 1 when any error in the chain is a validation error, else 2.
fn exit_code(e: &anyhow::Error) -> i32 {
    fn validation(c: &(dyn std::error::Error + 'static)) -> bool {
        if let Some(e) = c.downcast_ref::<Error>() {
            return e.is_validation();
        }
        if let Some(e) = c.downcast_ref::<DataError>() {
            return e.is_validation();
        }
        if let Some(e) = c.downcast_ref::<DetectorError>() {
            return e.is_validation();
        }
        if let Some(e) = c.downcast_ref::<ClassifierError>() {
            return e.is_validation();
        }
        c.downcast_ref::<MetricsError>().is_some_and(|e| e.is_validation())
    }
    if e.chain().any(validation) {
        1
    } else {
        2
    }
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        PipelineConfig::resolve(&self.out, p)
    }

    fn detector_path(&self, p: Option<&PathBuf>) -> PathBuf {
        p.cloned().unwrap_or_else(|| self.path(&self.cfg.output.detector_checkpoint))
    }

    fn classifier_path(&self, p: Option<&PathBuf>) -> PathBuf {
        p.cloned().unwrap_or_else(|| self.path(&self.cfg.output.classifier_checkpoint))
    }

    fn report_dir(&self, command: &str) -> PathBuf {
        self.out.join("reports").join(command)
    }

    fn title(&self, command: &str) -> String {
        format!("{command} seed={} config={}", self.cfg.seed, &self.cfg.hash()[..16])
    }

    /// Print the metrics block and write it as text and TSV.
    fn report(&self, command: &str, report: &MetricsReport) -> Result<()> {
        let dir = self.report_dir(command);
        write_file(&dir.join(&self.cfg.output.metrics), &report.to_text())?;
        write_file(&dir.join(&self.cfg.output.metrics_tsv), &report.to_tsv())?;
        print!("{}", report.to_text());
        Ok(())
    }

    fn dataset(&self, root: Option<&PathBuf>, train: bool) -> Result<DatasetIndex> {
        let d = &self.cfg.data;
        let root = match root {
            Some(r) => r.clone(),
            None => self.path(if train { &d.train_dir } else { &d.test_dir }),
        };
        let ann = root.join(&d.annotations);
        if ann.exists() {
            return Ok(load_dataset(&root, &ann)?);
        }
        if !train {
            if let Some(split) = &d.split {
                let train_root = self.path(&d.train_dir);
                let train_ann = train_root.join(&d.annotations);
                if train_ann.exists() {
                    let full = load_dataset(&train_root, &train_ann)?;
                    return Ok(make_split(&full, split)?.1);
                }
            }
        }
        Err(Error::MissingFile(ann).into())
    }

    /// Training set; with a configured split and no test root, the split's training half.
    fn train_set(&self, root: Option<&PathBuf>) -> Result<DatasetIndex> {
        let idx = self.dataset(root, true)?;
        let d = &self.cfg.data;
        match &d.split {
            Some(split) if root.is_none() && !self.path(&d.test_dir).join(&d.annotations).exists() => Ok(make_split(&idx, split)?.0),
            _ => Ok(idx),
        }
    }

    fn load_detector(&self, path: &Path) -> Result<Detector> {
        let (det, _) = checkpoint::load_detector(path)?;
        require_hash(path, &detector_hash(&self.cfg.detector.arch), &detector_hash(&det.arch))?;
        Ok(det)
    }

    fn load_classifier(&self, path: &Path) -> Result<ClassifierModel> {
        let m = checkpoint::load_classifier(path)?;
        require_hash(path, &classifier_hash(&self.cfg.classifier.arch), &classifier_hash(&m.arch))?;
        Ok(m)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn push_log(report: &mut MetricsReport, log: &TrainLog) {
    report.push("epochs", log.epochs.len() as f64);
    report.push("final_loss", log.final_loss().unwrap_or(f64::NAN));
    for e in &log.epochs {
        report.push(format!("loss_epoch_{:03}", e.epoch), e.loss);
    }
}

fn same_classes(model: &ClassifierModel, idx: &DatasetIndex) -> Result<()> {
    if model.classes != idx.classes {
        return Err(Error::Invalid(format!(
            "classifier classes {:?} differ from the dataset classes {:?}",
            model.classes, idx.classes
        ))
        .into());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let ctx = Ctx { cfg, out: cli.out.clone() };
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
        path: ctx.out.clone(),
        source: e,
    })?;
    match &cli.command {
        Command::SynthData => synth_data(&ctx),
        Command::TrainDetector(a) => train_detector_cmd(&ctx, a),
        Command::TrainClassifier(a) => train_classifier_cmd(&ctx, a),
        Command::EvalDetector(a) => eval_detector_cmd(&ctx, a),
        Command::EvalClassifier(a) => eval_classifier_cmd(&ctx, a),
        Command::Run(a) => run_cmd(&ctx, a),
        Command::EvalPipeline(a) => eval_pipeline_cmd(&ctx, a),
        Command::Visualize(a) => visualize_cmd(&ctx, a),
    }
}

fn synth_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let train_spec = d.synthetic.clone();
    let test_spec = d.test_synthetic();
    let mut report = MetricsReport::new(ctx.title("synth-data"));
    for (name, spec, n, dir) in [
        ("train", &train_spec, d.train_images, &d.train_dir),
        ("test", &test_spec, d.test_images, &d.test_dir),
    ] {
        let idx = generate_synthetic(spec, n)?;
        let root = ctx.path(dir);
        idx.save(&root).with_context(|| format!("writing the {name} set"))?;
        let boxes: usize = idx.entries.iter().map(|e| e.boxes.len()).sum();
        let single = idx.entries.iter().filter(|e| e.boxes.len() == 1).count();
        report.push(format!("{name}_images"), idx.len() as f64);
        report.push(format!("{name}_boxes"), boxes as f64);
        report.push(
            format!("{name}_single_fraction"),
            if idx.is_empty() { 0.0 } else { single as f64 / idx.len() as f64 },
        );
    }
    report.push("classes", train_spec.species.len() as f64);
    ctx.report("synth-data", &report)
}

fn train_detector_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let idx = ctx.train_set(a.data.as_ref())?;
    let samples = detection_samples(&idx)?;
    let (det, log) = train_detector(&samples, &ctx.cfg.detector, &ctx.cfg.detector_train, None)?;
    let path = a.checkpoint.clone().unwrap_or_else(|| ctx.detector_path(None));
    checkpoint::save_detector(&path, &det, &ctx.cfg.detector)?;
    let mut report = MetricsReport::new(ctx.title("train-detector"));
    report.push("images", idx.len() as f64);
    push_log(&mut report, &log);
    ctx.report("train-detector", &report)
}

fn train_classifier_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let idx = ctx.train_set(a.data.as_ref())?;
    let samples = classification_samples(&idx, ctx.cfg.pipeline.crop_padding)?;
    let (model, log) = train_classifier(&samples, &idx.classes, &ctx.cfg.classifier, &ctx.cfg.classifier_train, None)?;
    let path = a.checkpoint.clone().unwrap_or_else(|| ctx.classifier_path(None));
    checkpoint::save_classifier(&path, &model)?;
    let mut report = MetricsReport::new(ctx.title("train-classifier"));
    report.push("images", idx.len() as f64);
    report.push("crops", samples.len() as f64);
    report.push("classes", idx.classes.len() as f64);
    if let Some(s) = &model.selector {
        report.push(
            "selected_dims_mean",
            s.dims.iter().map(|d| d.len() as f64).sum::<f64>() / s.dims.len().max(1) as f64,
        );
    }
    push_log(&mut report, &log);
    ctx.report("train-classifier", &report)
}

fn eval_detector_cmd(ctx: &Ctx, a: &EvalDetectorArgs) -> Result<()> {
    let path = ctx.detector_path(a.eval.checkpoint.as_ref());
    let det = ctx.load_detector(&path)?;
    let idx = ctx.dataset(a.eval.data.as_ref(), false)?;
    let (ap50, ap75) = evaluate_detector(&det, &idx, &ctx.cfg.detector.inference, &ctx.cfg.pipeline)?;
    let dir = ctx.path(&ctx.cfg.output.pr_dir);
    write_file(&dir.join("ap50.tsv"), &ap50.to_tsv())?;
    write_file(&dir.join("ap75.tsv"), &ap75.to_tsv())?;
    let mut report = MetricsReport::new(ctx.title("eval-detector"));
    report.push("images", idx.len() as f64);
    report.push("ground_truth", ap50.num_ground_truth as f64);
    report.push("detections", ap50.num_detections as f64);
    report.push("map50", ap50.ap);
    report.push("map75", ap75.ap);
    if a.cross_subset {
        let train = ctx.train_set(None)?;
        let split = ClassSplit::halves(train.num_classes());
        let table = cross_subset_detection(&train, &idx, &split, &ctx.cfg)?;
        write_file(&ctx.report_dir("eval-detector").join("cross_subset.tsv"), &table.to_tsv())?;
        for c in &table.cells {
            report.push(format!("cross_{}_{}_map50", c.train.name(), c.test.name()), c.map50);
            report.push(format!("cross_{}_{}_map75", c.train.name(), c.test.name()), c.map75);
        }
    }
    ctx.report("eval-detector", &report)
}

fn eval_classifier_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let path = ctx.classifier_path(a.checkpoint.as_ref());
    let model = ctx.load_classifier(&path)?;
    let idx = ctx.dataset(a.data.as_ref(), false)?;
    same_classes(&model, &idx)?;
    let samples = classification_samples(&idx, ctx.cfg.pipeline.crop_padding)?;
    let preds = samples
        .iter()
        .map(|s| Ok(classify_auto(&s.image, &model)?.class))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let global: Vec<usize> = samples
        .iter()
        .map(|s| Ok(classify(&s.image, &model, None)?.class))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::new(ctx.title("eval-classifier"));
    report.push("crops", samples.len() as f64);
    report.push("accuracy", accuracy(&preds, &labels)?);
    report.push("macro_f1", macro_f1(&preds, &labels)?);
    report.push("global_only_accuracy", accuracy(&global, &labels)?);
    ctx.report("eval-classifier", &report)
}

fn inputs(path: &Path) -> Result<Vec<InputImage>> {
    if path.is_file() {
        return Ok(vec![InputImage {
            id: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            source: ImageSource::Path(path.to_path_buf()),
        }]);
    }
    let images = path.join("images");
    Ok(inputs_from_dir(if images.is_dir() { &images } else { path })?)
}

fn run_cmd(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let det = ctx.load_detector(&ctx.detector_path(a.detector.as_ref()))?;
    let clf = ctx.load_classifier(&ctx.classifier_path(a.classifier.as_ref()))?;
    let inputs = inputs(&a.input)?;
    let stages = Stages {
        detector: Some(&det),
        classifier: &clf,
        inference: &ctx.cfg.detector.inference,
        options: &ctx.cfg.pipeline,
    };
    let result = run_pipeline(&inputs, &stages);
    write_file(&ctx.path(&ctx.cfg.output.results), &result.to_jsonl())?;
    write_file(&ctx.path(&ctx.cfg.output.summary), &result.summary_tsv())?;
    let mut report = result.metrics.clone();
    report.title = ctx.title("run");
    ctx.report("run", &report)
}

fn eval_pipeline_cmd(ctx: &Ctx, a: &EvalPipelineArgs) -> Result<()> {
    let det_paths = if a.detectors.is_empty() {
        vec![ctx.detector_path(None)]
    } else {
        a.detectors.clone()
    };
    let clf_paths = if a.classifiers.is_empty() {
        vec![ctx.classifier_path(None)]
    } else {
        a.classifiers.clone()
    };
    let idx = ctx.dataset(a.data.as_ref(), false)?;
    let classifiers = clf_paths.iter().map(|p| ctx.load_classifier(p)).collect::<Result<Vec<_>>>()?;
    for c in &classifiers {
        same_classes(c, &idx)?;
    }
    let detectors = if a.no_detector {
        Vec::new()
    } else {
        det_paths.iter().map(|p| ctx.load_detector(p)).collect::<Result<Vec<_>>>()?
    };
    let dir = ctx.report_dir("eval-pipeline");
    let mut options = ctx.cfg.pipeline.clone();
    options.use_detector &= !a.no_detector;
    if detectors.len() > 1 || classifiers.len() > 1 {
        let sweep = combination_sweep(&detectors, &classifiers, &idx, &ctx.cfg.detector.inference, &options)?;
        let mut tsv = String::from("detector\tclassifier\tpipeline_accuracy\tbaseline_accuracy\n");
        for c in &sweep.cells {
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.detector, c.classifier, c.pipeline_accuracy, c.baseline_accuracy
            ));
        }
        write_file(&dir.join("sweep.tsv"), &tsv)?;
        let mut report = sweep.report;
        report.title = ctx.title("eval-pipeline");
        return ctx.report("eval-pipeline", &report);
    }
    let stages = Stages {
        detector: detectors.first(),
        classifier: &classifiers[0],
        inference: &ctx.cfg.detector.inference,
        options: &options,
    };
    let ev = evaluate_pipeline(&idx, &stages)?;
    write_file(&dir.join(&ctx.cfg.output.results), &ev.run.to_jsonl())?;
    write_file(&dir.join(&ctx.cfg.output.summary), &ev.run.summary_tsv())?;
    if let Some((a50, a75)) = &ev.pr {
        write_file(&dir.join("ap50.tsv"), &a50.to_tsv())?;
        write_file(&dir.join("ap75.tsv"), &a75.to_tsv())?;
    }
    let mut report = ev.report;
    report.title = ctx.title("eval-pipeline");
    ctx.report("eval-pipeline", &report)
}

fn visualize_cmd(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let clf = ctx.load_classifier(&ctx.classifier_path(a.classifier.as_ref()))?;
    let det_path = ctx.detector_path(a.detector.as_ref());
    let det = if a.detector.is_some() || det_path.exists() {
        Some(ctx.load_detector(&det_path)?)
    } else {
        None
    };
    let dir = ctx.path(&ctx.cfg.output.overlays_dir);
    let mut written = 0usize;
    for inp in inputs(&a.input)? {
        let img = inp.load().map_err(Error::Invalid)?;
        let stem = Path::new(&inp.id)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| inp.id.clone());
        let boxes = match &det {
            Some(d) => d.detect(&img, &ctx.cfg.detector.inference)?,
            None => Vec::new(),
        };
        let mut overlay = to_rgb(&img);
        for b in &boxes {
            draw_rect(&mut overlay, &b.bbox, [255, 0, 0]);
        }
        save_png(&overlay, &dir.join(format!("{stem}_detections.png")))?;
        written += 1;
        let crop = match boxes.first() {
            Some(b) => padded_crop(&img, &b.bbox, ctx.cfg.pipeline.crop_padding).0,
            None => img.clone(),
        };
        let p = clf.global_probabilities(&crop);
        let Some(dims) = clf.dims_for(&p) else {
            log::warn!("{}: the classifier has no part selector; skipping saliency", inp.id);
            continue;
        };
        let mining = mine_parts(&crop, &clf.global, &dims, &clf.parts).map_err(ClassifierError::from)?;
        let (w, h) = (crop.width as u32, crop.height as u32);
        for (name, map) in [("saliency", &mining.raw), ("saliency_sparse", &mining.sparse)] {
            let heat = image::imageops::resize(&heatmap_image(map), w, h, image::imageops::FilterType::Nearest);
            save_png(&heat, &dir.join(format!("{stem}_{name}.png")))?;
        }
        save_png(&overlay_parts(&crop, &mining.parts), &dir.join(format!("{stem}_parts.png")))?;
        written += 3;
    }
    let mut report = MetricsReport::new(ctx.title("visualize"));
    report.push("files_written", written as f64);
    ctx.report("visualize", &report)
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}
