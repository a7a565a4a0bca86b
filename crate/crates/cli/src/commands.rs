//! The command implementations. Each returns a summary value; printing is
//! left to the binary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use qdiffusion::data::{
    load_image_folder, make_toy_dataset, read_image, save_image_folder, split, write_png, Dataset,
};
use qdiffusion::diffusion::{ddpm_sample_with_progress, StepRecord, Trainer, LOG_HEADER};
use qdiffusion::metrics::{
    channel_histograms, conditioning_accuracy, fid_features, histogram_tsv, inception_style_score, kid,
    to_unit_range, train_eval_classifier, ChannelHistogram, Classifier, ClassifierConfig,
};
use qdiffusion::nnet::{Checkpoint, Tensor};
use qdiffusion::qsim::{AnsatzFamily, AnsatzSpec, Circuit};
use qdiffusion::rng::{stream, Purpose};
use qdiffusion::{Error, Result};

use crate::config::RunConfig;

pub const LOG_FILE: &str = "train.log";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const SAMPLE_MANIFEST: &str = "samples.tsv";
pub const REPORT_FILE: &str = "report.toml";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.ckpt")
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub last: Option<StepRecord>,
}

/// Loads the config and applies command-line overrides.
pub fn effective_config(opts: &TrainOptions) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.run.out_dir = o.clone();
    }
    Ok(cfg)
}

fn same_architecture(a: &RunConfig, b: &RunConfig) -> bool {
    a.model == b.model && a.quanv == b.quanv && a.bottleneck == b.bottleneck && a.schedule == b.schedule
}

/// Trains until `train.total_steps`, writing one log line per step and a
/// checkpoint every `train.checkpoint_every` steps and at the end.
pub fn cmd_train(opts: &TrainOptions, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainSummary> {
    let cfg = effective_config(opts)?;
    let resume = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let old = RunConfig::parse(&ck.config)?;
            if !same_architecture(&old, &cfg) {
                return Err(Error::config(
                    "model",
                    format!("{} was trained with a different model or schedule configuration", p.display()),
                ));
            }
            Some(ck)
        }
        None => None,
    };
    let model = cfg.build_model()?;
    let sched = cfg.build_schedule()?;
    let (data, train_idx) = cfg.load_data()?;
    if data.class_names.iter().any(|n| n.contains(',')) {
        return Err(Error::invalid("class names must not contain commas"));
    }
    let params = model.init_params(&mut stream(cfg.train.seed, Purpose::Init, 0));
    let mut trainer = Trainer::new(&model, &sched, &data, train_idx, cfg.train.clone(), params)?;
    if let Some(ck) = &resume {
        trainer.resume(ck)?;
    }

    let out = cfg.run.out_dir.clone();
    create_dir(&out)?;
    let log_path = out.join(LOG_FILE);
    let fresh = resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let echo = cfg.to_toml();
    let latest = out.join(LATEST_CHECKPOINT);
    let save = |trainer: &Trainer| -> Result<()> {
        let mut ck = trainer.checkpoint(&echo);
        ck.meta.insert("class_names".into(), data.class_names.join(","));
        ck.save(&out.join(checkpoint_name(trainer.step_count())))?;
        ck.save(&latest)
    };
    let mut last = None;
    while trainer.step_count() < cfg.train.total_steps {
        let rec = trainer.step()?;
        writeln!(log, "{}", rec.tsv()).map_err(|e| Error::io(&log_path, e))?;
        on_step(&rec);
        if cfg.train.checkpoint_every > 0 && rec.step % cfg.train.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save(&trainer)?;
        }
        last = Some(rec);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(&trainer)?;
    Ok(TrainSummary {
        log: log_path,
        checkpoint: latest,
        steps: trainer.step_count(),
        out_dir: out,
        last,
    })
}

/// Parses a training log into `(step, loss)` pairs.
pub fn read_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let mut f = line.split('\t');
            let bad = || Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: malformed log entry", i + 2),
            };
            let step = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let loss = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            Ok((step, loss))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptionsCli {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Number of images; labels cycle through the classes.
    pub n: usize,
    /// Explicit labels; overrides `n`.
    pub labels: Option<Vec<usize>>,
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleSummary {
    pub n: usize,
    pub circuit_evals: u64,
    pub manifest: PathBuf,
}

/// A directory of generated images and their intended classes.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub files: Vec<PathBuf>,
    pub class_names: Vec<String>,
}

fn checkpoint_classes(ck: &Checkpoint, n: usize) -> Vec<String> {
    match ck.meta.get("class_names") {
        Some(s) => s.split(',').map(str::to_string).collect(),
        None => (0..n).map(|i| format!("class{i}")).collect(),
    }
}

pub fn cmd_sample(opts: &SampleOptionsCli, mut progress: impl FnMut(usize, usize)) -> Result<SampleSummary> {
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let model = cfg.build_model()?;
    let sched = cfg.build_schedule()?;
    model.check_params(&ck.params)?;
    let classes = checkpoint_classes(&ck, cfg.model.num_classes);
    let labels: Vec<usize> = match &opts.labels {
        Some(l) => l.clone(),
        None => (0..opts.n).map(|i| i % cfg.model.num_classes).collect(),
    };
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.model.num_classes) {
        return Err(Error::OutOfRange {
            what: "class labels",
            index: bad,
            size: cfg.model.num_classes,
        });
    }
    let mut sample_opts = cfg.sample.options();
    if let Some(c) = opts.chunk {
        sample_opts.chunk = c;
    }
    create_dir(&opts.out)?;
    let total = labels.len();
    let out = ddpm_sample_with_progress(&model, &ck.params, &sched, &labels, opts.seed, sample_opts, |done| {
        progress(done, total)
    })?;
    let s = cfg.model.image_size;
    let mut manifest = String::from("file\tlabel\tclass\n");
    for (i, &y) in labels.iter().enumerate() {
        let name = format!("{}_{i:05}.png", classes[y]);
        let img = out.images.batch_slice(i, 1)?.reshape(&[s, s, 3])?;
        write_png(&opts.out.join(&name), &img)?;
        manifest.push_str(&format!("{name}\t{y}\t{}\n", classes[y]));
    }
    let manifest_path = opts.out.join(SAMPLE_MANIFEST);
    write_file(&manifest_path, &manifest)?;
    Ok(SampleSummary {
        n: total,
        circuit_evals: out.circuit_evals,
        manifest: manifest_path,
    })
}

pub fn read_generated(dir: &Path) -> Result<GeneratedSet> {
    let path = dir.join(SAMPLE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut set = GeneratedSet {
        files: Vec::new(),
        class_names: Vec::new(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format {
                path: path.clone(),
                message: format!("line {}: expected file, label and class", i + 1),
            });
        }
        set.files.push(dir.join(f[0]));
        set.class_names.push(f[2].to_string());
    }
    Ok(set)
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = images
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_batches(&parts)
}

fn load_images(files: &[PathBuf]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = files.iter().map(|f| read_image(f)).collect::<Result<_>>()?;
    stack(&imgs)
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    pub real: PathBuf,
    pub generated: PathBuf,
    /// Loaded if it exists; otherwise a classifier is trained on the real
    /// set and written here (or to `out/classifier.ckpt`).
    pub classifier: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
    pub is_splits: usize,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor_id: String,
    pub classifier_val_accuracy: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub is_mean: f64,
    pub is_std: f64,
    pub is_splits: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassRow>,
    pub histogram_real: PathBuf,
    pub histogram_generated: PathBuf,
}

fn obtain_classifier(opts: &EvaluateOptions, real: &Dataset) -> Result<Classifier> {
    let path = opts.classifier.clone().unwrap_or_else(|| opts.out.join("classifier.ckpt"));
    if path.exists() {
        return Classifier::from_checkpoint(&Checkpoint::load(&path)?);
    }
    let parts = split(real, &[0.8, 0.2], opts.seed)?;
    let (clf, training) = train_eval_classifier(real, &parts[0], &parts[1], &ClassifierConfig::default(), opts.seed)?;
    clf.to_checkpoint(opts.seed, training.steps).save(&path)?;
    Ok(clf)
}

pub fn cmd_evaluate(opts: &EvaluateOptions) -> Result<EvalReport> {
    let (real, _) = load_image_folder(&opts.real)?;
    let gen = read_generated(&opts.generated)?;
    if gen.files.is_empty() {
        return Err(Error::invalid("generated set is empty"));
    }
    create_dir(&opts.out)?;
    let clf = obtain_classifier(opts, &real)?;
    if clf.class_names != real.class_names {
        return Err(Error::invalid(format!(
            "classifier classes {:?} differ from the real set's {:?}",
            clf.class_names, real.class_names
        )));
    }
    let intended: Vec<usize> = gen
        .class_names
        .iter()
        .map(|name| {
            clf.class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::invalid(format!("generated class `{name}` is not among the real classes")))
        })
        .collect::<Result<_>>()?;
    let gen_images = load_images(&gen.files)?;
    let all: Vec<usize> = (0..real.len()).collect();
    let (real_images, _) = real.batch(&all)?;

    let fr = clf.features(&real_images)?;
    let fg = clf.features(&gen_images)?;
    let fid = fid_features(&fr, &fg)?;
    let subset = opts.kid_subset_size.min(fr.n).min(fg.n);
    let k = kid(&fr, &fg, subset, opts.kid_subsets, opts.seed)?;
    let splits = opts.is_splits.min(fg.n).max(1);
    let is = inception_style_score(&clf.probabilities(&gen_images)?, splits)?;
    let cond = conditioning_accuracy(&clf, &gen_images, &intended)?;

    let names = ["red", "green", "blue"];
    let hist_real = opts.out.join("hist_real.tsv");
    let hist_gen = opts.out.join("hist_generated.tsv");
    write_file(&hist_real, &histogram_tsv(&channel_histograms(&to_unit_range(&real_images), opts.bins)?, &names))?;
    write_file(&hist_gen, &histogram_tsv(&channel_histograms(&to_unit_range(&gen_images), opts.bins)?, &names))?;

    let report = EvalReport {
        extractor_id: fr.extractor_id.clone(),
        classifier_val_accuracy: clf.val_accuracy,
        n_real: fr.n,
        n_generated: fg.n,
        fid,
        kid_mean: k.mean,
        kid_std: k.std,
        kid_subset_size: subset,
        kid_subsets: opts.kid_subsets,
        is_mean: is.mean,
        is_std: is.std,
        is_splits: splits,
        accuracy: cond.accuracy,
        macro_precision: cond.macro_precision,
        macro_recall: cond.macro_recall,
        macro_f1: cond.macro_f1,
        per_class: cond
            .per_class
            .iter()
            .zip(&clf.class_names)
            .map(|(m, name)| ClassRow {
                class: name.clone(),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                support: m.support,
            })
            .collect(),
        histogram_real: hist_real,
        histogram_generated: hist_gen,
    };
    let text = toml::to_string(&report).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&opts.out.join(REPORT_FILE), &text)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct QsimOptions {
    pub family: AnsatzFamily,
    pub qubits: usize,
    pub layers: usize,
    pub inputs: Option<Vec<f64>>,
    pub params: Option<Vec<f64>>,
    pub seed: u64,
    pub jacobian: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QsimOutput {
    pub params: Vec<f64>,
    pub inputs: Vec<f64>,
    pub expectations: Vec<f64>,
    /// Parameter-shift Jacobian, rows per qubit.
    pub jacobian: Option<Vec<Vec<f64>>>,
}

pub fn cmd_qsim(opts: &QsimOptions) -> Result<QsimOutput> {
    let spec = AnsatzSpec::new(opts.family, opts.qubits, opts.layers)?;
    let circuit = Circuit::new(spec)?;
    let params = match &opts.params {
        Some(p) => p.clone(),
        None => {
            let mut rng = stream(opts.seed, Purpose::Init, 0);
            (0..circuit.parameter_count()).map(|_| rng.random_range(-0.1..=0.1)).collect()
        }
    };
    let inputs = opts.inputs.clone().unwrap_or_else(|| vec![0.0; opts.qubits]);
    let expectations = circuit.run(&params, &inputs)?;
    let jacobian = if opts.jacobian {
        Some(circuit.parameter_shift_jacobian(&params, &inputs)?)
    } else {
        None
    };
    Ok(QsimOutput {
        params,
        inputs,
        expectations,
        jacobian,
    })
}

/// Accepts a single image, a generated-sample directory or a
/// class-per-directory tree; writes the density table to `out`.
pub fn cmd_histogram(input: &Path, out: &Path, bins: usize) -> Result<Vec<ChannelHistogram>> {
    let images = if input.is_file() {
        stack(&[read_image(input)?])?
    } else if input.join(SAMPLE_MANIFEST).exists() {
        load_images(&read_generated(input)?.files)?
    } else {
        let (d, _) = load_image_folder(input)?;
        d.batch(&(0..d.len()).collect::<Vec<_>>())?.0
    };
    let hists = channel_histograms(&to_unit_range(&images), bins)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &histogram_tsv(&hists, &["red", "green", "blue"]))?;
    Ok(hists)
}

pub fn cmd_make_toy_data(out: &Path, per_class: usize, image_size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let d = make_toy_dataset(per_class, image_size, classes, seed)?;
    create_dir(out)?;
    save_image_folder(&d, out, &d.manifest(seed, &[1.0]))?;
    Ok(d)
}
