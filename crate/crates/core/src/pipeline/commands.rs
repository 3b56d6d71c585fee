use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{featurize_clip, load_clip, load_split, read_dataset, FeatureSet};
use super::metrics::Metrics;
use super::train::{argmax, fit, predictions, History, TrainOptions};
use super::{PipelineError, RunConfig};
use crate::audio_io::{load_wav, LabelSet};
use crate::compress::{
    compression_report, distill, quantize_model, DistillConfig, QuantizedModel, ReportRow,
};
use crate::features::{dump_views, FeatureExtractor};
use crate::models::{load_model, Model, ModelError};
use crate::pooling::PoolHeadKind;
use crate::synthdata::{gen_dataset_with, Manifest, Split};
use crate::tensor_nn::{StateRef, Tensor};

pub const MODEL_FILE: &str = "model.icnm";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const NAN_DUMP_FILE: &str = "nan_state.icnm";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<(), PipelineError> {
    write(&dir.join(CONFIG_FILE), cfg.to_toml())
}

fn model_error(e: ModelError) -> PipelineError {
    match e {
        ModelError::CheckpointMismatch(m) => PipelineError::CheckpointMismatch(m),
        other => PipelineError::Model(other),
    }
}

fn read_model(path: &Path) -> Result<Model, PipelineError> {
    load_model(path).map_err(|e| match e {
        ModelError::Io(io) => PipelineError::io(path, io),
        other => PipelineError::Model(other),
    })
}

/// The label vocabulary a model was trained against, by class count.
pub fn label_set_for(model: &Model) -> Result<LabelSet, PipelineError> {
    [LabelSet::Detection, LabelSet::Reason, LabelSet::Pretrain]
        .into_iter()
        .find(|s| s.len() == model.n_classes())
        .ok_or_else(|| {
            PipelineError::Config(format!("no label set has {} classes", model.n_classes()))
        })
}

pub fn extractor(n_mels: usize) -> Result<FeatureExtractor, PipelineError> {
    FeatureExtractor::with_mels(n_mels).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Generates the synthetic dataset for `cfg.task` into `cfg.data_dir`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let manifest = gen_dataset_with(
        cfg.task,
        cfg.n_per_class,
        cfg.sub_seed("data"),
        cfg.clip_seconds,
        &cfg.data_dir,
    )?;
    write_config(cfg, &cfg.data_dir)?;
    Ok(manifest)
}

/// Header of a cached feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub label_set: LabelSet,
    pub split: String,
    pub n_frames: usize,
    pub n_mels: usize,
    pub paths: Vec<String>,
    pub labels: Vec<usize>,
}

/// Writes `{split}.json` and `{split}.f32` (little-endian `len x T x F`)
/// under `cfg.out_dir` for both splits.
pub fn cmd_featurize(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    cfg.validate()?;
    let ex = extractor(cfg.n_mels)?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Test] {
        let set = load_split(&cfg.data_dir, split, &ex, cfg.clip_seconds)?;
        let index = FeatureIndex {
            label_set: set.label_set,
            split: split.name().to_string(),
            n_frames: set.n_frames,
            n_mels: set.n_mels,
            paths: set.paths.clone(),
            labels: set.labels.clone(),
        };
        let json = cfg.out_dir.join(format!("{}.json", split.name()));
        let bin = cfg.out_dir.join(format!("{}.f32", split.name()));
        write(&json, serde_json::to_string(&index).expect("index serializes"))?;
        let bytes: Vec<u8> = set.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write(&bin, bytes)?;
        written.extend([json, bin]);
    }
    write_config(cfg, &cfg.out_dir)?;
    Ok(written)
}

/// Train and test features for a run, with the low-data subset applied.
pub fn load_data(cfg: &RunConfig) -> Result<(FeatureSet, FeatureSet), PipelineError> {
    let ex = extractor(cfg.n_mels)?;
    let (label_set, _) = read_dataset(&cfg.data_dir)?;
    if label_set != cfg.task.label_set() {
        return Err(PipelineError::Config(format!(
            "task {} expects {:?} labels but {} holds {:?}",
            cfg.task.name(),
            cfg.task.label_set(),
            cfg.data_dir.display(),
            label_set
        )));
    }
    let mut train = load_split(&cfg.data_dir, Split::Train, &ex, cfg.clip_seconds)?;
    let test = load_split(&cfg.data_dir, Split::Test, &ex, cfg.clip_seconds)?;
    if let Some(k) = cfg.train_per_class {
        train = train.per_class_subset(k, cfg.sub_seed("subset"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok((train, test))
}

pub fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        shuffle_seed: cfg.sub_seed("shuffle"),
    }
}

/// Freshly initialized model for `cfg`, warm-started from
/// `cfg.pretrained_checkpoint` when one is set.
pub fn init_model(cfg: &RunConfig) -> Result<Model, PipelineError> {
    let mut model = Model::build(&cfg.model_config(), cfg.sub_seed("init"))?;
    if let Some(path) = &cfg.pretrained_checkpoint {
        let src = read_model(path)?;
        model.load_trunk_from(&src).map_err(model_error)?;
    }
    Ok(model)
}

pub fn evaluate(model: &Model, set: &FeatureSet, loss_curve: Vec<f64>) -> Result<Metrics, PipelineError> {
    if model.n_classes() != set.label_set.len() {
        return Err(PipelineError::LabelSetMismatch {
            model: model.n_classes(),
            data: set.label_set.len(),
        });
    }
    let pred = predictions(model, set)?;
    Metrics::from_predictions(set.label_set.names(), &set.labels, &pred, loss_curve)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub metrics: Metrics,
}

/// Trains on already-loaded features and evaluates on `test`.
pub fn train_on(
    cfg: &RunConfig,
    train: &FeatureSet,
    test: &FeatureSet,
) -> Result<TrainOutcome, PipelineError> {
    train_dumping(cfg, train, test, None)
}

/// On a numeric failure the model state at the failing step is written to
/// `dump_dir/nan_state.icnm` before the error is returned.
fn train_dumping(
    cfg: &RunConfig,
    train: &FeatureSet,
    test: &FeatureSet,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    let mut model = init_model(cfg)?;
    let history = match fit(&mut model, train, &train_options(cfg), None) {
        Err(PipelineError::Numeric(m)) => {
            if let Some(dir) = dump_dir {
                let path = dir.join(NAN_DUMP_FILE);
                write(&path, model.to_bytes())?;
                return Err(PipelineError::Numeric(format!("{m}; state dumped to {}", path.display())));
            }
            return Err(PipelineError::Numeric(m));
        }
        other => other?,
    };
    let metrics = evaluate(&model, test, history.loss_curve.clone())?;
    Ok(TrainOutcome { model, history, metrics })
}

fn save_run(cfg: &RunConfig, model: &Model, metrics: &Metrics) -> Result<(), PipelineError> {
    write(&cfg.out_dir.join(MODEL_FILE), model.to_bytes())?;
    write(&cfg.out_dir.join(METRICS_FILE), metrics.to_json())?;
    write_config(cfg, &cfg.out_dir)
}

/// Trains with Adam and cross-entropy, then writes the model, test-split
/// metrics and the resolved config to `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let out = train_dumping(cfg, &train, &test, Some(&cfg.out_dir))?;
    save_run(cfg, &out.model, &out.metrics)?;
    Ok(out)
}

/// Evaluates a saved model on the test split of `cfg.data_dir` and writes
/// `eval.json` to `cfg.out_dir`.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path) -> Result<Metrics, PipelineError> {
    let model = read_model(model_path)?;
    let ex = extractor(model.config.n_mels)?;
    let test = load_split(&cfg.data_dir, Split::Test, &ex, cfg.clip_seconds)?;
    if test.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let metrics = evaluate(&model, &test, Vec::new())?;
    write(&cfg.out_dir.join("eval.json"), metrics.to_json())?;
    write_config(cfg, &cfg.out_dir)?;
    Ok(metrics)
}

/// CRC32 over the names and values of the trunk tensors.
pub fn trunk_hash(model: &Model) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, t) in model.named_state() {
        if !(name.starts_with("input_bn") || name.starts_with("stages")) {
            continue;
        }
        h.update(name.as_bytes());
        match t {
            StateRef::Float(t) => t.data().iter().for_each(|v| h.update(&v.to_le_bytes())),
            StateRef::Int8(q) => {
                h.update(&q.scale().to_le_bytes());
                h.update(&q.values().iter().map(|&v| v as u8).collect::<Vec<_>>());
            }
        }
    }
    h.finalize()
}

/// CRC32 of the training rows in the order the first epoch visits them.
pub fn data_order_hash(train: &FeatureSet, shuffle_seed: u64) -> u32 {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
    let mut h = crc32fast::Hasher::new();
    for i in order {
        h.update(train.paths[i].as_bytes());
    }
    h.finalize()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub pool_head: PoolHeadKind,
    pub accuracy: f64,
    pub trunk_hash: u32,
    pub data_hash: u32,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("pool_head,accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{:.4}\n", r.pool_head.name(), r.accuracy));
    }
    s
}

/// Trains one model per pooling head with everything else fixed. Writes
/// `poolsweep.csv` and `poolsweep_hashes.csv` to `cfg.out_dir`.
pub fn cmd_poolsweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, PipelineError> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    poolsweep_on(cfg, &train, &test)
}

pub fn poolsweep_on(
    cfg: &RunConfig,
    train: &FeatureSet,
    test: &FeatureSet,
) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::new();
    let mut log = String::from("pool_head,trunk_crc32,data_order_crc32\n");
    for kind in PoolHeadKind::all() {
        let mut run = cfg.clone();
        run.pool_head = kind;
        let init = init_model(&run)?;
        let trunk = trunk_hash(&init);
        let data = data_order_hash(train, train_options(&run).shuffle_seed);
        let out = train_on(&run, train, test)?;
        log.push_str(&format!("{},{trunk:08x},{data:08x}\n", kind.name()));
        rows.push(SweepRow {
            pool_head: kind,
            accuracy: out.metrics.accuracy,
            trunk_hash: trunk,
            data_hash: data,
        });
    }
    write(&cfg.out_dir.join("poolsweep.csv"), sweep_csv(&rows))?;
    write(&cfg.out_dir.join("poolsweep_hashes.csv"), log)?;
    write_config(cfg, &cfg.out_dir)?;
    Ok(rows)
}

pub fn distill_config(cfg: &RunConfig) -> DistillConfig {
    DistillConfig {
        temperature: cfg.temperature,
        lambda: cfg.kd_lambda,
    }
}

/// Distills `cfg.teacher` into a fresh student described by `cfg`.
pub fn cmd_distill(cfg: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let teacher_path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| PipelineError::Config("distill needs teacher = <model path>".into()))?;
    let teacher = read_model(teacher_path)?;
    let (train, test) = load_data(cfg)?;
    let student = init_model(cfg)?;
    let (model, history) = distill(
        &teacher,
        student,
        &train,
        None,
        &train_options(cfg),
        &distill_config(cfg),
    )?;
    let metrics = evaluate(&model, &test, history.loss_curve.clone())?;
    save_run(cfg, &model, &metrics)?;
    Ok(TrainOutcome { model, history, metrics })
}

/// Quantizes a saved model and evaluates it; writes the int8 model,
/// its metrics and the config to `cfg.out_dir`.
pub fn cmd_quantize(
    cfg: &RunConfig,
    model_path: &Path,
) -> Result<(QuantizedModel, Metrics), PipelineError> {
    let model = read_model(model_path)?;
    let q = quantize_model(&model);
    let ex = extractor(model.config.n_mels)?;
    let test = load_split(&cfg.data_dir, Split::Test, &ex, cfg.clip_seconds)?;
    if test.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let metrics = evaluate(q.model(), &test, Vec::new())?;
    save_run(cfg, q.model(), &metrics)?;
    Ok((q, metrics))
}

/// Paths of the three trained models a compression report compares.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportInputs {
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub kd: PathBuf,
}

pub const REPORT_VARIANTS: [&str; 5] = ["teacher", "student", "kd", "quantized", "kd+quantized"];

/// Evaluates teacher, student, KD student, quantized teacher and quantized
/// KD student on one test set; sizes are serialized ICNM bytes.
pub fn report_rows(
    teacher: &Model,
    student: &Model,
    kd: &Model,
    test: &FeatureSet,
) -> Result<Vec<ReportRow>, PipelineError> {
    let qt = quantize_model(teacher).into_model();
    let qkd = quantize_model(kd).into_model();
    let models = [teacher, student, kd, &qt, &qkd];
    models
        .iter()
        .zip(REPORT_VARIANTS)
        .map(|(m, name)| {
            Ok(ReportRow {
                name: name.to_string(),
                accuracy: evaluate(m, test, Vec::new())?.accuracy,
                bytes: m.to_bytes().len(),
            })
        })
        .collect()
}

/// Writes `report.csv` (`name,accuracy,bytes,ratio`) to `cfg.out_dir`.
pub fn cmd_report(cfg: &RunConfig, inputs: &ReportInputs) -> Result<String, PipelineError> {
    let teacher = read_model(&inputs.teacher)?;
    let student = read_model(&inputs.student)?;
    let kd = read_model(&inputs.kd)?;
    let ex = extractor(teacher.config.n_mels)?;
    let test = load_split(&cfg.data_dir, Split::Test, &ex, cfg.clip_seconds)?;
    if test.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let rows = report_rows(&teacher, &student, &kd, &test)?;
    let csv = compression_report(&rows).map_err(|e| PipelineError::Config(e.to_string()))?;
    write(&cfg.out_dir.join("report.csv"), &csv)?;
    write_config(cfg, &cfg.out_dir)?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub label: String,
    pub labels: Vec<String>,
    /// In `labels` order.
    pub probabilities: Vec<f64>,
}

impl Inference {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("inference serializes")
    }
}

/// Classifies one WAV file.
pub fn cmd_infer(model_path: &Path, wav: &Path, clip_seconds: f64) -> Result<Inference, PipelineError> {
    let model = read_model(model_path)?;
    let label_set = label_set_for(&model)?;
    let clip = load_clip(wav, clip_seconds)?;
    let (n_frames, feats) = featurize_clip(&clip, &extractor(model.config.n_mels)?)?;
    let x = Tensor::new(&[1, 1, n_frames, model.config.n_mels], feats)?;
    let probs = model.predict(&x)?.data().to_vec();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(PipelineError::Numeric("non-finite probabilities".into()));
    }
    Ok(Inference {
        label: label_set.names()[argmax(&probs)].to_string(),
        labels: label_set.names().iter().map(|s| s.to_string()).collect(),
        probabilities: probs,
    })
}

/// Writes `<prefix>.wave.csv` and `<prefix>.spec.pgm` for one WAV file.
pub fn cmd_plot(wav: &Path, out_prefix: &Path, n_mels: usize) -> Result<(PathBuf, PathBuf), PipelineError> {
    let clip = load_wav(wav).map_err(|e| PipelineError::from_audio(wav, e))?;
    let spec = extractor(n_mels)?
        .extract(&clip)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(dir) = out_prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    dump_views(&clip, &spec, out_prefix).map_err(|e| PipelineError::Io(e.to_string()))
}
