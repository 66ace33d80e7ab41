//! Experiment specs and the gen/train/eval/matrix commands. Everything is
//! config-driven and deterministic: the same spec and flags always produce
//! byte-identical datasets, checkpoints, logs, and reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_apck, records_into_params, CheckpointError};
use crate::metrics::{pck, report_csv_header, report_csv_row, PckConfig, PckReport};
use crate::model::{init_params, ModelScale};
use crate::synthcsi::{
    generate_domain, mask_labels, read_csid, write_csid, DomainDataset, MotionSpec, Pose2D,
    SceneSpec, SynthError, WINDOW_LEN,
};
use crate::trainer::{
    predict_poses, run_experiment_matrix, save_state, train, MatrixTask, Method, TrainConfig,
    TrainError,
};

/// Seed offset separating evaluation sequences from training sequences
/// generated under the same scene.
const EVAL_SEED_OFFSET: u64 = 7777;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid spec {path}: {message}")]
    Spec { path: PathBuf, message: String },
    #[error("missing dataset {0} (run `gen` first)")]
    MissingDataset(PathBuf),
    #[error("{0}")]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Documented exit codes: 2 for unusable inputs, 3 for a training run
    /// that diverged.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Custom(ModelScale),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelScale, String> {
        match self {
            ModelRef::Preset(name) => ModelScale::by_name(name)
                .ok_or_else(|| format!("unknown model preset {name:?} (try \"desk\" or \"paper\")")),
            ModelRef::Custom(scale) => Ok(scale.clone()),
        }
    }
}

fn default_model() -> ModelRef {
    ModelRef::Preset("desk".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self { data_dir: "data".into(), runs_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scene_a: SceneSpec,
    pub scene_b: SceneSpec,
    /// Motions generating the training windows of each domain.
    pub motions: Vec<MotionSpec>,
    /// Motions generating the held-out evaluation windows (same specs,
    /// different seed stream).
    #[serde(default)]
    pub eval_motions: Vec<MotionSpec>,
    #[serde(default = "default_model")]
    pub model: ModelRef,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ExperimentSpec {
    pub fn eval_motions(&self) -> &[MotionSpec] {
        if self.eval_motions.is_empty() { &self.motions } else { &self.eval_motions }
    }

    /// Hash of the canonical serialized form; identifies the experiment.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn resolved_train_config(&self) -> Result<TrainConfig, String> {
        let mut config = self.train.clone();
        config.scale = self.model.resolve()?;
        Ok(config)
    }
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Spec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let spec: ExperimentSpec =
        serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::Spec {
            path: path.to_path_buf(),
            message: format!("at {}: {}", e.path(), e.inner()),
        })?;
    let scale = spec.model.resolve().map_err(|m| CliError::Spec {
        path: path.to_path_buf(),
        message: m,
    })?;
    for scene in [&spec.scene_a, &spec.scene_b] {
        scene.validate().map_err(|e| CliError::Spec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if scene.subcarriers != scale.in_height {
            return Err(CliError::Spec {
                path: path.to_path_buf(),
                message: format!(
                    "scene has {} subcarriers but the model expects {}",
                    scene.subcarriers, scale.in_height
                ),
            });
        }
    }
    if spec.motions.is_empty() {
        return Err(CliError::Spec { path: path.to_path_buf(), message: "no motions".into() });
    }
    Ok(spec)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenManifest {
    pub spec_hash: String,
    pub scene_a_seed: u64,
    pub scene_b_seed: u64,
    pub files: Vec<String>,
    pub window_counts: Vec<usize>,
}

fn dataset_path(data_dir: &Path, name: &str) -> PathBuf {
    data_dir.join(format!("{name}.csid"))
}

/// Generates train and eval CSID files for both scenes plus a manifest.
pub fn cmd_gen(spec_path: &Path, out_dir: Option<&Path>) -> Result<GenManifest, CliError> {
    let spec = load_spec(spec_path)?;
    let data_dir = out_dir.unwrap_or(&spec.output.data_dir).to_path_buf();
    std::fs::create_dir_all(&data_dir)?;

    let mut files = Vec::new();
    let mut window_counts = Vec::new();
    for (scene, domain) in [(&spec.scene_a, "a"), (&spec.scene_b, "b")] {
        let mut eval_scene = scene.clone();
        eval_scene.seed = scene.seed.wrapping_add(EVAL_SEED_OFFSET);
        for (s, motions, suffix) in [
            (scene, spec.motions.as_slice(), "train"),
            (&eval_scene, spec.eval_motions(), "eval"),
        ] {
            let name = format!("{domain}_{suffix}");
            let dataset = generate_domain(s, motions, WINDOW_LEN, &name)?;
            write_csid(&dataset_path(&data_dir, &name), &dataset)?;
            window_counts.push(dataset.len());
            files.push(format!("{name}.csid"));
        }
    }
    let manifest = GenManifest {
        spec_hash: spec.hash(),
        scene_a_seed: spec.scene_a.seed,
        scene_b_seed: spec.scene_b.seed,
        files,
        window_counts,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&data_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn load_dataset(data_dir: &Path, name: &str) -> Result<DomainDataset, CliError> {
    let path = dataset_path(data_dir, name);
    if !path.exists() {
        return Err(CliError::MissingDataset(path));
    }
    Ok(read_csid(&path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    A2B,
    B2A,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task, CliError> {
        match s {
            "A2B" => Ok(Task::A2B),
            "B2A" => Ok(Task::B2A),
            other => Err(CliError::Usage(format!("unknown task {other:?} (A2B or B2A)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::A2B => "A2B",
            Task::B2A => "B2A",
        }
    }

    fn domains(self) -> (&'static str, &'static str) {
        match self {
            Task::A2B => ("a", "b"),
            Task::B2A => ("b", "a"),
        }
    }
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains one (task, method) cell and writes checkpoint + JSON-lines log.
pub fn cmd_train(
    spec_path: &Path,
    task: Task,
    method: Method,
    label_fraction: Option<f64>,
    seed: Option<u64>,
    data_dir: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<TrainArtifacts, CliError> {
    let spec = load_spec(spec_path)?;
    let mut config = spec
        .resolved_train_config()
        .map_err(|m| CliError::Spec { path: spec_path.to_path_buf(), message: m })?;
    config.method = method;
    if let Some(f) = label_fraction {
        config.label_fraction = f;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if method == Method::SourceOnly {
        config.label_fraction = 0.0;
    }

    let data_dir = data_dir.unwrap_or(&spec.output.data_dir).to_path_buf();
    let runs_dir = out_dir.unwrap_or(&spec.output.runs_dir).to_path_buf();
    std::fs::create_dir_all(&runs_dir)?;

    let (src, tgt) = task.domains();
    let source = load_dataset(&data_dir, &format!("{src}_train"))?;
    let target_full = load_dataset(&data_dir, &format!("{tgt}_train"))?;
    // The label mask is part of the experiment definition, not the seed round.
    let target = mask_labels(&target_full, config.label_fraction, spec.scene_a.seed);
    let eval = load_dataset(&data_dir, &format!("{tgt}_eval")).ok();

    let result = train(&config, &source, &target, eval.as_ref(), None, None)?;

    let stem = format!("{}_{}_s{}", task.name(), method.name(), config.seed);
    let checkpoint = runs_dir.join(format!("{stem}.apck"));
    save_state(&checkpoint, &result.state)?;
    let mut log_bytes = Vec::new();
    for record in &result.log {
        log_bytes.extend_from_slice(&serde_json::to_vec(record).expect("record serializes"));
        log_bytes.push(b'\n');
    }
    let log = runs_dir.join(format!("{stem}.jsonl"));
    write_atomic(&log, &log_bytes)?;
    Ok(TrainArtifacts { checkpoint, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    pub report: PckReport,
}

/// Evaluates a checkpoint on a fully labeled dataset; writes `<out>.csv` and
/// `<out>.json` with identical numbers.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset_path: &Path,
    out: &Path,
    model: &ModelRef,
    task: &str,
    method: &str,
) -> Result<EvalReport, CliError> {
    if !dataset_path.exists() {
        return Err(CliError::MissingDataset(dataset_path.to_path_buf()));
    }
    let dataset = read_csid(dataset_path)?;
    let scale = model
        .resolve()
        .map_err(|m| CliError::Spec { path: checkpoint.to_path_buf(), message: m })?;
    let mut params = init_params(&scale, 0).map_err(TrainError::from)?;
    let records = read_apck(checkpoint)?;
    records_into_params(&records, &mut params)?;

    let indices: Vec<usize> = (0..dataset.len()).collect();
    let preds = predict_poses(&params, &dataset, &indices)?;
    let gt: Vec<Pose2D> = dataset.samples.iter().map(|(_, p)| p.clone()).collect();
    let report = pck(&preds, &gt, &PckConfig::default()).map_err(TrainError::from)?;

    let eval = EvalReport { task: task.to_string(), method: method.to_string(), report };
    let csv = format!("{}\n{}\n", report_csv_header(), report_csv_row(task, method, &eval.report));
    write_atomic(&out.with_extension("csv"), csv.as_bytes())?;
    let json = serde_json::to_vec_pretty(&eval).expect("report serializes");
    write_atomic(&out.with_extension("json"), &json)?;
    Ok(eval)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub spec_hash: String,
    pub seeds: Vec<u64>,
    pub raw: Vec<EvalReport>,
    pub averaged: Vec<EvalReport>,
}

/// Runs tasks × methods × seeds and writes raw plus seed-averaged tables.
pub fn cmd_matrix(
    spec_path: &Path,
    tasks: &[Task],
    methods: &[Method],
    seeds: &[u64],
    data_dir: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<MatrixReport, CliError> {
    let spec = load_spec(spec_path)?;
    let base = spec
        .resolved_train_config()
        .map_err(|m| CliError::Spec { path: spec_path.to_path_buf(), message: m })?;
    let data_dir = data_dir.unwrap_or(&spec.output.data_dir).to_path_buf();
    let runs_dir = out_dir.unwrap_or(&spec.output.runs_dir).to_path_buf();
    std::fs::create_dir_all(&runs_dir)?;

    let a_train = load_dataset(&data_dir, "a_train")?;
    let b_train = load_dataset(&data_dir, "b_train")?;
    let a_eval = load_dataset(&data_dir, "a_eval")?;
    let b_eval = load_dataset(&data_dir, "b_eval")?;
    let a_masked = mask_labels(&a_train, base.label_fraction, spec.scene_a.seed);
    let b_masked = mask_labels(&b_train, base.label_fraction, spec.scene_a.seed);

    let mut matrix_tasks = Vec::new();
    for task in tasks {
        let (source, target_train, target_eval) = match task {
            Task::A2B => (&a_train, &b_masked, &b_eval),
            Task::B2A => (&b_train, &a_masked, &a_eval),
        };
        matrix_tasks.push(MatrixTask {
            name: task.name().to_string(),
            source,
            target_train,
            target_eval,
        });
    }
    let result = run_experiment_matrix(&matrix_tasks, methods, seeds, &base)?;

    let raw: Vec<EvalReport> = result
        .raw
        .iter()
        .map(|c| EvalReport {
            task: format!("{}#s{}", c.task, c.seed),
            method: c.method.name().to_string(),
            report: c.report.clone(),
        })
        .collect();
    let averaged: Vec<EvalReport> = result
        .averaged
        .iter()
        .map(|row| EvalReport {
            task: row.task.clone(),
            method: row.method.name().to_string(),
            report: PckReport {
                thresholds: row.thresholds.clone(),
                fractions: row.fractions.clone(),
                per_joint: Vec::new(),
                frames: 0,
                excluded_zero_torso: 0,
            },
        })
        .collect();

    let mut csv = String::from(report_csv_header());
    csv.push('\n');
    for r in &averaged {
        csv.push_str(&report_csv_row(&r.task, &r.method, &r.report));
        csv.push('\n');
    }
    write_atomic(&runs_dir.join("matrix_avg.csv"), csv.as_bytes())?;
    let mut raw_csv = String::from(report_csv_header());
    raw_csv.push('\n');
    for r in &raw {
        raw_csv.push_str(&report_csv_row(&r.task, &r.method, &r.report));
        raw_csv.push('\n');
    }
    write_atomic(&runs_dir.join("matrix_raw.csv"), raw_csv.as_bytes())?;

    let report = MatrixReport { spec_hash: spec.hash(), seeds: seeds.to_vec(), raw, averaged };
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_atomic(&runs_dir.join("matrix.json"), &json)?;
    Ok(report)
}
