//! Deterministic SGDM training loop with multistep learning-rate decay.
//! Three modes (source-only, weakly-supervised, unsupervised) share one code
//! path; methods differ only in which discrepancy terms carry weight. Every
//! random draw comes from a stream keyed by (seed, purpose, epoch), so runs
//! resume bit-exactly and methods that ignore a stream leave the others
//! untouched.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    find_record, params_to_records, read_apck, records_into_params, write_apck, CheckpointError,
    TensorRecord,
};
use crate::diffcore::{DiffTensor, Tape};
use crate::losses::{
    total_objective, AdaptationTerm, Batch, ConsistencyConfig, KernelSpec, LossBreakdown,
    LossError,
};
use crate::metrics::{pck, MetricError, PckConfig, PckReport, PosePredictor};
use crate::model::{
    forward, init_params, register_params, ModelError, ModelScale, PoseNetParams,
};
use crate::synthcsi::{DomainDataset, Pose2D};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    WeaklySupervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    MmdFeatureAlign,
    Adapose,
    AdaposeFeatOnly,
    AdaposeOutOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceOnly,
        Method::MmdFeatureAlign,
        Method::Adapose,
        Method::AdaposeFeatOnly,
        Method::AdaposeOutOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::MmdFeatureAlign => "mmd_feature_align",
            Method::Adapose => "adapose",
            Method::AdaposeFeatOnly => "adapose_feat_only",
            Method::AdaposeOutOnly => "adapose_out_only",
        }
    }

    pub fn by_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// The mode implied by this method and the labeled-target fraction.
    pub fn mode_for(self, label_fraction: f64) -> Mode {
        match self {
            Method::SourceOnly => Mode::SourceOnly,
            _ if label_fraction > 0.0 => Mode::WeaklySupervised,
            _ => Mode::Unsupervised,
        }
    }

    /// Effective adaptation term and consistency weights. Ablations differ
    /// from the full method only in zeroing one weight.
    pub fn adaptation(self, config: &TrainConfig) -> (AdaptationTerm, ConsistencyConfig) {
        let mut c = config.consistency.clone();
        let term = match self {
            Method::SourceOnly => AdaptationTerm::None,
            Method::MmdFeatureAlign => AdaptationTerm::FeatureMmd { lambda: config.mmd_lambda },
            Method::Adapose => AdaptationTerm::MappingConsistency,
            Method::AdaposeFeatOnly => {
                c.beta = 0.0;
                AdaptationTerm::MappingConsistency
            }
            Method::AdaposeOutOnly => {
                c.alpha = 0.0;
                AdaptationTerm::MappingConsistency
            }
        };
        (term, c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { milestones: vec![20, 30, 40], factor: 0.5, total_epochs: 50 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(TrainError::Config("milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_epochs) {
            return Err(TrainError::Config("milestones must lie before total_epochs".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(TrainError::Config("factor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: halved (by `factor`) at each milestone.
pub fn lr_at(epoch: usize, schedule: &Schedule, base_lr: f64) -> Result<f64, TrainError> {
    if epoch >= schedule.total_epochs {
        return Err(TrainError::Config(format!(
            "epoch {epoch} out of range 0..{}",
            schedule.total_epochs
        )));
    }
    let drops = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(base_lr * schedule.factor.powi(drops as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub seed: u64,
    pub consistency: ConsistencyConfig,
    pub kernel: KernelSpec,
    pub scale: ModelScale,
    /// Fraction of target samples whose labels training may use; informs the
    /// mode. The target dataset's mask must agree.
    pub label_fraction: f64,
    /// Evaluate PCK every this many epochs (and always on the last). 0
    /// disables intermediate evaluation.
    pub eval_every: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub base_lr: f64,
    /// Weight of the raw feature-MMD comparator method.
    pub mmd_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::SourceOnly,
            batch_size: 16,
            seed: 0,
            consistency: ConsistencyConfig::default(),
            kernel: KernelSpec::default(),
            scale: ModelScale::desk(),
            label_fraction: 0.0,
            eval_every: 0,
            schedule: Schedule::default(),
            momentum: 0.9,
            base_lr: 0.001,
            mmd_lambda: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn mode(&self) -> Mode {
        self.method.mode_for(self.label_fraction)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(TrainError::Config("label_fraction must be in [0, 1]".into()));
        }
        self.schedule.validate()?;
        self.consistency.validate()?;
        self.kernel.validate()?;
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(TrainError::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub base_lr: f64,
    /// Velocity per parameter, in `named_tensors` order.
    pub velocity: Vec<(String, DiffTensor)>,
}

impl OptimizerState {
    pub fn new(params: &PoseNetParams, momentum: f64, base_lr: f64) -> Self {
        let velocity = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                (name, DiffTensor::new(t.shape.clone(), vec![0.0; t.data.len()]).expect("shape"))
            })
            .collect();
        Self { momentum, base_lr, velocity }
    }
}

/// Heavy-ball update: v ← μ·v + g, p ← p − lr·v. Gradients are read from the
/// parameters' accumulated grad buffers; parameters and velocities are kept
/// f32-exact so checkpoints restore them bitwise.
pub fn sgdm_step(
    params: &mut PoseNetParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    let momentum = state.momentum;
    for ((name, tensor), (vname, vel)) in
        params.named_tensors_mut().into_iter().zip(state.velocity.iter_mut())
    {
        debug_assert_eq!(&name, vname);
        let grad = tensor.grad.take().unwrap_or_else(|| vec![0.0; tensor.data.len()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { what: format!("gradient of {name}"), epoch: 0, step: 0 });
        }
        for i in 0..tensor.data.len() {
            vel.data[i] = momentum * vel.data[i] + grad[i];
            tensor.data[i] -= lr * vel.data[i];
        }
        vel.quantize_f32();
        tensor.quantize_f32();
    }
    Ok(())
}

/// One JSON-lines record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Loss terms averaged over the epoch's steps.
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck: Option<PckReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PoseNetParams,
    pub opt: OptimizerState,
    pub next_epoch: usize,
}

pub struct TrainResult {
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

fn stream_rng(seed: u64, purpose: &str, epoch: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Tape-ready batch tensors: CSI as [N,C,H,W] and, when requested, poses as
/// [N,joints,2].
fn batch_tensors(
    dataset: &DomainDataset,
    indices: &[usize],
    with_pose: bool,
) -> (DiffTensor, Option<DiffTensor>) {
    let shape = dataset.window_shape();
    let mut csi = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
    let mut pose = Vec::new();
    for &i in indices {
        let (w, p) = &dataset.samples[i];
        csi.extend(w.data.iter().map(|&v| v as f64));
        if with_pose {
            for j in &p.joints {
                pose.extend_from_slice(j);
            }
        }
    }
    let n = indices.len();
    let csi = DiffTensor::new(vec![n, shape[0], shape[1], shape[2]], csi).expect("batch shape");
    let pose = with_pose.then(|| {
        let joints = dataset.samples[indices[0]].1.joints.len();
        DiffTensor::new(vec![n, joints, 2], pose).expect("pose shape")
    });
    (csi, pose)
}

/// Gradient-free forward pass over `indices`, returning predicted poses.
pub fn predict_poses(
    params: &PoseNetParams,
    dataset: &DomainDataset,
    indices: &[usize],
) -> Result<Vec<Pose2D>, TrainError> {
    let mut out = Vec::with_capacity(indices.len());
    let mut tape = Tape::new();
    for chunk in indices.chunks(32) {
        tape.clear();
        let leaves = register_params(&mut tape, params);
        let (csi, _) = batch_tensors(dataset, chunk, false);
        let x = tape.leaf(&csi);
        let (_, pred) = forward(&mut tape, x, params, &leaves)?;
        let values = tape.value(pred);
        let joints = tape.shape(pred)[1];
        for s in 0..chunk.len() {
            let base = s * joints * 2;
            out.push(Pose2D {
                joints: (0..joints)
                    .map(|j| [values[base + 2 * j], values[base + 2 * j + 1]])
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Adapter so the metrics module can evaluate the network.
pub struct NetPredictor<'a>(pub &'a PoseNetParams);

impl PosePredictor for NetPredictor<'_> {
    fn predict(&self, dataset: &DomainDataset, indices: &[usize]) -> Vec<Pose2D> {
        predict_poses(self.0, dataset, indices).expect("shape-compatible dataset")
    }
}

fn eval_pck(params: &PoseNetParams, eval_set: &DomainDataset) -> Result<PckReport, TrainError> {
    let indices: Vec<usize> = (0..eval_set.len()).collect();
    let preds = predict_poses(params, eval_set, &indices)?;
    let gt: Vec<Pose2D> = eval_set.samples.iter().map(|(_, p)| p.clone()).collect();
    Ok(pck(&preds, &gt, &PckConfig::default())?)
}

fn validate_datasets(
    config: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<(), TrainError> {
    if source.is_empty() {
        return Err(TrainError::Config("source dataset is empty".into()));
    }
    if !source.label_mask.iter().all(|&m| m) {
        return Err(TrainError::Config("source dataset must be fully labeled".into()));
    }
    let labeled = target.labeled_indices().len();
    match config.mode() {
        Mode::SourceOnly => {}
        Mode::Unsupervised => {
            if labeled != 0 {
                return Err(TrainError::Config(format!(
                    "unsupervised mode, but target has {labeled} labeled samples"
                )));
            }
            if target.is_empty() {
                return Err(TrainError::Config("target dataset is empty".into()));
            }
        }
        Mode::WeaklySupervised => {
            if labeled == 0 {
                return Err(TrainError::Config(
                    "weakly-supervised mode needs at least one labeled target sample".into(),
                ));
            }
            if target.is_empty() {
                return Err(TrainError::Config("target dataset is empty".into()));
            }
        }
    }
    let shape = source.window_shape();
    if shape != [config.scale.in_channels, config.scale.in_height, config.scale.in_width] {
        return Err(TrainError::Config(format!(
            "source window shape {shape:?} does not match model input"
        )));
    }
    Ok(())
}

/// Runs epochs `[resume.next_epoch, stop)` where `stop` is `stop_after_epoch`
/// capped by the schedule. With `resume: None` training starts from a fresh
/// seed-determined initialization.
pub fn train(
    config: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    eval_set: Option<&DomainDataset>,
    resume: Option<TrainState>,
    stop_after_epoch: Option<usize>,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    validate_datasets(config, source, target)?;

    let (mut params, mut opt, start_epoch) = match resume {
        Some(s) => (s.params, s.opt, s.next_epoch),
        None => {
            let params = init_params(&config.scale, config.seed)?;
            let opt = OptimizerState::new(&params, config.momentum, config.base_lr);
            (params, opt, 0)
        }
    };
    let total = config.schedule.total_epochs;
    let stop = stop_after_epoch.unwrap_or(total).min(total);
    let (adaptation, consistency) = config.method.adaptation(config);
    let mode = config.mode();

    // Small datasets shrink the batch rather than overrunning the epoch.
    let batch_size = config.batch_size.min(source.len());
    let steps_per_epoch = (source.len() / batch_size).max(1);
    let labeled_pool: Vec<usize> = target.labeled_indices();
    let unlabeled_pool: Vec<usize> = {
        let unlabeled: Vec<usize> =
            (0..target.len()).filter(|&i| !target.label_mask[i]).collect();
        if unlabeled.is_empty() { (0..target.len()).collect() } else { unlabeled }
    };

    let mut log = Vec::new();
    for epoch in start_epoch..stop {
        let lr = lr_at(epoch, &config.schedule, config.base_lr)?;

        let mut src_order: Vec<usize> = (0..source.len()).collect();
        src_order.shuffle(&mut stream_rng(config.seed, "source", epoch));
        let mut tul_order = unlabeled_pool.clone();
        tul_order.shuffle(&mut stream_rng(config.seed, "target_unlabeled", epoch));
        let mut tla_order = labeled_pool.clone();
        tla_order.shuffle(&mut stream_rng(config.seed, "target_labeled", epoch));

        let mut sum = LossBreakdown::default();
        let mut tape = Tape::new();
        for step in 0..steps_per_epoch {
            let src_idx = &src_order[step * batch_size..(step + 1) * batch_size];
            let (src_csi, src_pose) = batch_tensors(source, src_idx, true);
            let src_batch = Batch { csi: &src_csi, pose: src_pose.as_ref() };

            // Target batches cycle with wraparound over the epoch's order.
            let pick = |order: &[usize], count: usize| -> Vec<usize> {
                (0..count).map(|i| order[(step * count + i) % order.len()]).collect()
            };
            let needs_unlabeled = adaptation != AdaptationTerm::None;
            let tul = needs_unlabeled.then(|| {
                batch_tensors(target, &pick(&tul_order, batch_size), false)
            });
            let tul_batch = tul.as_ref().map(|(csi, _)| Batch { csi, pose: None });

            let needs_labeled = mode == Mode::WeaklySupervised && !tla_order.is_empty();
            let tla = needs_labeled.then(|| {
                let count = batch_size.min(tla_order.len());
                batch_tensors(target, &pick(&tla_order, count), true)
            });
            let tla_batch =
                tla.as_ref().map(|(csi, pose)| Batch { csi, pose: pose.as_ref() });

            tape.clear();
            let leaves = register_params(&mut tape, &params);
            let objective = total_objective(
                &mut tape,
                &src_batch,
                tla_batch.as_ref(),
                tul_batch.as_ref(),
                &params,
                &leaves,
                &consistency,
                &config.kernel,
                adaptation,
            )
            .map_err(|e| match e {
                LossError::NonFinite(what) => TrainError::NonFinite { what, epoch, step },
                other => TrainError::Loss(other),
            })?;
            if !objective.breakdown.total.is_finite() {
                return Err(TrainError::NonFinite { what: "loss".into(), epoch, step });
            }
            tape.backward(objective.total);
            for ((_, tensor), (_, id)) in
                params.named_tensors_mut().into_iter().zip(leaves.ids.iter())
            {
                tensor.grad = None;
                tape.accumulate_leaf_grad(*id, tensor);
            }
            sgdm_step(&mut params, &mut opt, lr).map_err(|e| match e {
                TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, epoch, step },
                other => other,
            })?;

            let b = &objective.breakdown;
            sum.reg_source += b.reg_source;
            sum.reg_target_labeled += b.reg_target_labeled;
            sum.d_input += b.d_input;
            sum.d_feature += b.d_feature;
            sum.d_output += b.d_output;
            sum.ratio_feat_in += b.ratio_feat_in;
            sum.ratio_out_in += b.ratio_out_in;
            sum.l_feat_in += b.l_feat_in;
            sum.l_out_in += b.l_out_in;
            sum.total += b.total;
        }

        let n = steps_per_epoch as f64;
        let breakdown = LossBreakdown {
            reg_source: sum.reg_source / n,
            reg_target_labeled: sum.reg_target_labeled / n,
            d_input: sum.d_input / n,
            d_feature: sum.d_feature / n,
            d_output: sum.d_output / n,
            ratio_feat_in: sum.ratio_feat_in / n,
            ratio_out_in: sum.ratio_out_in / n,
            l_feat_in: sum.l_feat_in / n,
            l_out_in: sum.l_out_in / n,
            total: sum.total / n,
        };

        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let last = epoch + 1 == total;
        let pck_snapshot = match eval_set {
            Some(es) if due || last => Some(eval_pck(&params, es)?),
            _ => None,
        };

        log.push(EpochRecord {
            epoch,
            lr,
            alpha: consistency.alpha,
            beta: consistency.beta,
            breakdown,
            pck: pck_snapshot,
        });
    }

    Ok(TrainResult { state: TrainState { params, opt, next_epoch: stop }, log })
}

// ---------------------------------------------------------------------------
// Checkpointing of full training state
// ---------------------------------------------------------------------------

pub fn save_state(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    let mut records = params_to_records(&state.params);
    for (name, vel) in &state.opt.velocity {
        records.push(TensorRecord::from_f64(&format!("vel.{name}"), &vel.shape, &vel.data));
    }
    records.push(TensorRecord::scalar("meta.epoch", state.next_epoch as f64));
    write_apck(path, &records)?;
    Ok(())
}

pub fn load_state(path: &Path, config: &TrainConfig) -> Result<TrainState, TrainError> {
    let records = read_apck(path)?;
    let mut params = init_params(&config.scale, 0)?;
    records_into_params(&records, &mut params)?;
    let mut opt = OptimizerState::new(&params, config.momentum, config.base_lr);
    for (name, vel) in opt.velocity.iter_mut() {
        let record = find_record(&records, &format!("vel.{name}")).ok_or_else(|| {
            CheckpointError::Mismatch(format!("missing velocity for {name}"))
        })?;
        if record.shape != vel.shape {
            return Err(CheckpointError::Mismatch(format!(
                "velocity {name}: shape {:?} vs {:?}",
                record.shape, vel.shape
            ))
            .into());
        }
        vel.data = record.as_f64();
    }
    let epoch = find_record(&records, "meta.epoch")
        .ok_or_else(|| CheckpointError::Mismatch("missing meta.epoch".into()))?
        .data[0] as usize;
    Ok(TrainState { params, opt, next_epoch: epoch })
}

// ---------------------------------------------------------------------------
// Experiment matrix
// ---------------------------------------------------------------------------

/// One adaptation task: train on `source`, adapt to `target_train` (label
/// mask already applied), evaluate on the fully labeled `target_eval`.
pub struct MatrixTask<'a> {
    pub name: String,
    pub source: &'a DomainDataset,
    pub target_train: &'a DomainDataset,
    pub target_eval: &'a DomainDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    pub report: PckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub task: String,
    pub method: Method,
    /// Seed-averaged PCK fractions, index-aligned with `thresholds`.
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub raw: Vec<MatrixCell>,
    pub averaged: Vec<MatrixRow>,
}

/// Worker-thread cap: `ADAPOSE_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("ADAPOSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Trains every (task, method, seed) cell and averages PCK across seeds.
/// Cells are independent and deterministic, so any execution order yields
/// identical results.
pub fn run_experiment_matrix(
    tasks: &[MatrixTask],
    methods: &[Method],
    seeds: &[u64],
    base: &TrainConfig,
) -> Result<MatrixResult, TrainError> {
    let mut jobs = Vec::new();
    for task in tasks {
        for &method in methods {
            for &seed in seeds {
                jobs.push((task, method, seed));
            }
        }
    }

    let run_cell = |&(task, method, seed): &(&MatrixTask, Method, u64)| -> Result<MatrixCell, TrainError> {
        let mut config = base.clone();
        config.method = method;
        config.seed = seed;
        if method == Method::SourceOnly || task.target_train.labeled_indices().is_empty() {
            config.label_fraction = 0.0;
        }
        let result =
            train(&config, task.source, task.target_train, None, None, None)?;
        let report = eval_pck(&result.state.params, task.target_eval)?;
        Ok(MatrixCell { task: task.name.clone(), method, seed, report })
    };

    let workers = worker_threads().min(jobs.len().max(1));
    let raw: Vec<MatrixCell> = if workers <= 1 {
        jobs.iter().map(run_cell).collect::<Result<_, _>>()?
    } else {
        let mut outputs: Vec<Option<Result<MatrixCell, TrainError>>> =
            (0..jobs.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for _ in 0..workers {
                let jobs = &jobs;
                let next = &next;
                handles.push(scope.spawn(move || {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= jobs.len() {
                            break;
                        }
                        mine.push((i, run_cell(&jobs[i])));
                    }
                    mine
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("worker panicked") {
                    outputs[i] = Some(r);
                }
            }
        });
        outputs
            .into_iter()
            .map(|o| o.expect("every job ran"))
            .collect::<Result<_, _>>()?
    };

    let mut averaged = Vec::new();
    for task in tasks {
        for &method in methods {
            let cells: Vec<&MatrixCell> = raw
                .iter()
                .filter(|c| c.task == task.name && c.method == method)
                .collect();
            if cells.is_empty() {
                continue;
            }
            let thresholds = cells[0].report.thresholds.clone();
            let fractions = (0..thresholds.len())
                .map(|t| {
                    cells.iter().map(|c| c.report.fractions[t]).sum::<f64>() / cells.len() as f64
                })
                .collect();
            averaged.push(MatrixRow { task: task.name.clone(), method, thresholds, fractions });
        }
    }
    Ok(MatrixResult { raw, averaged })
}
