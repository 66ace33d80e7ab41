//! The complete training objective: pose regression losses, biased squared
//! MMD between domains at the input, feature, and output levels, the
//! consistency ratios of those discrepancies, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, DiffTensor, Tape, TensorId};
use crate::model::{forward, ModelError, ParamLeaves, PoseNetParams};

pub const DEFAULT_MEDIAN_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Kernel choice for the discrepancy terms. The RBF bandwidth list can be
/// pinned or derived from the median pairwise squared distance of the merged
/// batch, scaled by a list of factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    RbfMulti(BandwidthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthSpec {
    Fixed(Vec<f64>),
    MedianTimes(Vec<f64>),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::RbfMulti(BandwidthSpec::MedianTimes(DEFAULT_MEDIAN_FACTORS.to_vec()))
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::RbfMulti(bw) => {
                let list = match bw {
                    BandwidthSpec::Fixed(v) | BandwidthSpec::MedianTimes(v) => v,
                };
                if list.is_empty() || list.iter().any(|&b| !(b > 0.0)) {
                    return Err(LossError::Precondition(
                        "rbf bandwidths must be a nonempty list of positive reals".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Kernel with all bandwidths resolved to concrete values.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedKernel {
    Linear,
    Rbf(Vec<f64>),
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// Target for D_feature / D_input.
    pub r1: f64,
    /// Target for D_output / D_input.
    pub r2: f64,
    /// Weight of the feature/input consistency loss.
    pub alpha: f64,
    /// Weight of the output/input consistency loss.
    pub beta: f64,
    /// Guard added to the D_input denominator.
    pub epsilon: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { r1: 1.0, r2: 1.0, alpha: 1.0, beta: 1.0, epsilon: 1e-6 }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.r1 > 0.0) || !(self.r2 > 0.0) || !(self.epsilon > 0.0) {
            return Err(LossError::Precondition("r1, r2, epsilon must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(LossError::Precondition("alpha and beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Every scalar produced by one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg_source: f64,
    pub reg_target_labeled: f64,
    pub d_input: f64,
    pub d_feature: f64,
    pub d_output: f64,
    pub ratio_feat_in: f64,
    pub ratio_out_in: f64,
    pub l_feat_in: f64,
    pub l_out_in: f64,
    pub total: f64,
}

/// Mean over samples of the squared L2 error summed over all coordinates.
pub fn mse_pose(tape: &mut Tape, pred: TensorId, gt: TensorId) -> Result<TensorId, LossError> {
    let ps = tape.shape(pred).to_vec();
    let gs = tape.shape(gt).to_vec();
    if ps != gs || ps.is_empty() {
        return Err(DiffError::ShapeMismatch { op: "mse_pose", lhs: ps, rhs: gs }.into());
    }
    let n = ps[0] as f64;
    let diff = tape.sub(pred, gt)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.mul_scalar(total, 1.0 / n))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of pairwise squared distances over the merged point set
/// (off-diagonal pairs). Returns 1.0 if the median degenerates to zero.
pub fn median_sq_dist(xs: &DiffTensor, xt: &DiffTensor) -> f64 {
    let d = xs.shape[1];
    let rows: Vec<&[f64]> = xs
        .data
        .chunks(d)
        .chain(xt.data.chunks(d))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let s: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            dists.push(s);
        }
    }
    let m = median(dists);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Resolves a kernel spec against a concrete pair of point sets. The median
/// heuristic is evaluated on forward values and treated as a constant.
pub fn resolve_kernel(
    spec: &KernelSpec,
    xs: &DiffTensor,
    xt: &DiffTensor,
) -> Result<ResolvedKernel, LossError> {
    spec.validate()?;
    Ok(match spec {
        KernelSpec::Linear => ResolvedKernel::Linear,
        KernelSpec::RbfMulti(BandwidthSpec::Fixed(bw)) => ResolvedKernel::Rbf(bw.clone()),
        KernelSpec::RbfMulti(BandwidthSpec::MedianTimes(factors)) => {
            let m = median_sq_dist(xs, xt);
            ResolvedKernel::Rbf(factors.iter().map(|&f| f * m).collect())
        }
    })
}

fn check_point_set(name: &str, t: &DiffTensor) -> Result<(), LossError> {
    if t.shape.len() != 2 || t.shape[0] == 0 {
        return Err(LossError::Precondition(format!(
            "{name} must be a nonempty 2-D point set, got shape {:?}",
            t.shape
        )));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite(name.to_string()));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD on a tape: mean(K_ss) − 2·mean(K_st) +
/// mean(K_tt), summed over bandwidths for the multi-RBF kernel.
pub fn mmd2_tape(
    tape: &mut Tape,
    xs: TensorId,
    xt: TensorId,
    kernel: &ResolvedKernel,
) -> Result<TensorId, LossError> {
    let ds = tape.shape(xs).to_vec();
    let dt = tape.shape(xt).to_vec();
    if ds.len() != 2 || dt.len() != 2 || ds[1] != dt[1] {
        return Err(DiffError::ShapeMismatch { op: "mmd2", lhs: ds, rhs: dt }.into());
    }
    match kernel {
        ResolvedKernel::Linear => {
            let kss = tape.matmul_trans_b(xs, xs)?;
            let kst = tape.matmul_trans_b(xs, xt)?;
            let ktt = tape.matmul_trans_b(xt, xt)?;
            let mss = tape.mean(kss);
            let mst = tape.mean(kst);
            let mtt = tape.mean(ktt);
            let cross = tape.mul_scalar(mst, -2.0);
            let a = tape.add(mss, cross)?;
            Ok(tape.add(a, mtt)?)
        }
        ResolvedKernel::Rbf(bandwidths) => {
            let dss = tape.pairwise_sq_dist(xs, xs)?;
            let dst = tape.pairwise_sq_dist(xs, xt)?;
            let dtt = tape.pairwise_sq_dist(xt, xt)?;
            let mut acc: Option<TensorId> = None;
            for &bw in bandwidths {
                let ess = tape.mul_scalar(dss, -1.0 / bw);
                let est = tape.mul_scalar(dst, -1.0 / bw);
                let ett = tape.mul_scalar(dtt, -1.0 / bw);
                let kss = tape.exp(ess);
                let kst = tape.exp(est);
                let ktt = tape.exp(ett);
                let mss = tape.mean(kss);
                let mst = tape.mean(kst);
                let mtt = tape.mean(ktt);
                let cross = tape.mul_scalar(mst, -2.0);
                let a = tape.add(mss, cross)?;
                let term = tape.add(a, mtt)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("bandwidth list validated nonempty"))
        }
    }
}

/// Plain-value biased squared MMD between two point sets.
pub fn mmd2(xs: &DiffTensor, xt: &DiffTensor, spec: &KernelSpec) -> Result<f64, LossError> {
    check_point_set("xs", xs)?;
    check_point_set("xt", xt)?;
    if xs.shape[1] != xt.shape[1] {
        return Err(DiffError::ShapeMismatch {
            op: "mmd2",
            lhs: xs.shape.clone(),
            rhs: xt.shape.clone(),
        }
        .into());
    }
    let kernel = resolve_kernel(spec, xs, xt)?;
    let mut tape = Tape::new();
    let a = tape.leaf(xs);
    let b = tape.leaf(xt);
    let out = mmd2_tape(&mut tape, a, b, &kernel)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(LossError::NonFinite("mmd2".into()));
    }
    Ok(v)
}

/// Eq.-level consistency ratios with the denominator treated as a constant.
pub fn consistency_ratios(
    d_feature: f64,
    d_output: f64,
    d_input: f64,
    epsilon: f64,
) -> (f64, f64) {
    let denom = d_input + epsilon;
    (d_feature / denom, d_output / denom)
}

/// Squared-L2 distance of a ratio to its restrictive scalar.
pub fn mapping_consistency_loss(
    ratio_feat_in: f64,
    ratio_out_in: f64,
    config: &ConsistencyConfig,
) -> (f64, f64) {
    let lf = (ratio_feat_in - config.r1) * (ratio_feat_in - config.r1);
    let lo = (ratio_out_in - config.r2) * (ratio_out_in - config.r2);
    (lf, lo)
}

/// A labeled or unlabeled batch already flattened to tape-ready tensors.
/// CSI is [N,C,H,W]; poses are [N,joints,2].
pub struct Batch<'a> {
    pub csi: &'a DiffTensor,
    pub pose: Option<&'a DiffTensor>,
}

/// How the adaptation terms are composed on top of the regression losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdaptationTerm {
    /// No discrepancy terms at all.
    None,
    /// Comparator: raw feature-level MMD added with weight `lambda`.
    FeatureMmd { lambda: f64 },
    /// The mapping-consistency objective with weights from the config.
    MappingConsistency,
}

/// Output of one objective evaluation: the differentiable total plus the
/// scalar breakdown of every term.
pub struct Objective {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Builds the full objective on `tape`:
/// total = L_Reg^S + L_Reg^T̃ + α·L_feat/in + β·L_out/in.
///
/// D_input is computed on flattened raw CSI and gradient-stopped; D_feature
/// and D_output are differentiable through the network. Equal-size source
/// and target sub-batches are expected.
pub fn total_objective(
    tape: &mut Tape,
    source: &Batch,
    target_labeled: Option<&Batch>,
    target_unlabeled: Option<&Batch>,
    params: &PoseNetParams,
    leaves: &ParamLeaves,
    config: &ConsistencyConfig,
    kernel: &KernelSpec,
    adaptation: AdaptationTerm,
) -> Result<Objective, LossError> {
    config.validate()?;
    let mut breakdown = LossBreakdown::default();

    let src_pose = source
        .pose
        .ok_or_else(|| LossError::Precondition("source batch must be labeled".into()))?;
    let xs = tape.leaf(source.csi);
    let ys = tape.leaf(src_pose);
    let (fs, ps) = forward(tape, xs, params, leaves)?;
    let reg_s = mse_pose(tape, ps, ys)?;
    breakdown.reg_source = tape.scalar_value(reg_s);
    let mut total = reg_s;

    if let Some(tl) = target_labeled {
        let pose = tl
            .pose
            .ok_or_else(|| LossError::Precondition("target labeled batch has no labels".into()))?;
        let xt = tape.leaf(tl.csi);
        let yt = tape.leaf(pose);
        let (_, pt) = forward(tape, xt, params, leaves)?;
        let reg_t = mse_pose(tape, pt, yt)?;
        breakdown.reg_target_labeled = tape.scalar_value(reg_t);
        total = tape.add(total, reg_t)?;
    }

    if adaptation != AdaptationTerm::None {
        let tu = target_unlabeled.ok_or_else(|| {
            LossError::Precondition("adaptation requires an unlabeled target batch".into())
        })?;
        let xt = tape.leaf(tu.csi);
        let (ft, pt) = forward(tape, xt, params, leaves)?;

        let fs_flat = tape.flatten_rows(fs)?;
        let ft_flat = tape.flatten_rows(ft)?;
        let feat_s = value_tensor(tape, fs_flat);
        let feat_t = value_tensor(tape, ft_flat);
        let k_feat = resolve_kernel(kernel, &feat_s, &feat_t)?;
        let d_feature_id = mmd2_tape(tape, fs_flat, ft_flat, &k_feat)?;
        breakdown.d_feature = tape.scalar_value(d_feature_id);

        match adaptation {
            AdaptationTerm::FeatureMmd { lambda } => {
                let weighted = tape.mul_scalar(d_feature_id, lambda);
                total = tape.add(total, weighted)?;
            }
            AdaptationTerm::MappingConsistency => {
                // Raw inputs carry no parameter dependence; D_input is a constant.
                let xs_flat = value_tensor_from(tape, xs);
                let xt_flat = value_tensor_from(tape, xt);
                breakdown.d_input = mmd2(&xs_flat, &xt_flat, kernel)?;

                let ps_flat = tape.flatten_rows(ps)?;
                let pt_flat = tape.flatten_rows(pt)?;
                let out_s = value_tensor(tape, ps_flat);
                let out_t = value_tensor(tape, pt_flat);
                let k_out = resolve_kernel(kernel, &out_s, &out_t)?;
                let d_output_id = mmd2_tape(tape, ps_flat, pt_flat, &k_out)?;
                breakdown.d_output = tape.scalar_value(d_output_id);

                let denom = breakdown.d_input + config.epsilon;
                let ratio_feat = tape.mul_scalar(d_feature_id, 1.0 / denom);
                let ratio_out = tape.mul_scalar(d_output_id, 1.0 / denom);
                breakdown.ratio_feat_in = tape.scalar_value(ratio_feat);
                breakdown.ratio_out_in = tape.scalar_value(ratio_out);

                let df = tape.add_scalar(ratio_feat, -config.r1);
                let l_feat = tape.square(df);
                let d_out = tape.add_scalar(ratio_out, -config.r2);
                let l_out = tape.square(d_out);
                breakdown.l_feat_in = tape.scalar_value(l_feat);
                breakdown.l_out_in = tape.scalar_value(l_out);

                let wf = tape.mul_scalar(l_feat, config.alpha);
                let wo = tape.mul_scalar(l_out, config.beta);
                total = tape.add(total, wf)?;
                total = tape.add(total, wo)?;
            }
            AdaptationTerm::None => unreachable!(),
        }
    }

    breakdown.total = tape.scalar_value(total);
    if !breakdown.total.is_finite() {
        return Err(LossError::NonFinite("total objective".into()));
    }
    Ok(Objective { total, breakdown })
}

fn value_tensor(tape: &Tape, id: TensorId) -> DiffTensor {
    DiffTensor {
        shape: tape.shape(id).to_vec(),
        data: tape.value(id).to_vec(),
        requires_grad: false,
        grad: None,
    }
}

fn value_tensor_from(tape: &Tape, id: TensorId) -> DiffTensor {
    let shape = tape.shape(id).to_vec();
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    DiffTensor {
        shape: vec![n, rest],
        data: tape.value(id).to_vec(),
        requires_grad: false,
        grad: None,
    }
}
