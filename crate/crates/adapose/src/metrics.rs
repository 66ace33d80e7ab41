//! PCK@a evaluation: a joint is correct at threshold `a` when its Euclidean
//! error is within a% of the ground-truth torso length (right shoulder to
//! left hip).

use serde::{Deserialize, Serialize};

use crate::synthcsi::{DomainDataset, Pose2D};

/// COCO-order default reference joints.
pub const COCO_RIGHT_SHOULDER: usize = 6;
pub const COCO_LEFT_HIP: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PckConfig {
    /// Thresholds in percent of torso length.
    pub thresholds: Vec<f64>,
    pub ref_joint_a: usize,
    pub ref_joint_b: usize,
}

impl Default for PckConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![10.0, 20.0, 30.0, 40.0, 50.0],
            ref_joint_a: COCO_RIGHT_SHOULDER,
            ref_joint_b: COCO_LEFT_HIP,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("pck precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    /// Thresholds in ascending order.
    pub thresholds: Vec<f64>,
    /// Fraction of correct keypoints per threshold, over all joints and
    /// included frames.
    pub fractions: Vec<f64>,
    /// Per-joint fraction at each threshold: `per_joint[t][j]`.
    pub per_joint: Vec<Vec<f64>>,
    /// Frames included in the statistics.
    pub frames: usize,
    /// Frames excluded for zero torso length.
    pub excluded_zero_torso: usize,
}

impl PckReport {
    pub fn fraction_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.fractions[i])
    }

    /// Weighted pool of two reports computed over disjoint frame sets.
    pub fn pooled(&self, other: &PckReport) -> PckReport {
        assert_eq!(self.thresholds, other.thresholds);
        let total = (self.frames + other.frames) as f64;
        let joints = self.per_joint.first().map_or(0, |v| v.len());
        let mut fractions = Vec::with_capacity(self.thresholds.len());
        let mut per_joint = Vec::with_capacity(self.thresholds.len());
        for t in 0..self.thresholds.len() {
            fractions.push(
                (self.fractions[t] * self.frames as f64 + other.fractions[t] * other.frames as f64)
                    / total,
            );
            per_joint.push(
                (0..joints)
                    .map(|j| {
                        (self.per_joint[t][j] * self.frames as f64
                            + other.per_joint[t][j] * other.frames as f64)
                            / total
                    })
                    .collect(),
            );
        }
        PckReport {
            thresholds: self.thresholds.clone(),
            fractions,
            per_joint,
            frames: self.frames + other.frames,
            excluded_zero_torso: self.excluded_zero_torso + other.excluded_zero_torso,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// PCK over paired prediction/ground-truth frames.
pub fn pck(pred: &[Pose2D], gt: &[Pose2D], config: &PckConfig) -> Result<PckReport, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Precondition(format!(
            "{} predictions vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(MetricError::Precondition("no frames".into()));
    }
    let joints = gt[0].joints.len();
    if config.ref_joint_a == config.ref_joint_b
        || config.ref_joint_a >= joints
        || config.ref_joint_b >= joints
    {
        return Err(MetricError::Precondition(format!(
            "reference joints {}/{} invalid for {joints} joints",
            config.ref_joint_a, config.ref_joint_b
        )));
    }
    if config.thresholds.is_empty() || config.thresholds.iter().any(|&t| !(t > 0.0)) {
        return Err(MetricError::Precondition("thresholds must be positive".into()));
    }

    let mut thresholds = config.thresholds.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));

    let mut correct = vec![vec![0usize; joints]; thresholds.len()];
    let mut included = 0usize;
    let mut excluded = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let torso = dist(g.joints[config.ref_joint_a], g.joints[config.ref_joint_b]);
        if !(torso > 0.0) {
            excluded += 1;
            continue;
        }
        included += 1;
        for j in 0..joints {
            let rel = dist(p.joints[j], g.joints[j]) / torso;
            for (ti, &a) in thresholds.iter().enumerate() {
                if rel <= a / 100.0 {
                    correct[ti][j] += 1;
                }
            }
        }
    }
    if included == 0 {
        return Err(MetricError::Precondition("all frames have zero torso length".into()));
    }
    let fractions: Vec<f64> = correct
        .iter()
        .map(|row| row.iter().sum::<usize>() as f64 / (joints * included) as f64)
        .collect();
    let per_joint: Vec<Vec<f64>> = correct
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / included as f64).collect())
        .collect();
    Ok(PckReport { thresholds, fractions, per_joint, frames: included, excluded_zero_torso: excluded })
}

/// Anything that maps CSI windows to poses; lets evaluation run against the
/// network or against test oracles.
pub trait PosePredictor {
    fn predict(&self, dataset: &DomainDataset, indices: &[usize]) -> Vec<Pose2D>;
}

/// Batched, gradient-free dataset evaluation.
pub fn evaluate_dataset<P: PosePredictor>(
    predictor: &P,
    dataset: &DomainDataset,
    config: &PckConfig,
    batch_size: usize,
) -> Result<PckReport, MetricError> {
    if !dataset.label_mask.iter().all(|&m| m) {
        return Err(MetricError::Precondition("dataset must be fully labeled".into()));
    }
    if dataset.samples.is_empty() {
        return Err(MetricError::Precondition("empty dataset".into()));
    }
    let mut preds = Vec::with_capacity(dataset.samples.len());
    let indices: Vec<usize> = (0..dataset.samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        preds.extend(predictor.predict(dataset, chunk));
    }
    let gt: Vec<Pose2D> = dataset.samples.iter().map(|(_, p)| p.clone()).collect();
    pck(&preds, &gt, config)
}

/// Writes a report row in the published table layout:
/// `task,method,pck@50,pck@40,pck@30,pck@20,pck@10`.
pub fn report_csv_header() -> &'static str {
    "task,method,pck@50,pck@40,pck@30,pck@20,pck@10"
}

pub fn report_csv_row(task: &str, method: &str, report: &PckReport) -> String {
    let mut cols = vec![task.to_string(), method.to_string()];
    for &t in &[50.0, 40.0, 30.0, 20.0, 10.0] {
        let v = report.fraction_at(t).unwrap_or(f64::NAN);
        cols.push(format!("{:.4}", v * 100.0));
    }
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(joints: &[[f64; 2]]) -> Pose2D {
        Pose2D { joints: joints.to_vec() }
    }

    fn base_frame() -> Pose2D {
        // 17 joints with torso length 100 between joints 6 and 11.
        let mut joints = vec![[0.0, 0.0]; 17];
        for (i, j) in joints.iter_mut().enumerate() {
            *j = [i as f64 * 7.0, i as f64 * 3.0];
        }
        joints[6] = [0.0, 0.0];
        joints[11] = [0.0, 100.0];
        frame(&joints)
    }

    #[test]
    fn exact_match_is_perfect() {
        let gt = vec![base_frame(), base_frame()];
        let report = pck(&gt, &gt, &PckConfig::default()).unwrap();
        assert!(report.fractions.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn single_displaced_joint_counts() {
        let gt = vec![base_frame()];
        let mut pred = gt.clone();
        pred[0].joints[0] = [gt[0].joints[0][0] + 25.0, gt[0].joints[0][1]];
        let report = pck(&pred, &gt, &PckConfig::default()).unwrap();
        assert!((report.fraction_at(20.0).unwrap() - 16.0 / 17.0).abs() < 1e-12);
        assert_eq!(report.fraction_at(30.0).unwrap(), 1.0);
    }

    #[test]
    fn fractions_monotone_in_threshold() {
        let gt = vec![base_frame(), base_frame(), base_frame()];
        let mut pred = gt.clone();
        for (fi, f) in pred.iter_mut().enumerate() {
            for j in f.joints.iter_mut() {
                j[0] += (fi as f64 + 1.0) * 11.0;
            }
        }
        let report = pck(&pred, &gt, &PckConfig::default()).unwrap();
        for w in report.fractions.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn zero_torso_frames_are_excluded_with_count() {
        let mut degenerate = base_frame();
        degenerate.joints[11] = degenerate.joints[6];
        let gt = vec![base_frame(), degenerate];
        let report = pck(&gt, &gt, &PckConfig::default()).unwrap();
        assert_eq!(report.frames, 1);
        assert_eq!(report.excluded_zero_torso, 1);
    }

    #[test]
    fn translation_and_scale_invariance() {
        let gt = vec![base_frame()];
        let mut pred = gt.clone();
        pred[0].joints[3][0] += 12.0;
        let base = pck(&pred, &gt, &PckConfig::default()).unwrap();
        let transform = |f: &Pose2D, s: f64, dx: f64, dy: f64| Pose2D {
            joints: f.joints.iter().map(|j| [j[0] * s + dx, j[1] * s + dy]).collect(),
        };
        let gt2 = vec![transform(&gt[0], 3.5, 40.0, -7.0)];
        let pred2 = vec![transform(&pred[0], 3.5, 40.0, -7.0)];
        let moved = pck(&pred2, &gt2, &PckConfig::default()).unwrap();
        assert_eq!(base.fractions, moved.fractions);
    }

    #[test]
    fn huge_threshold_is_always_one() {
        let gt = vec![base_frame()];
        let mut pred = gt.clone();
        for j in pred[0].joints.iter_mut() {
            j[0] += 1e6;
        }
        let cfg = PckConfig { thresholds: vec![1e9], ..Default::default() };
        let report = pck(&pred, &gt, &cfg).unwrap();
        assert_eq!(report.fractions, vec![1.0]);
    }

    #[test]
    fn counts_identity() {
        let gt = vec![base_frame(); 4];
        let mut pred = gt.clone();
        pred[2].joints[9] = [1e5, 1e5];
        let report = pck(&pred, &gt, &PckConfig::default()).unwrap();
        for (ti, &f) in report.fractions.iter().enumerate() {
            let count: f64 = report.per_joint[ti].iter().sum::<f64>() * report.frames as f64;
            assert!((f - count / (17.0 * report.frames as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut rand_frame = || Pose2D {
            joints: (0..17).map(|_| [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)]).collect(),
        };
        let gt: Vec<Pose2D> = (0..8).map(|_| rand_frame()).collect();
        let pred: Vec<Pose2D> = (0..8).map(|_| rand_frame()).collect();
        let cfg = PckConfig::default();
        let report = pck(&pred, &gt, &cfg).unwrap();
        for (ti, &a) in report.thresholds.iter().enumerate() {
            let mut correct = 0usize;
            let mut frames = 0usize;
            for (p, g) in pred.iter().zip(&gt) {
                let torso = dist(g.joints[6], g.joints[11]);
                if !(torso > 0.0) {
                    continue;
                }
                frames += 1;
                for j in 0..17 {
                    if dist(p.joints[j], g.joints[j]) / torso <= a / 100.0 {
                        correct += 1;
                    }
                }
            }
            assert_eq!(report.fractions[ti], correct as f64 / (17 * frames) as f64);
        }
    }

    #[test]
    fn pooled_halves_equal_whole() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let mut rand_frame = || {
            let mut f = base_frame();
            for j in f.joints.iter_mut() {
                j[0] += rng.random_range(-30.0..30.0);
            }
            f
        };
        let gt: Vec<Pose2D> = (0..6).map(|_| base_frame()).collect();
        let pred: Vec<Pose2D> = (0..6).map(|_| rand_frame()).collect();
        let cfg = PckConfig::default();
        let whole = pck(&pred, &gt, &cfg).unwrap();
        let a = pck(&pred[..3], &gt[..3], &cfg).unwrap();
        let b = pck(&pred[3..], &gt[3..], &cfg).unwrap();
        let pooled = a.pooled(&b);
        for (x, y) in whole.fractions.iter().zip(&pooled.fractions) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_row_layout() {
        let gt = vec![base_frame()];
        let report = pck(&gt, &gt, &PckConfig::default()).unwrap();
        assert_eq!(report_csv_header(), "task,method,pck@50,pck@40,pck@30,pck@20,pck@10");
        let row = report_csv_row("A2B", "adapose", &report);
        assert!(row.starts_with("A2B,adapose,100.0000,"));
    }
}
