//! The pose regression network: a convolutional feature extractor E(·) whose
//! output feature map feeds both the regressor R(·) (bottleneck conv, global
//! average pool, linear head) and the feature-level discrepancy terms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, DiffTensor, Tape, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: (usize, usize),
}

/// Network sizing. The `paper` preset reproduces the published feature shape
/// (512×17×17 from a 3×114×32 window); the `desk` preset is small enough for
/// exhaustive gradient checking and minute-scale experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelScale {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub stem_channels: usize,
    pub stem_kernel: (usize, usize),
    pub stem_stride: (usize, usize),
    pub stem_pad: (usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub bottleneck_channels: usize,
    pub joint_count: usize,
}

impl ModelScale {
    /// 3×114×32 input, 512×17×17 feature map.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            in_height: 114,
            in_width: 32,
            stem_channels: 64,
            stem_kernel: (3, 2),
            stem_stride: (7, 2),
            stem_pad: (1, 1),
            blocks: vec![
                BlockSpec { channels: 128, stride: (1, 1) },
                BlockSpec { channels: 512, stride: (1, 1) },
            ],
            bottleneck_channels: 256,
            joint_count: 17,
        }
    }

    /// 3×30×32 input, 32×4×4 feature map.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            in_height: 30,
            in_width: 32,
            stem_channels: 16,
            stem_kernel: (3, 3),
            stem_stride: (2, 2),
            stem_pad: (1, 1),
            blocks: vec![
                BlockSpec { channels: 32, stride: (2, 2) },
                BlockSpec { channels: 32, stride: (2, 2) },
            ],
            bottleneck_channels: 32,
            joint_count: 17,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = self.in_channels > 0
            && self.in_height > 0
            && self.in_width > 0
            && self.stem_channels > 0
            && self.bottleneck_channels > 0
            && self.blocks.iter().all(|b| b.channels > 0 && b.stride.0 > 0 && b.stride.1 > 0);
        if !positive {
            return Err(ModelError::Config("all extents must be positive".into()));
        }
        if self.joint_count < 2 {
            return Err(ModelError::Config("joint_count must be at least 2".into()));
        }
        let (_, h, w) = self.feature_shape();
        if h == 0 || w == 0 {
            return Err(ModelError::Config("spatial extent collapses to zero".into()));
        }
        Ok(())
    }

    fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (extent + 2 * pad).saturating_sub(kernel) / stride + 1
    }

    /// (channels, height, width) of the extracted feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let mut h = Self::conv_out(self.in_height, self.stem_kernel.0, self.stem_stride.0, self.stem_pad.0);
        let mut w = Self::conv_out(self.in_width, self.stem_kernel.1, self.stem_stride.1, self.stem_pad.1);
        let mut c = self.stem_channels;
        for b in &self.blocks {
            h = Self::conv_out(h, 3, b.stride.0, 1);
            w = Self::conv_out(w, 3, b.stride.1, 1);
            c = b.channels;
        }
        (c, h, w)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.joint_count
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: DiffTensor,
    pub bias: DiffTensor,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    /// 1×1 projection on the shortcut when channels or stride differ.
    pub projection: Option<ConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetParams {
    pub scale: ModelScale,
    pub stem: ConvParams,
    pub blocks: Vec<ResidualBlockParams>,
    pub bottleneck: ConvParams,
    pub head_weight: DiffTensor,
    pub head_bias: DiffTensor,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> DiffTensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    let mut t = DiffTensor::new(shape, data).expect("shape/data agree");
    t.quantize_f32();
    t
}

fn conv_init(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> ConvParams {
    let fan_in = in_ch * kernel.0 * kernel.1;
    ConvParams {
        weight: kaiming_uniform(rng, vec![out_ch, in_ch, kernel.0, kernel.1], fan_in),
        bias: DiffTensor::zeros(&[out_ch]),
        stride,
        pad,
    }
}

/// Kaiming-uniform initialization, fully determined by `seed`.
pub fn init_params(scale: &ModelScale, seed: u64) -> Result<PoseNetParams, ModelError> {
    scale.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = conv_init(
        &mut rng,
        scale.stem_channels,
        scale.in_channels,
        scale.stem_kernel,
        scale.stem_stride,
        scale.stem_pad,
    );
    let mut in_ch = scale.stem_channels;
    let mut blocks = Vec::with_capacity(scale.blocks.len());
    for b in &scale.blocks {
        let conv1 = conv_init(&mut rng, b.channels, in_ch, (3, 3), b.stride, (1, 1));
        let conv2 = conv_init(&mut rng, b.channels, b.channels, (3, 3), (1, 1), (1, 1));
        let projection = if in_ch != b.channels || b.stride != (1, 1) {
            Some(conv_init(&mut rng, b.channels, in_ch, (1, 1), b.stride, (0, 0)))
        } else {
            None
        };
        blocks.push(ResidualBlockParams { conv1, conv2, projection });
        in_ch = b.channels;
    }
    let bottleneck = conv_init(&mut rng, scale.bottleneck_channels, in_ch, (1, 1), (1, 1), (0, 0));
    let fan_in = scale.bottleneck_channels;
    let head_weight = kaiming_uniform(&mut rng, vec![fan_in, scale.output_dim()], fan_in);
    let head_bias = DiffTensor::zeros(&[scale.output_dim()]);
    Ok(PoseNetParams { scale: scale.clone(), stem, blocks, bottleneck, head_weight, head_bias })
}

impl PoseNetParams {
    pub fn named_tensors(&self) -> Vec<(String, &DiffTensor)> {
        let mut out: Vec<(String, &DiffTensor)> = vec![
            ("stem.weight".into(), &self.stem.weight),
            ("stem.bias".into(), &self.stem.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv1.weight"), &b.conv1.weight));
            out.push((format!("block{i}.conv1.bias"), &b.conv1.bias));
            out.push((format!("block{i}.conv2.weight"), &b.conv2.weight));
            out.push((format!("block{i}.conv2.bias"), &b.conv2.bias));
            if let Some(p) = &b.projection {
                out.push((format!("block{i}.proj.weight"), &p.weight));
                out.push((format!("block{i}.proj.bias"), &p.bias));
            }
        }
        out.push(("bottleneck.weight".into(), &self.bottleneck.weight));
        out.push(("bottleneck.bias".into(), &self.bottleneck.bias));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut DiffTensor)> {
        let mut out: Vec<(String, &mut DiffTensor)> = vec![
            ("stem.weight".into(), &mut self.stem.weight),
            ("stem.bias".into(), &mut self.stem.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv1.weight"), &mut b.conv1.weight));
            out.push((format!("block{i}.conv1.bias"), &mut b.conv1.bias));
            out.push((format!("block{i}.conv2.weight"), &mut b.conv2.weight));
            out.push((format!("block{i}.conv2.bias"), &mut b.conv2.bias));
            if let Some(p) = &mut b.projection {
                out.push((format!("block{i}.proj.weight"), &mut p.weight));
                out.push((format!("block{i}.proj.bias"), &mut p.bias));
            }
        }
        out.push(("bottleneck.weight".into(), &mut self.bottleneck.weight));
        out.push(("bottleneck.bias".into(), &mut self.bottleneck.bias));
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }
}

/// Leaf ids of every parameter on a tape, in `named_tensors` order.
pub struct ParamLeaves {
    pub ids: Vec<(String, TensorId)>,
}

pub fn register_params(tape: &mut Tape, params: &PoseNetParams) -> ParamLeaves {
    let ids = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, tape.leaf_with_grad(t)))
        .collect();
    ParamLeaves { ids }
}

impl ParamLeaves {
    fn get(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .expect("parameter registered")
    }
}

fn conv_forward(
    tape: &mut Tape,
    x: TensorId,
    leaves: &ParamLeaves,
    prefix: &str,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorId, DiffError> {
    let w = leaves.get(&format!("{prefix}.weight"));
    let b = leaves.get(&format!("{prefix}.bias"));
    let c = tape.conv2d(x, w, stride, pad)?;
    tape.add_chan_bias(c, b)
}

fn residual_forward(
    tape: &mut Tape,
    x: TensorId,
    leaves: &ParamLeaves,
    block: &ResidualBlockParams,
    prefix: &str,
) -> Result<TensorId, DiffError> {
    let c1 = conv_forward(tape, x, leaves, &format!("{prefix}.conv1"), block.conv1.stride, block.conv1.pad)?;
    let r1 = tape.relu(c1);
    let c2 = conv_forward(tape, r1, leaves, &format!("{prefix}.conv2"), block.conv2.stride, block.conv2.pad)?;
    let shortcut = match &block.projection {
        Some(p) => conv_forward(tape, x, leaves, &format!("{prefix}.proj"), p.stride, p.pad)?,
        None => x,
    };
    let s = tape.add(c2, shortcut)?;
    Ok(tape.relu(s))
}

/// E(·): CSI window batch [N,C,H,W] → feature map [N,C_f,h,w].
pub fn extract_features(
    tape: &mut Tape,
    x: TensorId,
    params: &PoseNetParams,
    leaves: &ParamLeaves,
) -> Result<TensorId, ModelError> {
    let scale = &params.scale;
    let xs = tape.shape(x).to_vec();
    let expected = [scale.in_channels, scale.in_height, scale.in_width];
    if xs.len() != 4 || xs[1..] != expected {
        return Err(ModelError::Config(format!(
            "input shape {xs:?} does not match configured {expected:?}"
        )));
    }
    let stem = conv_forward(tape, x, leaves, "stem", scale.stem_stride, scale.stem_pad)?;
    let mut h = tape.relu(stem);
    for (i, b) in params.blocks.iter().enumerate() {
        h = residual_forward(tape, h, leaves, b, &format!("block{i}"))?;
    }
    Ok(h)
}

/// R(·): feature map → pose predictions [N, joints, 2].
pub fn regress_pose(
    tape: &mut Tape,
    features: TensorId,
    params: &PoseNetParams,
    leaves: &ParamLeaves,
) -> Result<TensorId, ModelError> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 4 || fs[1] != params.bottleneck.weight.shape[1] {
        return Err(ModelError::Config(format!(
            "feature shape {fs:?} does not match bottleneck input {}",
            params.bottleneck.weight.shape[1]
        )));
    }
    let n = fs[0];
    let b = conv_forward(tape, features, leaves, "bottleneck", (1, 1), (0, 0))?;
    let b = tape.relu(b);
    let pooled = tape.avg_pool_global(b)?;
    let w = leaves.get("head.weight");
    let bias = leaves.get("head.bias");
    let lin = tape.matmul(pooled, w)?;
    let lin = tape.add_row_bias(lin, bias)?;
    let joints = params.scale.joint_count;
    Ok(tape.reshape(lin, vec![n, joints, 2])?)
}

/// Full forward pass; returns (features, predictions).
pub fn forward(
    tape: &mut Tape,
    x: TensorId,
    params: &PoseNetParams,
    leaves: &ParamLeaves,
) -> Result<(TensorId, TensorId), ModelError> {
    let f = extract_features(tape, x, params, leaves)?;
    let y = regress_pose(tape, f, params, leaves)?;
    Ok((f, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::check_gradients;
    use rand::Rng;

    fn rand_input(scale: &ModelScale, n: usize, seed: u64) -> DiffTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * scale.in_channels * scale.in_height * scale.in_width;
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        DiffTensor::new(vec![n, scale.in_channels, scale.in_height, scale.in_width], data).unwrap()
    }

    #[test]
    fn paper_scale_feature_shape() {
        let scale = ModelScale::paper();
        assert_eq!(scale.feature_shape(), (512, 17, 17));
        let params = init_params(&scale, 1).unwrap();
        let x = rand_input(&scale, 1, 2);
        let mut tape = Tape::new();
        let leaves = register_params(&mut tape, &params);
        let xid = tape.leaf(&x);
        let f = extract_features(&mut tape, xid, &params, &leaves).unwrap();
        assert_eq!(tape.shape(f), &[1, 512, 17, 17]);
    }

    #[test]
    fn desk_scale_feature_shape() {
        let scale = ModelScale::desk();
        assert_eq!(scale.feature_shape(), (32, 4, 4));
    }

    #[test]
    fn zero_input_zero_stem_bias_gives_zero_features() {
        let scale = ModelScale::desk();
        let mut params = init_params(&scale, 3).unwrap();
        // Zero everything: with zero weights and biases the whole map is zero.
        for (_, t) in params.named_tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = DiffTensor::zeros(&[1, 3, 30, 32]);
        let mut tape = Tape::new();
        let leaves = register_params(&mut tape, &params);
        let xid = tape.leaf(&x);
        let f = extract_features(&mut tape, xid, &params, &leaves).unwrap();
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pose_output_shape() {
        let scale = ModelScale::desk();
        let params = init_params(&scale, 4).unwrap();
        let x = rand_input(&scale, 3, 5);
        let mut tape = Tape::new();
        let leaves = register_params(&mut tape, &params);
        let xid = tape.leaf(&x);
        let (_, y) = forward(&mut tape, xid, &params, &leaves).unwrap();
        assert_eq!(tape.shape(y), &[3, 17, 2]);
    }

    #[test]
    fn zero_head_weights_reproduce_bias() {
        let scale = ModelScale::desk();
        let mut params = init_params(&scale, 6).unwrap();
        params.head_weight.data.iter_mut().for_each(|v| *v = 0.0);
        params.head_bias.data = (0..34).map(|i| i as f64 * 0.5).collect();
        let x = rand_input(&scale, 2, 7);
        let mut tape = Tape::new();
        let leaves = register_params(&mut tape, &params);
        let xid = tape.leaf(&x);
        let (_, y) = forward(&mut tape, xid, &params, &leaves).unwrap();
        let out = tape.value(y);
        for s in 0..2 {
            for i in 0..34 {
                assert_eq!(out[s * 34 + i], i as f64 * 0.5);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let scale = ModelScale::desk();
        let a = init_params(&scale, 11).unwrap();
        let b = init_params(&scale, 11).unwrap();
        assert_eq!(a, b);
        let c = init_params(&scale, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_std_near_kaiming() {
        // Stem of the paper preset has fan_in = 3*3*2 < 256; use a block conv.
        let scale = ModelScale::paper();
        let params = init_params(&scale, 13).unwrap();
        let w = &params.blocks[1].conv2.weight; // fan_in = 512*9
        let fan_in: f64 = 512.0 * 9.0;
        let mean: f64 = w.data.iter().sum::<f64>() / w.data.len() as f64;
        let var: f64 =
            w.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w.data.len() as f64;
        let theory = (2.0 / fan_in).sqrt();
        let ratio = var.sqrt() / theory;
        assert!((0.8..1.2).contains(&ratio), "std ratio {ratio}");
    }

    #[test]
    fn batch_concat_has_no_cross_sample_coupling() {
        let scale = ModelScale::desk();
        let params = init_params(&scale, 8).unwrap();
        let a = rand_input(&scale, 1, 21);
        let b = rand_input(&scale, 1, 22);
        let mut both = a.clone();
        both.shape[0] = 2;
        both.data.extend_from_slice(&b.data);
        let run = |x: &DiffTensor| {
            let mut tape = Tape::new();
            let leaves = register_params(&mut tape, &params);
            let xid = tape.leaf(x);
            let (_, y) = forward(&mut tape, xid, &params, &leaves).unwrap();
            tape.value(y).to_vec()
        };
        let ya = run(&a);
        let yb = run(&b);
        let yab = run(&both);
        assert_eq!(&yab[..34], ya.as_slice());
        assert_eq!(&yab[34..], yb.as_slice());
    }

    #[test]
    fn residual_block_zero_weights_passes_shortcut() {
        let scale = ModelScale {
            blocks: vec![BlockSpec { channels: 16, stride: (1, 1) }],
            ..ModelScale::desk()
        };
        let mut params = init_params(&scale, 9).unwrap();
        assert!(params.blocks[0].projection.is_none());
        params.blocks[0].conv1.weight.data.iter_mut().for_each(|v| *v = 0.0);
        params.blocks[0].conv2.weight.data.iter_mut().for_each(|v| *v = 0.0);
        params.blocks[0].conv1.bias.data.iter_mut().for_each(|v| *v = 0.0);
        params.blocks[0].conv2.bias.data.iter_mut().for_each(|v| *v = 0.0);
        let x = rand_input(&scale, 1, 10);
        let mut tape = Tape::new();
        let leaves = register_params(&mut tape, &params);
        let xid = tape.leaf(&x);
        let stem = conv_forward(&mut tape, xid, &leaves, "stem", scale.stem_stride, scale.stem_pad)
            .unwrap();
        let stem_out = tape.relu(stem);
        let block_out =
            residual_forward(&mut tape, stem_out, &leaves, &params.blocks[0], "block0").unwrap();
        // relu(0 + shortcut) with shortcut already nonnegative: passthrough.
        assert_eq!(tape.value(block_out), tape.value(stem_out));
    }

    #[test]
    fn full_pipeline_gradient_check_small_scale() {
        // Tiny variant of the desk preset so full finite differencing stays fast.
        let scale = ModelScale {
            in_channels: 2,
            in_height: 8,
            in_width: 8,
            stem_channels: 4,
            stem_kernel: (3, 3),
            stem_stride: (2, 2),
            stem_pad: (1, 1),
            blocks: vec![BlockSpec { channels: 6, stride: (2, 2) }],
            bottleneck_channels: 5,
            joint_count: 3,
        };
        let params = init_params(&scale, 14).unwrap();
        let x = rand_input(&scale, 2, 15);
        let mut leaves: Vec<DiffTensor> = vec![x];
        let names: Vec<String> =
            params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (_, t) in params.named_tensors() {
            leaves.push(t.clone());
        }
        let check = check_gradients(
            &leaves,
            |tape, ids| {
                let pl = ParamLeaves {
                    ids: names.iter().cloned().zip(ids[1..].iter().copied()).collect(),
                };
                let (_, y) = forward(tape, ids[0], &params, &pl).unwrap();
                let sq = tape.square(y);
                tape.sum(sq)
            },
            1e-5,
        );
        assert!(check.max_rel_err < 1e-4, "rel err {}", check.max_rel_err);
    }
}
