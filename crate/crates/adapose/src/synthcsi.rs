//! Synthetic two-domain CSI generator. Animated 17-joint skeletons drive a
//! multipath channel model; each propagation path contributes
//! `a·e^{j·2π·f·τ}` with inverse-square attenuation, and the amplitude across
//! subcarriers becomes the network input. Rotating the receiver array between
//! scenes produces a controllable, measurable domain shift.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const SUBCARRIER_SPACING_HZ: f64 = 312.5e3;
pub const ANTENNA_PAIRS: usize = 3;
pub const WINDOW_LEN: usize = 32;
pub const JOINTS: usize = 17;
/// Reflection coefficient assigned to each body joint's path.
const JOINT_REFLECTION: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid motion: {0}")]
    Motion(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    /// 17 COCO-order joints, meters in the scene plane.
    pub joints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub pos: [f64; 2],
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub tx_pos: [f64; 2],
    pub rx_pos: [[f64; 2]; ANTENNA_PAIRS],
    #[serde(default)]
    pub static_scatterers: Vec<Scatterer>,
    /// Orientation of the receiver array, applied about its centroid.
    #[serde(default)]
    pub device_axis_rotation: f64,
    #[serde(default = "default_carrier")]
    pub carrier_freq: f64,
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_subcarriers")]
    pub subcarriers: usize,
}

fn default_carrier() -> f64 {
    5.32e9
}

fn default_subcarriers() -> usize {
    114
}

impl SceneSpec {
    /// Receivers in a half-wavelength linear array centred at `rx_center`.
    pub fn with_linear_array(tx_pos: [f64; 2], rx_center: [f64; 2], seed: u64) -> Self {
        let f_c = default_carrier();
        let half_lambda = SPEED_OF_LIGHT / f_c / 2.0;
        let rx_pos = [
            [rx_center[0] - half_lambda, rx_center[1]],
            [rx_center[0], rx_center[1]],
            [rx_center[0] + half_lambda, rx_center[1]],
        ];
        Self {
            tx_pos,
            rx_pos,
            static_scatterers: Vec::new(),
            device_axis_rotation: 0.0,
            carrier_freq: f_c,
            noise_std: 0.0,
            seed,
            subcarriers: default_subcarriers(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for rx in &self.rx_pos {
            if *rx == self.tx_pos {
                return Err(SynthError::Scene("tx and rx positions coincide".into()));
            }
        }
        for s in &self.static_scatterers {
            if !(s.coeff > 0.0 && s.coeff <= 1.0) {
                return Err(SynthError::Scene(format!(
                    "scatterer coefficient {} outside (0, 1]",
                    s.coeff
                )));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(SynthError::Scene("noise_std must be nonnegative".into()));
        }
        if self.carrier_freq <= 0.0 || self.subcarriers == 0 {
            return Err(SynthError::Scene("carrier_freq and subcarriers must be positive".into()));
        }
        Ok(())
    }

    fn rx_centroid(&self) -> [f64; 2] {
        let mut c = [0.0, 0.0];
        for rx in &self.rx_pos {
            c[0] += rx[0] / ANTENNA_PAIRS as f64;
            c[1] += rx[1] / ANTENNA_PAIRS as f64;
        }
        c
    }

    /// Antenna position after applying the device-axis rotation.
    pub fn effective_rx(&self, antenna_pair: usize) -> [f64; 2] {
        let c = self.rx_centroid();
        let p = self.rx_pos[antenna_pair];
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        let (s, cs) = self.device_axis_rotation.sin_cos();
        [c[0] + cs * dx - s * dy, c[1] + s * dx + cs * dy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Wave,
    LegSwing,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    L1,
    L2,
    L3,
}

impl Location {
    /// Subject position (hip-centre ground projection) in scene meters.
    pub fn offset(self) -> [f64; 2] {
        match self {
            Location::L1 => [1.2, 0.8],
            Location::L2 => [1.75, 1.2],
            Location::L3 => [2.3, 0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub action: Action,
    pub location: Location,
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub frames: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_scale() -> f64 {
    1.0
}

fn default_frame_rate() -> f64 {
    20.0
}

impl MotionSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < WINDOW_LEN {
            return Err(SynthError::Motion(format!(
                "duration {} frames is shorter than the {WINDOW_LEN}-frame window",
                self.frames
            )));
        }
        if !(self.scale > 0.0) || !(self.frame_rate > 0.0) {
            return Err(SynthError::Motion("scale and frame_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiWindow {
    /// Amplitudes, row-major over `[antenna_pair][subcarrier][frame]`.
    pub data: Vec<f32>,
    pub shape: [usize; 3],
}

impl CsiWindow {
    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub samples: Vec<(CsiWindow, Pose2D)>,
    pub label_mask: Vec<bool>,
    pub domain_id: String,
    pub spec_hash: String,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label_mask[i]).collect()
    }

    pub fn window_shape(&self) -> [usize; 3] {
        self.samples.first().map_or([0; 3], |(w, _)| w.shape)
    }

    /// Flattened inputs as an `[N, pairs·subcarriers·frames]` matrix, for
    /// input-level MMD.
    pub fn flattened_inputs(&self, indices: &[usize]) -> (Vec<f64>, [usize; 2]) {
        let dim: usize = self.window_shape().iter().product();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend(self.samples[i].0.as_f64());
        }
        (out, [indices.len(), dim])
    }
}

// ---------------------------------------------------------------------------
// Skeleton animation
// ---------------------------------------------------------------------------

struct Bones {
    torso: f64,
    hip_half: f64,
    shoulder_half: f64,
    neck: f64,
    eye: f64,
    ear: f64,
    upper_arm: f64,
    forearm: f64,
    thigh: f64,
    shin: f64,
}

impl Bones {
    fn scaled(scale: f64) -> Self {
        Self {
            torso: 0.50 * scale,
            hip_half: 0.12 * scale,
            shoulder_half: 0.18 * scale,
            neck: 0.10 * scale,
            eye: 0.03 * scale,
            ear: 0.06 * scale,
            upper_arm: 0.28 * scale,
            forearm: 0.26 * scale,
            thigh: 0.42 * scale,
            shin: 0.40 * scale,
        }
    }
}

fn limb(from: [f64; 2], len: f64, angle: f64) -> [f64; 2] {
    [from[0] + len * angle.sin(), from[1] - len * angle.cos()]
}

/// Deterministic 17-joint animation. Limb angles are sinusoids whose phases
/// come from the seed, so two subjects with the same spec but different seeds
/// move out of step.
pub fn synth_pose_sequence(motion: &MotionSpec, seed: u64) -> Result<Vec<Pose2D>, SynthError> {
    motion.validate()?;
    let b = Bones::scaled(motion.scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase_arm: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_leg: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let base = motion.location.offset();

    // Oscillation amplitudes in radians (angle from straight-down).
    let (arm_amp, arm_mean, leg_amp, sway) = match motion.action {
        Action::Wave => (0.8, std::f64::consts::PI * 0.75, 0.05, 0.0),
        Action::LegSwing => (0.1, 0.15, 0.5, 0.0),
        Action::Step => (0.3, 0.3, 0.3, 0.05),
    };
    let freq = 0.8; // motion cycles per second

    let mut frames = Vec::with_capacity(motion.frames);
    for t in 0..motion.frames {
        let phase = std::f64::consts::TAU * freq * t as f64 / motion.frame_rate;
        let hip_y = base[1] + (b.thigh + b.shin) * 0.98;
        let hip_x = base[0] + sway * motion.scale * phase.sin();
        let hip_c = [hip_x, hip_y];
        let sho_c = [hip_x, hip_y + b.torso];

        let mut j = vec![[0.0; 2]; JOINTS];
        j[5] = [sho_c[0] - b.shoulder_half, sho_c[1]]; // left shoulder
        j[6] = [sho_c[0] + b.shoulder_half, sho_c[1]]; // right shoulder
        j[11] = [hip_c[0] - b.hip_half, hip_c[1]]; // left hip
        j[12] = [hip_c[0] + b.hip_half, hip_c[1]]; // right hip
        j[0] = [sho_c[0], sho_c[1] + b.neck]; // nose
        j[1] = [j[0][0] - b.eye, j[0][1] + b.eye]; // left eye
        j[2] = [j[0][0] + b.eye, j[0][1] + b.eye]; // right eye
        j[3] = [j[0][0] - b.ear, j[0][1]]; // left ear
        j[4] = [j[0][0] + b.ear, j[0][1]]; // right ear

        // Arms: left and right in antiphase around the action's mean pose.
        let a_l = arm_mean + arm_amp * (phase + phase_arm).sin();
        let a_r = arm_mean + arm_amp * (phase + phase_arm + std::f64::consts::PI).sin();
        j[7] = limb(j[5], b.upper_arm, -a_l); // left elbow
        j[8] = limb(j[6], b.upper_arm, a_r); // right elbow
        j[9] = limb(j[7], b.forearm, -a_l - 0.3); // left wrist
        j[10] = limb(j[8], b.forearm, a_r + 0.3); // right wrist

        // Legs swing about vertical.
        let l_l = leg_amp * (phase + phase_leg).sin();
        let l_r = leg_amp * (phase + phase_leg + std::f64::consts::PI).sin();
        j[13] = limb(j[11], b.thigh, l_l); // left knee
        j[14] = limb(j[12], b.thigh, l_r); // right knee
        j[15] = limb(j[13], b.shin, l_l * 0.5); // left ankle
        j[16] = limb(j[14], b.shin, l_r * 0.5); // right ankle

        frames.push(Pose2D { joints: j });
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Channel model
// ---------------------------------------------------------------------------

/// Complex channel response for one subcarrier and antenna pair:
/// direct path + one path per static scatterer + one per joint.
pub fn channel_response(
    pose: &Pose2D,
    scene: &SceneSpec,
    subcarrier_index: usize,
    antenna_pair: usize,
) -> (f64, f64) {
    let rx = scene.effective_rx(antenna_pair);
    let tx = scene.tx_pos;
    let f = scene.carrier_freq + subcarrier_index as f64 * SUBCARRIER_SPACING_HZ;

    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut re = 0.0;
    let mut im = 0.0;
    let mut add_path = |len: f64, coeff: f64| {
        let a = coeff / len.max(0.1).powi(2);
        let phase = std::f64::consts::TAU * f * (len / SPEED_OF_LIGHT);
        re += a * phase.cos();
        im += a * phase.sin();
    };

    add_path(dist(tx, rx), 1.0);
    for s in &scene.static_scatterers {
        add_path(dist(tx, s.pos) + dist(s.pos, rx), s.coeff);
    }
    for &j in &pose.joints {
        add_path(dist(tx, j) + dist(j, rx), JOINT_REFLECTION);
    }
    (re, im)
}

fn window_rng(scene_seed: u64, motion_idx: usize, window_idx: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(scene_seed.to_le_bytes());
    h.update((motion_idx as u64).to_le_bytes());
    h.update((window_idx as u64).to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn spec_hash(scene: &SceneSpec, motions: &[MotionSpec], window_len: usize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(scene).expect("scene serializes"));
    h.update(serde_json::to_vec(motions).expect("motions serialize"));
    h.update((window_len as u64).to_le_bytes());
    format!("{:x}", h.finalize())
}

/// Non-overlapping windows of noisy amplitudes, each labeled with the pose at
/// its last frame. Noise comes from a per-window stream, so the result does
/// not depend on generation order.
pub fn generate_domain(
    scene: &SceneSpec,
    motions: &[MotionSpec],
    window_len: usize,
    domain_id: &str,
) -> Result<DomainDataset, SynthError> {
    scene.validate()?;
    if motions.is_empty() {
        return Err(SynthError::Motion("no motions".into()));
    }
    let sc = scene.subcarriers;
    let mut samples = Vec::new();
    for (mi, motion) in motions.iter().enumerate() {
        if motion.frames < window_len {
            return Err(SynthError::Motion(format!(
                "motion {mi}: {} frames < window {window_len}",
                motion.frames
            )));
        }
        // Per-motion pose seed, offset so scenes sharing a seed still differ.
        let poses = synth_pose_sequence(motion, scene.seed.wrapping_add(mi as u64))?;
        // Clean amplitudes per frame: [pair][subcarrier].
        let amps: Vec<Vec<f64>> = poses
            .iter()
            .map(|pose| {
                let mut frame = Vec::with_capacity(ANTENNA_PAIRS * sc);
                for p in 0..ANTENNA_PAIRS {
                    for k in 0..sc {
                        let (re, im) = channel_response(pose, scene, k, p);
                        frame.push((re * re + im * im).sqrt());
                    }
                }
                frame
            })
            .collect();

        let n_windows = motion.frames / window_len;
        for w in 0..n_windows {
            let start = w * window_len;
            let mut rng = window_rng(scene.seed, mi, w);
            let mut data = Vec::with_capacity(ANTENNA_PAIRS * sc * window_len);
            for p in 0..ANTENNA_PAIRS {
                for k in 0..sc {
                    for t in 0..window_len {
                        let clean = amps[start + t][p * sc + k];
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push((clean + scene.noise_std * noise).max(0.0) as f32);
                    }
                }
            }
            let label = Pose2D {
                // Poses round through f32 so datasets survive the file format
                // bit-exactly.
                joints: poses[start + window_len - 1]
                    .joints
                    .iter()
                    .map(|j| [j[0] as f32 as f64, j[1] as f32 as f64])
                    .collect(),
            };
            samples.push((CsiWindow { data, shape: [ANTENNA_PAIRS, sc, window_len] }, label));
        }
    }
    let n = samples.len();
    Ok(DomainDataset {
        samples,
        label_mask: vec![true; n],
        domain_id: domain_id.to_string(),
        spec_hash: spec_hash(scene, motions, window_len),
    })
}

/// Keeps labels for a uniformly random subset of `round(fraction·N)` samples.
pub fn mask_labels(dataset: &DomainDataset, fraction: f64, seed: u64) -> DomainDataset {
    assert!((0.0..=1.0).contains(&fraction), "fraction must be in [0, 1]");
    let n = dataset.len();
    let keep = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, n, keep.min(n));
    let mut mask = vec![false; n];
    for i in chosen {
        mask[i] = true;
    }
    DomainDataset { label_mask: mask, ..dataset.clone() }
}

// ---------------------------------------------------------------------------
// CSID file format
// ---------------------------------------------------------------------------

const CSID_MAGIC: &[u8; 4] = b"CSID";
const CSID_VERSION: u32 = 1;

/// Layout: magic, version u32, sample count u32, window shape 3×u32,
/// joints u32; then per sample the f32 CSI row-major, a label-present byte,
/// and 34 f32 pose values (zeros when unlabeled).
pub fn write_csid(path: &Path, dataset: &DomainDataset) -> Result<(), SynthError> {
    let shape = dataset.window_shape();
    let mut buf = Vec::new();
    buf.extend_from_slice(CSID_MAGIC);
    buf.extend_from_slice(&CSID_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for &e in &shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(JOINTS as u32).to_le_bytes());
    for (i, (window, pose)) in dataset.samples.iter().enumerate() {
        for &v in &window.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let labeled = dataset.label_mask[i];
        buf.push(labeled as u8);
        for j in 0..JOINTS {
            let p = if labeled { pose.joints[j] } else { [0.0, 0.0] };
            buf.extend_from_slice(&(p[0] as f32).to_le_bytes());
            buf.extend_from_slice(&(p[1] as f32).to_le_bytes());
        }
    }
    // Write-to-temp then rename so failures never leave partial files.
    let tmp = path.with_extension("csid.tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_csid(path: &Path) -> Result<DomainDataset, SynthError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], SynthError> {
        if *off + n > bytes.len() {
            return Err(SynthError::Format("truncated file".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != CSID_MAGIC {
        return Err(SynthError::Format("bad magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(&mut off, 4)?);
    if version != CSID_VERSION {
        return Err(SynthError::Format(format!("unsupported version {version}")));
    }
    let count = u32_at(take(&mut off, 4)?) as usize;
    let mut shape = [0usize; 3];
    for e in shape.iter_mut() {
        *e = u32_at(take(&mut off, 4)?) as usize;
    }
    let joints = u32_at(take(&mut off, 4)?) as usize;
    if joints != JOINTS {
        return Err(SynthError::Format(format!("expected {JOINTS} joints, found {joints}")));
    }
    let window_elems: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(count);
    let mut mask = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = take(&mut off, window_elems * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labeled = take(&mut off, 1)?[0] != 0;
        let mut joints_v = Vec::with_capacity(JOINTS);
        let praw = take(&mut off, JOINTS * 8)?;
        for c in praw.chunks_exact(8) {
            let x = f32::from_le_bytes(c[..4].try_into().expect("4 bytes")) as f64;
            let y = f32::from_le_bytes(c[4..].try_into().expect("4 bytes")) as f64;
            joints_v.push([x, y]);
        }
        samples.push((CsiWindow { data, shape }, Pose2D { joints: joints_v }));
        mask.push(labeled);
    }
    if off != bytes.len() {
        return Err(SynthError::Format("trailing bytes".into()));
    }
    Ok(DomainDataset {
        samples,
        label_mask: mask,
        domain_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        spec_hash: String::new(),
    })
}
