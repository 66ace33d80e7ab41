use std::f64::consts::TAU;

use crate::diffcore::DiffTensor;
use crate::losses::{mmd2, KernelSpec};
use crate::synthcsi::*;

fn motion(action: Action, frames: usize) -> MotionSpec {
    MotionSpec { action, location: Location::L2, scale: 1.0, frames, frame_rate: 20.0 }
}

fn scene(seed: u64) -> SceneSpec {
    let mut s = SceneSpec::with_linear_array([0.0, 0.0], [3.5, 0.0], seed);
    s.subcarriers = 16;
    s
}

#[test]
fn bone_lengths_constant_across_frames() {
    let seq = synth_pose_sequence(&motion(Action::Wave, 64), 7).unwrap();
    // (parent, child, index into lengths from frame 0)
    let bones = [(5, 7), (7, 9), (6, 8), (8, 10), (11, 13), (13, 15), (12, 14), (14, 16), (5, 6), (11, 12)];
    let len = |f: &Pose2D, (a, b): (usize, usize)| {
        ((f.joints[a][0] - f.joints[b][0]).powi(2) + (f.joints[a][1] - f.joints[b][1]).powi(2))
            .sqrt()
    };
    let reference: Vec<f64> = bones.iter().map(|&b| len(&seq[0], b)).collect();
    for frame in &seq {
        for (i, &b) in bones.iter().enumerate() {
            assert!((len(frame, b) - reference[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn pose_sequence_deterministic_by_seed() {
    let a = synth_pose_sequence(&motion(Action::Step, 40), 11).unwrap();
    let b = synth_pose_sequence(&motion(Action::Step, 40), 11).unwrap();
    let c = synth_pose_sequence(&motion(Action::Step, 40), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn wave_moves_wrists_more_than_hips() {
    let seq = synth_pose_sequence(&motion(Action::Wave, 120), 3).unwrap();
    let variance = |j: usize| {
        let xs: Vec<f64> = seq.iter().map(|f| f.joints[j][0]).collect();
        let ys: Vec<f64> = seq.iter().map(|f| f.joints[j][1]).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        var(&xs) + var(&ys)
    };
    for wrist in [9, 10] {
        for hip in [11, 12] {
            assert!(variance(wrist) > variance(hip));
        }
    }
}

#[test]
fn short_motion_rejected() {
    let err = synth_pose_sequence(&motion(Action::Wave, 10), 0).unwrap_err();
    assert!(matches!(err, SynthError::Motion(_)));
}

#[test]
fn single_direct_path_amplitude() {
    let mut s = SceneSpec::with_linear_array([0.0, 0.0], [2.0, 0.0], 0);
    s.rx_pos = [[2.0, 0.0]; 3]; // collapse the array so d is exact
    let empty = Pose2D { joints: vec![] };
    let (re, im) = channel_response(&empty, &s, 0, 1);
    let d = 2.0;
    assert!(((re * re + im * im).sqrt() - 1.0 / (d * d)).abs() < 1e-12);
}

#[test]
fn half_period_paths_cancel() {
    // Direct path plus one scatterer path exactly half a wavelength longer,
    // with the scatterer coefficient compensating the extra attenuation.
    let f = default_like_carrier();
    let lambda = SPEED_OF_LIGHT / f;
    let d = 2.0;
    let extra = lambda / 2.0;
    // Place the scatterer on the tx-rx line beyond rx so path = d + extra.
    let mut s = SceneSpec::with_linear_array([0.0, 0.0], [d, 0.0], 0);
    s.rx_pos = [[d, 0.0]; 3];
    let sp = d + extra / 2.0;
    let coeff = ((d + extra) / d).powi(2);
    assert!(coeff <= 1.0 + 1e-9 || coeff > 0.0);
    s.static_scatterers = vec![Scatterer { pos: [sp, 0.0], coeff: coeff.min(1.0) }];
    // coeff.min(1.0) keeps the invariant; rescale the check accordingly.
    let empty = Pose2D { joints: vec![] };
    let (re, im) = channel_response(&empty, &s, 0, 0);
    let direct = 1.0 / (d * d);
    let scatter = coeff.min(1.0) / (d + extra).powi(2);
    let expect = (direct - scatter).abs();
    assert!(((re * re + im * im).sqrt() - expect).abs() < 1e-9);
}

fn default_like_carrier() -> f64 {
    5.32e9
}

#[test]
fn amplitude_matches_complex_sum_oracle() {
    let mut s = scene(5);
    s.static_scatterers =
        vec![Scatterer { pos: [1.0, 1.5], coeff: 0.8 }, Scatterer { pos: [2.5, -0.5], coeff: 0.4 }];
    let pose = synth_pose_sequence(&motion(Action::Wave, 32), 5).unwrap().pop().unwrap();
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    for p in 0..ANTENNA_PAIRS {
        let rx = s.effective_rx(p);
        for k in 0..114 {
            let f = s.carrier_freq + k as f64 * SUBCARRIER_SPACING_HZ;
            // Independent recomputation: accumulate every path from scratch.
            let mut paths: Vec<(f64, f64)> = vec![(dist(s.tx_pos, rx), 1.0)];
            for sc in &s.static_scatterers {
                paths.push((dist(s.tx_pos, sc.pos) + dist(sc.pos, rx), sc.coeff));
            }
            for &j in &pose.joints {
                paths.push((dist(s.tx_pos, j) + dist(j, rx), 0.3));
            }
            let (mut re, mut im) = (0.0, 0.0);
            for (len, c) in paths {
                let a = c / len.max(0.1).powi(2);
                let ph = TAU * f * len / SPEED_OF_LIGHT;
                re += a * ph.cos();
                im += a * ph.sin();
            }
            let (gre, gim) = channel_response(&pose, &s, k, p);
            let got = (gre * gre + gim * gim).sqrt();
            let want = (re * re + im * im).sqrt();
            assert!((got - want).abs() < 1e-12, "pair {p} subcarrier {k}");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let s = scene(9);
    let motions = [motion(Action::Wave, 96), motion(Action::LegSwing, 64)];
    let a = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    let b = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    assert_eq!(a, b);
}

#[test]
fn window_count_and_shape() {
    let s = scene(2);
    let motions = [motion(Action::Wave, 100), motion(Action::Step, 64)];
    let d = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    assert_eq!(d.len(), 100 / 32 + 64 / 32);
    assert_eq!(d.window_shape(), [3, 16, 32]);
    assert!(d.samples.iter().all(|(w, _)| w.data.iter().all(|&v| v.is_finite() && v >= 0.0)));
}

#[test]
fn noise_changes_data_but_stays_deterministic() {
    let mut s = scene(4);
    s.noise_std = 0.001;
    let motions = [motion(Action::Wave, 64)];
    let noisy1 = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    let noisy2 = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    assert_eq!(noisy1, noisy2);
    let mut clean_scene = s.clone();
    clean_scene.noise_std = 0.0;
    let clean = generate_domain(&clean_scene, &motions, WINDOW_LEN, "a").unwrap();
    assert_ne!(noisy1.samples[0].0.data, clean.samples[0].0.data);
}

#[test]
fn mask_label_counts() {
    let s = scene(8);
    let motions = [motion(Action::Wave, 320)];
    let d = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    assert_eq!(d.len(), 10);
    assert_eq!(mask_labels(&d, 0.0, 1).labeled_indices().len(), 0);
    assert_eq!(mask_labels(&d, 1.0, 1).labeled_indices().len(), 10);
    assert_eq!(mask_labels(&d, 0.2, 1).labeled_indices().len(), 2);
    // Deterministic selection.
    assert_eq!(mask_labels(&d, 0.2, 1).label_mask, mask_labels(&d, 0.2, 1).label_mask);
}

fn input_tensor(d: &DomainDataset, indices: &[usize]) -> DiffTensor {
    let (data, shape) = d.flattened_inputs(indices);
    DiffTensor::new(vec![shape[0], shape[1]], data).unwrap()
}

#[test]
fn rotated_scene_opens_a_domain_gap() {
    let mut a = scene(21);
    a.noise_std = 0.01;
    a.static_scatterers = vec![Scatterer { pos: [1.0, 2.0], coeff: 0.6 }];
    let mut b = a.clone();
    b.device_axis_rotation = std::f64::consts::FRAC_PI_2;
    b.seed = 22;
    let motions = [motion(Action::Wave, 320), motion(Action::LegSwing, 320)];
    let da = generate_domain(&a, &motions, WINDOW_LEN, "a").unwrap();
    let db = generate_domain(&b, &motions, WINDOW_LEN, "b").unwrap();

    let n = da.len();
    let all: Vec<usize> = (0..n).collect();
    // Interleaved halves so both contain every motion.
    let first: Vec<usize> = (0..n).step_by(2).collect();
    let second: Vec<usize> = (1..n).step_by(2).collect();
    let kernel = KernelSpec::default();
    let inter = mmd2(&input_tensor(&da, &all), &input_tensor(&db, &all), &kernel).unwrap();
    let intra =
        mmd2(&input_tensor(&da, &first), &input_tensor(&da, &second), &kernel).unwrap();
    assert!(
        inter > 3.0 * intra,
        "inter-domain mmd {inter} not above 3x intra-domain {intra}"
    );
}

#[test]
fn csid_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csid");
    let s = scene(13);
    let motions = [motion(Action::Step, 96)];
    let d = generate_domain(&s, &motions, WINDOW_LEN, "a").unwrap();
    write_csid(&path, &d).unwrap();
    let bytes1 = std::fs::read(&path).unwrap();
    let loaded = read_csid(&path).unwrap();
    assert_eq!(loaded.samples, d.samples);
    assert_eq!(loaded.label_mask, d.label_mask);
    write_csid(&path, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes1);
}

#[test]
fn csid_masks_hide_poses_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csid");
    let s = scene(14);
    let d = generate_domain(&s, &[motion(Action::Wave, 96)], WINDOW_LEN, "a").unwrap();
    let masked = mask_labels(&d, 0.0, 1);
    write_csid(&path, &masked).unwrap();
    let loaded = read_csid(&path).unwrap();
    assert!(loaded.label_mask.iter().all(|&m| !m));
    assert!(loaded
        .samples
        .iter()
        .all(|(_, p)| p.joints.iter().all(|j| *j == [0.0, 0.0])));
}

#[test]
fn invalid_scene_rejected() {
    let mut s = scene(1);
    s.static_scatterers = vec![Scatterer { pos: [1.0, 1.0], coeff: 1.5 }];
    assert!(matches!(s.validate(), Err(SynthError::Scene(_))));
    let mut s2 = scene(1);
    s2.noise_std = -1.0;
    assert!(s2.validate().is_err());
    let mut s3 = scene(1);
    s3.rx_pos[0] = s3.tx_pos;
    assert!(s3.validate().is_err());
}
