//! One PASS/FAIL line per benchmark acceptance criterion. Run with
//! `cargo test -p kinebench --test acceptance -- --nocapture`.

mod common;
mod oracles;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use kinebench::body::{pose_mesh, toy_model, BodyParams, VertexSubset};
use kinebench::camera::{project_point, reprojection_error, triangulate_pair};
use kinebench::formats::{parse_mot_str, trc_string, write_mot_string, xyz_channels};
use kinebench::metrics::{joint_angle_rmse, leaderboard_from_columns, pck, GtKeypoint};
use kinebench::pipeline::{process_trial, PipelineConfig, PipelineContext};
use kinebench::signal::{ButterworthLowpass, TimeSeries};
use kinebench::skeletal::{JointAngleTrajectory, ScaleSet, SkeletalModel};
use kinebench::synth::{annotate_frame, balanced_batch_schedule, coco_json_string, ImageInfo, KeypointSchema};
use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN_TRC: &str = include_str!("golden/golden.trc");
const GOLDEN_MOT: &str = include_str!("golden/golden.mot");

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    match f() {
        Ok(detail) => Outcome { name, pass: true, detail },
        Err(detail) => Outcome { name, pass: false, detail },
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn context() -> (tempfile::TempDir, PipelineContext) {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig { output_dir: dir.path().to_path_buf(), plots: false, ..PipelineConfig::default() };
    let ctx = PipelineContext::new(config).unwrap();
    (dir, ctx)
}

fn end_to_end() -> Result<String, String> {
    let model = SkeletalModel::default_benchmark();
    let (_dir, ctx) = context();
    let inputs = common::inputs(&model, common::FRAMES, 0.0, 1);
    let start = Instant::now();
    let result = process_trial(&inputs, &ctx).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rmse = result.rmse.ok_or("no RMSE report")?;
    let (mut worst_rot, mut worst_trans) = (0.0f64, 0.0f64);
    for ((name, rot), v) in rmse.coordinates.iter().zip(&rmse.rotational).zip(&rmse.trials[0].rmse) {
        if *rot {
            worst_rot = worst_rot.max(*v);
            ensure(*v < 0.1, || format!("{name}: {v:.4} deg"))?;
        } else {
            worst_trans = worst_trans.max(*v);
            ensure(*v < 1e-4, || format!("{name}: {v:.2e} m"))?;
        }
    }
    ensure(elapsed < Duration::from_secs(60), || format!("{} frames took {elapsed:?}", common::FRAMES))?;
    Ok(format!("max {worst_rot:.2e} deg, {worst_trans:.2e} m, {} frames in {elapsed:.2?}", common::FRAMES))
}

fn noise_monotonicity() -> Result<String, String> {
    let model = SkeletalModel::default_benchmark();
    let (_dir, ctx) = context();
    let mut runs = Vec::new();
    for sigma in [0.0, 1.0, 2.0, 4.0] {
        let result = process_trial(&common::inputs(&model, common::FRAMES, sigma, 17), &ctx)
            .map_err(|e| format!("sigma {sigma}: {e}"))?;
        runs.push((sigma, result.rmse.ok_or("no RMSE report")?));
    }
    for w in runs.windows(2) {
        let ((s0, a), (s1, b)) = (&w[0], &w[1]);
        for (i, name) in a.coordinates.iter().enumerate() {
            let (x, y) = (a.trials[0].rmse[i], b.trials[0].rmse[i]);
            ensure(y >= x, || format!("{name}: {x:.4} at sigma {s0} > {y:.4} at sigma {s1}"))?;
        }
    }
    let means: Vec<f64> = runs.iter().map(|(_, r)| r.overall_mean()).collect();
    ensure(means[2] < 5.0, || format!("mean at sigma 2 is {:.3} deg", means[2]))?;
    Ok(format!("mean deg by sigma 0/1/2/4: {:.3}/{:.3}/{:.3}/{:.3}", means[0], means[1], means[2], means[3]))
}

fn triangulation() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst_px, mut worst_m) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let c = oracles::triangulation_case(&mut rng);
        let oa = project_point(&c.cam_a, &c.point).map_err(|e| e.to_string())?;
        let ob = project_point(&c.cam_b, &c.point).map_err(|e| e.to_string())?;
        let p = triangulate_pair(&c.cam_a, &oa, &c.cam_b, &ob).map_err(|e| format!("case {i}: {e}"))?;
        let px = reprojection_error(&[(&c.cam_a, oa), (&c.cam_b, ob)], &p).map_err(|e| e.to_string())?;
        let m = (p - c.point).norm();
        worst_px = worst_px.max(px);
        worst_m = worst_m.max(m);
        ensure(px < 1e-6 && m < 1e-8, || format!("case {i}: {px:.2e} px, {m:.2e} m"))?;
    }
    Ok(format!("1000 cases, max {worst_px:.2e} px, {worst_m:.2e} m"))
}

fn filter() -> Result<String, String> {
    let (rate, cutoff) = (200.0, 10.0);
    let f = ButterworthLowpass::design(4, cutoff, rate).map_err(|e| e.to_string())?;
    let dc = f.filtfilt(&vec![2.0; 600]);
    let dc_err = dc.iter().map(|v| (v / 2.0 - 1.0).abs()).fold(0.0, f64::max);
    ensure(dc_err < 1e-9, || format!("DC gain off by {dc_err:.2e}"))?;
    let n = 4000;
    let gain = |freq: f64| {
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect();
        oracles::sinusoid_amplitude(&f.filtfilt(&x), rate, freq, 500..n - 500)
    };
    let (at_cut, at_four) = (gain(cutoff), gain(4.0 * cutoff));
    ensure((at_cut - 0.5).abs() <= 0.005, || format!("gain at cutoff {at_cut:.5}"))?;
    ensure(at_four < 1e-3, || format!("gain at 4x cutoff {at_four:.2e}"))?;
    let analytic = oracles::butterworth_dual_pass_gain(4, cutoff, rate, cutoff);
    ensure((at_cut - analytic).abs() < 1e-3, || format!("measured {at_cut:.5} vs analytic {analytic:.5}"))?;
    Ok(format!("DC err {dc_err:.1e}, cutoff {at_cut:.5}, 4x cutoff {at_four:.1e}"))
}

fn skinning() -> Result<String, String> {
    let model = toy_model();
    let archive = oracles::toy_archive();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let p = BodyParams {
            beta: (0..model.shape_count()).map(|_| rng.random_range(-1.5..1.5)).collect(),
            theta: (0..3 * model.joint_count()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            translation: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3),
        };
        let fast = pose_mesh(&model, &p).map_err(|e| e.to_string())?;
        let slow = oracles::brute_force_lbs(&archive, &p);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a.coords - b).norm()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err < 1e-9, || format!("pose {i}: {err:.2e}"))?;
    }
    let rest = pose_mesh(&model, &BodyParams::rest(&model)).map_err(|e| e.to_string())?;
    ensure(rest.iter().zip(model.template()).all(|(a, b)| a.coords == *b), || "rest pose moved the template".into())?;
    Ok(format!("100 poses, max {worst:.2e}; rest pose exact"))
}

fn inverse_kinematics() -> Result<String, String> {
    let model = SkeletalModel::default_benchmark();
    let scales = ScaleSet::uniform(&model, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut worst = 0.0f64;
    let solve = |markers: &[Vector3<f64>]| -> Result<Vec<f64>, String> {
        let report = oracles::solve_markers(&model, &scales, markers);
        ensure(report.not_converged.is_empty(), || "solver did not converge".into())?;
        for trace in &report.objective_traces {
            ensure(trace.windows(2).all(|w| w[1] <= w[0]), || format!("objective rose: {trace:?}"))?;
        }
        Ok(report.trajectory.frame(0).to_vec())
    };
    for trial in 0..200 {
        let q = oracles::random_pose(&model, &mut rng);
        let got = solve(&model.marker_positions(&scales, &q))?;
        for ((c, truth), v) in model.coordinates().iter().zip(&q).zip(&got) {
            if c.is_rotational() {
                let e = (truth.to_degrees() - v).abs();
                worst = worst.max(e);
                ensure(e < 0.01, || format!("trial {trial} {}: off by {e:.4} deg", c.name))?;
            } else {
                ensure((truth - v).abs() < 1e-5, || format!("trial {trial} {}: {truth} vs {v}", c.name))?;
            }
        }
    }
    let root = model.root_coordinates();
    for trial in 0..20 {
        let q = oracles::random_pose(&model, &mut rng);
        let markers = model.marker_positions(&scales, &q);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let g = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(-0.6..0.6));
        let shift = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2), rng.random_range(-1.0..1.0));
        let moved: Vec<_> = markers.iter().map(|p| g * p + shift).collect();
        let (a, b) = (solve(&markers)?, solve(&moved)?);
        for (i, c) in model.coordinates().iter().enumerate() {
            if !root.contains(&i) {
                ensure((a[i] - b[i]).abs() < 0.01, || format!("motion {trial} changed {}", c.name))?;
            }
        }
    }
    Ok(format!("200 recoveries, max {worst:.2e} deg; 20 rigid motions leave joint angles unchanged"))
}

fn metric_fixtures() -> Result<String, String> {
    let gt = vec![vec![GtKeypoint { u: 50.0, v: 50.0, visibility: 2 }, GtKeypoint { u: 20.0, v: 30.0, visibility: 2 }]];
    let pred = vec![vec![[54.0, 50.0], [20.0, 37.0]]];
    let r = pck(&pred, &gt, &[[0.0, 0.0, 100.0, 100.0]], &[0.05]).map_err(|e| e.to_string())?;
    ensure(r.pck[0] == 0.5, || format!("PCK {}", r.pck[0]))?;

    let (rate, amp) = (100.0, 12.0);
    let names = vec!["knee_angle_r".to_string()];
    let mut wave = JointAngleTrajectory::new(rate, 0.0, names.clone(), vec![true]);
    let mut flat = JointAngleTrajectory::new(rate, 0.0, names, vec![true]);
    for i in 0..1000 {
        wave.push_frame(&[amp * (2.0 * PI * 1.5 * i as f64 / rate).sin()], None);
        flat.push_frame(&[0.0], None);
    }
    let rmse = joint_angle_rmse("sine", &wave, &flat, None).map_err(|e| e.to_string())?.trials[0].rmse[0];
    let expect = amp / 2f64.sqrt();
    ensure((rmse / expect - 1.0).abs() <= 1e-3, || format!("sinusoid RMSE {rmse:.5} vs {expect:.5}"))?;

    let row = vec![5.1, 2.8, 3.4, 8.3, 4.9, 7.3, 8.3, 7.6, 9.1, 6.2, 4.6, 8.7];
    let board = leaderboard_from_columns(&[("SynthPose ViTPose-H".into(), row)]).map_err(|e| e.to_string())?;
    let score = board.rows[0].score;
    ensure((score - 6.36).abs() <= 0.01, || format!("leaderboard score {score:.4}"))?;
    Ok(format!("PCK 0.5, sinusoid {rmse:.4} vs {expect:.4}, leaderboard {score:.3}"))
}

fn sampler() -> Result<String, String> {
    let s = balanced_batch_schedule(&[5, 3, 7, 2], 4, 3, 50).map_err(|e| e.to_string())?;
    for (i, b) in s.batches().enumerate() {
        let mut ds: Vec<usize> = b.iter().map(|e| e.0).collect();
        ds.sort();
        ensure(ds == [0, 1, 2, 3], || format!("batch {i} draws datasets {ds:?}"))?;
    }
    let big = balanced_batch_schedule(&[7, 13, 1, 250], 4, 99, 2500).map_err(|e| e.to_string())?;
    ensure(big.entries.len() == 10_000, || format!("{} emissions", big.entries.len()))?;
    for (d, &n) in big.dataset_sizes.iter().enumerate() {
        let drawn: Vec<usize> = big.entries.iter().filter(|e| e.0 == d).map(|e| e.1).collect();
        for (c, cycle) in drawn.chunks(n).enumerate() {
            let mut sorted = cycle.to_vec();
            sorted.sort();
            sorted.dedup();
            ensure(sorted.len() == cycle.len() && sorted.iter().all(|&i| i < n), || {
                format!("dataset {d} cycle {c} is not a permutation")
            })?;
        }
    }
    Ok("one sample per dataset per batch; 10k emissions cycle through permutations".into())
}

fn formats() -> Result<String, String> {
    let mut data = Vec::new();
    for k in 0..3 {
        let k = k as f64;
        data.extend([0.125 + 0.001 * k, 0.95 - 0.0005 * k, -0.1 + 0.002 * k]);
        data.extend([-0.125 + 0.001 * k, 0.95 - 0.0005 * k, -0.1 + 0.002 * k]);
    }
    let markers = TimeSeries::new(100.0, xyz_channels(&["RASI", "LASI"]), data).map_err(|e| e.to_string())?;
    ensure(trc_string(&markers, "golden.trc").map_err(|e| e.to_string())? == GOLDEN_TRC, || {
        "TRC differs from golden bytes".into()
    })?;

    let names = ["pelvis_tilt", "pelvis_ty", "knee_angle_r"].map(String::from).to_vec();
    let mut traj = JointAngleTrajectory::new(100.0, 0.0, names, vec![true, false, true]);
    for k in 0..3 {
        let k = k as f64;
        traj.push_frame(&[-5.0 - 0.25 * k, 0.95 - 0.00125 * k, 10.0 + 2.5 * k], None);
    }
    let text = write_mot_string(&traj, "golden");
    ensure(text == GOLDEN_MOT, || "MOT differs from golden bytes".into())?;
    let parsed = parse_mot_str(&text, None).map_err(|e| e.to_string())?;
    let drift = (0..3)
        .flat_map(|f| parsed.frame(f).iter().zip(traj.frame(f)).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    ensure(parsed.names == traj.names && drift < 1e-10, || format!("MOT round trip drifted {drift:.2e}"))?;

    let model = toy_model();
    let subset = VertexSubset::new((0..35).map(|i| (format!("m{i}"), i % model.vertex_count())).collect())
        .map_err(|e| e.to_string())?;
    let schema = KeypointSchema::coco_with_subset(&subset).map_err(|e| e.to_string())?;
    let cam = kinebench::camera::CameraModel::look_at(
        "front",
        (640, 480),
        (500.0, 500.0, 320.0, 240.0),
        Point3::new(0.3, 0.0, 3.0),
        Point3::new(0.3, 0.0, 0.0),
        Vector3::y(),
    )
    .map_err(|e| e.to_string())?;
    let render = || -> Result<String, String> {
        let record = annotate_frame(&model, &BodyParams::rest(&model), &subset, &cam, 1, 0.1)
            .map_err(|e| e.to_string())?
            .with_leading_unlabeled(17);
        let images = [ImageInfo { id: 1, file_name: "a.png".into(), width: 640, height: 480 }];
        coco_json_string(&[record], &schema, &images).map_err(|e| e.to_string())
    };
    let (a, b) = (render()?, render()?);
    ensure(a == b, || "COCO output not byte-stable".into())?;
    let v: serde_json::Value = serde_json::from_str(&a).map_err(|e| e.to_string())?;
    let len = v["annotations"][0]["keypoints"].as_array().map_or(0, Vec::len);
    let names = v["categories"][0]["keypoints"].as_array().map_or(0, Vec::len);
    ensure(len == 156 && names == 52, || format!("{names} keypoint names, array length {len}"))?;
    Ok("TRC and MOT match golden bytes, MOT round-trips, COCO 52x3 = 156 and byte-stable".into())
}

#[test]
fn acceptance() {
    let outcomes = [
        check("end-to-end noiseless round trip", end_to_end),
        check("noise monotonicity", noise_monotonicity),
        check("triangulation", triangulation),
        check("Butterworth filter", filter),
        check("linear blend skinning", skinning),
        check("IK solver", inverse_kinematics),
        check("metric fixtures", metric_fixtures),
        check("balanced sampler", sampler),
        check("format round trips", formats),
    ];
    for o in &outcomes {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
