//! Synthetic trial: a known squat trajectory q*(t) on the default model, pushed
//! through forward kinematics and two calibrated cameras.
//!
//! Cameras sit 4 m from the subject at +-45 degrees about the vertical, 1920x1080,
//! f = 1500 px. Pixel noise, when requested, is i.i.d. Gaussian: one fixed draw of
//! unit normals scaled by sigma, so larger sigma means strictly larger noise.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use kinebench::camera::{project_point, CameraModel};
use kinebench::formats::{write_mot, KeypointFile, KeypointFrame};
use kinebench::pipeline::{CameraInput, CameraStream, TrialBundle, TrialInputs};
use kinebench::signal::TimeSeries;
use kinebench::skeletal::{fk_markers, JointAngleTrajectory, ScaleSet, SkeletalModel};
use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const RATE: f64 = 60.0;
pub const FRAMES: usize = 300;

/// Smooth, in-bounds squat pose at time `t` in model units.
pub fn squat_q(model: &SkeletalModel, t: f64) -> Vec<f64> {
    let s = 0.5 * (1.0 - (2.0 * PI * t / 2.5).cos());
    let w = (2.0 * PI * t / 5.0).sin();
    let d = f64::to_radians;
    let mut q = vec![0.0; model.coordinates().len()];
    let mut set = |name: &str, v: f64| q[model.coordinate_index(name).expect("coordinate")] = v;
    set("pelvis_tilt", d(-5.0 - 15.0 * s));
    set("pelvis_list", d(3.0 * w));
    set("pelvis_rotation", d(8.0 * w));
    set("pelvis_tx", 0.05 * w);
    set("pelvis_ty", 0.95 - 0.3 * s);
    set("pelvis_tz", 0.02 * w);
    for (side, sign) in [("r", 1.0), ("l", -1.0)] {
        set(&format!("hip_flexion_{side}"), d(10.0 + 75.0 * s));
        set(&format!("hip_adduction_{side}"), d(-3.0 - 4.0 * s + sign * 1.5 * w));
        set(&format!("hip_rotation_{side}"), d(2.0 + 6.0 * s * sign));
        set(&format!("knee_angle_{side}"), d(5.0 + 95.0 * s));
        set(&format!("ankle_angle_{side}"), d(-2.0 + 22.0 * s));
        set(&format!("subtalar_angle_{side}"), d(2.0 + 6.0 * s * sign));
    }
    set("lumbar_extension", d(-5.0 - 20.0 * s));
    set("lumbar_bending", d(2.0 * w));
    set("lumbar_rotation", d(4.0 * w));
    q
}

pub fn ground_truth(model: &SkeletalModel, frames: usize) -> JointAngleTrajectory {
    let mut t = JointAngleTrajectory::for_model(model, RATE, 0.0);
    for f in 0..frames {
        t.push_frame(&JointAngleTrajectory::to_report_units(model, &squat_q(model, f as f64 / RATE)), None);
    }
    t
}

pub fn cameras() -> [CameraModel; 2] {
    let target = Point3::new(0.0, 0.8, 0.0);
    let r = 4.0;
    let c = (PI / 4.0).cos() * r;
    let make = |name: &str, z: f64| {
        CameraModel::look_at(
            name,
            (1920, 1080),
            (1500.0, 1500.0, 960.0, 540.0),
            Point3::new(c, 1.2, z),
            target,
            Vector3::y(),
        )
        .expect("valid camera")
    };
    [make("cam1", c), make("cam2", -c)]
}

/// Per-camera keypoint files for the model's markers.
pub fn keypoint_files(model: &SkeletalModel, frames: usize, sigma: f64, seed: u64) -> Vec<KeypointFile> {
    let scales = ScaleSet::uniform(model, 1.0);
    let names = model.marker_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cameras()
        .iter()
        .map(|cam| KeypointFile {
            fps: RATE,
            schema: names.clone(),
            frames: (0..frames)
                .map(|f| {
                    let q = squat_q(model, f as f64 / RATE);
                    let markers = fk_markers(model, &scales, &q).expect("in-bounds pose");
                    KeypointFrame {
                        index: f,
                        keypoints: markers
                            .iter()
                            .map(|(_, p)| {
                                let o = project_point(cam, p).expect("marker in front of camera");
                                let nu: f64 = StandardNormal.sample(&mut rng);
                                let nv: f64 = StandardNormal.sample(&mut rng);
                                [o.u + sigma * nu, o.v + sigma * nv, 0.95]
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect()
}

pub fn inputs(model: &SkeletalModel, frames: usize, sigma: f64, seed: u64) -> TrialInputs {
    let schema = kinebench::synth::KeypointSchema::new(model.marker_names()).unwrap();
    let streams = cameras()
        .into_iter()
        .zip(keypoint_files(model, frames, sigma, seed))
        .map(|(camera, file)| CameraStream {
            camera,
            keypoints: kinebench::formats::ingest_keypoints_str(&file.to_json_string(), &schema, 0.3).unwrap(),
            frame_offset: 0,
        })
        .collect();
    TrialInputs {
        trial: format!("squat_sigma{sigma}"),
        streams,
        ground_truth: Some(ground_truth(model, frames)),
        static_markers: None,
    }
}

/// Writes cameras, keypoint files, ground truth and `bundle.json` into `dir`.
pub fn write_trial(dir: &Path, trial: &str, frames: usize, sigma: f64, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let model = SkeletalModel::default_benchmark();
    let mut cams = Vec::new();
    for (cam, file) in cameras().iter().zip(keypoint_files(&model, frames, sigma, seed)) {
        let cam_path = dir.join(format!("{}.json", cam.name()));
        std::fs::write(&cam_path, cam.to_json_string()).unwrap();
        let kp_path = dir.join(format!("{trial}_{}_keypoints.json", cam.name()));
        file.save(&kp_path).unwrap();
        cams.push(CameraInput {
            camera: cam_path.file_name().unwrap().into(),
            keypoints: kp_path.file_name().unwrap().into(),
            frame_offset: 0,
        });
    }
    let gt = dir.join(format!("{trial}_gt.mot"));
    write_mot(&ground_truth(&model, frames), &gt).unwrap();
    let bundle = TrialBundle {
        trial: trial.into(),
        subject: Some("synthetic".into()),
        fps: RATE,
        cameras: cams,
        ground_truth: Some(gt.file_name().unwrap().into()),
        static_trc: None,
    };
    let path = dir.join(format!("{trial}_bundle.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&bundle).unwrap()).unwrap();
    path
}

/// 3D marker series straight from forward kinematics.
pub fn marker_series(model: &SkeletalModel, scales: &ScaleSet, qs: &[Vec<f64>], rate: f64) -> TimeSeries {
    let names = model.marker_names();
    let mut data = Vec::new();
    for q in qs {
        for p in model.marker_positions(scales, q) {
            data.extend([p.x, p.y, p.z]);
        }
    }
    TimeSeries::new(rate, kinebench::formats::xyz_channels(&names), data).unwrap()
}
