use humanrf::camera::Camera;
use humanrf::dataset::{generate_dataset, read_dataset, view_file, write_dataset, DatagenSpec};
use humanrf::error::Error;
use humanrf::math::Vec3;
use humanrf::skeleton::{PosedSkeleton, SkeletonPose};
use humanrf::synth::{animate, build_actor, render_ground_truth, ActorModel, Albedo, Motion};

fn sphere_view(d: f64, r: f64, size: usize) -> (Camera, humanrf::synth::GroundTruth) {
    let actor = ActorModel::sphere(Vec3::ZERO, r, Albedo::solid([0.8, 0.4, 0.2]));
    let cam = Camera::look_at(
        Vec3::new(0.0, 0.0, -d),
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        1.35 * size as f64,
        size,
        size,
    )
    .unwrap();
    let gt = render_ground_truth(&actor, &SkeletonPose::identity(1), &cam).unwrap();
    (cam, gt)
}

#[test]
fn sphere_projects_to_a_disc_of_the_pinhole_radius() {
    for (d, r) in [(3.0, 0.3), (2.0, 0.5), (4.0, 0.2)] {
        let (cam, gt) = sphere_view(d, r, 65);
        let expect = cam.fx * r / d;
        let (cx, cy) = (cam.cx, cam.cy);
        for y in 0..65 {
            for x in 0..65 {
                let rho = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let inside = gt.mask[y * 65 + x];
                if rho < expect - 1.0 {
                    assert!(inside, "pixel ({x},{y}) at {rho:.2} px should be covered");
                }
                if rho > expect + 1.0 {
                    assert!(!inside, "pixel ({x},{y}) at {rho:.2} px should be empty");
                }
            }
        }
        let center = gt.depth[32 * 65 + 32];
        assert!((center - (d - r)).abs() < 1e-3, "center depth {center}");
    }
}

#[test]
fn joints_move_continuously_between_frames() {
    let actor = build_actor(7);
    let bound = 0.1;
    for motion in Motion::ALL {
        let mut prev: Option<Vec<Vec3>> = None;
        for t in 0..=40 {
            let pose = animate(&actor, t, motion, 40).unwrap();
            let joints = PosedSkeleton::new(&actor.skeleton, &pose).unwrap().joints;
            if let Some(p) = &prev {
                let step = p.iter().zip(&joints).map(|(a, b)| (*a - *b).norm()).fold(0.0, f64::max);
                assert!(step < bound, "{motion}: frame {t} moved a joint {step:.3} m");
            }
            prev = Some(joints);
        }
    }
}

#[test]
fn dataset_round_trips_and_counts_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&DatagenSpec::new(6, 10, 16, 7, Motion::ArmWave)).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    let mut manifests = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            for f in std::fs::read_dir(&path).unwrap() {
                let name = f.unwrap().file_name().into_string().unwrap();
                let kind = name.split('.').nth(1).unwrap().to_string();
                *counts.entry(kind).or_insert(0) += 1;
            }
        } else {
            manifests += 1;
        }
    }
    assert_eq!(manifests, 1);
    assert_eq!(counts.get("rgb"), Some(&60));
    assert_eq!(counts.get("mask"), Some(&60));
    assert_eq!(counts.get("depth"), Some(&60));
    assert_eq!(counts.len(), 3);
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn missing_view_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&DatagenSpec::new(3, 2, 16, 1, Motion::IdleSway)).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let frame_dir = dir.path().join("frame_0001");
    std::fs::remove_file(view_file(&frame_dir, 2, "mask")).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::MissingView { frame, view, .. }) => assert_eq!((frame, view), (1, 2)),
        other => panic!("expected a missing-view error, got {other:?}"),
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = DatagenSpec::new(2, 2, 16, 9, Motion::WalkCycle);
    assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    let other = DatagenSpec { seed: 10, ..spec };
    assert_ne!(generate_dataset(&other).unwrap().frames[0].views[0].rgb, generate_dataset(&spec).unwrap().frames[0].views[0].rgb);
}
