//! Runs every example at a reduced scale.
#![allow(dead_code)]

#[path = "../examples/gradient_check.rs"]
mod gradient_check;
#[path = "../examples/volume_rendering.rs"]
mod volume_rendering;
#[path = "../examples/datagen.rs"]
mod datagen;
#[path = "../examples/overfit.rs"]
mod overfit;
#[path = "../examples/finetune.rs"]
mod finetune;
#[path = "../examples/orbit.rs"]
mod orbit;
#[path = "../examples/metrics.rs"]
mod metrics;

#[test]
fn gradient_check_agrees() {
    assert!(gradient_check::run(8) < 1e-6);
}

#[test]
fn volume_rendering_converges() {
    let errs = volume_rendering::run(2.0, 1.0, &[16, 64, 256]);
    assert!(errs[2].1 < 1e-3 && errs[2].1 < errs[0].1);
}

#[test]
fn skinning_round_trips() {
    let (shared, reestimated) = skinning::run(humanrf::synth::Motion::Twist, 3);
    assert!(shared < 1e-9 && reestimated < 1e-2);
}

#[test]
fn datagen_writes_every_view() {
    let dir = tempfile::tempdir().unwrap();
    let spec = humanrf::dataset::DatagenSpec::new(2, 2, 16, 1, humanrf::synth::Motion::IdleSway);
    assert_eq!(datagen::run(dir.path(), &spec).unwrap(), 4);
}

#[test]
fn short_training_examples_run() {
    let s = overfit::run(3, 32).unwrap();
    assert!(s.psnr.is_finite() && (0.0..=1.0).contains(&s.iou));
    let (before, after) = finetune::run(2, 2, 32).unwrap();
    assert!(before.is_finite() && after.is_finite());
    let (volume, blended) = blending::run(2, 2, 32).unwrap();
    assert!(volume.is_finite() && blended.is_finite());

    let dir = tempfile::tempdir().unwrap();
    let ck = orbit::quick_model(2, 32).unwrap();
    assert_eq!(orbit::run(&ck, 3, 32, dir.path()).unwrap(), 6);
}

#[test]
fn metrics_known_cases() {
    let (p, m, s, neg) = metrics::run(64);
    assert!((p - 48.13).abs() < 0.01);
    assert_eq!(m, 1.0);
    assert!(s > 0.99 && neg < 0.0);
}
