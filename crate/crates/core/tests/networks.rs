mod support;

use autodiff::gradcheck::{central_difference, max_relative_error};
use autodiff::{Tape, Tensor};
use humanrf::config::Config;
use humanrf::features::{aggregate, fetch, view_geometry, FeatureMap, PixelFetch};
use humanrf::field::{deform, query_batch, query_field};
use humanrf::math::Vec3;
use humanrf::nets::Networks;
use humanrf::pipeline::HumanRf;
use humanrf::skeleton::{pose_descriptor, skinning_weights, PosedSkeleton, Skeleton, SkeletonPose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> HumanRf<f64> {
    HumanRf::new(support::tiny_config(), 24).unwrap()
}

fn random_fetch(rng: &mut ChaCha8Rng, c: usize, valid: bool) -> PixelFetch {
    let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalized();
    let cos = rng.random_range(-1.0f64..1.0);
    PixelFetch {
        feature: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        q: [3.0, 4.0],
        theta: cos.acos(),
        cos_theta: cos,
        source_dir: d,
        valid,
    }
}

#[test]
fn aggregation_is_permutation_equivariant() {
    let model = tiny_model();
    let m = &model.config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = Vec3::new(0.1, -0.2, 1.0).normalized();
    for trial in 0..20 {
        let k = 2 + trial % 5;
        let fetches: Vec<_> = (0..k).map(|i| random_fetch(&mut rng, m.feature_dim, i != 1)).collect();
        let a = aggregate(&fetches, target, &model.arch.view_weights, &model.nets, m).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left(1 + trial % (k - 1));
        let permuted: Vec<_> = order.iter().map(|&i| fetches[i].clone()).collect();
        let b = aggregate(&permuted, target, &model.arch.view_weights, &model.nets, m).unwrap();
        for (x, y) in a.feature.iter().zip(&b.feature) {
            assert!((x - y).abs() < 1e-6);
        }
        for (pos, &i) in order.iter().enumerate() {
            assert!((b.weights[pos] - a.weights[i]).abs() < 1e-12);
        }
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a.weights[1], 0.0);
    }
}

#[test]
fn single_and_symmetric_views() {
    let model = tiny_model();
    let m = &model.config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = Vec3::new(0.0, 0.0, 1.0);
    let one = random_fetch(&mut rng, m.feature_dim, true);
    let a = aggregate(std::slice::from_ref(&one), target, &model.arch.view_weights, &model.nets, m).unwrap();
    assert_eq!(a.weights, vec![1.0]);
    let b = aggregate(&[one.clone(), one], target, &model.arch.view_weights, &model.nets, m).unwrap();
    assert!((b.weights[0] - 0.5).abs() < 1e-12 && (b.weights[1] - 0.5).abs() < 1e-12);
}

#[test]
fn view_angle_extremes_and_points_behind_the_camera() {
    let cams = support::camera_ring(4, 32);
    let cam = &cams[0];
    let p = cam.center() + cam.forward() * 3.0;
    let same = view_geometry(cam, p, cam.forward());
    assert!((same.cos_theta - 1.0).abs() < 1e-12);
    let opposite = view_geometry(cam, p, -cam.forward());
    assert!((opposite.cos_theta + 1.0).abs() < 1e-12);
    let map = FeatureMap {
        values: Tensor::<f64>::full(vec![32, 32, 4], 0.7),
    };
    let behind = fetch(cam, &map, cam.center() - cam.forward(), cam.forward());
    assert!(!behind.valid);
    assert!(behind.feature.iter().all(|&v| v == 0.0));
    let front = fetch(cam, &map, p, cam.forward());
    assert!(front.valid && front.theta.abs() < 1e-6);
    assert!(front.feature.iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

fn zeroed(nets: &Networks<f64>, which: usize) -> Networks<f64> {
    let mut n = nets.clone();
    for p in n.sets_mut()[which].iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    n
}

#[test]
fn zero_deformation_network_leaves_the_skinned_point() {
    let model = tiny_model();
    let m = &model.config.model;
    let sk = Skeleton::humanoid();
    let posed = PosedSkeleton::new(&sk, &SkeletonPose::identity(24)).unwrap();
    let p = Vec3::new(0.05, 0.9, 0.02);
    let w = skinning_weights(p, &posed, m.skinning_tau);
    let d = pose_descriptor(p, &posed);
    let nets = zeroed(&model.nets, 2);
    let out = deform(p, &posed, &w, &d, &vec![0.3; m.feature_dim], &model.arch, &nets, m).unwrap();
    assert_eq!(out.residual, Vec3::ZERO);
    assert!((out.canonical - p).norm() < 1e-12);
}

#[test]
fn density_ignores_direction_and_feature() {
    let model = tiny_model();
    let m = &model.config.model;
    let p = Vec3::new(0.1, 0.4, -0.2);
    let a = query_field(p, Vec3::new(0.0, 0.0, 1.0), &vec![0.0; m.feature_dim], &model.arch, &model.nets, m).unwrap();
    let b = query_field(p, Vec3::new(1.0, 0.0, 0.0), &vec![0.9; m.feature_dim], &model.arch, &model.nets, m).unwrap();
    assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
    assert_ne!(a.color, b.color);
    assert!(a.sigma >= 0.0);
}

#[test]
fn density_gradient_wrt_position_matches_finite_differences() {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-0.8..0.8)).collect();
    let eval = |x: &[f64], grad: bool| {
        let mut t = Tape::new();
        let b = model.nets.field.bind_frozen(&mut t);
        let v = Tensor::new(vec![4, 3], x.to_vec()).unwrap();
        let p = if grad { t.variable(v) } else { t.constant(v) };
        let (sigma, _) = query_batch(&mut t, &model.arch.field, &b, p, None).unwrap();
        let l = support::readout(&mut t, sigma);
        let value = t.value(l).item();
        if grad {
            t.backward(l).unwrap();
            (value, t.grad_or_zeros(p).data().to_vec())
        } else {
            (value, Vec::new())
        }
    };
    let (_, analytic) = eval(&x0, true);
    let coords: Vec<usize> = (0..12).collect();
    let numeric = central_difference(&x0, &coords, support::H, |x| eval(x, false).0);
    let err = max_relative_error(&analytic, &numeric, support::FLOOR);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn default_architecture_builds() {
    let c = Config::default();
    let model = HumanRf::<f32>::new(c, 24).unwrap();
    assert_eq!(model.arch.appearance.in_dim(), 70);
}

proptest! {
    #[test]
    fn deformation_residual_is_bounded(
        seed in any::<u64>(),
        x in -1.0f64..1.0, y in -0.2f64..1.8, z in -1.0f64..1.0,
    ) {
        let mut c = support::tiny_config();
        c.seed = seed;
        let model = HumanRf::<f64>::new(c, 24).unwrap();
        let m = &model.config.model;
        let sk = Skeleton::humanoid();
        let posed = PosedSkeleton::new(&sk, &SkeletonPose::identity(24)).unwrap();
        let p = Vec3::new(x, y, z);
        let w = skinning_weights(p, &posed, m.skinning_tau);
        let d = pose_descriptor(p, &posed);
        let out = deform(p, &posed, &w, &d, &vec![5.0; m.feature_dim], &model.arch, &model.nets, m).unwrap();
        for v in out.residual.0 {
            prop_assert!(v.abs() <= m.deform_max + 1e-12);
        }
    }

    #[test]
    fn skinning_weights_vary_continuously(
        x in -0.8f64..0.8, y in -0.1f64..1.7, z in -0.3f64..0.3,
        dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
    ) {
        let sk = Skeleton::humanoid();
        let posed = PosedSkeleton::new(&sk, &SkeletonPose::identity(24)).unwrap();
        let tau = Config::default().model.skinning_tau;
        let p = Vec3::new(x, y, z);
        let dir = Vec3::new(dx, dy, dz);
        prop_assume!(dir.norm() > 1e-3);
        let dir = dir.normalized();
        let w0 = skinning_weights(p, &posed, tau);
        let mut prev = f64::INFINITY;
        for delta in [1e-3, 1e-4, 1e-5, 1e-6] {
            let w1 = skinning_weights(p + dir * delta, &posed, tau);
            let diff = w0.0.iter().zip(&w1.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= prev + 1e-12);
            prev = diff;
        }
        prop_assert!(prev < 1e-3, "jump {prev}");
    }
}
