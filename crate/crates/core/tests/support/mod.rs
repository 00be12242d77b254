//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use autodiff::gradcheck::{central_difference, max_relative_error, spread_indices};
use autodiff::{Bound, Tape, Tensor, Var};
use humanrf::blend::blend_batch;
use humanrf::camera::{generate_ray, Camera};
use humanrf::config::Config;
use humanrf::dataset::{generate_dataset, DatagenSpec, Dataset};
use humanrf::features::aggregate_batch;
use humanrf::field::{deform_batch, query_batch};
use humanrf::nets::{descriptor_dim, rgba_tensor, view_geometry_dim, Networks};
use humanrf::pipeline::{render_rays, BoundNets, FrameScene, HumanRf, Sampling};
use humanrf::synth::Motion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const MLP_TOL: f64 = 1e-4;
pub const SAMPLED_TOL: f64 = 1e-3;

/// Small widths so finite differences over every network stay cheap.
pub fn tiny_config() -> Config {
    let mut c = Config::desk();
    let m = &mut c.model;
    m.feature_dim = 4;
    m.encoder_widths = vec![4, 4, 6, 6];
    m.position_freqs = 3;
    m.direction_freqs = 1;
    m.distance_freqs = 1;
    m.view_weight_hidden = vec![8];
    m.deform_hidden = vec![8];
    m.field_width = 12;
    m.field_depth = 3;
    m.field_skip = 1;
    m.color_hidden = vec![8];
    m.blend_hidden = vec![8, 8];
    c.image.width = 32;
    c.image.height = 32;
    c.render.coarse_samples = 6;
    c.render.fine_samples = 0;
    c
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn constant(tape: &mut Tape<f64>, rows: usize, values: Vec<f64>) -> Var {
    let cols = values.len() / rows;
    tape.constant(Tensor::new(vec![rows, cols], values).unwrap())
}

/// Fixed, uneven weighted sum of all entries.
pub fn readout(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(shape, |i| ((i * 37 % 11) as f64 - 5.0) / 7.0 + 0.05));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn bind_all(tape: &mut Tape<f64>, nets: &Networks<f64>, grad: Option<usize>) -> Vec<Bound> {
    nets.sets()
        .iter()
        .enumerate()
        .map(|(i, s)| if Some(i) == grad { s.bind(tape) } else { s.bind_frozen(tape) })
        .collect()
}

pub fn bound_nets(b: &[Bound]) -> BoundNets {
    BoundNets {
        encoder: b[0].clone(),
        view_weights: b[1].clone(),
        deform: b[2].clone(),
        field: b[3].clone(),
    }
}

/// Largest relative error between tape gradients and central differences
/// over up to `samples` parameters of network `which`.
pub fn network_gradient_error(
    nets: &Networks<f64>,
    which: usize,
    samples: usize,
    loss: impl Fn(&mut Tape<f64>, &[Bound]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let bounds = bind_all(&mut tape, nets, Some(which));
    let l = loss(&mut tape, &bounds);
    tape.backward(l).unwrap();
    let grads = bounds[which].grads(&tape);
    let mut analytic = Vec::new();
    let mut index = Vec::new();
    for (p, g) in grads.grads.iter().enumerate() {
        let g = g.as_ref().unwrap();
        for (e, &v) in g.data().iter().enumerate() {
            analytic.push(v);
            index.push((p, e));
        }
    }
    let coords = spread_indices(analytic.len(), samples);
    let mut probe_nets = nets.clone();
    let ids: Vec<_> = nets.sets()[which].ids().collect();
    let x0: Vec<f64> = index
        .iter()
        .map(|&(p, e)| nets.sets()[which].get(ids[p]).data()[e])
        .collect();
    let numeric = central_difference(&x0, &coords, H, |x| {
        for &c in &coords {
            let (p, e) = index[c];
            probe_nets.sets_mut()[which].get_mut(ids[p]).data_mut()[e] = x[c];
        }
        let mut t = Tape::new();
        let b = bind_all(&mut t, &probe_nets, None);
        let l = loss(&mut t, &b);
        t.value(l).item()
    });
    let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    if picked.iter().all(|g| g.abs() < FLOOR) {
        return f64::INFINITY;
    }
    max_relative_error(&picked, &numeric, FLOOR)
}

pub struct GradientCase {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradientCase {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

/// Finite-difference checks of every trainable network and the composed
/// render path, in 64-bit.
pub fn gradient_suite() -> Vec<GradientCase> {
    let config = tiny_config();
    let ds = generate_dataset(&DatagenSpec::new(2, 1, 32, 3, Motion::ArmWave)).unwrap();
    let joints = ds.skeleton.num_joints();
    let model = HumanRf::<f64>::new(config.clone(), joints).unwrap();
    let m = &config.model;
    let arch = &model.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = Vec::new();

    let image = rgba_tensor::<f64>(&ds.frames[0].views[0].rgb.data, &ds.frames[0].views[0].mask, 32, 32);
    let enc = network_gradient_error(&model.nets, 0, 48, |t, b| {
        let x = t.constant(image.clone());
        let y = arch.encoder.forward(t, &b[0], x).unwrap();
        readout(t, y)
    });
    cases.push(GradientCase {
        name: "image encoder",
        error: enc,
        tolerance: SAMPLED_TOL,
    });

    let (n, k) = (5, 3);
    let geometry = random(&mut rng, n * k * view_geometry_dim(m), -1.0, 1.0);
    let feats = random(&mut rng, n * k * m.feature_dim, -1.0, 1.0);
    let valid: Vec<bool> = (0..n * k).map(|i| i % 4 != 1).collect();
    let vw = network_gradient_error(&model.nets, 1, 48, |t, b| {
        let g = constant(t, n * k, geometry.clone());
        let f = constant(t, n * k, feats.clone());
        let (agg, w) = aggregate_batch(t, &arch.view_weights, &b[1], g, f, valid.clone(), k).unwrap();
        let a = readout(t, agg);
        let c = readout(t, w);
        t.add(a, c).unwrap()
    });
    cases.push(GradientCase {
        name: "view weighting network",
        error: vw,
        tolerance: MLP_TOL,
    });

    let desc = random(&mut rng, n * descriptor_dim(m, joints), -1.0, 1.0);
    let feature = random(&mut rng, n * m.feature_dim, -1.0, 1.0);
    let skinned = random(&mut rng, n * 3, -0.5, 0.5);
    let def = network_gradient_error(&model.nets, 2, 48, |t, b| {
        let d = constant(t, n, desc.clone());
        let f = constant(t, n, feature.clone());
        let s = constant(t, n, skinned.clone());
        let (p, _) = deform_batch(t, &arch.deform, &b[2], d, m.deform_uses_features.then_some(f), s, m.deform_max).unwrap();
        readout(t, p)
    });
    cases.push(GradientCase {
        name: "deformation network",
        error: def,
        tolerance: MLP_TOL,
    });

    let points = random(&mut rng, n * 3, -0.6, 0.6);
    let dirs = random(&mut rng, n * humanrf::camera::encoded_len(3, m.direction_freqs), -1.0, 1.0);
    let field = network_gradient_error(&model.nets, 3, 48, |t, b| {
        let p = constant(t, n, points.clone());
        let d = constant(t, n, dirs.clone());
        let f = constant(t, n, feature.clone());
        let (sigma, color) = query_batch(t, &arch.field, &b[3], p, Some((d, f))).unwrap();
        let a = readout(t, sigma);
        let c = readout(t, color.unwrap());
        t.add(a, c).unwrap()
    });
    cases.push(GradientCase {
        name: "radiance field",
        error: field,
        tolerance: MLP_TOL,
    });

    let rows = random(&mut rng, n * arch.appearance.in_dim(), -1.0, 1.0);
    let cand = random(&mut rng, 3 * n * 3, 0.0, 1.0);
    let app = network_gradient_error(&model.nets, 4, 48, |t, b| {
        let r = constant(t, n, rows.clone());
        let c = constant(t, 3 * n, cand.clone());
        let (color, w) = blend_batch(t, &arch.appearance, &b[4], r, c).unwrap();
        let a = readout(t, color);
        let c = readout(t, w);
        t.add(a, c).unwrap()
    });
    cases.push(GradientCase {
        name: "appearance blending network",
        error: app,
        tolerance: MLP_TOL,
    });

    let frame = &ds.frames[0];
    let scene = FrameScene::new(&ds.skeleton, &frame.pose, ds.cameras.clone(), m.bounds_margin).unwrap();
    let target = &ds.cameras[0];
    let rays: Vec<_> = [[15.0, 9.0], [16.0, 14.0], [14.5, 20.0], [17.0, 24.0]]
        .iter()
        .map(|&q| generate_ray(target, q))
        .collect();
    let images: Vec<Tensor<f64>> = frame
        .views
        .iter()
        .map(|v| rgba_tensor(&v.rgb.data, &v.mask, 32, 32))
        .collect();
    let composed = |which: usize, samples: usize| {
        network_gradient_error(&model.nets, which, samples, |t, b| {
            let bn = bound_nets(b);
            let maps: Vec<Var> = images
                .iter()
                .map(|img| {
                    let x = t.constant(img.clone());
                    arch.encoder.forward(t, &bn.encoder, x).unwrap()
                })
                .collect();
            let r = render_rays(t, &model, &bn, &scene, &maps, &rays, Sampling::Eval)
                .unwrap()
                .expect("rays hit the scene");
            readout(t, r.out)
        })
    };
    let worst = (0..4).map(|w| composed(w, 16)).fold(0.0, f64::max);
    cases.push(GradientCase {
        name: "composed render path",
        error: worst,
        tolerance: SAMPLED_TOL,
    });
    cases
}

/// Synthetic capture used by the overfit and determinism criteria.
pub fn overfit_dataset() -> Dataset {
    generate_dataset(&DatagenSpec::new(4, 2, 64, 7, Motion::ArmWave)).unwrap()
}

pub fn camera_ring(views: usize, size: usize) -> Vec<Camera> {
    humanrf::synth::RigSpec::ring(views, size).build().unwrap().cameras
}

pub struct SkinningErrors {
    pub shared: f64,
    pub reestimated: f64,
    pub points: usize,
}

/// Forward-skins canonical points lying within `tau` of a bone under every
/// motion preset, then maps them back with the same weights and with
/// weights re-estimated in posed space. Reports the worst errors in meters.
pub fn skinning_round_trip(samples_per_pose: usize) -> SkinningErrors {
    use humanrf::math::Vec3;
    use humanrf::skeleton::{forward_skin, inverse_skin, skinning_weights, PosedSkeleton, SkeletonPose};
    use humanrf::synth::{animate, build_actor};

    let tau = Config::default().model.skinning_tau;
    let actor = build_actor(3);
    let sk = &actor.skeleton;
    let rest = PosedSkeleton::new(sk, &SkeletonPose::identity(sk.num_joints())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = SkinningErrors {
        shared: 0.0,
        reestimated: 0.0,
        points: 0,
    };
    for motion in Motion::ALL {
        for t in (0..40).step_by(5) {
            let pose = animate(&actor, t, motion, 40).unwrap();
            let posed = PosedSkeleton::new(sk, &pose).unwrap();
            for _ in 0..samples_per_pose {
                let bone = sk.bones()[rng.random_range(0..sk.bones().len())];
                let along = rng.random_range(0.0..1.0);
                let axis = bone.head + (bone.tail - bone.head) * along;
                let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if dir.norm() < 1e-3 {
                    continue;
                }
                let canonical = axis + dir.normalized() * rng.random_range(0.0..tau);
                let w = skinning_weights(canonical, &rest, tau);
                let p = forward_skin(canonical, &posed, &w);
                let back = inverse_skin(p, &posed, &w).unwrap();
                out.shared = out.shared.max((back - canonical).norm());
                let w2 = skinning_weights(p, &posed, tau);
                let back2 = inverse_skin(p, &posed, &w2).unwrap();
                out.reestimated = out.reestimated.max((back2 - canonical).norm());
                out.points += 1;
            }
        }
    }
    out
}

/// Absolute alpha error of compositing a homogeneous medium of density
/// `sigma` over a segment of length `length` at each sample count, using
/// evaluation-mode stratified depths.
pub fn homogeneous_alpha_errors(sigma: f64, length: f64, counts: &[usize]) -> Vec<f64> {
    use humanrf::camera::Ray;
    use humanrf::math::Vec3;
    use humanrf::render::{composite, sample_stratified};

    let near = 0.5;
    let ray = Ray {
        origin: Vec3::ZERO,
        dir: Vec3::new(0.0, 0.0, 1.0),
        near,
        far: near + length,
    };
    let exact = 1.0 - (-sigma * length).exp();
    counts
        .iter()
        .map(|&n| {
            let t = sample_stratified::<ChaCha8Rng>(&ray, n, None).unwrap();
            let out = composite(&vec![sigma; n], &vec![[0.5; 3]; n], &t, ray.far).unwrap();
            (out.alpha - exact).abs()
        })
        .collect()
}
