//! The full model: feature maps, per-point aggregation, deformation, field
//! queries and volume rendering of ray batches and whole images.

use autodiff::{Bound, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{encoded_len, generate_ray, positional_encode, ray_bounds, Aabb, Camera, Ray};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{aggregate_batch, push_encoded_view_geometry, view_geometry, FeatureMap, SourceView};
use crate::field::{deform_batch, push_descriptor, query_batch};
use crate::math::Vec3;
use crate::nets::{descriptor_dim, view_geometry_dim, Architecture, Networks};
use crate::render::{merge_depths, sample_importance, stratified};
use crate::skeleton::{
    inverse_skin, pose_descriptor, skinning_weights, PosedSkeleton, Skeleton, SkeletonPose, SkinningWeights,
};

/// Architecture, parameters and configuration of one model.
#[derive(Clone, Debug)]
pub struct HumanRf<T> {
    pub config: Config,
    pub arch: Architecture,
    pub nets: Networks<T>,
    pub joints: usize,
}

impl<T: Real> HumanRf<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: Config, joints: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (arch, nets) = Architecture::build(&config.model, joints, &mut rng)?;
        Ok(Self {
            config,
            arch,
            nets,
            joints,
        })
    }

    /// Model with the given parameters; fails if they do not fit the config.
    pub fn with_networks(config: Config, joints: usize, nets: &Networks<T>) -> Result<Self> {
        let mut m = Self::new(config, joints)?;
        m.nets.load_from(nets)?;
        Ok(m)
    }

    pub fn feature_maps(&self, sources: &[SourceView]) -> Result<Vec<FeatureMap<T>>> {
        sources
            .iter()
            .map(|s| crate::features::extract_features(&self.arch, &self.nets, s))
            .collect()
    }
}

/// Tape handles for the four networks used while rendering.
pub struct BoundNets {
    pub encoder: Bound,
    pub view_weights: Bound,
    pub deform: Bound,
    pub field: Bound,
}

/// Which networks receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub view_weights: bool,
    pub deform: bool,
    pub field: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        encoder: false,
        view_weights: false,
        deform: false,
        field: false,
    };
    pub const ALL: Trainable = Trainable {
        encoder: true,
        view_weights: true,
        deform: true,
        field: true,
    };
}

impl BoundNets {
    pub fn bind<T: Real>(tape: &mut Tape<T>, nets: &Networks<T>, which: Trainable) -> Self {
        let b = |tape: &mut Tape<T>, set: &autodiff::ParameterSet<T>, on: bool| {
            if on {
                set.bind(tape)
            } else {
                set.bind_frozen(tape)
            }
        };
        Self {
            encoder: b(tape, &nets.encoder, which.encoder),
            view_weights: b(tape, &nets.view_weights, which.view_weights),
            deform: b(tape, &nets.deform, which.deform),
            field: b(tape, &nets.field, which.field),
        }
    }
}

/// A posed frame seen by a set of source cameras.
#[derive(Clone, Debug)]
pub struct FrameScene {
    pub posed: PosedSkeleton,
    /// Posed joints' box dilated by the configured margin.
    pub bounds: Aabb,
    pub sources: Vec<Camera>,
}

impl FrameScene {
    pub fn new(skeleton: &Skeleton, pose: &SkeletonPose, sources: Vec<Camera>, margin: f64) -> Result<Self> {
        let posed = PosedSkeleton::new(skeleton, pose)?;
        let bounds = Aabb::from_points(posed.joints.iter().copied())
            .ok_or_else(|| Error::InvalidSkeleton("no joints".into()))?
            .dilate(margin);
        Ok(Self {
            posed,
            bounds,
            sources,
        })
    }

    /// Clips a ray to the scene bounds; `None` on a miss.
    pub fn bound_ray(&self, ray: &Ray) -> Option<Ray> {
        ray_bounds(ray, &self.bounds).map(|(n, f)| ray.with_bounds(n, f))
    }

    /// Inverse skinning with a fallback to the dominant joint's rigid
    /// transform when the blended transform is singular.
    pub fn canonicalize(&self, p: Vec3, tau: f64) -> Vec3 {
        let w = skinning_weights(p, &self.posed, tau);
        match inverse_skin(p, &self.posed, &w) {
            Ok(c) => c,
            Err(_) => {
                let j = w.0.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|e| e.0).unwrap_or(0);
                let one = SkinningWeights::one_hot(w.0.len(), j);
                inverse_skin(p, &self.posed, &one).unwrap_or(p)
            }
        }
    }
}

/// Everything about a set of sample points that does not depend on
/// network parameters.
pub struct PointBatch {
    pub n: usize,
    pub views: usize,
    skinned: Vec<f64>,
    descriptor: Vec<f64>,
    geometry: Vec<f64>,
    uv: Vec<Vec<f64>>,
    valid: Vec<bool>,
    encoded_dirs: Vec<f64>,
}

impl PointBatch {
    pub fn new(scene: &FrameScene, config: &Config, points: &[Vec3], dirs: &[Vec3]) -> Self {
        let m = &config.model;
        let n = points.len();
        let k = scene.sources.len();
        let joints = scene.posed.num_joints();
        let gdim = view_geometry_dim(m);
        let mut b = PointBatch {
            n,
            views: k,
            skinned: Vec::with_capacity(n * 3),
            descriptor: Vec::with_capacity(n * descriptor_dim(m, joints)),
            geometry: Vec::with_capacity(n * k * gdim),
            uv: vec![Vec::with_capacity(n * 2); k],
            valid: Vec::with_capacity(n * k),
            encoded_dirs: Vec::with_capacity(n * encoded_len(3, m.direction_freqs)),
        };
        let mut last_dir = None;
        let mut last_enc = Vec::new();
        for (&p, &d) in points.iter().zip(dirs) {
            b.skinned.extend_from_slice(&scene.canonicalize(p, m.skinning_tau).0);
            push_descriptor(&mut b.descriptor, &pose_descriptor(p, &scene.posed), m.distance_freqs);
            if last_dir != Some(d) {
                last_enc = positional_encode(&d.0, m.direction_freqs);
                last_dir = Some(d);
            }
            b.encoded_dirs.extend_from_slice(&last_enc);
            for (v, cam) in scene.sources.iter().enumerate() {
                let g = view_geometry(cam, p, d);
                push_encoded_view_geometry(&mut b.geometry, &last_enc, g.source_dir, g.cos_theta, m.direction_freqs);
                b.uv[v].extend_from_slice(&if g.valid { g.q } else { [-1.0, -1.0] });
                b.valid.push(g.valid);
            }
        }
        b
    }
}

fn constant<T: Real>(tape: &mut Tape<T>, rows: usize, values: &[f64]) -> Result<Var> {
    let cols = if rows == 0 { 0 } else { values.len() / rows };
    Ok(tape.constant(Tensor::new(vec![rows, cols], values.iter().map(|&v| T::c(v)).collect())?))
}

/// Tape outputs for a [`PointBatch`].
pub struct PointQuery {
    pub sigma: Var,
    pub color: Option<Var>,
    pub residual: Var,
    pub view_weights: Var,
    pub feature: Var,
}

pub fn query_points<T: Real>(
    tape: &mut Tape<T>,
    model: &HumanRf<T>,
    bound: &BoundNets,
    maps: &[Var],
    batch: &PointBatch,
    need_color: bool,
) -> Result<PointQuery> {
    let m = &model.config.model;
    let (n, k) = (batch.n, batch.views);
    if maps.len() != k {
        return Err(Error::SizeMismatch(format!("{} feature maps for {} views", maps.len(), k)));
    }
    let mut per_view = Vec::with_capacity(k);
    for (v, &map) in maps.iter().enumerate() {
        let uv = constant(tape, n, &batch.uv[v])?;
        let (f, _) = tape.bilinear_sample(map, uv)?;
        per_view.push(f);
    }
    let stacked = tape.concat(&per_view)?;
    let feats = tape.reshape(stacked, vec![n * k, m.feature_dim])?;
    let geometry = constant(tape, n * k, &batch.geometry)?;
    let (feature, weights) = aggregate_batch(
        tape,
        &model.arch.view_weights,
        &bound.view_weights,
        geometry,
        feats,
        batch.valid.clone(),
        k,
    )?;
    let descriptor = constant(tape, n, &batch.descriptor)?;
    let skinned = constant(tape, n, &batch.skinned)?;
    let (canonical, residual) = deform_batch(
        tape,
        &model.arch.deform,
        &bound.deform,
        descriptor,
        m.deform_uses_features.then_some(feature),
        skinned,
        m.deform_max,
    )?;
    let dirs = if need_color {
        Some((constant(tape, n, &batch.encoded_dirs)?, feature))
    } else {
        None
    };
    let (sigma, color) = query_batch(tape, &model.arch.field, &bound.field, canonical, dirs)?;
    Ok(PointQuery {
        sigma,
        color,
        residual,
        view_weights: weights,
        feature,
    })
}

/// How sample depths are drawn.
pub enum Sampling<'a> {
    /// Bin midpoints and midpoint quantiles; deterministic.
    Eval,
    /// Jittered strata drawn from the given generator.
    Train(&'a mut ChaCha8Rng),
}

/// Rendered rays on a tape. Only rays that hit the scene bounds are
/// rendered; `hit[i]` is the input index of output row `i`.
pub struct RayRender {
    /// `[R_hit, 5]` rows of `(r, g, b, alpha, depth)`.
    pub out: Var,
    pub hit: Vec<usize>,
    pub rays: Vec<Ray>,
    pub depths: Vec<Vec<f64>>,
}

fn sample_points(rays: &[Ray], depths: &[Vec<f64>]) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut pts = Vec::new();
    let mut dirs = Vec::new();
    for (r, ts) in rays.iter().zip(depths) {
        for &t in ts {
            pts.push(r.at(t));
            dirs.push(r.dir);
        }
    }
    (pts, dirs)
}

/// Coarse densities for importance sampling, evaluated without gradients.
fn coarse_weights<T: Real>(
    model: &HumanRf<T>,
    scene: &FrameScene,
    map_values: &[Tensor<T>],
    rays: &[Ray],
    depths: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<T>::new();
    let bound = BoundNets::bind(&mut tape, &model.nets, Trainable::NONE);
    let maps: Vec<Var> = map_values.iter().map(|m| tape.constant(m.clone())).collect();
    let (pts, dirs) = sample_points(rays, depths);
    let batch = PointBatch::new(scene, &model.config, &pts, &dirs);
    let q = query_points(&mut tape, model, &bound, &maps, &batch, false)?;
    let sigma = tape.value(q.sigma).data();
    let s = depths[0].len();
    let mut out = Vec::with_capacity(rays.len());
    for (r, (ray, ts)) in rays.iter().zip(depths).enumerate() {
        let sig: Vec<f64> = sigma[r * s..(r + 1) * s].iter().map(|v| v.as_f64()).collect();
        let colors = vec![0.0; 3 * s];
        let (_, w) = autodiff::kernels::composite_forward(&sig, &colors, ts, &[ray.far], s);
        out.push(w);
    }
    Ok(out)
}

/// Renders rays (unbounded; clipping happens here) against `maps`, which
/// live on `tape` and align with `scene.sources`.
pub fn render_rays<T: Real>(
    tape: &mut Tape<T>,
    model: &HumanRf<T>,
    bound: &BoundNets,
    scene: &FrameScene,
    maps: &[Var],
    rays: &[Ray],
    mut sampling: Sampling<'_>,
) -> Result<Option<RayRender>> {
    let rc = &model.config.render;
    let mut hit = Vec::new();
    let mut bounded = Vec::new();
    for (i, r) in rays.iter().enumerate() {
        if let Some(b) = scene.bound_ray(r) {
            hit.push(i);
            bounded.push(b);
        }
    }
    if bounded.is_empty() {
        return Ok(None);
    }
    let mut depths: Vec<Vec<f64>> = bounded
        .iter()
        .map(|r| match &mut sampling {
            Sampling::Eval => stratified::<ChaCha8Rng>(r.near, r.far, rc.coarse_samples, None),
            Sampling::Train(rng) => stratified(r.near, r.far, rc.coarse_samples, Some(&mut **rng)),
        })
        .collect();
    if rc.fine_samples > 0 {
        let map_values: Vec<Tensor<T>> = maps.iter().map(|&m| tape.value(m).clone()).collect();
        let weights = coarse_weights(model, scene, &map_values, &bounded, &depths)?;
        for ((ts, w), r) in depths.iter_mut().zip(&weights).zip(&bounded) {
            let fine = match &mut sampling {
                Sampling::Eval => {
                    sample_importance::<ChaCha8Rng>(w, r.near, r.far, rc.fine_samples, rc.importance_floor, None)
                }
                Sampling::Train(rng) => {
                    sample_importance(w, r.near, r.far, rc.fine_samples, rc.importance_floor, Some(&mut **rng))
                }
            };
            *ts = merge_depths(ts, &fine);
        }
    }
    let (pts, dirs) = sample_points(&bounded, &depths);
    let batch = PointBatch::new(scene, &model.config, &pts, &dirs);
    let q = query_points(tape, model, bound, maps, &batch, true)?;
    let rcount = bounded.len();
    let s = depths[0].len();
    let sigma = tape.reshape(q.sigma, vec![rcount, s])?;
    let flat_t: Vec<f64> = depths.iter().flatten().copied().collect();
    let t = constant(tape, rcount, &flat_t)?;
    let far = bounded.iter().map(|r| T::c(r.far)).collect();
    let out = tape.composite(sigma, q.color.expect("color requested"), t, far)?;
    Ok(Some(RayRender {
        out,
        hit,
        rays: bounded,
        depths,
    }))
}

/// A rendered view. Depth is camera-space z; background pixels (alpha
/// below the configured threshold) carry the z of the far bound, pixels
/// whose ray misses the scene bounds carry `INFINITY`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    /// True where alpha reaches the background threshold.
    pub foreground: Vec<bool>,
}

impl RenderedImage {
    pub fn rgb8(&self) -> crate::image::Rgb8 {
        crate::image::Rgb8::from_unit(self.width, self.height, &self.rgb)
    }

    pub fn alpha8(&self) -> Vec<u8> {
        self.alpha.iter().map(|&a| crate::image::quantize_unit(a)).collect()
    }

    /// Millimeter depth with 0 for background and misses.
    pub fn depth_mm(&self) -> Vec<u16> {
        self.depth
            .iter()
            .zip(&self.foreground)
            .map(|(&d, &fg)| if fg { crate::image::quantize_depth_mm(d) } else { 0 })
            .collect()
    }
}

/// Renders every pixel center of `camera` in deterministic mode.
pub fn render_image<T: Real>(
    model: &HumanRf<T>,
    scene: &FrameScene,
    maps: &[FeatureMap<T>],
    camera: &Camera,
) -> Result<RenderedImage> {
    let (w, h) = (camera.width, camera.height);
    let mut img = RenderedImage {
        width: w,
        height: h,
        rgb: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        depth: vec![f64::INFINITY; w * h],
        foreground: vec![false; w * h],
    };
    let forward = camera.forward();
    let chunk = model.config.render.chunk_rays.max(1);
    let pixels: Vec<usize> = (0..w * h).collect();
    for block in pixels.chunks(chunk) {
        let rays: Vec<Ray> = block
            .iter()
            .map(|&i| generate_ray(camera, [(i % w) as f64, (i / w) as f64]))
            .collect();
        let mut tape = Tape::<T>::new();
        let bound = BoundNets::bind(&mut tape, &model.nets, Trainable::NONE);
        let vars: Vec<Var> = maps.iter().map(|m| tape.constant(m.values.clone())).collect();
        let Some(rr) = render_rays(&mut tape, model, &bound, scene, &vars, &rays, Sampling::Eval)? else {
            continue;
        };
        let out = tape.value(rr.out).data();
        for (row, (&local, ray)) in rr.hit.iter().zip(&rr.rays).enumerate() {
            let px = block[local];
            let o = &out[row * 5..row * 5 + 5];
            for c in 0..3 {
                img.rgb[3 * px + c] = o[c].as_f64();
            }
            let alpha = o[3].as_f64();
            img.alpha[px] = alpha;
            let cosine = ray.dir.dot(forward);
            let fg = alpha >= model.config.render.background_alpha;
            img.foreground[px] = fg;
            img.depth[px] = if fg { o[4].as_f64() * cosine } else { ray.far * cosine };
        }
    }
    Ok(img)
}

/// Draws `count` indices from `0..n` without replacement (partial shuffle).
pub fn choose_distinct<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let count = count.min(n);
    for i in 0..count {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Azimuth of a camera's optical axis in the horizontal (x, z) plane.
pub fn axis_azimuth(camera: &Camera) -> f64 {
    let f = camera.forward();
    f.x().atan2(f.z())
}

/// Signed horizontal angle from `from`'s optical axis to `to`'s, in `(-pi, pi]`.
pub fn azimuth_delta(from: &Camera, to: &Camera) -> f64 {
    let d = axis_azimuth(to) - axis_azimuth(from);
    let wrapped = d.rem_euclid(std::f64::consts::TAU);
    if wrapped > std::f64::consts::PI {
        wrapped - std::f64::consts::TAU
    } else {
        wrapped
    }
}

/// Camera indices ordered by horizontal angular distance to `target`,
/// ties broken by index.
pub fn views_by_angle(cameras: &[Camera], target: &Camera) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| (azimuth_delta(target, c).abs(), i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().map(|e| e.1).collect()
}

/// The `k` feature sources for rendering dataset view `target`: the nearest
/// other views when enough exist, otherwise the nearest views including the
/// target itself.
pub fn source_views(cameras: &[Camera], target: usize, k: usize) -> Vec<usize> {
    let ranked = views_by_angle(cameras, &cameras[target]);
    let k = k.min(cameras.len()).max(1);
    let mut chosen: Vec<usize> = if cameras.len() > k {
        ranked.into_iter().filter(|&v| v != target).take(k).collect()
    } else {
        ranked.into_iter().take(k).collect()
    };
    chosen.sort_unstable();
    chosen
}

/// The `k` dataset views nearest to an arbitrary camera, in index order.
pub fn sources_for_camera(cameras: &[Camera], camera: &Camera, k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = views_by_angle(cameras, camera).into_iter().take(k.max(1)).collect();
    v.sort_unstable();
    v
}

/// Volume renders `camera` at frame position `frame` using the listed
/// dataset views as feature sources.
pub fn render_frame<T: Real>(
    model: &HumanRf<T>,
    ds: &crate::dataset::Dataset,
    frame: usize,
    camera: &Camera,
    sources: &[usize],
) -> Result<RenderedImage> {
    let f = ds
        .frames
        .get(frame)
        .ok_or_else(|| Error::InvalidInput(format!("frame position {frame} out of range")))?;
    let scene = FrameScene::new(
        &ds.skeleton,
        &f.pose,
        sources.iter().map(|&v| ds.cameras[v].clone()).collect(),
        model.config.model.bounds_margin,
    )?;
    let maps = crate::train::frame_feature_maps(model, ds, frame, sources)?;
    render_image(model, &scene, &maps, camera)
}
