//! Depth-guided appearance blending: target pixels are warped into the two
//! adjacent source views, visibility is decided by depth agreement, and a
//! learned softmax weight mixes the two warped colors with the
//! volume-rendered one.

use autodiff::{AdamConfig, AdamState, Bound, LrSchedule, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::camera::{project, Camera};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{Config, DepthSource};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::image::Rgb8;
use crate::math::Vec3;
use crate::nets::{appearance_block_dim, Mlp, Networks};
use crate::pipeline::{azimuth_delta, HumanRf, RenderedImage};
use crate::train::{frame_feature_maps, render_dataset_view, stage_rng, LogRecord};

/// Depth residuals are clamped to this many meters before entering the network.
pub const RESIDUAL_CAP: f64 = 1.0;
const SAME_AXIS: f64 = 1e-9;
/// Projections this close outside the image are snapped onto its border.
const BORDER_SNAP: f64 = 1e-6;

/// The two sources nearest to `target` by horizontal optical-axis angle,
/// one on each side when possible. Ties go to the lower index.
pub fn select_adjacent_views(target: &Camera, sources: &[Camera]) -> Result<(usize, usize)> {
    if sources.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: sources.len(),
        });
    }
    let delta: Vec<f64> = sources.iter().map(|c| azimuth_delta(target, c)).collect();
    let nearest = |pred: &dyn Fn(usize) -> bool| {
        (0..sources.len())
            .filter(|&i| pred(i))
            .min_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs()).then(a.cmp(&b)))
    };
    let v1 = nearest(&|_| true).expect("at least two sources");
    let second = nearest(&|i| i != v1).expect("at least two sources");
    if delta[v1].abs() < SAME_AXIS {
        return Ok((v1, second));
    }
    let side = delta[v1].signum();
    let v2 = nearest(&|i| i != v1 && delta[i].abs() >= SAME_AXIS && delta[i].signum() != side).unwrap_or(second);
    Ok((v1, v2))
}

/// A source view prepared for warping.
#[derive(Clone, Debug)]
pub struct WarpSource<'a, T> {
    pub camera: &'a Camera,
    pub rgb: &'a Rgb8,
    pub features: &'a FeatureMap<T>,
    /// Camera-space z per pixel in meters; non-finite where unknown.
    pub depth: &'a [f64],
}

/// What one target pixel sees in one source view.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpFetch {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub visible: bool,
    /// `|z_X - D|` in meters, clamped to [`RESIDUAL_CAP`].
    pub residual: f64,
    /// Cosine between the target ray and the source ray through the point.
    pub cos_theta: f64,
    pub q: [f64; 2],
}

fn snap(q: [f64; 2], camera: &Camera) -> [f64; 2] {
    let clampish = |v: f64, max: f64| {
        if v < 0.0 && v > -BORDER_SNAP {
            0.0
        } else if v > max && v < max + BORDER_SNAP {
            max
        } else {
            v
        }
    };
    [
        clampish(q[0], (camera.width - 1) as f64),
        clampish(q[1], (camera.height - 1) as f64),
    ]
}

fn sample_unit(rgb: &Rgb8, q: [f64; 2]) -> [f64; 3] {
    let data: Vec<f64> = rgb.data.iter().map(|&v| v as f64 / 255.0).collect();
    let (v, _) = autodiff::kernels::bilinear_forward(&data, rgb.height, rgb.width, 3, &q);
    [v[0], v[1], v[2]]
}

/// Back-projects target pixel `q` at camera depth `depth` and fetches the
/// source's color, feature and depth agreement at its projection.
pub fn warp_fetch<T: Real>(
    target: &Camera,
    q: [f64; 2],
    depth: f64,
    source: &WarpSource<'_, T>,
    visibility_eps: f64,
) -> WarpFetch {
    let x = target.unproject(q, depth);
    warp_point(target.center(), x, source, visibility_eps)
}

fn warp_point<T: Real>(target_center: Vec3, x: Vec3, source: &WarpSource<'_, T>, visibility_eps: f64) -> WarpFetch {
    let cam = source.camera;
    let c = source.features.channels();
    let cos_theta = (x - target_center)
        .normalized()
        .dot((x - cam.center()).normalized())
        .clamp(-1.0, 1.0);
    let pr = project(cam, x);
    let q = snap(pr.q, cam);
    let outside = WarpFetch {
        color: [0.0; 3],
        feature: vec![0.0; c],
        visible: false,
        residual: RESIDUAL_CAP,
        cos_theta,
        q,
    };
    if !pr.in_front || !cam.in_image(q) {
        return outside;
    }
    let Some(tap) = autodiff::kernels::bilinear_tap(q[0], q[1], cam.width, cam.height) else {
        return outside;
    };
    let taps = [
        (tap.x0, tap.y0, (1.0 - tap.fx) * (1.0 - tap.fy)),
        (tap.x1, tap.y0, tap.fx * (1.0 - tap.fy)),
        (tap.x0, tap.y1, (1.0 - tap.fx) * tap.fy),
        (tap.x1, tap.y1, tap.fx * tap.fy),
    ];
    let (mut nearest, mut sum, mut mass) = (f64::INFINITY, 0.0, 0.0);
    for (u, v, w) in taps {
        let d = source.depth[v * cam.width + u];
        if d.is_finite() {
            nearest = nearest.min((pr.depth - d).abs());
            sum += w * d;
            mass += w;
        }
    }
    let interpolated = if mass > 0.0 { (pr.depth - sum / mass).abs() } else { f64::INFINITY };
    let residual = nearest.min(interpolated).min(RESIDUAL_CAP);
    let shape = source.features.values.shape();
    let uv = [T::c(q[0]), T::c(q[1])];
    let (feat, _) = autodiff::kernels::bilinear_forward(source.features.values.data(), shape[0], shape[1], c, &uv);
    WarpFetch {
        color: sample_unit(source.rgb, q),
        feature: feat.iter().map(|v| v.as_f64()).collect(),
        visible: residual < visibility_eps,
        residual,
        cos_theta,
        q,
    }
}

/// Inputs of the blending network for one target pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendInputs {
    pub views: [WarpFetch; 2],
    pub volume_color: [f64; 3],
}

impl BlendInputs {
    /// Network input row `[f1, O1, r1, cos1, f2, O2, r2, cos2]`.
    pub fn push_row(&self, out: &mut Vec<f64>) {
        for v in &self.views {
            out.extend_from_slice(&v.feature);
            out.push(if v.visible { 1.0 } else { 0.0 });
            out.push(v.residual);
            out.push(v.cos_theta);
        }
    }

    /// Candidate colors in blend order: first source, volume, second source.
    pub fn candidates(&self) -> [[f64; 3]; 3] {
        [self.views[0].color, self.volume_color, self.views[1].color]
    }
}

/// Softmax blend weights over (first source, volume, second source).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendWeights(pub [f64; 3]);

/// `(C*, W)` for a batch: `rows` is `[N, 2(C+3)]`, `candidates` is
/// `[3N, 3]` ordered pixel-major.
pub fn blend_batch<T: Real>(tape: &mut Tape<T>, mlp: &Mlp, bound: &Bound, rows: Var, candidates: Var) -> Result<(Var, Var)> {
    let logits = mlp.forward(tape, bound, rows)?;
    let w = tape.softmax(logits);
    let c = tape.group_weighted_sum(w, candidates)?;
    Ok((c, w))
}

fn batch_tensors<T: Real>(inputs: &[&BlendInputs]) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = inputs.len();
    let mut rows = Vec::new();
    let mut cand = Vec::with_capacity(n * 9);
    for b in inputs {
        b.push_row(&mut rows);
        cand.extend(b.candidates().iter().flatten().copied());
    }
    let width = if n == 0 { 0 } else { rows.len() / n };
    Ok((
        Tensor::new(vec![n, width], rows.into_iter().map(T::c).collect())?,
        Tensor::new(vec![3 * n, 3], cand.into_iter().map(T::c).collect())?,
    ))
}

/// Blended colors and weights for a batch of pixels, without gradients.
pub fn blend_many<T: Real>(mlp: &Mlp, nets: &Networks<T>, inputs: &[&BlendInputs]) -> Result<Vec<([f64; 3], BlendWeights)>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let (rows, cand) = batch_tensors::<T>(inputs)?;
    let mut tape = Tape::<T>::new();
    let bound = nets.appearance.bind_frozen(&mut tape);
    let r = tape.constant(rows);
    let c = tape.constant(cand);
    let (color, w) = blend_batch(&mut tape, mlp, &bound, r, c)?;
    let color = tape.value(color).data();
    let w = tape.value(w).data();
    Ok((0..inputs.len())
        .map(|i| {
            let f = |s: &[T], k: usize| s[3 * i + k].as_f64();
            ([f(color, 0), f(color, 1), f(color, 2)], BlendWeights([f(w, 0), f(w, 1), f(w, 2)]))
        })
        .collect())
}

pub fn blend<T: Real>(inputs: &BlendInputs, mlp: &Mlp, nets: &Networks<T>) -> Result<([f64; 3], BlendWeights)> {
    Ok(blend_many(mlp, nets, &[inputs])?.remove(0))
}

/// Gathers [`BlendInputs`] for every pixel where `use_pixel` holds, given a
/// target depth map (camera z, meters).
pub fn gather_inputs<T: Real>(
    target: &Camera,
    depth: &[f64],
    volume_rgb: &[f64],
    use_pixel: &dyn Fn(usize) -> bool,
    sources: &[WarpSource<'_, T>],
    visibility_eps: f64,
) -> Result<Vec<(usize, BlendInputs)>> {
    let cams: Vec<Camera> = sources.iter().map(|s| s.camera.clone()).collect();
    let (a, b) = select_adjacent_views(target, &cams)?;
    let mut out = Vec::new();
    for i in 0..target.pixel_count() {
        if !use_pixel(i) || !depth[i].is_finite() {
            continue;
        }
        let q = [(i % target.width) as f64, (i / target.width) as f64];
        let x = target.unproject(q, depth[i]);
        let c = target.center();
        out.push((
            i,
            BlendInputs {
                views: [
                    warp_point(c, x, &sources[a], visibility_eps),
                    warp_point(c, x, &sources[b], visibility_eps),
                ],
                volume_color: [0, 1, 2].map(|k| volume_rgb[3 * i + k]),
            },
        ));
    }
    Ok(out)
}

/// Blends the foreground of a volume-rendered view. Background pixels keep
/// their volume color.
pub fn blend_image<T: Real>(
    model: &HumanRf<T>,
    target: &Camera,
    rendered: &RenderedImage,
    sources: &[WarpSource<'_, T>],
) -> Result<Vec<f64>> {
    let eps = model.config.visibility_threshold();
    let inputs = gather_inputs(target, &rendered.depth, &rendered.rgb, &|i| rendered.foreground[i], sources, eps)?;
    let refs: Vec<&BlendInputs> = inputs.iter().map(|(_, b)| b).collect();
    let mut rgb = rendered.rgb.clone();
    for chunk in (0..refs.len()).collect::<Vec<_>>().chunks(model.config.render.chunk_rays.max(1)) {
        let part: Vec<&BlendInputs> = chunk.iter().map(|&k| refs[k]).collect();
        for (&k, (c, _)) in chunk.iter().zip(blend_many(&model.arch.appearance, &model.nets, &part)?) {
            let px = inputs[k].0;
            rgb[3 * px..3 * px + 3].copy_from_slice(&c);
        }
    }
    Ok(rgb)
}

/// Dataset depth of one view as camera z in meters (`INFINITY` where empty).
pub fn dataset_depth(ds: &Dataset, frame: usize, view: usize) -> Result<Vec<f64>> {
    let v = &ds.frames[frame].views[view];
    if v.depth_mm.is_none() {
        return Err(Error::MissingDepth);
    }
    Ok((0..ds.width * ds.height).map(|i| v.depth_at(i).unwrap_or(f64::INFINITY)).collect())
}

/// Per-view data of one frame needed for warping.
pub struct FrameSources<T> {
    pub views: Vec<usize>,
    pub features: Vec<FeatureMap<T>>,
    pub depth: Vec<Vec<f64>>,
}

impl<T: Real> FrameSources<T> {
    /// Features of all listed views plus their depth from the dataset or
    /// rendered by the radiance field.
    pub fn new(model: &HumanRf<T>, ds: &Dataset, frame: usize, views: &[usize], depth: DepthSource) -> Result<Self> {
        let features = frame_feature_maps(model, ds, frame, views)?;
        let depth = views
            .iter()
            .map(|&v| match depth {
                DepthSource::Dataset => dataset_depth(ds, frame, v),
                DepthSource::Rendered => render_dataset_view(model, ds, frame, v).map(|(img, _)| img.depth),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            views: views.to_vec(),
            features,
            depth,
        })
    }

    pub fn warp_sources<'a>(&'a self, ds: &'a Dataset, frame: usize) -> Vec<WarpSource<'a, T>> {
        self.views
            .iter()
            .enumerate()
            .map(|(k, &v)| WarpSource {
                camera: &ds.cameras[v],
                rgb: &ds.frames[frame].views[v].rgb,
                features: &self.features[k],
                depth: &self.depth[k],
            })
            .collect()
    }

    /// Same as [`Self::warp_sources`] without view `skip`.
    pub fn warp_sources_without<'a>(&'a self, ds: &'a Dataset, frame: usize, skip: usize) -> Vec<WarpSource<'a, T>> {
        self.views
            .iter()
            .zip(self.warp_sources(ds, frame))
            .filter(|(&v, _)| v != skip)
            .map(|(_, s)| s)
            .collect()
    }
}

/// Blends a volume-rendered view of frame position `frame`, choosing the
/// adjacent views among all dataset cameras.
pub fn blend_rendered<T: Real>(
    model: &HumanRf<T>,
    ds: &Dataset,
    frame: usize,
    camera: &Camera,
    rendered: &RenderedImage,
    depth: DepthSource,
) -> Result<Vec<f64>> {
    let (a, b) = select_adjacent_views(camera, &ds.cameras)?;
    let srcs = FrameSources::new(model, ds, frame, &[a, b], depth)?;
    blend_image(model, camera, rendered, &srcs.warp_sources(ds, frame))
}

/// Precomputed training pixels for the blending network.
struct BlendTable {
    rows: Vec<f64>,
    width: usize,
    candidates: Vec<f64>,
    truth: Vec<f64>,
}

impl BlendTable {
    fn len(&self) -> usize {
        self.truth.len() / 3
    }
}

/// Builds the blending training set from every (frame, target view) pair.
/// Targets are volume rendered from their training sources; warping uses
/// ground-truth depth. The first `leave_one_out_fraction` of targets
/// (deterministically interleaved) drop their own view from the candidates.
fn build_table<T: Real>(model: &HumanRf<T>, ds: &Dataset) -> Result<BlendTable> {
    let bc = &model.config.blend;
    let eps = model.config.visibility_threshold();
    let all: Vec<usize> = (0..ds.num_views()).collect();
    let mut table = BlendTable {
        rows: Vec::new(),
        width: 2 * appearance_block_dim(&model.config.model),
        candidates: Vec::new(),
        truth: Vec::new(),
    };
    let mut pair = 0usize;
    for f in 0..ds.frames.len() {
        let srcs = FrameSources::new(model, ds, f, &all, DepthSource::Dataset)?;
        for t in 0..ds.num_views() {
            let leave_out = ds.num_views() > 2 && leave_one_out(pair, bc.leave_one_out_fraction);
            pair += 1;
            let warp = if leave_out {
                srcs.warp_sources_without(ds, f, t)
            } else {
                srcs.warp_sources(ds, f)
            };
            let (vol, _) = render_dataset_view(model, ds, f, t)?;
            let depth = &srcs.depth[t];
            let view = &ds.frames[f].views[t];
            let inputs = gather_inputs(&ds.cameras[t], depth, &vol.rgb, &|i| view.mask[i] > 0, &warp, eps)?;
            for (px, b) in inputs {
                b.push_row(&mut table.rows);
                table.candidates.extend(b.candidates().iter().flatten().copied());
                table.truth.extend(view.rgb.pixel_unit(px));
            }
        }
    }
    Ok(table)
}

/// Whether training pair `i` drops its own view: spreads a fraction of the
/// pairs evenly over the sequence.
fn leave_one_out(i: usize, fraction: f64) -> bool {
    let f = fraction.clamp(0.0, 1.0);
    ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
}

/// Trains the appearance network on its own with the color loss; every
/// other network is left untouched.
pub fn train_blending<T: Real>(mut ck: Checkpoint<T>, ds: &Dataset, log: &mut dyn FnMut(&LogRecord)) -> Result<Checkpoint<T>> {
    if !ds.has_depth() {
        return Err(Error::MissingDepth);
    }
    if ds.num_views() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: ds.num_views(),
        });
    }
    if ck.stage != Stage::Blend {
        ck.stage = Stage::Blend;
        ck.step = 0;
        ck.rng = stage_rng(ck.model.config.seed, Stage::Blend);
        ck.optim[4] = Some(AdamState::new(&ck.model.nets.appearance));
    }
    let table = build_table(&ck.model, ds)?;
    if table.len() == 0 {
        return Err(Error::InvalidInput("no foreground pixels to train blending on".into()));
    }
    let config: Config = ck.model.config.clone();
    let bc = &config.blend;
    let adam = AdamConfig::new(LrSchedule {
        start: bc.lr_start,
        end: bc.lr_end,
        horizon: bc.steps.max(1),
    });
    let every = config.train.log_every.max(1);
    while ck.step < bc.steps {
        let n = bc.batch_pixels.min(table.len()).max(1);
        let picks: Vec<usize> = (0..n).map(|_| ck.rng.random_range(0..table.len())).collect();
        let rows: Vec<T> = picks
            .iter()
            .flat_map(|&i| &table.rows[i * table.width..(i + 1) * table.width])
            .map(|&v| T::c(v))
            .collect();
        let cand: Vec<T> = picks.iter().flat_map(|&i| &table.candidates[i * 9..i * 9 + 9]).map(|&v| T::c(v)).collect();
        let truth: Vec<T> = picks.iter().flat_map(|&i| &table.truth[i * 3..i * 3 + 3]).map(|&v| T::c(v)).collect();
        let mut tape = Tape::<T>::new();
        let bound = ck.model.nets.appearance.bind(&mut tape);
        let r = tape.constant(Tensor::new(vec![n, table.width], rows)?);
        let c = tape.constant(Tensor::new(vec![3 * n, 3], cand)?);
        let t = tape.constant(Tensor::new(vec![n, 3], truth)?);
        let (color, _) = blend_batch(&mut tape, &ck.model.arch.appearance, &bound, r, c)?;
        let d = tape.sub(color, t)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        let loss = tape.scale(s, 1.0 / n as f64);
        let l_c = tape.value(loss).item().as_f64();
        if !l_c.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: ck.step,
                diagnostic: format!("blending batch of {n} pixels"),
            });
        }
        tape.backward(loss)?;
        let g = bound.grads(&tape);
        let state = ck.optim[4].get_or_insert_with(|| AdamState::new(&ck.model.nets.appearance));
        let lr = state.step(&adam, &mut ck.model.nets.appearance, &g)?;
        ck.step += 1;
        if ck.step % every == 0 || ck.step == bc.steps {
            log(&LogRecord {
                stage: Stage::Blend.name(),
                step: ck.step,
                l_c,
                l_m: 0.0,
                total: l_c,
                lambda: 0.0,
                lr,
                val_psnr: None,
            });
        }
    }
    ck.has_blend = true;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::RigSpec;

    fn ring(n: usize) -> Vec<Camera> {
        RigSpec::ring(n, 32).build().unwrap().cameras
    }

    #[test]
    fn exact_pose_and_between_views() {
        let cams = ring(6);
        let (a, b) = select_adjacent_views(&cams[2], &cams).unwrap();
        assert_eq!(a, 2);
        assert!(b == 1 || b == 3);
        let spec = RigSpec::ring(6, 32);
        let mid = spec.camera_at(2.4 * std::f64::consts::TAU / 6.0).unwrap();
        assert_eq!(select_adjacent_views(&mid, &cams).unwrap(), (2, 3));
        assert!(select_adjacent_views(&cams[0], &cams[..1]).is_err());
    }

    #[test]
    fn sweep_selects_each_view_equally() {
        let cams = ring(6);
        let spec = RigSpec::ring(6, 32);
        let mut counts = [0usize; 6];
        for i in 0..360 {
            let cam = spec.camera_at((i as f64 + 0.5).to_radians()).unwrap();
            counts[select_adjacent_views(&cam, &cams).unwrap().0] += 1;
        }
        assert_eq!(counts, [60; 6]);
    }

    #[test]
    fn leave_one_out_fraction() {
        let n = (0..100).filter(|&i| leave_one_out(i, 0.5)).count();
        assert_eq!(n, 50);
        assert_eq!((0..10).filter(|&i| leave_one_out(i, 0.0)).count(), 0);
        assert_eq!((0..10).filter(|&i| leave_one_out(i, 1.0)).count(), 10);
    }
}
