//! Per-pixel image features and their aggregation across source views.

use autodiff::{Bound, Real, Tape, Tensor, Var};

use crate::camera::{positional_encode, project, Camera};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Rgb8;
use crate::math::Vec3;
use crate::nets::{rgba_tensor, view_geometry_dim, Architecture, Mlp, Networks};

/// One calibrated camera with its image at frame `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView {
    pub camera: Camera,
    pub rgb: Rgb8,
    /// 0 or 1 per pixel.
    pub mask: Vec<u8>,
    pub frame: usize,
}

impl SourceView {
    pub fn new(camera: Camera, rgb: Rgb8, mask: Vec<u8>, frame: usize) -> Result<Self> {
        if rgb.width != camera.width || rgb.height != camera.height || mask.len() != rgb.width * rgb.height {
            return Err(Error::SizeMismatch(format!(
                "source image {}x{} for camera {}x{}",
                rgb.width, rgb.height, camera.width, camera.height
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            camera,
            rgb,
            mask,
            frame,
        })
    }

    /// `[H,W,4]` tensor, RGB zeroed outside the mask.
    pub fn rgba<T: Real>(&self) -> Tensor<T> {
        rgba_tensor(&self.rgb.data, &self.mask, self.rgb.width, self.rgb.height)
    }
}

/// `[H,W,C]` features of one source view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Runs the encoder on one view without recording gradients.
pub fn extract_features<T: Real>(arch: &Architecture, nets: &Networks<T>, view: &SourceView) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let bound = nets.encoder.bind_frozen(&mut tape);
    let x = tape.constant(view.rgba());
    let y = arch.encoder.forward(&mut tape, &bound, x)?;
    Ok(FeatureMap {
        values: tape.value(y).clone(),
    })
}

/// A feature looked up at the projection of one point into one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFetch {
    pub feature: Vec<f64>,
    /// Pixel coordinates of the projection (meaningless when invalid).
    pub q: [f64; 2],
    /// Angle between the target ray and the source ray through the point.
    pub theta: f64,
    pub cos_theta: f64,
    /// Unit direction from the source camera center to the point.
    pub source_dir: Vec3,
    pub valid: bool,
}

/// Geometry of projecting `p` into `camera` for a target ray direction.
#[derive(Clone, Copy, Debug)]
pub struct ViewGeometry {
    pub q: [f64; 2],
    pub source_dir: Vec3,
    pub cos_theta: f64,
    pub valid: bool,
}

pub fn view_geometry(camera: &Camera, p: Vec3, target_dir: Vec3) -> ViewGeometry {
    let pr = project(camera, p);
    let source_dir = (p - camera.center()).normalized();
    let cos_theta = target_dir.dot(source_dir).clamp(-1.0, 1.0);
    let valid = pr.in_front && camera.in_image(pr.q);
    ViewGeometry {
        q: if pr.in_front { pr.q } else { [-1.0, -1.0] },
        source_dir,
        cos_theta,
        valid,
    }
}

pub fn fetch<T: Real>(camera: &Camera, map: &FeatureMap<T>, p: Vec3, target_dir: Vec3) -> PixelFetch {
    let g = view_geometry(camera, p, target_dir);
    let c = map.channels();
    let s = map.values.shape();
    let feature = if g.valid {
        let uv = [T::c(g.q[0]), T::c(g.q[1])];
        let (vals, _) = autodiff::kernels::bilinear_forward(map.values.data(), s[0], s[1], c, &uv);
        vals.iter().map(|v| v.as_f64()).collect()
    } else {
        vec![0.0; c]
    };
    PixelFetch {
        feature,
        q: g.q,
        theta: g.cos_theta.acos(),
        cos_theta: g.cos_theta,
        source_dir: g.source_dir,
        valid: g.valid,
    }
}

/// Appends the geometric scoring input `[PE(target), PE(source), cos]`.
pub fn push_view_geometry(out: &mut Vec<f64>, target_dir: Vec3, source_dir: Vec3, cos_theta: f64, freqs: usize) {
    push_encoded_view_geometry(out, &positional_encode(&target_dir.0, freqs), source_dir, cos_theta, freqs);
}

/// [`push_view_geometry`] with the target direction already encoded.
pub fn push_encoded_view_geometry(
    out: &mut Vec<f64>,
    encoded_target: &[f64],
    source_dir: Vec3,
    cos_theta: f64,
    freqs: usize,
) {
    out.extend_from_slice(encoded_target);
    out.extend(positional_encode(&source_dir.0, freqs));
    out.push(cos_theta);
}

/// Scores `N*K` fetches with the shared per-view network, normalizes over
/// valid views and returns `(F [N,C], weights [N,K])`.
///
/// `geometry` rows are ordered point-major (`n*K + k`) and have width
/// [`view_geometry_dim`]; `features` is `[N*K, C]` in the same order.
pub fn aggregate_batch<T: Real>(
    tape: &mut Tape<T>,
    mlp: &Mlp,
    bound: &Bound,
    geometry: Var,
    features: Var,
    valid: Vec<bool>,
    views: usize,
) -> Result<(Var, Var)> {
    let nk = tape.shape(features)[0];
    if views == 0 || nk % views != 0 || valid.len() != nk {
        return Err(Error::SizeMismatch(format!("{nk} fetches for {views} views")));
    }
    let x = tape.concat(&[geometry, features])?;
    let logits = mlp.forward(tape, bound, x)?;
    let logits = tape.reshape(logits, vec![nk / views, views])?;
    let w = tape.masked_softmax(logits, valid)?;
    let f = tape.group_weighted_sum(w, features)?;
    Ok((f, w))
}

/// Blended feature of one point.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeature {
    pub feature: Vec<f64>,
    pub weights: Vec<f64>,
    /// False when no view saw the point; the feature is then zero.
    pub observed: bool,
}

pub fn aggregate<T: Real>(
    fetches: &[PixelFetch],
    target_dir: Vec3,
    mlp: &Mlp,
    nets: &Networks<T>,
    m: &ModelConfig,
) -> Result<AggregatedFeature> {
    let k = fetches.len();
    if k == 0 {
        return Err(Error::TooFewViews { needed: 1, got: 0 });
    }
    let c = fetches[0].feature.len();
    let mut geom = Vec::with_capacity(k * view_geometry_dim(m));
    let mut feats = Vec::with_capacity(k * c);
    for f in fetches {
        if f.feature.len() != c {
            return Err(Error::SizeMismatch("fetches have different feature widths".into()));
        }
        push_view_geometry(&mut geom, target_dir, f.source_dir, f.cos_theta, m.direction_freqs);
        feats.extend(f.feature.iter().map(|&v| if f.valid { v } else { 0.0 }));
    }
    let mut tape = Tape::<T>::new();
    let bound = nets.view_weights.bind_frozen(&mut tape);
    let g = tape.constant(Tensor::new(vec![k, view_geometry_dim(m)], geom.into_iter().map(T::c).collect())?);
    let fv = tape.constant(Tensor::new(vec![k, c], feats.into_iter().map(T::c).collect())?);
    let valid: Vec<bool> = fetches.iter().map(|f| f.valid).collect();
    let observed = valid.iter().any(|&v| v);
    let (f, w) = aggregate_batch(&mut tape, mlp, &bound, g, fv, valid, k)?;
    Ok(AggregatedFeature {
        feature: tape.value(f).data().iter().map(|v| v.as_f64()).collect(),
        weights: tape.value(w).data().iter().map(|v| v.as_f64()).collect(),
        observed,
    })
}
