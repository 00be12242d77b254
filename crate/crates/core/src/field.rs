//! Pose-conditioned deformation into canonical space and the radiance field.

use autodiff::{Bound, Real, Tape, Tensor, Var};

use crate::camera::{encoded_len, positional_encode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::nets::{descriptor_dim, Architecture, FieldNet, Mlp, Networks};
use crate::skeleton::{inverse_skin, PoseDescriptor, PosedSkeleton, SkinningWeights};

/// Appends the deformation network's pose input `[PE(R_d), R_v]`.
pub fn push_descriptor(out: &mut Vec<f64>, d: &PoseDescriptor, freqs: usize) {
    out.extend(positional_encode(&d.distances, freqs));
    out.extend_from_slice(&d.directions);
}

/// Bounded residual `s_max * tanh(MLP([descriptor, F]))` added to the
/// inverse-skinned points. Returns `(p', residual)`, both `[N,3]`.
pub fn deform_batch<T: Real>(
    tape: &mut Tape<T>,
    mlp: &Mlp,
    bound: &Bound,
    descriptor: Var,
    feature: Option<Var>,
    skinned: Var,
    max_offset: f64,
) -> Result<(Var, Var)> {
    let x = match feature {
        Some(f) => tape.concat(&[descriptor, f])?,
        None => descriptor,
    };
    let raw = mlp.forward(tape, bound, x)?;
    let t = tape.tanh(raw);
    let delta = tape.scale(t, max_offset);
    let p = tape.add(skinned, delta)?;
    Ok((p, delta))
}

/// Density `[N,1]` and, when `dirs` and `feature` are given, color `[N,3]`.
pub fn query_batch<T: Real>(
    tape: &mut Tape<T>,
    field: &FieldNet,
    bound: &Bound,
    canonical: Var,
    encoded_dirs: Option<(Var, Var)>,
) -> Result<(Var, Option<Var>)> {
    let pe = tape.pos_encode(canonical, field.position_freqs)?;
    let trunk = field.trunk(tape, bound, pe)?;
    let sigma = field.density(tape, bound, trunk)?;
    let color = match encoded_dirs {
        Some((dirs, feature)) => Some(field.color(tape, bound, trunk, dirs, feature)?),
        None => None,
    };
    Ok((sigma, color))
}

/// Result of deforming one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformed {
    pub canonical: Vec3,
    pub residual: Vec3,
}

fn row_tensor<T: Real>(values: &[f64]) -> Result<Tensor<T>> {
    Ok(Tensor::new(vec![1, values.len()], values.iter().map(|&v| T::c(v)).collect())?)
}

fn to_vec3<T: Real>(t: &Tensor<T>) -> Vec3 {
    let d = t.data();
    Vec3::new(d[0].as_f64(), d[1].as_f64(), d[2].as_f64())
}

/// `p' = S(p) + Δ` for a single point.
#[allow(clippy::too_many_arguments)]
pub fn deform<T: Real>(
    p: Vec3,
    posed: &PosedSkeleton,
    weights: &SkinningWeights,
    descriptor: &PoseDescriptor,
    feature: &[f64],
    arch: &Architecture,
    nets: &Networks<T>,
    m: &ModelConfig,
) -> Result<Deformed> {
    let joints = descriptor.distances.len();
    if descriptor.directions.len() != 3 * joints {
        return Err(Error::SizeMismatch("pose descriptor sizes disagree".into()));
    }
    let skinned = inverse_skin(p, posed, weights)?;
    let mut desc = Vec::with_capacity(descriptor_dim(m, joints));
    push_descriptor(&mut desc, descriptor, m.distance_freqs);
    let mut tape = Tape::<T>::new();
    let bound = nets.deform.bind_frozen(&mut tape);
    let d = tape.constant(row_tensor(&desc)?);
    let f = if m.deform_uses_features {
        Some(tape.constant(row_tensor(feature)?))
    } else {
        None
    };
    let s = tape.constant(row_tensor(&skinned.0)?);
    let (pc, delta) = deform_batch(&mut tape, &arch.deform, &bound, d, f, s, m.deform_max)?;
    Ok(Deformed {
        canonical: to_vec3(tape.value(pc)),
        residual: to_vec3(tape.value(delta)),
    })
}

/// Color in `[0,1]^3` and density `>= 0` at one canonical point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

pub fn query_field<T: Real>(
    canonical: Vec3,
    view_dir: Vec3,
    feature: &[f64],
    arch: &Architecture,
    nets: &Networks<T>,
    m: &ModelConfig,
) -> Result<RadianceSample> {
    if !canonical.is_finite() {
        return Err(Error::InvalidInput("canonical point is not finite".into()));
    }
    let mut tape = Tape::<T>::new();
    let bound = nets.field.bind_frozen(&mut tape);
    let p = tape.constant(row_tensor(&canonical.0)?);
    let dirs = tape.constant(row_tensor(&positional_encode(&view_dir.0, m.direction_freqs))?);
    debug_assert_eq!(tape.shape(dirs)[1], encoded_len(3, m.direction_freqs));
    let f = tape.constant(row_tensor(feature)?);
    let (sigma, color) = query_batch(&mut tape, &arch.field, &bound, p, Some((dirs, f)))?;
    let c = tape.value(color.expect("color requested")).data();
    Ok(RadianceSample {
        color: [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()],
        sigma: tape.value(sigma).data()[0].as_f64(),
    })
}
