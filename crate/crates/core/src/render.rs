//! Sample placement along rays and emission-absorption compositing.

use rand::Rng;

use crate::camera::Ray;
use crate::error::{Error, Result};

/// Stratified depths in `[near, far]`: one uniform draw per equal bin when
/// `rng` is given, bin midpoints otherwise.
pub fn sample_stratified<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<Vec<f64>> {
    if !ray.has_bounds() {
        return Err(Error::InvalidInput("ray has no near/far bounds".into()));
    }
    Ok(stratified(ray.near, ray.far, n, rng))
}

pub(crate) fn stratified<R: Rng + ?Sized>(near: f64, far: f64, n: usize, mut rng: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            near + (i as f64 + u) * step
        })
        .collect()
}

/// Inverse-CDF sampling of `n` depths from the piecewise-constant density
/// over the equal bins of `[near, far]` whose masses are `weights`, mixed
/// with a uniform density carrying `floor` of the probability.
///
/// With `rng` the quantiles are stratified random; without, they are the
/// midpoints `(i + 0.5) / n`. The result is sorted.
pub fn sample_importance<R: Rng + ?Sized>(
    weights: &[f64],
    near: f64,
    far: f64,
    n: usize,
    floor: f64,
    mut rng: Option<&mut R>,
) -> Vec<f64> {
    let bins = weights.len();
    if bins == 0 || n == 0 {
        return Vec::new();
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let floor = if total > 0.0 { floor.clamp(0.0, 1.0) } else { 1.0 };
    let pdf: Vec<f64> = weights
        .iter()
        .map(|w| {
            let normalized = if total > 0.0 { w.max(0.0) / total } else { 0.0 };
            (1.0 - floor) * normalized + floor / bins as f64
        })
        .collect();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    let width = (far - near) / bins as f64;
    (0..n)
        .map(|i| {
            let jitter = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            let u = ((i as f64 + jitter) / n as f64) * acc;
            // First bin whose upper CDF edge exceeds u.
            let b = cdf[1..].partition_point(|&c| c <= u).min(bins - 1);
            let frac = if pdf[b] > 0.0 { ((u - cdf[b]) / pdf[b]).clamp(0.0, 1.0) } else { 0.5 };
            near + (b as f64 + frac) * width
        })
        .collect()
}

/// Sorted union of two depth lists.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_by(f64::total_cmp);
    out
}

/// Composited color, opacity, expected depth and per-sample weights of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub alpha: f64,
    /// Expected termination distance along the ray, normalized by alpha.
    pub depth: f64,
    pub weights: Vec<f64>,
}

/// Composites samples at sorted depths `t` (the last interval closes at `far`).
pub fn composite(sigma: &[f64], color: &[[f64; 3]], t: &[f64], far: f64) -> Result<RenderOutput> {
    let s = sigma.len();
    if color.len() != s || t.len() != s || s == 0 {
        return Err(Error::SizeMismatch(format!(
            "{} densities, {} colors, {} depths",
            s,
            color.len(),
            t.len()
        )));
    }
    let flat: Vec<f64> = color.iter().flatten().copied().collect();
    let (out, weights) = autodiff::kernels::composite_forward(sigma, &flat, t, &[far], s);
    Ok(RenderOutput {
        color: [out[0], out[1], out[2]],
        alpha: out[3],
        depth: out[4],
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bounded(near: f64, far: f64) -> Ray {
        Ray {
            origin: Vec3::ZERO,
            dir: Vec3::new(0.0, 0.0, 1.0),
            near,
            far,
        }
    }

    #[test]
    fn eval_mode_uses_midpoints() {
        let t = sample_stratified::<ChaCha8Rng>(&bounded(1e-3, 4.0), 4, None).unwrap();
        let expect = [0.5, 1.5, 2.5, 3.5].map(|m| 1e-3 + m * (4.0 - 1e-3) / 4.0);
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sample_stratified::<ChaCha8Rng>(&bounded(0.0, 0.0), 4, None).is_err());
    }

    #[test]
    fn training_mode_stays_in_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_stratified(&bounded(1.0, 3.0), 8, Some(&mut rng)).unwrap();
        for (i, v) in t.iter().enumerate() {
            let lo = 1.0 + i as f64 * 0.25;
            assert!(*v >= lo && *v <= lo + 0.25);
        }
    }

    #[test]
    fn concentrated_weights_pull_samples() {
        let mut w = vec![0.0; 32];
        w[10] = 1.0;
        let t = sample_importance::<ChaCha8Rng>(&w, 0.0, 32.0, 64, 1e-2, None);
        let inside = t.iter().filter(|&&v| (10.0..=11.0).contains(&v)).count();
        assert!(inside >= 63, "{inside} of 64 inside");
        assert!(t.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn opaque_and_empty_composites() {
        let out = composite(&[0.0, 0.0], &[[1.0; 3], [1.0; 3]], &[1.0, 2.0], 3.0).unwrap();
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.color, [0.0; 3]);
        let out = composite(&[20.0], &[[1.0, 0.5, 0.25]], &[2.0], 3.0).unwrap();
        assert!((out.alpha - 1.0).abs() < 1e-8);
        assert!((out.color[1] - 0.5).abs() < 1e-8);
        assert!((out.depth - 2.0).abs() < 1e-8);
    }
}
