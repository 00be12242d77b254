//! Procedural capsule actors, motion presets and an analytic ray tracer
//! producing ground-truth color, mask and depth.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_ray, Camera};
use crate::error::{Error, Result};
use crate::math::{Quat, Rigid, Vec3};
use crate::skeleton::{PosedSkeleton, Skeleton, SkeletonPose};

/// Fixed world-space light direction (points toward the light).
pub const LIGHT_DIR: Vec3 = Vec3([0.36, 0.78, 0.51]);
pub const AMBIENT: f64 = 0.35;
pub const DIFFUSE: f64 = 0.65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Solid,
    Stripes,
    Checker,
}

/// Two-tone procedural albedo evaluated in capsule-local canonical
/// coordinates (distance along the axis, angle around it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Albedo {
    pub kind: PatternKind,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// Stripe period along the axis, meters.
    pub period: f64,
    /// Checker sectors around the axis.
    pub sectors: u32,
}

impl Albedo {
    pub fn solid(c: [f64; 3]) -> Self {
        Self {
            kind: PatternKind::Solid,
            base: c,
            accent: c,
            period: 1.0,
            sectors: 1,
        }
    }

    pub fn eval(&self, along: f64, angle: f64) -> [f64; 3] {
        let band = (along / self.period).floor() as i64;
        let sector = ((angle + PI) / TAU * self.sectors as f64).floor() as i64;
        let accent = match self.kind {
            PatternKind::Solid => false,
            PatternKind::Stripes => band.rem_euclid(2) == 1,
            PatternKind::Checker => (band + sector).rem_euclid(2) == 1,
        };
        if accent {
            self.accent
        } else {
            self.base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    /// Index into `Skeleton::bones`.
    pub bone: usize,
    pub radius: f64,
    pub albedo: Albedo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorModel {
    pub skeleton: Skeleton,
    pub capsules: Vec<Capsule>,
}

/// Body part of each humanoid bone (23 parent-child bones, then 5 tips).
const BONE_PARTS: [usize; 28] = [
    5, 5, 0, 4, 4, 0, 6, 6, 0, 7, 7, 0, 0, 0, 1, 2, 3, 2, 3, 2, 3, 8, 8, 1, 8, 8, 7, 7,
];

const BONE_RADII: [f64; 28] = [
    0.09, 0.09, 0.12, 0.075, 0.075, 0.13, 0.055, 0.055, 0.13, 0.045, 0.045, 0.09, 0.07, 0.07, 0.05, 0.06,
    0.06, 0.05, 0.05, 0.042, 0.042, 0.038, 0.038, 0.11, 0.035, 0.035, 0.04, 0.04,
];

const PARTS: usize = 9;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Deterministic humanoid capsule actor. The seed varies per-part colors,
/// patterns and limb thickness.
pub fn build_actor(seed: u64) -> ActorModel {
    let skeleton = Skeleton::humanoid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ac70);
    let hue0: f64 = rng.random();
    let parts: Vec<(Albedo, f64)> = (0..PARTS)
        .map(|p| {
            let hue = hue0 + p as f64 * 0.382 + rng.random_range(-0.05..0.05);
            let base = hsv(hue, rng.random_range(0.45..0.8), rng.random_range(0.6..0.95));
            let accent_hue = hue + rng.random_range(0.25..0.5);
            let accent = hsv(accent_hue, rng.random_range(0.3..0.7), rng.random_range(0.25..0.5));
            let kind = match rng.random_range(0..3) {
                0 if p != 1 => PatternKind::Stripes,
                1 => PatternKind::Checker,
                _ => PatternKind::Stripes,
            };
            let albedo = Albedo {
                kind,
                base,
                accent,
                period: rng.random_range(0.07..0.14),
                sectors: rng.random_range(2..5) * 2,
            };
            (albedo, rng.random_range(0.9..1.1))
        })
        .collect();
    let capsules = skeleton
        .bones()
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let (albedo, scale) = &parts[BONE_PARTS[i]];
            Capsule {
                bone: i,
                radius: BONE_RADII[i] * scale,
                albedo: albedo.clone(),
            }
        })
        .collect();
    ActorModel { skeleton, capsules }
}

impl ActorModel {
    /// A single sphere (zero-length capsule) centered at `center`.
    pub fn sphere(center: Vec3, radius: f64, albedo: Albedo) -> Self {
        let skeleton = Skeleton::new(vec![None], vec![center], &[(0, center)]).expect("one-joint skeleton");
        Self {
            skeleton,
            capsules: vec![Capsule {
                bone: 0,
                radius,
                albedo,
            }],
        }
    }

    /// Stable hash of the serialized actor.
    pub fn fingerprint(&self) -> u64 {
        crate::config::fnv1a(serde_json::to_string(self).expect("actor serializes").as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    IdleSway,
    ArmWave,
    WalkCycle,
    Twist,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::IdleSway, Motion::ArmWave, Motion::WalkCycle, Motion::Twist];

    pub fn name(self) -> &'static str {
        match self {
            Motion::IdleSway => "idle-sway",
            Motion::ArmWave => "arm-wave",
            Motion::WalkCycle => "walk-cycle",
            Motion::Twist => "twist",
        }
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Motion::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMotion(s.to_string()))
    }
}

impl std::fmt::Display for Motion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const X: Vec3 = Vec3([1.0, 0.0, 0.0]);
const Y: Vec3 = Vec3([0.0, 1.0, 0.0]);
const Z: Vec3 = Vec3([0.0, 0.0, 1.0]);

/// Pose of the humanoid at frame `t` of a motion with the given period.
pub fn animate(actor: &ActorModel, t: usize, motion: Motion, period: usize) -> Result<SkeletonPose> {
    let n = actor.skeleton.num_joints();
    if n != 24 {
        return Err(Error::InvalidInput(format!(
            "motion presets need the 24-joint humanoid, actor has {n} joints"
        )));
    }
    if period == 0 {
        return Err(Error::InvalidInput("motion period must be positive".into()));
    }
    let phase = TAU * (t % period) as f64 / period as f64;
    let s = phase.sin();
    let mut pose = SkeletonPose::identity(n);
    let mut rot = |j: usize, axis: Vec3, angle: f64| {
        pose.rotations[j] = Quat::from_axis_angle(axis, angle).mul(pose.rotations[j]);
    };
    match motion {
        Motion::IdleSway => {
            rot(3, Z, 0.08 * s);
            rot(9, Z, 0.06 * s);
            rot(12, Y, 0.25 * s);
            rot(16, Z, 0.15 * s);
            rot(17, Z, 0.15 * s);
            rot(18, Z, 0.1 * s);
        }
        Motion::ArmWave => {
            rot(16, Z, 0.9 + 0.5 * s);
            rot(18, Z, 0.6 + 0.5 * (phase + 0.5).sin());
            rot(17, Z, -0.2 * s);
            rot(12, Z, 0.1 * s);
        }
        Motion::WalkCycle => {
            rot(1, X, -0.45 * s);
            rot(2, X, 0.45 * s);
            rot(4, X, 0.3 * (1.0 - phase.cos()));
            rot(5, X, 0.3 * (1.0 + phase.cos()));
            rot(16, X, 0.4 * s);
            rot(17, X, -0.4 * s);
            rot(6, Y, 0.1 * s);
        }
        Motion::Twist => {
            rot(0, Y, 0.3 * s);
            rot(3, Y, 0.25 * s);
            rot(6, Y, 0.25 * s);
            rot(9, Y, 0.2 * s);
            rot(16, Z, 0.3 * s);
            rot(17, Z, 0.3 * s);
        }
    }
    if motion == Motion::IdleSway {
        pose.root_translation = Vec3::new(0.03 * s, 0.0, 0.0);
    } else if motion == Motion::WalkCycle {
        pose.root_translation = Vec3::new(0.0, 0.02 * (2.0 * phase).sin(), 0.0);
    }
    Ok(pose)
}

/// Ground truth for one camera: linear RGB in [0,1], coverage mask and
/// camera-space z-depth (`INFINITY` where nothing is hit).
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<bool>,
    pub depth: Vec<f64>,
}

/// One capsule after posing, ready for intersection.
#[derive(Clone, Debug)]
pub struct PosedCapsule<'a> {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    /// Posed-to-canonical transform of the driving joint.
    pub to_canonical: Rigid,
    pub canonical_a: Vec3,
    pub canonical_b: Vec3,
    pub albedo: &'a Albedo,
}

pub fn pose_capsules<'a>(actor: &'a ActorModel, posed: &PosedSkeleton) -> Vec<PosedCapsule<'a>> {
    actor
        .capsules
        .iter()
        .map(|c| {
            let bone = actor.skeleton.bones()[c.bone];
            let g = posed.skinning[bone.joint];
            PosedCapsule {
                a: g.apply(bone.head),
                b: g.apply(bone.tail),
                radius: c.radius,
                to_canonical: g.inverse(),
                canonical_a: bone.head,
                canonical_b: bone.tail,
                albedo: &c.albedo,
            }
        })
        .collect()
}

fn intersect_sphere(ro: Vec3, rd: Vec3, center: Vec3, r: f64) -> Option<f64> {
    let oc = ro - center;
    let b = oc.dot(rd);
    let c = oc.norm_sq() - r * r;
    let h = b * b - c;
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Nearest positive hit of a unit-direction ray with a capsule.
pub fn intersect_capsule(ro: Vec3, rd: Vec3, a: Vec3, b: Vec3, r: f64) -> Option<f64> {
    let ba = b - a;
    let baba = ba.norm_sq();
    if baba < 1e-18 {
        return intersect_sphere(ro, rd, a, r);
    }
    let oa = ro - a;
    let bard = ba.dot(rd);
    let baoa = ba.dot(oa);
    let rdoa = rd.dot(oa);
    let oaoa = oa.norm_sq();
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - r * r * baba;
    let h = qb * qb - qa * qc;
    if qa > 1e-12 && h >= 0.0 {
        let t = (-qb - h.sqrt()) / qa;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba && t > 0.0 {
            return Some(t);
        }
    }
    let ta = intersect_sphere(ro, rd, a, r);
    let tb = intersect_sphere(ro, rd, b, r);
    match (ta, tb) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

/// Shaded color, world normal and canonical position of the nearest hit.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub color: [f64; 3],
}

pub fn trace(capsules: &[PosedCapsule<'_>], origin: Vec3, dir: Vec3) -> Option<SurfaceHit> {
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in capsules.iter().enumerate() {
        if let Some(t) = intersect_capsule(origin, dir, c.a, c.b, c.radius) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    let (t, i) = best?;
    let c = &capsules[i];
    let point = origin + dir * t;
    let ab = c.b - c.a;
    let len_sq = ab.norm_sq();
    let s = if len_sq > 0.0 {
        ((point - c.a).dot(ab) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let normal = (point - (c.a + ab * s)).normalized();
    let color = shade(c, point, normal);
    Some(SurfaceHit {
        t,
        point,
        normal,
        color,
    })
}

fn shade(c: &PosedCapsule<'_>, point: Vec3, normal: Vec3) -> [f64; 3] {
    let pc = c.to_canonical.apply(point);
    let axis_raw = c.canonical_b - c.canonical_a;
    let axis = if axis_raw.norm() > 1e-12 { axis_raw.normalized() } else { Y };
    let reference = if axis.dot(Z).abs() < 0.9 { Z } else { X };
    let e1 = reference.cross(axis).normalized();
    let e2 = axis.cross(e1);
    let rel = pc - c.canonical_a;
    let along = rel.dot(axis);
    let angle = rel.dot(e2).atan2(rel.dot(e1));
    let albedo = c.albedo.eval(along, angle);
    let lambert = AMBIENT + DIFFUSE * normal.dot(LIGHT_DIR.normalized()).max(0.0);
    albedo.map(|v| (v * lambert).clamp(0.0, 1.0))
}

/// Ray traces the posed actor from `camera`, one ray per pixel center.
pub fn render_ground_truth(actor: &ActorModel, pose: &SkeletonPose, camera: &Camera) -> Result<GroundTruth> {
    let posed = PosedSkeleton::new(&actor.skeleton, pose)?;
    let capsules = pose_capsules(actor, &posed);
    let (w, h) = (camera.width, camera.height);
    let mut gt = GroundTruth {
        width: w,
        height: h,
        rgb: vec![0.0; w * h * 3],
        mask: vec![false; w * h],
        depth: vec![f64::INFINITY; w * h],
    };
    let forward = camera.forward();
    for y in 0..h {
        for x in 0..w {
            let ray = generate_ray(camera, [x as f64, y as f64]);
            if let Some(hit) = trace(&capsules, ray.origin, ray.dir) {
                let i = y * w + x;
                gt.mask[i] = true;
                gt.depth[i] = hit.t * ray.dir.dot(forward);
                gt.rgb[3 * i..3 * i + 3].copy_from_slice(&hit.color);
            }
        }
    }
    Ok(gt)
}

/// Ring of cameras around the actor, all aimed at `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub views: usize,
    pub radius: f64,
    pub height: f64,
    /// Angle of camera 0 around the vertical axis, radians (0 = in front).
    pub phase: f64,
    /// Focal length as a multiple of image width.
    pub focal_scale: f64,
    pub width: usize,
    pub height_px: usize,
    pub center: Vec3,
}

impl RigSpec {
    pub fn ring(views: usize, size: usize) -> Self {
        Self {
            views,
            radius: 3.0,
            height: 0.3,
            phase: 0.0,
            focal_scale: 1.35,
            width: size,
            height_px: size,
            center: Vec3::new(0.0, -0.02, 0.0),
        }
    }

    /// Camera at an arbitrary azimuth on this ring.
    pub fn camera_at(&self, azimuth: f64) -> Result<Camera> {
        let eye = self.center + Vec3::new(self.radius * azimuth.sin(), self.height, self.radius * azimuth.cos());
        Camera::look_at(
            eye,
            self.center,
            Y,
            self.focal_scale * self.width as f64,
            self.width,
            self.height_px,
        )
    }

    pub fn build(&self) -> Result<CameraRig> {
        if self.views < 2 {
            return Err(Error::TooFewViews {
                needed: 2,
                got: self.views,
            });
        }
        let cameras = (0..self.views)
            .map(|i| self.camera_at(self.phase + TAU * i as f64 / self.views as f64))
            .collect::<Result<Vec<_>>>()?;
        Ok(CameraRig { cameras })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project;

    #[test]
    fn actor_is_deterministic_per_seed() {
        let a = build_actor(3);
        assert_eq!(a.fingerprint(), build_actor(3).fingerprint());
        assert_ne!(a.capsules[0].albedo, build_actor(4).capsules[0].albedo);
        assert_eq!(a.skeleton.num_joints(), 24);
        assert_eq!(a.capsules.len(), a.skeleton.bones().len());
        assert!(a.capsules.iter().all(|c| c.radius > 0.0));
    }

    #[test]
    fn idle_sway_starts_canonical_and_presets_are_periodic() {
        let a = build_actor(1);
        assert_eq!(animate(&a, 0, Motion::IdleSway, 40).unwrap(), SkeletonPose::identity(24));
        for m in Motion::ALL {
            assert_eq!(animate(&a, 3, m, 40).unwrap(), animate(&a, 43, m, 40).unwrap());
        }
        assert!(matches!("moonwalk".parse::<Motion>(), Err(Error::UnknownMotion(_))));
    }

    #[test]
    fn capsule_hits_side_and_cap() {
        let a = Vec3::new(0.0, -1.0, 0.0);
        let b = Vec3::new(0.0, 1.0, 0.0);
        let side = intersect_capsule(Vec3::new(0.0, 0.0, -5.0), Z, a, b, 0.5).unwrap();
        assert!((side - 4.5).abs() < 1e-12);
        let cap = intersect_capsule(Vec3::new(0.0, 5.0, 0.0), -Y, a, b, 0.5).unwrap();
        assert!((cap - 3.5).abs() < 1e-12);
        assert!(intersect_capsule(Vec3::new(2.0, 0.0, -5.0), Z, a, b, 0.5).is_none());
    }

    #[test]
    fn actor_partially_covers_the_frame() {
        let actor = build_actor(0);
        let rig = RigSpec::ring(4, 64).build().unwrap();
        let gt = render_ground_truth(&actor, &SkeletonPose::identity(24), &rig.cameras[1]).unwrap();
        let frac = gt.mask.iter().filter(|&&m| m).count() as f64 / gt.mask.len() as f64;
        assert!(frac > 0.02 && frac < 0.6, "coverage {frac}");
        for i in 0..gt.mask.len() {
            assert_eq!(gt.mask[i], gt.depth[i].is_finite());
        }
        // Every joint projects inside the image.
        for j in actor.skeleton.joints() {
            assert!(rig.cameras[1].in_image(project(&rig.cameras[1], *j).q));
        }
    }
}
