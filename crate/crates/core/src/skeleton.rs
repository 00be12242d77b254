//! Articulated skeleton, linear blend skinning and pose descriptors.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Affine, Quat, Rigid, Vec3};

/// Number of nearest bone segments that contribute skinning weight.
pub const SKINNING_BONES: usize = 4;

/// Distances below this are treated as coincident by [`pose_descriptor`].
pub const COINCIDENT_EPS: f64 = 1e-9;

pub const JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const HUMANOID_PARENTS: [i32; 24] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

/// One canonical bone segment and the joint whose transform drives it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub joint: usize,
    pub head: Vec3,
    pub tail: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonRecord", into = "SkeletonRecord")]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    joints: Vec<Vec3>,
    tips: Vec<(usize, Vec3)>,
    bones: Vec<Bone>,
    /// Joint indices with every parent listed before its children.
    order: Vec<usize>,
}

/// Serialized form: parent index per joint (`-1` for the root), canonical
/// joint positions and terminal bone tips.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonRecord {
    pub parents: Vec<i64>,
    pub joints: Vec<Vec3>,
    #[serde(default)]
    pub tips: Vec<(usize, Vec3)>,
}

impl TryFrom<SkeletonRecord> for Skeleton {
    type Error = Error;

    fn try_from(r: SkeletonRecord) -> Result<Self> {
        let parents = r
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        Skeleton::new(parents, r.joints, &r.tips)
    }
}

impl From<Skeleton> for SkeletonRecord {
    fn from(s: Skeleton) -> Self {
        Self {
            parents: s.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            joints: s.joints,
            tips: s.tips,
        }
    }
}

impl Skeleton {
    /// Builds a skeleton from parent links and canonical joint positions.
    ///
    /// Bones run from every parent to each child and are driven by the
    /// parent. `tips` adds one terminal segment per listed joint, ending at
    /// the given canonical point and driven by that joint.
    pub fn new(parents: Vec<Option<usize>>, joints: Vec<Vec3>, tips: &[(usize, Vec3)]) -> Result<Self> {
        let n = parents.len();
        if n == 0 || joints.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} parent links for {} joints",
                n,
                joints.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::InvalidSkeleton(format!("joint {j} has no parent; only joint 0 may be a root"))),
                Some(p) if *p >= n => {
                    return Err(Error::InvalidSkeleton(format!("joint {j} has out-of-range parent {p}")))
                }
                _ => {}
            }
        }
        let order = topological_order(&parents)?;
        let mut bones = Vec::new();
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                bones.push(Bone {
                    joint: p,
                    head: joints[p],
                    tail: joints[j],
                });
            }
        }
        for &(j, tip) in tips {
            if j >= n {
                return Err(Error::InvalidSkeleton(format!("tip on missing joint {j}")));
            }
            bones.push(Bone {
                joint: j,
                head: joints[j],
                tail: tip,
            });
        }
        Ok(Self {
            parents,
            joints,
            tips: tips.to_vec(),
            bones,
            order,
        })
    }

    /// The default 24-joint humanoid in its star-shaped canonical pose:
    /// legs apart, arms lowered 45 degrees. World y is up, the actor faces
    /// +z and the pelvis sits at the origin.
    pub fn humanoid() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (leg_sin, leg_cos) = 10f64.to_radians().sin_cos();
        let knee = Vec3::new(0.09 + 0.40 * leg_sin, -0.08 - 0.40 * leg_cos, 0.0);
        let ankle = knee + Vec3::new(0.40 * leg_sin, -0.40 * leg_cos, 0.0);
        let foot = ankle + Vec3::new(0.01, -0.05, 0.12);
        let elbow = Vec3::new(0.17 + 0.27 * s, 0.47 - 0.27 * s, 0.0);
        let wrist = elbow + Vec3::new(0.25 * s, -0.25 * s, 0.0);
        let hand = wrist + Vec3::new(0.08 * s, -0.08 * s, 0.0);
        let left = [
            Vec3::new(0.09, -0.08, 0.0),
            knee,
            ankle,
            foot,
            Vec3::new(0.07, 0.46, 0.0),
            Vec3::new(0.17, 0.47, 0.0),
            elbow,
            wrist,
            hand,
        ];
        let mirror = |v: Vec3| Vec3::new(-v.x(), v.y(), v.z());
        let joints = vec![
            Vec3::ZERO,
            left[0],
            mirror(left[0]),
            Vec3::new(0.0, 0.11, 0.0),
            left[1],
            mirror(left[1]),
            Vec3::new(0.0, 0.24, 0.0),
            left[2],
            mirror(left[2]),
            Vec3::new(0.0, 0.36, 0.0),
            left[3],
            mirror(left[3]),
            Vec3::new(0.0, 0.52, 0.0),
            left[4],
            mirror(left[4]),
            Vec3::new(0.0, 0.60, 0.0),
            left[5],
            mirror(left[5]),
            left[6],
            mirror(left[6]),
            left[7],
            mirror(left[7]),
            left[8],
            mirror(left[8]),
        ];
        let hand_tip = hand + Vec3::new(0.06 * s, -0.06 * s, 0.0);
        let toe = foot + Vec3::new(0.0, -0.01, 0.07);
        let tips = [
            (15, Vec3::new(0.0, 0.80, 0.0)),
            (22, hand_tip),
            (23, mirror(hand_tip)),
            (10, toe),
            (11, mirror(toe)),
        ];
        let parents = HUMANOID_PARENTS
            .iter()
            .map(|&p| (p >= 0).then_some(p as usize))
            .collect();
        Self::new(parents, joints, &tips).expect("built-in humanoid is a valid tree")
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut depth: Vec<Option<usize>> = vec![None; n];
    depth[0] = Some(0);
    for start in 0..n {
        let mut chain = Vec::new();
        let mut seen = HashSet::new();
        let mut j = start;
        while depth[j].is_none() {
            if !seen.insert(j) {
                return Err(Error::InvalidSkeleton(format!("cycle in parent links through joint {j}")));
            }
            chain.push(j);
            j = parents[j].expect("non-root joints have parents");
        }
        let mut d = depth[j].expect("loop exits on a known depth");
        for &c in chain.iter().rev() {
            d += 1;
            depth[c] = Some(d);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth[j], j));
    Ok(order)
}

/// Per-joint local rotations (about each joint, in the parent frame) and a
/// root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPose {
    pub rotations: Vec<Quat>,
    pub root_translation: Vec3,
}

impl SkeletonPose {
    pub fn identity(num_joints: usize) -> Self {
        Self {
            rotations: vec![Quat::IDENTITY; num_joints],
            root_translation: Vec3::ZERO,
        }
    }
}

/// World transforms `G_j` of every joint frame (origin at the joint).
pub fn pose_transforms(skeleton: &Skeleton, pose: &SkeletonPose) -> Result<Vec<Rigid>> {
    let n = skeleton.num_joints();
    if pose.rotations.len() != n {
        return Err(Error::InvalidInput(format!(
            "pose has {} rotations for a {}-joint skeleton",
            pose.rotations.len(),
            n
        )));
    }
    let mut g = vec![Rigid::IDENTITY; n];
    for &j in &skeleton.order {
        let rot = pose.rotations[j].to_mat3();
        g[j] = match skeleton.parents[j] {
            None => Rigid::new(rot, skeleton.joints[j] + pose.root_translation),
            Some(p) => g[p].compose(&Rigid::new(rot, skeleton.joints[j] - skeleton.joints[p])),
        };
    }
    Ok(g)
}

/// A skeleton evaluated at one pose, with everything skinning needs cached.
#[derive(Clone, Debug)]
pub struct PosedSkeleton {
    /// `G_j(pose)`.
    pub world: Vec<Rigid>,
    /// `G_j(pose) ∘ G_j(canonical)^-1`, mapping canonical to posed space.
    pub skinning: Vec<Rigid>,
    /// Posed joint positions.
    pub joints: Vec<Vec3>,
    /// Posed bone segments `(driver joint, head, tail)`.
    pub bones: Vec<Bone>,
}

impl PosedSkeleton {
    pub fn new(skeleton: &Skeleton, pose: &SkeletonPose) -> Result<Self> {
        let world = pose_transforms(skeleton, pose)?;
        let skinning: Vec<Rigid> = world
            .iter()
            .zip(skeleton.joints())
            .map(|(g, &x)| g.compose(&Rigid::translation(-x)))
            .collect();
        let joints = world.iter().map(|g| g.trans).collect();
        let bones = skeleton
            .bones()
            .iter()
            .map(|b| Bone {
                joint: b.joint,
                head: skinning[b.joint].apply(b.head),
                tail: skinning[b.joint].apply(b.tail),
            })
            .collect();
        Ok(Self {
            world,
            skinning,
            joints,
            bones,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }
}

/// Per-joint skinning weights, nonnegative and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningWeights(pub Vec<f64>);

impl SkinningWeights {
    /// All weight on joint `j`.
    pub fn one_hot(num_joints: usize, j: usize) -> Self {
        let mut w = vec![0.0; num_joints];
        w[j] = 1.0;
        Self(w)
    }
}

pub fn point_segment_distance_sq(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    let t = if len_sq > 0.0 {
        ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm_sq()
}

/// Gaussian falloff over the [`SKINNING_BONES`] nearest posed bones.
///
/// Each of the nearest bones gets `exp(-d²/2τ²)` minus the value of the
/// first excluded bone, so weights stay continuous when the nearest set
/// changes. Distances are shifted by the minimum before exponentiating.
pub fn skinning_weights(p: Vec3, posed: &PosedSkeleton, tau: f64) -> SkinningWeights {
    let mut d: Vec<(f64, usize)> = posed
        .bones
        .iter()
        .enumerate()
        .map(|(i, b)| (point_segment_distance_sq(p, b.head, b.tail), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let inv = 1.0 / (2.0 * tau * tau);
    let d0 = d[0].0;
    let cutoff = d.get(SKINNING_BONES).map(|&(dc, _)| (-(dc - d0) * inv).exp()).unwrap_or(0.0);
    let mut w = vec![0.0; posed.num_joints()];
    let mut total = 0.0;
    for &(dist, bone) in d.iter().take(SKINNING_BONES) {
        let v = ((-(dist - d0) * inv).exp() - cutoff).max(0.0);
        w[posed.bones[bone].joint] += v;
        total += v;
    }
    if total <= 0.0 {
        // Five or more bones tie for nearest: share equally among them.
        let tied: Vec<usize> = d.iter().take_while(|e| e.0 == d0).map(|e| e.1).collect();
        for &bone in &tied {
            w[posed.bones[bone].joint] += 1.0;
        }
        total = tied.len() as f64;
    }
    w.iter_mut().for_each(|v| *v /= total);
    SkinningWeights(w)
}

fn blended(posed: &PosedSkeleton, w: &SkinningWeights) -> Affine {
    let mut a = Affine::zero();
    for (g, &wj) in posed.skinning.iter().zip(&w.0) {
        if wj != 0.0 {
            a.accumulate(g, wj);
        }
    }
    a
}

/// Forward linear blend skinning of a canonical point.
pub fn forward_skin(p: Vec3, posed: &PosedSkeleton, w: &SkinningWeights) -> Vec3 {
    blended(posed, w).apply(p)
}

/// Maps a posed point to canonical space through the inverse of the blended
/// forward transform.
pub fn inverse_skin(p: Vec3, posed: &PosedSkeleton, w: &SkinningWeights) -> Result<Vec3> {
    let a = blended(posed, w);
    let det = a.lin.det();
    if !det.is_finite() || det.abs() < 1e-9 {
        return Err(Error::SingularSkinning { det });
    }
    a.inverse_apply(p).ok_or(Error::SingularSkinning { det })
}

/// Distances `R_d` (J) and unit directions `R_v` (3J) from every posed joint.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDescriptor {
    pub distances: Vec<f64>,
    pub directions: Vec<f64>,
}

pub fn pose_descriptor(p: Vec3, posed: &PosedSkeleton) -> PoseDescriptor {
    let n = posed.num_joints();
    let mut distances = Vec::with_capacity(n);
    let mut directions = Vec::with_capacity(3 * n);
    for &j in &posed.joints {
        let off = p - j;
        let d = off.norm();
        distances.push(d);
        let dir = if d > COINCIDENT_EPS { off / d } else { Vec3::ZERO };
        directions.extend_from_slice(&dir.0);
    }
    PoseDescriptor { distances, directions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3;

    fn two_link() -> Skeleton {
        Skeleton::new(
            vec![None, Some(0), Some(1)],
            vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn identity_pose_keeps_joints() {
        let sk = Skeleton::humanoid();
        assert_eq!(sk.num_joints(), 24);
        let g = pose_transforms(&sk, &SkeletonPose::identity(24)).unwrap();
        for (gj, x) in g.iter().zip(sk.joints()) {
            assert!((gj.trans - *x).norm() < 1e-12);
            assert!(gj.rot.orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn root_rotation_rotates_every_joint() {
        let sk = Skeleton::humanoid();
        let mut pose = SkeletonPose::identity(24);
        let q = Quat::from_axis_angle(Vec3::new(0.2, 1.0, -0.3), 0.9);
        pose.rotations[0] = q;
        let posed = PosedSkeleton::new(&sk, &pose).unwrap();
        let r: Mat3 = q.to_mat3();
        for (pj, x) in posed.joints.iter().zip(sk.joints()) {
            assert!((*pj - r.mul_vec(*x)).norm() < 1e-12);
        }
    }

    #[test]
    fn right_angle_elbow_by_hand() {
        let sk = two_link();
        let mut pose = SkeletonPose::identity(3);
        pose.rotations[1] = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let posed = PosedSkeleton::new(&sk, &pose).unwrap();
        assert!((posed.joints[2] - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn cycles_and_bad_parents_are_rejected() {
        let joints = vec![Vec3::ZERO; 3];
        assert!(Skeleton::new(vec![None, Some(2), Some(1)], joints.clone(), &[]).is_err());
        assert!(Skeleton::new(vec![None, Some(5), Some(1)], joints.clone(), &[]).is_err());
        assert!(Skeleton::new(vec![Some(1), None, Some(1)], joints, &[]).is_err());
    }

    #[test]
    fn weights_on_bone_and_between_bones() {
        // Two parallel bones 0.2 apart, each driven by its own joint.
        let sk = Skeleton::new(
            vec![None, Some(0), Some(0), Some(1), Some(2)],
            vec![
                Vec3::ZERO,
                Vec3::new(-0.1, 0.0, 0.0),
                Vec3::new(0.1, 0.0, 0.0),
                Vec3::new(-0.1, 1.0, 0.0),
                Vec3::new(0.1, 1.0, 0.0),
            ],
            &[],
        )
        .unwrap();
        let posed = PosedSkeleton::new(&sk, &SkeletonPose::identity(5)).unwrap();
        let on = skinning_weights(Vec3::new(-0.1, 0.6, 0.0), &posed, 0.02);
        assert!(on.0[1] > 0.99);
        let mid = skinning_weights(Vec3::new(0.0, 0.6, 0.0), &posed, 0.05);
        assert!((mid.0[1] - 0.5).abs() < 1e-9 && (mid.0[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn descriptor_handles_coincident_and_unit_offsets() {
        let sk = Skeleton::humanoid();
        let posed = PosedSkeleton::new(&sk, &SkeletonPose::identity(24)).unwrap();
        let d = pose_descriptor(sk.joints()[5], &posed);
        assert_eq!(d.distances.len(), 24);
        assert_eq!(d.directions.len(), 72);
        assert_eq!(d.distances[5], 0.0);
        assert_eq!(&d.directions[15..18], &[0.0; 3]);
        let d = pose_descriptor(sk.joints()[0] + Vec3::new(1.0, 0.0, 0.0), &posed);
        assert!((d.distances[0] - 1.0).abs() < 1e-12);
        assert!((Vec3([d.directions[0], d.directions[1], d.directions[2]]) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn identity_pose_inverse_skin_is_identity() {
        let sk = Skeleton::humanoid();
        let posed = PosedSkeleton::new(&sk, &SkeletonPose::identity(24)).unwrap();
        let p = Vec3::new(0.3, 0.4, 0.05);
        let w = skinning_weights(p, &posed, 0.05);
        assert!((inverse_skin(p, &posed, &w).unwrap() - p).norm() < 1e-12);
    }

    #[test]
    fn singular_blend_is_reported() {
        let sk = two_link();
        let mut pose = SkeletonPose::identity(3);
        pose.rotations[1] = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::PI);
        let posed = PosedSkeleton::new(&sk, &pose).unwrap();
        // Half identity, half a 180-degree turn: the blended linear part is rank one.
        let w = SkinningWeights(vec![0.5, 0.5, 0.0]);
        assert!(matches!(inverse_skin(Vec3::ZERO, &posed, &w), Err(Error::SingularSkinning { .. })));
    }
}
