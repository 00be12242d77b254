//! Skins points near the bones into an animated pose and maps them back.
//!
//!     cargo run --example skinning -- walk-cycle

use humanrf::config::Config;
use humanrf::skeleton::{forward_skin, inverse_skin, skinning_weights, PosedSkeleton, SkeletonPose};
use humanrf::synth::{animate, build_actor, Motion};

/// Worst round-trip error in meters with shared and with re-estimated weights.
pub fn run(motion: Motion, frames: usize) -> (f64, f64) {
    let tau = Config::default().model.skinning_tau;
    let actor = build_actor(3);
    let sk = &actor.skeleton;
    let rest = PosedSkeleton::new(sk, &SkeletonPose::identity(sk.num_joints())).unwrap();
    let (mut shared, mut reestimated) = (0.0f64, 0.0f64);
    for t in 0..frames {
        let posed = PosedSkeleton::new(sk, &animate(&actor, t * 4, motion, 40).unwrap()).unwrap();
        for bone in sk.bones() {
            let p = bone.head + (bone.tail - bone.head) * 0.5;
            let w = skinning_weights(p, &rest, tau);
            let q = forward_skin(p, &posed, &w);
            shared = shared.max((inverse_skin(q, &posed, &w).unwrap() - p).norm());
            // Without the canonical point, weights come from the posed skeleton.
            let w_posed = skinning_weights(q, &posed, tau);
            reestimated = reestimated.max((inverse_skin(q, &posed, &w_posed).unwrap() - p).norm());
        }
    }
    (shared, reestimated)
}

fn main() {
    let motion: Motion = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "arm-wave".into())
        .parse()
        .expect("motion: idle-sway, arm-wave, walk-cycle or twist");
    let (shared, reestimated) = run(motion, 10);
    println!("{}: shared weights {shared:.1e} m, re-estimated weights {reestimated:.1e} m", motion.name());
}
