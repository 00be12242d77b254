//! Composites a homogeneous medium at growing sample counts and compares
//! the opacity with the closed form, then draws importance samples.
//!
//!     cargo run --example volume_rendering

use humanrf::camera::Ray;
use humanrf::math::Vec3;
use humanrf::render::{composite, sample_importance, sample_stratified};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(samples, |alpha - exact|)` for each count.
pub fn run(sigma: f64, length: f64, counts: &[usize]) -> Vec<(usize, f64)> {
    let ray = Ray {
        origin: Vec3::ZERO,
        dir: Vec3::new(0.0, 0.0, 1.0),
        near: 1.0,
        far: 1.0 + length,
    };
    let exact = 1.0 - (-sigma * length).exp();
    counts
        .iter()
        .map(|&n| {
            let t = sample_stratified::<ChaCha8Rng>(&ray, n, None).unwrap();
            let out = composite(&vec![sigma; n], &vec![[1.0, 0.5, 0.2]; n], &t, ray.far).unwrap();
            (n, (out.alpha - exact).abs())
        })
        .collect()
}

fn main() {
    for (n, err) in run(2.0, 1.0, &[16, 32, 64, 128, 256, 512]) {
        println!("{n:>4} samples  alpha error {err:.2e}");
    }

    // A thin shell halfway along the ray pulls the fine samples toward it.
    let mut weights = vec![0.0; 16];
    weights[8] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fine = sample_importance(&weights, 1.0, 2.0, 12, 0.01, Some(&mut rng));
    let inside = fine.iter().filter(|&&t| (1.5..1.5625).contains(&t)).count();
    println!("{inside} of {} importance samples fall in the occupied bin", fine.len());
}
