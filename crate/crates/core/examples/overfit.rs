//! Trains the radiance field on one small capture and scores the training
//! views.
//!
//!     cargo run --release --example overfit -- 1000

use humanrf::checkpoint::Checkpoint;
use humanrf::config::Config;
use humanrf::dataset::{generate_dataset, DatagenSpec};
use humanrf::metrics::psnr;
use humanrf::synth::Motion;
use humanrf::train::{render_dataset_view, train_generalizable};

pub struct Scores {
    pub psnr: f64,
    pub iou: f64,
    pub checkpoint: Checkpoint<f32>,
}

pub fn run(steps: u64, size: usize) -> humanrf::Result<Scores> {
    let ds = generate_dataset(&DatagenSpec::new(4, 2, size, 7, Motion::ArmWave))?;
    let mut config = Config::desk();
    config.train.steps = steps;
    let ck = Checkpoint::<f32>::fresh(config, ds.skeleton.num_joints())?;
    let ck = train_generalizable(ck, std::slice::from_ref(&ds), &mut |r| {
        println!("step {:>5}  loss {:.5}  color {:.5}  mask {:.4}  lr {:.1e}", r.step, r.total, r.l_c, r.l_m, r.lr);
    })?;

    let (mut p, mut iou, mut n) = (0.0, 0.0, 0.0);
    for f in 0..ds.frames.len() {
        for v in 0..ds.num_views() {
            let (img, truth) = render_dataset_view(&ck.model, &ds, f, v)?;
            p += psnr(&img.rgb8(), &truth)?;
            let mask = &ds.frames[f].views[v].mask;
            let (mut inter, mut union) = (0, 0);
            for (&a, &m) in img.alpha.iter().zip(mask) {
                inter += (a >= 0.5 && m > 0) as usize;
                union += (a >= 0.5 || m > 0) as usize;
            }
            iou += inter as f64 / union.max(1) as f64;
            n += 1.0;
        }
    }
    Ok(Scores {
        psnr: p / n,
        iou: iou / n,
        checkpoint: ck,
    })
}

fn main() -> humanrf::Result<()> {
    let steps = std::env::args().nth(1).map_or(1000, |s| s.parse().expect("step count"));
    let s = run(steps, 64)?;
    println!("training views: mean PSNR {:.2} dB, mean mask IoU {:.3}", s.psnr, s.iou);
    let path = std::path::Path::new("target/example-data/overfit.ckpt");
    std::fs::create_dir_all(path.parent().unwrap()).ok();
    s.checkpoint.save(path)?;
    println!("saved {}", path.display());
    Ok(())
}
