//! Renders a ring of novel views around the actor to PNG files.
//!
//!     cargo run --release --example orbit -- target/example-data/overfit.ckpt 12
//!
//! Without a checkpoint path a model is trained briefly first.

use std::path::{Path, PathBuf};

use humanrf::checkpoint::Checkpoint;
use humanrf::config::Config;
use humanrf::dataset::{generate_dataset, DatagenSpec};
use humanrf::image::{write_gray8, write_rgb8};
use humanrf::pipeline::{render_frame, sources_for_camera};
use humanrf::synth::{Motion, RigSpec};
use humanrf::train::train_generalizable;

/// Writes `views` color and alpha images into `out`; returns the file count.
pub fn run(ck: &Checkpoint<f32>, views: usize, size: usize, out: &Path) -> humanrf::Result<usize> {
    let ds = generate_dataset(&DatagenSpec::new(4, 1, size, 7, Motion::ArmWave))?;
    std::fs::create_dir_all(out).map_err(|e| humanrf::Error::io(out, e))?;
    let rig = RigSpec::ring(views, size);
    let mut written = 0;
    for i in 0..views {
        let cam = rig.camera_at(i as f64 * std::f64::consts::TAU / views as f64)?;
        let sources = sources_for_camera(&ds.cameras, &cam, ck.model.config.train.source_views);
        let img = render_frame(&ck.model, &ds, 0, &cam, &sources)?;
        write_rgb8(&out.join(format!("orbit_{i:03}.rgb.png")), &img.rgb8())?;
        write_gray8(&out.join(format!("orbit_{i:03}.alpha.png")), size, size, &img.alpha8())?;
        written += 2;
    }
    Ok(written)
}

pub fn quick_model(steps: u64, size: usize) -> humanrf::Result<Checkpoint<f32>> {
    let ds = generate_dataset(&DatagenSpec::new(4, 1, size, 7, Motion::ArmWave))?;
    let mut config = Config::desk();
    config.train.steps = steps;
    let ck = Checkpoint::<f32>::fresh(config, ds.skeleton.num_joints())?;
    train_generalizable(ck, std::slice::from_ref(&ds), &mut |_| {})
}

fn main() -> humanrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let ck = match args.next() {
        Some(p) => Checkpoint::load(Path::new(&p))?,
        None => quick_model(300, 64)?,
    };
    let views = args.next().map_or(12, |s| s.parse().expect("view count"));
    let out = PathBuf::from("target/example-data/orbit");
    let n = run(&ck, views, 64, &out)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}
