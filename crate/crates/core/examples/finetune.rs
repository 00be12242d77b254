//! Trains across two actors, then fine-tunes on a third one it has never
//! seen and compares novel-view PSNR before and after.
//!
//!     cargo run --release --example finetune -- 1000 300

use humanrf::checkpoint::Checkpoint;
use humanrf::config::Config;
use humanrf::dataset::{generate_dataset, DatagenSpec, Dataset};
use humanrf::image::Rgb8;
use humanrf::metrics::psnr;
use humanrf::pipeline::{render_frame, sources_for_camera};
use humanrf::synth::{build_actor, render_ground_truth, Motion, RigSpec};
use humanrf::train::{finetune, train_generalizable};

fn novel_view_psnr(ck: &Checkpoint<f32>, ds: &Dataset) -> humanrf::Result<f64> {
    let actor = build_actor(ds.subject.as_ref().unwrap().actor_seed);
    let cam = RigSpec::ring(4, ds.width).camera_at(45f64.to_radians())?;
    let sources = sources_for_camera(&ds.cameras, &cam, ck.model.config.train.source_views);
    let mut total = 0.0;
    for f in 0..ds.frames.len() {
        let gt = render_ground_truth(&actor, &ds.frames[f].pose, &cam)?;
        let img = render_frame(&ck.model, ds, f, &cam, &sources)?;
        total += psnr(&img.rgb8(), &Rgb8::from_unit(gt.width, gt.height, &gt.rgb))?;
    }
    Ok(total / ds.frames.len() as f64)
}

/// Novel-view PSNR on the unseen actor before and after fine-tuning.
pub fn run(steps: u64, finetune_steps: u64, size: usize) -> humanrf::Result<(f64, f64)> {
    let subject = |seed| generate_dataset(&DatagenSpec::new(4, 2, size, seed, Motion::ArmWave));
    let training = [subject(21)?, subject(22)?];
    let unseen = subject(23)?;

    let mut config = Config::desk();
    config.train.steps = steps;
    config.finetune.steps = finetune_steps;
    let ck = Checkpoint::<f32>::fresh(config, unseen.skeleton.num_joints())?;
    let ck = train_generalizable(ck, &training, &mut |_| {})?;
    let before = novel_view_psnr(&ck, &unseen)?;
    let tuned = finetune(ck, &unseen, &mut |_| {})?;
    Ok((before, novel_view_psnr(&tuned, &unseen)?))
}

fn main() -> humanrf::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().expect("step count"));
    let steps = args.next().unwrap_or(1000);
    let ft = args.next().unwrap_or(300);
    let (before, after) = run(steps, ft, 64)?;
    println!("unseen actor, novel view: {before:.2} dB before fine-tuning, {after:.2} dB after");
    Ok(())
}
