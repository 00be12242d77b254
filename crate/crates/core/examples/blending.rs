//! Trains the appearance blending network on top of a radiance field and
//! compares foreground error on a novel view with and without blending.
//!
//!     cargo run --release --example blending -- 1000 800

use humanrf::blend::{blend_rendered, train_blending};
use humanrf::checkpoint::Checkpoint;
use humanrf::config::Config;
use humanrf::dataset::{generate_dataset, DatagenSpec};
use humanrf::image::Rgb8;
use humanrf::metrics::mae_masked;
use humanrf::pipeline::{render_frame, sources_for_camera};
use humanrf::synth::{build_actor, render_ground_truth, Motion, RigSpec};
use humanrf::train::train_generalizable;

/// Foreground MAE (0-255) of the volume render and of the blended image.
pub fn run(steps: u64, blend_steps: u64, size: usize) -> humanrf::Result<(f64, f64)> {
    let ds = generate_dataset(&DatagenSpec::new(4, 1, size, 7, Motion::ArmWave))?;
    let mut config = Config::desk();
    config.train.steps = steps;
    config.blend.steps = blend_steps;
    let ck = Checkpoint::<f32>::fresh(config, ds.skeleton.num_joints())?;
    let ck = train_generalizable(ck, std::slice::from_ref(&ds), &mut |_| {})?;
    let ck = train_blending(ck, &ds, &mut |r| {
        if r.step % 100 == 0 {
            println!("blend step {:>4}  color loss {:.5}", r.step, r.l_c);
        }
    })?;

    let model = &ck.model;
    let cam = RigSpec::ring(4, size).camera_at(30f64.to_radians())?;
    let gt = render_ground_truth(&build_actor(7), &ds.frames[0].pose, &cam)?;
    let truth = Rgb8::from_unit(gt.width, gt.height, &gt.rgb);
    let sources = sources_for_camera(&ds.cameras, &cam, model.config.train.source_views);
    let img = render_frame(model, &ds, 0, &cam, &sources)?;
    let blended = blend_rendered(model, &ds, 0, &cam, &img, model.config.blend.source_depth)?;
    Ok((
        mae_masked(&img.rgb8(), &truth, &gt.mask)?,
        mae_masked(&Rgb8::from_unit(size, size, &blended), &truth, &gt.mask)?,
    ))
}

fn main() -> humanrf::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().expect("step count"));
    let steps = args.next().unwrap_or(1000);
    let blend_steps = args.next().unwrap_or(800);
    let (volume, blended) = run(steps, blend_steps, 64)?;
    println!("novel-view foreground MAE: volume {volume:.3}, blended {blended:.3}");
    Ok(())
}
