//! Image metrics on known cases, or a directory comparison.
//!
//!     cargo run --example metrics
//!     cargo run --example metrics -- <rendered dir> <truth dir>

use std::path::Path;

use humanrf::image::Rgb8;
use humanrf::metrics::{evaluate_dirs, mae, psnr, ssim};

/// PSNR, MAE and SSIM of a gradient pattern against a +1 offset copy, and
/// the SSIM of the pattern against its negative.
pub fn run(size: usize) -> (f64, f64, f64, f64) {
    let mut img = Rgb8::new(size, size);
    for (i, px) in img.data.iter_mut().enumerate() {
        *px = ((i / 3 % size) * 200 / size + (i / 3 / size) % 7 * 5) as u8;
    }
    let mut shifted = img.clone();
    shifted.data.iter_mut().for_each(|v| *v += 1);
    let mut negative = img.clone();
    negative.data.iter_mut().for_each(|v| *v = 255 - *v);
    (
        psnr(&img, &shifted).unwrap(),
        mae(&img, &shifted).unwrap(),
        ssim(&img, &shifted).unwrap(),
        ssim(&img, &negative).unwrap(),
    )
}

fn main() -> humanrf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [rendered, truth] = args.as_slice() {
        let report = evaluate_dirs(Path::new(rendered), Path::new(truth))?;
        println!("{}", report.summary());
        return Ok(());
    }
    let (p, m, s, neg) = run(64);
    println!("+1 offset: PSNR {p:.2} dB, MAE {m:.3}, SSIM {s:.4}");
    println!("negative: SSIM {neg:.4}");
    Ok(())
}
