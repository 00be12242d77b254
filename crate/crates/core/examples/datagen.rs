//! Renders a synthetic multi-view capture and writes it to disk.
//!
//!     cargo run --release --example datagen -- target/example-data/actor

use std::path::{Path, PathBuf};

use humanrf::dataset::{generate_dataset, read_dataset, write_dataset, DatagenSpec};
use humanrf::synth::Motion;

pub fn run(out: &Path, spec: &DatagenSpec) -> humanrf::Result<usize> {
    let ds = generate_dataset(spec)?;
    write_dataset(out, &ds)?;
    let back = read_dataset(out)?;
    assert_eq!(back.frames.len(), ds.frames.len());
    Ok(back.frames.len() * back.num_views())
}

fn main() -> humanrf::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/example-data/actor"));
    let spec = DatagenSpec::new(6, 10, 64, 7, Motion::WalkCycle);
    let images = run(&out, &spec)?;
    println!("wrote {images} views with masks and depth to {}", out.display());
    Ok(())
}
