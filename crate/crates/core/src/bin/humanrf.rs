use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use humanrf::blend::{blend_rendered, train_blending};
use humanrf::checkpoint::Checkpoint;
use humanrf::config::Config;
use humanrf::dataset::{generate_dataset, read_dataset, write_dataset, DatagenSpec};
use humanrf::image::{write_gray16, write_gray8, write_rgb8, Rgb8};
use humanrf::metrics::evaluate_dirs;
use humanrf::pipeline::{render_frame, source_views, sources_for_camera};
use humanrf::synth::{Motion, RigSpec};
use humanrf::checkpoint::Stage;
use humanrf::train::{finetune, LogRecord, Trainer};
use humanrf::{Error, Result};

/// Generalizable human radiance fields on synthetic multi-view captures.
#[derive(Parser)]
#[command(name = "humanrf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    Datagen(DatagenArgs),
    /// Train the radiance-field networks on one or more datasets.
    Train(TrainArgs),
    /// Fine-tune deformation and field on one subject.
    Finetune(FinetuneArgs),
    /// Train the appearance blending network (needs dataset depth).
    TrainBlend(BlendArgs),
    /// Render dataset views or an orbit of novel views.
    Render(RenderArgs),
    /// Compare rendered images with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    views: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Actor seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// idle-sway, arm-wave, walk-cycle or twist.
    #[arg(long, default_value = "idle-sway")]
    motion: String,
    /// Frames per motion cycle.
    #[arg(long, default_value_t = 40)]
    period: usize,
    #[arg(long, default_value_t = 0)]
    first_frame: usize,
    #[arg(long, default_value_t = 1)]
    frame_stride: usize,
    /// Azimuth of camera 0 in degrees.
    #[arg(long, default_value_t = 0.0)]
    phase_deg: f64,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration (desk or paper) used when no file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directories, one per subject.
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the configured number of steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Log file for line-delimited JSON records (stdout when absent).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Trained base checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    /// Also optimize the image encoder.
    #[arg(long)]
    train_encoder: bool,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BlendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset with depth maps.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset supplying poses and source views.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Frame positions to render (all when omitted).
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    /// Dataset cameras to render; written with dataset file names.
    #[arg(long, value_delimiter = ',', conflicts_with = "orbit")]
    views: Vec<usize>,
    /// Number of novel views on a ring around the actor.
    #[arg(long)]
    orbit: Option<usize>,
    /// Ring radius of the orbit in meters.
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Refine the foreground with appearance blending.
    #[arg(long)]
    blend: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered `*.rgb.png` files.
    #[arg(long)]
    rendered: PathBuf,
    /// Ground-truth directory with the same relative layout.
    #[arg(long)]
    truth: PathBuf,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

fn log_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(std::io::stdout()),
    })
}

fn with_log<R>(path: Option<&Path>, f: impl FnOnce(&mut dyn FnMut(&LogRecord)) -> Result<R>) -> Result<R> {
    let mut sink = log_sink(path)?;
    let mut failed = None;
    let mut write = |r: &LogRecord| {
        if failed.is_none() {
            if let Err(e) = writeln!(sink, "{}", r.to_json()) {
                failed = Some(e);
            }
        }
    };
    let out = f(&mut write)?;
    if let Some(e) = failed {
        return Err(Error::io(path.unwrap_or(Path::new("<stdout>")), e));
    }
    sink.flush().map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))?;
    Ok(out)
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let motion: Motion = a.motion.parse()?;
    let mut spec = DatagenSpec::new(a.views, a.frames, a.size, a.seed, motion);
    spec.period = a.period;
    spec.first_frame = a.first_frame;
    spec.frame_stride = a.frame_stride.max(1);
    spec.phase = a.phase_deg.to_radians();
    let ds = generate_dataset(&spec)?;
    write_dataset(&a.out, &ds)?;
    println!("wrote {} frames x {} views to {}", ds.frames.len(), ds.num_views(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let subjects = a.data.iter().map(|p| read_dataset(p)).collect::<Result<Vec<_>>>()?;
    let joints = subjects[0].skeleton.num_joints();
    let mut ck = match &a.resume {
        Some(p) => Checkpoint::<f32>::load(p)?,
        None => {
            let mut c = a.config.load()?;
            if let Some(s) = a.steps {
                c.train.steps = s;
            }
            Checkpoint::fresh(c, joints)?
        }
    };
    if let (Some(s), Some(_)) = (a.steps, &a.resume) {
        ck.model.config.train.steps = s;
    }
    let every = ck.model.config.train.checkpoint_every;
    let out = &a.out;
    let ck = with_log(a.log.as_deref(), |log| {
        let mut t = Trainer::new(ck, &subjects, Stage::Train)?;
        while !t.is_done() {
            let until = if every > 0 { t.step_count() / every * every + every } else { t.total_steps() };
            t.run(Some(until), log)?;
            if every > 0 && !t.is_done() {
                t.checkpoint().save(out)?;
            }
        }
        Ok(t.into_checkpoint())
    })?;
    ck.save(out)?;
    eprintln!("saved {} after {} steps", out.display(), ck.step);
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let mut ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    if let Some(s) = a.steps {
        ck.model.config.finetune.steps = s;
    }
    if a.train_encoder {
        ck.model.config.finetune.train_encoder = true;
    }
    let ck = with_log(a.log.as_deref(), |log| finetune(ck, &ds, log))?;
    ck.save(&a.out)?;
    eprintln!("saved {} after {} fine-tuning steps", a.out.display(), ck.step);
    Ok(())
}

fn train_blend(a: BlendArgs) -> Result<()> {
    let mut ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    if !ds.has_depth() {
        return Err(Error::MissingDepth);
    }
    if let Some(s) = a.steps {
        ck.model.config.blend.steps = s;
    }
    let ck = with_log(a.log.as_deref(), |log| train_blending(ck, &ds, log))?;
    ck.save(&a.out)?;
    eprintln!("saved {} after {} blending steps", a.out.display(), ck.step);
    Ok(())
}

fn write_view(dir: &Path, stem: &str, rgb: &Rgb8, alpha: &[u8], depth: &[u16]) -> Result<()> {
    write_rgb8(&dir.join(format!("{stem}.rgb.png")), rgb)?;
    write_gray8(&dir.join(format!("{stem}.alpha.png")), rgb.width, rgb.height, alpha)?;
    write_gray16(&dir.join(format!("{stem}.depth.png")), rgb.width, rgb.height, depth)
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    if a.blend && !ck.has_blend {
        return Err(Error::MissingBlendWeights);
    }
    let ds = read_dataset(&a.data)?;
    let model = &ck.model;
    let k = model.config.train.source_views;
    let frames: Vec<usize> = if a.frames.is_empty() {
        (0..ds.frames.len()).collect()
    } else {
        a.frames.clone()
    };
    let cameras: Vec<(String, humanrf::camera::Camera, Vec<usize>)> = match a.orbit {
        Some(n) => {
            let spec = RigSpec {
                radius: a.radius,
                width: ds.width,
                height_px: ds.height,
                ..RigSpec::ring(n.max(1), ds.width)
            };
            (0..n)
                .map(|i| {
                    let cam = spec.camera_at(i as f64 * std::f64::consts::TAU / n as f64)?;
                    let src = sources_for_camera(&ds.cameras, &cam, k);
                    Ok((format!("orbit_{i:03}"), cam, src))
                })
                .collect::<Result<_>>()?
        }
        None => {
            let views: Vec<usize> = if a.views.is_empty() {
                (0..ds.num_views()).collect()
            } else {
                a.views.clone()
            };
            views
                .iter()
                .map(|&v| {
                    let cam = ds
                        .cameras
                        .get(v)
                        .ok_or_else(|| Error::InvalidInput(format!("view {v} out of range")))?
                        .clone();
                    Ok((format!("view_{v:02}"), cam, source_views(&ds.cameras, v, k)))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut count = 0;
    for &f in &frames {
        let frame = ds
            .frames
            .get(f)
            .ok_or_else(|| Error::InvalidInput(format!("frame position {f} out of range")))?;
        let dir = a.out.join(humanrf::dataset::frame_dir_name(frame.index));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (stem, cam, sources) in &cameras {
            let img = render_frame(model, &ds, f, cam, sources)?;
            let rgb = if a.blend {
                let blended = blend_rendered(model, &ds, f, cam, &img, model.config.blend.source_depth)?;
                Rgb8::from_unit(img.width, img.height, &blended)
            } else {
                img.rgb8()
            };
            write_view(&dir, stem, &rgb, &img.alpha8(), &img.depth_mm())?;
            count += 1;
        }
    }
    println!("rendered {count} images to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dirs(&a.rendered, &a.truth)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for f in &report.frames {
            println!("{}  PSNR {:.2}  SSIM {:.4}  MAE {:.3}", f.name, f.psnr, f.ssim, f.mae);
        }
        println!("{}", report.summary());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::TrainBlend(a) => train_blend(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
