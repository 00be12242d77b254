//! Losses, the generalizable training loop and per-subject fine-tuning.

use autodiff::{AdamConfig, AdamState, LrSchedule, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::generate_ray;
use crate::checkpoint::{Checkpoint, Stage};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::image::Rgb8;
use crate::metrics::psnr;
use crate::nets::rgba_tensor;
use crate::pipeline::{render_frame, render_rays, source_views, BoundNets, FrameScene, RayRender, Sampling, Trainable};

/// Probabilities are clamped to `[ALPHA_EPS, 1 - ALPHA_EPS]` inside the mask loss.
pub const ALPHA_EPS: f64 = 1e-6;

/// Sum and mean over rays of the squared RGB error.
pub fn color_loss(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> (f64, f64) {
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum();
    (sum, sum / pred.len().max(1) as f64)
}

/// Sum and mean over rays of the binary cross-entropy between mask and alpha.
pub fn mask_loss(alpha: &[f64], mask: &[f64]) -> (f64, f64) {
    let sum: f64 = alpha.iter().zip(mask).map(|(&a, &m)| bce(a, m)).sum();
    (sum, sum / alpha.len().max(1) as f64)
}

fn bce(alpha: f64, mask: f64) -> f64 {
    let a = alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS);
    -(mask * a.ln() + (1.0 - mask) * (1.0 - a).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_m: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Ground truth of a ray batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayTargets {
    pub colors: Vec<[f64; 3]>,
    pub masks: Vec<f64>,
}

/// Builds the mean color and mask losses of a rendered batch on the tape.
///
/// Rays that missed the scene bounds render as color 0 and alpha 0; their
/// constant loss terms are included in the reported values.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    render: Option<&RayRender>,
    targets: &RayTargets,
    lambda: f64,
    with_mask: bool,
) -> Result<(Option<Var>, LossReport)> {
    let r = targets.colors.len();
    let inv = 1.0 / r.max(1) as f64;
    let hit: Vec<usize> = render.map(|x| x.hit.clone()).unwrap_or_default();
    let mut is_hit = vec![false; r];
    hit.iter().for_each(|&i| is_hit[i] = true);
    let (mut c_miss, mut m_miss) = (0.0, 0.0);
    for i in (0..r).filter(|&i| !is_hit[i]) {
        c_miss += targets.colors[i].iter().map(|v| v * v).sum::<f64>();
        m_miss += bce(0.0, targets.masks[i]);
    }
    let Some(render) = render else {
        let l_m = if with_mask { m_miss * inv } else { 0.0 };
        let l_c = c_miss * inv;
        return Ok((
            None,
            LossReport {
                l_c,
                l_m,
                total: l_c + lambda * l_m,
                lambda,
            },
        ));
    };
    let n = hit.len();
    let gt: Vec<T> = hit.iter().flat_map(|&i| targets.colors[i]).map(T::c).collect();
    let gt = tape.constant(Tensor::new(vec![n, 3], gt)?);
    let color = tape.slice_cols(render.out, 0, 3)?;
    let diff = tape.sub(color, gt)?;
    let sq = tape.mul(diff, diff)?;
    let c_sum = tape.sum(sq);
    let l_c_var = tape.scale(c_sum, inv);
    let l_c = tape.value(l_c_var).item().as_f64() + c_miss * inv;
    if !with_mask {
        return Ok((
            Some(l_c_var),
            LossReport {
                l_c,
                l_m: 0.0,
                total: l_c,
                lambda,
            },
        ));
    }
    let m: Vec<T> = hit.iter().map(|&i| T::c(targets.masks[i])).collect();
    let not_m: Vec<T> = hit.iter().map(|&i| T::c(1.0 - targets.masks[i])).collect();
    let m = tape.constant(Tensor::new(vec![n, 1], m)?);
    let not_m = tape.constant(Tensor::new(vec![n, 1], not_m)?);
    let alpha = tape.slice_cols(render.out, 3, 1)?;
    let a = tape.clamp(alpha, ALPHA_EPS, 1.0 - ALPHA_EPS);
    let log_a = tape.ln(a);
    let one_minus = tape.affine(a, -1.0, 1.0);
    let log_1ma = tape.ln(one_minus);
    let pos = tape.mul(m, log_a)?;
    let neg = tape.mul(not_m, log_1ma)?;
    let both = tape.add(pos, neg)?;
    let m_sum = tape.sum(both);
    let l_m_var = tape.scale(m_sum, -inv);
    let l_m = tape.value(l_m_var).item().as_f64() + m_miss * inv;
    let weighted = tape.scale(l_m_var, lambda);
    let total = tape.add(l_c_var, weighted)?;
    Ok((
        Some(total),
        LossReport {
            l_c,
            l_m,
            total: l_c + lambda * l_m,
            lambda,
        },
    ))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub stage: &'static str,
    pub step: u64,
    pub l_c: f64,
    pub l_m: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Pixels inside the mask grown by `radius` (Chebyshev distance).
pub fn dilated_pixels(mask: &[u8], width: usize, height: usize, radius: usize) -> Vec<usize> {
    let r = radius as isize;
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            let hit = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (u, v) = (x + dx, y + dy);
                    u >= 0 && v >= 0 && u < width as isize && v < height as isize && mask[(v as usize) * width + u as usize] > 0
                })
            });
            if hit {
                out.push(y as usize * width + x as usize);
            }
        }
    }
    out
}

/// Settings of one optimization stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSettings {
    pub stage: Stage,
    pub steps: u64,
    pub schedule: LrSchedule,
    pub trainable: Trainable,
}

impl StageSettings {
    pub fn for_stage<T: Real>(ck: &Checkpoint<T>, stage: Stage) -> Result<Self> {
        let c = &ck.model.config;
        Ok(match stage {
            Stage::Train => StageSettings {
                stage,
                steps: c.train.steps,
                schedule: LrSchedule {
                    start: c.train.lr_start,
                    end: c.train.lr_end,
                    horizon: c.lr_horizon(),
                },
                trainable: Trainable::ALL,
            },
            Stage::Finetune => StageSettings {
                stage,
                steps: c.finetune.steps,
                schedule: LrSchedule {
                    start: c.finetune.lr_start,
                    end: c.finetune.lr_end,
                    horizon: c.finetune.steps.max(1),
                },
                trainable: Trainable {
                    encoder: c.finetune.train_encoder,
                    view_weights: false,
                    deform: true,
                    field: true,
                },
            },
            Stage::Init | Stage::Blend => {
                return Err(Error::InvalidInput(format!("{} is not a radiance-field stage", stage.name())))
            }
        })
    }

    fn flags(&self) -> [bool; 4] {
        let t = self.trainable;
        [t.encoder, t.view_weights, t.deform, t.field]
    }
}

/// Stage-specific seed so that stages draw independent streams.
pub(crate) fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

/// Optimizes the radiance-field networks on one or more subjects.
pub struct Trainer<'a, T: Real> {
    ck: Checkpoint<T>,
    settings: StageSettings,
    subjects: &'a [Dataset],
    /// `[subject][frame * views + view]` candidate foreground pixels.
    foreground: Vec<Vec<Vec<usize>>>,
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Starts `stage` on `ck`, or resumes it when `ck` was saved mid-stage.
    pub fn new(mut ck: Checkpoint<T>, subjects: &'a [Dataset], stage: Stage) -> Result<Self> {
        let settings = StageSettings::for_stage(&ck, stage)?;
        if subjects.is_empty() {
            return Err(Error::InvalidInput("no training subjects".into()));
        }
        for ds in subjects {
            if ds.num_views() < 2 {
                return Err(Error::TooFewViews {
                    needed: 2,
                    got: ds.num_views(),
                });
            }
            if ds.frames.is_empty() {
                return Err(Error::InvalidInput("dataset has no frames".into()));
            }
            if ds.skeleton.num_joints() != ck.model.joints {
                return Err(Error::ArchitectureMismatch(format!(
                    "model expects {} joints, dataset has {}",
                    ck.model.joints,
                    ds.skeleton.num_joints()
                )));
            }
        }
        if ck.stage != stage {
            ck.stage = stage;
            ck.step = 0;
            ck.rng = stage_rng(ck.model.config.seed, stage);
            for (k, on) in settings.flags().into_iter().enumerate() {
                ck.optim[k] = on.then(|| AdamState::new(ck.model.nets.sets()[k]));
            }
        }
        let radius = ck.model.config.train.mask_dilation;
        let foreground = subjects
            .iter()
            .map(|ds| {
                ds.frames
                    .iter()
                    .flat_map(|f| f.views.iter().map(|v| dilated_pixels(&v.mask, ds.width, ds.height, radius)))
                    .collect()
            })
            .collect();
        Ok(Self {
            ck,
            settings,
            subjects,
            foreground,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.ck
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.ck
    }

    pub fn step_count(&self) -> u64 {
        self.ck.step
    }

    pub fn total_steps(&self) -> u64 {
        self.settings.steps
    }

    pub fn is_done(&self) -> bool {
        self.ck.step >= self.settings.steps
    }

    /// One optimization step; returns its loss record.
    pub fn step(&mut self) -> Result<LogRecord> {
        let config = self.ck.model.config.clone();
        let rng = &mut self.ck.rng;
        let si = rng.random_range(0..self.subjects.len());
        let ds = &self.subjects[si];
        let fi = rng.random_range(0..ds.frames.len());
        let target = rng.random_range(0..ds.num_views());
        let mut sources = source_views(&ds.cameras, target, config.train.source_views);
        if sources.len() > 1 && sources.contains(&target) && rng.random_bool(config.train.target_dropout) {
            sources.retain(|&v| v != target);
        }
        let frame = &ds.frames[fi];
        let cams: Vec<_> = sources.iter().map(|&v| ds.cameras[v].clone()).collect();
        let scene = FrameScene::new(&ds.skeleton, &frame.pose, cams, config.model.bounds_margin)?;

        let fg = &self.foreground[si][fi * ds.num_views() + target];
        let batch = config.train.batch_rays;
        let n_fg = if fg.is_empty() {
            0
        } else {
            (batch as f64 * config.train.foreground_fraction).round() as usize
        };
        let pixels = ds.width * ds.height;
        let view = &frame.views[target];
        let camera = &ds.cameras[target];
        let mut rays = Vec::with_capacity(batch);
        let mut targets = RayTargets::default();
        for b in 0..batch {
            let p = if b < n_fg {
                fg[rng.random_range(0..fg.len())]
            } else {
                rng.random_range(0..pixels)
            };
            rays.push(generate_ray(camera, [(p % ds.width) as f64, (p / ds.width) as f64]));
            targets.colors.push(view.rgb.pixel_unit(p));
            targets.masks.push(view.mask[p] as f64);
        }

        let mut tape = Tape::<T>::new();
        let bound = BoundNets::bind(&mut tape, &self.ck.model.nets, self.settings.trainable);
        let arch = &self.ck.model.arch;
        let mut maps = Vec::with_capacity(sources.len());
        for &v in &sources {
            let src = &frame.views[v];
            let x = tape.constant(rgba_tensor(&src.rgb.data, &src.mask, ds.width, ds.height));
            maps.push(arch.encoder.forward(&mut tape, &bound.encoder, x)?);
        }
        let model = &self.ck.model;
        let render = render_rays(&mut tape, model, &bound, &scene, &maps, &rays, Sampling::Train(rng))?;
        let (loss, report) = batch_loss(&mut tape, render.as_ref(), &targets, config.train.mask_weight, true)?;
        let diagnostic = || {
            format!(
                "subject {si}, frame {}, target view {target}, sources {sources:?}, l_c {}, l_m {}, {} of {} rays hit",
                frame.index,
                report.l_c,
                report.l_m,
                render.as_ref().map_or(0, |r| r.hit.len()),
                rays.len()
            )
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.ck.step,
                diagnostic: diagnostic(),
            });
        }
        if let Some(loss) = loss {
            tape.backward(loss)?;
        }
        let binds = [&bound.encoder, &bound.view_weights, &bound.deform, &bound.field];
        let adam = AdamConfig::new(self.settings.schedule);
        let mut lr = self.settings.schedule.lr(self.ck.step);
        let mut grads = Vec::new();
        for (k, on) in self.settings.flags().into_iter().enumerate() {
            if on {
                let g = binds[k].grads(&tape);
                if !g.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.ck.step,
                        diagnostic: format!("non-finite gradient in {}: {}", crate::nets::NETWORK_NAMES[k], diagnostic()),
                    });
                }
                grads.push((k, g));
            }
        }
        drop(tape);
        for (k, g) in grads {
            let state = self.ck.optim[k].get_or_insert_with(|| AdamState::new(self.ck.model.nets.sets()[k]));
            lr = state.step(&adam, self.ck.model.nets.sets_mut()[k], &g)?;
        }
        self.ck.step += 1;
        Ok(LogRecord {
            stage: self.settings.stage.name(),
            step: self.ck.step,
            l_c: report.l_c,
            l_m: report.l_m,
            total: report.total,
            lambda: report.lambda,
            lr,
            val_psnr: None,
        })
    }

    /// Runs until the stage's step budget (or `until`, if smaller) is reached,
    /// passing every `log_every`-th record (and the last) to `log`.
    pub fn run(&mut self, until: Option<u64>, log: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        let end = until.map_or(self.settings.steps, |u| u.min(self.settings.steps));
        let c = self.ck.model.config.train.clone();
        let every = c.log_every.max(1);
        while self.ck.step < end {
            let mut rec = self.step()?;
            let validate = c.validate_every > 0 && rec.step % c.validate_every == 0;
            if validate {
                rec.val_psnr = Some(self.validation_psnr()?);
            }
            if rec.step % every == 0 || rec.step == end || validate {
                log(&rec);
            }
        }
        Ok(())
    }

    /// PSNR of view 0 of the first subject's first frame.
    pub fn validation_psnr(&self) -> Result<f64> {
        let ds = &self.subjects[0];
        let (img, truth) = render_dataset_view(&self.ck.model, ds, 0, 0)?;
        psnr(&img.rgb8(), &truth)
    }
}

/// Renders view `view` of frame position `frame` from its training sources.
pub fn render_dataset_view<T: Real>(
    model: &crate::pipeline::HumanRf<T>,
    ds: &Dataset,
    frame: usize,
    view: usize,
) -> Result<(crate::pipeline::RenderedImage, Rgb8)> {
    let sources = source_views(&ds.cameras, view, model.config.train.source_views);
    let img = render_frame(model, ds, frame, &ds.cameras[view], &sources)?;
    Ok((img, ds.frames[frame].views[view].rgb.clone()))
}

/// Feature maps of the listed views of one frame.
pub fn frame_feature_maps<T: Real>(
    model: &crate::pipeline::HumanRf<T>,
    ds: &Dataset,
    frame: usize,
    views: &[usize],
) -> Result<Vec<FeatureMap<T>>> {
    let f = &ds.frames[frame];
    views
        .iter()
        .map(|&v| {
            let src = crate::features::SourceView::new(
                ds.cameras[v].clone(),
                f.views[v].rgb.clone(),
                f.views[v].mask.clone(),
                f.index,
            )?;
            crate::features::extract_features(&model.arch, &model.nets, &src)
        })
        .collect()
}

/// Trains the radiance-field networks from scratch (or resumes `ck`).
pub fn train_generalizable<T: Real>(
    ck: Checkpoint<T>,
    subjects: &[Dataset],
    log: &mut dyn FnMut(&LogRecord),
) -> Result<Checkpoint<T>> {
    let mut t = Trainer::new(ck, subjects, Stage::Train)?;
    t.run(None, log)?;
    Ok(t.into_checkpoint())
}

/// Fine-tunes deformation and field on one subject with the feature
/// networks frozen.
pub fn finetune<T: Real>(ck: Checkpoint<T>, subject: &Dataset, log: &mut dyn FnMut(&LogRecord)) -> Result<Checkpoint<T>> {
    if ck.stage == Stage::Init {
        return Err(Error::InvalidInput("fine-tuning needs a trained checkpoint".into()));
    }
    let subjects = std::slice::from_ref(subject);
    let mut t = Trainer::new(ck, subjects, Stage::Finetune)?;
    t.run(None, log)?;
    Ok(t.into_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(color_loss(&[[0.2, 0.3, 0.4]], &[[0.2, 0.3, 0.4]]).0, 0.0);
        assert!((color_loss(&[[0.1, 0.0, 0.0]], &[[0.0; 3]]).0 - 0.01).abs() < 1e-15);
        assert!(mask_loss(&[1.0 - ALPHA_EPS], &[1.0]).0 < 2e-6);
        assert!((mask_loss(&[0.5], &[0.0]).0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = vec![0u8; 25];
        m[12] = 1;
        assert_eq!(dilated_pixels(&m, 5, 5, 0), vec![12]);
        assert_eq!(dilated_pixels(&m, 5, 5, 1).len(), 9);
        assert_eq!(dilated_pixels(&m, 5, 5, 2).len(), 25);
    }
}
