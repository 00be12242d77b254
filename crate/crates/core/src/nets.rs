//! Network building blocks and the five trainable networks.

use autodiff::{Bound, Init, ParamId, ParameterSet, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::camera::encoded_len;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Fully connected network: ReLU between layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    in_dim: usize,
    out_dim: usize,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        prefix: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let weight = params.add(format!("{prefix}.{i}.weight"), vec![w[0], w[1]], Init::FanIn(w[0]), rng)?;
            let bias = params.add(format!("{prefix}.{i}.bias"), vec![w[1]], Init::FanIn(w[0]), rng)?;
            layers.push((weight, bias));
        }
        Ok(Self {
            layers,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = linear(tape, bound, h, w, b)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

pub fn linear<T: Real>(tape: &mut Tape<T>, bound: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let h = tape.matmul(x, bound.var(w))?;
    Ok(tape.add_bias(h, bound.var(b))?)
}

/// Concatenates two `[H,W,*]` maps along channels.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
        return Err(Error::SizeMismatch(format!("channel concat of {sa:?} and {sb:?}")));
    }
    let (h, w) = (sa[0], sa[1]);
    let a2 = tape.reshape(a, vec![h * w, sa[2]])?;
    let b2 = tape.reshape(b, vec![h * w, sb[2]])?;
    let c = tape.concat(&[a2, b2])?;
    Ok(tape.reshape(c, vec![h, w, sa[2] + sb[2]])?)
}

/// Convolutional encoder-decoder producing per-pixel features from an RGBA
/// image: four stride-2 blocks down, three upsampling blocks with skip
/// connections, and a final block at full resolution that also sees the
/// input image.
#[derive(Clone, Debug)]
pub struct Encoder {
    down: Vec<(ParamId, ParamId)>,
    up: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
    pub feature_dim: usize,
}

pub const ENCODER_FACTOR: usize = 16;
pub const INPUT_CHANNELS: usize = 4;

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        widths: &[usize],
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() != 4 {
            return Err(Error::Config("encoder needs four widths".into()));
        }
        let mut conv = |name: String, cin: usize, cout: usize| -> Result<(ParamId, ParamId)> {
            let fan = 9 * cin;
            let w = params.add(format!("{name}.weight"), vec![fan, cout], Init::FanIn(fan), rng)?;
            let b = params.add(format!("{name}.bias"), vec![cout], Init::FanIn(fan), rng)?;
            Ok((w, b))
        };
        let mut down = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            down.push(conv(format!("down{i}"), cin, w)?);
            cin = w;
        }
        let up = vec![
            conv("up0".into(), widths[3] + widths[2], widths[2])?,
            conv("up1".into(), widths[2] + widths[1], widths[1])?,
            conv("up2".into(), widths[1] + widths[0], widths[0])?,
        ];
        let out = conv("out".into(), widths[0] + INPUT_CHANNELS, feature_dim)?;
        Ok(Self {
            down,
            up,
            out,
            feature_dim,
        })
    }

    /// `[H,W,4]` image to `[H,W,C]` features.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[2] != INPUT_CHANNELS {
            return Err(Error::SizeMismatch(format!("encoder input {s:?}, expected [H,W,4]")));
        }
        if s[0] % ENCODER_FACTOR != 0 || s[1] % ENCODER_FACTOR != 0 {
            return Err(Error::ImageSize {
                width: s[1],
                height: s[0],
                factor: ENCODER_FACTOR,
            });
        }
        let conv = |tape: &mut Tape<T>, x: Var, (w, b): (ParamId, ParamId), stride: usize| {
            tape.conv2d(x, bound.var(w), bound.var(b), stride)
        };
        let mut skips = Vec::with_capacity(4);
        let mut h = image;
        for &layer in &self.down {
            let c = conv(tape, h, layer, 2)?;
            h = tape.relu(c);
            skips.push(h);
        }
        for (i, &layer) in self.up.iter().enumerate() {
            let u = tape.upsample2x(h)?;
            let cat = concat_channels(tape, u, skips[2 - i])?;
            let c = conv(tape, cat, layer, 1)?;
            h = tape.relu(c);
        }
        let u = tape.upsample2x(h)?;
        let cat = concat_channels(tape, u, image)?;
        Ok(conv(tape, cat, self.out, 1)?)
    }
}

/// Trunk-and-heads radiance field: density from the encoded canonical
/// position only, color additionally from view direction and feature.
#[derive(Clone, Debug)]
pub struct FieldNet {
    trunk: Vec<(ParamId, ParamId)>,
    skip: usize,
    density: (ParamId, ParamId),
    color: Mlp,
    pub position_freqs: usize,
}

impl FieldNet {
    pub fn new<T: Real, R: Rng + ?Sized>(params: &mut ParameterSet<T>, m: &ModelConfig, rng: &mut R) -> Result<Self> {
        let pe = encoded_len(3, m.position_freqs);
        let width = m.field_width;
        let mut trunk = Vec::with_capacity(m.field_depth);
        for i in 0..m.field_depth {
            let fan = match i {
                0 => pe,
                i if i == m.field_skip => width + pe,
                _ => width,
            };
            let w = params.add(format!("trunk.{i}.weight"), vec![fan, width], Init::FanIn(fan), rng)?;
            let b = params.add(format!("trunk.{i}.bias"), vec![width], Init::FanIn(fan), rng)?;
            trunk.push((w, b));
        }
        let dw = params.add("density.weight", vec![width, 1], Init::FanIn(width), rng)?;
        let db = params.add("density.bias", vec![1], Init::Zeros, rng)?;
        let color_in = width + encoded_len(3, m.direction_freqs) + m.feature_dim;
        let color = Mlp::new(params, "color", color_in, &m.color_hidden, 3, rng)?;
        Ok(Self {
            trunk,
            skip: m.field_skip,
            density: (dw, db),
            color,
            position_freqs: m.position_freqs,
        })
    }

    pub fn color_input_dim(&self) -> usize {
        self.color.in_dim()
    }

    /// Encoded positions `[N, pe]` to the trunk output `[N, W]`.
    pub fn trunk<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, encoded: Var) -> Result<Var> {
        let mut h = encoded;
        for (i, &(w, b)) in self.trunk.iter().enumerate() {
            if i == self.skip {
                h = tape.concat(&[h, encoded])?;
            }
            let l = linear(tape, bound, h, w, b)?;
            h = tape.relu(l);
        }
        Ok(h)
    }

    /// Non-negative density `[N,1]`.
    pub fn density<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, trunk: Var) -> Result<Var> {
        let raw = linear(tape, bound, trunk, self.density.0, self.density.1)?;
        Ok(tape.softplus(raw))
    }

    /// Color in `[0,1]` from trunk, encoded direction and feature.
    pub fn color<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        trunk: Var,
        encoded_dir: Var,
        feature: Var,
    ) -> Result<Var> {
        let x = tape.concat(&[trunk, encoded_dir, feature])?;
        let raw = self.color.forward(tape, bound, x)?;
        Ok(tape.sigmoid(raw))
    }
}

/// Parameters of the five networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T> {
    /// Image encoder.
    pub encoder: ParameterSet<T>,
    /// Per-view feature weighting network.
    pub view_weights: ParameterSet<T>,
    /// Deformation residual network.
    pub deform: ParameterSet<T>,
    /// Radiance field.
    pub field: ParameterSet<T>,
    /// Appearance blending network.
    pub appearance: ParameterSet<T>,
}

pub const NETWORK_NAMES: [&str; 5] = ["encoder", "view_weights", "deform", "field", "appearance"];

impl<T: Real> Networks<T> {
    pub fn sets(&self) -> [&ParameterSet<T>; 5] {
        [&self.encoder, &self.view_weights, &self.deform, &self.field, &self.appearance]
    }

    pub fn sets_mut(&mut self) -> [&mut ParameterSet<T>; 5] {
        [
            &mut self.encoder,
            &mut self.view_weights,
            &mut self.deform,
            &mut self.field,
            &mut self.appearance,
        ]
    }

    /// Content hash of one network's parameter bytes.
    pub fn hash(&self, index: usize) -> u64 {
        crate::config::fnv1a(&self.sets()[index].to_bytes())
    }

    pub fn cast<U: Real>(&self) -> Networks<U> {
        Networks {
            encoder: self.encoder.cast(),
            view_weights: self.view_weights.cast(),
            deform: self.deform.cast(),
            field: self.field.cast(),
            appearance: self.appearance.cast(),
        }
    }

    /// Copies values from `other` by name; fails on any missing name or shape mismatch.
    pub fn load_from(&mut self, other: &Networks<T>) -> Result<()> {
        for (k, (dst, src)) in self.sets_mut().into_iter().zip(other.sets()).enumerate() {
            if dst.len() != src.len() {
                return Err(Error::ArchitectureMismatch(format!(
                    "{} has {} tensors, checkpoint has {}",
                    NETWORK_NAMES[k],
                    dst.len(),
                    src.len()
                )));
            }
            for p in src.iter() {
                let id = dst.id(&p.name).ok_or_else(|| {
                    Error::ArchitectureMismatch(format!("{}: unexpected tensor {}", NETWORK_NAMES[k], p.name))
                })?;
                let t = dst.get_mut(id);
                if t.shape() != p.value.shape() {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{}.{}: shape {:?} vs {:?}",
                        NETWORK_NAMES[k],
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                *t = p.value.clone();
            }
        }
        Ok(())
    }
}

/// Layer layout of all networks, derived deterministically from the config.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoder: Encoder,
    pub view_weights: Mlp,
    pub deform: Mlp,
    pub field: FieldNet,
    pub appearance: Mlp,
}

/// Width of the per-view geometric input to the view-weighting network
/// (encoded target and source directions plus the cosine between them).
pub fn view_geometry_dim(m: &ModelConfig) -> usize {
    2 * encoded_len(3, m.direction_freqs) + 1
}

/// Width of the pose-descriptor part of the deformation input.
pub fn descriptor_dim(m: &ModelConfig, joints: usize) -> usize {
    encoded_len(joints, m.distance_freqs) + 3 * joints
}

/// Per-view block of the appearance blending input: feature, visibility,
/// depth residual and angle cosine.
pub fn appearance_block_dim(m: &ModelConfig) -> usize {
    m.feature_dim + 3
}

impl Architecture {
    pub fn build<T: Real, R: Rng + ?Sized>(m: &ModelConfig, joints: usize, rng: &mut R) -> Result<(Self, Networks<T>)> {
        let mut nets = Networks {
            encoder: ParameterSet::new(),
            view_weights: ParameterSet::new(),
            deform: ParameterSet::new(),
            field: ParameterSet::new(),
            appearance: ParameterSet::new(),
        };
        let encoder = Encoder::new(&mut nets.encoder, &m.encoder_widths, m.feature_dim, rng)?;
        let view_weights = Mlp::new(
            &mut nets.view_weights,
            "score",
            view_geometry_dim(m) + m.feature_dim,
            &m.view_weight_hidden,
            1,
            rng,
        )?;
        let deform_in = descriptor_dim(m, joints) + if m.deform_uses_features { m.feature_dim } else { 0 };
        let deform = Mlp::new(&mut nets.deform, "offset", deform_in, &m.deform_hidden, 3, rng)?;
        let field = FieldNet::new(&mut nets.field, m, rng)?;
        let appearance = Mlp::new(
            &mut nets.appearance,
            "blend",
            2 * appearance_block_dim(m),
            &m.blend_hidden,
            3,
            rng,
        )?;
        Ok((
            Self {
                encoder,
                view_weights,
                deform,
                field,
                appearance,
            },
            nets,
        ))
    }
}

/// Converts an 8-bit RGB image plus mask into an `[H,W,4]` tensor in [0,1]
/// with the background zeroed.
pub fn rgba_tensor<T: Real>(rgb: &[u8], mask: &[u8], width: usize, height: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(width * height * 4);
    for i in 0..width * height {
        let m = (mask[i] > 0) as u8 as f64;
        for c in 0..3 {
            data.push(T::c(rgb[3 * i + c] as f64 / 255.0 * m));
        }
        data.push(T::c(m));
    }
    Tensor::new(vec![height, width, 4], data).expect("sizes match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_widths_match_reference_tables() {
        let m = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (arch, nets) = Architecture::build::<f32, _>(&m, 24, &mut rng).unwrap();
        assert_eq!(arch.deform.in_dim(), 320);
        assert_eq!(arch.field.color_input_dim(), 315);
        assert_eq!(arch.appearance.in_dim(), 70);
        assert_eq!(encoded_len(3, m.position_freqs), 63);
        let density_bias = nets.field.get(nets.field.id("density.bias").unwrap());
        assert!(density_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_output_shape_and_zero_input() {
        let m = ModelConfig {
            feature_dim: 32,
            encoder_widths: vec![8, 8, 8, 8],
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (arch, nets) = Architecture::build::<f64, _>(&m, 24, &mut rng).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let b = nets.encoder.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::zeros(vec![32, 32, 4]));
            let y = arch.encoder.forward(&mut tape, &b, x).unwrap();
            tape.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[32, 32, 32]);
        assert!(a.all_finite());
        assert_eq!(a, run());

        let mut tape = Tape::new();
        let b = nets.encoder.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![24, 32, 4]));
        assert!(matches!(arch.encoder.forward(&mut tape, &b, x), Err(Error::ImageSize { .. })));
    }
}
