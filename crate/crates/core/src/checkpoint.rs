//! Binary checkpoints: every network's parameters, optimizer moments, the
//! configuration and the training RNG state.
//!
//! Layout (little-endian): magic `HUMANRF\0`, `u32` version, `u8` precision
//! tag, `u8` stage, `u32` joint count, length-prefixed config JSON, `u64`
//! config hash, `u64` step, RNG seed/stream/word position, then one section
//! per network (name, tensors, optional Adam moments) and a trailing CRC-32
//! of all preceding bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use autodiff::{AdamState, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nets::{Networks, NETWORK_NAMES};
use crate::pipeline::HumanRf;

pub const MAGIC: &[u8; 8] = b"HUMANRF\0";
pub const VERSION: u32 = 1;

/// Which optimization produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Train,
    Finetune,
    Blend,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Blend => "blend",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Stage::Init,
            1 => Stage::Train,
            2 => Stage::Finetune,
            3 => Stage::Blend,
            _ => return Err(Error::InvalidInput(format!("unknown stage code {c}"))),
        })
    }
}

/// A model together with the state needed to resume its optimization.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: HumanRf<T>,
    pub stage: Stage,
    /// Steps completed in `stage`.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Optimizer state per network, aligned with [`NETWORK_NAMES`].
    pub optim: [Option<AdamState<T>>; 5],
    /// Whether the appearance network has been trained.
    pub has_blend: bool,
}

impl<T: Real> Checkpoint<T> {
    /// Untrained model seeded from the config.
    pub fn fresh(config: Config, joints: usize) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
        Ok(Self {
            model: HumanRf::new(config, joints)?,
            stage: Stage::Init,
            step: 0,
            rng,
            optim: Default::default(),
            has_blend: false,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.push(T::TAG);
        w.push(self.stage.code());
        w.push(self.has_blend as u8);
        w.extend_from_slice(&(self.model.joints as u32).to_le_bytes());
        let json = self.model.config.canonical_json();
        w.extend_from_slice(&(json.len() as u64).to_le_bytes());
        w.extend_from_slice(json.as_bytes());
        w.extend_from_slice(&self.model.config.hash().to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.rng.get_seed());
        w.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        w.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        for (k, set) in self.model.nets.sets().into_iter().enumerate() {
            put_str(&mut w, NETWORK_NAMES[k]);
            w.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for p in set.iter() {
                put_str(&mut w, &p.name);
                let shape = p.value.shape();
                w.push(shape.len() as u8);
                for &d in shape {
                    w.extend_from_slice(&(d as u32).to_le_bytes());
                }
                w.extend(p.value.to_le_bytes());
            }
            match &self.optim[k] {
                Some(a) => {
                    w.push(1);
                    w.extend_from_slice(&a.step.to_le_bytes());
                    for t in a.m.iter().chain(&a.v) {
                        w.extend(t.to_le_bytes());
                    }
                }
                None => w.push(0),
            }
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < r.pos + 4 {
            return Err(Error::Truncated);
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let tag = r.u8()?;
        if tag != T::TAG {
            return Err(Error::PrecisionMismatch {
                found: tag,
                expected: T::TAG,
            });
        }
        let stage = Stage::from_code(r.u8()?)?;
        let has_blend = r.u8()? != 0;
        let joints = r.u32()? as usize;
        let json_len = r.u64()? as usize;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|e| Error::Config(format!("checkpoint config is not UTF-8: {e}")))?;
        let config: Config =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let hash = r.u64()?;
        if hash != config.hash() {
            return Err(Error::Config("checkpoint config hash does not match its config".into()));
        }
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut model = HumanRf::<T>::new(config, joints)?;
        let mut optim: [Option<AdamState<T>>; 5] = Default::default();
        for (k, set) in model.nets.sets_mut().into_iter().enumerate() {
            let name = r.string()?;
            if name != NETWORK_NAMES[k] {
                return Err(Error::ArchitectureMismatch(format!(
                    "expected section {}, found {name}",
                    NETWORK_NAMES[k]
                )));
            }
            let count = r.u32()? as usize;
            if count != set.len() {
                return Err(Error::ArchitectureMismatch(format!(
                    "{name}: {count} tensors, architecture has {}",
                    set.len()
                )));
            }
            let ids: Vec<_> = set.ids().collect();
            for &id in &ids {
                let tname = r.string()?;
                let ndim = r.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u32()? as usize);
                }
                let expected = set.iter().nth(id.index()).expect("id in range");
                if expected.name != tname || expected.value.shape() != shape.as_slice() {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{name}: tensor {tname} {shape:?} vs {} {:?}",
                        expected.name,
                        expected.value.shape()
                    )));
                }
                *set.get_mut(id) = r.tensor(shape)?;
            }
            if r.u8()? == 1 {
                let astep = r.u64()?;
                let shapes: Vec<Vec<usize>> = set.iter().map(|p| p.value.shape().to_vec()).collect();
                let m = shapes.iter().map(|s| r.tensor(s.clone())).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| r.tensor(s.clone())).collect::<Result<Vec<_>>>()?;
                optim[k] = Some(AdamState { step: astep, m, v });
            }
        }
        if r.pos != body.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} trailing bytes after the last section",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            stage,
            step,
            rng,
            optim,
            has_blend,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn networks(&self) -> &Networks<T> {
        &self.model.nets
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u16).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::ArchitectureMismatch("tensor name is not UTF-8".into()))
    }

    fn tensor<T: Real>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor::new(shape, data)?)
    }
}
