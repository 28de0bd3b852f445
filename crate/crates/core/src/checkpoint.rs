//! `DYST` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DYST" | version u16 | config_len u32 | config (UTF-8 key=value lines)
//! tensor_count u32
//! per tensor:
//!   name_len u32 | name (UTF-8) | rank u32 | dims u32 * rank | f32 * numel
//! ```
//!
//! Weights are trained in `f64` and rounded to `f32` when saved, so a
//! freshly trained model and its reloaded checkpoint can differ in the last
//! bits. Everything downstream of a checkpoint file (generation, streaming,
//! evaluation) reads the stored weights, and saving a loaded checkpoint
//! reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::config::{format_kv, parse_kv, KvMap, RunConfig};
use crate::encoder::{AudioEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{AnchorMode, Generator};
use crate::kernel::{ParamSet, Tensor};
use crate::world::dataset::{put_f32s, put_u32, Reader};

const MAGIC: &[u8; 4] = b"DYST";
const VERSION: u16 = 1;

const KIND: &str = "model.kind";
const FROM_TEACHER: &str = "model.from_teacher";
const ANCHOR_MODE: &str = "model.anchor_mode";
const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: KvMap,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = format_kv(&self.config);
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a DYST checkpoint".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let utf8 = |b: &[u8]| {
            std::str::from_utf8(b)
                .map(str::to_owned)
                .map_err(|e| Error::Format(e.to_string()))
        };
        let cfg_len = r.u32()?;
        let config = parse_kv(&utf8(r.take(cfg_len)?)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = utf8(r.take(name_len)?)?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
            tensors.push((name, Tensor::new(shape, r.f32s(numel)?)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn kind(&self) -> Option<&str> {
        self.config.get(KIND).map(String::as_str)
    }

    fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, t) in &self.tensors {
            ps.add(name.clone(), t.clone());
        }
        ps
    }

    pub fn from_encoder(enc: &AudioEncoder) -> Self {
        let mut config = KvMap::new();
        config.insert(KIND.into(), "encoder".into());
        config.insert(FROM_TEACHER.into(), enc.from_teacher.to_string());
        enc.cfg.to_kv(ENCODER_PREFIX, &mut config);
        Self {
            config,
            tensors: named_tensors(&enc.params),
        }
    }

    pub fn to_encoder(&self) -> Result<AudioEncoder> {
        if self.kind() != Some("encoder") {
            return Err(Error::Incompatible(format!(
                "expected an encoder checkpoint, found {:?}",
                self.kind()
            )));
        }
        let mut cfg = EncoderConfig::teacher();
        cfg.apply_kv(ENCODER_PREFIX, &self.config)?;
        let mut from_teacher = false;
        crate::config::kv_get(&self.config, FROM_TEACHER, &mut from_teacher)?;
        AudioEncoder::from_params(cfg, self.params(), from_teacher)
    }

    /// Stores `gen` together with the run configuration; the generator's
    /// own architecture overrides the corresponding `run` fields.
    pub fn from_generator(gen: &Generator, run: &RunConfig) -> Self {
        let mut run = run.clone();
        run.generator = gen.cfg.clone();
        run.speaker_encoder = gen.speaker_cfg.clone();
        run.listener_encoder = gen.listener_cfg.clone();
        let mut config = run.to_kv();
        config.insert(KIND.into(), "generator".into());
        config.insert(ANCHOR_MODE.into(), gen.anchor_mode.to_string());
        Self {
            config,
            tensors: named_tensors(&gen.params),
        }
    }

    /// The stored generator and the run configuration it was saved with.
    pub fn to_generator(&self) -> Result<(Generator, RunConfig)> {
        if self.kind() != Some("generator") {
            return Err(Error::Incompatible(format!(
                "expected a generator checkpoint, found {:?}",
                self.kind()
            )));
        }
        let mut kv = self.config.clone();
        kv.remove(KIND);
        let anchor: AnchorMode = kv
            .remove(ANCHOR_MODE)
            .ok_or_else(|| Error::Format(format!("missing {ANCHOR_MODE}")))?
            .parse()?;
        let mut run = RunConfig::default();
        run.apply_kv(&kv)?;
        let gen = Generator::from_params(
            run.generator.clone(),
            run.speaker_encoder.clone(),
            run.listener_encoder.clone(),
            anchor,
            self.params(),
        )?;
        Ok((gen, run))
    }
}

fn named_tensors(ps: &ParamSet) -> Vec<(String, Tensor)> {
    ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Rounds every weight to the nearest `f32`, matching what a save/load
/// cycle produces.
pub fn quantize(ps: &mut ParamSet) {
    for t in ps.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
}
