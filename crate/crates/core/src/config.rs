//! Flat `key = value` configuration.
//!
//! Files are UTF-8, one `key = value` per line, `#` starts a comment, keys
//! are dotted (`world.coart_lag_q`). Layering is defaults, then the file,
//! then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::engine::SamplerConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, TrainConfig};
use crate::world::WorldConfig;

pub type KvMap = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut kv = KvMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        kv.insert(k.to_string(), v.trim().to_string());
    }
    Ok(kv)
}

pub fn format_kv(kv: &KvMap) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses `kv[key]` into `slot` when present.
pub fn kv_get<T: FromStr>(kv: &KvMap, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: Debug,
{
    if let Some(v) = kv.get(key) {
        *slot = v.parse().map_err(|e| Error::Config(format!("{key} = {v}: {e:?}")))?;
    }
    Ok(())
}

/// Optional lookahead: `full`/`none`/`unbounded` map to `None`.
pub fn parse_lookahead(v: &str) -> Result<Option<usize>> {
    match v {
        "full" | "none" | "unbounded" => Ok(None),
        n => n
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("lookahead {n}: {e}"))),
    }
}

/// Every knob of a run, with defaults for all fields.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub speaker_encoder: EncoderConfig,
    pub listener_encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub episodes: usize,
    pub frames: usize,
    pub teacher_steps: usize,
    pub distill_steps: usize,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            speaker_encoder: EncoderConfig::student(world.coart_lag_q),
            listener_encoder: EncoderConfig::student(0),
            generator: GeneratorConfig::for_world(&world),
            world,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            episodes: 100,
            frames: 200,
            teacher_steps: 2000,
            distill_steps: 1000,
            dataset: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.world.to_kv("world.", &mut kv);
        self.speaker_encoder.to_kv("speaker_encoder.", &mut kv);
        self.listener_encoder.to_kv("listener_encoder.", &mut kv);
        self.generator.to_kv("generator.", &mut kv);
        self.train.to_kv("train.", &mut kv);
        self.sampler.to_kv("sampler.", &mut kv);
        kv.insert("data.episodes".into(), self.episodes.to_string());
        kv.insert("data.frames".into(), self.frames.to_string());
        kv.insert("encoder.teacher_steps".into(), self.teacher_steps.to_string());
        kv.insert("encoder.distill_steps".into(), self.distill_steps.to_string());
        if let Some(d) = &self.dataset {
            kv.insert("data.path".into(), d.display().to_string());
        }
        kv.insert("out".into(), self.out.display().to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let known = Self::default().to_kv();
        if let Some(k) = kv.keys().find(|k| !known.contains_key(*k) && k.as_str() != "data.path") {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        self.world.apply_kv("world.", kv)?;
        self.speaker_encoder.apply_kv("speaker_encoder.", kv)?;
        self.listener_encoder.apply_kv("listener_encoder.", kv)?;
        self.generator.apply_kv("generator.", kv)?;
        self.train.apply_kv("train.", kv)?;
        self.sampler.apply_kv("sampler.", kv)?;
        kv_get(kv, "data.episodes", &mut self.episodes)?;
        kv_get(kv, "data.frames", &mut self.frames)?;
        kv_get(kv, "encoder.teacher_steps", &mut self.teacher_steps)?;
        kv_get(kv, "encoder.distill_steps", &mut self.distill_steps)?;
        if let Some(p) = kv.get("data.path") {
            self.dataset = Some(PathBuf::from(p));
        }
        if let Some(p) = kv.get("out") {
            self.out = PathBuf::from(p);
        }
        kv_get(kv, "seed", &mut self.seed)?;
        Ok(())
    }

    /// Defaults, overridden by `file` (if any), overridden by `overrides`.
    pub fn load(file: Option<&Path>, overrides: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_kv(&parse_kv(&std::fs::read_to_string(path)?)?)?;
        }
        cfg.apply_kv(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.speaker_encoder.validate()?;
        self.listener_encoder.validate()?;
        self.generator.validate()?;
        self.sampler.validate()?;
        if self.generator.motion_dim != self.world.motion_dim {
            return Err(Error::Config(format!(
                "generator.motion_dim {} != world.motion_dim {}",
                self.generator.motion_dim, self.world.motion_dim
            )));
        }
        Ok(())
    }
}
