//! `DYSW` dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DYSW" | version u16 | config_len u32 | config (UTF-8 key=value lines)
//! record_count u32
//! per record:
//!   audio_frames u32 | motion_frames u32 | audio_dim u32 | motion_dim u32
//!   mouth_count u32 | mouth channel indices u32 * mouth_count
//!   speaker f32 * (audio_frames * audio_dim)
//!   listener f32 * (audio_frames * audio_dim)
//!   motion f32 * (motion_frames * motion_dim)
//!   mouth signal f32 * (motion_frames * mouth_count)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{generate_episode, DyadicAudioFeatures, OracleEpisode, WorldConfig};
use crate::config::{format_kv, parse_kv, KvMap};
use crate::error::{Error, Result};
use crate::kernel::{RngState, Tensor};

const MAGIC: &[u8; 4] = b"DYSW";
const VERSION: u16 = 1;
pub const MANIFEST_SUFFIX: &str = ".manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub episodes: Vec<OracleEpisode>,
}

impl Dataset {
    /// Generates `episodes` episodes of `frames` frames; episode `k` draws
    /// from its own stream forked off `rng`.
    pub fn generate(cfg: &WorldConfig, episodes: usize, frames: usize, rng: &RngState) -> Result<Self> {
        if episodes == 0 || frames == 0 {
            return Err(Error::Input("episode and frame counts must be positive".into()));
        }
        let episodes = (0..episodes)
            .map(|k| generate_episode(cfg, frames, &mut rng.fork(&format!("episode{k}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            episodes,
        })
    }

    pub fn total_motion_frames(&self) -> usize {
        self.episodes.iter().map(OracleEpisode::frames).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut kv = KvMap::new();
        self.config.to_kv("world.", &mut kv);
        let cfg = format_kv(&kv);
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.episodes.len());
        for ep in &self.episodes {
            put_u32(&mut out, ep.audio.frames());
            put_u32(&mut out, ep.frames());
            put_u32(&mut out, ep.audio.feature_dim());
            put_u32(&mut out, ep.motion.cols());
            put_u32(&mut out, ep.mouth_channels.len());
            for &c in &ep.mouth_channels {
                put_u32(&mut out, c);
            }
            for t in [
                &ep.audio.speaker,
                &ep.audio.listener,
                &ep.motion,
                &ep.deterministic_mouth_signal,
            ] {
                put_f32s(&mut out, t.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a DYSW dataset".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let cfg_len = r.u32()?;
        let text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let mut config = WorldConfig::default();
        config.apply_kv("world.", &parse_kv(text)?)?;
        let count = r.u32()?;
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let (af, mf, ad, md) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let nm = r.u32()?;
            let mouth_channels = (0..nm).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let speaker = Tensor::matrix(af, ad, r.f32s(af * ad)?)?;
            let listener = Tensor::matrix(af, ad, r.f32s(af * ad)?)?;
            let motion = Tensor::matrix(mf, md, r.f32s(mf * md)?)?;
            let mouth = Tensor::matrix(mf, nm, r.f32s(mf * nm)?)?;
            episodes.push(OracleEpisode {
                audio: DyadicAudioFeatures::new(speaker, listener)?,
                motion,
                mouth_channels,
                deterministic_mouth_signal: mouth,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, episodes })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes the dataset and its `key=value` manifest; returns the manifest path.
    pub fn write_with_manifest(&self, path: &Path, seed: u64) -> Result<PathBuf> {
        self.write(path)?;
        let mut kv = KvMap::new();
        kv.insert("format".into(), "DYSW".into());
        kv.insert("version".into(), VERSION.to_string());
        kv.insert("episodes".into(), self.episodes.len().to_string());
        let frames = self.episodes.first().map_or(0, OracleEpisode::frames);
        kv.insert("frames".into(), frames.to_string());
        kv.insert("total_motion_frames".into(), self.total_motion_frames().to_string());
        kv.insert("seed".into(), seed.to_string());
        self.config.to_kv("world.", &mut kv);
        let manifest = manifest_path(path);
        fs::write(&manifest, format_kv(&kv))?;
        Ok(manifest)
    }
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

/// Reads a dataset manifest back as a key/value map.
pub fn read_manifest(dataset: &Path) -> Result<KvMap> {
    parse_kv(&fs::read_to_string(manifest_path(dataset))?)
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits u32").to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}
