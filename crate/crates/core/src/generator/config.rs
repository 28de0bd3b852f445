use std::fmt;
use std::str::FromStr;

use crate::config::{kv_get, KvMap};
use crate::error::{Error, Result};
use crate::kernel::AdamWConfig;
use crate::world::WorldConfig;

/// Smallest training window that can hold the last-ten-frames anchor draw.
pub const MIN_WINDOW: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub ar_blocks: usize,
    pub ar_dim: usize,
    pub ar_heads: usize,
    pub head_blocks: usize,
    pub head_dim: usize,
    pub motion_dim: usize,
    /// Training sequence length in frames; inference keeps `window_n - 1`
    /// frames of history.
    pub window_n: usize,
    /// Replaces the flow head by a linear projection trained with MSE.
    pub deterministic_mode: bool,
    pub audio_frames_per_video_frame: usize,
    pub rope_base: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_world(&WorldConfig::default())
    }
}

impl GeneratorConfig {
    pub fn for_world(world: &WorldConfig) -> Self {
        Self {
            ar_blocks: 2,
            ar_dim: 64,
            ar_heads: 4,
            head_blocks: 2,
            head_dim: 64,
            motion_dim: world.motion_dim,
            window_n: 40,
            deterministic_mode: false,
            audio_frames_per_video_frame: world.audio_frames_per_video_frame,
            rope_base: 10_000.0,
        }
    }

    /// Shape checks needed to build a model.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.ar_heads == 0 || self.ar_dim % self.ar_heads != 0 || (self.ar_dim / self.ar_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "ar_dim {} must split into {} heads of even size",
                self.ar_dim, self.ar_heads
            )));
        }
        if self.head_dim < 2 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if self.motion_dim == 0 || self.audio_frames_per_video_frame == 0 || self.window_n < 2 {
            return Err(Error::Config(
                "motion_dim, frame ratio and window must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        if self.window_n < MIN_WINDOW {
            return Err(Error::Config(format!(
                "window_n {} is below {MIN_WINDOW}",
                self.window_n
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str, kv: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            kv.insert(format!("{prefix}{k}"), v);
        };
        put("ar_blocks", self.ar_blocks.to_string());
        put("ar_dim", self.ar_dim.to_string());
        put("ar_heads", self.ar_heads.to_string());
        put("head_blocks", self.head_blocks.to_string());
        put("head_dim", self.head_dim.to_string());
        put("motion_dim", self.motion_dim.to_string());
        put("window_n", self.window_n.to_string());
        put("deterministic_mode", self.deterministic_mode.to_string());
        put(
            "audio_frames_per_video_frame",
            self.audio_frames_per_video_frame.to_string(),
        );
        put("rope_base", format!("{:?}", self.rope_base));
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}{k}");
        kv_get(kv, &p("ar_blocks"), &mut self.ar_blocks)?;
        kv_get(kv, &p("ar_dim"), &mut self.ar_dim)?;
        kv_get(kv, &p("ar_heads"), &mut self.ar_heads)?;
        kv_get(kv, &p("head_blocks"), &mut self.head_blocks)?;
        kv_get(kv, &p("head_dim"), &mut self.head_dim)?;
        kv_get(kv, &p("motion_dim"), &mut self.motion_dim)?;
        kv_get(kv, &p("window_n"), &mut self.window_n)?;
        kv_get(kv, &p("deterministic_mode"), &mut self.deterministic_mode)?;
        kv_get(
            kv,
            &p("audio_frames_per_video_frame"),
            &mut self.audio_frames_per_video_frame,
        )?;
        kv_get(kv, &p("rope_base"), &mut self.rope_base)?;
        Ok(())
    }
}

/// How the anchor frame is chosen during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AnchorMode {
    /// Uniformly from the last ten frames of the window.
    #[default]
    Last10,
    /// Uniformly from the whole episode.
    Random,
    /// Never; the anchor condition is always the null embedding.
    None,
}

impl fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Last10 => "last10",
            Self::Random => "random",
            Self::None => "none",
        })
    }
}

impl FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last10" => Ok(Self::Last10),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown anchor mode {s:?}"))),
        }
    }
}

/// Learning-rate schedule over the training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Multiplier of the base rate at `step` (0-based) of `steps`.
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine if steps <= 1 => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / (steps - 1) as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown lr schedule {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub p_drop_speaker: f64,
    pub p_drop_listener: f64,
    pub p_drop_anchor: f64,
    pub anchor_mode: AnchorMode,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            optim: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            p_drop_speaker: 0.5,
            p_drop_listener: 0.5,
            p_drop_anchor: 0.1,
            anchor_mode: AnchorMode::Last10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn to_kv(&self, prefix: &str, kv: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            kv.insert(format!("{prefix}{k}"), v);
        };
        put("steps", self.steps.to_string());
        put("batch", self.batch.to_string());
        put("lr", format!("{:?}", self.optim.lr));
        put("lr_schedule", self.lr_schedule.to_string());
        put("weight_decay", format!("{:?}", self.optim.weight_decay));
        put(
            "clip_norm",
            self.optim.clip_norm.map_or_else(|| "none".into(), |c| format!("{c:?}")),
        );
        put("p_drop_speaker", format!("{:?}", self.p_drop_speaker));
        put("p_drop_listener", format!("{:?}", self.p_drop_listener));
        put("p_drop_anchor", format!("{:?}", self.p_drop_anchor));
        put("anchor_mode", self.anchor_mode.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}{k}");
        kv_get(kv, &p("steps"), &mut self.steps)?;
        kv_get(kv, &p("batch"), &mut self.batch)?;
        kv_get(kv, &p("lr"), &mut self.optim.lr)?;
        if let Some(v) = kv.get(&p("lr_schedule")) {
            self.lr_schedule = v.parse()?;
        }
        kv_get(kv, &p("weight_decay"), &mut self.optim.weight_decay)?;
        if let Some(v) = kv.get(&p("clip_norm")) {
            self.optim.clip_norm = match v.as_str() {
                "none" => None,
                x => Some(x.parse().map_err(|e| Error::Config(format!("clip_norm {x}: {e}")))?),
            };
        }
        kv_get(kv, &p("p_drop_speaker"), &mut self.p_drop_speaker)?;
        kv_get(kv, &p("p_drop_listener"), &mut self.p_drop_listener)?;
        kv_get(kv, &p("p_drop_anchor"), &mut self.p_drop_anchor)?;
        if let Some(v) = kv.get(&p("anchor_mode")) {
            self.anchor_mode = v.parse()?;
        }
        kv_get(kv, &p("checkpoint_every"), &mut self.checkpoint_every)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_drop_speaker, self.p_drop_listener, self.p_drop_anchor] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_lower_bound() {
        let mut cfg = GeneratorConfig::default();
        cfg.window_n = 10;
        assert!(cfg.validate().is_err());
        cfg.window_n = 11;
        cfg.validate().unwrap();
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.factor(0, 11), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 11) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(10, 11).abs() < 1e-15);
        assert_eq!(LrSchedule::Cosine.factor(0, 1), 1.0);
        assert_eq!(LrSchedule::Constant.factor(7, 11), 1.0);
        assert_eq!("cosine".parse::<LrSchedule>().unwrap(), LrSchedule::Cosine);
        assert!("linear".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn anchor_mode_strings() {
        for m in [AnchorMode::Last10, AnchorMode::Random, AnchorMode::None] {
            assert_eq!(m.to_string().parse::<AnchorMode>().unwrap(), m);
        }
        assert!("first".parse::<AnchorMode>().is_err());
    }

    #[test]
    fn train_kv_round_trip() {
        let mut t = TrainConfig::default();
        t.optim.clip_norm = None;
        t.p_drop_anchor = 0.25;
        let mut kv = KvMap::new();
        t.to_kv("train.", &mut kv);
        let mut back = TrainConfig::default();
        back.apply_kv("train.", &kv).unwrap();
        assert_eq!(back, t);
    }
}
