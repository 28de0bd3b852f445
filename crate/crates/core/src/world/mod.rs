//! Synthetic dyadic world.
//!
//! Stands in for real conversation video: it emits paired speaker/listener
//! audio feature tracks together with ground-truth motion produced by a
//! known oracle. Mouth channels are a fixed linear map of a speaker-audio
//! window that reaches `coart_lag_q` audio frames past the motion frame's
//! aligned audio position (anticipatory coarticulation). The remaining
//! "pose" channels follow the listener audio with a strictly causal delay,
//! plus an episode-level head offset, AR(1) drift and Gaussian innovation.
//!
//! All generated values are rounded to the `f32` grid so the on-disk format
//! round-trips bitwise.

pub(crate) mod dataset;

pub use dataset::{read_manifest, Dataset, MANIFEST_SUFFIX};

use crate::config::{kv_get, KvMap};
use crate::engine::StreamPacket;
use crate::error::{Error, Result};
use crate::kernel::{RngState, Tensor};

/// Video frame rate of the motion track.
pub const VIDEO_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub motion_dim: usize,
    pub audio_feature_dim: usize,
    pub audio_frames_per_video_frame: usize,
    /// Future audio frames (past the aligned position) driving the mouth.
    pub coart_lag_q: usize,
    /// Minimum age, in audio frames, of listener audio that moves the pose.
    pub listener_delay_p: usize,
    pub noise_scale: f64,
    pub drift_coeff: f64,
    /// Past audio frames (before the aligned position) driving the mouth.
    pub mouth_past_frames: usize,
    /// Number of listener audio taps behind the delay.
    pub listener_taps: usize,
    /// Scale of the per-episode static head-pose offset.
    pub pose_offset_scale: f64,
    /// AR(1) coefficient of the audio feature generator.
    pub audio_smoothing: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            motion_dim: 16,
            audio_feature_dim: 8,
            audio_frames_per_video_frame: 2,
            coart_lag_q: 2,
            listener_delay_p: 4,
            noise_scale: 0.1,
            drift_coeff: 0.9,
            mouth_past_frames: 2,
            listener_taps: 3,
            pose_offset_scale: 1.0,
            audio_smoothing: 0.3,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.motion_dim < 2 || self.audio_feature_dim == 0 || self.audio_frames_per_video_frame == 0 {
            return bad("dimensions must be positive (motion_dim >= 2)");
        }
        if self.listener_delay_p < 1 {
            return bad("listener_delay_p must be >= 1");
        }
        if !(self.drift_coeff > 0.0 && self.drift_coeff < 1.0) {
            return bad("drift_coeff must lie strictly inside (0, 1)");
        }
        if self.noise_scale < 0.0 || self.pose_offset_scale < 0.0 || self.listener_taps == 0 {
            return bad("noise/offset scales must be >= 0 and listener_taps >= 1");
        }
        if !(0.0..1.0).contains(&self.audio_smoothing) {
            return bad("audio_smoothing must lie in [0, 1)");
        }
        Ok(())
    }

    /// Mouth channels: the first quarter of the motion dims (at least one).
    pub fn mouth_channels(&self) -> Vec<usize> {
        (0..(self.motion_dim / 4).max(1)).collect()
    }

    pub fn pose_channels(&self) -> Vec<usize> {
        (self.mouth_channels().len()..self.motion_dim).collect()
    }

    pub fn audio_frame_seconds(&self) -> f64 {
        1.0 / (VIDEO_FPS * self.audio_frames_per_video_frame as f64)
    }

    /// Audio index aligned with the end of motion frame `i`.
    pub fn aligned_audio_index(&self, frame: usize) -> usize {
        (frame + 1) * self.audio_frames_per_video_frame - 1
    }

    pub fn to_kv(&self, prefix: &str, kv: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            kv.insert(format!("{prefix}{k}"), v);
        };
        put("motion_dim", self.motion_dim.to_string());
        put("audio_feature_dim", self.audio_feature_dim.to_string());
        put(
            "audio_frames_per_video_frame",
            self.audio_frames_per_video_frame.to_string(),
        );
        put("coart_lag_q", self.coart_lag_q.to_string());
        put("listener_delay_p", self.listener_delay_p.to_string());
        put("noise_scale", format!("{:?}", self.noise_scale));
        put("drift_coeff", format!("{:?}", self.drift_coeff));
        put("mouth_past_frames", self.mouth_past_frames.to_string());
        put("listener_taps", self.listener_taps.to_string());
        put("pose_offset_scale", format!("{:?}", self.pose_offset_scale));
        put("audio_smoothing", format!("{:?}", self.audio_smoothing));
        put("seed", self.seed.to_string());
    }

    /// Overrides fields present in `kv` under `prefix`.
    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}{k}");
        kv_get(kv, &p("motion_dim"), &mut self.motion_dim)?;
        kv_get(kv, &p("audio_feature_dim"), &mut self.audio_feature_dim)?;
        kv_get(
            kv,
            &p("audio_frames_per_video_frame"),
            &mut self.audio_frames_per_video_frame,
        )?;
        kv_get(kv, &p("coart_lag_q"), &mut self.coart_lag_q)?;
        kv_get(kv, &p("listener_delay_p"), &mut self.listener_delay_p)?;
        kv_get(kv, &p("noise_scale"), &mut self.noise_scale)?;
        kv_get(kv, &p("drift_coeff"), &mut self.drift_coeff)?;
        kv_get(kv, &p("mouth_past_frames"), &mut self.mouth_past_frames)?;
        kv_get(kv, &p("listener_taps"), &mut self.listener_taps)?;
        kv_get(kv, &p("pose_offset_scale"), &mut self.pose_offset_scale)?;
        kv_get(kv, &p("audio_smoothing"), &mut self.audio_smoothing)?;
        kv_get(kv, &p("seed"), &mut self.seed)?;
        Ok(())
    }
}

/// Paired per-frame audio feature tracks, `frames x audio_feature_dim` each.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicAudioFeatures {
    pub speaker: Tensor,
    pub listener: Tensor,
}

impl DyadicAudioFeatures {
    pub fn new(speaker: Tensor, listener: Tensor) -> Result<Self> {
        if speaker.shape() != listener.shape() || speaker.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "speaker {:?} and listener {:?} must be equal-shaped matrices",
                speaker.shape(),
                listener.shape()
            )));
        }
        Ok(Self { speaker, listener })
    }

    pub fn frames(&self) -> usize {
        self.speaker.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.speaker.cols()
    }

    /// Audio frames `start..end` of both tracks.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let d = self.feature_dim();
        let cut = |t: &Tensor| Tensor::matrix(end - start, d, t.data()[start * d..end * d].to_vec()).expect("slice");
        Self {
            speaker: cut(&self.speaker),
            listener: cut(&self.listener),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleEpisode {
    pub audio: DyadicAudioFeatures,
    /// `frames x motion_dim` ground truth.
    pub motion: Tensor,
    pub mouth_channels: Vec<usize>,
    /// Noise-free mouth component, `frames x mouth_channels.len()`.
    pub deterministic_mouth_signal: Tensor,
}

impl OracleEpisode {
    pub fn frames(&self) -> usize {
        self.motion.rows()
    }
}

/// Fixed linear maps of a world, determined by `WorldConfig::seed`.
#[derive(Clone, Debug)]
pub struct OracleMaps {
    /// `taps x n_mouth x audio_dim`, tap 0 is the oldest audio frame.
    pub mouth: Vec<Vec<f64>>,
    /// `taps x n_pose x audio_dim`, tap 0 is the most recent (delay p).
    pub pose: Vec<Vec<f64>>,
}

impl OracleMaps {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut rng = RngState::derived(cfg.seed, "world/maps");
        let d = cfg.audio_feature_dim;
        let n_mouth = cfg.mouth_channels().len();
        let n_pose = cfg.motion_dim - n_mouth;
        let mouth_taps = cfg.mouth_past_frames + 1 + cfg.coart_lag_q;
        let ms = 1.0 / ((mouth_taps * d) as f64).sqrt();
        let mouth = (0..mouth_taps)
            .map(|_| (0..n_mouth * d).map(|_| rng.normal() * ms).collect())
            .collect();
        let ps = 1.0 / ((cfg.listener_taps * d) as f64).sqrt();
        let pose = (0..cfg.listener_taps)
            .map(|_| (0..n_pose * d).map(|_| rng.normal() * ps).collect())
            .collect();
        Self { mouth, pose }
    }
}

fn to_f32_grid(x: f64) -> f64 {
    f64::from(x as f32)
}

fn smooth_noise(frames: usize, dim: usize, alpha: f64, rng: &mut RngState) -> Tensor {
    let innov = (1.0 - alpha * alpha).sqrt();
    let mut state: Vec<f64> = rng.normals(dim);
    let mut data = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        for s in state.iter_mut() {
            *s = alpha * *s + innov * rng.normal();
            data.push(to_f32_grid(s.clamp(-3.0, 3.0)));
        }
    }
    Tensor::matrix(frames, dim, data).expect("audio shape")
}

/// Noise-free mouth signal of every motion frame.
pub fn mouth_signal(cfg: &WorldConfig, maps: &OracleMaps, speaker: &Tensor, frames: usize) -> Tensor {
    let d = cfg.audio_feature_dim;
    let n_mouth = cfg.mouth_channels().len();
    let t_audio = speaker.rows() as isize;
    let mut out = Vec::with_capacity(frames * n_mouth);
    for i in 0..frames {
        let center = cfg.aligned_audio_index(i) as isize;
        let mut acc = vec![0.0; n_mouth];
        for (tap, w) in maps.mouth.iter().enumerate() {
            let pos = center - cfg.mouth_past_frames as isize + tap as isize;
            if pos < 0 || pos >= t_audio {
                continue;
            }
            let a = speaker.row(pos as usize);
            for (c, o) in acc.iter_mut().enumerate() {
                *o += a.iter().zip(&w[c * d..(c + 1) * d]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        out.extend(acc.into_iter().map(to_f32_grid));
    }
    Tensor::matrix(frames, n_mouth, out).expect("mouth shape")
}

/// Generates one episode of `frames` motion frames.
pub fn generate_episode(cfg: &WorldConfig, frames: usize, rng: &mut RngState) -> Result<OracleEpisode> {
    cfg.validate()?;
    if frames < 2 {
        return Err(Error::Input(format!("episode needs at least 2 frames, got {frames}")));
    }
    let r = cfg.audio_frames_per_video_frame;
    let d = cfg.audio_feature_dim;
    let audio_frames = frames * r;
    let speaker = smooth_noise(audio_frames, d, cfg.audio_smoothing, rng);
    let listener = smooth_noise(audio_frames, d, cfg.audio_smoothing, rng);
    let audio = DyadicAudioFeatures::new(speaker, listener)?;
    generate_from_audio(cfg, audio, frames, rng)
}

/// Oracle motion for given audio; `rng` drives only the stochastic pose terms.
pub fn generate_from_audio(
    cfg: &WorldConfig,
    audio: DyadicAudioFeatures,
    frames: usize,
    rng: &mut RngState,
) -> Result<OracleEpisode> {
    cfg.validate()?;
    if audio.frames() != frames * cfg.audio_frames_per_video_frame || audio.feature_dim() != cfg.audio_feature_dim {
        return Err(Error::Shape(format!(
            "{} audio frames of dim {} for {frames} motion frames",
            audio.frames(),
            audio.feature_dim()
        )));
    }
    let maps = OracleMaps::new(cfg);
    let d = cfg.audio_feature_dim;
    let mouth_channels = cfg.mouth_channels();
    let n_mouth = mouth_channels.len();
    let n_pose = cfg.motion_dim - n_mouth;
    let mouth = mouth_signal(cfg, &maps, &audio.speaker, frames);

    let offset: Vec<f64> = rng.normals(n_pose).iter().map(|x| x * cfg.pose_offset_scale).collect();
    let rho = cfg.drift_coeff;
    let drift_innov = cfg.noise_scale * (1.0 - rho * rho).sqrt();
    let mut drift: Vec<f64> = rng.normals(n_pose).iter().map(|x| x * cfg.noise_scale).collect();

    let mut motion = Vec::with_capacity(frames * cfg.motion_dim);
    for i in 0..frames {
        motion.extend_from_slice(mouth.row(i));
        let center = cfg.aligned_audio_index(i) as isize;
        let mut pose = offset.clone();
        for (tap, w) in maps.pose.iter().enumerate() {
            let pos = center - (cfg.listener_delay_p + tap) as isize;
            if pos < 0 {
                continue;
            }
            let a = audio.listener.row(pos as usize);
            for (c, o) in pose.iter_mut().enumerate() {
                *o += a.iter().zip(&w[c * d..(c + 1) * d]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        if i > 0 {
            for dr in drift.iter_mut() {
                *dr = rho * *dr + drift_innov * rng.normal();
            }
        }
        for (c, o) in pose.iter().enumerate() {
            let v = o + drift[c] + cfg.noise_scale * rng.normal();
            motion.push(to_f32_grid(v));
        }
    }
    Ok(OracleEpisode {
        audio,
        motion: Tensor::matrix(frames, cfg.motion_dim, motion)?,
        mouth_channels,
        deterministic_mouth_signal: mouth,
    })
}

/// Splits both audio tracks into packets of `packet_ms`, stamped with their
/// nominal arrival time `k * packet_ms`. The last packet may be short.
pub fn audio_to_wire(cfg: &WorldConfig, audio: &DyadicAudioFeatures, packet_ms: f64) -> Result<Vec<StreamPacket>> {
    let frame_ms = cfg.audio_frame_seconds() * 1000.0;
    let ratio = packet_ms / frame_ms;
    let per_packet = ratio.round() as usize;
    if !(packet_ms > 0.0) || per_packet == 0 || (ratio - per_packet as f64).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "packet size {packet_ms} ms is not a positive multiple of the {frame_ms} ms audio frame"
        )));
    }
    let d = audio.feature_dim();
    let total = audio.frames();
    let mut packets = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + per_packet).min(total);
        let k = packets.len();
        packets.push(StreamPacket {
            arrival_s: k as f64 * packet_ms / 1000.0,
            speaker: audio.speaker.data()[start * d..end * d].to_vec(),
            listener: audio.listener.data()[start * d..end * d].to_vec(),
            duration_ms: (end - start) as f64 * frame_ms,
        });
        start = end;
    }
    Ok(packets)
}
