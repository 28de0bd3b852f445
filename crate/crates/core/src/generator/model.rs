use std::ops::Range;
use std::sync::Arc;

use super::config::{AnchorMode, GeneratorConfig, MIN_WINDOW};
use crate::encoder::{embed_encoder, encoder_forward, AudioEncoder, EncoderConfig, EncoderLayout};
use crate::error::{Error, Result};
use crate::kernel::nn::{Linear, Norm, TransformerBlock, LN_EPS};
use crate::kernel::{AttentionMask, Bound, Graph, ParamId, ParamSet, RngState, Tensor, Var};

pub(crate) const SPEAKER_PREFIX: &str = "speaker_encoder.";
pub(crate) const LISTENER_PREFIX: &str = "listener_encoder.";

/// Audio position (in audio frames) that motion frame `frame` aligns to:
/// the last audio frame inside the video frame.
pub fn aligned_position(frame: usize, ratio: usize) -> usize {
    (frame + 1) * ratio - 1
}

/// Linearly interpolates `encoded` (`audio_frames x d`) onto `motion_frames`
/// rows. Motion frame `i` sits at audio position `(i + 1) * r - 1` with
/// `r = audio_frames / motion_frames`.
pub fn align_audio(encoded: &Tensor, motion_frames: usize) -> Result<Tensor> {
    let n = encoded.rows();
    if n == 0 || encoded.numel() == 0 || motion_frames == 0 {
        return Err(Error::Input("cannot align an empty sequence".into()));
    }
    let r = n as f64 / motion_frames as f64;
    let mut data = Vec::with_capacity(motion_frames * encoded.cols());
    for i in 0..motion_frames {
        let pos = ((i + 1) as f64 * r - 1.0).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let w = pos - lo as f64;
        if w == 0.0 || lo + 1 >= n {
            data.extend_from_slice(encoded.row(lo));
        } else {
            let (a, b) = (encoded.row(lo), encoded.row(lo + 1));
            data.extend(a.iter().zip(b).map(|(&a, &b)| (1.0 - w) * a + w * b));
        }
    }
    Tensor::matrix(motion_frames, encoded.cols(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorPhase {
    Train,
    Infer,
}

/// Anchor index within a window of `n` frames.
pub fn sample_anchor(n: usize, phase: AnchorPhase, rng: &mut RngState) -> Result<usize> {
    match phase {
        AnchorPhase::Infer => Ok(0),
        AnchorPhase::Train if n < MIN_WINDOW => Err(Error::Input(format!(
            "training windows need at least {MIN_WINDOW} frames, got {n}"
        ))),
        AnchorPhase::Train => Ok(rng.range_inclusive(n - 10, n - 1)),
    }
}

/// One point on the noise-to-data path: `m_t = (1 - t) m_0 + t eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub m0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub sigma: f64,
    pub m_t: Vec<f64>,
}

impl FlowSample {
    pub fn new(m0: Vec<f64>, eps: Vec<f64>, t: f64) -> Result<Self> {
        if m0.len() != eps.len() {
            return Err(Error::Shape(format!("m0 {} vs noise {}", m0.len(), eps.len())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Input(format!("t = {t} outside [0, 1]")));
        }
        let sigma = t;
        let m_t = m0
            .iter()
            .zip(&eps)
            .map(|(&m, &e)| (1.0 - sigma) * m + sigma * e)
            .collect();
        Ok(Self { m0, eps, t, sigma, m_t })
    }

    pub fn draw(m0: Vec<f64>, rng: &mut RngState) -> Self {
        let t = rng.uniform();
        let eps = rng.normals(m0.len());
        Self::new(m0, eps, t).expect("valid draw")
    }
}

/// Mean squared error between predicted clean frames and the samples' `m0`.
pub fn flow_loss(predicted: &Tensor, samples: &[FlowSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("empty flow batch".into()));
    }
    let d = samples[0].m0.len();
    if predicted.shape() != [samples.len(), d] {
        return Err(Error::Shape(format!(
            "prediction {:?} for {} samples of dim {d}",
            predicted.shape(),
            samples.len()
        )));
    }
    let mut s = 0.0;
    for (row, sample) in samples.iter().enumerate() {
        s += predicted
            .row(row)
            .iter()
            .zip(&sample.m0)
            .map(|(p, m)| (p - m) * (p - m))
            .sum::<f64>();
    }
    Ok(s / (samples.len() * d) as f64)
}

/// Which conditions a forward pass sees; absent ones use null embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Branch {
    pub speaker: bool,
    pub listener: bool,
    pub anchor: bool,
}

impl Branch {
    pub const ALL: Self = Self::new(true, true, true);
    pub const SPEAKER: Self = Self::new(true, false, false);
    pub const LISTENER: Self = Self::new(false, true, false);
    pub const ANCHOR: Self = Self::new(false, false, true);
    pub const NONE: Self = Self::new(false, false, false);

    pub const fn new(speaker: bool, listener: bool, anchor: bool) -> Self {
        Self {
            speaker,
            listener,
            anchor,
        }
    }
}

/// Audio for each frame token. `rows[j]` picks the feature row for token
/// `j`; `None` marks frames before the stream start.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioCondition {
    Dropped,
    /// Raw features, encoded inside the graph; `start` is the absolute
    /// frame of the first audio row.
    Raw {
        audio: Tensor,
        start: usize,
        rows: Vec<Option<usize>>,
    },
    /// Rows already produced by the matching encoder.
    Encoded {
        features: Tensor,
        rows: Vec<Option<usize>>,
    },
}

impl AudioCondition {
    fn rows(&self) -> Option<&[Option<usize>]> {
        match self {
            Self::Dropped => None,
            Self::Raw { rows, .. } | Self::Encoded { rows, .. } => Some(rows),
        }
    }
}

/// Inputs for one autoregressive pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInput {
    /// `None` uses the anchor null embedding.
    pub anchor: Option<Vec<f64>>,
    /// Row `j` is the motion frame preceding token `j`'s frame.
    pub history: Tensor,
    pub speaker: AudioCondition,
    pub listener: AudioCondition,
}

impl WindowInput {
    pub fn tokens(&self) -> usize {
        self.history.rows()
    }

    /// Applies a guidance branch by nulling the conditions it excludes.
    pub fn with_branch(&self, branch: Branch) -> Self {
        Self {
            anchor: if branch.anchor { self.anchor.clone() } else { None },
            history: self.history.clone(),
            speaker: if branch.speaker {
                self.speaker.clone()
            } else {
                AudioCondition::Dropped
            },
            listener: if branch.listener {
                self.listener.clone()
            } else {
                AudioCondition::Dropped
            },
        }
    }
}

#[derive(Clone, Debug)]
struct HeadBlock {
    modulation: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct FlowHead {
    input: Linear,
    t1: Linear,
    t2: Linear,
    c_proj: Linear,
    blocks: Vec<HeadBlock>,
    out: Linear,
}

#[derive(Clone, Debug)]
enum Head {
    Flow(FlowHead),
    Deterministic(Linear),
}

#[derive(Clone, Debug)]
struct Layout {
    speaker: EncoderLayout,
    speaker_ids: Range<usize>,
    listener: EncoderLayout,
    listener_ids: Range<usize>,
    proj_s: Linear,
    proj_l: Linear,
    motion_embed: Linear,
    anchor_embed: Linear,
    null_s: ParamId,
    null_l: ParamId,
    null_r: ParamId,
    blocks: Vec<TransformerBlock>,
    ar_norm: Norm,
    ar_ids: Range<usize>,
    head: Head,
    head_ids: Range<usize>,
}

/// Generator weights (including both fine-tuned audio encoders).
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub speaker_cfg: EncoderConfig,
    pub listener_cfg: EncoderConfig,
    pub anchor_mode: AnchorMode,
    pub params: ParamSet,
    layout: Layout,
}

/// Sinusoidal features of `1000 t`, `dim` columns per row.
fn timestep_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &t in t {
        let x = 1000.0 * t;
        let freqs = (0..half).map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((x * f).sin(), (x * f).cos())).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::matrix(t.len(), dim, data).expect("timestep features")
}

impl Generator {
    pub fn new(
        cfg: GeneratorConfig,
        speaker_cfg: EncoderConfig,
        listener_cfg: EncoderConfig,
        anchor_mode: AnchorMode,
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate_shapes()?;
        speaker_cfg.validate()?;
        listener_cfg.validate()?;
        if speaker_cfg.input_dim != listener_cfg.input_dim {
            return Err(Error::Config(
                "speaker and listener encoders need equal input dims".into(),
            ));
        }
        let mut ps = ParamSet::new();
        let mut enc_rng = rng.fork("encoders");
        let speaker = embed_encoder(&speaker_cfg, &mut ps, SPEAKER_PREFIX, &mut enc_rng)?;
        let speaker_ids = 0..ps.len();
        let listener = embed_encoder(&listener_cfg, &mut ps, LISTENER_PREFIX, &mut enc_rng)?;
        let listener_ids = speaker_ids.end..ps.len();

        let mut r = rng.fork("ar");
        let d = cfg.ar_dim;
        let md = cfg.motion_dim;
        let proj_s = Linear::new(&mut ps, "ar.proj_speaker", speaker_cfg.model_dim, d, &mut r);
        let proj_l = Linear::new(&mut ps, "ar.proj_listener", listener_cfg.model_dim, d, &mut r);
        let motion_embed = Linear::new(&mut ps, "ar.motion_embed", md, d, &mut r);
        let anchor_embed = Linear::new(&mut ps, "ar.anchor_embed", md, d, &mut r);
        let mut null = |name: &str, r: &mut RngState| {
            let v = r.normals(d).into_iter().map(|x| 0.02 * x).collect();
            ps.add(format!("ar.{name}"), Tensor::vector(v))
        };
        let null_s = null("null_speaker", &mut r);
        let null_l = null("null_listener", &mut r);
        let null_r = null("null_anchor", &mut r);
        let blocks = (0..cfg.ar_blocks)
            .map(|k| TransformerBlock::new(&mut ps, &format!("ar.block{k}"), d, cfg.ar_heads, &mut r))
            .collect();
        let ar_norm = Norm::new(&mut ps, "ar.norm", d);
        let ar_ids = listener_ids.end..ps.len();

        let mut r = rng.fork("head");
        let head = if cfg.deterministic_mode {
            Head::Deterministic(Linear::new(&mut ps, "head.project", d, md, &mut r))
        } else {
            let h = cfg.head_dim;
            FlowHead {
                input: Linear::new(&mut ps, "head.input", md, h, &mut r),
                t1: Linear::new(&mut ps, "head.time1", h, h, &mut r),
                t2: Linear::new(&mut ps, "head.time2", h, h, &mut r),
                c_proj: Linear::new(&mut ps, "head.cond", d, h, &mut r),
                blocks: (0..cfg.head_blocks)
                    .map(|k| HeadBlock {
                        modulation: Linear::new(&mut ps, &format!("head.block{k}.modulation"), h, 3 * h, &mut r),
                        fc1: Linear::new(&mut ps, &format!("head.block{k}.fc1"), h, 2 * h, &mut r),
                        fc2: Linear::new(&mut ps, &format!("head.block{k}.fc2"), 2 * h, h, &mut r),
                    })
                    .collect(),
                out: Linear::zeros(&mut ps, "head.out", h, md),
            }
            .into()
        };
        let head_ids = ar_ids.end..ps.len();
        Ok(Self {
            cfg,
            speaker_cfg,
            listener_cfg,
            anchor_mode,
            params: ps,
            layout: Layout {
                speaker,
                speaker_ids,
                listener,
                listener_ids,
                proj_s,
                proj_l,
                motion_embed,
                anchor_embed,
                null_s,
                null_l,
                null_r,
                blocks,
                ar_norm,
                ar_ids,
                head,
                head_ids,
            },
        })
    }

    /// Rebuilds a generator around stored weights.
    pub fn from_params(
        cfg: GeneratorConfig,
        speaker_cfg: EncoderConfig,
        listener_cfg: EncoderConfig,
        anchor_mode: AnchorMode,
        params: ParamSet,
    ) -> Result<Self> {
        let mut g = Self::new(cfg, speaker_cfg, listener_cfg, anchor_mode, &mut RngState::new(0))?;
        if g.params.len() != params.len() || g.params.copy_matching(&params, "", "")? != params.len() {
            return Err(Error::Incompatible(
                "stored tensors do not match the generator configuration".into(),
            ));
        }
        Ok(g)
    }

    /// Audio frames before a position that can still influence its encoded
    /// features, over both encoders; `None` if unbounded.
    pub fn past_reach(&self) -> Option<usize> {
        Some(self.speaker_cfg.past_reach()?.max(self.listener_cfg.past_reach()?))
    }

    /// Copies trained encoder weights into the embedded encoders.
    pub fn load_encoders(&mut self, speaker: &AudioEncoder, listener: &AudioEncoder) -> Result<()> {
        for (enc, cfg, prefix) in [
            (speaker, &self.speaker_cfg, SPEAKER_PREFIX),
            (listener, &self.listener_cfg, LISTENER_PREFIX),
        ] {
            let same = enc.cfg.model_dim == cfg.model_dim
                && enc.cfg.layers == cfg.layers
                && enc.cfg.heads == cfg.heads
                && enc.cfg.input_dim == cfg.input_dim;
            if !same {
                return Err(Error::Incompatible(format!(
                    "encoder {:?} does not fit generator slot {prefix} {:?}",
                    enc.cfg, cfg
                )));
            }
        }
        let ns = self.params.copy_matching(&speaker.params, "", SPEAKER_PREFIX)?;
        let nl = self.params.copy_matching(&listener.params, "", LISTENER_PREFIX)?;
        if ns != speaker.params.len() || nl != listener.params.len() {
            return Err(Error::Incompatible("encoder tensor names do not match".into()));
        }
        Ok(())
    }

    /// Future audio frames the speaker encoder may see; `None` if unbounded.
    pub fn speaker_lookahead(&self) -> Option<usize> {
        self.speaker_cfg.lookahead
    }

    /// Largest lookahead over both encoders; `None` if either is unbounded.
    pub fn max_lookahead(&self) -> Option<usize> {
        Some(self.speaker_cfg.lookahead?.max(self.listener_cfg.lookahead?))
    }

    pub fn ratio(&self) -> usize {
        self.cfg.audio_frames_per_video_frame
    }

    fn encode_with(&self, audio: &Tensor, start: usize, speaker: bool) -> Result<Tensor> {
        let (cfg, layout, ids) = if speaker {
            (&self.speaker_cfg, &self.layout.speaker, self.layout.speaker_ids.clone())
        } else {
            (
                &self.listener_cfg,
                &self.layout.listener,
                self.layout.listener_ids.clone(),
            )
        };
        if audio.shape().len() != 2 || audio.rows() == 0 {
            return Err(Error::Input("cannot encode an empty audio track".into()));
        }
        if audio.cols() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "audio dim {} for input dim {}",
                audio.cols(),
                cfg.input_dim
            )));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen_range(&mut g, ids);
        let a = g.constant(audio.clone());
        let out = encoder_forward(cfg, &mut g, &layout.handles(&b), a, &[], start)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_speaker(&self, audio: &Tensor) -> Result<Tensor> {
        self.encode_with(audio, 0, true)
    }

    pub fn encode_listener(&self, audio: &Tensor) -> Result<Tensor> {
        self.encode_with(audio, 0, false)
    }

    /// Speaker features of an audio crop starting at absolute frame `start`;
    /// see [`AudioEncoder::encode_at`].
    pub fn encode_speaker_at(&self, audio: &Tensor, start: usize) -> Result<Tensor> {
        self.encode_with(audio, start, true)
    }

    pub fn encode_listener_at(&self, audio: &Tensor, start: usize) -> Result<Tensor> {
        self.encode_with(audio, start, false)
    }

    fn audio_tokens(
        &self,
        g: &mut Graph,
        b: &Bound,
        cond: &AudioCondition,
        speaker: bool,
        tokens: usize,
    ) -> Result<Var> {
        let l = &self.layout;
        let (null, proj) = if speaker {
            (l.null_s, l.proj_s)
        } else {
            (l.null_l, l.proj_l)
        };
        let rows = match cond.rows() {
            None => return g.repeat_row(b[null], tokens),
            Some(rows) => rows,
        };
        if rows.len() != tokens {
            return Err(Error::Shape(format!("{} audio rows for {tokens} tokens", rows.len())));
        }
        let present: Vec<usize> = rows.iter().flatten().copied().collect();
        if present.is_empty() {
            return g.repeat_row(b[null], tokens);
        }
        let feats = match cond {
            AudioCondition::Raw { audio, start, .. } => {
                let (cfg, layout) = if speaker {
                    (&self.speaker_cfg, &l.speaker)
                } else {
                    (&self.listener_cfg, &l.listener)
                };
                let a = g.constant(audio.clone());
                encoder_forward(cfg, g, &layout.handles(b), a, &[], *start)?
            }
            AudioCondition::Encoded { features, .. } => g.constant(features.clone()),
            AudioCondition::Dropped => unreachable!(),
        };
        let picked = g.gather_rows(feats, &present)?;
        let projected = proj.forward(g, b, picked)?;
        let both = g.concat_rows(&[projected, b[null]])?;
        let mut next = 0;
        let idx: Vec<usize> = rows
            .iter()
            .map(|r| match r {
                Some(_) => {
                    next += 1;
                    next - 1
                }
                None => present.len(),
            })
            .collect();
        g.gather_rows(both, &idx)
    }

    /// Condition vectors for every frame token, `[tokens, ar_dim]`.
    pub(crate) fn conditions_graph(&self, g: &mut Graph, b: &Bound, input: &WindowInput) -> Result<Var> {
        let tokens = input.tokens();
        if tokens == 0 {
            return Err(Error::Input("empty motion history".into()));
        }
        if tokens > self.cfg.window_n - 1 {
            return Err(Error::Input(format!(
                "history of {tokens} frames exceeds the window of {}",
                self.cfg.window_n
            )));
        }
        if input.history.cols() != self.cfg.motion_dim {
            return Err(Error::Shape(format!(
                "history dim {} for motion dim {}",
                input.history.cols(),
                self.cfg.motion_dim
            )));
        }
        let l = &self.layout;
        let hist = g.constant(input.history.clone());
        let x = l.motion_embed.forward(g, b, hist)?;
        let s = self.audio_tokens(g, b, &input.speaker, true, tokens)?;
        let x = g.add(x, s)?;
        let a = self.audio_tokens(g, b, &input.listener, false, tokens)?;
        let x = g.add(x, a)?;
        let anchor = match &input.anchor {
            Some(m) if self.anchor_mode != AnchorMode::None => {
                if m.len() != self.cfg.motion_dim {
                    return Err(Error::Shape(format!("anchor of dim {}", m.len())));
                }
                let m = g.constant(Tensor::matrix(1, m.len(), m.clone())?);
                l.anchor_embed.forward(g, b, m)?
            }
            _ => b[l.null_r],
        };
        let anchor = g.repeat_row(anchor, tokens)?;
        let mut x = g.add(x, anchor)?;
        let mask = Arc::new(AttentionMask::causal(tokens));
        let positions: Vec<usize> = (0..tokens).collect();
        for block in &l.blocks {
            x = block.forward(g, b, x, mask.clone(), &positions, self.cfg.rope_base)?;
        }
        l.ar_norm.forward(g, b, x)
    }

    /// Clean-frame prediction for rows of `m_t` at times `t` under conditions `c`.
    pub(crate) fn head_graph(&self, g: &mut Graph, b: &Bound, m_t: Var, t: &[f64], c: Var) -> Result<Var> {
        match &self.layout.head {
            Head::Deterministic(p) => p.forward(g, b, c),
            Head::Flow(h) => {
                let dim = self.cfg.head_dim;
                let x = h.input.forward(g, b, m_t)?;
                let emb = g.constant(timestep_features(t, dim));
                let e = h.t1.forward(g, b, emb)?;
                let e = g.silu(e);
                let e = h.t2.forward(g, b, e)?;
                let cc = h.c_proj.forward(g, b, c)?;
                let cond = g.add(e, cc)?;
                let cond = g.silu(cond);
                let mut x = x;
                for blk in &h.blocks {
                    let m = blk.modulation.forward(g, b, cond)?;
                    let shift = g.slice_cols(m, 0, dim)?;
                    let scale = g.slice_cols(m, dim, 2 * dim)?;
                    let gate = g.slice_cols(m, 2 * dim, 3 * dim)?;
                    let y = g.normalize(x, LN_EPS);
                    let scale = g.add_const(scale, 1.0);
                    let y = g.mul(y, scale)?;
                    let y = g.add(y, shift)?;
                    let y = blk.fc1.forward(g, b, y)?;
                    let y = g.silu(y);
                    let y = blk.fc2.forward(g, b, y)?;
                    let y = g.mul(gate, y)?;
                    x = g.add(x, y)?;
                }
                let y = g.normalize(x, LN_EPS);
                h.out.forward(g, b, y)
            }
        }
    }

    /// Per-block modulation outputs `[rows, 3 * head_dim]` (flow head only).
    #[cfg(test)]
    pub(crate) fn head_modulations(&self, t: &[f64], c: &Tensor) -> Result<Vec<Tensor>> {
        let Head::Flow(h) = &self.layout.head else {
            return Ok(Vec::new());
        };
        let mut g = Graph::new();
        let b = self.params.bind_frozen_range(&mut g, self.layout.head_ids.clone());
        let emb = g.constant(timestep_features(t, self.cfg.head_dim));
        let e = h.t1.forward(&mut g, &b, emb)?;
        let e = g.silu(e);
        let e = h.t2.forward(&mut g, &b, e)?;
        let c = g.constant(c.clone());
        let cc = h.c_proj.forward(&mut g, &b, c)?;
        let cond = g.add(e, cc)?;
        let cond = g.silu(cond);
        h.blocks
            .iter()
            .map(|blk| {
                let m = blk.modulation.forward(&mut g, &b, cond)?;
                Ok(g.value(m).clone())
            })
            .collect()
    }

    /// Block `k`'s modulation weight.
    #[cfg(test)]
    pub(crate) fn modulation_param(&self, k: usize) -> Option<ParamId> {
        match &self.layout.head {
            Head::Flow(h) => h.blocks.get(k).map(|b| b.modulation.w),
            Head::Deterministic(_) => None,
        }
    }

    fn ar_range(&self, input: &WindowInput) -> Range<usize> {
        let raw = |c: &AudioCondition| matches!(c, AudioCondition::Raw { .. });
        if raw(&input.speaker) || raw(&input.listener) {
            0..self.params.len()
        } else {
            self.layout.ar_ids.clone()
        }
    }

    /// Condition vectors for every frame token with frozen weights.
    pub fn ar_forward(&self, input: &WindowInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen_range(&mut g, self.ar_range(input));
        let c = self.conditions_graph(&mut g, &b, input)?;
        Ok(g.value(c).clone())
    }

    /// Condition vector of the newest token.
    pub fn condition(&self, input: &WindowInput) -> Result<Vec<f64>> {
        let c = self.ar_forward(input)?;
        Ok(c.row(c.rows() - 1).to_vec())
    }

    /// Predicted clean frames for each row of `m_t`. In deterministic mode
    /// the condition is projected directly and `m_t`, `t` are ignored.
    pub fn head_denoise(&self, m_t: &Tensor, t: &[f64], c: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Input(format!("t = {bad} outside [0, 1]")));
        }
        if m_t.rows() != t.len() || c.rows() != t.len() {
            return Err(Error::Shape(format!(
                "{} noisy rows, {} times, {} conditions",
                m_t.rows(),
                t.len(),
                c.rows()
            )));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen_range(&mut g, self.layout.head_ids.clone());
        let m = g.constant(m_t.clone());
        let cv = g.constant(c.clone());
        let out = self.head_graph(&mut g, &b, m, t, cv)?;
        Ok(g.value(out).clone())
    }

    /// `flow_loss` of the head's predictions for `samples` under `c`.
    pub fn sample_loss(&self, samples: &[FlowSample], c: &Tensor) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Input("empty flow batch".into()));
        }
        let d = self.cfg.motion_dim;
        let m_t = Tensor::matrix(samples.len(), d, samples.iter().flat_map(|s| s.m_t.clone()).collect())?;
        let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
        flow_loss(&self.head_denoise(&m_t, &t, c)?, samples)
    }
}

impl From<FlowHead> for Head {
    fn from(h: FlowHead) -> Self {
        Head::Flow(h)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_encoder(lookahead: Option<usize>) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            layers: 1,
            model_dim: 4,
            heads: 1,
            lookahead,
            context: None,
            rope_base: 10_000.0,
        }
    }

    pub(crate) fn tiny_config(deterministic: bool) -> GeneratorConfig {
        GeneratorConfig {
            ar_blocks: 1,
            ar_dim: 4,
            ar_heads: 1,
            head_blocks: 2,
            head_dim: 4,
            motion_dim: 2,
            window_n: 12,
            deterministic_mode: deterministic,
            audio_frames_per_video_frame: 2,
            rope_base: 10_000.0,
        }
    }

    pub(crate) fn tiny(deterministic: bool) -> Generator {
        Generator::new(
            tiny_config(deterministic),
            tiny_encoder(Some(1)),
            tiny_encoder(Some(0)),
            AnchorMode::Last10,
            &mut RngState::new(3),
        )
        .unwrap()
    }

    fn input(tokens: usize, seed: u64) -> WindowInput {
        let mut r = RngState::new(seed);
        let audio = |r: &mut RngState| Tensor::matrix(2 * tokens + 1, 3, r.normals((2 * tokens + 1) * 3)).unwrap();
        let rows: Vec<Option<usize>> = (0..tokens).map(|k| Some(aligned_position(k, 2))).collect();
        WindowInput {
            anchor: Some(r.normals(2)),
            history: Tensor::matrix(tokens, 2, r.normals(tokens * 2)).unwrap(),
            speaker: AudioCondition::Raw {
                audio: audio(&mut r),
                start: 0,
                rows: rows.clone(),
            },
            listener: AudioCondition::Raw {
                audio: audio(&mut r),
                start: 0,
                rows,
            },
        }
    }

    #[test]
    fn align_examples() {
        let c = Tensor::matrix(6, 2, vec![0.5; 12]).unwrap();
        assert_eq!(align_audio(&c, 3).unwrap().data(), &[0.5; 6]);
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(align_audio(&x, 3).unwrap(), x);
        let ab = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(align_audio(&ab, 2).unwrap(), ab);
        let y = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(align_audio(&y, 2).unwrap().data(), &[1.0, 3.0]);
        assert!(align_audio(&Tensor::zeros(&[0, 2]), 2).is_err());
    }

    #[test]
    fn anchor_phases() {
        let mut rng = RngState::new(1);
        assert_eq!(sample_anchor(40, AnchorPhase::Infer, &mut rng).unwrap(), 0);
        assert_eq!(sample_anchor(5, AnchorPhase::Infer, &mut rng).unwrap(), 0);
        for _ in 0..200 {
            let i = sample_anchor(11, AnchorPhase::Train, &mut rng).unwrap();
            assert!((1..=10).contains(&i));
        }
        assert!(sample_anchor(10, AnchorPhase::Train, &mut rng).is_err());
    }

    #[test]
    fn anchor_draws_pass_chi_square() {
        let mut rng = RngState::new(2024);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let i = sample_anchor(40, AnchorPhase::Train, &mut rng).unwrap();
            assert!((30..=39).contains(&i));
            counts[i - 30] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Upper 1% point of chi-square with 9 degrees of freedom.
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn flow_sample_interpolant() {
        let s = FlowSample::new(vec![1.0, -2.0], vec![0.5, 0.5], 0.25).unwrap();
        assert_eq!(s.sigma, 0.25);
        assert_eq!(s.m_t, vec![0.75 * 1.0 + 0.25 * 0.5, 0.75 * -2.0 + 0.25 * 0.5]);
        assert_eq!(FlowSample::new(vec![3.0], vec![9.0], 0.0).unwrap().m_t, vec![3.0]);
        assert_eq!(FlowSample::new(vec![3.0], vec![9.0], 1.0).unwrap().m_t, vec![9.0]);
        assert!(FlowSample::new(vec![3.0], vec![9.0], 1.5).is_err());
    }

    #[test]
    fn flow_loss_examples() {
        let mut rng = RngState::new(4);
        let samples: Vec<FlowSample> = (0..5).map(|_| FlowSample::draw(rng.normals(3), &mut rng)).collect();
        let exact = Tensor::from_rows(&samples.iter().map(|s| s.m0.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(flow_loss(&exact, &samples).unwrap(), 0.0);
        let shifted = exact.map(|v| v + 1.0);
        assert!((flow_loss(&shifted, &samples).unwrap() - 1.0).abs() < 1e-12);
        assert!(flow_loss(&exact, &[]).is_err());
    }

    #[test]
    fn zero_init_head_predicts_zero() {
        let g = tiny(false);
        let c = Tensor::matrix(3, 4, RngState::new(1).normals(12)).unwrap();
        let m = Tensor::matrix(3, 2, RngState::new(2).normals(6)).unwrap();
        let out = g.head_denoise(&m, &[0.1, 0.5, 1.0], &c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out, g.head_denoise(&m, &[0.1, 0.5, 1.0], &c).unwrap());
        assert!(g.head_denoise(&m, &[0.1, 0.5, 1.5], &c).is_err());
    }

    #[test]
    fn deterministic_mode_projects_condition() {
        let g = tiny(true);
        let c = Tensor::matrix(1, 4, vec![1.0, 0.0, -1.0, 2.0]).unwrap();
        let a = g.head_denoise(&Tensor::zeros(&[1, 2]), &[0.3], &c).unwrap();
        let b = g.head_denoise(&Tensor::full(&[1, 2], 5.0), &[0.9], &c).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropped_conditions_ignore_audio() {
        let g = tiny(false);
        let base = input(5, 1).with_branch(Branch::NONE);
        let mut other = input(5, 2);
        other.history = base.history.clone();
        other.anchor = Some(vec![9.0, 9.0]);
        let other = other.with_branch(Branch::NONE);
        assert_eq!(g.ar_forward(&base).unwrap(), g.ar_forward(&other).unwrap());
    }

    #[test]
    fn conditions_are_causal_in_motion() {
        let g = tiny(false);
        let x = input(6, 3);
        let base = g.ar_forward(&x).unwrap();
        for j in 1..6 {
            let mut y = x.clone();
            for v in &mut y.history.data_mut()[j * 2..] {
                *v += 1.5;
            }
            let out = g.ar_forward(&y).unwrap();
            for i in 0..j {
                assert_eq!(base.row(i), out.row(i), "token {i} saw history row {j}");
            }
            assert_ne!(base.row(j), out.row(j));
        }
    }

    #[test]
    fn conditions_respect_audio_alignment() {
        let g = tiny(false);
        let x = input(5, 4);
        let base = g.ar_forward(&x).unwrap();
        // Token 2 aligns to audio 5; speaker lookahead 1 reaches audio 6.
        let mut y = x.clone();
        if let AudioCondition::Raw { audio, .. } = &mut y.speaker {
            for v in &mut audio.data_mut()[7 * 3..] {
                *v = 2.0;
            }
        }
        let out = g.ar_forward(&y).unwrap();
        for i in 0..=2 {
            assert_eq!(base.row(i), out.row(i));
        }
        assert_ne!(base.row(3), out.row(3));
    }

    #[test]
    fn single_token_and_window_limit() {
        let g = tiny(false);
        assert_eq!(g.ar_forward(&input(1, 5)).unwrap().shape(), &[1, 4]);
        assert!(matches!(g.ar_forward(&input(12, 5)), Err(Error::Input(_))));
    }

    #[test]
    fn modulation_is_block_local() {
        let mut g = tiny(false);
        // Make the head non-trivial so modulations are generic.
        let c = Tensor::matrix(2, 4, RngState::new(8).normals(8)).unwrap();
        let before = g.head_modulations(&[0.2, 0.7], &c).unwrap();
        let id = g.modulation_param(1).unwrap();
        g.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let after = g.head_modulations(&[0.2, 0.7], &c).unwrap();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn encoder_weights_load_into_slots() {
        let mut g = tiny(false);
        let spk = AudioEncoder::new(tiny_encoder(Some(1)), &mut RngState::new(11)).unwrap();
        let lst = AudioEncoder::new(tiny_encoder(Some(0)), &mut RngState::new(12)).unwrap();
        g.load_encoders(&spk, &lst).unwrap();
        let a = Tensor::matrix(7, 3, RngState::new(1).normals(21)).unwrap();
        assert_eq!(g.encode_speaker(&a).unwrap(), spk.encode(&a).unwrap());
        assert_eq!(g.encode_listener(&a).unwrap(), lst.encode(&a).unwrap());
    }

    #[test]
    fn params_round_trip_through_from_params() {
        let g = tiny(false);
        let back = Generator::from_params(
            g.cfg.clone(),
            g.speaker_cfg.clone(),
            g.listener_cfg.clone(),
            g.anchor_mode,
            g.params.clone(),
        )
        .unwrap();
        assert_eq!(back.params, g.params);
        let det = Generator::from_params(
            tiny_config(true),
            g.speaker_cfg.clone(),
            g.listener_cfg.clone(),
            g.anchor_mode,
            g.params.clone(),
        );
        assert!(matches!(det, Err(Error::Incompatible(_))));
    }
}
