//! Causal audio encoder with bounded lookahead.
//!
//! A small transformer over frame-level audio features. Only per-row
//! operations (linear maps, layer norm, MLP) and masked attention appear in
//! the stack, so the receptive field is exactly what the attention masks
//! grant. The first attention layer may look `L` frames ahead; deeper layers
//! are strictly causal, so the whole encoder sees at most `L` future frames
//! (stacking `L`-lookahead masks would compound to `layers * L`). Causal
//! encoders may also bound how far back each layer attends, which keeps the
//! features of a short training crop equal to those of a full-length pass.
//!
//! Training happens in two stages: a full-attention teacher learns masked
//! frame reconstruction, then a restricted student starting from the teacher
//! weights is distilled onto the teacher's final-layer features.

use std::sync::Arc;

use crate::config::{kv_get, parse_lookahead, KvMap};
use crate::error::{Error, Result};
use crate::kernel::nn::{Linear, Norm, TransformerBlock};
use crate::kernel::optim::mean_grads;
use crate::kernel::{AdamW, AdamWConfig, AttentionMask, Graph, ParamId, ParamSet, RngState, Tensor, Var};
use crate::world::Dataset;

/// Fraction of frames hidden in the reconstruction pretraining task.
pub const MASK_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Future frames visible to each output frame; `None` is full attention.
    pub lookahead: Option<usize>,
    /// Past frames each layer of a causal encoder may attend to; `None` is
    /// unbounded. Ignored under full attention.
    pub context: Option<usize>,
    pub rope_base: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            layers: 2,
            model_dim: 64,
            heads: 4,
            lookahead: None,
            context: Some(DEFAULT_CONTEXT),
            rope_base: 10_000.0,
        }
    }
}

/// Default per-layer past window of causal encoders, in audio frames.
pub const DEFAULT_CONTEXT: usize = 16;

impl EncoderConfig {
    pub fn teacher() -> Self {
        Self::default()
    }

    pub fn student(lookahead: usize) -> Self {
        Self {
            lookahead: Some(lookahead),
            ..Self::default()
        }
    }

    pub fn is_full(&self) -> bool {
        self.lookahead.is_none()
    }

    pub fn with_lookahead(&self, lookahead: Option<usize>) -> Self {
        Self {
            lookahead,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.input_dim == 0 {
            return Err(Error::Config("encoder needs at least one layer and input dim".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 || (self.model_dim / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "encoder model_dim {} must split into {} heads of even size",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Past frames that can influence an output frame through the whole
    /// stack; `None` if unbounded.
    pub fn past_reach(&self) -> Option<usize> {
        self.lookahead?;
        self.context.map(|c| c * self.layers)
    }

    /// Masks per layer: lookahead on the first layer, causal afterwards, all
    /// limited to the past window.
    pub fn layer_masks(&self, frames: usize) -> Vec<Arc<AttentionMask>> {
        let (first, rest) = match self.lookahead {
            None => {
                let m = Arc::new(build_lookahead_mask(frames, None));
                (m.clone(), m)
            }
            Some(l) => (
                Arc::new(build_window_mask(frames, self.context, l)),
                Arc::new(build_window_mask(frames, self.context, 0)),
            ),
        };
        (0..self.layers)
            .map(|l| if l == 0 { first.clone() } else { rest.clone() })
            .collect()
    }

    pub fn to_kv(&self, prefix: &str, kv: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            kv.insert(format!("{prefix}{k}"), v);
        };
        put("input_dim", self.input_dim.to_string());
        put("layers", self.layers.to_string());
        put("model_dim", self.model_dim.to_string());
        put("heads", self.heads.to_string());
        put(
            "lookahead",
            self.lookahead.map_or_else(|| "full".to_string(), |l| l.to_string()),
        );
        put(
            "context",
            self.context.map_or_else(|| "full".to_string(), |c| c.to_string()),
        );
        put("rope_base", format!("{:?}", self.rope_base));
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}{k}");
        kv_get(kv, &p("input_dim"), &mut self.input_dim)?;
        kv_get(kv, &p("layers"), &mut self.layers)?;
        kv_get(kv, &p("model_dim"), &mut self.model_dim)?;
        kv_get(kv, &p("heads"), &mut self.heads)?;
        if let Some(v) = kv.get(&p("lookahead")) {
            self.lookahead = parse_lookahead(v)?;
        }
        if let Some(v) = kv.get(&p("context")) {
            self.context = parse_lookahead(v)?;
        }
        kv_get(kv, &p("rope_base"), &mut self.rope_base)?;
        Ok(())
    }
}

/// `allowed(i, j) <=> j <= i + lookahead`; `None` grants every key.
pub fn build_lookahead_mask(frames: usize, lookahead: Option<usize>) -> AttentionMask {
    AttentionMask::lookahead(frames, lookahead)
}

/// `allowed(i, j) <=> i - past <= j <= i + lookahead`; `past = None` is
/// [`build_lookahead_mask`].
pub fn build_window_mask(frames: usize, past: Option<usize>, lookahead: usize) -> AttentionMask {
    match past {
        None => AttentionMask::lookahead(frames, Some(lookahead)),
        Some(p) => AttentionMask::from_fn(frames, frames, |i, j| j <= i + lookahead && j + p >= i),
    }
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    input_norm: Norm,
    blocks: Vec<TransformerBlock>,
    final_norm: Norm,
    mask_embed: ParamId,
    recon: Linear,
}

/// Encoder weights plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
    layout: Layout,
    /// Whether the weights were initialized from a teacher.
    pub from_teacher: bool,
}

impl AudioEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut RngState) -> Result<Self> {
        let mut params = ParamSet::new();
        let layout = Self::build(&cfg, &mut params, "", rng)?;
        Ok(Self {
            cfg,
            params,
            layout,
            from_teacher: false,
        })
    }

    fn build(cfg: &EncoderConfig, ps: &mut ParamSet, prefix: &str, rng: &mut RngState) -> Result<Layout> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let n = |s: &str| format!("{prefix}{s}");
        Ok(Layout {
            input: Linear::new(ps, &n("input"), cfg.input_dim, d, rng),
            input_norm: Norm::new(ps, &n("input_norm"), d),
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(ps, &n(&format!("block{l}")), d, cfg.heads, rng))
                .collect(),
            final_norm: Norm::new(ps, &n("final_norm"), d),
            mask_embed: ps.add(n("mask_embed"), Tensor::zeros(&[1, d])),
            recon: Linear::new(ps, &n("recon"), d, cfg.input_dim, rng),
        })
    }

    /// Rebuilds an encoder around existing weights (checkpoint loading).
    pub fn from_params(cfg: EncoderConfig, params: ParamSet, from_teacher: bool) -> Result<Self> {
        let mut fresh = Self::new(cfg, &mut RngState::new(0))?;
        if fresh.params.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "encoder expects {} tensors, checkpoint has {}",
                fresh.params.len(),
                params.len()
            )));
        }
        let copied = fresh.params.copy_matching(&params, "", "")?;
        if copied != params.len() {
            return Err(Error::Incompatible("encoder tensor names do not match".into()));
        }
        fresh.from_teacher = from_teacher;
        Ok(fresh)
    }

    /// A student with `cfg`'s masks starting from this encoder's weights.
    pub fn student_from(&self, cfg: EncoderConfig) -> Result<Self> {
        if cfg.model_dim != self.cfg.model_dim
            || cfg.layers != self.cfg.layers
            || cfg.heads != self.cfg.heads
            || cfg.input_dim != self.cfg.input_dim
        {
            return Err(Error::Incompatible(format!(
                "student {:?} does not match teacher {:?}",
                cfg, self.cfg
            )));
        }
        Ok(Self {
            cfg,
            params: self.params.clone(),
            layout: self.layout.clone(),
            from_teacher: true,
        })
    }

    /// Graph-level forward over one audio track `[frames, input_dim]`.
    ///
    /// `hidden` lists frames whose input is replaced by the learned mask
    /// embedding (pretraining only). Parameter handles come from `p`, which
    /// may belong to a larger parameter set (the generator embeds its own
    /// encoders under a name prefix).
    pub fn forward(&self, g: &mut Graph, p: &EncoderHandles, audio: Var, hidden: &[usize]) -> Result<Var> {
        encoder_forward(&self.cfg, g, p, audio, hidden, 0)
    }

    pub fn handles(&self, bound: crate::kernel::Bound) -> EncoderHandles {
        EncoderHandles {
            layout: self.layout.clone(),
            bound,
        }
    }

    /// Encodes one track with frozen weights.
    pub fn encode(&self, audio: &Tensor) -> Result<Tensor> {
        self.encode_at(audio, 0)
    }

    /// Encodes a crop whose first row sits at absolute frame `start`. Rows
    /// at least `past_reach()` frames into the crop equal the rows of a
    /// pass over the whole track bit for bit.
    pub fn encode_at(&self, audio: &Tensor, start: usize) -> Result<Tensor> {
        if audio.rows() == 0 || audio.shape().len() != 2 {
            return Err(Error::Input("cannot encode an empty audio track".into()));
        }
        if audio.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "audio dim {} for encoder input dim {}",
                audio.cols(),
                self.cfg.input_dim
            )));
        }
        if !audio.all_finite() {
            return Err(Error::Input("audio contains non-finite values".into()));
        }
        let mut g = Graph::new();
        let h = self.handles(self.params.bind_frozen(&mut g));
        let a = g.constant(audio.clone());
        let out = encoder_forward(&self.cfg, &mut g, &h, a, &[], start)?;
        Ok(g.value(out).clone())
    }

    fn reconstruction_loss(&self, g: &mut Graph, h: &EncoderHandles, audio: &Tensor, hidden: &[usize]) -> Result<Var> {
        let a = g.constant(audio.clone());
        let enc = self.forward(g, h, a, hidden)?;
        let pred = h.layout.recon.forward(g, &h.bound, enc)?;
        let pred = g.gather_rows(pred, hidden)?;
        let target = g.gather_rows(a, hidden)?;
        g.mse(pred, target)
    }
}

/// Encoder stack over `audio`, whose first row is absolute frame `start`;
/// see [`AudioEncoder::forward`].
pub(crate) fn encoder_forward(
    cfg: &EncoderConfig,
    g: &mut Graph,
    p: &EncoderHandles,
    audio: Var,
    hidden: &[usize],
    start: usize,
) -> Result<Var> {
    let frames = g.value(audio).rows();
    if frames == 0 {
        return Err(Error::Input("cannot encode an empty audio track".into()));
    }
    let l = &p.layout;
    let b = &p.bound;
    let x = l.input.forward(g, b, audio)?;
    let mut x = l.input_norm.forward(g, b, x)?;
    if !hidden.is_empty() {
        let d = cfg.model_dim;
        let mut keep = vec![1.0; frames * d];
        let mut col = vec![0.0; frames];
        for &h in hidden {
            keep[h * d..(h + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            col[h] = 1.0;
        }
        let keep = g.constant(Tensor::matrix(frames, d, keep)?);
        let col = g.constant(Tensor::matrix(frames, 1, col)?);
        let kept = g.mul(x, keep)?;
        let fill = g.matmul(col, b[l.mask_embed])?;
        x = g.add(kept, fill)?;
    }
    let positions: Vec<usize> = (start..start + frames).collect();
    for (block, mask) in l.blocks.iter().zip(cfg.layer_masks(frames)) {
        x = block.forward(g, b, x, mask, &positions, cfg.rope_base)?;
    }
    l.final_norm.forward(g, b, x)
}

/// Layout plus bound graph handles for an encoder inside some graph.
#[derive(Clone, Debug)]
pub struct EncoderHandles {
    layout: Layout,
    bound: crate::kernel::Bound,
}

/// Builds encoder layers under `prefix` inside a foreign parameter set.
pub(crate) fn embed_encoder(
    cfg: &EncoderConfig,
    ps: &mut ParamSet,
    prefix: &str,
    rng: &mut RngState,
) -> Result<EncoderLayout> {
    Ok(EncoderLayout(AudioEncoder::build(cfg, ps, prefix, rng)?))
}

/// Opaque encoder layout embedded in another model's parameter set.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayout(Layout);

impl EncoderLayout {
    pub(crate) fn handles(&self, bound: &crate::kernel::Bound) -> EncoderHandles {
        EncoderHandles {
            layout: self.0.clone(),
            bound: bound.clone(),
        }
    }
}

/// Step budget and optimizer for encoder training.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Audio frames per training crop.
    pub crop_frames: usize,
    pub optim: AdamWConfig,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            crop_frames: 32,
            optim: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Random crop of one audio track (speaker or listener) of some episode.
fn sample_crop(ds: &Dataset, crop: usize, rng: &mut RngState) -> Tensor {
    let ep = &ds.episodes[rng.range_inclusive(0, ds.episodes.len() - 1)];
    let track = if rng.bernoulli(0.5) {
        &ep.audio.speaker
    } else {
        &ep.audio.listener
    };
    let len = crop.min(track.rows());
    let start = rng.range_inclusive(0, track.rows() - len);
    let d = track.cols();
    Tensor::matrix(len, d, track.data()[start * d..(start + len) * d].to_vec()).expect("crop")
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    if ds.episodes.is_empty() {
        return Err(Error::Input("dataset has no episodes".into()));
    }
    Ok(())
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss became {loss} at step {step}")));
    }
    Ok(())
}

/// Trains a full-attention teacher on masked-frame reconstruction.
///
/// Returns the encoder and the per-step training loss.
pub fn pretrain_teacher(
    cfg: EncoderConfig,
    ds: &Dataset,
    train: &EncoderTrainConfig,
    rng: &mut RngState,
) -> Result<(AudioEncoder, Vec<f64>)> {
    if !cfg.is_full() {
        return Err(Error::Config("the teacher must use full attention".into()));
    }
    check_dataset(ds)?;
    let mut enc = AudioEncoder::new(cfg, &mut rng.fork("init"))?;
    let mut opt = AdamW::new(train.optim.clone(), &enc.params);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let samples: Vec<(Tensor, Vec<usize>)> = (0..train.batch)
            .map(|_| {
                let crop = sample_crop(ds, train.crop_frames, rng);
                let hidden = choose_hidden(crop.rows(), rng);
                (crop, hidden)
            })
            .collect();
        let model = &enc;
        let (loss, grads) = mean_grads(samples.len(), |i| {
            let (crop, hidden) = &samples[i];
            let mut g = Graph::new();
            let h = model.handles(model.params.bind(&mut g));
            let l = model.reconstruction_loss(&mut g, &h, crop, hidden)?;
            let grads = g.backward(l)?;
            Ok((g.value(l).item(), h.bound.grads(&grads)))
        })?;
        check_finite(step, loss)?;
        losses.push(loss);
        opt.update(&mut enc.params, &grads)?;
    }
    Ok((enc, losses))
}

/// At least one frame, otherwise `MASK_FRACTION` of the crop, drawn uniformly.
fn choose_hidden(frames: usize, rng: &mut RngState) -> Vec<usize> {
    let count = ((frames as f64 * MASK_FRACTION).round() as usize).clamp(1, frames);
    let mut idx: Vec<usize> = (0..frames).collect();
    for i in 0..count {
        let j = rng.range_inclusive(i, frames - 1);
        idx.swap(i, j);
    }
    let mut hidden = idx[..count].to_vec();
    hidden.sort_unstable();
    hidden
}

/// Mean over `crops` of the per-frame squared feature gap to the teacher.
pub fn distillation_loss(student: &AudioEncoder, teacher: &AudioEncoder, crops: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for c in crops {
        let s = student.encode(c)?;
        let t = teacher.encode(c)?;
        total += s
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / s.numel() as f64;
    }
    Ok(total / crops.len() as f64)
}

/// Fixed set of evaluation crops drawn from `ds`.
pub fn eval_crops(ds: &Dataset, count: usize, crop: usize, rng: &mut RngState) -> Vec<Tensor> {
    (0..count).map(|_| sample_crop(ds, crop, rng)).collect()
}

/// Distills `student_cfg` onto `teacher`, starting from the teacher's weights.
pub fn distill_student(
    teacher: &AudioEncoder,
    student_cfg: EncoderConfig,
    ds: &Dataset,
    train: &EncoderTrainConfig,
    rng: &mut RngState,
) -> Result<(AudioEncoder, Vec<f64>)> {
    check_dataset(ds)?;
    let mut student = teacher.student_from(student_cfg)?;
    let mut opt = AdamW::new(train.optim.clone(), &student.params);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let crops: Vec<Tensor> = (0..train.batch)
            .map(|_| sample_crop(ds, train.crop_frames, rng))
            .collect();
        let targets = crops.iter().map(|c| teacher.encode(c)).collect::<Result<Vec<_>>>()?;
        let model = &student;
        let (loss, grads) = mean_grads(crops.len(), |i| {
            let mut g = Graph::new();
            let h = model.handles(model.params.bind(&mut g));
            let a = g.constant(crops[i].clone());
            let out = model.forward(&mut g, &h, a, &[])?;
            let t = g.constant(targets[i].clone());
            let l = g.mse(out, t)?;
            let grads = g.backward(l)?;
            Ok((g.value(l).item(), h.bound.grads(&grads)))
        })?;
        check_finite(step, loss)?;
        losses.push(loss);
        opt.update(&mut student.params, &grads)?;
    }
    Ok((student, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn small(lookahead: Option<usize>) -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            layers: 2,
            model_dim: 8,
            heads: 2,
            lookahead,
            context: None,
            rope_base: 10_000.0,
        }
    }

    fn track(frames: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::matrix(frames, 4, rng.normals(frames * 4)).unwrap()
    }

    #[test]
    fn mask_definition() {
        let m = build_lookahead_mask(4, Some(1));
        let allowed: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| m.is_allowed(i, j))
            .collect();
        let expected: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| j <= i + 1)
            .collect();
        assert_eq!(allowed, expected);
        assert_eq!(build_lookahead_mask(3, None).allowed_count(), 9);
    }

    #[test]
    fn outputs_ignore_audio_beyond_lookahead() {
        for l in [0, 1, 3] {
            let enc = AudioEncoder::new(small(Some(l)), &mut RngState::new(l as u64)).unwrap();
            let a = track(12, 1);
            let base = enc.encode(&a).unwrap();
            let i = 4;
            let mut b = a.clone();
            for v in &mut b.data_mut()[(i + l + 1) * 4..] {
                *v = -3.0 * *v + 1.0;
            }
            let pert = enc.encode(&b).unwrap();
            for f in 0..=i {
                assert_eq!(base.row(f), pert.row(f), "L={l} frame {f}");
            }
        }
    }

    #[test]
    fn output_reacts_at_exact_lookahead() {
        let l = 2;
        let enc = AudioEncoder::new(small(Some(l)), &mut RngState::new(3)).unwrap();
        let a = track(10, 2);
        let base = enc.encode(&a).unwrap();
        let mut b = a.clone();
        b.data_mut()[(3 + l) * 4] += 1.0;
        assert_ne!(base.row(3), enc.encode(&b).unwrap().row(3));
    }

    #[test]
    fn crops_match_the_full_pass_beyond_the_reach() {
        let cfg = EncoderConfig {
            context: Some(3),
            ..small(Some(2))
        };
        let reach = cfg.past_reach().unwrap();
        assert_eq!(reach, 6);
        let enc = AudioEncoder::new(cfg, &mut RngState::new(8)).unwrap();
        let audio = track(40, 9);
        let full = enc.encode(&audio).unwrap();
        for lo in [1, 5, 17] {
            let crop = Tensor::matrix(40 - lo, 4, audio.data()[lo * 4..].to_vec()).unwrap();
            let part = enc.encode_at(&crop, lo).unwrap();
            for i in lo + reach..40 {
                assert_eq!(part.row(i - lo), full.row(i), "crop at {lo}, frame {i}");
            }
            // Without the absolute offset RoPE sees other angles.
            let shifted = enc.encode(&crop).unwrap();
            assert!((lo + reach..40).any(|i| shifted.row(i - lo) != full.row(i)));
        }
    }

    #[test]
    fn single_frame_and_empty_input() {
        let enc = AudioEncoder::new(small(Some(0)), &mut RngState::new(1)).unwrap();
        assert_eq!(enc.encode(&track(1, 1)).unwrap().shape(), &[1, 8]);
        assert!(matches!(enc.encode(&Tensor::zeros(&[0, 4])), Err(Error::Input(_))));
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let ds = Dataset::generate(
            &WorldConfig {
                audio_feature_dim: 4,
                ..WorldConfig::default()
            },
            2,
            12,
            &RngState::new(1),
        )
        .unwrap();
        let train = EncoderTrainConfig {
            steps: 0,
            ..EncoderTrainConfig::default()
        };
        let mut rng = RngState::new(7);
        let (teacher, losses) = pretrain_teacher(small(None), &ds, &train, &mut rng).unwrap();
        assert!(losses.is_empty());
        let init = AudioEncoder::new(small(None), &mut RngState::new(7).fork("init")).unwrap();
        assert_eq!(teacher.params, init.params);
        let (student, _) = distill_student(&teacher, small(Some(1)), &ds, &train, &mut rng).unwrap();
        assert_eq!(student.params, teacher.params);
    }

    #[test]
    fn self_distillation_has_zero_loss() {
        let teacher = AudioEncoder::new(small(None), &mut RngState::new(2)).unwrap();
        let student = teacher.student_from(small(None)).unwrap();
        let crops = vec![track(9, 1), track(5, 2)];
        assert_eq!(distillation_loss(&student, &teacher, &crops).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_student_rejected() {
        let teacher = AudioEncoder::new(small(None), &mut RngState::new(2)).unwrap();
        let other = EncoderConfig {
            model_dim: 16,
            ..small(Some(0))
        };
        assert!(matches!(teacher.student_from(other), Err(Error::Incompatible(_))));
    }

    #[test]
    fn hidden_fraction() {
        let mut rng = RngState::new(1);
        assert_eq!(choose_hidden(40, &mut rng).len(), 6);
        assert_eq!(choose_hidden(2, &mut rng).len(), 1);
    }

    #[test]
    fn teacher_must_be_full() {
        let ds = Dataset::generate(&WorldConfig::default(), 1, 4, &RngState::new(1)).unwrap();
        let r = pretrain_teacher(
            small(Some(0)),
            &ds,
            &EncoderTrainConfig::default(),
            &mut RngState::new(1),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
