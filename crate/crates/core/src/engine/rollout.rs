use std::collections::VecDeque;

use super::guidance::{combine, euler_sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::generator::{aligned_position, AudioCondition, Branch, Generator, WindowInput};
use crate::kernel::{RngState, Tensor};
use crate::world::DyadicAudioFeatures;

/// The last `capacity - 1` motion frames; starts as the anchor repeated.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindow {
    capacity: usize,
    frames: VecDeque<Vec<f64>>,
}

impl SlidingWindow {
    pub fn new(capacity: usize, warmup: &[f64]) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::Config(format!("window capacity {capacity} below 2")));
        }
        Ok(Self {
            capacity,
            frames: std::iter::repeat(warmup.to_vec()).take(capacity - 1).collect(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Appends `frame` and evicts the oldest one.
    pub fn push(&mut self, frame: Vec<f64>) {
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    pub fn history(&self) -> Tensor {
        let d = self.frames[0].len();
        Tensor::matrix(self.frames.len(), d, self.frames.iter().flatten().copied().collect()).expect("history")
    }
}

/// Frame-by-frame generation state shared by offline and streaming modes.
#[derive(Clone, Debug)]
pub struct Rollout<'a> {
    gen: &'a Generator,
    sampler: SamplerConfig,
    anchor: Vec<f64>,
    window: SlidingWindow,
    next: usize,
    root: RngState,
}

impl<'a> Rollout<'a> {
    pub fn new(gen: &'a Generator, sampler: &SamplerConfig, anchor: &[f64]) -> Result<Self> {
        sampler.validate()?;
        if anchor.len() != gen.cfg.motion_dim {
            return Err(Error::Shape(format!(
                "anchor of dim {} for motion dim {}",
                anchor.len(),
                gen.cfg.motion_dim
            )));
        }
        Ok(Self {
            gen,
            sampler: sampler.clone(),
            anchor: anchor.to_vec(),
            window: SlidingWindow::new(gen.cfg.window_n, anchor)?,
            next: 0,
            root: RngState::derived(sampler.seed, "sample"),
        })
    }

    /// Index of the next frame to generate.
    pub fn next_frame_index(&self) -> usize {
        self.next
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    /// Audio frames of encoded context needed to emit frame `i`.
    pub fn audio_needed(&self, i: usize) -> usize {
        aligned_position(i, self.gen.ratio()) + 1
    }

    /// Lowest audio frame any window token of frame `i` reads.
    pub fn first_audio_read(&self, i: usize) -> usize {
        aligned_position(i.saturating_sub(self.window.capacity()), self.gen.ratio())
    }

    fn window_input(&self, speaker: &Tensor, listener: &Tensor, offset: usize) -> Result<WindowInput> {
        let i = self.next as isize;
        let tokens = self.window.len();
        let r = self.gen.ratio();
        let mut rows = Vec::with_capacity(tokens);
        let mut picked = Vec::new();
        for j in 0..tokens {
            let k = i - (tokens as isize - 1) + j as isize;
            if k >= 0 {
                rows.push(Some(picked.len()));
                picked.push(aligned_position(k as usize, r));
            } else {
                rows.push(None);
            }
        }
        let need = *picked.last().expect("newest token is a real frame") + 1;
        if speaker.rows() + offset < need || listener.rows() + offset < need {
            return Err(Error::Stream(format!(
                "frame {i} needs encoded audio up to frame {need}, have {}",
                speaker.rows().min(listener.rows()) + offset
            )));
        }
        if picked[0] < offset {
            return Err(Error::Stream(format!(
                "frame {i} reads audio frame {} before the encoded crop at {offset}",
                picked[0]
            )));
        }
        let gather = |t: &Tensor| {
            let d = t.cols();
            let data = picked.iter().flat_map(|&p| t.row(p - offset).iter().copied()).collect();
            Tensor::matrix(picked.len(), d, data)
        };
        Ok(WindowInput {
            anchor: Some(self.anchor.clone()),
            history: self.window.history(),
            speaker: AudioCondition::Encoded {
                features: gather(speaker)?,
                rows: rows.clone(),
            },
            listener: AudioCondition::Encoded {
                features: gather(listener)?,
                rows,
            },
        })
    }

    /// Generates the next frame from encoded audio covering at least
    /// `audio_needed(next)` frames (the rest of the tensors is ignored).
    pub fn step(&mut self, speaker: &Tensor, listener: &Tensor) -> Result<Vec<f64>> {
        self.step_from(speaker, listener, 0)
    }

    /// As [`step`](Self::step) with features whose first row is audio frame
    /// `offset`; the crop must start at or before `first_audio_read(next)`.
    pub fn step_from(&mut self, speaker: &Tensor, listener: &Tensor, offset: usize) -> Result<Vec<f64>> {
        let input = self.window_input(speaker, listener, offset)?;
        // Guidance steers the flow sampler; a deterministic head has no
        // sampler and predicts from the fully conditioned branch.
        let terms = if self.gen.cfg.deterministic_mode {
            vec![(Branch::ALL, 1.0)]
        } else {
            self.sampler.guidance.active()
        };
        let md = self.gen.cfg.motion_dim;
        let frame = if terms.is_empty() {
            vec![0.0; md]
        } else {
            let conds = terms
                .iter()
                .map(|&(b, _)| self.gen.condition(&input.with_branch(b)))
                .collect::<Result<Vec<_>>>()?;
            let k = conds.len();
            let c = Tensor::matrix(k, self.gen.cfg.ar_dim, conds.concat())?;
            let guided = |m: &[f64], t: f64| -> Result<Vec<f64>> {
                let m_t = Tensor::matrix(k, md, m.repeat(k))?;
                let pred = self.gen.head_denoise(&m_t, &vec![t; k], &c)?;
                let rows: Vec<&[f64]> = (0..k).map(|r| pred.row(r)).collect();
                Ok(combine(&terms, &rows, md))
            };
            if self.gen.cfg.deterministic_mode {
                guided(&vec![0.0; md], 1.0)?
            } else {
                let mut rng = self.root.fork(&format!("frame{}", self.next));
                euler_sample(&self.sampler, md, &mut rng, guided)?
            }
        };
        if !frame.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("frame {} is not finite", self.next)));
        }
        self.window.push(frame.clone());
        self.next += 1;
        Ok(frame)
    }
}

/// Generates `audio.frames() / r` motion frames with one full-context
/// encoding pass per track.
pub fn generate_offline(
    gen: &Generator,
    audio: &DyadicAudioFeatures,
    sampler: &SamplerConfig,
    anchor: &[f64],
) -> Result<Tensor> {
    let frames = audio.frames() / gen.ratio();
    if frames == 0 {
        return Err(Error::Input(format!(
            "{} audio frames is shorter than one motion frame",
            audio.frames()
        )));
    }
    let speaker = gen.encode_speaker(&audio.speaker)?;
    let listener = gen.encode_listener(&audio.listener)?;
    let mut rollout = Rollout::new(gen, sampler, anchor)?;
    let mut out = Vec::with_capacity(frames * gen.cfg.motion_dim);
    for _ in 0..frames {
        out.extend(rollout.step(&speaker, &listener)?);
    }
    Tensor::matrix(frames, gen.cfg.motion_dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::engine::GuidanceWeights;
    use crate::generator::{AnchorMode, GeneratorConfig};

    pub(crate) fn small(deterministic: bool) -> Generator {
        let enc = |l| EncoderConfig {
            input_dim: 3,
            layers: 2,
            model_dim: 8,
            heads: 2,
            lookahead: Some(l),
            context: None,
            rope_base: 10_000.0,
        };
        let cfg = GeneratorConfig {
            ar_blocks: 1,
            ar_dim: 8,
            ar_heads: 2,
            head_blocks: 1,
            head_dim: 8,
            motion_dim: 2,
            window_n: 12,
            deterministic_mode: deterministic,
            audio_frames_per_video_frame: 2,
            rope_base: 10_000.0,
        };
        let mut g = Generator::new(cfg, enc(1), enc(0), AnchorMode::Last10, &mut RngState::new(5)).unwrap();
        let mut r = RngState::new(6);
        for t in g.params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.1 * r.normal();
            }
        }
        g
    }

    fn audio(frames: usize, seed: u64) -> DyadicAudioFeatures {
        let mut r = RngState::new(seed);
        DyadicAudioFeatures::new(
            Tensor::matrix(frames, 3, r.normals(frames * 3)).unwrap(),
            Tensor::matrix(frames, 3, r.normals(frames * 3)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = SlidingWindow::new(4, &[0.0]).unwrap();
        assert_eq!(w.len(), 3);
        w.push(vec![1.0]);
        w.push(vec![2.0]);
        assert_eq!(w.history().data(), &[0.0, 1.0, 2.0]);
        w.push(vec![3.0]);
        assert_eq!(w.history().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn one_motion_frame_from_minimal_audio() {
        let g = small(false);
        let out = generate_offline(&g, &audio(2, 1), &SamplerConfig::default(), &[0.1, 0.2]).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!(generate_offline(&g, &audio(1, 1), &SamplerConfig::default(), &[0.1, 0.2]).is_err());
    }

    #[test]
    fn offline_is_deterministic() {
        let g = small(false);
        let a = audio(30, 2);
        let s = SamplerConfig::default();
        let x = generate_offline(&g, &a, &s, &[0.0, 1.0]).unwrap();
        assert_eq!(x, generate_offline(&g, &a, &s, &[0.0, 1.0]).unwrap());
        let other = SamplerConfig { seed: 1, ..s };
        assert_ne!(x, generate_offline(&g, &a, &other, &[0.0, 1.0]).unwrap());
    }

    #[test]
    fn deterministic_mode_ignores_seed() {
        let g = small(true);
        let a = audio(20, 3);
        let x = generate_offline(&g, &a, &SamplerConfig::default(), &[0.0, 1.0]).unwrap();
        let y = generate_offline(
            &g,
            &a,
            &SamplerConfig {
                seed: 99,
                ..SamplerConfig::default()
            },
            &[0.0, 1.0],
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn output_is_causal_in_audio() {
        let g = small(false);
        let a = audio(40, 4);
        let s = SamplerConfig::default();
        let base = generate_offline(&g, &a, &s, &[0.0, 0.0]).unwrap();
        // Frame 7 aligns to audio 15; lookahead 1 reaches 16.
        let mut b = a.clone();
        for v in &mut b.speaker.data_mut()[17 * 3..] {
            *v = 1.0;
        }
        for v in &mut b.listener.data_mut()[16 * 3..] {
            *v = -1.0;
        }
        let out = generate_offline(&g, &b, &s, &[0.0, 0.0]).unwrap();
        for i in 0..=7 {
            assert_eq!(base.row(i), out.row(i), "frame {i}");
        }
        assert_ne!(base.row(8), out.row(8));
    }

    #[test]
    fn zero_weights_give_unconditional() {
        let g = small(false);
        let a = audio(10, 5);
        let s = SamplerConfig {
            guidance: GuidanceWeights::new(0.0, 0.0, 0.0, 0.0),
            ..SamplerConfig::default()
        };
        let x = generate_offline(&g, &a, &s, &[0.0, 0.0]).unwrap();
        let mut b = a.clone();
        b.speaker.data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(x, generate_offline(&g, &b, &s, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn deterministic_mode_ignores_guidance() {
        let g = small(true);
        let a = audio(12, 6);
        let plain = SamplerConfig {
            guidance: GuidanceWeights::new(0.0, 0.0, 0.0, 1.0),
            ..SamplerConfig::default()
        };
        let x = generate_offline(&g, &a, &SamplerConfig::default(), &[0.0, 1.0]).unwrap();
        assert_eq!(x, generate_offline(&g, &a, &plain, &[0.0, 1.0]).unwrap());
    }
}
