use super::config::{AnchorMode, TrainConfig};
use super::model::{aligned_position, sample_anchor, AnchorPhase, AudioCondition, FlowSample, Generator, WindowInput};
use crate::error::{Error, Result};
use crate::kernel::optim::mean_grads;
use crate::kernel::{AdamW, Bound, Graph, RngState, Tensor, Var};
use crate::world::{Dataset, OracleEpisode};

/// One teacher-forced training window.
#[derive(Clone, Debug)]
pub(crate) struct TrainExample {
    pub input: WindowInput,
    /// Tokens whose frame exists in the episode (padding tokens are skipped).
    pub targets: Vec<usize>,
    pub samples: Vec<FlowSample>,
}

impl Generator {
    pub(crate) fn example_loss(&self, g: &mut Graph, b: &Bound, ex: &TrainExample) -> Result<Var> {
        let c = self.conditions_graph(g, b, &ex.input)?;
        let c = g.gather_rows(c, &ex.targets)?;
        let d = self.cfg.motion_dim;
        let rows = ex.samples.len();
        let m0 = g.constant(Tensor::matrix(
            rows,
            d,
            ex.samples.iter().flat_map(|s| s.m0.clone()).collect(),
        )?);
        let m_t = g.constant(Tensor::matrix(
            rows,
            d,
            ex.samples.iter().flat_map(|s| s.m_t.clone()).collect(),
        )?);
        let t: Vec<f64> = ex.samples.iter().map(|s| s.t).collect();
        let pred = self.head_graph(g, b, m_t, &t, c)?;
        g.mse(pred, m0)
    }

    /// Loss and parameter gradients of one example.
    pub(crate) fn example_grads(&self, ex: &TrainExample) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let loss = self.example_loss(&mut g, &b, ex)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), b.grads(&grads)))
    }

    /// Draws a training window from `ep`. Windows may start before frame 0;
    /// those frames hold frame 0 as motion and null audio, matching the
    /// warm-up used at inference. The audio crop starts far enough back, and
    /// is encoded at its absolute positions, so the encoders produce the same
    /// features as a pass over the whole episode.
    pub(crate) fn draw_example(
        &self,
        ep: &OracleEpisode,
        cfg: &TrainConfig,
        rng: &mut RngState,
    ) -> Result<TrainExample> {
        let n = self.cfg.window_n;
        let frames = ep.frames();
        if frames < n {
            return Err(Error::Input(format!(
                "episode of {frames} frames is shorter than the window {n}"
            )));
        }
        let r = self.ratio();
        let audio_frames = ep.audio.frames();
        if audio_frames < frames * r {
            return Err(Error::Input("episode audio is shorter than its motion".into()));
        }
        let start = rng.range_inclusive(0, frames - 1) as isize - (n as isize - 1);
        let frame = |k: isize| ep.motion.row(k.max(0) as usize).to_vec();

        let first = start + 1;
        let last = start + n as isize - 1;
        let lo = match self.past_reach() {
            Some(reach) => aligned_position(first.max(0) as usize, r).saturating_sub(reach),
            None => 0,
        };
        let hi = match self.max_lookahead() {
            Some(l) => (aligned_position(last as usize, r) + l + 1).min(audio_frames),
            None => audio_frames,
        };
        let audio = ep.audio.slice(lo, hi);

        let mut history = Vec::with_capacity((n - 1) * self.cfg.motion_dim);
        let mut rows = Vec::with_capacity(n - 1);
        let mut targets = Vec::new();
        for j in 0..n - 1 {
            let k = first + j as isize;
            history.extend(frame(k - 1));
            if k >= 0 {
                rows.push(Some(aligned_position(k as usize, r) - lo));
                targets.push(j);
            } else {
                rows.push(None);
            }
        }

        let drop_s = rng.bernoulli(cfg.p_drop_speaker);
        let drop_l = rng.bernoulli(cfg.p_drop_listener);
        let drop_r = rng.bernoulli(cfg.p_drop_anchor);
        // Last10 draws from the window's last ten frames, Random from anywhere
        // in the episode.
        let anchor_frame = match cfg.anchor_mode {
            AnchorMode::Last10 => Some(start + sample_anchor(n, AnchorPhase::Train, rng)? as isize),
            AnchorMode::Random => Some(rng.range_inclusive(0, frames - 1) as isize),
            AnchorMode::None => None,
        };
        let anchor = anchor_frame.filter(|_| !drop_r).map(frame);
        let cond = |audio: Tensor, dropped: bool| {
            if dropped {
                AudioCondition::Dropped
            } else {
                AudioCondition::Raw {
                    audio,
                    start: lo,
                    rows: rows.clone(),
                }
            }
        };
        let input = WindowInput {
            anchor,
            history: Tensor::matrix(n - 1, self.cfg.motion_dim, history)?,
            speaker: cond(audio.speaker, drop_s),
            listener: cond(audio.listener, drop_l),
        };
        let samples = targets
            .iter()
            .map(|&j| FlowSample::draw(frame(first + j as isize), rng))
            .collect();
        Ok(TrainExample {
            input,
            targets,
            samples,
        })
    }
}

/// One optimizer step on a batch drawn from `ds`; returns the batch loss.
pub fn train_step(
    gen: &mut Generator,
    opt: &mut AdamW,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<f64> {
    if ds.episodes.is_empty() {
        return Err(Error::Input("dataset has no episodes".into()));
    }
    let batch = (0..cfg.batch)
        .map(|_| {
            let ep = &ds.episodes[rng.range_inclusive(0, ds.episodes.len() - 1)];
            gen.draw_example(ep, cfg, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = &*gen;
    let (loss, grads) = mean_grads(batch.len(), |i| model.example_grads(&batch[i]))?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "loss became {loss} at step {}",
            opt.steps_taken()
        )));
    }
    opt.update(&mut gen.params, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Runs `cfg.steps` steps. `on_step(step, loss, model)` runs after each
/// update, e.g. for logging or periodic checkpoints.
pub fn train(
    gen: &mut Generator,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
    mut on_step: impl FnMut(usize, f64, &Generator) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if gen.anchor_mode != cfg.anchor_mode {
        return Err(Error::Config(format!(
            "model built for anchor mode {} but training uses {}",
            gen.anchor_mode, cfg.anchor_mode
        )));
    }
    if let Some(ep) = ds.episodes.iter().find(|e| e.frames() < gen.cfg.window_n) {
        return Err(Error::Input(format!(
            "episode of {} frames is shorter than the window {}",
            ep.frames(),
            gen.cfg.window_n
        )));
    }
    let mut opt = AdamW::new(cfg.optim.clone(), &gen.params);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        opt.cfg.lr = cfg.optim.lr * cfg.lr_schedule.factor(step, cfg.steps);
        let loss = train_step(gen, &mut opt, ds, cfg, rng)?;
        report.losses.push(loss);
        on_step(step, loss, gen)?;
    }
    Ok(report)
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and element index of the worst entry.
    pub worst: (String, usize),
}

/// Compares every analytic parameter gradient of the training loss with a
/// central difference on a random two-frame window (`h = 1e-5`). Relative
/// errors use `max(|analytic|, |numeric|, 1e-6)` as the denominator.
pub fn gradient_check(gen: &Generator, seed: u64) -> Result<GradientCheck> {
    let ex = two_frame_example(gen, seed)?;
    let (_, grads) = gen.example_grads(&ex)?;
    let mut probe = gen.clone();
    let mut loss_at = |pi: usize, e: usize, delta: f64| -> Result<f64> {
        let v = &mut probe.params.tensors_mut()[pi].data_mut()[e];
        let orig = *v;
        *v = orig + delta;
        let mut g = Graph::new();
        let b = probe.params.bind_frozen(&mut g);
        let l = probe.example_loss(&mut g, &b, &ex);
        probe.params.tensors_mut()[pi].data_mut()[e] = orig;
        Ok(g.value(l?).item())
    };
    let h = 1e-5;
    let mut out = GradientCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: (String::new(), 0),
    };
    for (pi, grad) in grads.iter().enumerate() {
        for e in 0..grad.numel() {
            let fd = (loss_at(pi, e, h)? - loss_at(pi, e, -h)?) / (2.0 * h);
            let an = grad.data()[e];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if err > out.max_rel_err || out.checked == 0 {
                out.max_rel_err = err;
                out.worst = (gen.params.name(crate::kernel::ParamId(pi)).to_string(), e);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Two frames with raw audio, an anchor and random flow samples.
fn two_frame_example(gen: &Generator, seed: u64) -> Result<TrainExample> {
    let mut r = RngState::new(seed);
    let d = gen.cfg.motion_dim;
    let ratio = gen.ratio();
    let frames = 2 * ratio + 1;
    let audio = |r: &mut RngState, dim: usize| Tensor::matrix(frames, dim, r.normals(frames * dim));
    let rows: Vec<Option<usize>> = (0..2).map(|k| Some(aligned_position(k, ratio))).collect();
    let input = WindowInput {
        anchor: Some(r.normals(d)),
        history: Tensor::matrix(2, d, r.normals(2 * d))?,
        speaker: AudioCondition::Raw {
            audio: audio(&mut r, gen.speaker_cfg.input_dim)?,
            start: 0,
            rows: rows.clone(),
        },
        listener: AudioCondition::Raw {
            audio: audio(&mut r, gen.listener_cfg.input_dim)?,
            start: 0,
            rows,
        },
    };
    let samples = (0..2).map(|_| FlowSample::draw(r.normals(d), &mut r)).collect();
    Ok(TrainExample {
        input,
        targets: vec![0, 1],
        samples,
    })
}
