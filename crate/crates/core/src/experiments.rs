//! End-to-end pipelines and the ablation drivers.
//!
//! Randomness is split from `RunConfig::seed` per subsystem: `world` for
//! data, `encoder` for teacher and students, `init` and `train` for the
//! generator. Sampling uses `SamplerConfig::seed`.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::encoder::{distill_student, pretrain_teacher, AudioEncoder, EncoderConfig, EncoderTrainConfig};
use crate::engine::{generate_offline, SamplerConfig};
use crate::error::{Error, Result};
use crate::generator::{train, AnchorMode, Generator, TrainReport};
use crate::kernel::{RngState, Tensor};
use crate::metrics::{drift_metric, evaluate, MetricsReport};
use crate::world::{Dataset, OracleEpisode, WorldConfig};

/// Duration of one audio frame in milliseconds.
pub fn audio_frame_ms(world: &WorldConfig) -> f64 {
    world.audio_frame_seconds() * 1000.0
}

/// Training and held-out datasets drawn from independent streams.
pub fn make_datasets(run: &RunConfig, eval_episodes: usize, eval_frames: usize) -> Result<(Dataset, Dataset)> {
    let root = RngState::derived(run.seed, "world");
    let train = Dataset::generate(&run.world, run.episodes, run.frames, &root.fork("train"))?;
    let eval = Dataset::generate(&run.world, eval_episodes, eval_frames, &root.fork("eval"))?;
    Ok((train, eval))
}

fn encoder_train(steps: usize) -> EncoderTrainConfig {
    EncoderTrainConfig {
        steps,
        ..EncoderTrainConfig::default()
    }
}

/// Full-attention teacher sharing the speaker encoder's architecture.
pub fn teacher_config(run: &RunConfig) -> EncoderConfig {
    EncoderConfig {
        lookahead: None,
        ..run.speaker_encoder.clone()
    }
}

pub fn train_teacher(run: &RunConfig, ds: &Dataset) -> Result<(AudioEncoder, Vec<f64>)> {
    let mut rng = RngState::derived(run.seed, "encoder").fork("teacher");
    pretrain_teacher(teacher_config(run), ds, &encoder_train(run.teacher_steps), &mut rng)
}

/// Distills `cfg` from `teacher`; `role` separates the random streams of
/// the speaker and listener students.
pub fn train_student(
    run: &RunConfig,
    teacher: &AudioEncoder,
    cfg: &EncoderConfig,
    ds: &Dataset,
    role: &str,
) -> Result<(AudioEncoder, Vec<f64>)> {
    let mut rng = RngState::derived(run.seed, "encoder").fork(role);
    distill_student(teacher, cfg.clone(), ds, &encoder_train(run.distill_steps), &mut rng)
}

/// Builds a generator around trained encoders and trains it.
pub fn train_generator(
    run: &RunConfig,
    ds: &Dataset,
    speaker: &AudioEncoder,
    listener: &AudioEncoder,
    on_step: impl FnMut(usize, f64, &Generator) -> Result<()>,
) -> Result<(Generator, TrainReport)> {
    let mut gen = Generator::new(
        run.generator.clone(),
        speaker.cfg.clone(),
        listener.cfg.clone(),
        run.train.anchor_mode,
        &mut RngState::derived(run.seed, "init"),
    )?;
    gen.load_encoders(speaker, listener)?;
    let report = train(
        &mut gen,
        ds,
        &run.train,
        &mut RngState::derived(run.seed, "train"),
        on_step,
    )?;
    Ok((gen, report))
}

/// Offline generation for one episode, anchored on its first frame.
pub fn generate_for_episode(gen: &Generator, ep: &OracleEpisode, sampler: &SamplerConfig) -> Result<Tensor> {
    let audio = ep.audio.slice(0, ep.frames() * gen.ratio());
    generate_offline(gen, &audio, sampler, ep.motion.row(0))
}

/// Generates every episode of `ds` in parallel.
pub fn generate_all(gen: &Generator, ds: &Dataset, sampler: &SamplerConfig) -> Result<Vec<Tensor>> {
    ds.episodes
        .par_iter()
        .map(|ep| generate_for_episode(gen, ep, sampler))
        .collect()
}

pub fn evaluate_generator(gen: &Generator, ds: &Dataset, sampler: &SamplerConfig) -> Result<MetricsReport> {
    let generated = generate_all(gen, ds, sampler)?;
    Ok(evaluate(&generated, &ds.episodes)?.0)
}

pub const LOOKAHEAD_CSV_HEADER: &str = "lookahead_frames,lookahead_ms,sync_proxy,mse";

#[derive(Clone, Debug, PartialEq)]
pub struct LookaheadRow {
    pub lookahead_frames: usize,
    pub lookahead_ms: f64,
    pub sync_proxy: f64,
    pub mse: f64,
}

impl LookaheadRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?}",
            self.lookahead_frames, self.lookahead_ms, self.sync_proxy, self.mse
        )
    }
}

/// Trains one teacher, then for each speaker lookahead distills a student
/// and trains and evaluates a generator. Sub-runs share all seeds and run
/// in parallel. Rows of successful sub-runs are returned even if another
/// fails; the first failure is reported alongside them.
pub fn lookahead_sweep(
    run: &RunConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    lookaheads: &[usize],
) -> Result<(Vec<LookaheadRow>, Option<Error>)> {
    if lookaheads.is_empty() {
        return Err(Error::Input("empty lookahead list".into()));
    }
    let (teacher, _) = train_teacher(run, train_ds)?;
    let (listener, _) = train_student(run, &teacher, &run.listener_encoder, train_ds, "listener")?;
    let results: Vec<Result<LookaheadRow>> = lookaheads
        .par_iter()
        .map(|&l| {
            let cfg = run.speaker_encoder.with_lookahead(Some(l));
            let (speaker, _) = train_student(run, &teacher, &cfg, train_ds, "speaker")?;
            let (gen, _) = train_generator(run, train_ds, &speaker, &listener, |_, _, _| Ok(()))?;
            let report = evaluate_generator(&gen, eval_ds, &run.sampler)?;
            Ok(LookaheadRow {
                lookahead_frames: l,
                lookahead_ms: l as f64 * audio_frame_ms(&run.world),
                sync_proxy: report.sync_proxy,
                mse: report.mse,
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Ok((rows, first_err))
}

pub const ANCHOR_CSV_HEADER: &str = "anchor_mode,drift";

/// Mean drift over `eval_ds` for a generator trained with each anchor mode.
/// Encoders are shared across modes.
pub fn anchor_ablation(
    run: &RunConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    speaker: &AudioEncoder,
    listener: &AudioEncoder,
    modes: &[AnchorMode],
) -> Result<Vec<(AnchorMode, f64)>> {
    let pose = run.world.pose_channels();
    modes
        .par_iter()
        .map(|&mode| {
            let mut r = run.clone();
            r.train.anchor_mode = mode;
            let (gen, _) = train_generator(&r, train_ds, speaker, listener, |_, _, _| Ok(()))?;
            let generated = generate_all(&gen, eval_ds, &r.sampler)?;
            let mut total = 0.0;
            for (g, ep) in generated.iter().zip(&eval_ds.episodes) {
                total += drift_metric(g, ep.motion.row(0), &pose)?;
            }
            Ok((mode, total / generated.len() as f64))
        })
        .collect()
}

pub const FLOW_HEAD_CSV_HEADER: &str = "head,sync_proxy,var_exp,var_pose,sid_exp,sid_pose,fd_pose";

/// Metrics of the flow-head model and its deterministic counterpart, in
/// that order.
pub fn flow_head_ablation(
    run: &RunConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    speaker: &AudioEncoder,
    listener: &AudioEncoder,
) -> Result<Vec<(&'static str, MetricsReport)>> {
    [("flow", false), ("deterministic", true)]
        .par_iter()
        .map(|&(name, det)| {
            let mut r = run.clone();
            r.generator.deterministic_mode = det;
            let (gen, _) = train_generator(&r, train_ds, speaker, listener, |_, _, _| Ok(()))?;
            Ok((name, evaluate_generator(&gen, eval_ds, &r.sampler)?))
        })
        .collect()
}
