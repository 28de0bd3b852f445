//! `dyadic`: command-line driver for streaming dyadic audio-to-motion
//! generation on the synthetic world.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or data error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dyadic_core::checkpoint::{quantize, Checkpoint};
use dyadic_core::config::{KvMap, RunConfig};
use dyadic_core::encoder::AudioEncoder;
use dyadic_core::engine::{read_framed_packets, run_stream, Clock, StreamPacket};
use dyadic_core::experiments::{
    anchor_ablation, flow_head_ablation, generate_all, generate_for_episode, lookahead_sweep, train_generator,
    train_student, train_teacher, ANCHOR_CSV_HEADER, FLOW_HEAD_CSV_HEADER, LOOKAHEAD_CSV_HEADER,
};
use dyadic_core::generator::{AnchorMode, Generator};
use dyadic_core::kernel::{RngState, Tensor};
use dyadic_core::metrics::{evaluate, EPISODE_CSV_HEADER};
use dyadic_core::world::{audio_to_wire, Dataset};

const THREADS_ENV: &str = "DYSTREAM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dyadic", version, about = "Streaming dyadic audio-to-motion generation")]
struct Cli {
    /// `key = value` configuration file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for data, initialization, training and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must exist.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file and flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Pretrain a teacher encoder or distill a lookahead-bounded student.
    Distill(DistillArgs),
    /// Train the generator.
    Train(TrainArgs),
    /// Offline generation with full-context encoding.
    Generate(GenerateArgs),
    /// Packetized generation with a latency trace.
    Stream(StreamArgs),
    /// Metrics against the oracle dataset.
    Eval(EvalArgs),
    /// Ablation sweeps.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value = "dataset.dysw")]
    name: String,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Teacher checkpoint; read, or written when `--pretrain` is given.
    #[arg(long)]
    teacher: PathBuf,
    /// Pretrain the full-attention teacher instead of distilling.
    #[arg(long)]
    pretrain: bool,
    /// Student lookahead in audio frames (defaults to the configured one).
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long, value_enum, default_value_t = Role::Speaker)]
    role: Role,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Role {
    Speaker,
    Listener,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    speaker_encoder: Option<PathBuf>,
    #[arg(long)]
    listener_encoder: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Replace the flow head with a deterministic projection.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    anchor_mode: Option<AnchorMode>,
    #[arg(long, default_value = "generator.dyst")]
    name: String,
}

#[derive(Args, Debug)]
struct SourceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value = "motion.csv")]
    name: String,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ClockArg {
    Virtual,
    Wall,
}

#[derive(Args, Debug)]
struct StreamArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 100.0)]
    packet_ms: f64,
    #[arg(long, value_enum, default_value_t = ClockArg::Virtual)]
    clock: ClockArg,
    /// Charge a fixed compute cost per frame instead of measuring it, which
    /// makes virtual-clock traces reproducible.
    #[arg(long)]
    fixed_frame_ms: Option<f64>,
    /// Framed packet file to stream instead of the episode's audio.
    #[arg(long)]
    packets: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, required_unless_present = "ground_truth")]
    model: Option<PathBuf>,
    /// Score the dataset's own motion.
    #[arg(long, conflicts_with = "model")]
    ground_truth: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AblationKind {
    Lookahead,
    Anchor,
    FlowHead,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out dataset; defaults to the last fifth of `--dataset`.
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AblationKind::Lookahead)]
    kind: AblationKind,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    lookahead_list: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let run = match load_config(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command, run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut kv = KvMap::new();
    if let Some(seed) = cli.seed {
        kv.insert("seed".into(), seed.to_string());
        kv.insert("sampler.seed".into(), seed.to_string());
    }
    if let Some(out) = &cli.out {
        kv.insert("out".into(), out.display().to_string());
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set {o:?}: expected KEY=VALUE"))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(RunConfig::load(cli.config.as_deref(), &kv)?)
}

fn out_dir(run: &RunConfig) -> Result<&Path> {
    if !run.out.is_dir() {
        bail!("output directory {} does not exist", run.out.display());
    }
    Ok(&run.out)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cmd: Command, run: RunConfig) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(run, a),
        Command::Distill(a) => distill(run, a),
        Command::Train(a) => train(run, a),
        Command::Generate(a) => generate(run, a),
        Command::Stream(a) => stream(run, a),
        Command::Eval(a) => eval(run, a),
        Command::Ablate(a) => ablate(run, a),
    }
}

fn synth(mut run: RunConfig, a: SynthArgs) -> Result<()> {
    run.episodes = a.episodes.unwrap_or(run.episodes);
    run.frames = a.frames.unwrap_or(run.frames);
    let path = out_dir(&run)?.join(&a.name);
    let rng = RngState::derived(run.seed, "world");
    let ds = Dataset::generate(&run.world, run.episodes, run.frames, &rng)?;
    let manifest = ds.write_with_manifest(&path, run.seed)?;
    println!("dataset={}\nmanifest={}", path.display(), manifest.display());
    Ok(())
}

/// Training data uses the dataset's own world.
fn with_world(mut run: RunConfig, ds: &Dataset) -> RunConfig {
    run.world = ds.config.clone();
    run
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:?}");
    }
    s
}

fn save_encoder(enc: &mut AudioEncoder, path: &Path) -> Result<()> {
    quantize(&mut enc.params);
    Checkpoint::from_encoder(enc).write(path)?;
    println!("checkpoint={}", path.display());
    Ok(())
}

fn distill(mut run: RunConfig, a: DistillArgs) -> Result<()> {
    let out = out_dir(&run)?.to_path_buf();
    let ds = read_dataset(&a.dataset)?;
    run = with_world(run, &ds);
    if a.pretrain {
        if let Some(s) = a.steps {
            run.teacher_steps = s;
        }
        let (mut teacher, losses) = train_teacher(&run, &ds)?;
        write(&out.join("teacher_loss.csv"), &loss_csv(&losses))?;
        return save_encoder(&mut teacher, &a.teacher);
    }
    if !a.teacher.is_file() {
        bail!(
            "teacher checkpoint {} not found (create it with --pretrain)",
            a.teacher.display()
        );
    }
    let teacher = read_checkpoint(&a.teacher)?.to_encoder()?;
    if let Some(s) = a.steps {
        run.distill_steps = s;
    }
    let (base, role) = match a.role {
        Role::Speaker => (&run.speaker_encoder, "speaker"),
        Role::Listener => (&run.listener_encoder, "listener"),
    };
    let lookahead = a.lookahead.or(base.lookahead).unwrap_or(0);
    let cfg = base.with_lookahead(Some(lookahead));
    let (mut student, losses) = train_student(&run, &teacher, &cfg, &ds, role)?;
    write(&out.join(format!("{role}_distill_loss.csv")), &loss_csv(&losses))?;
    let name = a.name.unwrap_or_else(|| format!("{role}_L{lookahead}.dyst"));
    save_encoder(&mut student, &out.join(name))
}

fn load_encoder(
    path: Option<&Path>,
    fallback: &dyadic_core::encoder::EncoderConfig,
    tag: &str,
    seed: u64,
) -> Result<AudioEncoder> {
    match path {
        Some(p) => Ok(read_checkpoint(p)?.to_encoder()?),
        None => Ok(AudioEncoder::new(fallback.clone(), &mut RngState::derived(seed, tag))?),
    }
}

fn save_generator(gen: &Generator, run: &RunConfig, path: &Path) -> Result<()> {
    let mut g = gen.clone();
    quantize(&mut g.params);
    Checkpoint::from_generator(&g, run).write(path)?;
    Ok(())
}

fn train(mut run: RunConfig, a: TrainArgs) -> Result<()> {
    let out = out_dir(&run)?.to_path_buf();
    let ds = read_dataset(&a.dataset)?;
    run = with_world(run, &ds);
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(m) = a.anchor_mode {
        run.train.anchor_mode = m;
    }
    run.generator.deterministic_mode |= a.deterministic;
    let speaker = load_encoder(
        a.speaker_encoder.as_deref(),
        &run.speaker_encoder,
        "speaker_encoder",
        run.seed,
    )?;
    let listener = load_encoder(
        a.listener_encoder.as_deref(),
        &run.listener_encoder,
        "listener_encoder",
        run.seed,
    )?;
    run.speaker_encoder = speaker.cfg.clone();
    run.listener_encoder = listener.cfg.clone();
    let every = run.train.checkpoint_every;
    let snapshot_run = run.clone();
    let (gen, report) = train_generator(&run, &ds, &speaker, &listener, |step, _, g| {
        if every > 0 && (step + 1) % every == 0 {
            let p = out.join(format!("generator_step{}.dyst", step + 1));
            save_generator(g, &snapshot_run, &p).map_err(|e| dyadic_core::Error::Input(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    write(&out.join("loss.csv"), &loss_csv(&report.losses))?;
    let path = out.join(&a.name);
    save_generator(&gen, &run, &path)?;
    println!("checkpoint={}", path.display());
    if let (Some(f), Some(l)) = (report.losses.first(), report.losses.last()) {
        println!("first_loss={f:?}\nlast_loss={l:?}");
    }
    Ok(())
}

fn motion_csv(m: &Tensor) -> String {
    let mut s = String::from("frame");
    for c in 0..m.cols() {
        let _ = write!(s, ",m{c}");
    }
    s.push('\n');
    for i in 0..m.rows() {
        let _ = write!(s, "{i}");
        for v in m.row(i) {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

/// Loads the model and dataset; the run config keeps its sampler settings
/// while the model's stored architecture wins.
fn load_source(run: &RunConfig, s: &SourceArgs) -> Result<(Generator, Dataset)> {
    let (gen, stored) = read_checkpoint(&s.model)?.to_generator()?;
    let ds = read_dataset(&s.dataset)?;
    if ds.config.motion_dim != gen.cfg.motion_dim || ds.config.audio_feature_dim != stored.world.audio_feature_dim {
        bail!("checkpoint and dataset disagree on motion or audio dimensions");
    }
    if s.episode >= ds.episodes.len() {
        bail!("episode {} out of range (dataset has {})", s.episode, ds.episodes.len());
    }
    let _ = run;
    Ok((gen, ds))
}

fn generate(run: RunConfig, a: GenerateArgs) -> Result<()> {
    let out = out_dir(&run)?;
    let (gen, ds) = load_source(&run, &a.source)?;
    let motion = generate_for_episode(&gen, &ds.episodes[a.source.episode], &run.sampler)?;
    let path = out.join(&a.source.name);
    write(&path, &motion_csv(&motion))?;
    println!("motion={}\nframes={}", path.display(), motion.rows());
    Ok(())
}

fn stream(run: RunConfig, a: StreamArgs) -> Result<()> {
    let out = out_dir(&run)?;
    let (gen, ds) = load_source(&run, &a.source)?;
    let ep = &ds.episodes[a.source.episode];
    let packets: Vec<StreamPacket> = match &a.packets {
        Some(p) => {
            let mut f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_framed_packets(
                &mut f,
                ds.config.audio_feature_dim,
                ds.config.audio_frame_seconds() * 1000.0,
            )?
        }
        None => {
            let audio = ep.audio.slice(0, ep.frames() * gen.ratio());
            audio_to_wire(&ds.config, &audio, a.packet_ms)?
        }
    };
    let clock = match a.clock {
        ClockArg::Wall => Clock::Wall,
        ClockArg::Virtual => Clock::Virtual {
            fixed_frame_s: a.fixed_frame_ms.map(|ms| ms / 1000.0),
        },
    };
    let result = run_stream(&gen, packets, &run.sampler, ep.motion.row(0), clock)?;
    let motion_path = out.join(&a.source.name);
    write(&motion_path, &motion_csv(&result.motion))?;
    write(&out.join("trace.csv"), &result.trace.to_csv())?;
    let summary = result.trace.summary();
    write(&out.join("stream_summary.txt"), &summary)?;
    print!("motion={}\n{summary}", motion_path.display());
    Ok(())
}

fn eval(run: RunConfig, a: EvalArgs) -> Result<()> {
    let out = out_dir(&run)?;
    let ds = read_dataset(&a.dataset)?;
    let generated = match &a.model {
        Some(m) if !a.ground_truth => {
            let (gen, _) = read_checkpoint(m)?.to_generator()?;
            generate_all(&gen, &ds, &run.sampler)?
        }
        _ => ds.episodes.iter().map(|e| e.motion.clone()).collect(),
    };
    let (overall, rows) = evaluate(&generated, &ds.episodes)?;
    let mut csv = format!("{EPISODE_CSV_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&r.csv_row(i));
        csv.push('\n');
    }
    write(&out.join("metrics.csv"), &csv)?;
    write(&out.join("metrics.txt"), &overall.to_kv())?;
    print!("{}", overall.to_kv());
    Ok(())
}

/// Held-out split: the last fifth of the episodes (at least one).
fn split(ds: Dataset) -> Result<(Dataset, Dataset)> {
    if ds.episodes.len() < 2 {
        bail!("need at least two episodes to hold some out");
    }
    let held = (ds.episodes.len() / 5).max(1);
    let mut train = ds;
    let eval_eps = train.episodes.split_off(train.episodes.len() - held);
    let eval = Dataset {
        config: train.config.clone(),
        episodes: eval_eps,
    };
    Ok((train, eval))
}

fn ablate(mut run: RunConfig, a: AblateArgs) -> Result<()> {
    let out = out_dir(&run)?.to_path_buf();
    let ds = read_dataset(&a.dataset)?;
    run = with_world(run, &ds);
    let (train_ds, eval_ds) = match &a.eval_dataset {
        Some(p) => (ds, read_dataset(p)?),
        None => split(ds)?,
    };
    let path = out.join("ablation.csv");
    match a.kind {
        AblationKind::Lookahead => {
            let (rows, err) = lookahead_sweep(&run, &train_ds, &eval_ds, &a.lookahead_list)?;
            let mut csv = format!("{LOOKAHEAD_CSV_HEADER}\n");
            for r in &rows {
                csv.push_str(&r.csv());
                csv.push('\n');
            }
            write(&path, &csv)?;
            print!("{csv}");
            if let Some(e) = err {
                return Err(e).context(format!("partial results kept in {}", path.display()));
            }
        }
        AblationKind::Anchor | AblationKind::FlowHead => {
            let (teacher, _) = train_teacher(&run, &train_ds)?;
            let (speaker, _) = train_student(&run, &teacher, &run.speaker_encoder, &train_ds, "speaker")?;
            let (listener, _) = train_student(&run, &teacher, &run.listener_encoder, &train_ds, "listener")?;
            let csv = if a.kind == AblationKind::Anchor {
                let modes = [AnchorMode::Last10, AnchorMode::Random, AnchorMode::None];
                let rows = anchor_ablation(&run, &train_ds, &eval_ds, &speaker, &listener, &modes)?;
                let mut csv = format!("{ANCHOR_CSV_HEADER}\n");
                for (m, d) in rows {
                    let _ = writeln!(csv, "{m},{d:?}");
                }
                csv
            } else {
                let rows = flow_head_ablation(&run, &train_ds, &eval_ds, &speaker, &listener)?;
                let mut csv = format!("{FLOW_HEAD_CSV_HEADER}\n");
                for (name, r) in rows {
                    let _ = writeln!(
                        csv,
                        "{name},{:?},{:?},{:?},{:?},{:?},{:?}",
                        r.sync_proxy, r.var_exp, r.var_pose, r.sid_exp, r.sid_pose, r.fd_pose
                    );
                }
                csv
            };
            write(&path, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
