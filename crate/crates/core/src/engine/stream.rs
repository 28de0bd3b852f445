use std::io::{self, Read, Write};
use std::thread;
use std::time::{Duration, Instant};

use super::guidance::SamplerConfig;
use super::rollout::Rollout;
use super::trace::LatencyTrace;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::kernel::Tensor;

/// A chunk of both audio tracks, `frames x audio_dim` values each, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPacket {
    pub arrival_s: f64,
    pub speaker: Vec<f64>,
    pub listener: Vec<f64>,
    pub duration_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clock {
    /// Simulated time. Compute is measured and added to the timeline, or,
    /// with `fixed_frame_s`, charged at a fixed cost per generated frame so
    /// traces are reproducible.
    Virtual { fixed_frame_s: Option<f64> },
    /// Packets are paced against the real clock.
    Wall,
}

impl Clock {
    pub fn virtual_measured() -> Self {
        Self::Virtual { fixed_frame_s: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutput {
    pub motion: Tensor,
    pub trace: LatencyTrace,
}

/// One streaming session: feed packets with [`push`](Self::push), then
/// [`finish`](Self::finish) to flush frames whose lookahead never arrived.
#[derive(Debug)]
pub struct StreamSession<'a> {
    gen: &'a Generator,
    rollout: Rollout<'a>,
    lookahead: usize,
    clock: Clock,
    started: Instant,
    now: f64,
    last_arrival: Option<f64>,
    speaker: Vec<f64>,
    listener: Vec<f64>,
    motion: Vec<f64>,
    trace: LatencyTrace,
}

impl<'a> StreamSession<'a> {
    pub fn new(gen: &'a Generator, sampler: &SamplerConfig, anchor: &[f64], clock: Clock) -> Result<Self> {
        let lookahead = gen
            .max_lookahead()
            .ok_or_else(|| Error::Config("streaming needs encoders with bounded lookahead".into()))?;
        Ok(Self {
            gen,
            rollout: Rollout::new(gen, sampler, anchor)?,
            lookahead,
            clock,
            started: Instant::now(),
            now: 0.0,
            last_arrival: None,
            speaker: Vec::new(),
            listener: Vec::new(),
            motion: Vec::new(),
            trace: LatencyTrace::default(),
        })
    }

    fn dim(&self) -> usize {
        self.gen.speaker_cfg.input_dim
    }

    pub fn audio_frames(&self) -> usize {
        self.speaker.len() / self.dim()
    }

    /// Frames whose aligned audio plus lookahead has been received.
    fn generable(&self) -> usize {
        let a = self.audio_frames();
        if a < self.lookahead {
            0
        } else {
            (a - self.lookahead) / self.gen.ratio()
        }
    }

    /// Consumes one packet and returns the frames it made generable.
    pub fn push(&mut self, packet: StreamPacket) -> Result<Vec<Vec<f64>>> {
        if let Some(prev) = self.last_arrival {
            if !(packet.arrival_s > prev) {
                return Err(Error::Stream(format!(
                    "packet at {}s arrived after one at {prev}s",
                    packet.arrival_s
                )));
            }
        }
        let d = self.dim();
        if packet.speaker.len() != packet.listener.len() || packet.speaker.len() % d != 0 {
            return Err(Error::Stream(format!(
                "packet with {} speaker and {} listener values for audio dim {d}",
                packet.speaker.len(),
                packet.listener.len()
            )));
        }
        self.last_arrival = Some(packet.arrival_s);
        match self.clock {
            Clock::Virtual { .. } => self.now = self.now.max(packet.arrival_s),
            Clock::Wall => {
                let due = Duration::from_secs_f64(packet.arrival_s.max(0.0));
                if let Some(wait) = due.checked_sub(self.started.elapsed()) {
                    thread::sleep(wait);
                }
                self.now = self.started.elapsed().as_secs_f64();
            }
        }
        self.speaker.extend_from_slice(&packet.speaker);
        self.listener.extend_from_slice(&packet.listener);
        self.trace.audio_s += packet.duration_ms / 1000.0;
        let target = self.generable();
        self.generate_until(target, packet.arrival_s)
    }

    fn generate_until(&mut self, target: usize, arrival: f64) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let began = Instant::now();
        let base = self.now;
        if self.rollout.next_frame_index() < target {
            let d = self.dim();
            let frames = self.audio_frames();
            // Encoders with a bounded past only need the audio the window
            // can read plus their reach; rows past the reach are exact.
            let lo = match self.gen.past_reach() {
                Some(reach) => self
                    .rollout
                    .first_audio_read(self.rollout.next_frame_index())
                    .saturating_sub(reach),
                None => 0,
            };
            let crop = |track: &[f64]| Tensor::matrix(frames - lo, d, track[lo * d..].to_vec());
            let speaker = self.gen.encode_speaker_at(&crop(&self.speaker)?, lo)?;
            let listener = self.gen.encode_listener_at(&crop(&self.listener)?, lo)?;
            let mut generated = 0;
            while self.rollout.next_frame_index() < target {
                let i = self.rollout.next_frame_index();
                let frame = self.rollout.step_from(&speaker, &listener, lo)?;
                generated += 1;
                let emit = match self.clock {
                    Clock::Virtual { fixed_frame_s: Some(c) } => base + c * generated as f64,
                    Clock::Virtual { fixed_frame_s: None } => base + began.elapsed().as_secs_f64(),
                    Clock::Wall => self.started.elapsed().as_secs_f64(),
                };
                self.trace.push(i, arrival, emit);
                self.motion.extend_from_slice(&frame);
                out.push(frame);
            }
        }
        let spent = match self.clock {
            Clock::Virtual { fixed_frame_s: Some(c) } => c * out.len() as f64,
            _ => began.elapsed().as_secs_f64(),
        };
        self.now = match self.clock {
            Clock::Wall => self.started.elapsed().as_secs_f64(),
            Clock::Virtual { .. } => base + spent,
        };
        self.trace.packet_compute_s.push(spent);
        Ok(out)
    }

    pub fn frames_emitted(&self) -> usize {
        self.rollout.next_frame_index()
    }

    /// Snapshot of the trace so far.
    pub fn trace(&self) -> LatencyTrace {
        self.trace.clone()
    }

    /// Ends the stream: generates every remaining frame of the received
    /// audio, attributed to the last packet.
    pub fn finish(mut self) -> Result<StreamOutput> {
        let total = self.audio_frames() / self.gen.ratio();
        if self.rollout.next_frame_index() < total {
            let arrival = self.last_arrival.unwrap_or(0.0);
            self.generate_until(total, arrival)?;
            // The flush is not a packet of its own; fold its compute into the last one.
            if self.trace.packet_compute_s.len() >= 2 {
                let extra = self.trace.packet_compute_s.pop().expect("flush entry");
                *self.trace.packet_compute_s.last_mut().expect("packet entry") += extra;
            }
        }
        let rows = self.rollout.next_frame_index();
        Ok(StreamOutput {
            motion: Tensor::matrix(rows, self.gen.cfg.motion_dim, self.motion)?,
            trace: self.trace,
        })
    }
}

/// Streams `packets` through a fresh session.
pub fn run_stream(
    gen: &Generator,
    packets: impl IntoIterator<Item = StreamPacket>,
    sampler: &SamplerConfig,
    anchor: &[f64],
    clock: Clock,
) -> Result<StreamOutput> {
    let mut session = StreamSession::new(gen, sampler, anchor, clock)?;
    for p in packets {
        session.push(p)?;
    }
    session.finish()
}

/// Writes packets as `u32` payload byte length followed by `f32` samples,
/// each audio frame's speaker values then its listener values.
pub fn write_framed_packets(out: &mut impl Write, packets: &[StreamPacket], audio_dim: usize) -> Result<()> {
    for p in packets {
        let frames = p.speaker.len() / audio_dim;
        let mut payload = Vec::with_capacity(frames * audio_dim * 8);
        for f in 0..frames {
            for v in p.speaker[f * audio_dim..(f + 1) * audio_dim]
                .iter()
                .chain(&p.listener[f * audio_dim..(f + 1) * audio_dim])
            {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let len = u32::try_from(payload.len()).map_err(|_| Error::Stream("packet too large".into()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&payload)?;
    }
    Ok(())
}

/// Reads framed packets until end of input. Arrival times are nominal:
/// each packet arrives when the previous one's audio has played.
pub fn read_framed_packets(input: &mut impl Read, audio_dim: usize, frame_ms: f64) -> Result<Vec<StreamPacket>> {
    let mut packets = Vec::new();
    let mut clock_ms = 0.0;
    loop {
        let mut len = [0u8; 4];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        let frame_bytes = 2 * audio_dim * 4;
        if len == 0 || len % frame_bytes != 0 {
            return Err(Error::Format(format!(
                "packet payload of {len} bytes is not a whole number of {frame_bytes}-byte frames"
            )));
        }
        let mut payload = vec![0u8; len];
        input
            .read_exact(&mut payload)
            .map_err(|_| Error::Format("truncated packet payload".into()))?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let mut speaker = Vec::with_capacity(values.len() / 2);
        let mut listener = Vec::with_capacity(values.len() / 2);
        for frame in values.chunks_exact(2 * audio_dim) {
            speaker.extend_from_slice(&frame[..audio_dim]);
            listener.extend_from_slice(&frame[audio_dim..]);
        }
        let duration_ms = (len / frame_bytes) as f64 * frame_ms;
        packets.push(StreamPacket {
            arrival_s: clock_ms / 1000.0,
            speaker,
            listener,
            duration_ms,
        });
        clock_ms += duration_ms;
    }
    Ok(packets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::engine::generate_offline;
    use crate::generator::{AnchorMode, GeneratorConfig};
    use crate::kernel::RngState;
    use crate::world::{audio_to_wire, DyadicAudioFeatures, WorldConfig};

    fn model(lookahead: usize) -> Generator {
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
            deterministic_mode: false,
            audio_frames_per_video_frame: 2,
            rope_base: 10_000.0,
        };
        let mut g = Generator::new(cfg, enc(lookahead), enc(0), AnchorMode::Last10, &mut RngState::new(5)).unwrap();
        let mut r = RngState::new(6);
        for t in g.params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.1 * r.normal();
            }
        }
        g
    }

    fn world() -> WorldConfig {
        WorldConfig {
            audio_feature_dim: 3,
            motion_dim: 2,
            ..WorldConfig::default()
        }
    }

    fn audio(frames: usize) -> DyadicAudioFeatures {
        let mut r = RngState::new(3);
        DyadicAudioFeatures::new(
            Tensor::matrix(frames, 3, r.normals(frames * 3)).unwrap(),
            Tensor::matrix(frames, 3, r.normals(frames * 3)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn streamed_equals_offline() {
        for lookahead in [0, 1, 3] {
            let g = model(lookahead);
            let a = audio(61);
            let s = SamplerConfig::default();
            let offline = generate_offline(&g, &a, &s, &[0.2, -0.1]).unwrap();
            for packet_ms in [20.0, 40.0, 100.0] {
                let packets = audio_to_wire(&world(), &a, packet_ms).unwrap();
                let out = run_stream(&g, packets, &s, &[0.2, -0.1], Clock::virtual_measured()).unwrap();
                assert_eq!(out.motion, offline, "lookahead {lookahead}, packets {packet_ms} ms");
            }
        }
    }

    #[test]
    fn first_packet_emits_a_frame() {
        let g = model(3);
        let packets = audio_to_wire(&world(), &audio(50), 100.0).unwrap();
        let mut s = StreamSession::new(&g, &SamplerConfig::default(), &[0.0, 0.0], Clock::virtual_measured()).unwrap();
        // 5 audio frames, lookahead 3: frame 0 (audio 1) is ready.
        assert_eq!(s.push(packets[0].clone()).unwrap().len(), 1);
    }

    #[test]
    fn one_frame_per_packet_without_lookahead() {
        let g = model(0);
        let packets = audio_to_wire(&world(), &audio(40), 40.0).unwrap();
        let mut s = StreamSession::new(&g, &SamplerConfig::default(), &[0.0, 0.0], Clock::virtual_measured()).unwrap();
        for p in packets {
            assert_eq!(s.push(p).unwrap().len(), 1);
        }
    }

    #[test]
    fn emission_never_precedes_enabling_packet() {
        let g = model(3);
        let a = audio(60);
        let packets = audio_to_wire(&world(), &a, 20.0).unwrap();
        let arrivals: Vec<f64> = packets.iter().map(|p| p.arrival_s).collect();
        let out = run_stream(
            &g,
            packets,
            &SamplerConfig::default(),
            &[0.0, 0.0],
            Clock::virtual_measured(),
        )
        .unwrap();
        for r in &out.trace.frames {
            // Frame i needs audio up to 2i + 1 + 3, carried by packet 2i + 4.
            let needed = (2 * r.frame + 4).min(arrivals.len() - 1);
            assert!(r.emit_s >= arrivals[needed], "frame {}", r.frame);
            assert!(r.apd_s >= 0.0);
        }
        LatencyTrace::validate_csv(&out.trace.to_csv()).unwrap();
    }

    #[test]
    fn fixed_cost_clock_is_reproducible() {
        let g = model(1);
        let a = audio(40);
        let clock = Clock::Virtual {
            fixed_frame_s: Some(0.01),
        };
        let run = || {
            let packets = audio_to_wire(&world(), &a, 100.0).unwrap();
            run_stream(&g, packets, &SamplerConfig::default(), &[0.0, 0.0], clock).unwrap()
        };
        let (x, y) = (run(), run());
        assert_eq!(x.trace.to_csv(), y.trace.to_csv());
        assert!(x
            .trace
            .frames
            .iter()
            .all(|r| r.apd_s > 0.0 && r.apd_s <= 0.1 + 0.01 * 5.0 + 1e-12));
    }

    #[test]
    fn out_of_order_packets_rejected() {
        let g = model(0);
        let mut packets = audio_to_wire(&world(), &audio(20), 40.0).unwrap();
        packets.swap(1, 2);
        let r = run_stream(
            &g,
            packets,
            &SamplerConfig::default(),
            &[0.0, 0.0],
            Clock::virtual_measured(),
        );
        assert!(matches!(r, Err(Error::Stream(_))));
    }

    #[test]
    fn framing_round_trip() {
        let a = audio(10);
        let packets = audio_to_wire(&world(), &a, 40.0).unwrap();
        let mut buf = Vec::new();
        write_framed_packets(&mut buf, &packets, 3).unwrap();
        let back = read_framed_packets(&mut buf.as_slice(), 3, 20.0).unwrap();
        assert_eq!(back.len(), packets.len());
        for (p, q) in packets.iter().zip(&back) {
            assert_eq!(p.arrival_s, q.arrival_s);
            assert_eq!(p.duration_ms, q.duration_ms);
            let f32s = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
            assert_eq!(f32s(&p.speaker), q.speaker);
            assert_eq!(f32s(&p.listener), q.listener);
        }
        assert!(read_framed_packets(&mut &buf[..buf.len() - 2], 3, 20.0).is_err());
    }
}
