use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "frame,packet_arrival_s,emit_s,apd_s";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    /// Arrival of the packet that made the frame generable.
    pub packet_arrival_s: f64,
    pub emit_s: f64,
    pub apd_s: f64,
}

/// Per-frame audio packet delays plus per-packet processing times.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyTrace {
    pub frames: Vec<FrameRecord>,
    /// Processing seconds spent after each packet.
    pub packet_compute_s: Vec<f64>,
    /// Seconds of audio consumed.
    pub audio_s: f64,
}

impl LatencyTrace {
    pub fn push(&mut self, frame: usize, arrival: f64, emit: f64) {
        self.frames.push(FrameRecord {
            frame,
            packet_arrival_s: arrival,
            emit_s: emit,
            apd_s: emit - arrival,
        });
    }

    pub fn mean_apd(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(|r| r.apd_s).sum::<f64>() / self.frames.len() as f64
    }

    pub fn max_apd(&self) -> f64 {
        self.frames.iter().map(|r| r.apd_s).fold(0.0, f64::max)
    }

    pub fn total_compute(&self) -> f64 {
        self.packet_compute_s.iter().sum()
    }

    pub fn mean_packet_compute(&self) -> f64 {
        if self.packet_compute_s.is_empty() {
            return 0.0;
        }
        self.total_compute() / self.packet_compute_s.len() as f64
    }

    /// Frames generated per second of processing.
    pub fn fps(&self) -> f64 {
        let t = self.total_compute();
        if t > 0.0 {
            self.frames.len() as f64 / t
        } else {
            f64::INFINITY
        }
    }

    /// Processing time divided by audio duration.
    pub fn rtf(&self) -> f64 {
        if self.audio_s > 0.0 {
            self.total_compute() / self.audio_s
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.frames {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.frame, r.packet_arrival_s, r.emit_s, r.apd_s);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "fps={:?}\nmean_apd_s={:?}\nmax_apd_s={:?}\nrtf={:?}\n",
            self.fps(),
            self.mean_apd(),
            self.max_apd(),
            self.rtf()
        )
    }

    /// Parses and checks a trace CSV: header, consecutive frame indices,
    /// non-decreasing arrival and emission, `apd = emit - arrival >= 0`.
    pub fn validate_csv(text: &str) -> Result<Vec<FrameRecord>> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::Format("trace header mismatch".into()));
        }
        let mut out: Vec<FrameRecord> = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("trace line {}: {} fields", n + 2, f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("trace line {}: {e}", n + 2)))
            };
            let rec = FrameRecord {
                frame: f[0]
                    .parse()
                    .map_err(|e| Error::Format(format!("trace line {}: {e}", n + 2)))?,
                packet_arrival_s: num(f[1])?,
                emit_s: num(f[2])?,
                apd_s: num(f[3])?,
            };
            if rec.frame != out.len() {
                return Err(Error::Format(format!(
                    "trace line {}: frame {} out of order",
                    n + 2,
                    rec.frame
                )));
            }
            if rec.apd_s < 0.0 || rec.apd_s != rec.emit_s - rec.packet_arrival_s {
                return Err(Error::Format(format!("trace line {}: inconsistent delay", n + 2)));
            }
            if let Some(prev) = out.last() {
                if rec.emit_s < prev.emit_s || rec.packet_arrival_s < prev.packet_arrival_s {
                    return Err(Error::Format(format!("trace line {}: time went backwards", n + 2)));
                }
            }
            out.push(rec);
        }
        Ok(out)
    }
}

/// Latency of a chunk-based generator that must buffer `chunk_s` of audio
/// before producing that chunk's frames. Each frame's delay is measured
/// from the arrival of the packet that opens its chunk; emission happens
/// once the chunk is full and `compute_per_chunk_s` has elapsed.
pub fn simulate_chunk_baseline(
    chunk_s: f64,
    total_s: f64,
    frame_period_s: f64,
    compute_per_chunk_s: f64,
) -> Result<LatencyTrace> {
    if !(chunk_s > 0.0) || !(frame_period_s > 0.0) || !(total_s > 0.0) || !(compute_per_chunk_s >= 0.0) {
        return Err(Error::Input("chunk, frame period and duration must be positive".into()));
    }
    let frames = (total_s / frame_period_s).round() as usize;
    let per_chunk = ((chunk_s / frame_period_s).round() as usize).max(1);
    let mut trace = LatencyTrace {
        audio_s: total_s,
        ..LatencyTrace::default()
    };
    let mut start = 0;
    while start < frames {
        let end = (start + per_chunk).min(frames);
        let opened = start as f64 * frame_period_s;
        let emit = opened + chunk_s + compute_per_chunk_s;
        for f in start..end {
            trace.push(f, opened, emit);
        }
        trace.packet_compute_s.push(compute_per_chunk_s);
        start = end;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_of_096_seconds() {
        let t = simulate_chunk_baseline(0.96, 10.0, 0.04, 0.0).unwrap();
        assert_eq!(t.frames.len(), 250);
        let min = t.frames.iter().map(|r| r.apd_s).fold(f64::INFINITY, f64::min);
        assert!(min >= 0.96 - 0.1);
        assert!(t.mean_apd() >= 0.96);
    }

    #[test]
    fn frame_sized_chunk_matches_frame_regime() {
        let t = simulate_chunk_baseline(0.04, 1.0, 0.04, 0.01).unwrap();
        assert!(t.frames.iter().all(|r| (r.apd_s - 0.05).abs() < 1e-12));
    }

    #[test]
    fn larger_chunks_mean_longer_delay() {
        let frame = simulate_chunk_baseline(0.04, 4.0, 0.04, 0.005).unwrap().mean_apd();
        for k in 2..30 {
            let chunk = simulate_chunk_baseline(0.04 * k as f64, 4.0, 0.04, 0.005)
                .unwrap()
                .mean_apd();
            assert!(frame < chunk, "k={k}");
        }
    }

    #[test]
    fn csv_round_trip_and_checks() {
        let t = simulate_chunk_baseline(0.2, 1.0, 0.04, 0.01).unwrap();
        let csv = t.to_csv();
        assert_eq!(LatencyTrace::validate_csv(&csv).unwrap(), t.frames);
        assert!(LatencyTrace::validate_csv("frame,apd\n").is_err());
        let broken = csv.replacen("\n1,", "\n2,", 1);
        assert!(LatencyTrace::validate_csv(&broken).is_err());
        let s = t.summary();
        for key in ["fps=", "mean_apd_s=", "max_apd_s=", "rtf="] {
            assert!(s.lines().any(|l| l.starts_with(key)), "{key}");
        }
    }
}
