//! Inference: guidance, the Euler sampler, sliding-window rollout and the
//! packet-driven streaming scheduler.

mod guidance;
mod rollout;
mod stream;
mod trace;

pub use guidance::{cfg_combine, euler_sample, GuidanceWeights, GuidedPredictions, SamplerConfig};
pub use rollout::{generate_offline, Rollout, SlidingWindow};
pub use stream::{
    read_framed_packets, run_stream, write_framed_packets, Clock, StreamOutput, StreamPacket, StreamSession,
};
pub use trace::{simulate_chunk_baseline, FrameRecord, LatencyTrace, TRACE_HEADER};
