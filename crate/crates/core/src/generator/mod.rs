//! Audio-driven motion generator.
//!
//! An autoregressive transformer turns a window of past motion, the anchor
//! frame and frame-aligned speaker/listener audio into one condition vector
//! per frame. A small frame-level flow head, modulated by the timestep and
//! that condition vector, predicts the clean motion frame from a noisy one.
//!
//! Token layout for a window whose newest frame is `i` (history of `N - 1`
//! frames):
//!
//! ```text
//! token j    embed(m[k-1]) + speaker(k) + listener(k) + anchor,  k = i - N + 2 + j
//! ```
//!
//! Audio and anchor enter by element-wise addition; the anchor term is the
//! same for every token (or the anchor null embedding when dropped).
//!
//! so the output at the token for frame `k` sees motion strictly before `k`
//! and audio aligned to frames `<= k`. Frames before the start of a stream
//! hold the anchor as motion and the null audio embeddings.

mod config;
mod model;
mod train;

pub use config::{AnchorMode, GeneratorConfig, LrSchedule, TrainConfig};
pub use model::{
    align_audio, aligned_position, flow_loss, sample_anchor, AnchorPhase, AudioCondition, Branch, FlowSample,
    Generator, WindowInput,
};
pub use train::{gradient_check, train, train_step, GradientCheck, TrainReport};
