//! Length control for streaming text generation through exact length
//! feedback.
//!
//! While a model streams its reply, the [`controller`] pauses at sentence
//! boundaries, counts the clean text so far in the requested unit and
//! appends a marker such as `<used_words=42>` before letting the model
//! continue its own message. Markers never reach the user.

pub mod backend;
pub mod controller;
pub mod feedback;
pub mod metrics;
pub mod segmenter;
pub mod sftgen;
pub mod units;

pub use controller::{run_batch, run_session, ControllerConfig, InsertionMode, LengthConstraint, SessionState};
pub use feedback::{build_prompt, PromptBundle, PromptMode};
pub use units::{Counter, LengthUnit};
