//! Desk-scale continual-learning engine for incremental object detection.
//!
//! The pieces, bottom up: a tape-based autodiff core ([`tensor`],
//! [`gradcheck`]), flat parameter vectors with magnitude/sign fusion
//! ([`params`]), JSON checkpoints ([`checkpoint`]), prompt-conditioned
//! attention layers ([`prompt`]), a synthetic detection harness
//! ([`detector`]), the incremental training loop ([`incremental`]), and
//! distribution-shift analysis plus sweep drivers ([`analysis`]).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod detector;
pub mod gradcheck;
pub mod incremental;
pub mod params;
pub mod prompt;
pub mod rng;
pub mod tensor;
