//! Real-time listening engine: backchannel timing from prosody,
//! sentiment-matched backchannels, constrained active-listening replies,
//! self-disclosure scoring, and the statistics used to compare listening
//! conditions.

pub mod bop;
pub mod prosody;
pub mod completion;
pub mod backchannel;
pub mod listener;
pub mod session;
pub mod transcript;
pub mod disclosure;
pub mod analysis;
pub mod fixtures;
