//! Signal processing shared by data preparation, training and evaluation.

pub mod mel;
pub mod pitch;
pub mod wav;

pub use mel::{MelConfig, MelExtractor, MelSpectrogram};
pub use pitch::PitchTracker;
