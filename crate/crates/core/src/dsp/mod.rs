//! EEG preprocessing: band-pass filtering, epoching, normalization and the
//! recording file formats.

pub mod archive;
pub mod dataset;
pub mod epoch;
pub mod filter;
pub mod recording;

pub use dataset::{batch_tensor, build_dataset, DatasetOptions, LabeledWindow};
pub use epoch::{epoch_segment, normalize_window, window_count, WINDOW_SAMPLES, WINDOW_STRIDE};
pub use filter::{bandpass_filter, FilterDesign, FilterSpec, Sos};
pub use recording::{AttentionClass, EegRecording, Segment, CHANNEL_NAMES, NUM_CHANNELS, SAMPLE_RATE};
