//! Evaluation plumbing: datasets, synthetic worlds, metrics, configuration
//! and the offline replay driver.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod replay;
pub mod synth;

pub use config::{ConfigError, HarnessConfig, TrainingConfig};
pub use dataset::{build_dataset, Dataset, DatasetError, DatasetManifest, GroundPlane};
pub use metrics::{classification_matrix, distance_matrix, matrix_rates, BinaryMatrix};
pub use replay::{replay, replay_dataset, CloudRegistrar, Registrar, ReplayConfig, ReplayError, ReplayInput, ReplayReport, ScanSource};
pub use synth::{synth_world, SynthConfig, SynthDataset};
