//! Configuration, training runs and the experiment drivers.

pub mod config;
pub mod experiments;
pub mod plot;
pub mod train;

pub use config::{CrmModeSetting, Precision, TrainConfig};
pub use experiments::{ablate_redaction, band_sweep, sa_scaling, AblationReport, BandSweep, ScalingRow};
pub use train::{evaluate_checkpoint, train, train_paired, train_with, Model, RunOptions, RunRecord, Split, Trainer};
