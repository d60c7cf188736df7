//! Command-line orchestration: phantom synthesis, cached feature
//! extraction, cross-validation and reporting.

pub mod commands;
pub mod config;
pub mod extract;

pub use commands::{cmd_cv, cmd_extract, cmd_report, cmd_synth};
pub use config::{Ablation, ExtractorSource, PipelineConfig};
pub use extract::{cache_root, extract_features, Extraction};

/// Process exit code for an error: 1 for invalid input, 2 otherwise.
pub fn exit_code(err: &vox2p1d::Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}
