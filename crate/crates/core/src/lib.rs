//! Ultrasound scanning-skill learning on a synthetic phantom: simulator,
//! demonstration datasets, the multi-modal quality model and best-of-N guidance.

pub mod dataset;
pub mod guidance;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod quat;

pub use dataset::{
    build_dataset, record_demonstration, Dataset, DatasetError, DemoPlan, DemoPolicy, InputNorm, ScanSample,
};
pub use guidance::{
    feasible, poor_starts, rollout, run_episodes, suggest, EpisodeSummary, Experience, GuidanceConfig, GuidanceError,
    GuidanceSuggestion, Pairing, Rollout, SourceFilter,
};
pub use model::{Hyper, ModelConfig, ModelError, QualityModel, TaskFeature, TrainReport, Variant};
pub use phantom::{oracle_quality, render, PhantomConfig, PhantomError, ProbeState, Quality, UltrasoundFrame};
pub use quat::{quat_distance, Quat};
