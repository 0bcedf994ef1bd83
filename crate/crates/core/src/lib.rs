#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod container;
pub mod error;
pub mod identify;
pub mod linalg;
pub mod metrics;
pub mod project;
pub mod rng;
pub mod stream;
pub mod synthgrad;
pub mod trainkit;

pub use config::{ExperimentConfig, LoadedConfig};
pub use error::{Error, Result};
pub use identify::ProbePair;
pub use linalg::{Matrix, SvdTriple, UnitVector};
pub use metrics::{AlignmentReport, ReportFormat, SelectivityReport};
pub use project::ProjectionPlan;
pub use stream::GradientStream;
pub use synthgrad::{GradientSample, SpuriousSpec, SynthConfig, TaskSpec};
