//! Federated latent-space alignment for multi-user semantic MIMO downlinks.
//!
//! An access point transmits compressed latent vectors through a shared
//! linear pre-equalizer; each user applies its own equalizer to land in its
//! native latent space. Both sides are trained jointly by ADMM over a small
//! set of semantic pilots, with only projected products crossing the link.

pub mod admm;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod federation;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod semantic;

pub use admm::{AdmmOptions, AdmmState, Aggregation, AlignmentProblem, IterationRecord, NoiseWeighting};
pub use baselines::{AlignerQ, MethodOutput, MethodParams, Selection, SelectionCode};
pub use channel::MimoChannel;
pub use error::{Error, Result};
pub use federation::{PayloadLedger, Session};
pub use harness::{ExperimentConfig, Method, MetricsRecord};
pub use linalg::{ComplexMatrix, RealMatrix, Whitener};
pub use semantic::{ComplexLatentSet, Heterogeneity, PilotSampling, PopulationConfig, RealLatentSet};
