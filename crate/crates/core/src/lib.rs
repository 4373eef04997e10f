//! Medication recommendation from longitudinal EHR visits.
//!
//! Patients are encoded visit by visit from diagnoses and procedures. Past
//! prescriptions are abstracted over a medication co-occurrence graph into
//! daily and prescription-level nodes by attention-voted traversal, and a
//! memory over those nodes plus a candidate set drive the final multi-label
//! prediction. Training runs in two stages; the second freezes candidate
//! scoring and abstracts the thresholded candidates.

pub mod abstraction;
pub mod cohort;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod reasoning;
pub mod synth;
pub mod tape;
pub mod train;

pub use cohort::{PatientRecord, RawPatient, Visit, VocabSizes, Vocabs};
pub use error::{Error, Result};
pub use eval::{evaluate, Report};
pub use graph::{build_cooccurrence_graph, EhrGraph};
pub use model::{ForwardOptions, Model, ModelConfig, Stage, Variant};
pub use synth::{generate_synthetic_cohort, synthetic_vocabs, SyntheticSpec};
pub use train::{run_variant, train_stage1, train_stage2, Checkpoint, TrainConfig};
