//! Cohort parsing, consensus labelling, enrollment and deterministic
//! preprocessing up to model-ready patches.

pub mod io;
pub mod labels;
pub mod manifest;
pub mod normalize;
pub mod patch;
pub mod prepare;
pub mod record;
pub mod resample;

pub use io::{NiftiIo, VolumeReader};
pub use labels::{consolidate_consensus, enroll, label_malignancy, EnrollDecision, ExcludeReason};
pub use normalize::normalize_intensity;
pub use patch::extract_patch;
pub use prepare::{load_prepared, prepare_cohort, PrepareConfig, PreparedCohort, PreparedSample};
pub use record::{CohortManifest, DiagnosisLabel, NoduleRecord, RaterAnnotation, Split};
pub use resample::{resample, resample_mask};
