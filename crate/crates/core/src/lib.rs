//! Subgroup fairness auditing and bias mitigation for three-class cognitive
//! screening classifiers (control / MCI / AD).
//!
//! The crate covers the full mitigation stack at desk scale: attribute
//! ingestion, fairness metrics, sample reweighting, calibrated equalized-odds
//! post-processing, spectrogram augmentation, speaker pairing for voice
//! conversion, and small manually differentiated fusion heads with a
//! synthetic bias scenario generator.

pub mod ceo;
pub mod domain;
pub mod error;
pub mod fairmetrics;
pub mod ingest;
pub mod pairing;
pub mod par;
pub mod reweight;
pub mod specaug;
pub mod toynet;

pub use domain::{AgeGroup, Class, Education, Field, Gender, Language, Probs, SubjectRecord};
pub use error::{Error, Result};
pub use par::Exec;
