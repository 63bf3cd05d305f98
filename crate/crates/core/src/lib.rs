//! Medication prediction from longitudinal EHR event logs.
//!
//! The crate covers the whole path from a raw `events.csv` log to trained
//! predictors and their metrics:
//!
//! * [`ehr`]: domain types, vocabularies and event ingestion.
//! * [`preprocess`]: patient-day alignment, normalization, imputation,
//!   sandwich windows, aggregation, cohort selection and splitting.
//! * [`dataset`]: the serialized dataset container.
//! * [`numerics`] and [`layers`]: dense math, LSTM cells, heads and their
//!   hand-written backward passes.
//! * [`models`]: the Prev. and logistic-regression baselines, the basic
//!   recurrent model and the hierarchical variants, plus checkpoints.
//! * [`train`] and [`eval`]: losses, optimizers, the epoch loop, AUC and
//!   accuracy reports.
//! * [`synth`]: a seeded generator of synthetic longitudinal records.
//! * [`config`], [`pipeline`] and [`predict`]: run settings, the end-to-end
//!   steps behind the command-line tool, and single-patient prediction.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod predict;
pub mod preprocess;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
