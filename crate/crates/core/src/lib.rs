//! Exam labeling, ECG signal handling, a residual 1-D CNN classifier,
//! classification metrics and time-to-event modeling for AF risk prediction.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod ecgsig;
pub mod metrics;
pub mod neuralnet;
pub mod plot;
pub mod scalar;
pub mod survival;

pub use scalar::Scalar;

pub type ModelParamsF32 = neuralnet::ModelParams<f32>;
pub type ModelParamsF64 = neuralnet::ModelParams<f64>;
pub type SurvivalRecordF64 = cohort::SurvivalRecord<f64>;
pub type KmCurveF64 = survival::KmCurve<f64>;
pub type CoxFitF64 = survival::CoxFit<f64>;
pub type CoxDataF64 = survival::CoxData<f64>;
pub type ScoredExamF64 = metrics::ScoredExam<f64>;
