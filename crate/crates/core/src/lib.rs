//! Query progress estimation laboratory.
//!
//! Simulates query execution as GetNext counter traces, computes a family of
//! progress estimators over them, and learns which estimator to trust for a
//! given pipeline from static plan features and early execution feedback.

pub mod cli;
pub mod estimators;
pub mod eval;
pub mod features;
pub mod par;
pub mod plan;
pub mod selection;
pub mod sim;
