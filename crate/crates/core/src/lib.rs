//! Accuracy-first differentially private query service.

pub mod data;
pub mod ids;
pub mod ledger;
pub mod mechanisms;
pub mod release;
pub mod rng;
pub mod service;
pub mod synthetic;
pub mod translation;
pub mod workflow;
