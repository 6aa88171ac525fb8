//! Bayesian latent growth curves, model averaging and forward projection
//! of country-level minimum-proficiency shares.

pub mod bma;
pub mod impute;
pub mod lgcm;
pub mod linalg;
pub mod panel;
pub mod project;
pub mod quadrature;
pub mod reference;
pub mod score;
pub mod stats;
pub mod synthetic;
