//! Difference-in-differences estimation when treatment effects spill across
//! space.
//!
//! The crate is organised bottom-up:
//!
//! - [`panel`] loads and validates unit × period data and builds
//!   first-difference views.
//! - [`spatial`] computes distances (planar or haversine, in miles) and
//!   answers radius queries through a uniform grid index.
//! - [`exposure`] turns a treatment vector into exposure values, spillover
//!   indicators and distance-ring memberships.
//! - [`regression`] is least squares with absorbed two-way fixed effects and
//!   IID / HC1 / cluster / Conley covariance estimators.
//! - [`did`] holds the two-period estimators (classic, total, direct, rings,
//!   switching, first-difference).
//! - [`staggered`] is the two-stage imputation estimator for staggered
//!   adoption, with event-study terms and a cluster bootstrap.
//! - [`montecarlo`] simulates panels with known spillovers and runs the
//!   misspecification grid.
//! - [`tidy`] renders fits as tidy coefficient tables.

pub mod did;
pub mod error;
pub mod exposure;
pub mod montecarlo;
pub mod panel;
pub mod regression;
pub mod spatial;
pub mod staggered;
pub mod tidy;

pub use error::{Error, Result};
