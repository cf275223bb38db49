//! Federated RIS phase-configuration learning, end to end: channel geometry
//! and Rician sampling, heterogeneous environment datasets labeled by an
//! exhaustive configuration oracle, a small manual-backprop MLP engine, and
//! the federated training algorithms (FedAVG and the best-response game in
//! its fixed-feature and learned-extractor variants).

pub mod environments;
pub mod error;
pub mod federated;
pub mod geometry;
pub mod nn;
pub mod par;
pub mod seeding;

pub use error::{Error, Result};
