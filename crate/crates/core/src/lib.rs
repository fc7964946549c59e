//! Feedback-free FDD MIMO-ISAC simulation library.
//!
//! End-to-end pipeline: synthetic multipath channels with partial UL/DL
//! reciprocity ([`channel`]), gridless uplink parameter estimation and
//! downlink reconstruction ([`nomp`]), observed-Fisher-information error
//! covariance estimation ([`ecm`]), RSMA-aided precoder optimization with
//! beam-pattern-MSE or SCNR sensing constraints ([`solver`]), performance
//! metrics ([`eval`]) and a seeded Monte-Carlo experiment harness
//! ([`harness`]).

pub mod channel;
pub mod nomp;
pub mod ecm;
pub mod solver;
pub mod eval;
pub mod harness;

pub use channel::C64;
