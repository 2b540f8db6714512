//! Trace ingestion, knowledge-management coding, process mining, ShareFlows,
//! recommendation, epistemic network analysis and evaluation statistics.

pub mod coder;
pub mod ena;
pub mod eval;
pub mod miner;
pub mod recommender;
pub mod repository;
pub mod shareflow;
pub mod stats;
pub mod trace;
pub mod pipeline;
