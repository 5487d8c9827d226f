//! Video question answering with question-guided frame selection,
//! per-frame dynamic scene graphs and a question-aware dynamic graph
//! transformer.
//!
//! The pipeline runs in this order: [`frame_select`] picks
//! question-relevant frames, [`graphs`] turns each frame into a small scene
//! graph, [`qdgt`] encodes the graphs into local and global video
//! representations, [`fusion`] combines them and scores answers, and
//! [`training`] fits everything end to end. [`synthbench`] generates a
//! synthetic benchmark with a known answer rule.

pub mod datamodel;
pub mod error;
pub mod exec;
pub mod frame_select;
pub mod fusion;
pub mod graphs;
pub mod model;
pub mod numcore;
pub mod qdgt;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
