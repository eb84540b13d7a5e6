//! Toolkit around `mmfinger-core`: run configuration, corpus and artifact
//! persistence, the black-box query client, pipeline orchestration and
//! reporting. The `mmfinger` binary is a thin CLI over this library.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inspect;
pub mod manifest;
pub mod pipeline;
pub mod query;
pub mod report;
