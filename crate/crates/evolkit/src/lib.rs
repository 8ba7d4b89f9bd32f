//! Storage, model backends, the evaluation harness and file formats for
//! [`evolkit_core`].

#![forbid(unsafe_code)]

pub mod blob;
pub mod config;
pub mod fsutil;
pub mod harness;
pub mod journal;
pub mod live;
pub mod manifest;
pub mod report;
pub mod store;

pub use evolkit_core as core;
