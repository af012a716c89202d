//! Synthesizes log-parsing rule programs with a language model.
//!
//! A log is cut into chunks ([`corpus`]), embedded and clustered
//! ([`embedding`]), and representative chunks are handed to a question tree
//! ([`qtree`]) that asks the model for regex rules ([`program`]). The program
//! is then refined by an island optimizer ([`optimizer`]) and by boosting
//! rounds that fit new rules to the lines still parsed wrongly
//! ([`boosting`]). Every candidate is scored against ground truth with
//! [`metrics`]. Model access goes through [`llm`], which has scripted and
//! replay backends for offline runs.
//!
//! The `schemacoder` binary wraps [`cli`] around a TOML [`config`].

pub mod corpus;
pub mod embedding;
pub mod llm;
pub mod metrics;
pub mod program;
pub mod qtree;
pub mod optimizer;
pub mod boosting;
pub mod config;
pub mod cli;
