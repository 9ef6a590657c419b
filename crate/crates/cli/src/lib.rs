//! Config loading and pipeline orchestration behind the `automaton-lm`
//! command-line tool.

pub mod config;
pub mod pipeline;
