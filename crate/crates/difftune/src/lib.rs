//! difftune: search-based iterative compilation that tunes compiler
//! optimization flags to maximize the structural difference between a
//! compiled binary and a baseline build.
//!
//! The pipeline: a genetic algorithm ([`ga`]) explores the flag space
//! ([`flagspace`]), each candidate is compiled ([`driver`]) and scored by
//! normalized compression distance against the baseline ([`fitness`]),
//! every evaluation is persisted to an append-only session log ([`store`]),
//! and the results are quantified after the fact ([`analysis`],
//! [`structdiff`]).

pub mod analysis;
pub mod cli;
pub mod config;
pub mod driver;
pub mod elf;
pub mod fitness;
pub mod flagspace;
pub mod ga;
pub mod store;
pub mod structdiff;
