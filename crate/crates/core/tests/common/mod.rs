//! Oracles shared by the focused test targets and the acceptance suite.
#![allow(dead_code)]

pub mod gradcheck;
pub mod mining;
pub mod reductions;
