pub mod autograd;
pub mod cli;
pub mod data;
pub mod ensemble;
pub mod losses;
pub mod mining;
pub mod nn;
pub mod stats;
pub mod trainer;
