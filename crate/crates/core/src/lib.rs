//! Budget-constrained sparse fine-tuning: train only the neurons whose outputs
//! are still moving, under a hard cap on updated parameters.

pub mod cli;
pub mod costmodel;
pub mod data;
pub mod engine;
pub mod registry;
pub mod selection;
pub mod trainer;
pub mod velocity;
