pub mod archive;
pub mod config;
pub mod driver;
pub mod evaluators;
pub mod optimizers;
pub mod rng;
pub mod space;
pub mod subsampling;
pub mod bounds;
pub mod analysis;
pub mod stats;
pub mod experiment;
