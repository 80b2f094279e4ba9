pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod dualpath;
pub mod error;
pub mod graph;
pub mod primitives;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod verify;
