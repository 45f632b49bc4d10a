pub mod cli;
pub mod data;
pub mod diffusion;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;
