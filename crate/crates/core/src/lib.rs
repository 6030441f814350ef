//! Conditional average-velocity flow fields for one-step speech enhancement.
pub mod field;
pub mod frontend;
pub mod metrics;
pub mod objective;
pub mod path;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod toy_data;
pub mod trainer;
pub mod verify;
