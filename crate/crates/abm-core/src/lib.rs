//! Desk-scale library for staged multi-domain training: task-vector model
//! merging (averaging, TSVM, WUDI), square-averaging supervised training,
//! group-relative policy optimization, and empirical checks of one-step
//! gradient-interference and scaffold-transfer bounds — everything small
//! enough that each claim is verified against an explicit oracle.

pub mod autodiff;
pub mod checkpoint;
pub mod domains;
pub mod grpo;
pub mod interference;
pub mod manifest;
pub mod merge;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use params::ParameterMap;
pub use tensor::Tensor;

/// Thread cap for internal parallelism; 0 (the default) means serial.
pub fn thread_cap() -> usize {
    std::env::var("ABM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}
