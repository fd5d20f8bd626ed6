//! Benchmark applications built on the public runtime surface.

pub mod region_sum;
pub mod taxi;
