//! Independent oracles for testing the compiler and monitor: random model
//! generation, brute-force region enumeration, and exhaustive trace
//! exploration of both the hierarchical and the flattened machines.

pub mod gen;
pub mod sese;
pub mod trace;
