//! Command line and HTTP front end for bpmnchain monitors.

pub mod api;
pub mod config;
pub mod keys;
pub mod scenario;
pub mod service;
