//! Library surface of the experiment runner, split out so integration tests
//! can drive configs and output writers in process.

pub mod config;
pub mod runner;
