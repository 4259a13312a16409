pub mod context;
pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
