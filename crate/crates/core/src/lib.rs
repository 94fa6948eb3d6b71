pub mod cli;
pub mod config;
pub mod cost;
pub mod engine;
pub mod metrics;
pub mod radix_cache;
pub mod scheduler;
pub mod step_graph;
pub mod tier;
pub mod workload;
