pub mod clock;
pub mod copy_engine;
pub mod device;
pub mod exec;
pub mod experiment;
pub mod memory;
pub mod metrics;
pub mod queue;
pub mod store;
pub mod timing;
pub mod validate;
pub mod workload;
