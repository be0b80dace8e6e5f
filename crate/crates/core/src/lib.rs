pub mod ndcore;
pub mod envs;
pub mod heads;
pub mod agent;
pub mod metrics;
pub mod harness;
