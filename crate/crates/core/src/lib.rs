pub mod battery;
pub mod config;
pub mod engine;
pub mod geometry;
pub mod interaction;
pub mod log;
pub mod metrics;
pub mod motion;
pub mod planner;
pub mod policy;
pub mod protocol;
pub mod scenario;
pub mod viz;
