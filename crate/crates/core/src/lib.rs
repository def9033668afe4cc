//! Discrete-event energy simulation and statistical model checking for
//! networks of battery-powered IoT devices.

pub mod energy;
pub mod export;
pub mod model;
pub mod scenario;
pub mod sim;
pub mod smc;
pub mod stochastics;
pub mod sweep;
