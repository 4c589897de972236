//! Configuration, file formats, simulation, evaluation and the odometry driver.

pub mod config;
pub mod io;
pub mod sim;
pub mod eval;
pub mod odometry;
