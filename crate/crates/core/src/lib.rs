pub mod error;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod dynamics;
pub mod ode;
pub mod asymptotics;
pub mod montecarlo;
pub mod cli_io;
pub mod weight;
