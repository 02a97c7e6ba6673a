pub mod analysis;
pub mod config;
pub mod demos;
pub mod env;
pub mod geom;
pub mod learner;
pub mod nn;
pub mod seed;
pub mod server;
pub mod sim;
