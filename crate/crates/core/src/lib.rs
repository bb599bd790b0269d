//! Probabilistic trajectory prediction for conventional aircraft and
//! speed-adjustment conflict avoidance for urban air mobility lanes.

pub mod autodiff;
pub mod cnf;
pub mod controller;
pub mod evalkit;
pub mod geo;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod seqenc;
pub mod sim;
pub mod synthetic;
pub mod train;
pub mod trajdata;
