//! Stochastic wave equations: simulation, Carleman weights, observability and
//! reconstruction of initial data from boundary or interior measurements.

pub mod brownian;
pub mod carleman;
pub mod config;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod io;
pub mod manifest;
pub mod observability;
pub mod operator;
pub mod plotdata;
pub mod reconstruction;
pub mod scalar;
pub mod spde;
pub mod stats;

pub use error::{Error, Result};
