pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod infoloss;
pub mod render;
pub mod train;

pub use error::{Error, Result};
