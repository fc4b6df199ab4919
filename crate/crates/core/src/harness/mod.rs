//! Experiment configs, training runs, grid search and figure output.

mod config;
mod data;
mod figures;
mod grid;
mod train;

pub use config::*;
pub use data::*;
pub use figures::*;
pub use grid::*;
pub use train::*;
