//! Gradient-based shape optimization of 2D fluid tools, through a learned particle simulator.

pub mod autodiff;
pub mod cli;
pub mod design_space;
pub mod error;
pub mod learned_sim;
pub mod optimizers;
pub mod oracle_sim;
pub mod rewards;
pub mod state_graph;
pub mod tasks;

pub use error::{Error, Result};
