//! Simulator for personalized federated learning in which every client
//! adapts a shared model through a private gating layer: per data batch the
//! gate scores parameter blocks, a knapsack keeps the most important blocks
//! under the client's sparsity budget, and only those blocks of the shared
//! model are used, trained and uploaded.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gating;
pub mod knapsack;
pub mod metrics;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
