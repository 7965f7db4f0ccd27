pub mod curve_tree;
pub mod ep_infer;
pub mod error;
pub mod eval_metrics;
pub mod gp_core;
pub mod io;
pub mod kernels;
pub mod lds;
pub mod par;

pub use error::{Error, Result};
pub mod rng;
pub mod scene;
pub mod sequence;
pub mod topology_search;
