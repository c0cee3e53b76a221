//! Automatic construction of a unified label space across several labeled
//! taxonomies.
//!
//! A label graph links every dataset label to a set of unified label nodes
//! through a learnable block-softmax adjacency. Its GraphSAGE output is the
//! unified label embedding used by a segmentation stand-in, and discrete
//! per-dataset mappings are recovered from the adjacency with unbalanced
//! optimal transport plus a greedy coverage repair.

pub mod budget;
pub mod error;
pub mod graph;
pub mod groups;
pub mod io;
pub mod kernels;
pub mod par;
pub mod seg;
pub mod solver;
pub mod synth;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Exec;
