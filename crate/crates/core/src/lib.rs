pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod local_block;
pub mod moc_attention;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod router;
pub mod run;
pub mod synth;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
