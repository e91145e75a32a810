//! Compile piecewise-constant functions on R^d into explicit weights of
//! residual networks with a single hidden neuron per block, then evaluate,
//! serialize and verify the result. Also contains a small training harness
//! for comparing narrow fully-connected networks against such ResNets on a
//! toy classification task.

pub mod blockops;
pub mod compiler1d;
pub mod experiment;
pub mod compilernd;
pub mod net;
pub mod pwl;
pub mod serial;
pub mod verify;
