//! Forward-forward training driven by directional-derivative gradient
//! estimates, with dense, convolutional and photonic-mesh backends.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod data;
pub mod error;
pub mod exec;
pub mod goodness;
pub mod inference;
pub mod loss;
pub mod nn;
pub mod photonic;
pub mod prototype;
pub mod rng;
pub mod train;
pub mod zoo;
