//! Simulation and training of convolutional networks whose synapses are
//! chains of RF spintronic resonators and whose neurons are spin-torque
//! nano-oscillators.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod device;
pub mod hardware;
pub mod layers;
pub mod mnist;
pub mod network;
pub mod rng;
pub mod training;
pub mod verify;
