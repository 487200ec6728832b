//! Simultaneous training of an MLP and its regularization hyperparameters.
//!
//! Elementary parameters descend the regularized training cost `C̃1` on the
//! training set T1. Every `K` steps the continuous regularization
//! hyperparameters (additive Gaussian noise levels per layer, L2 strengths
//! per weight matrix) move along the one-step hypergradient
//! `G = (∇θ C2)ᵀ ∂(∇θ C̃1)/∂λ`, where `C2` is the unregularized cost on a
//! held-out set T2.
//!
//! The L2 part of `G` is closed-form. The noise part comes from
//! forward-over-reverse tangent passes through the recorded forward and
//! backward computation, including batch-norm statistics. Both are checked
//! against central finite differences with replayed noise.
//!
//! The crate is `no_std` + `alloc`: no file access, no clocks, no threads.
//! Wall-clock measurement is injected through [`trainer::Clock`].

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod hypergrad;
pub mod network;
pub mod optim;
pub mod regularization;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use hypergrad::{HyperGradient, NoiseRoute};
pub use network::{BatchNormState, ForwardTrace, InitScheme, LossHead, Mode, ModelParams};
pub use regularization::{Families, HyperIndex, HyperParams, Layout};
pub use rng::RngStream;
pub use tensor::Tensor;
