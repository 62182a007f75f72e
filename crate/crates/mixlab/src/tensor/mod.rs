// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal dense tensor arithmetic with reverse-mode automatic
//! differentiation, sufficient to train 2–6 layer toy models
//! deterministically on a single CPU core.
//!
//! The design is a classic Wengert tape: [`Tape`] records every primitive
//! applied during the forward pass together with the ids of its inputs, and
//! [`Tape::backward`] replays the records in reverse, accumulating
//! gradients into per-node buffers. Tensors are immutable once written
//! during forward; backward mutates only gradient buffers, so concurrent
//! read-only forward passes over shared parameters are safe (each pass owns
//! its own tape).
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32
//! (training) and f64 (oracle and gradient-check suites).

mod adam;
mod check;
mod scalar;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{finite_diff_check, FiniteDiffReport};
pub use scalar::Scalar;
pub use tape::{softmax_rows, Tape, TensorId};
