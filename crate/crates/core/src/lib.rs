//! Memory Pool Unit recurrent cells, hybrid-parameter recurrence and
//! stacked sum-pooling readout for classifying 2-D/3-D trajectories.
//!
//! The crate is organised bottom-up:
//!
//! * [`math`]: dense matrices, activations, softmax, the seeded [`math::Rng`].
//! * [`cells`]: one step of GRU, LSTM, MPU and MPU&C, forward and reverse.
//! * [`network`]: deep stacks, the three architectures and readouts, BPTT.
//! * [`training`]: cross-entropy, rmsprop and the epoch loop.
//! * [`data`]: preprocessing, the dataset text format, the synthetic generator.
//! * [`analysis`]: parameter and step accounting, timing, gradient checking.
//! * [`reference`]: double-double arithmetic and an extended-precision forward
//!   pass used as the finite-difference oracle.
//! * [`verify`]: the self-check suites behind `mpu-rnn verify`.
//! * [`checkpoint`] and [`config`]: on-disk model files and run configuration.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod analysis;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod math;
pub mod network;
pub mod reference;
pub mod training;
pub mod verify;

pub use cells::{CellKind, CellParams, CellState};
pub use error::{Error, Result};
pub use math::{Matrix, Rng, Vector};
pub use network::{Arch, NetworkConfig, NetworkParams, Readout, ReadoutMatrices};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cells.md")]
    mod cells {}
    #[doc = include_str!("../../../book/src/hybrid.md")]
    mod hybrid {}
    #[doc = include_str!("../../../book/src/readouts.md")]
    mod readouts {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
    #[doc = include_str!("../../../book/src/counting.md")]
    mod counting {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
