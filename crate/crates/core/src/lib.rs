//! Mix image tiles / unmix feature tiles augmentation, plus a small
//! teacher-student pseudo-labeling detection loop to exercise it.
//!
//! The pieces, bottom up:
//!
//! * [`grid`] builds and inverts the per-tile source masks.
//! * [`augment`] applies them to image and feature batches, and holds the
//!   weak / strong / cutout transforms.
//! * [`teacher`] has the EMA teacher update, its decay ramp, and pseudo-label
//!   filtering.
//! * [`detector`] is a three-layer convolutional backbone with a dense
//!   one-stage head, hand-written backward pass included.
//! * [`trainer`] runs the semi-supervised loop on synthetic shape scenes.
//! * [`metrics`] has IoU, AP50 and the tiles-per-object statistic.
//! * [`cli`] is the `mum` binary's argument parsing and subcommands.

pub mod augment;
pub mod bbox;
pub mod cli;
pub mod detector;
pub mod error;
pub mod grid;
pub mod imageio;
pub mod metrics;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor4};
