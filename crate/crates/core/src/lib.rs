//! Source-free online test-time adaptation for a small two-stage
//! surface-defect detector.
//!
//! The crate is organised bottom-up: [`tensor`] provides the arithmetic and
//! reverse-mode tape, [`net`] the detector, [`augment`], [`synth`] and
//! [`pretrain`] the data side, [`tta`] the adaptation loop, [`metrics`] the
//! evaluation, and [`io`] the on-disk formats.

// `!(x > 0.0)` style checks deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pretrain;
pub mod synth;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
