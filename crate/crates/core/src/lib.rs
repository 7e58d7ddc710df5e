//! Explorable super-resolution engine.
//!
//! The heart of the crate is [`cem::CemOperator`], an exact projection of any
//! high-resolution candidate onto the set of images that reproduce a given
//! low-resolution observation. Around it sit a small reverse-mode tape
//! ([`diffengine`]), a toy control-signal generator ([`generator`]), the
//! training losses ([`losses`]), editing objectives ([`edit`]) and the
//! interactive session logic ([`explorer`]).
//!
//! Image, kernel and projection code is generic over [`Scalar`] (`f32` or
//! `f64`); everything built on the tape uses `f64`. Concrete aliases are
//! exported below.

pub mod cem;
pub mod diffengine;
pub mod edit;
pub mod error;
pub mod explorer;
pub mod generator;
pub mod gradcheck;
pub mod imagekit;
pub mod kernel;
pub mod losses;
pub mod optim;
pub mod oracle;
pub mod training;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image64 = imagekit::Image<f64>;
pub type Image32 = imagekit::Image<f32>;
pub type Kernel64 = kernel::Kernel<f64>;
pub type Kernel32 = kernel::Kernel<f32>;
pub type InvFilter64 = kernel::InvFilter<f64>;
pub type Cem64 = cem::CemOperator<f64>;
pub type Cem32 = cem::CemOperator<f32>;
