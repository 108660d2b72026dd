//! Functional model of a sparsity-aware DNN accelerator whose zero detectors
//! are locked by a hardware key and whose bias adders take a model key.
//!
//! A wrong hardware key never changes what the accelerator computes; it only
//! stops zeros from being discarded, so every feature map is stored densely.
//! A wrong model key leaves the masked bias MSBs corrupted.
//!
//! The crate is `no_std` with `alloc`. File formats, training and the CLI
//! live in the `lockdnn` crate.

#![no_std]

extern crate alloc;

pub mod codec;
pub mod datapath;
pub mod error;
pub mod keying;
pub mod model;
pub mod numeric;
pub mod obfuscator;
pub mod sim;

pub use codec::{CompressedMap, Format};
pub use error::Error;
pub use keying::{Hkey, HkeyConfig, KeyMaterial, KeyParams, Mkey, MkeyConfig, TVector};
pub use model::{forward_reference, Layer, LayerKind, Model, Shape, Tensor};
pub use numeric::{Accumulator, FixedVal, QFormat};
pub use sim::{DetectorMode, Device, RunOptions, RunReport};

pub use num_rational::Ratio;
