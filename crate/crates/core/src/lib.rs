//! Volumetric airway segmentation with a 3D Unet.
//!
//! The crate covers the whole pipeline: volume I/O and lung-centred cropping,
//! axial sliding windows with tapered reconstruction, rigid and elastic
//! augmentation, a small autodiff engine, the Unet itself, lung-masked losses,
//! training with early stopping, and FROC/Dice evaluation. Synthetic
//! branching-tube phantoms make the pipeline testable without clinical data.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod par;
pub mod patching;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod unet;
pub mod volume_io;

pub use error::{Error, Result};
