//! Sub-pixel localization of Bragg diffraction peaks in area-detector frames.
//!
//! Two localizers share one pipeline (threshold, connected components,
//! single-maximum filtering, odd-sized crops):
//!
//! * [`voigtfit`]: Levenberg-Marquardt fit of a 2D pseudo-Voigt profile.
//! * [`braggnn`]: a small convolutional regression network with a non-local
//!   attention block, trained by [`trainer`] on synthetic frames from [`synth`].
//!
//! [`evaluator`] compares both (and the integer-maximum baseline) against
//! ground truth, runs the ablations, and times the localization step.

pub mod braggnn;
pub mod cli;
pub mod config;
pub mod evaluator;
pub mod frame_io;
mod linalg;
pub mod segment;
pub mod synth;
pub mod trainer;
pub mod voigtfit;
