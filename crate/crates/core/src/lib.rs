//! Knowledge-distillation laboratory for dense object detection.
//!
//! A tiny patch-MLP dense detector is trained on seeded synthetic scenes and
//! distilled with a sigmoid-protocol binary classification loss weighted by
//! the teacher/student score gap, plus an IoU localization loss between the
//! boxes the two models decode at every anchor.
//!
//! Module map:
//!
//! - [`numerics`]: dense grids, stable scalar primitives, finite differences.
//! - [`protocols`]: sigmoid/softmax score protocols and the shift demo.
//! - [`geometry`]: anchor grids, ltrb-exp box decoding, IoU and its gradient.
//! - [`losses`]: supervised, KL, binary distillation and IoU distillation losses.
//! - [`detector`]: the patch-MLP detector with manual backprop and SGD.
//! - [`synthdata`]: synthetic scenes, label assignment, dataset I/O.
//! - [`evaluation`]: post-processing, COCO-style AP, score gaps, error analysis.
//! - [`harness`]: experiment configuration, training loops and CLI commands.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod parallel;
pub mod protocols;
pub mod synthdata;

pub use error::{Error, Result};
