//! A desk-scale two-stage object detector with universal scale-aware domain
//! adaptation, trained end-to-end on procedurally generated scene datasets.
//!
//! The crate is organised along the pipeline:
//!
//! - [`autodiff`] — dense-tensor reverse-mode automatic differentiation with
//!   the operation set the detector and discriminators need (including
//!   gradient reversal) and an SGD-with-momentum optimizer.
//! - [`scenegen`] — paired source/target dataset generation with controllable
//!   label-space overlap, rendering style, and object-scale distribution.
//! - [`detector`] — a miniature convolutional backbone, anchor-based proposal
//!   module, and ROI head producing the supervised detection loss.
//! - [`adapt`] — scale bucketing, multi-label domain encoding, the
//!   confidence-threshold filter, and the adversarial alignment losses.
//! - [`evalkit`] — greedy matching, per-class AP / mAP, per-scale mAP,
//!   negative-transfer reporting, and instance feature export.
//! - [`harness`] — experiment configuration, the training loop, baselines and
//!   ablations, checkpoints, and the multi-run suite driver.

pub mod adapt;
pub mod autodiff;
pub mod detector;
pub mod evalkit;
pub mod harness;
pub mod scenegen;
