//! Self-supervised dialogue quality evaluation.
//!
//! The pipeline has four stages:
//!
//! 1. [`perturb`] turns a plain dialogue [`corpus`] into a graded dataset by
//!    replacing `i` of the `n` responder turns with turns drawn from other
//!    dialogues, labelling each variant with the reference score `(n - i) / n`.
//! 2. [`scorer`] maps a dialogue to a score in `(0, 1)` from a word-level and a
//!    turn-level representation produced by a small self-attention encoder.
//! 3. [`trainer`] fits the scorer with the two-stage schedule built on the
//!    multi-level ranking losses of [`mlcl`]: a coarse stage on the ranking loss
//!    alone, then a fine stage that adds a dropout-consistency term.
//! 4. [`evalkit`] measures replacement-level ranking accuracy and correlation
//!    with human ratings.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod kv;
pub mod mlcl;
mod par;
pub mod perturb;
pub mod scorer;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
