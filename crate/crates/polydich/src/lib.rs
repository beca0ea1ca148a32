//! Dichotomy spectra and smooth linearization for one-sided nonautonomous
//! systems with polynomial behaviour.
//!
//! The crate revolves around four pieces of machinery:
//!
//! * [`cocycle`] — operator sequences, their transport cocycles, the dyadic
//!   time compression onto block systems, and adapted norm families;
//! * [`dichotomy`] — invariant projections and verification of polynomial and
//!   exponential dichotomy conditions with fitted constants;
//! * [`spectrum`] — resolvent-grid computation of dichotomy spectra as unions
//!   of closed intervals, plus the spectral gap/band hypotheses;
//! * [`linearize`] / [`continuous`] — construction and verification of the
//!   conjugacies that straighten small perturbations of such systems, in
//!   discrete and continuous time.
//!
//! ```
//! use polydich::cocycle::{Cocycle, OperatorSequence};
//! use polydich::cocycle::TransitionMap;
//!
//! let a = Cocycle::new(OperatorSequence::example_4_3());
//! let t = a.transition(4, 2).unwrap();
//! assert!((t[(0, 0)] - 0.5).abs() < 1e-12);
//! assert!((t[(1, 1)] - 2.0).abs() < 1e-12);
//! ```

pub mod cocycle;
pub mod continuous;
pub mod dichotomy;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod linearize;
pub mod spectrum;

pub mod cli;

pub use error::{Error, Result};
