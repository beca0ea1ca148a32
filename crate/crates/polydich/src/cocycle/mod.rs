//! Operator sequences, their cocycles, dyadic blocks and adapted norms.

mod norms;
mod sequence;

pub use norms::{adapted_exponential_norms, adapted_polynomial_norms, AdaptedNorms, NormFamily};
pub use sequence::{OperatorSequence, SystemKind, SystemSpec, COND_CEILING, DET_FLOOR};

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Anything that transports states between discrete times.
///
/// Implemented by [`Cocycle`] and by the rate-shifted views used in spectrum
/// scans, so verification code is agnostic to shifts.
pub trait TransitionMap: Send + Sync {
    fn dim(&self) -> usize;
    /// First valid time index.
    fn lo(&self) -> i64;
    /// One past the last valid operator index, for tabulated systems.
    fn hi(&self) -> Option<i64>;
    /// The one-step operator `A_n`.
    fn op(&self, n: i64) -> Result<DMatrix<f64>>;
    /// Its inverse.
    fn op_inv(&self, n: i64) -> Result<DMatrix<f64>>;
    /// Transport from time `n` to time `m` (either order).
    fn transition(&self, m: i64, n: i64) -> Result<DMatrix<f64>>;

    fn apply(&self, m: i64, n: i64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.transition(m, n)? * x)
    }
}

struct CocycleInner {
    seq: OperatorSequence,
    /// Aligned forward segments: (start, k) holds the transport over
    /// `[start, start + 2^k)`.
    fwd: RwLock<HashMap<(i64, u8), Arc<DMatrix<f64>>>>,
    /// Aligned inverse segments, built from per-operator inverses.
    bwd: RwLock<HashMap<(i64, u8), Arc<DMatrix<f64>>>>,
}

/// The two-parameter transport family generated by an operator sequence.
///
/// Partial products are checkpointed on power-of-two aligned segments, so a
/// warm query over a window of length `w` costs `O(log w)` small matrix
/// multiplies and overlapping windows share their work.
#[derive(Clone)]
pub struct Cocycle {
    inner: Arc<CocycleInner>,
}

impl fmt::Debug for Cocycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cocycle").field("seq", &self.inner.seq).finish()
    }
}

impl Cocycle {
    pub fn new(seq: OperatorSequence) -> Self {
        Cocycle {
            inner: Arc::new(CocycleInner {
                seq,
                fwd: RwLock::new(HashMap::new()),
                bwd: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn sequence(&self) -> &OperatorSequence {
        &self.inner.seq
    }

    fn segment(&self, start: i64, k: u8, inverse: bool) -> Result<Arc<DMatrix<f64>>> {
        let cache = if inverse { &self.inner.bwd } else { &self.inner.fwd };
        if let Some(hit) = cache.read().unwrap().get(&(start, k)) {
            return Ok(hit.clone());
        }
        let value = if k == 0 {
            let pair = self.inner.seq.op_with_inverse(start)?;
            Arc::new(if inverse { pair.1.clone() } else { pair.0.clone() })
        } else {
            let half = 1i64 << (k - 1);
            let lowduring = self.segment(start, k - 1, inverse)?;
            let highduring = self.segment(start + half, k - 1, inverse)?;
            // Forward transports compose later-segment-on-the-left; inverse
            // segments compose in increasing index order.
            let prod = if inverse {
                &*lowduring * &*highduring
            } else {
                &*highduring * &*lowduring
            };
            Arc::new(prod)
        };
        let mut w = cache.write().unwrap();
        Ok(w.entry((start, k)).or_insert_with(|| value.clone()).clone())
    }

    /// Splits `[from, to)` into power-of-two aligned segments.
    fn decompose(from: i64, to: i64) -> Vec<(i64, u8)> {
        debug_assert!(from < to);
        let mut out = Vec::new();
        let mut c = from;
        while c < to {
            let align = if c == 0 { 62 } else { c.trailing_zeros().min(62) as u8 };
            let mut k = align;
            while (1i64 << k) > to - c {
                k -= 1;
            }
            out.push((c, k));
            c += 1i64 << k;
        }
        out
    }

    /// Builds the blocks `B_n` transporting original time `2^n -> 2^{n+1}`,
    /// for every block fitting below `horizon` in original time.
    pub fn dyadic_blocks(&self, horizon: i64) -> Result<OperatorSequence> {
        if self.lo() != 1 {
            return Err(Error::Precondition(
                "dyadic blocks need a sequence on polynomial time (origin 1)".into(),
            ));
        }
        if horizon < 2 {
            return Err(Error::BlockHorizon {
                block: 0,
                needed: 2,
                max: horizon,
            });
        }
        if let Some(hi) = self.hi() {
            if horizon > hi {
                return Err(Error::BlockHorizon {
                    block: 0,
                    needed: horizon,
                    max: hi,
                });
            }
        }
        let count = (horizon as f64).log2().floor() as i64;
        let mut blocks = Vec::with_capacity(count as usize);
        for n in 0..count {
            blocks.push(self.transition(1 << (n + 1), 1 << n)?);
        }
        OperatorSequence::table(
            format!("{}~blocks", self.sequence().name()),
            self.dim(),
            0,
            blocks,
        )
    }
}

impl TransitionMap for Cocycle {
    fn dim(&self) -> usize {
        self.inner.seq.dim()
    }

    fn lo(&self) -> i64 {
        self.inner.seq.origin()
    }

    fn hi(&self) -> Option<i64> {
        self.inner.seq.table_end()
    }

    fn op(&self, n: i64) -> Result<DMatrix<f64>> {
        self.inner.seq.op(n)
    }

    fn op_inv(&self, n: i64) -> Result<DMatrix<f64>> {
        self.inner.seq.op_inv(n)
    }

    fn transition(&self, m: i64, n: i64) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if m == n {
            // Exact identity.
            return Ok(DMatrix::identity(d, d));
        }
        let (from, to, inverse) = if m > n { (n, m, false) } else { (m, n, true) };
        // Domain check via the endpoints actually touched.
        let lo = self.lo();
        if from < lo {
            return Err(Error::Domain {
                name: self.sequence().name().to_string(),
                index: from,
                lo,
                hi: self.hi(),
            });
        }
        let mut acc: Option<DMatrix<f64>> = None;
        for (start, k) in Self::decompose(from, to) {
            let seg = self.segment(start, k, inverse)?;
            acc = Some(match acc {
                // Forward: later segments multiply on the left. Inverse:
                // segments multiply on the right in increasing order.
                None => (*seg).clone(),
                Some(p) => {
                    if inverse {
                        p * &*seg
                    } else {
                        &*seg * p
                    }
                }
            });
        }
        Ok(acc.expect("nonempty range"))
    }
}

/// View of a block-time system with every operator scaled by `exp(-mu)`;
/// used to test dichotomy at rate `exp(mu)`.
pub struct ExpShifted<'a, C: TransitionMap + ?Sized> {
    base: &'a C,
    mu: f64,
}

impl<'a, C: TransitionMap + ?Sized> ExpShifted<'a, C> {
    pub fn new(base: &'a C, log_rate: f64) -> Self {
        ExpShifted { base, mu: log_rate }
    }
}

impl<C: TransitionMap + ?Sized> TransitionMap for ExpShifted<'_, C> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn lo(&self) -> i64 {
        self.base.lo()
    }
    fn hi(&self) -> Option<i64> {
        self.base.hi()
    }
    fn op(&self, n: i64) -> Result<DMatrix<f64>> {
        Ok(self.base.op(n)? * (-self.mu).exp())
    }
    fn op_inv(&self, n: i64) -> Result<DMatrix<f64>> {
        Ok(self.base.op_inv(n)? * self.mu.exp())
    }
    fn transition(&self, m: i64, n: i64) -> Result<DMatrix<f64>> {
        let scale = (-self.mu * (m - n) as f64).exp();
        Ok(self.base.transition(m, n)? * scale)
    }
}

/// View of a polynomial-time system with operators scaled by
/// `((n+1)/n)^{-tau}`; the transported product telescopes to `(m/n)^{-tau}`.
pub struct PolyShifted<'a, C: TransitionMap + ?Sized> {
    base: &'a C,
    tau: f64,
}

impl<'a, C: TransitionMap + ?Sized> PolyShifted<'a, C> {
    pub fn new(base: &'a C, tau: f64) -> Self {
        PolyShifted { base, tau }
    }
}

impl<C: TransitionMap + ?Sized> TransitionMap for PolyShifted<'_, C> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn lo(&self) -> i64 {
        self.base.lo()
    }
    fn hi(&self) -> Option<i64> {
        self.base.hi()
    }
    fn op(&self, n: i64) -> Result<DMatrix<f64>> {
        let f = ((n as f64 + 1.0) / n as f64).powf(-self.tau);
        Ok(self.base.op(n)? * f)
    }
    fn op_inv(&self, n: i64) -> Result<DMatrix<f64>> {
        let f = ((n as f64 + 1.0) / n as f64).powf(self.tau);
        Ok(self.base.op_inv(n)? * f)
    }
    fn transition(&self, m: i64, n: i64) -> Result<DMatrix<f64>> {
        let scale = (m as f64 / n as f64).powf(-self.tau);
        Ok(self.base.transition(m, n)? * scale)
    }
}
