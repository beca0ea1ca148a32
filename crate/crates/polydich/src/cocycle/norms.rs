//! Time-indexed norms, including the adapted families built from weighted
//! orbit suprema that turn a nonuniform dichotomy into a uniform one.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::cocycle::{Cocycle, TransitionMap};
use crate::dichotomy::{DichotomyConstants, DichotomyEstimate, Flavor, ProjectionFamily};
use crate::error::{Error, Result};

/// Relative tolerance used to decide that a running supremum is still moving.
const SUP_MOVE_TOL: f64 = 1e-9;

/// A family of norms on state space, one per time index.
#[derive(Clone)]
pub enum NormFamily {
    /// The Euclidean norm at every index.
    Euclidean,
    /// Adapted norms built from a dichotomy certificate.
    Adapted(Arc<AdaptedNorms>),
    /// The family `n -> base at 2^n`, used on block time.
    DyadicSubsample(Arc<NormFamily>),
}

impl fmt::Debug for NormFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormFamily::Euclidean => write!(f, "Euclidean"),
            NormFamily::Adapted(a) => write!(
                f,
                "Adapted({:?}, lambda={}, a={}, horizon={})",
                a.flavor, a.lambda, a.a, a.horizon
            ),
            NormFamily::DyadicSubsample(inner) => write!(f, "DyadicSubsample({inner:?})"),
        }
    }
}

impl NormFamily {
    pub fn eval(&self, n: i64, x: &DVector<f64>) -> Result<f64> {
        match self {
            NormFamily::Euclidean => Ok(x.norm()),
            NormFamily::Adapted(a) => Ok(a.eval_parts(n, x)?.2),
            NormFamily::DyadicSubsample(base) => {
                if !(0..=62).contains(&n) {
                    return Err(Error::Domain {
                        name: "dyadic norm subsample".into(),
                        index: n,
                        lo: 0,
                        hi: Some(63),
                    });
                }
                base.eval(1 << n, x)
            }
        }
    }

    /// `(stable part, unstable part, total)`; the parts vanish for
    /// non-adapted families.
    pub fn eval_parts(&self, n: i64, x: &DVector<f64>) -> Result<(f64, f64, f64)> {
        match self {
            NormFamily::Adapted(a) => a.eval_parts(n, x),
            other => {
                let v = other.eval(n, x)?;
                Ok((0.0, 0.0, v))
            }
        }
    }

    /// The family evaluated along dyadic times, for block systems.
    pub fn dyadic_subsample(&self) -> NormFamily {
        match self {
            NormFamily::Euclidean => NormFamily::Euclidean,
            other => NormFamily::DyadicSubsample(Arc::new(other.clone())),
        }
    }

    /// True when evaluation reduces to the Euclidean norm everywhere.
    pub fn is_euclidean(&self) -> bool {
        match self {
            NormFamily::Euclidean => true,
            NormFamily::Adapted(_) => false,
            NormFamily::DyadicSubsample(inner) => inner.is_euclidean(),
        }
    }

    /// Sandwich certificate `(C, delta)` with
    /// `|x| <= |x|_n <= C n^delta |x|` (polynomial) or
    /// `|x| <= |x|_n <= C e^{delta n} |x|` (exponential).
    pub fn sandwich(&self) -> Option<(f64, f64)> {
        match self {
            NormFamily::Euclidean => Some((1.0, 0.0)),
            NormFamily::Adapted(a) => Some((a.sandwich_c, a.sandwich_delta)),
            NormFamily::DyadicSubsample(inner) => inner.sandwich(),
        }
    }
}

/// Adapted norms: four truncated weighted orbit suprema per evaluation.
pub struct AdaptedNorms {
    flavor: Flavor,
    cocycle: Cocycle,
    projections: ProjectionFamily,
    lambda: f64,
    a: f64,
    horizon: usize,
    pub sandwich_c: f64,
    pub sandwich_delta: f64,
}

impl AdaptedNorms {
    pub fn new(
        flavor: Flavor,
        cocycle: Cocycle,
        projections: ProjectionFamily,
        constants: DichotomyConstants,
        horizon: usize,
    ) -> Result<Self> {
        if projections.dim() != cocycle.dim() {
            return Err(Error::Config(
                "projection dimension does not match the system".into(),
            ));
        }
        if constants.lambda <= 0.0 || constants.a < constants.lambda {
            return Err(Error::Precondition(format!(
                "need a >= lambda > 0, got lambda = {}, a = {}",
                constants.lambda, constants.a
            )));
        }
        let k = constants.k.max(1.0);
        Ok(AdaptedNorms {
            flavor,
            cocycle,
            projections,
            lambda: constants.lambda,
            a: constants.a,
            horizon: horizon.max(4),
            sandwich_c: 2.0 * (k + k * k),
            sandwich_delta: 2.0 * constants.epsilon,
        })
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Log-weight for an orbit sample at offset `m - n = delta`.
    fn log_weight(&self, exponent: f64, n: i64, m: i64) -> f64 {
        match self.flavor {
            Flavor::Polynomial => exponent * ((m as f64).ln() - (n as f64).ln()),
            Flavor::Exponential => exponent * (m - n) as f64,
        }
    }

    /// Weighted sup along the forward orbit of `v` from `n`, offsets
    /// `0..=horizon`. Errors when the sup is still moving in the last
    /// quarter of the truncated range.
    fn forward_sup(&self, n: i64, v: &DVector<f64>, exponent: f64) -> Result<f64> {
        let seq = self.cocycle.sequence();
        let horizon = self.horizon;
        let mut y = v.clone();
        let mut sup = 0.0f64;
        let mut last_move = 0usize;
        for off in 0..=horizon {
            let m = n + off as i64;
            if off > 0 {
                let j = m - 1;
                if let Some(hi) = seq.table_end() {
                    if j >= hi {
                        // Domain-truncated: the sup over the full range was
                        // scanned completely.
                        return Ok(sup);
                    }
                }
                y = seq.op(j)? * y;
            }
            let term = y.norm() * self.log_weight(exponent, n, m).exp();
            if term > sup * (1.0 + SUP_MOVE_TOL) {
                sup = term;
                last_move = off;
            } else if term > sup {
                sup = term;
            }
        }
        if last_move > horizon - horizon / 4 {
            return Err(Error::Horizon {
                index: n,
                horizon,
                last_update: last_move,
            });
        }
        Ok(sup)
    }

    /// Weighted sup along the backward orbit of `v`, offsets `1..=horizon`
    /// (strictly into the past). An empty range evaluates to zero.
    fn backward_sup(&self, n: i64, v: &DVector<f64>, exponent: f64) -> Result<f64> {
        let seq = self.cocycle.sequence();
        let lo = seq.origin();
        let horizon = self.horizon;
        let mut y = v.clone();
        let mut sup = 0.0f64;
        let mut last_move = 0usize;
        let mut truncated_by_horizon = true;
        for off in 1..=horizon {
            let m = n - off as i64;
            if m < lo {
                truncated_by_horizon = false;
                break;
            }
            y = seq.op_inv(m)? * y;
            let term = y.norm() * self.log_weight(exponent, n, m).exp();
            if term > sup * (1.0 + SUP_MOVE_TOL) {
                sup = term;
                last_move = off;
            } else if term > sup {
                sup = term;
            }
        }
        if truncated_by_horizon && last_move > horizon - horizon / 4 {
            return Err(Error::Horizon {
                index: n,
                horizon,
                last_update: last_move,
            });
        }
        Ok(sup)
    }

    /// `(|x|_n^s, |x|_n^u, |x|_n)`.
    pub fn eval_parts(&self, n: i64, x: &DVector<f64>) -> Result<(f64, f64, f64)> {
        let p = self.projections.apply(&self.cocycle, n, x)?;
        let q = x - &p;
        // Stable: decay forward at rate lambda, growth bound backward.
        let s = self.forward_sup(n, &p, self.lambda)? + self.backward_sup(n, &p, self.a)?;
        // Unstable: decay backward at rate lambda, growth bound forward.
        let u = self.backward_sup(n, &q, self.lambda)? + self.forward_sup(n, &q, -self.a)?;
        Ok((s, u, s + u))
    }
}

/// Builds the adapted norm family certified by a polynomial dichotomy
/// estimate. The sandwich constants are `C = 2(K + K^2)`, `delta = 2 eps`.
pub fn adapted_polynomial_norms(
    a: &Cocycle,
    estimate: &DichotomyEstimate,
    horizon: usize,
) -> Result<NormFamily> {
    adapted_norms(Flavor::Polynomial, a, estimate, horizon)
}

/// Exponential analogue of [`adapted_polynomial_norms`] for block time.
pub fn adapted_exponential_norms(
    b: &Cocycle,
    estimate: &DichotomyEstimate,
    horizon: usize,
) -> Result<NormFamily> {
    adapted_norms(Flavor::Exponential, b, estimate, horizon)
}

fn adapted_norms(
    flavor: Flavor,
    cocycle: &Cocycle,
    estimate: &DichotomyEstimate,
    horizon: usize,
) -> Result<NormFamily> {
    if estimate.flavor != flavor {
        return Err(Error::Precondition(format!(
            "estimate flavor {:?} does not match requested {:?}",
            estimate.flavor, flavor
        )));
    }
    if !estimate.accepted() {
        return Err(Error::Precondition(
            "adapted norms need an accepted dichotomy estimate".into(),
        ));
    }
    let fam = AdaptedNorms::new(
        flavor,
        cocycle.clone(),
        estimate.projections.clone(),
        estimate.constants,
        horizon,
    )?;
    Ok(NormFamily::Adapted(Arc::new(fam)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::OperatorSequence;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn example_norms(horizon: usize) -> AdaptedNorms {
        let c = Cocycle::new(OperatorSequence::example_4_3());
        let p = ProjectionFamily::from_stable_basis(
            1,
            &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        AdaptedNorms::new(
            Flavor::Polynomial,
            c,
            p,
            DichotomyConstants {
                k: 1.0,
                lambda: 1.0,
                a: 1.0,
                epsilon: 0.0,
            },
            horizon,
        )
        .unwrap()
    }

    /// Finite-horizon scan oracle for the stable vector of the example: both
    /// weighted sups are constant in m, so the value is exact.
    #[test]
    fn example_stable_vector_norm_is_two() {
        let norms = example_norms(256);
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        for n in [2i64, 3, 10, 100] {
            let (s, u, total) = norms.eval_parts(n, &x).unwrap();
            assert_relative_eq!(s, 2.0, epsilon = 1e-10);
            assert_relative_eq!(u, 0.0, epsilon = 1e-12);
            assert_relative_eq!(total, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn example_first_index_has_empty_backward_sup() {
        let norms = example_norms(256);
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        let (s, _, total) = norms.eval_parts(1, &x).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_vector_has_zero_norm() {
        let norms = example_norms(64);
        let z = DVector::zeros(2);
        assert_eq!(norms.eval_parts(7, &z).unwrap().2, 0.0);
    }

    #[test]
    fn constant_block_system_norm_constant_in_time() {
        // B_n = diag(1/2, 2) with lambda = a = log 2: the finite-horizon scan
        // oracle gives the same value at every index.
        let seq = OperatorSequence::native("blocks", 2, 0, |_| {
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0])
        });
        let c = Cocycle::new(seq);
        let p = ProjectionFamily::from_stable_basis(
            0,
            &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let norms = AdaptedNorms::new(
            Flavor::Exponential,
            c,
            p,
            DichotomyConstants {
                k: 1.0,
                lambda: 2f64.ln(),
                a: 2f64.ln(),
                epsilon: 0.0,
            },
            64,
        )
        .unwrap();
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        let v5 = norms.eval_parts(5, &x).unwrap().2;
        let v11 = norms.eval_parts(11, &x).unwrap().2;
        assert_relative_eq!(v5, v11, epsilon = 1e-10);
        assert_relative_eq!(v5, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn horizon_error_when_sup_keeps_growing() {
        // Expanding scalar system with a stable projection claim: the
        // forward weighted sup grows through the whole horizon.
        let seq = OperatorSequence::native("grow", 1, 1, |_| DMatrix::from_element(1, 1, 2.0));
        let c = Cocycle::new(seq);
        let p = ProjectionFamily::identity(1, 1);
        let norms = AdaptedNorms::new(
            Flavor::Polynomial,
            c,
            p,
            DichotomyConstants {
                k: 1.0,
                lambda: 0.5,
                a: 0.5,
                epsilon: 0.0,
            },
            64,
        )
        .unwrap();
        let x = DVector::from_element(1, 1.0);
        assert!(matches!(
            norms.eval_parts(1, &x),
            Err(Error::Horizon { .. })
        ));
    }

    #[test]
    fn sandwich_constants_follow_the_certificate() {
        let norms = example_norms(32);
        assert_relative_eq!(norms.sandwich_c, 4.0, epsilon = 1e-14);
        assert_eq!(norms.sandwich_delta, 0.0);
    }

    #[test]
    fn dyadic_subsample_of_euclidean_stays_euclidean() {
        let fam = NormFamily::Euclidean.dyadic_subsample();
        assert!(fam.is_euclidean());
        let x = DVector::from_column_slice(&[3.0, 4.0]);
        assert_relative_eq!(fam.eval(5, &x).unwrap(), 5.0, epsilon = 1e-14);
    }
}
