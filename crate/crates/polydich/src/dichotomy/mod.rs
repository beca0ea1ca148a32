//! Invariant projections and dichotomy verification.
//!
//! A dichotomy claim is always checked on a finite window, so the constants
//! reported here are window-relative certificates obtained by least-squares
//! fits, not global proofs.

mod quantities;
mod subspace;
mod verify;

pub use subspace::{
    build_equivariant_projections, estimate_stable_subspace, slope_ordered_directions,
    DEFAULT_SLOPE_MARGIN,
};
pub use verify::{
    check_dyadic_equivalence, fit_growth, verify_exponential_dichotomy,
    verify_polynomial_dichotomy, DichotomySummary, EquivalenceReport, GrowthFit,
};
pub(crate) use verify::{best_candidate_estimate, collect_pair_data, PairData};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cocycle::{NormFamily, TransitionMap};
use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for projection idempotency and equivariance residuals.
pub const PROJECTION_TOL: f64 = 1e-10;

/// Which decay law is being claimed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Power-law rates `(m/n)^{-lambda}` on polynomial time.
    Polynomial,
    /// Exponential rates `e^{-lambda (m-n)}` on block time.
    Exponential,
}

/// How norms enter the defining inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One fixed norm with nonuniform slack `n^eps` (resp. `e^{eps n}`).
    FixedNorm,
    /// A sequence of norms; no nonuniform slack.
    NormFamily,
}

/// A family of projections propagated from an anchor by conjugation, so
/// equivariance holds by construction.
#[derive(Debug, Clone)]
pub struct ProjectionFamily {
    anchor: i64,
    p0: DMatrix<f64>,
    rank: usize,
    stable0: DMatrix<f64>,
    unstable0: DMatrix<f64>,
}

impl ProjectionFamily {
    /// Projection onto `span(stable)` along its orthogonal complement
    /// (the default complement policy).
    pub fn from_stable_basis(anchor: i64, stable: &DMatrix<f64>) -> Result<Self> {
        let d = stable.nrows();
        let cols = stable.ncols();
        let u = linalg::orthonormalize(stable, 1e-10).ok_or(Error::RankDeficient {
            rank: stable.rank(1e-10),
            cols,
            tol: 1e-10,
        })?;
        let p0 = linalg::orthogonal_projector(&u);
        let q0 = DMatrix::<f64>::identity(d, d) - &p0;
        let unstable0 = image_basis(&q0, d - cols);
        Ok(ProjectionFamily {
            anchor,
            p0,
            rank: cols,
            stable0: u,
            unstable0,
        })
    }

    /// Projection onto `span(stable)` along `span(complement)`.
    pub fn from_basis_pair(
        anchor: i64,
        stable: &DMatrix<f64>,
        complement: &DMatrix<f64>,
    ) -> Result<Self> {
        let d = stable.nrows();
        let k = stable.ncols();
        if k + complement.ncols() != d {
            return Err(Error::Config(format!(
                "stable ({k}) and complement ({}) columns must sum to the dimension {d}",
                complement.ncols()
            )));
        }
        let mut t = DMatrix::zeros(d, d);
        t.columns_mut(0, k).copy_from(stable);
        t.columns_mut(k, d - k).copy_from(complement);
        let tinv = t.clone().try_inverse().ok_or(Error::RankDeficient {
            rank: t.rank(1e-10),
            cols: d,
            tol: 1e-10,
        })?;
        let mut diag = DMatrix::zeros(d, d);
        for i in 0..k {
            diag[(i, i)] = 1.0;
        }
        let p0 = &t * diag * &tinv;
        let stable0 = linalg::orthonormalize(stable, 1e-12).ok_or(Error::RankDeficient {
            rank: stable.rank(1e-12),
            cols: k,
            tol: 1e-12,
        })?;
        let unstable0 = if d == k {
            DMatrix::zeros(d, 0)
        } else {
            linalg::orthonormalize(complement, 1e-12).ok_or(Error::RankDeficient {
                rank: complement.rank(1e-12),
                cols: d - k,
                tol: 1e-12,
            })?
        };
        Ok(ProjectionFamily {
            anchor,
            p0,
            rank: k,
            stable0,
            unstable0,
        })
    }

    /// The contractive case `P = Id`.
    pub fn identity(dim: usize, anchor: i64) -> Self {
        ProjectionFamily {
            anchor,
            p0: DMatrix::identity(dim, dim),
            rank: dim,
            stable0: DMatrix::identity(dim, dim),
            unstable0: DMatrix::zeros(dim, 0),
        }
    }

    /// The expansive case `P = 0`.
    pub fn zero(dim: usize, anchor: i64) -> Self {
        ProjectionFamily {
            anchor,
            p0: DMatrix::zeros(dim, dim),
            rank: 0,
            stable0: DMatrix::zeros(dim, 0),
            unstable0: DMatrix::identity(dim, dim),
        }
    }

    pub fn anchor(&self) -> i64 {
        self.anchor
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.p0.nrows()
    }

    pub fn corank(&self) -> usize {
        self.dim() - self.rank
    }

    pub fn anchor_projection(&self) -> &DMatrix<f64> {
        &self.p0
    }

    /// Orthonormal basis of the stable image at the anchor.
    pub fn stable_anchor_basis(&self) -> &DMatrix<f64> {
        &self.stable0
    }

    /// Orthonormal basis of the unstable image at the anchor.
    pub fn unstable_anchor_basis(&self) -> &DMatrix<f64> {
        &self.unstable0
    }

    /// `P_n` by conjugation from the anchor.
    pub fn matrix_at<C: TransitionMap + ?Sized>(&self, a: &C, n: i64) -> Result<DMatrix<f64>> {
        if n == self.anchor {
            return Ok(self.p0.clone());
        }
        Ok(a.transition(n, self.anchor)? * &self.p0 * a.transition(self.anchor, n)?)
    }

    /// `P_n x` without forming the projector.
    pub fn apply<C: TransitionMap + ?Sized>(
        &self,
        a: &C,
        n: i64,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if n == self.anchor {
            return Ok(&self.p0 * x);
        }
        let back = a.transition(self.anchor, n)? * x;
        Ok(a.transition(n, self.anchor)? * (&self.p0 * back))
    }

    /// Orthonormal basis of `Im P_n` (propagated stable space).
    pub fn stable_basis_at<C: TransitionMap + ?Sized>(
        &self,
        a: &C,
        n: i64,
    ) -> Result<DMatrix<f64>> {
        if self.rank == 0 {
            return Ok(DMatrix::zeros(self.dim(), 0));
        }
        let moved = a.transition(n, self.anchor)? * &self.stable0;
        linalg::orthonormalize(&moved, 1e-250).ok_or(Error::RankDeficient {
            rank: moved.rank(1e-250),
            cols: self.rank,
            tol: 1e-250,
        })
    }

    /// Orthonormal basis of `Im Q_n`.
    pub fn unstable_basis_at<C: TransitionMap + ?Sized>(
        &self,
        a: &C,
        n: i64,
    ) -> Result<DMatrix<f64>> {
        if self.corank() == 0 {
            return Ok(DMatrix::zeros(self.dim(), 0));
        }
        let moved = a.transition(n, self.anchor)? * &self.unstable0;
        linalg::orthonormalize(&moved, 1e-250).ok_or(Error::RankDeficient {
            rank: moved.rank(1e-250),
            cols: self.corank(),
            tol: 1e-250,
        })
    }

    /// Checks idempotency and equivariance on the given indices.
    pub fn check<C: TransitionMap + ?Sized>(&self, a: &C, indices: &[i64]) -> Result<()> {
        for &n in indices {
            let pn = self.matrix_at(a, n)?;
            let scale = linalg::op_norm(&pn).max(1.0);
            let idem = linalg::op_norm(&(&pn * &pn - &pn));
            if idem > PROJECTION_TOL * scale {
                return Err(Error::Projection {
                    index: n,
                    what: "idempotency",
                    residual: idem,
                    tol: PROJECTION_TOL * scale,
                });
            }
            let an = a.op(n)?;
            let pn1 = self.matrix_at(a, n + 1)?;
            let lhs = &an * &pn;
            let rhs = &pn1 * &an;
            let scale = linalg::op_norm(&lhs).max(1.0);
            let resid = linalg::op_norm(&(lhs - rhs));
            if resid > PROJECTION_TOL * scale {
                return Err(Error::Projection {
                    index: n,
                    what: "equivariance",
                    residual: resid,
                    tol: PROJECTION_TOL * scale,
                });
            }
        }
        Ok(())
    }
}

fn image_basis(projector: &DMatrix<f64>, expected_rank: usize) -> DMatrix<f64> {
    let d = projector.nrows();
    if expected_rank == 0 {
        return DMatrix::zeros(d, 0);
    }
    // Columns of an idempotent matrix span its image; orthonormalize the
    // dominant ones via SVD.
    let svd = projector.clone().svd(true, false);
    let u = svd.u.unwrap();
    u.columns(0, expected_rank).into_owned()
}

/// Fitted dichotomy constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DichotomyConstants {
    pub k: f64,
    pub lambda: f64,
    pub a: f64,
    pub epsilon: f64,
}

/// Verification outcome. A rejected claim is a result, not an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

/// Worst-case ratio for one defining inequality.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConditionDiagnostic {
    pub worst_ratio: f64,
    pub worst_pair: (i64, i64),
}

/// Per-pair ratios, exported as CSV.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairRatios {
    pub m: i64,
    pub n: i64,
    pub ratio_stable: f64,
    pub ratio_unstable: f64,
    pub ratio_growth_fwd: f64,
    pub ratio_growth_bwd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub stable: Option<ConditionDiagnostic>,
    pub unstable: Option<ConditionDiagnostic>,
    pub growth_fwd: ConditionDiagnostic,
    pub growth_bwd: ConditionDiagnostic,
    /// Raw fitted decay exponent before clamping.
    pub lambda_fit: f64,
    /// True when the constants fitted on the half window agree with the
    /// full-window fit to 10%; reported, never guessed around.
    pub stabilized: bool,
    pub rejection_reason: Option<String>,
    #[serde(skip)]
    pub pair_ratios: Vec<PairRatios>,
}

/// Outcome of a dichotomy verification scan.
#[derive(Debug, Clone)]
pub struct DichotomyEstimate {
    pub flavor: Flavor,
    pub norm_mode: NormMode,
    pub constants: DichotomyConstants,
    pub projections: ProjectionFamily,
    pub verdict: Verdict,
    pub window: i64,
    pub diagnostics: Diagnostics,
}

impl DichotomyEstimate {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}

/// Norm input for verification: either the fixed Euclidean norm with
/// nonuniform constants, or a norm family.
#[derive(Clone)]
pub enum NormChoice<'a> {
    FixedEuclidean,
    Family(&'a NormFamily),
}

impl NormChoice<'_> {
    pub fn mode(&self) -> NormMode {
        match self {
            NormChoice::FixedEuclidean => NormMode::FixedNorm,
            NormChoice::Family(_) => NormMode::NormFamily,
        }
    }
}

/// Knobs for verification scans.
#[derive(Debug, Clone)]
pub struct VerifySettings {
    /// Minimal decay exponent for acceptance.
    pub lambda_min: f64,
    /// Cap on the fitted growth exponent.
    pub a_cap: f64,
    /// Cap on the fitted constant `K`.
    pub k_cap: f64,
    /// Grid step for the nonuniform exponent in fixed-norm mode.
    pub epsilon_step: f64,
    pub epsilon_max: f64,
    /// Extra random probe directions for induced norms of adapted families.
    pub extra_probes: usize,
    pub seed: u64,
    /// Stride through adjacent pairs on large windows.
    pub adjacent_stride: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            lambda_min: 1e-3,
            a_cap: 64.0,
            k_cap: 1e6,
            epsilon_step: 0.05,
            epsilon_max: 1.0,
            extra_probes: 8,
            seed: 0,
            adjacent_stride: 1,
        }
    }
}

/// Deterministic pair subsample: a geometric grid in both the base index and
/// the ratio, plus adjacent pairs.
pub fn scan_pairs(flavor: Flavor, lo: i64, end: i64, adjacent_stride: usize) -> Vec<(i64, i64)> {
    let mut pairs = Vec::new();
    if end <= lo {
        return pairs;
    }
    let stride = adjacent_stride.max(1) as i64;
    let mut n = lo;
    while n < end {
        pairs.push((n + 1, n));
        n += stride;
    }
    if end - lo <= 96 {
        for n in lo..=end {
            for m in n..=end {
                pairs.push((m, n));
            }
        }
    } else {
        let bases = geometric_indices(lo, end);
        match flavor {
            Flavor::Polynomial => {
                let quarter = 2f64.powf(0.25);
                for &n in &bases {
                    let mut ratio = 1.0f64;
                    loop {
                        let m = (n as f64 * ratio).round() as i64;
                        if m > end {
                            break;
                        }
                        pairs.push((m.max(n), n));
                        ratio *= quarter;
                    }
                    pairs.push((end, n));
                }
            }
            Flavor::Exponential => {
                for &n in &bases {
                    let mut gap = 1i64;
                    pairs.push((n, n));
                    while n + gap <= end {
                        pairs.push((n + gap, n));
                        gap *= 2;
                    }
                    pairs.push((end, n));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

fn geometric_indices(lo: i64, end: i64) -> Vec<i64> {
    let mut out = Vec::new();
    let quarter = 2f64.powf(0.25);
    let mut x = lo.max(1) as f64;
    while (x as i64) < end {
        out.push(x.round() as i64);
        x *= quarter;
    }
    out.push(end);
    if lo == 0 {
        out.push(0);
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::{Cocycle, OperatorSequence};
    use approx::assert_relative_eq;

    #[test]
    fn stable_basis_projection_is_diagonal() {
        let p = ProjectionFamily::from_stable_basis(
            1,
            &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(p.rank(), 1);
        let m = p.anchor_projection();
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(m[(1, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_family_is_allowed() {
        let c = Cocycle::new(OperatorSequence::example_4_3());
        let p = ProjectionFamily::zero(2, 1);
        for n in [1, 5, 40] {
            let pn = p.matrix_at(&c, n).unwrap();
            assert_relative_eq!(pn.norm(), 0.0, epsilon = 1e-14);
        }
        p.check(&c, &[1, 2, 3, 17]).unwrap();
    }

    #[test]
    fn diagonal_cocycle_preserves_axis_projection() {
        // Conjugation by diagonal matrices keeps diag(1, 0) fixed; oracle is
        // the explicit conjugation.
        let c = Cocycle::new(OperatorSequence::example_4_3());
        let p = ProjectionFamily::from_stable_basis(
            1,
            &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        for n in [1i64, 2, 9, 100] {
            let pn = p.matrix_at(&c, n).unwrap();
            let oracle = c.transition(n, 1).unwrap()
                * p.anchor_projection()
                * c.transition(1, n).unwrap();
            assert_relative_eq!((pn.clone() - oracle).norm(), 0.0, epsilon = 1e-12);
            assert_relative_eq!(pn[(0, 0)], 1.0, epsilon = 1e-12);
            assert_relative_eq!(pn[(1, 1)], 0.0, epsilon = 1e-12);
        }
        p.check(&c, &(1..20).collect::<Vec<_>>()).unwrap();
    }

    #[test]
    fn oblique_complement_same_image() {
        let stable = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let skew = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let p = ProjectionFamily::from_basis_pair(1, &stable, &skew).unwrap();
        let q = ProjectionFamily::from_stable_basis(1, &stable).unwrap();
        // Same image, different projector.
        assert_eq!(p.rank(), q.rank());
        let pp = p.anchor_projection();
        assert_relative_eq!((pp * pp - pp).norm(), 0.0, epsilon = 1e-12);
        assert!((pp - q.anchor_projection()).norm() > 0.1);
    }

    #[test]
    fn rank_deficient_basis_rejected() {
        let bad = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            ProjectionFamily::from_stable_basis(1, &bad),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn pair_scan_contains_adjacents_and_is_sorted() {
        let pairs = scan_pairs(Flavor::Polynomial, 1, 512, 1);
        assert!(pairs.contains(&(2, 1)));
        assert!(pairs.contains(&(101, 100)));
        assert!(pairs.windows(2).all(|w| w[0] < w[1]));
        assert!(pairs.iter().all(|&(m, n)| n >= 1 && m >= n && m <= 512));
        // Geometric coverage reaches the far corner.
        assert!(pairs.contains(&(512, 1)));
    }
}
