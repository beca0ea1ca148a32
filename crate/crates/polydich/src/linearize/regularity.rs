//! Regularity checks for the glued conjugacies.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cocycle::TransitionMap;
use crate::error::{Error, Result};
use crate::linalg;
use crate::spectrum::SpectralGapReport;

use super::solver::{ConjugacyAtlas, ConjugacyMode};

/// Default floor for the differentiability-at-zero exponent surplus.
pub const VARRHO_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    pub mode: ConjugacyMode,
    /// Max of `|D psi_k| / k^{2 eps}` over the sampled ball (C1 mode).
    pub m_tilde: f64,
    pub m_tilde_inv: f64,
    /// Ball radius before the `k^{-2 eps}` shrink.
    pub rho_tilde: f64,
    /// Regression slope of `log |psi_k(x) - x|` against `log |x|`
    /// (differentiable-at-zero mode); `None` when psi is exactly the
    /// identity on the samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    pub varrho_floor: f64,
    /// Hoelder constant observed at `alpha_used`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holder_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_used: Option<f64>,
    pub identity_exact: bool,
    pub epsilon: f64,
}

/// Verifies the derivative bound (C1 mode) or the differentiability-at-zero
/// and Hoelder estimates (holder_diff mode) on sample times and points.
pub fn verify_regularity(
    atlas: &ConjugacyAtlas,
    gap: &SpectralGapReport,
    mode: ConjugacyMode,
    epsilon: f64,
    rho_tilde: f64,
    n_end: i64,
    seed: u64,
) -> Result<RegularityReport> {
    match mode {
        ConjugacyMode::C1 => {
            if !(gap.sp1_ok && gap.sp2_ok) {
                return Err(Error::Precondition(
                    "C1 regularity needs the spectral gap conditions (sp1 and sp2)".into(),
                ));
            }
        }
        ConjugacyMode::HolderDiff => {
            if !(gap.sp1_ok && gap.sp3_ok) {
                return Err(Error::Precondition(
                    "Hoelder regularity needs the spectral band conditions (sp1 and sp3)".into(),
                ));
            }
        }
    }
    let d = atlas.blocks().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x72656775);
    let times = sample_times(n_end.min(atlas.original_window()));
    match mode {
        ConjugacyMode::C1 => {
            let mut m_tilde = 0.0f64;
            let mut m_tilde_inv = 0.0f64;
            for &k in &times {
                let shrink = (k as f64).powf(2.0 * epsilon);
                let radius = rho_tilde / shrink;
                let mut points = vec![DVector::zeros(d)];
                for _ in 0..3 {
                    points.push(linalg::random_unit_vector(d, &mut rng) * radius);
                }
                for x in &points {
                    let jf = linalg::fd_jacobian(|y| atlas.psi(k, y).unwrap(), x, 1e-6);
                    let jb = linalg::fd_jacobian(|y| atlas.psi_inv(k, y).unwrap(), x, 1e-6);
                    m_tilde = m_tilde.max(linalg::op_norm(&jf) / shrink);
                    m_tilde_inv = m_tilde_inv.max(linalg::op_norm(&jb) / shrink);
                }
            }
            Ok(RegularityReport {
                mode,
                m_tilde,
                m_tilde_inv,
                rho_tilde,
                slope: None,
                varrho_floor: VARRHO_FLOOR,
                holder_l: None,
                alpha_used: None,
                identity_exact: false,
                epsilon,
            })
        }
        ConjugacyMode::HolderDiff => {
            let alpha = gap
                .alpha1_effective
                .ok_or_else(|| Error::Precondition("gap report carries no alpha1".into()))?;
            // Radii chosen inside the asymptotic regime: large enough to
            // clear the orbit-evaluation noise floor, small enough that the
            // whole windowed orbit stays in the contact zone of the maps.
            let radii = [1e-3, 3e-4, 1e-4, 3e-5];
            let dirs: Vec<DVector<f64>> = (0..4)
                .map(|_| linalg::random_unit_vector(d, &mut rng))
                .collect();
            let mut min_slope = f64::INFINITY;
            let mut identity_exact = true;
            let mut holder_l = 0.0f64;
            for &k in &times {
                let shrink = (k as f64).powf(2.0 * epsilon);
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for &r in &radii {
                    let mut worst = 0.0f64;
                    for dir in &dirs {
                        let x = dir * (r / shrink);
                        let moved = atlas.psi(k, &x)?;
                        worst = worst.max((moved - &x).norm());
                    }
                    if worst > 1e-14 {
                        identity_exact = false;
                        xs.push((r / shrink).ln());
                        ys.push((worst / (k as f64).powf(2.0 * epsilon * (1.0 + VARRHO_FLOOR))).ln());
                    }
                }
                if xs.len() >= 2 {
                    let (_, slope) = linalg::line_fit(&xs, &ys);
                    min_slope = min_slope.min(slope);
                }
                // Hoelder ratios at the working exponent.
                for &r in &[1e-2, 1e-3] {
                    for dir in &dirs {
                        let x = dir * (r / shrink);
                        let y = dir * (0.5 * r / shrink);
                        let num = (atlas.psi(k, &x)? - atlas.psi(k, &y)?).norm();
                        let den =
                            (k as f64).powf(2.0 * epsilon * alpha) * (&x - &y).norm().powf(alpha);
                        if den > 0.0 {
                            holder_l = holder_l.max(num / den);
                        }
                    }
                }
            }
            let slope = (!identity_exact).then_some(min_slope);
            if let Some(s) = slope {
                if s < 1.0 + VARRHO_FLOOR {
                    return Err(Error::Regularity {
                        reason: format!(
                            "differentiability-at-zero regression slope {s:.4} below {}",
                            1.0 + VARRHO_FLOOR
                        ),
                    });
                }
            }
            Ok(RegularityReport {
                mode,
                m_tilde: 0.0,
                m_tilde_inv: 0.0,
                rho_tilde,
                slope,
                varrho_floor: VARRHO_FLOOR,
                holder_l: Some(holder_l),
                alpha_used: Some(alpha),
                identity_exact,
                epsilon,
            })
        }
    }
}

fn sample_times(n_end: i64) -> Vec<i64> {
    let mut times = vec![1i64];
    let mut k = 2i64;
    while k <= n_end {
        times.push(k);
        times.push((k + k / 2).min(n_end));
        k *= 2;
    }
    times.sort_unstable();
    times.dedup();
    times
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::{Cocycle, NormFamily, OperatorSequence};
    use crate::dichotomy::{NormChoice, ProjectionFamily, VerifySettings};
    use crate::linearize::perturbation::{
        check_perturbation_bounds, PerturbationFamily, PerturbedCocycle, SamplePlan,
    };
    use crate::linearize::solver::{
        build_block_perturbations, contraction_budget, glue_conjugacy, solve_block_conjugacy,
        SolveOptions,
    };
    use crate::spectrum::{check_gap_band, SpectralInterval, SpectrumResult};

    fn atlas(c: f64, mode: ConjugacyMode) -> (ConjugacyAtlas, SpectralGapReport) {
        let base = Cocycle::new(OperatorSequence::example_4_3());
        let g = PerturbationFamily::example_4_3(c);
        let perturbed = PerturbedCocycle::new(base.clone(), g.clone()).unwrap();
        let cert =
            check_perturbation_bounds(&g, 0.0, &SamplePlan::for_window(1, 1 << 8, 0)).unwrap();
        let blocks = Cocycle::new(base.dyadic_blocks(1 << 8).unwrap());
        let p = ProjectionFamily::from_stable_basis(
            0,
            &nalgebra::DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let est = crate::dichotomy::verify_exponential_dichotomy(
            &blocks,
            &p,
            NormChoice::Family(&NormFamily::Euclidean),
            8,
            &VerifySettings::default(),
        )
        .unwrap();
        let f = build_block_perturbations(
            &perturbed,
            &NormFamily::Euclidean,
            &cert,
            est.constants.k,
            est.constants.a,
            1.0,
            8,
            contraction_budget(est.constants.k, est.constants.lambda),
            0,
        )
        .unwrap();
        let gap = check_gap_band(&SpectrumResult::from_intervals(
            crate::dichotomy::Flavor::Polynomial,
            vec![SpectralInterval::point(-1.0), SpectralInterval::point(1.0)],
        ))
        .unwrap();
        let solved = solve_block_conjugacy(
            &f,
            &est,
            &gap,
            &SolveOptions {
                mode,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        (glue_conjugacy(solved, 0).unwrap(), gap)
    }

    #[test]
    fn identity_conjugacy_has_unit_jacobian() {
        let (a, gap) = atlas(0.0, ConjugacyMode::C1);
        let rep =
            verify_regularity(&a, &gap, ConjugacyMode::C1, 0.0, 0.1, 32, 0).unwrap();
        assert!((rep.m_tilde - 1.0).abs() < 1e-6, "M = {}", rep.m_tilde);
        assert!((rep.m_tilde_inv - 1.0).abs() < 1e-6);
    }

    #[test]
    fn example_jacobians_uniformly_bounded() {
        // With eps = 0 the bound carries no time factor at all.
        let (a, gap) = atlas(1e-3, ConjugacyMode::C1);
        let rep =
            verify_regularity(&a, &gap, ConjugacyMode::C1, 0.0, 0.1, 64, 0).unwrap();
        assert!(rep.m_tilde < 1.5, "M = {}", rep.m_tilde);
        assert!(rep.m_tilde_inv < 1.5);
    }

    #[test]
    fn example_is_differentiable_at_zero_with_quadratic_contact() {
        let (a, gap) = atlas(1e-3, ConjugacyMode::HolderDiff);
        let rep = verify_regularity(&a, &gap, ConjugacyMode::HolderDiff, 0.0, 0.1, 64, 0)
            .unwrap();
        assert!(!rep.identity_exact);
        let slope = rep.slope.unwrap();
        assert!(slope >= 1.05, "slope {slope}");
        // The bump is quadratic at the origin.
        assert!(slope > 1.8, "slope {slope}");
        assert!(rep.holder_l.unwrap() < 10.0);
        assert_eq!(rep.alpha_used, gap.alpha1_effective);
    }

    #[test]
    fn zero_perturbation_reports_identity() {
        let (a, gap) = atlas(0.0, ConjugacyMode::HolderDiff);
        let rep = verify_regularity(&a, &gap, ConjugacyMode::HolderDiff, 0.0, 0.1, 32, 0)
            .unwrap();
        assert!(rep.identity_exact);
        assert!(rep.slope.is_none());
    }
}
