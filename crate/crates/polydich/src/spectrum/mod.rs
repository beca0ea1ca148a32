//! Dichotomy spectra as unions of closed intervals, and the spectral
//! gap/band hypotheses of the linearization theorems.

mod scan;

pub use scan::{scan_lambda_floor, ResolventScan, ScanSample, SCAN_LAMBDA_FACTOR};

// The continuous-time spectrum lives with the integration machinery but
// belongs to this module's surface.
pub use crate::continuous::continuous_spectrum;

use serde::{Deserialize, Serialize};

use crate::cocycle::{Cocycle, NormFamily, PolyShifted, TransitionMap};
use crate::dichotomy::{
    self, DichotomyEstimate, Flavor, VerifySettings,
};
use crate::error::{Error, Result};

/// A closed spectral interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralInterval {
    pub lo: f64,
    pub hi: f64,
}

impl SpectralInterval {
    pub fn point(v: f64) -> Self {
        SpectralInterval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// One tested grid rate with its verdict.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResolventSample {
    /// Rate (exponential flavor) or exponent (polynomial flavor).
    pub value: f64,
    pub accepted: bool,
    pub lambda_fit: f64,
    pub k_fit: f64,
}

/// A dichotomy spectrum as an ordered union of disjoint closed intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub flavor: Flavor,
    /// Exponential flavor: intervals of rates (> 0). Polynomial flavor:
    /// intervals of exponents (any sign).
    pub intervals: Vec<SpectralInterval>,
    /// Grid step used, in the flavor's own units.
    pub resolution: f64,
    /// Search bounds derived from the growth constants, same units as the
    /// intervals.
    pub search_bounds: (f64, f64),
    /// True when two detected intervals had to be merged because the gap
    /// between them fell below the grid resolution.
    pub merged_subresolution: bool,
    pub resolvent_samples: Vec<ResolventSample>,
}

impl SpectrumResult {
    /// Assembles a result from known intervals (fixtures, tests); the sample
    /// list stays empty and the resolution is recorded as zero.
    pub fn from_intervals(flavor: Flavor, intervals: Vec<SpectralInterval>) -> Self {
        let lo = intervals.first().map_or(0.0, |i| i.lo);
        let hi = intervals.last().map_or(0.0, |i| i.hi);
        SpectrumResult {
            flavor,
            intervals,
            resolution: 0.0,
            search_bounds: (lo, hi),
            merged_subresolution: false,
            resolvent_samples: Vec::new(),
        }
    }
}

/// Detected rejected runs on a log grid, refined by bisection.
struct LogScan<'a> {
    scan: &'a ResolventScan,
    grid_step: f64,
}

impl LogScan<'_> {
    /// Returns intervals in log units together with the per-point samples.
    fn run(&self, lo: f64, hi: f64) -> (Vec<SpectralInterval>, Vec<(f64, ScanSample)>, bool) {
        let steps = ((hi - lo) / self.grid_step).ceil() as usize;
        let mut samples = Vec::with_capacity(steps + 1);
        for i in 0..=steps {
            let mu = lo + i as f64 * self.grid_step;
            samples.push((mu, self.scan.sample(mu)));
        }
        let mut raw: Vec<(usize, usize)> = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, (_, s)) in samples.iter().enumerate() {
            if !s.accepted {
                run_start.get_or_insert(i);
            } else if let Some(start) = run_start.take() {
                raw.push((start, i - 1));
            }
        }
        if let Some(start) = run_start {
            raw.push((start, samples.len() - 1));
        }
        let tol = self.grid_step / 8.0;
        let mut intervals: Vec<SpectralInterval> = Vec::new();
        let mut merged = false;
        for (s, e) in raw {
            let left = if s == 0 {
                samples[0].0
            } else {
                self.bisect(samples[s - 1].0, samples[s].0, tol, true)
            };
            let right = if e + 1 == samples.len() {
                samples[e].0
            } else {
                self.bisect(samples[e].0, samples[e + 1].0, tol, false)
            };
            if let Some(last) = intervals.last_mut() {
                if left <= last.hi {
                    // Sub-resolution gap: report as one interval, flagged.
                    last.hi = right;
                    merged = true;
                    continue;
                }
            }
            intervals.push(SpectralInterval { lo: left, hi: right });
        }
        (intervals, samples, merged)
    }

    /// Bracket endpoints: for `left = true` the bracket is
    /// (accepted, rejected), otherwise (rejected, accepted). Returns the
    /// midpoint of the final bracket.
    fn bisect(&self, a: f64, b: f64, tol: f64, left: bool) -> f64 {
        let mut lo = a;
        let mut hi = b;
        let mut guard = 0;
        while hi - lo > tol && guard < 64 {
            let mid = 0.5 * (lo + hi);
            let rejected = !self.scan.accepted(mid);
            if left {
                if rejected {
                    hi = mid;
                } else {
                    lo = mid;
                }
            } else if rejected {
                lo = mid;
            } else {
                hi = mid;
            }
            guard += 1;
        }
        0.5 * (lo + hi)
    }
}

fn check_interval_count(count: usize, dim: usize) -> Result<()> {
    if count > dim {
        return Err(Error::StructureViolation {
            found: count,
            dim,
        });
    }
    Ok(())
}

/// Core scan in log-rate units shared by both spectra.
fn scan_log_spectrum(
    flavor: Flavor,
    system: &Cocycle,
    norms: &NormFamily,
    grid_step_log: f64,
    window: i64,
    settings: &VerifySettings,
) -> Result<(Vec<SpectralInterval>, Vec<(f64, ScanSample)>, bool, (f64, f64))> {
    let growth = dichotomy::fit_growth(flavor, system, norms, window, settings)?;
    let bound = growth.a + 1.0;
    let mut scan_settings = settings.clone();
    scan_settings.lambda_min = scan_lambda_floor(grid_step_log);
    let scan = ResolventScan::new(flavor, system, norms, window, &scan_settings)?;
    let log_scan = LogScan {
        scan: &scan,
        grid_step: grid_step_log,
    };
    let (intervals, samples, merged) = log_scan.run(-bound, bound);
    check_interval_count(intervals.len(), system.dim())?;
    Ok((intervals, samples, merged, (-bound, bound)))
}

/// Computes the exponential dichotomy spectrum of a block-time system as a
/// union of closed intervals of rates.
pub fn exponential_spectrum(
    b: &Cocycle,
    norms: &NormFamily,
    grid_step: f64,
    window: i64,
    settings: &VerifySettings,
) -> Result<SpectrumResult> {
    if grid_step <= 0.0 || grid_step > 0.01 {
        return Err(Error::Precondition(format!(
            "grid step must be in (0, 0.01] log-rate units, got {grid_step}"
        )));
    }
    let window = match b.hi() {
        Some(hi) => window.min(hi - 1),
        None => window,
    };
    let (log_intervals, log_samples, merged, (lo, hi)) =
        scan_log_spectrum(Flavor::Exponential, b, norms, grid_step, window, settings)?;
    Ok(SpectrumResult {
        flavor: Flavor::Exponential,
        intervals: log_intervals
            .iter()
            .map(|i| SpectralInterval {
                lo: i.lo.exp(),
                hi: i.hi.exp(),
            })
            .collect(),
        resolution: grid_step,
        search_bounds: (lo.exp(), hi.exp()),
        merged_subresolution: merged,
        resolvent_samples: log_samples
            .iter()
            .map(|(mu, s)| ResolventSample {
                value: mu.exp(),
                accepted: s.accepted,
                lambda_fit: s.lambda_fit,
                k_fit: s.k_fit,
            })
            .collect(),
    })
}

/// Computes the polynomial dichotomy spectrum through the dyadic route:
/// block compression, exponential scan, then mapping rates `r` to exponents
/// `log2 r`.
pub fn polynomial_spectrum(
    a: &Cocycle,
    norms: &NormFamily,
    grid_step: f64,
    window: i64,
    settings: &VerifySettings,
) -> Result<SpectrumResult> {
    if grid_step <= 0.0 || grid_step > 0.01 {
        return Err(Error::Precondition(format!(
            "grid step must be in (0, 0.01] exponent units, got {grid_step}"
        )));
    }
    // Refuse systems whose growth cannot be certified on the original scale.
    dichotomy::fit_growth(Flavor::Polynomial, a, norms, window, settings)?;
    let blocks = Cocycle::new(a.dyadic_blocks(window)?);
    let block_norms = norms.dyadic_subsample();
    let block_window = blocks.hi().expect("blocks are tabulated") - 1;
    let ln2 = std::f64::consts::LN_2;
    let (log_intervals, log_samples, merged, (lo, hi)) = scan_log_spectrum(
        Flavor::Exponential,
        &blocks,
        &block_norms,
        grid_step * ln2,
        block_window,
        settings,
    )?;
    Ok(SpectrumResult {
        flavor: Flavor::Polynomial,
        intervals: log_intervals
            .iter()
            .map(|i| SpectralInterval {
                lo: i.lo / ln2,
                hi: i.hi / ln2,
            })
            .collect(),
        resolution: grid_step,
        search_bounds: (lo / ln2, hi / ln2),
        merged_subresolution: merged,
        resolvent_samples: log_samples
            .iter()
            .map(|(mu, s)| ResolventSample {
                value: mu / ln2,
                accepted: s.accepted,
                lambda_fit: s.lambda_fit,
                k_fit: s.k_fit,
            })
            .collect(),
    })
}

/// Tests one exponent directly on the original time scale by shifting the
/// sequence itself; the independent cross-check of the dyadic route.
pub fn direct_polynomial_resolvent_test(
    a: &Cocycle,
    norms: &NormFamily,
    tau: f64,
    window: i64,
    settings: &VerifySettings,
) -> Result<DichotomyEstimate> {
    let shifted = PolyShifted::new(a, tau);
    dichotomy::best_candidate_estimate(
        Flavor::Polynomial,
        &shifted,
        dichotomy::NormChoice::Family(norms),
        window,
        settings,
    )
}

/// Batched form of [`direct_polynomial_resolvent_test`]: one measurement
/// pass, then constant-time verdicts per exponent.
pub fn direct_polynomial_scan(
    a: &Cocycle,
    norms: &NormFamily,
    grid_step: f64,
    window: i64,
    settings: &VerifySettings,
) -> Result<ResolventScan> {
    let mut scan_settings = settings.clone();
    scan_settings.lambda_min = scan_lambda_floor(grid_step);
    ResolventScan::new(Flavor::Polynomial, a, norms, window, &scan_settings)
}

/// Spectral gap and band conditions evaluated on the exponential form of a
/// spectrum (polynomial intervals are mapped through `2^x` first).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralGapReport {
    /// Number of intervals strictly below the reference rate 1.
    pub k: usize,
    /// Total number of intervals.
    pub r: usize,
    pub sp1_ok: bool,
    pub sp2_ok: bool,
    pub sp3_ok: bool,
    /// Upper bound for admissible Hoelder exponents; present when sp1 holds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha1_bound: Option<f64>,
    /// `min(0.95 * alpha1_bound, 1)`; the working exponent for Hoelder checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha1_effective: Option<f64>,
    pub contractive_side_empty: bool,
    pub expansive_side_empty: bool,
}

/// Evaluates the gap/band inequalities between interval endpoints.
pub fn check_gap_band(spectrum: &SpectrumResult) -> Result<SpectralGapReport> {
    if spectrum.intervals.is_empty() {
        return Err(Error::Precondition("spectrum has no intervals".into()));
    }
    // The hypotheses are stated on the endpoints of the exponential form.
    let exp_intervals: Vec<SpectralInterval> = match spectrum.flavor {
        Flavor::Exponential => spectrum.intervals.clone(),
        Flavor::Polynomial => spectrum
            .intervals
            .iter()
            .map(|i| SpectralInterval {
                lo: 2f64.powf(i.lo),
                hi: 2f64.powf(i.hi),
            })
            .collect(),
    };
    for i in &exp_intervals {
        if i.contains(1.0) {
            return Err(Error::NoHyperbolicity {
                reference: 1.0,
                lo: i.lo,
                hi: i.hi,
            });
        }
    }
    let r = exp_intervals.len();
    let k = exp_intervals.iter().filter(|i| i.hi < 1.0).count();
    let sp1_ok = k >= 1 && k < r;
    let (mut sp2_ok, mut sp3_ok) = (false, false);
    let mut alpha1_bound = None;
    let mut alpha1_effective = None;
    if sp1_ok {
        let b_k = exp_intervals[k - 1].hi;
        let a_next = exp_intervals[k].lo;
        let a_1 = exp_intervals[0].lo;
        let b_r = exp_intervals[r - 1].hi;
        let bands_low = exp_intervals[..k]
            .iter()
            .all(|i| i.hi / i.lo < 1.0 / b_k);
        let bands_high = exp_intervals[k..].iter().all(|i| i.hi / i.lo < a_next);
        sp3_ok = bands_low && bands_high;
        sp2_ok = sp3_ok && a_next / b_k > b_r.max(1.0 / a_1);
        let gap = a_next.ln() - b_k.ln();
        let bound = (gap / b_r.ln()).min(gap / (1.0 / a_1).ln());
        alpha1_bound = Some(bound);
        alpha1_effective = Some((0.95 * bound).min(1.0));
    }
    Ok(SpectralGapReport {
        k,
        r,
        sp1_ok,
        sp2_ok,
        sp3_ok,
        alpha1_bound,
        alpha1_effective,
        contractive_side_empty: k == 0,
        expansive_side_empty: k == r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::OperatorSequence;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn const_blocks(entries: &[f64]) -> Cocycle {
        let d = entries.len();
        let vals = entries.to_vec();
        Cocycle::new(OperatorSequence::native("const", d, 0, move |_| {
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&vals))
        }))
    }

    #[test]
    fn constant_block_spectrum_is_the_moduli_set() {
        // Oracle: the spectrum of a constant diagonal system is the set of
        // absolute values of its diagonal entries, one degenerate interval
        // each (scalar decay test per component).
        let b = const_blocks(&[0.5, 2.0]);
        let s = exponential_spectrum(&b, &NormFamily::Euclidean, 0.005, 32, &VerifySettings::default())
            .unwrap();
        assert_eq!(s.intervals.len(), 2);
        assert!(s.intervals[0].width() <= 2.0 * 0.005 * 0.5 + 1e-9);
        assert_relative_eq!(s.intervals[0].center(), 0.5, epsilon = 0.006);
        assert_relative_eq!(s.intervals[1].center(), 2.0, epsilon = 0.02);
    }

    #[test]
    fn identity_scalar_block_spectrum_is_one() {
        let b = const_blocks(&[1.0]);
        let s = exponential_spectrum(&b, &NormFamily::Euclidean, 0.005, 32, &VerifySettings::default())
            .unwrap();
        assert_eq!(s.intervals.len(), 1);
        assert!(s.intervals[0].contains(1.0));
        assert!(s.intervals[0].width() < 0.02);
    }

    #[test]
    fn example_polynomial_spectrum_is_plus_minus_one() {
        let a = Cocycle::new(OperatorSequence::example_4_3());
        let s = polynomial_spectrum(
            &a,
            &NormFamily::Euclidean,
            1e-3,
            1 << 12,
            &VerifySettings::default(),
        )
        .unwrap();
        assert_eq!(s.intervals.len(), 2);
        for (interval, center) in s.intervals.iter().zip([-1.0, 1.0]) {
            assert!(interval.width() <= 2e-3 + 1e-12, "width {}", interval.width());
            assert!(
                (interval.center() - center).abs() <= 1e-3,
                "center {} vs {center}",
                interval.center()
            );
        }
        // Dyadic route equals the direct route on the grid (Corollary-style
        // cross-check).
        let direct = direct_polynomial_scan(
            &a,
            &NormFamily::Euclidean,
            1e-3,
            1 << 12,
            &VerifySettings {
                adjacent_stride: 16,
                ..VerifySettings::default()
            },
        )
        .unwrap();
        for sample in s.resolvent_samples.iter().step_by(97) {
            assert_eq!(
                sample.accepted,
                direct.accepted(sample.value),
                "tau = {}",
                sample.value
            );
        }
    }

    #[test]
    fn scalar_identity_polynomial_spectrum_is_zero() {
        let a = Cocycle::new(OperatorSequence::native("id1", 1, 1, |_| {
            DMatrix::from_element(1, 1, 1.0)
        }));
        let s = polynomial_spectrum(
            &a,
            &NormFamily::Euclidean,
            5e-3,
            1 << 10,
            &VerifySettings::default(),
        )
        .unwrap();
        assert_eq!(s.intervals.len(), 1);
        assert!(s.intervals[0].contains(0.0) || s.intervals[0].center().abs() < 5e-3);
    }

    #[test]
    fn power_law_diagonal_spectrum() {
        let a = Cocycle::new(OperatorSequence::native("pl", 2, 1, |n| {
            let n = n as f64;
            let r = (n + 1.0) / n;
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[
                r.powf(-0.8),
                r.powf(1.3),
            ]))
        }));
        let s = polynomial_spectrum(
            &a,
            &NormFamily::Euclidean,
            5e-3,
            1 << 10,
            &VerifySettings::default(),
        )
        .unwrap();
        assert_eq!(s.intervals.len(), 2);
        assert!((s.intervals[0].center() + 0.8).abs() < 5e-3);
        assert!((s.intervals[1].center() - 1.3).abs() < 5e-3);
    }

    #[test]
    fn direct_resolvent_test_matches_paper_points() {
        let a = Cocycle::new(OperatorSequence::example_4_3());
        let settings = VerifySettings::default();
        let at = |tau: f64| {
            direct_polynomial_resolvent_test(&a, &NormFamily::Euclidean, tau, 1 << 10, &settings)
                .unwrap()
                .accepted()
        };
        assert!(at(0.0));
        assert!(!at(1.0));
        assert!(!at(-1.0));
    }

    #[test]
    fn gap_band_on_the_example_fixture() {
        let s = SpectrumResult::from_intervals(
            Flavor::Polynomial,
            vec![SpectralInterval::point(-1.0), SpectralInterval::point(1.0)],
        );
        let g = check_gap_band(&s).unwrap();
        assert_eq!(g.k, 1);
        assert!(g.sp1_ok && g.sp2_ok && g.sp3_ok);
        assert_relative_eq!(g.alpha1_bound.unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(g.alpha1_effective.unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gap_band_purely_expansive() {
        let s = SpectrumResult::from_intervals(
            Flavor::Exponential,
            vec![SpectralInterval::point(2.0)],
        );
        let g = check_gap_band(&s).unwrap();
        assert_eq!(g.k, 0);
        assert!(!g.sp1_ok);
        assert!(g.contractive_side_empty);
        assert!(!g.expansive_side_empty);
    }

    #[test]
    fn gap_band_rejects_spectrum_through_one() {
        let s = SpectrumResult::from_intervals(
            Flavor::Exponential,
            vec![SpectralInterval { lo: 0.9, hi: 1.1 }],
        );
        assert!(matches!(
            check_gap_band(&s),
            Err(Error::NoHyperbolicity { .. })
        ));
    }
}
