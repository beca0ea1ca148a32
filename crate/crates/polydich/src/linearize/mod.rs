//! Construction and verification of the linearizing conjugacies for
//! perturbed one-sided systems with polynomial behaviour.

mod perturbation;
mod regularity;
mod solver;

pub use perturbation::{
    check_perturbation_bounds, gronwall_bound_check, EnvelopeConstants, EnvelopeReport,
    PerturbationCertificate, PerturbationFamily, PerturbationKind, PerturbationSpec,
    PerturbedCocycle, SamplePlan, ORBIT_GUARD,
};
pub use regularity::{verify_regularity, RegularityReport, VARRHO_FLOOR};
pub use solver::{
    build_block_perturbations, contraction_budget, glue_conjugacy, solve_block_conjugacy,
    verify_conjugacy, BlockPerturbation, ConjugacyAtlas, ConjugacyMode, ConjugacyReport,
    SolveOptions, SolverDiagnostics, CONTRACTION_BUDGET,
};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cocycle::{Cocycle, NormFamily, TransitionMap};
use crate::dichotomy::{
    best_candidate_estimate, DichotomyEstimate, Flavor, NormChoice, VerifySettings,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::spectrum::{check_gap_band, polynomial_spectrum, SpectralGapReport, SpectrumResult};

#[derive(Debug, Clone)]
pub struct LinearizeOptions {
    /// Original-time window; the block window is its base-2 logarithm.
    pub window: i64,
    pub grid_step: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub r_grid: f64,
    pub seed: u64,
    /// Radius of the residual verification grid.
    pub verify_radius: f64,
    /// Residuals are checked for original times up to here.
    pub verify_horizon: i64,
    pub envelope_samples: usize,
    pub settings: VerifySettings,
}

impl Default for LinearizeOptions {
    fn default() -> Self {
        LinearizeOptions {
            window: 1 << 12,
            grid_step: 1e-3,
            tol: 1e-8,
            max_iter: 64,
            r_grid: 1.0,
            seed: 0,
            verify_radius: 0.1,
            verify_horizon: 64,
            envelope_samples: 2000,
            settings: VerifySettings::default(),
        }
    }
}

/// Everything the full linearization pipeline produces.
pub struct LinearizeOutcome {
    pub poly_estimate: DichotomyEstimate,
    pub block_estimate: DichotomyEstimate,
    pub spectrum: SpectrumResult,
    pub gap: SpectralGapReport,
    pub certificate: PerturbationCertificate,
    pub envelope: EnvelopeReport,
    pub eta_formula: f64,
    pub eta_sampled: f64,
    pub atlas: ConjugacyAtlas,
    pub conjugacy: ConjugacyReport,
    pub regularity_c1: Option<RegularityReport>,
    pub regularity_holder: Option<RegularityReport>,
}

/// Certify the perturbation, compress to blocks, solve the block
/// conjugacies, glue, and verify residuals and regularity.
pub fn linearize_pipeline(
    a: &Cocycle,
    g: &PerturbationFamily,
    norms: &NormFamily,
    opts: &LinearizeOptions,
) -> Result<LinearizeOutcome> {
    // Nonuniform polynomial dichotomy of the linear part, fixed-norm mode;
    // its constants feed every later envelope.
    let poly_estimate = best_candidate_estimate(
        Flavor::Polynomial,
        a,
        NormChoice::FixedEuclidean,
        opts.window,
        &opts.settings,
    )?;
    if !poly_estimate.accepted() {
        return Err(Error::Precondition(
            "the linear part does not admit a polynomial dichotomy on the window".into(),
        ));
    }
    let spectrum = polynomial_spectrum(a, norms, opts.grid_step, opts.window, &opts.settings)?;
    let gap = check_gap_band(&spectrum)?;
    if !gap.sp1_ok {
        return Err(Error::Precondition(
            "spectral gap condition sp1 fails; no hyperbolic splitting around rate 1".into(),
        ));
    }

    let epsilon = poly_estimate.constants.epsilon;
    let plan = SamplePlan::for_window(a.lo(), opts.window, opts.seed);
    let certificate = check_perturbation_bounds(g, epsilon, &plan)?;
    let perturbed = PerturbedCocycle::new(a.clone(), g.clone())?;
    let (c_sandwich, _) = norms.sandwich().unwrap_or((1.0, 0.0));
    let envelope = gronwall_bound_check(
        &perturbed,
        norms,
        &EnvelopeConstants {
            k: poly_estimate.constants.k,
            a: poly_estimate.constants.a,
            c_sandwich,
            c: certificate.c,
            l: certificate.l,
            epsilon,
        },
        opts.window,
        opts.envelope_samples,
        opts.seed,
    )?;

    let window_blocks = (opts.window as u64).ilog2() as i64;
    let blocks = Cocycle::new(a.dyadic_blocks(opts.window)?);
    let block_norms = norms.dyadic_subsample();
    let block_estimate = best_candidate_estimate(
        Flavor::Exponential,
        &blocks,
        NormChoice::Family(&block_norms),
        window_blocks,
        &opts.settings,
    )?;
    if !block_estimate.accepted() {
        return Err(Error::Precondition(
            "the dyadic blocks do not admit an exponential dichotomy".into(),
        ));
    }

    let budget = contraction_budget(
        block_estimate.constants.k,
        block_estimate.constants.lambda,
    );
    let f = build_block_perturbations(
        &perturbed,
        &block_norms,
        &certificate,
        poly_estimate.constants.k,
        poly_estimate.constants.a,
        c_sandwich,
        window_blocks,
        budget,
        opts.seed,
    )?;

    let mode = if gap.sp2_ok {
        ConjugacyMode::C1
    } else {
        ConjugacyMode::HolderDiff
    };
    let solve_opts = SolveOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        r_grid: opts.r_grid,
        seed: opts.seed,
        mode,
    };
    let atlas = solve_block_conjugacy(&f, &block_estimate, &gap, &solve_opts)?;
    let atlas = glue_conjugacy(atlas, opts.seed)?;
    let conjugacy = verify_conjugacy(&atlas, opts.verify_radius, opts.verify_horizon, 4, opts.seed)?;

    let regularity_c1 = if gap.sp2_ok {
        Some(verify_regularity(
            &atlas,
            &gap,
            ConjugacyMode::C1,
            epsilon,
            opts.verify_radius,
            opts.verify_horizon,
            opts.seed,
        )?)
    } else {
        None
    };
    let regularity_holder = if gap.sp3_ok {
        Some(verify_regularity(
            &atlas,
            &gap,
            ConjugacyMode::HolderDiff,
            epsilon,
            opts.verify_radius,
            opts.verify_horizon,
            opts.seed,
        )?)
    } else {
        None
    };

    Ok(LinearizeOutcome {
        poly_estimate,
        block_estimate,
        spectrum,
        gap,
        certificate,
        envelope,
        eta_formula: f.eta_formula,
        eta_sampled: f.eta_sampled,
        atlas,
        conjugacy,
        regularity_c1,
        regularity_holder,
    })
}

/// Grid-sampled snapshot of the block conjugacies, for the JSON export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasExport {
    pub window_blocks: i64,
    pub radius: f64,
    pub blocks: Vec<AtlasBlockExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasBlockExport {
    pub n: i64,
    pub points: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub h_inv: Vec<Vec<f64>>,
}

/// Samples `h_n` and its inverse on a deterministic radial grid.
pub fn export_atlas(atlas: &ConjugacyAtlas, radius: f64, per_block: usize, seed: u64) -> Result<AtlasExport> {
    let d = atlas.blocks().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6578706f);
    let mut blocks = Vec::new();
    for n in 0..=atlas.window_blocks() {
        let mut points = vec![DVector::zeros(d)];
        while points.len() < per_block {
            let r = radius * (points.len() as f64 / per_block as f64);
            points.push(linalg::random_unit_vector(d, &mut rng) * r);
        }
        let mut h = Vec::with_capacity(points.len());
        let mut h_inv = Vec::with_capacity(points.len());
        for x in &points {
            h.push(atlas.h(n, x)?.iter().copied().collect());
            h_inv.push(atlas.h_inv(n, x)?.iter().copied().collect());
        }
        blocks.push(AtlasBlockExport {
            n,
            points: points.iter().map(|p| p.iter().copied().collect()).collect(),
            h,
            h_inv,
        });
    }
    Ok(AtlasExport {
        window_blocks: atlas.window_blocks(),
        radius,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::OperatorSequence;

    #[test]
    fn pipeline_runs_end_to_end_on_the_example() {
        let a = Cocycle::new(OperatorSequence::example_4_3());
        let g = PerturbationFamily::example_4_3(1e-3);
        let opts = LinearizeOptions {
            window: 1 << 10,
            grid_step: 5e-3,
            envelope_samples: 300,
            ..LinearizeOptions::default()
        };
        let out = linearize_pipeline(&a, &g, &NormFamily::Euclidean, &opts).unwrap();
        assert!(out.poly_estimate.accepted());
        assert!(out.block_estimate.accepted());
        assert!(out.gap.sp1_ok && out.gap.sp2_ok && out.gap.sp3_ok);
        assert_eq!(out.envelope.violations, 0);
        assert!(out.atlas.solver.contraction_factor <= 0.9);
        assert!(out.conjugacy.max_step_residual < 1e-8);
        assert!(out.conjugacy.max_orbit_residual < 1e-6);
        assert!(out.regularity_c1.is_some());
        let holder = out.regularity_holder.unwrap();
        assert!(holder.slope.unwrap() > 1.05);
    }

    #[test]
    fn pipeline_rejects_non_dichotomic_linear_part() {
        let a = Cocycle::new(OperatorSequence::native("id", 2, 1, |_| {
            nalgebra::DMatrix::identity(2, 2)
        }));
        let g = PerturbationFamily::example_4_3(1e-3);
        let res = linearize_pipeline(
            &a,
            &g,
            &NormFamily::Euclidean,
            &LinearizeOptions {
                window: 256,
                grid_step: 5e-3,
                envelope_samples: 50,
                ..LinearizeOptions::default()
            },
        );
        assert!(res.is_err());
    }
}
