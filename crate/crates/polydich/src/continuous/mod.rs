//! Continuous-time systems: integration, discretization into the block
//! framework, and the linearization maps built from a discrete atlas.

mod integrate;

pub use integrate::{
    CoefficientField, EvolutionFamily, ForcingField, SemilinearFlow, DEFAULT_STEP,
};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cocycle::{Cocycle, NormFamily, OperatorSequence};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;
use crate::linearize::{
    linearize_pipeline, ConjugacyAtlas, ConjugacyMode, LinearizeOptions, LinearizeOutcome,
    PerturbationFamily,
};
use crate::spectrum::{polynomial_spectrum, SpectralGapReport, SpectrumResult};
use crate::dichotomy::VerifySettings;

/// Tabulates the unit-time transports `A_n = T(n+1, n)` for `n` up to
/// `window`, ready for every discrete-scale operation.
pub fn discretize(evo: &EvolutionFamily, window: i64) -> Result<OperatorSequence> {
    let mut mats = Vec::with_capacity(window as usize);
    for n in 1..=window {
        mats.push((*evo.unit(n)?).clone());
    }
    OperatorSequence::table(
        format!("{}~discretized", evo.field().name()),
        evo.dim(),
        1,
        mats,
    )
}

/// Dichotomy spectrum of the equation via its unit-time discretization.
pub fn continuous_spectrum(
    evo: &EvolutionFamily,
    norms: &NormFamily,
    grid_step: f64,
    window: i64,
    settings: &VerifySettings,
) -> Result<SpectrumResult> {
    let a = Cocycle::new(discretize(evo, window)?);
    polynomial_spectrum(&a, norms, grid_step, window, settings)
}

/// Certified decay constants of a forcing field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForcingCertificate {
    /// Minimal `eta` with `|D_x f(t,x)| <= eta / t^{1+4 eps}` on samples.
    pub eta: f64,
    /// Minimal `L` with the Jacobian Lipschitz bound at weight `t^{1+5 eps}`.
    pub l: f64,
    pub epsilon: f64,
    pub samples: usize,
}

/// Samples the vanishing and decay conditions of the forcing; each
/// inequality uses its own decay exponent literally.
pub fn certify_forcing(
    forcing: &ForcingField,
    epsilon: f64,
    t_end: f64,
    seed: u64,
) -> Result<ForcingCertificate> {
    let d = forcing.dim();
    let zero = DVector::zeros(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x666f7263);
    let mut eta = 0.0f64;
    let mut l = 0.0f64;
    let mut count = 0;
    let mut t = 1.0f64;
    while t <= t_end {
        let f0 = forcing.eval(t, &zero);
        if f0.norm() > 1e-12 {
            return Err(Error::Certification {
                index: t as i64,
                point: vec![0.0; d],
                reason: format!("f(t, 0) = {:.3e} != 0", f0.norm()),
            });
        }
        let j0 = forcing.jacobian(t, &zero);
        if linalg::op_norm(&j0) > 1e-12 {
            return Err(Error::Certification {
                index: t as i64,
                point: vec![0.0; d],
                reason: format!("D_x f(t, 0) = {:.3e} != 0", linalg::op_norm(&j0)),
            });
        }
        let w_eta = t.powf(1.0 + 4.0 * epsilon);
        let w_l = t.powf(1.0 + 5.0 * epsilon);
        let mut points = Vec::new();
        for &r in &[1e-2, 1e-1, 1.0, 10.0] {
            for _ in 0..4 {
                points.push(linalg::random_unit_vector(d, &mut rng) * r);
            }
        }
        for (i, x) in points.iter().enumerate() {
            let jx = forcing.jacobian(t, x);
            eta = eta.max(linalg::op_norm(&jx) * w_eta);
            count += 1;
            for y in points.iter().skip(i + 1).step_by(5) {
                let dist = (x - y).norm();
                if dist < 1e-9 {
                    continue;
                }
                let jy = forcing.jacobian(t, y);
                l = l.max(linalg::op_norm(&(&jx - jy)) * w_l / dist);
            }
        }
        t = (t * 1.7).max(t + 0.5);
    }
    Ok(ForcingCertificate {
        eta,
        l,
        epsilon,
        samples: count,
    })
}

/// Discrete perturbation induced by the flow: `g_n(x) = phi(n+1, n; x) - A_n x`
/// with the Jacobian from the variational equation.
pub fn build_discrete_perturbation(flow: &SemilinearFlow) -> Result<PerturbationFamily> {
    let d = flow.evolution().dim();
    if flow.forcing().is_zero() {
        return Ok(PerturbationFamily::zero(d));
    }
    let eval_flow = flow.clone();
    let jac_flow = flow.clone();
    Ok(PerturbationFamily::native(
        format!("{}~flow", flow.evolution().field().name()),
        d,
        move |n, x| {
            let t0 = n as f64;
            let a_n = eval_flow.evolution().unit(n).expect("unit transport");
            eval_flow.orbit(t0 + 1.0, t0, x).expect("flow step") - &*a_n * x
        },
        move |n, x| {
            let t0 = n as f64;
            let a_n = jac_flow.evolution().unit(n).expect("unit transport");
            jac_flow
                .orbit_and_derivative(t0 + 1.0, t0, x)
                .expect("flow step")
                .1
                - &*a_n
        },
    ))
}

/// The time-dependent coordinate changes `H` and `G` straightening the
/// semilinear flow onto the linear one.
pub struct LinearizationMaps {
    atlas: ConjugacyAtlas,
    evo: EvolutionFamily,
    flow: SemilinearFlow,
    /// Largest `t` (exclusive) the discrete window covers.
    t_end: f64,
}

impl LinearizationMaps {
    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn atlas(&self) -> &ConjugacyAtlas {
        &self.atlas
    }

    fn floor_time(&self, t: f64) -> Result<i64> {
        if !(1.0..self.t_end).contains(&t) {
            return Err(Error::Domain {
                name: "linearization maps".into(),
                index: t as i64,
                lo: 1,
                hi: Some(self.t_end as i64),
            });
        }
        Ok(t.floor() as i64)
    }

    /// `H(t, x) = T(t, n) psi_n(phi(n, t; x))` for `t` in `[n, n+1)`.
    pub fn straighten(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.floor_time(t)?;
        let pulled = self.flow.orbit(n as f64, t, x)?;
        let straightened = self.atlas.psi(n, &pulled)?;
        Ok(self.evo.transition(t, n as f64)? * straightened)
    }

    /// `G(t, x) = phi(t, n; psi_n^{-1}(T(n, t) x))`.
    pub fn bend(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.floor_time(t)?;
        let pulled = self.evo.transition(n as f64, t)? * x;
        let bent = self.atlas.psi_inv(n, &pulled)?;
        self.flow.orbit(t, n as f64, &bent)
    }
}

/// Assembles the linearization maps from a solved discrete atlas.
pub fn build_h_g(
    atlas: ConjugacyAtlas,
    evo: EvolutionFamily,
    flow: SemilinearFlow,
) -> Result<LinearizationMaps> {
    let t_end = atlas.original_window() as f64;
    Ok(LinearizationMaps {
        atlas,
        evo,
        flow,
        t_end,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionMappingReport {
    /// Deviation of `H(t, x(t))` from the linear solution through `H(1, x(1))`.
    pub max_linearized_deviation: f64,
    /// Deviation of `G(t, y(t))` from the nonlinear solution through `G(1, y(1))`.
    pub max_nonlinearized_deviation: f64,
    pub max_round_trip: f64,
    pub samples: usize,
}

/// Checks that `H` maps nonlinear solutions to linear ones, `G` the other
/// way around, and that the two are inverse to each other.
pub fn verify_solution_mapping(
    maps: &LinearizationMaps,
    radius: f64,
    t_end: f64,
    seed: u64,
) -> Result<SolutionMappingReport> {
    let d = maps.evo.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x736f6c6d);
    let t_end = t_end.min(maps.t_end - 1.0);
    let mut points = Vec::new();
    for &r in &[0.5 * radius, radius] {
        for _ in 0..3 {
            points.push(linalg::random_unit_vector(d, &mut rng) * r);
        }
    }
    let times: Vec<f64> = {
        let mut ts = Vec::new();
        let mut t = 1.0f64;
        while t < t_end {
            ts.push(t);
            ts.push((t + 0.5).min(t_end));
            t += (t / 4.0).max(1.0).floor().max(1.0);
        }
        ts.push(t_end);
        ts.dedup();
        ts
    };
    let mut lin_dev = 0.0f64;
    let mut nonlin_dev = 0.0f64;
    let mut round = 0.0f64;
    for x0 in &points {
        // i) nonlinear solution mapped through H solves the linear equation.
        let h1 = maps.straighten(1.0, x0)?;
        // ii) linear solution mapped through G solves the nonlinear one.
        let g1 = maps.bend(1.0, x0)?;
        for &t in &times {
            let xt = maps.flow.orbit(t, 1.0, x0)?;
            let lin = maps.evo.transition(t, 1.0)? * &h1;
            lin_dev = lin_dev.max((maps.straighten(t, &xt)? - lin).norm());

            let yt = maps.evo.transition(t, 1.0)? * x0;
            let nonlin = maps.flow.orbit(t, 1.0, &g1)?;
            nonlin_dev = nonlin_dev.max((maps.bend(t, &yt)? - nonlin).norm());

            round = round.max((maps.straighten(t, &maps.bend(t, x0)?)? - x0).norm());
            round = round.max((maps.bend(t, &maps.straighten(t, x0)?)? - x0).norm());
        }
    }
    Ok(SolutionMappingReport {
        max_linearized_deviation: lin_dev,
        max_nonlinearized_deviation: nonlin_dev,
        max_round_trip: round,
        samples: points.len() * times.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuousRegularityReport {
    pub mode: ConjugacyMode,
    /// Max over samples of `|D_x H| / t^{4 eps}` (and the same for `G`).
    pub r_bound: f64,
    pub r_bound_inverse: f64,
    pub zeta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holder_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_used: Option<f64>,
    pub identity_exact: bool,
    pub epsilon: f64,
}

/// Finite-difference Jacobian bounds for `H` and `G` on the shrinking balls
/// `|x| <= zeta / t^{3 eps}`, plus the Hoelder and differentiability-at-zero
/// regressions with continuous-time weights.
pub fn verify_continuous_regularity(
    maps: &LinearizationMaps,
    gap: &SpectralGapReport,
    mode: ConjugacyMode,
    epsilon: f64,
    zeta: f64,
    t_end: f64,
    seed: u64,
) -> Result<ContinuousRegularityReport> {
    match mode {
        ConjugacyMode::C1 => {
            if !(gap.sp1_ok && gap.sp2_ok) {
                return Err(Error::Precondition(
                    "continuous C1 regularity needs sp1 and sp2".into(),
                ));
            }
        }
        ConjugacyMode::HolderDiff => {
            if !(gap.sp1_ok && gap.sp3_ok) {
                return Err(Error::Precondition(
                    "continuous Hoelder regularity needs sp1 and sp3".into(),
                ));
            }
        }
    }
    let d = maps.evo.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x63726567);
    let t_end = t_end.min(maps.t_end - 1.0);
    let times: Vec<f64> = {
        let mut ts = vec![1.0, 1.5];
        let mut t = 2.0;
        while t < t_end {
            ts.push(t);
            ts.push(t + 0.25);
            t *= 2.0;
        }
        ts.push(t_end);
        ts
    };
    match mode {
        ConjugacyMode::C1 => {
            let mut r_bound = 0.0f64;
            let mut r_bound_inv = 0.0f64;
            for &t in &times {
                let shrink = t.powf(3.0 * epsilon);
                let weight = t.powf(4.0 * epsilon);
                let radius = zeta / shrink;
                let mut pts = vec![DVector::zeros(d)];
                for _ in 0..2 {
                    pts.push(linalg::random_unit_vector(d, &mut rng) * radius);
                }
                for x in &pts {
                    let jh = linalg::fd_jacobian(|y| maps.straighten(t, y).unwrap(), x, 1e-6);
                    let jg = linalg::fd_jacobian(|y| maps.bend(t, y).unwrap(), x, 1e-6);
                    r_bound = r_bound.max(linalg::op_norm(&jh) / weight);
                    r_bound_inv = r_bound_inv.max(linalg::op_norm(&jg) / weight);
                }
            }
            Ok(ContinuousRegularityReport {
                mode,
                r_bound,
                r_bound_inverse: r_bound_inv,
                zeta,
                slope: None,
                holder_r: None,
                alpha_used: None,
                identity_exact: false,
                epsilon,
            })
        }
        ConjugacyMode::HolderDiff => {
            let alpha = gap
                .alpha1_effective
                .ok_or_else(|| Error::Precondition("gap report carries no alpha1".into()))?;
            let dirs: Vec<DVector<f64>> = (0..3)
                .map(|_| linalg::random_unit_vector(d, &mut rng))
                .collect();
            let mut min_slope = f64::INFINITY;
            let mut identity_exact = true;
            let mut holder_r = 0.0f64;
            for &t in &times {
                let shrink = t.powf(3.0 * epsilon);
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for &r in &[3e-3, 1e-3, 3e-4] {
                    let mut worst = 0.0f64;
                    for dir in &dirs {
                        let x = dir * (r / shrink);
                        worst = worst.max((maps.straighten(t, &x)? - &x).norm());
                    }
                    if worst > 1e-14 {
                        identity_exact = false;
                        xs.push((r / shrink).ln());
                        ys.push(
                            (worst / t.powf(epsilon * (4.0 + 3.0 * crate::linearize::VARRHO_FLOOR))).ln(),
                        );
                    }
                }
                if xs.len() >= 2 {
                    min_slope = min_slope.min(linalg::line_fit(&xs, &ys).1);
                }
                for dir in &dirs {
                    let x = dir * (1e-2 / shrink);
                    let y = dir * (5e-3 / shrink);
                    let num = (maps.straighten(t, &x)? - maps.straighten(t, &y)?).norm();
                    let den = t.powf(epsilon * (1.0 + 3.0 * alpha)) * (&x - &y).norm().powf(alpha);
                    if den > 0.0 {
                        holder_r = holder_r.max(num / den);
                    }
                }
            }
            let slope = (!identity_exact).then_some(min_slope);
            if let Some(s) = slope {
                if s < 1.0 + crate::linearize::VARRHO_FLOOR {
                    return Err(Error::Regularity {
                        reason: format!("continuous differentiability slope {s:.4} too small"),
                    });
                }
            }
            Ok(ContinuousRegularityReport {
                mode,
                r_bound: 0.0,
                r_bound_inverse: 0.0,
                zeta,
                slope,
                holder_r: Some(holder_r),
                alpha_used: Some(alpha),
                identity_exact,
                epsilon,
            })
        }
    }
}

/// On-disk continuous system definition. The forcing is
/// `f(t, x) = eta * f_expr(t, x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousSystemSpec {
    pub name: String,
    pub d: usize,
    #[serde(rename = "A_expr")]
    pub a_expr: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_expr: Option<Vec<String>>,
    #[serde(default)]
    pub eta: f64,
}

impl ContinuousSystemSpec {
    pub fn build(&self, step: f64) -> Result<(EvolutionFamily, SemilinearFlow)> {
        let d = self.d;
        let mut rows = Vec::with_capacity(d);
        for row in &self.a_expr {
            let mut out = Vec::with_capacity(d);
            for src in row {
                out.push(Expr::parse(src, &["t"])?);
            }
            rows.push(out);
        }
        let field = CoefficientField::closed_form(self.name.clone(), d, rows)?;
        let evo = EvolutionFamily::new(field, step)?;
        let forcing = match &self.f_expr {
            None => ForcingField::zero(d),
            Some(sources) => {
                let mut vars: Vec<String> = vec!["t".into()];
                for i in 1..=d {
                    vars.push(format!("x{i}"));
                }
                let var_refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
                let exprs = sources
                    .iter()
                    .map(|s| Expr::parse(s, &var_refs))
                    .collect::<Result<Vec<_>>>()?;
                ForcingField::closed_form(format!("{}~forcing", self.name), d, exprs, self.eta)?
            }
        };
        let flow = SemilinearFlow::new(evo.clone(), forcing)?;
        Ok((evo, flow))
    }
}

/// Everything the continuous pipeline produces.
pub struct ContinuousOutcome {
    pub spectrum: SpectrumResult,
    pub forcing_certificate: ForcingCertificate,
    pub discrete: LinearizeOutcome,
    pub maps: LinearizationMaps,
    pub solution: SolutionMappingReport,
    pub regularity_c1: Option<ContinuousRegularityReport>,
    pub regularity_holder: Option<ContinuousRegularityReport>,
    pub integrator_step: f64,
    pub integrator_error: f64,
}

#[derive(Debug, Clone)]
pub struct ContinuousOptions {
    /// Window for the spectrum stage (original time).
    pub spectrum_window: i64,
    /// Window for the conjugacy stage; flow-backed perturbations make long
    /// windows expensive, so this is smaller by default.
    pub linearize_window: i64,
    pub grid_step: f64,
    pub tol: f64,
    pub seed: u64,
    pub verify_radius: f64,
    pub verify_horizon: f64,
    pub envelope_samples: usize,
    pub settings: VerifySettings,
}

impl Default for ContinuousOptions {
    fn default() -> Self {
        ContinuousOptions {
            spectrum_window: 1 << 12,
            linearize_window: 1 << 7,
            grid_step: 1e-3,
            tol: 1e-8,
            seed: 0,
            verify_radius: 0.1,
            verify_horizon: 64.0,
            envelope_samples: 400,
            settings: VerifySettings::default(),
        }
    }
}

/// Full continuous pipeline: integrate, discretize, delegate to the discrete
/// machinery, then build and verify `H` and `G`.
pub fn continuous_pipeline(
    evo: &EvolutionFamily,
    flow: &SemilinearFlow,
    norms: &NormFamily,
    opts: &ContinuousOptions,
) -> Result<ContinuousOutcome> {
    let spectrum = continuous_spectrum(evo, norms, opts.grid_step, opts.spectrum_window, &opts.settings)?;
    let integrator_error = evo.error_estimate(1.5)?;

    // Certify the forcing, then hand the induced discrete perturbation to
    // the block machinery on the (shorter) conjugacy window.
    let epsilon = 0.0;
    let forcing_certificate = certify_forcing(
        flow.forcing(),
        epsilon,
        opts.linearize_window as f64,
        opts.seed,
    )?;
    let a = Cocycle::new(discretize(evo, opts.linearize_window)?);
    let g = build_discrete_perturbation(flow)?;
    let lin_opts = LinearizeOptions {
        window: opts.linearize_window,
        grid_step: (opts.grid_step * 4.0).min(0.01),
        tol: opts.tol,
        seed: opts.seed,
        verify_radius: opts.verify_radius,
        verify_horizon: opts.verify_horizon as i64,
        envelope_samples: opts.envelope_samples,
        settings: opts.settings.clone(),
        ..LinearizeOptions::default()
    };
    let discrete = linearize_pipeline(&a, &g, norms, &lin_opts)?;

    let maps = build_h_g(discrete.atlas.clone(), evo.clone(), flow.clone())?;
    let solution = verify_solution_mapping(&maps, opts.verify_radius, opts.verify_horizon, opts.seed)?;
    let regularity_c1 = if discrete.gap.sp2_ok {
        Some(verify_continuous_regularity(
            &maps,
            &discrete.gap,
            ConjugacyMode::C1,
            epsilon,
            opts.verify_radius,
            opts.verify_horizon,
            opts.seed,
        )?)
    } else {
        None
    };
    let regularity_holder = if discrete.gap.sp3_ok {
        Some(verify_continuous_regularity(
            &maps,
            &discrete.gap,
            ConjugacyMode::HolderDiff,
            epsilon,
            opts.verify_radius,
            opts.verify_horizon,
            opts.seed,
        )?)
    } else {
        None
    };

    Ok(ContinuousOutcome {
        spectrum,
        forcing_certificate,
        discrete,
        maps,
        solution,
        regularity_c1,
        regularity_holder,
        integrator_step: evo.step(),
        integrator_error,
    })
}
