//! Numerical realization of the rate-filtered stable subspaces.

use nalgebra::{DMatrix, DVector};

use crate::cocycle::{NormFamily, TransitionMap};
use crate::error::{Error, Result};
use crate::linalg;

use super::{Flavor, ProjectionFamily};

/// Default classification margin, in log-rate units.
pub const DEFAULT_SLOPE_MARGIN: f64 = 0.05;

/// Orthonormal basis of the subspace of directions that decay under the
/// rate-`r`-weighted transport, classified by orbit slope.
///
/// Each right singular direction of the weighted long-window propagator is
/// transported across the horizon; the slope of `ln(r^{-(m-n)} |A(m,n) v|_m)`
/// against `m - n` decides membership. Slopes inside `(-margin, margin)` mean
/// the test rate is too close to the spectrum to classify.
pub fn estimate_stable_subspace<C: TransitionMap + ?Sized>(
    a: &C,
    norms: &NormFamily,
    rate: f64,
    n: i64,
    horizon: i64,
    margin: f64,
) -> Result<DMatrix<f64>> {
    if horizon < 64 {
        return Err(Error::Precondition(format!(
            "subspace estimation needs a requested horizon of at least 64 steps, got {horizon}"
        )));
    }
    if rate <= 0.0 {
        return Err(Error::Precondition("rate must be positive".into()));
    }
    let effective = effective_horizon(a, n, horizon);
    let log_rate = rate.ln();
    let dirs = classified_directions(a, norms, Flavor::Exponential, n, effective)?;
    let mut stable: Vec<DVector<f64>> = Vec::new();
    for (v, slope) in &dirs {
        let shifted = slope - log_rate;
        if shifted.abs() < margin {
            return Err(Error::IndeterminateRate {
                rate,
                direction: stable.len(),
                slope: shifted,
                margin,
            });
        }
        if shifted <= -margin {
            stable.push(v.clone());
        }
    }
    let d = a.dim();
    let mut basis = DMatrix::zeros(d, stable.len());
    for (j, v) in stable.iter().enumerate() {
        basis.set_column(j, v);
    }
    if basis.ncols() == 0 {
        return Ok(basis);
    }
    linalg::orthonormalize(&basis, 1e-12).ok_or(Error::RankDeficient {
        rank: basis.rank(1e-12),
        cols: basis.ncols(),
        tol: 1e-12,
    })
}

fn effective_horizon<C: TransitionMap + ?Sized>(a: &C, n: i64, horizon: i64) -> i64 {
    match a.hi() {
        Some(hi) => horizon.min(hi - n),
        None => horizon,
    }
}

/// Singular directions of the long-window propagator, each paired with the
/// fitted slope of its transported log-amplitude, sorted most-decaying first.
///
/// The slopes are per unit of `omega`: one block for the exponential flavor,
/// one unit of `ln(m/n)` for the polynomial flavor, so a rate shift moves
/// every slope by the same amount and never reorders the directions.
pub fn slope_ordered_directions<C: TransitionMap + ?Sized>(
    a: &C,
    norms: &NormFamily,
    flavor: Flavor,
    n: i64,
    horizon: i64,
) -> Result<Vec<(DVector<f64>, f64)>> {
    let effective = effective_horizon(a, n, horizon);
    classified_directions(a, norms, flavor, n, effective)
}

fn classified_directions<C: TransitionMap + ?Sized>(
    a: &C,
    norms: &NormFamily,
    flavor: Flavor,
    n: i64,
    horizon: i64,
) -> Result<Vec<(DVector<f64>, f64)>> {
    let d = a.dim();
    if horizon < 2 {
        return Err(Error::Precondition(format!(
            "effective horizon {horizon} too short for slope classification"
        )));
    }
    let propagator = a.transition(n + horizon, n)?;
    let svd = propagator.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let v: DVector<f64> = vt.row(i).transpose();
        let slope = orbit_slope(a, norms, flavor, n, horizon, &v)?;
        out.push((v, slope));
    }
    out.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

fn orbit_slope<C: TransitionMap + ?Sized>(
    a: &C,
    norms: &NormFamily,
    flavor: Flavor,
    n: i64,
    horizon: i64,
    v: &DVector<f64>,
) -> Result<f64> {
    let mut y = v.clone();
    let mut xs = Vec::with_capacity(horizon as usize + 1);
    let mut ys = Vec::with_capacity(horizon as usize + 1);
    let mut log_scale = 0.0f64;
    for off in 0..=horizon {
        let m = n + off;
        if off > 0 {
            y = a.op(m - 1)? * y;
            let s = y.norm();
            if s > 0.0 && s.is_finite() {
                log_scale += s.ln();
                y /= s;
            }
        }
        let amp = norms.eval(m, &y)?;
        if amp <= 0.0 {
            continue;
        }
        let x = match flavor {
            Flavor::Exponential => off as f64,
            Flavor::Polynomial => (m as f64).ln() - (n as f64).ln(),
        };
        xs.push(x);
        ys.push(amp.ln() + log_scale);
    }
    let (_, slope) = linalg::line_fit(&xs, &ys);
    Ok(slope)
}

/// Projection family anchored at `n0`, projecting onto the stable basis
/// along its orthogonal complement and propagated by conjugation.
pub fn build_equivariant_projections(
    anchor: i64,
    stable_basis: &DMatrix<f64>,
) -> Result<ProjectionFamily> {
    if stable_basis.ncols() == 0 {
        return Ok(ProjectionFamily::zero(stable_basis.nrows(), anchor));
    }
    if stable_basis.ncols() == stable_basis.nrows() {
        let ortho = linalg::orthonormalize(stable_basis, 1e-10).ok_or(Error::RankDeficient {
            rank: stable_basis.rank(1e-10),
            cols: stable_basis.ncols(),
            tol: 1e-10,
        })?;
        let _ = ortho;
        return Ok(ProjectionFamily::identity(stable_basis.nrows(), anchor));
    }
    ProjectionFamily::from_stable_basis(anchor, stable_basis)
}
