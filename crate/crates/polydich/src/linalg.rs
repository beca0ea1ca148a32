//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Spectral norm (largest singular value) of a small dense matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Condition number estimate via singular values; `inf` when singular.
pub fn cond_2(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Orthonormalizes the columns of `basis` (thin QR). Returns `None` when the
/// numerical rank of the input drops below its column count.
pub fn orthonormalize(basis: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let cols = basis.ncols();
    if cols == 0 {
        return Some(basis.clone());
    }
    let qr = basis.clone().qr();
    let q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)].abs() <= tol {
            return None;
        }
    }
    Some(q.columns(0, cols).into_owned())
}

/// Orthogonal projector onto the column span of an orthonormal `u`.
pub fn orthogonal_projector(u: &DMatrix<f64>) -> DMatrix<f64> {
    let d = u.nrows();
    if u.ncols() == 0 {
        return DMatrix::zeros(d, d);
    }
    u * u.transpose()
}

/// Largest principal angle (radians) by which `span(a)` fails to sit inside
/// `span(b)`; both inputs orthonormal. Zero means containment.
pub fn containment_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    if b.ncols() == 0 {
        return std::f64::consts::FRAC_PI_2;
    }
    // sin(angle) = || (I - P_b) a ||
    let pb = orthogonal_projector(b);
    let d = a.nrows();
    let resid = (DMatrix::<f64>::identity(d, d) - pb) * a;
    op_norm(&resid).min(1.0).asin()
}

/// Ordinary least-squares line `y = intercept + slope * x`.
///
/// With fewer than two distinct abscissae the slope is reported as zero and
/// the intercept as the mean.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return (my, 0.0);
    }
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Deterministic unit vectors for probing induced norms: the canonical basis
/// followed by seeded random directions.
pub fn probe_vectors(dim: usize, extra: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(dim + extra);
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        out.push(e);
    }
    for _ in 0..extra {
        out.push(random_unit_vector(dim, rng));
    }
    out
}

pub fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0f64..1.0));
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = x.len();
    let probe = f(x);
    let rows = probe.len();
    let mut jac = DMatrix::zeros(rows, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..rows {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}
