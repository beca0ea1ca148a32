//! Fixed-step fourth-order integration of linear and semilinear equations.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;

/// Default integrator step per unit time.
pub const DEFAULT_STEP: f64 = 1.0 / 256.0;

type FieldFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

/// The coefficient field `t -> A(t)` of a linear equation on `t >= 1`.
#[derive(Clone)]
pub struct CoefficientField {
    inner: Arc<FieldInner>,
}

struct FieldInner {
    name: String,
    dim: usize,
    rule: Box<FieldFn>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.inner.name)
            .field("dim", &self.inner.dim)
            .finish()
    }
}

impl CoefficientField {
    pub fn native(
        name: impl Into<String>,
        dim: usize,
        rule: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        CoefficientField {
            inner: Arc::new(FieldInner {
                name: name.into(),
                dim,
                rule: Box::new(rule),
            }),
        }
    }

    /// Per-entry expressions in the variable `t`.
    pub fn closed_form(name: impl Into<String>, dim: usize, entries: Vec<Vec<Expr>>) -> Result<Self> {
        if entries.len() != dim || entries.iter().any(|r| r.len() != dim) {
            return Err(Error::Config(format!("coefficient matrix must be {dim} x {dim}")));
        }
        Ok(Self::native(name, dim, move |t| {
            DMatrix::from_fn(dim, dim, |i, j| entries[i][j].eval(&[t]))
        }))
    }

    /// The planar field `diag(-1/t, 1/t)`.
    pub fn example_5_3() -> Self {
        Self::native("continuous_5_3", 2, |t| {
            DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0 / t, 1.0 / t]))
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        (self.inner.rule)(t)
    }
}

/// Classical fourth-order step for a matrix equation `X' = A(t) X`.
fn rk4_matrix_step(field: &CoefficientField, t: f64, h: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
    let k1 = field.at(t) * x;
    let k2 = field.at(t + 0.5 * h) * (x + 0.5 * h * &k1);
    let k3 = field.at(t + 0.5 * h) * (x + 0.5 * h * &k2);
    let k4 = field.at(t + h) * (x + h * &k3);
    x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// The solution operator family `T(t, s)` of `x' = A(t) x`.
///
/// Unit-interval transports are integrated once and cached; fractional ends
/// are integrated on demand. Backward times integrate with a negative step,
/// so no matrix inverses enter.
#[derive(Clone)]
pub struct EvolutionFamily {
    field: CoefficientField,
    step: f64,
    units: Arc<RwLock<HashMap<i64, Arc<DMatrix<f64>>>>>,
}

impl fmt::Debug for EvolutionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvolutionFamily")
            .field("field", &self.field)
            .field("step", &self.step)
            .finish()
    }
}

impl EvolutionFamily {
    pub fn new(field: CoefficientField, step: f64) -> Result<Self> {
        if !(1e-8..=0.5).contains(&step) {
            return Err(Error::Integration {
                from: 0.0,
                to: 0.0,
                reason: format!("step {step} outside the supported range"),
            });
        }
        Ok(EvolutionFamily {
            field,
            step,
            units: Arc::new(RwLock::new(HashMap::new())),
        })
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Integrates `X' = A(t) X, X(from) = Id` up to `to` (either direction).
    fn integrate_raw(&self, to: f64, from: f64, step: f64) -> Result<DMatrix<f64>> {
        let d = self.field.dim();
        let mut x = DMatrix::identity(d, d);
        if to == from {
            return Ok(x);
        }
        let span = to - from;
        let n = (span.abs() / step).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let mut t = from;
        for _ in 0..n {
            x = rk4_matrix_step(&self.field, t, h, &x);
            t += h;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                from,
                to,
                reason: "transport blew up".into(),
            });
        }
        Ok(x)
    }

    /// `T(k+1, k)` for integer `k >= 1`, cached.
    pub fn unit(&self, k: i64) -> Result<Arc<DMatrix<f64>>> {
        if k < 1 {
            return Err(Error::Domain {
                name: self.field.name().to_string(),
                index: k,
                lo: 1,
                hi: None,
            });
        }
        if let Some(hit) = self.units.read().unwrap().get(&k) {
            return Ok(hit.clone());
        }
        let m = Arc::new(self.integrate_raw((k + 1) as f64, k as f64, self.step)?);
        let mut w = self.units.write().unwrap();
        Ok(w.entry(k).or_insert_with(|| m.clone()).clone())
    }

    /// `T(t, s)` for `t, s >= 1`.
    pub fn transition(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        if t < 1.0 || s < 1.0 {
            return Err(Error::Integration {
                from: s,
                to: t,
                reason: "evolution family lives on t >= 1".into(),
            });
        }
        if t == s {
            let d = self.field.dim();
            return Ok(DMatrix::identity(d, d));
        }
        if t < s {
            // Integrate backward directly.
            return self.integrate_raw(t, s, self.step);
        }
        let k0 = s.ceil() as i64;
        let k1 = t.floor() as i64;
        if k1 < k0 {
            return self.integrate_raw(t, s, self.step);
        }
        let mut acc = self.integrate_raw(k0 as f64, s, self.step)?;
        for k in k0..k1 {
            acc = &*self.unit(k)? * acc;
        }
        if t > k1 as f64 {
            acc = self.integrate_raw(t, k1 as f64, self.step)? * acc;
        }
        Ok(acc)
    }

    /// Richardson error estimate per unit time, from one representative
    /// interval.
    pub fn error_estimate(&self, at: f64) -> Result<f64> {
        let coarse = self.integrate_raw(at + 1.0, at, self.step)?;
        let fine = self.integrate_raw(at + 1.0, at, self.step / 2.0)?;
        Ok(linalg::op_norm(&(coarse - fine)) / 15.0)
    }
}

type ForcingFn = dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync;
type ForcingJacFn = dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// The forcing term `f(t, x)` of a semilinear equation.
#[derive(Clone)]
pub struct ForcingField {
    inner: Arc<ForcingInner>,
}

struct ForcingInner {
    name: String,
    dim: usize,
    eval: Box<ForcingFn>,
    jac: Option<Box<ForcingJacFn>>,
    zero: bool,
}

impl fmt::Debug for ForcingField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForcingField")
            .field("name", &self.inner.name)
            .field("dim", &self.inner.dim)
            .finish()
    }
}

impl ForcingField {
    pub fn zero(dim: usize) -> Self {
        ForcingField {
            inner: Arc::new(ForcingInner {
                name: "zero".into(),
                dim,
                eval: Box::new(move |_, _| DVector::zeros(dim)),
                jac: Some(Box::new(move |_, _| DMatrix::zeros(dim, dim))),
                zero: true,
            }),
        }
    }

    /// `f(t, x) = eta/(t+1) * (xi(x_1), xi(x_2))`.
    pub fn example_5_3(eta: f64) -> Self {
        let xi = |x: f64| x * x * (-x * x).exp();
        let dxi = |x: f64| 2.0 * x * (-x * x).exp() * (1.0 - x * x);
        ForcingField {
            inner: Arc::new(ForcingInner {
                name: "continuous_5_3_bump".into(),
                dim: 2,
                eval: Box::new(move |t, x| {
                    let s = eta / (t + 1.0);
                    DVector::from_column_slice(&[s * xi(x[0]), s * xi(x[1])])
                }),
                jac: Some(Box::new(move |t, x| {
                    let s = eta / (t + 1.0);
                    DMatrix::from_diagonal(&DVector::from_column_slice(&[
                        s * dxi(x[0]),
                        s * dxi(x[1]),
                    ]))
                })),
                zero: eta == 0.0,
            }),
        }
    }

    /// Component expressions in `t, x1..xd`, scaled by `eta`.
    pub fn closed_form(
        name: impl Into<String>,
        dim: usize,
        exprs: Vec<Expr>,
        eta: f64,
    ) -> Result<Self> {
        if exprs.len() != dim {
            return Err(Error::Config(format!(
                "forcing needs {dim} component expressions, got {}",
                exprs.len()
            )));
        }
        Ok(ForcingField {
            inner: Arc::new(ForcingInner {
                name: name.into(),
                dim,
                eval: Box::new(move |t, x| {
                    let mut vars = Vec::with_capacity(dim + 1);
                    vars.push(t);
                    vars.extend(x.iter().copied());
                    DVector::from_fn(dim, |i, _| eta * exprs[i].eval(&vars))
                }),
                jac: None,
                zero: eta == 0.0,
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn is_zero(&self) -> bool {
        self.inner.zero
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.inner.eval)(t, x)
    }

    pub fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.inner.jac {
            Some(j) => j(t, x),
            None => {
                let step = 1e-6 * x.norm().max(1.0);
                linalg::fd_jacobian(|y| self.eval(t, y), x, step)
            }
        }
    }
}

/// The flow of `x' = A(t) x + f(t, x)` together with its state derivative.
#[derive(Debug, Clone)]
pub struct SemilinearFlow {
    evo: EvolutionFamily,
    forcing: ForcingField,
}

impl SemilinearFlow {
    pub fn new(evo: EvolutionFamily, forcing: ForcingField) -> Result<Self> {
        if evo.dim() != forcing.dim() {
            return Err(Error::Config(
                "forcing dimension does not match the coefficient field".into(),
            ));
        }
        Ok(SemilinearFlow { evo, forcing })
    }

    pub fn evolution(&self) -> &EvolutionFamily {
        &self.evo
    }

    pub fn forcing(&self) -> &ForcingField {
        &self.forcing
    }

    fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.evo.field().at(t) * x + self.forcing.eval(t, x)
    }

    /// `phi(t, t0; x)`, either time direction.
    pub fn orbit(&self, t: f64, t0: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut y = x.clone();
        if t == t0 {
            return Ok(y);
        }
        let span = t - t0;
        let n = (span.abs() / self.evo.step()).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let mut tau = t0;
        for _ in 0..n {
            let k1 = self.rhs(tau, &y);
            let k2 = self.rhs(tau + 0.5 * h, &(&y + 0.5 * h * &k1));
            let k3 = self.rhs(tau + 0.5 * h, &(&y + 0.5 * h * &k2));
            let k4 = self.rhs(tau + h, &(&y + h * &k3));
            y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            tau += h;
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::Integration {
                    from: t0,
                    to: t,
                    reason: "orbit blew up".into(),
                });
            }
        }
        Ok(y)
    }

    /// `(phi(t, t0; x), D_x phi(t, t0; x))` by the variational equation.
    pub fn orbit_and_derivative(
        &self,
        t: f64,
        t0: f64,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.evo.dim();
        let mut y = x.clone();
        let mut jac = DMatrix::identity(d, d);
        if t == t0 {
            return Ok((y, jac));
        }
        let span = t - t0;
        let n = (span.abs() / self.evo.step()).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let mut tau = t0;
        let aug_rhs = |t: f64, y: &DVector<f64>, j: &DMatrix<f64>| {
            let a = self.evo.field().at(t);
            let dy = &a * y + self.forcing.eval(t, y);
            let dj = (&a + self.forcing.jacobian(t, y)) * j;
            (dy, dj)
        };
        for _ in 0..n {
            let (k1y, k1j) = aug_rhs(tau, &y, &jac);
            let (k2y, k2j) = aug_rhs(
                tau + 0.5 * h,
                &(&y + 0.5 * h * &k1y),
                &(&jac + 0.5 * h * &k1j),
            );
            let (k3y, k3j) = aug_rhs(
                tau + 0.5 * h,
                &(&y + 0.5 * h * &k2y),
                &(&jac + 0.5 * h * &k2j),
            );
            let (k4y, k4j) = aug_rhs(tau + h, &(&y + h * &k3y), &(&jac + h * &k3j));
            y += (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            jac += (h / 6.0) * (k1j + 2.0 * k2j + 2.0 * k3j + k4j);
            tau += h;
        }
        Ok((y, jac))
    }
}
