//! Operator sequences: the raw one-sided systems.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;

/// Determinant floor below which an operator is rejected.
pub const DET_FLOOR: f64 = 1e-300;
/// Condition-number ceiling for a single operator.
pub const COND_CEILING: f64 = 1e12;

/// How the entries of the sequence are produced.
enum Rule {
    /// Per-entry expressions in the variable `n`.
    ClosedForm(Vec<Vec<Expr>>),
    /// Finitely many tabulated matrices starting at the origin.
    Table(Vec<DMatrix<f64>>),
    /// Native closure (used for builtin systems and discretizations).
    Native(Box<dyn Fn(i64) -> DMatrix<f64> + Send + Sync>),
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::ClosedForm(_) => write!(f, "ClosedForm"),
            Rule::Table(t) => write!(f, "Table(len {})", t.len()),
            Rule::Native(_) => write!(f, "Native"),
        }
    }
}

struct SeqInner {
    name: String,
    dim: usize,
    /// First valid index: 1 for polynomial time, 0 for block time.
    origin: i64,
    rule: Rule,
    /// Operators and their inverses, computed once per index.
    ops: RwLock<HashMap<i64, Arc<(DMatrix<f64>, DMatrix<f64>)>>>,
}

/// A generator of invertible `d x d` matrices indexed by discrete time.
///
/// Cheap to clone; clones share the evaluation cache, so repeated queries at
/// the same index return bit-identical matrices.
#[derive(Clone)]
pub struct OperatorSequence {
    inner: Arc<SeqInner>,
}

impl fmt::Debug for OperatorSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSequence")
            .field("name", &self.inner.name)
            .field("dim", &self.inner.dim)
            .field("origin", &self.inner.origin)
            .field("rule", &self.inner.rule)
            .finish()
    }
}

impl OperatorSequence {
    fn new(name: impl Into<String>, dim: usize, origin: i64, rule: Rule) -> Self {
        OperatorSequence {
            inner: Arc::new(SeqInner {
                name: name.into(),
                dim,
                origin,
                rule,
                ops: RwLock::new(HashMap::new()),
            }),
        }
    }

    /// Sequence defined by per-entry expressions in the variable `n`.
    pub fn closed_form(
        name: impl Into<String>,
        dim: usize,
        origin: i64,
        entries: Vec<Vec<Expr>>,
    ) -> Result<Self> {
        if entries.len() != dim || entries.iter().any(|row| row.len() != dim) {
            return Err(Error::Config(format!(
                "expression matrix must be {dim} x {dim}"
            )));
        }
        Ok(Self::new(name, dim, origin, Rule::ClosedForm(entries)))
    }

    /// Sequence tabulated from explicit matrices; indices beyond the table are
    /// a domain error, never extrapolation.
    pub fn table(
        name: impl Into<String>,
        dim: usize,
        origin: i64,
        values: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if values.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(Error::Config(format!("table entries must be {dim} x {dim}")));
        }
        Ok(Self::new(name, dim, origin, Rule::Table(values)))
    }

    /// Sequence backed by a native closure.
    pub fn native(
        name: impl Into<String>,
        dim: usize,
        origin: i64,
        f: impl Fn(i64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, dim, origin, Rule::Native(Box::new(f)))
    }

    /// The planar system with entries `n/(n+1)` and `(n+1)/n` on the diagonal.
    pub fn example_4_3() -> Self {
        Self::native("example_4_3", 2, 1, |n| {
            let n = n as f64;
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[
                n / (n + 1.0),
                (n + 1.0) / n,
            ]))
        })
    }

    /// Unit-time discretization of the coefficient field `diag(-1/t, 1/t)`;
    /// its transition matrices coincide with [`OperatorSequence::example_4_3`].
    pub fn continuous_5_3_discretized() -> Self {
        Self::native("continuous_5_3_discretized", 2, 1, |n| {
            let n = n as f64;
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[
                n / (n + 1.0),
                (n + 1.0) / n,
            ]))
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    /// First valid index.
    pub fn origin(&self) -> i64 {
        self.inner.origin
    }

    /// One past the last valid operator index for tabulated sequences.
    pub fn table_end(&self) -> Option<i64> {
        match &self.inner.rule {
            Rule::Table(t) => Some(self.inner.origin + t.len() as i64),
            _ => None,
        }
    }

    fn check_domain(&self, n: i64) -> Result<()> {
        let lo = self.inner.origin;
        let hi = self.table_end();
        if n < lo || hi.map_or(false, |h| n >= h) {
            return Err(Error::Domain {
                name: self.inner.name.clone(),
                index: n,
                lo,
                hi,
            });
        }
        Ok(())
    }

    fn produce(&self, n: i64) -> Result<DMatrix<f64>> {
        self.check_domain(n)?;
        let m = match &self.inner.rule {
            Rule::ClosedForm(rows) => {
                let d = self.inner.dim;
                let mut m = DMatrix::zeros(d, d);
                for (i, row) in rows.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        m[(i, j)] = e.eval(&[n as f64]);
                    }
                }
                m
            }
            Rule::Table(t) => t[(n - self.inner.origin) as usize].clone(),
            Rule::Native(f) => f(n),
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning {
                index: n,
                det: f64::NAN,
                cond: f64::INFINITY,
            });
        }
        Ok(m)
    }

    /// Returns `(A_n, A_n^{-1})`, enforcing the conditioning floor.
    pub fn op_with_inverse(&self, n: i64) -> Result<Arc<(DMatrix<f64>, DMatrix<f64>)>> {
        if let Some(hit) = self.inner.ops.read().unwrap().get(&n) {
            return Ok(hit.clone());
        }
        let m = self.produce(n)?;
        let det = m.determinant();
        let cond = linalg::cond_2(&m);
        if det.abs() < DET_FLOOR || !cond.is_finite() || cond > COND_CEILING {
            return Err(Error::Conditioning {
                index: n,
                det,
                cond,
            });
        }
        let inv = m.clone().try_inverse().ok_or(Error::Conditioning {
            index: n,
            det,
            cond,
        })?;
        let entry = Arc::new((m, inv));
        let mut cache = self.inner.ops.write().unwrap();
        // Keep the first computed value in case of a concurrent race.
        Ok(cache.entry(n).or_insert_with(|| entry.clone()).clone())
    }

    pub fn op(&self, n: i64) -> Result<DMatrix<f64>> {
        Ok(self.op_with_inverse(n)?.0.clone())
    }

    pub fn op_inv(&self, n: i64) -> Result<DMatrix<f64>> {
        Ok(self.op_with_inverse(n)?.1.clone())
    }
}

/// On-disk system definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub d: usize,
    pub origin: i64,
    pub kind: SystemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    ClosedForm,
    Table,
    Builtin,
}

impl SystemSpec {
    pub fn build(&self) -> Result<OperatorSequence> {
        if self.d == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if self.origin != 0 && self.origin != 1 {
            return Err(Error::Config(format!(
                "origin must be 0 (block time) or 1 (polynomial time), got {}",
                self.origin
            )));
        }
        match self.kind {
            SystemKind::ClosedForm => {
                let rows = self
                    .expr
                    .as_ref()
                    .ok_or_else(|| Error::Config("closed_form system needs `expr`".into()))?;
                let mut parsed = Vec::with_capacity(rows.len());
                for row in rows {
                    let mut r = Vec::with_capacity(row.len());
                    for src in row {
                        r.push(Expr::parse(src, &["n"])?);
                    }
                    parsed.push(r);
                }
                OperatorSequence::closed_form(self.name.clone(), self.d, self.origin, parsed)
            }
            SystemKind::Table => {
                let values = self
                    .values
                    .as_ref()
                    .ok_or_else(|| Error::Config("table system needs `values`".into()))?;
                let mats = values
                    .iter()
                    .map(|rows| {
                        DMatrix::from_fn(self.d, self.d, |i, j| {
                            rows.get(i).and_then(|r| r.get(j)).copied().unwrap_or(f64::NAN)
                        })
                    })
                    .collect();
                OperatorSequence::table(self.name.clone(), self.d, self.origin, mats)
            }
            SystemKind::Builtin => match self.builtin.as_deref() {
                Some("example_4_3") => Ok(OperatorSequence::example_4_3()),
                Some("continuous_5_3_discretized") => {
                    Ok(OperatorSequence::continuous_5_3_discretized())
                }
                other => Err(Error::Config(format!(
                    "unknown builtin {other:?}; expected example_4_3 or continuous_5_3_discretized"
                ))),
            },
        }
    }
}
