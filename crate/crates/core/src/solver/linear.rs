use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factors::{prior_residual, JacobianBlock, PriorFactor, ResidualBlock, ResidualKind, VarId, VarValue};
use crate::geometry::Vec3;

use super::{dense_system, marginalize, LeastSquaresProblem};

/// `‖S·(Σ A_i x_i − z)‖²` over vector-space variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFactor {
    pub terms: Vec<(VarId, DMatrix<f64>)>,
    pub z: DVector<f64>,
    pub sqrt_information: DMatrix<f64>,
}

/// A linear-Gaussian problem over `Offset`/`SharedOffset`/`Landmark`
/// variables. Useful as an exact oracle for the solver and marginalization.
#[derive(Debug, Clone, Default)]
pub struct LinearProblem {
    pub values: BTreeMap<VarId, DVector<f64>>,
    pub factors: Vec<LinearFactor>,
    pub priors: Vec<PriorFactor>,
}

fn check_var(var: VarId) -> Result<()> {
    match var {
        VarId::Offset(_) | VarId::SharedOffset | VarId::Landmark(_) => Ok(()),
        _ => Err(Error::DimensionMismatch {
            expected: 3,
            got: var.dim(),
        }),
    }
}

impl LinearProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, var: VarId, value: DVector<f64>) -> Result<()> {
        check_var(var)?;
        if value.len() != var.dim() {
            return Err(Error::DimensionMismatch {
                expected: var.dim(),
                got: value.len(),
            });
        }
        self.values.insert(var, value);
        Ok(())
    }

    pub fn add_factor(&mut self, factor: LinearFactor) -> Result<()> {
        for (v, a) in &factor.terms {
            if !self.values.contains_key(v) || a.ncols() != v.dim() || a.nrows() != factor.z.len() {
                return Err(Error::DimensionMismatch {
                    expected: v.dim(),
                    got: a.ncols(),
                });
            }
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn value(&self, var: VarId) -> Option<VarValue> {
        let x = self.values.get(&var)?;
        Some(match var {
            VarId::Landmark(_) => VarValue::Landmark(Vec3::new(x[0], x[1], x[2])),
            _ => VarValue::Offset(x[0]),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.keys().map(VarId::dim).sum()
    }

    fn factor_block(&self, f: &LinearFactor) -> ResidualBlock {
        let mut r = -f.z.clone();
        for (v, a) in &f.terms {
            r += a * &self.values[v];
        }
        ResidualBlock {
            kind: ResidualKind::Prior,
            residual: r,
            jacobians: f
                .terms
                .iter()
                .map(|(v, a)| JacobianBlock {
                    var: *v,
                    matrix: a.clone(),
                })
                .collect(),
            sqrt_information: f.sqrt_information.clone(),
            huber: None,
        }
    }

    fn blocks(&self) -> Result<Vec<ResidualBlock>> {
        let mut out: Vec<ResidualBlock> = self.factors.iter().map(|f| self.factor_block(f)).collect();
        for p in &self.priors {
            if !p.is_empty() {
                out.push(prior_residual(p, |v| self.value(v))?);
            }
        }
        Ok(out)
    }

    /// One exact Gauss-Newton solve; the problem is linear so this is the
    /// minimizer whenever the normal matrix is positive definite.
    pub fn solve_dense(&mut self) -> Result<()> {
        let blocks = self.blocks()?;
        let order: Vec<VarId> = self.values.keys().copied().collect();
        let (h, g, index) = dense_system(&blocks, &order);
        let dx = h
            .cholesky()
            .ok_or(Error::SingularNormalEquations)?
            .solve(&(-g));
        for (v, o) in index {
            let d = dx.rows(o, v.dim()).into_owned();
            *self.values.get_mut(&v).expect("known variable") += d;
        }
        Ok(())
    }

    /// Marginalizes `drop`, replacing every factor and prior that touches
    /// it by one new prior. Returns whether regularization was needed.
    pub fn marginalize(&mut self, drop: &BTreeSet<VarId>) -> Result<bool> {
        let (hit_f, keep_f): (Vec<_>, Vec<_>) = std::mem::take(&mut self.factors)
            .into_iter()
            .partition(|f| f.terms.iter().any(|t| drop.contains(&t.0)));
        let (hit_p, keep_p): (Vec<_>, Vec<_>) = std::mem::take(&mut self.priors)
            .into_iter()
            .partition(|p| p.vars.iter().any(|v| drop.contains(v)));
        let mut blocks: Vec<ResidualBlock> = hit_f.iter().map(|f| self.factor_block(f)).collect();
        for p in &hit_p {
            if !p.is_empty() {
                blocks.push(prior_residual(p, |v| self.value(v))?);
            }
        }
        let outcome = marginalize(&blocks, drop, |v| self.value(v))?;
        self.factors = keep_f;
        self.priors = keep_p;
        if !outcome.prior.is_empty() {
            self.priors.push(outcome.prior);
        }
        for v in drop {
            self.values.remove(v);
        }
        Ok(outcome.regularized)
    }
}

impl LeastSquaresProblem for LinearProblem {
    type Snapshot = BTreeMap<VarId, DVector<f64>>;

    fn evaluate(&mut self) -> Result<Vec<ResidualBlock>> {
        self.blocks()
    }

    fn retract(&mut self, var: VarId, delta: &[f64]) {
        if let Some(x) = self.values.get_mut(&var) {
            *x += DVector::from_column_slice(delta);
        }
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.values.clone()
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        self.values = snapshot;
    }
}
