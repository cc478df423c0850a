//! Levenberg-Marquardt over residual blocks, marginalization, and the
//! sliding-window problem.

mod linear;
mod marginalization;
mod window;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::factors::{ResidualBlock, VarId};
use crate::integration_cache::CacheStats;

pub use linear::{LinearFactor, LinearProblem};
pub use marginalization::{marginalize, MarginalizationOutcome};
pub use window::{
    BootstrapPrior, ExitedFrame, OffsetMode, WindowConfig, WindowFrame, WindowProblem, WindowStats,
};

/// A nonlinear least-squares problem the optimizer can drive.
pub trait LeastSquaresProblem {
    type Snapshot;

    /// Residual blocks at the current estimate.
    fn evaluate(&mut self) -> Result<Vec<ResidualBlock>>;
    fn retract(&mut self, var: VarId, delta: &[f64]);
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
    /// Called after every trial step, before the trial is evaluated.
    fn project(&mut self) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub convergence_tol_dx: f64,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub convergence_tol_cost: f64,
    /// Absolute cost decrease below which an accepted step ends the solve.
    /// Cost is a whitened χ², so changes far below one are noise.
    pub convergence_abs_cost: f64,
    pub lambda_init: f64,
    pub lambda_scale: f64,
    pub max_rejects: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            convergence_tol_dx: 1e-6,
            convergence_tol_cost: 1e-6,
            convergence_abs_cost: 0.1,
            lambda_init: 1e-4,
            lambda_scale: 10.0,
            max_rejects: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost after the iteration (unchanged on rejection).
    pub cost: f64,
    pub dx_norm: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizationReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_dx_norm: f64,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
    /// Cumulative cache counters when the solve finished.
    pub cache: CacheStats,
}

impl OptimizationReport {
    /// Number of linearizations performed.
    pub fn iteration_count(&self) -> usize {
        self.iterations
            .last()
            .map(|r| r.iteration + 1)
            .unwrap_or(0)
    }

    pub fn csv_header() -> &'static str {
        "iteration,cost,dx_norm,cache_hits,integration_steps"
    }

    /// One CSV row per iteration record.
    pub fn csv_rows(&self) -> Vec<String> {
        self.iterations
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{}",
                    r.iteration, r.cost, r.dx_norm, self.cache.hits, self.cache.integration_steps
                )
            })
            .collect()
    }
}

pub fn total_cost(blocks: &[ResidualBlock]) -> f64 {
    blocks.iter().map(ResidualBlock::cost).sum()
}

/// Whitened, robustly reweighted rows of one block.
fn whiten(block: &ResidualBlock) -> (DVector<f64>, Vec<(VarId, DMatrix<f64>)>) {
    if block.huber.is_none() && block.sqrt_information.is_identity(0.0) {
        // Priors come already whitened.
        let js = block.jacobians.iter().map(|j| (j.var, j.matrix.clone())).collect();
        return (block.residual.clone(), js);
    }
    let w = block.robust_sqrt_weight();
    let s = &block.sqrt_information * w;
    let r = &s * &block.residual;
    let js = block
        .jacobians
        .iter()
        .map(|j| (j.var, &s * &j.matrix))
        .collect();
    (r, js)
}

/// Blocks with more variables than this are accumulated in one product.
const WIDE_BLOCK: usize = 8;

/// Gauss-Newton system with landmark blocks kept apart for elimination.
struct NormalEquations {
    dense_index: BTreeMap<VarId, usize>,
    dense_dim: usize,
    h: DMatrix<f64>,
    g: DVector<f64>,
    eliminated: BTreeMap<VarId, EliminatedBlock>,
}

struct EliminatedBlock {
    h_ll: Matrix3<f64>,
    g_l: Vector3<f64>,
    /// Coupling `H_cl` per dense variable offset.
    coupling: BTreeMap<usize, DMatrix<f64>>,
    /// Nonzero rows of the coupling and their dense indices.
    rows: Vec<usize>,
    c: DMatrix<f64>,
}

impl NormalEquations {
    fn build(blocks: &[ResidualBlock]) -> Self {
        // Landmarks that never share a block with another landmark are
        // eliminated; anything else goes into the dense part.
        let mut shared = BTreeSet::new();
        let mut all = BTreeSet::new();
        for b in blocks {
            let lms: Vec<VarId> = b
                .jacobians
                .iter()
                .map(|j| j.var)
                .filter(|v| matches!(v, VarId::Landmark(_)))
                .collect();
            if lms.len() > 1 {
                shared.extend(lms.iter().copied());
            }
            all.extend(b.jacobians.iter().map(|j| j.var));
        }
        let mut dense_index = BTreeMap::new();
        let mut dense_dim = 0;
        let mut eliminated = BTreeMap::new();
        for v in &all {
            if matches!(v, VarId::Landmark(_)) && !shared.contains(v) {
                eliminated.insert(
                    *v,
                    EliminatedBlock {
                        h_ll: Matrix3::zeros(),
                        g_l: Vector3::zeros(),
                        coupling: BTreeMap::new(),
                        rows: Vec::new(),
                        c: DMatrix::zeros(0, 3),
                    },
                );
            } else {
                dense_index.insert(*v, dense_dim);
                dense_dim += v.dim();
            }
        }
        let mut h = DMatrix::zeros(dense_dim, dense_dim);
        let mut g = DVector::zeros(dense_dim);

        for b in blocks {
            let (r, js) = whiten(b);
            if js.len() > WIDE_BLOCK && js.iter().all(|(v, _)| dense_index.contains_key(v)) {
                Self::add_wide(&mut h, &mut g, &dense_index, &r, &js);
                continue;
            }
            for (va, ja) in &js {
                if let Some(&oa) = dense_index.get(va) {
                    g.rows_mut(oa, va.dim()).gemv_tr(1.0, ja, &r, 1.0);
                    for (vb, jb) in &js {
                        if let Some(&ob) = dense_index.get(vb) {
                            h.view_mut((oa, ob), (va.dim(), vb.dim()))
                                .gemm_tr(1.0, ja, jb, 1.0);
                        }
                    }
                } else {
                    let e = eliminated.get_mut(va).expect("eliminated landmark");
                    let ja3 = ja.fixed_columns::<3>(0);
                    e.h_ll += ja3.transpose() * ja3;
                    e.g_l += ja3.transpose() * &r;
                    for (vb, jb) in &js {
                        if let Some(&ob) = dense_index.get(vb) {
                            e.coupling
                                .entry(ob)
                                .or_insert_with(|| DMatrix::zeros(vb.dim(), 3))
                                .gemm_tr(1.0, jb, ja, 1.0);
                        }
                    }
                }
            }
        }
        for e in eliminated.values_mut() {
            // Most coupling rows are exactly zero (velocity, biases).
            let mut kept = Vec::new();
            for (o, blk) in &e.coupling {
                for r in 0..blk.nrows() {
                    if blk.row(r).iter().any(|x| *x != 0.0) {
                        kept.push((o + r, blk.fixed_view::<1, 3>(r, 0).into_owned()));
                    }
                }
            }
            e.c = DMatrix::from_fn(kept.len(), 3, |i, j| kept[i].1[j]);
            e.rows = kept.into_iter().map(|(r, _)| r).collect();
            e.coupling.clear();
        }
        Self {
            dense_index,
            dense_dim,
            h,
            g,
            eliminated,
        }
    }

    /// Accumulates a block touching many dense variables with one product
    /// instead of one per variable pair.
    fn add_wide(
        h: &mut DMatrix<f64>,
        g: &mut DVector<f64>,
        dense_index: &BTreeMap<VarId, usize>,
        r: &DVector<f64>,
        js: &[(VarId, DMatrix<f64>)],
    ) {
        let n: usize = js.iter().map(|(_, j)| j.ncols()).sum();
        let mut j_all = DMatrix::zeros(r.len(), n);
        let mut cols = Vec::with_capacity(js.len());
        let mut c = 0;
        for (v, j) in js {
            j_all.columns_mut(c, j.ncols()).copy_from(j);
            cols.push((dense_index[v], c, j.ncols()));
            c += j.ncols();
        }
        let jt = j_all.transpose();
        let jtj = &jt * &j_all;
        let jtr = &jt * r;
        for &(oa, ca, da) in &cols {
            g.rows_mut(oa, da).add_assign(&jtr.rows(ca, da));
            for &(ob, cb, db) in &cols {
                h.view_mut((oa, ob), (da, db)).add_assign(&jtj.view((ca, cb), (da, db)));
            }
        }
    }

    fn damping(d: f64) -> f64 {
        d.max(1e-6)
    }

    /// Solves the damped system; `None` if the reduced matrix is not
    /// positive definite.
    fn solve(&self, lambda: f64) -> Option<BTreeMap<VarId, Vec<f64>>> {
        let mut s = self.h.clone();
        for i in 0..self.dense_dim {
            s[(i, i)] += lambda * Self::damping(self.h[(i, i)]);
        }
        let mut rhs = -self.g.clone();
        let mut back = BTreeMap::new();
        for (v, e) in &self.eliminated {
            let mut hll = e.h_ll;
            for i in 0..3 {
                hll[(i, i)] += lambda * Self::damping(e.h_ll[(i, i)]);
            }
            let inv = hll.try_inverse()?;
            let (idx, c) = (&e.rows, &e.c);
            let w = c * inv;
            let wg = &w * e.g_l;
            let p = &w * c.transpose();
            for (j, &cj) in idx.iter().enumerate() {
                rhs[cj] += wg[j];
                let pc = p.column(j);
                let mut sc = s.column_mut(cj);
                for (i, &ri) in idx.iter().enumerate() {
                    sc[ri] -= pc[i];
                }
            }
            back.insert(*v, inv);
        }
        let dc = if self.dense_dim > 0 {
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        if dc.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let mut out = BTreeMap::new();
        for (v, &o) in &self.dense_index {
            out.insert(*v, dc.rows(o, v.dim()).iter().copied().collect());
        }
        for (v, e) in &self.eliminated {
            let inv = &back[v];
            let x = DVector::from_iterator(e.rows.len(), e.rows.iter().map(|&r| dc[r]));
            let t: Vector3<f64> = -e.g_l - e.c.transpose() * x;
            let dl = inv * t;
            out.insert(*v, dl.iter().copied().collect());
        }
        Some(out)
    }
}

fn step_norm(dx: &BTreeMap<VarId, Vec<f64>>) -> f64 {
    dx.values()
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Minimizes the problem's total cost with Levenberg-Marquardt.
///
/// Accepted steps never increase the cost. Rejected steps are rolled back
/// through the problem's snapshot.
pub fn levenberg_marquardt<P: LeastSquaresProblem>(
    problem: &mut P,
    config: &LmConfig,
) -> Result<OptimizationReport> {
    let mut blocks = problem.evaluate()?;
    let mut cost = total_cost(&blocks);
    if !cost.is_finite() {
        return Err(Error::DivergedCost { rejects: 0 });
    }
    let mut report = OptimizationReport {
        initial_cost: cost,
        final_cost: cost,
        ..Default::default()
    };
    let mut lambda = config.lambda_init;
    let mut rejects = 0;
    'outer: for iteration in 0..config.max_iterations {
        let system = NormalEquations::build(&blocks);
        loop {
            let Some(dx) = system.solve(lambda) else {
                rejects += 1;
                if rejects > config.max_rejects {
                    return Err(Error::SingularNormalEquations);
                }
                lambda = (lambda * config.lambda_scale).max(1e-9);
                continue;
            };
            let dx_norm = step_norm(&dx);
            report.final_dx_norm = dx_norm;
            if dx_norm < config.convergence_tol_dx {
                report.converged = true;
                report.iterations.push(IterationRecord {
                    iteration,
                    cost,
                    dx_norm,
                    lambda,
                    accepted: false,
                });
                break 'outer;
            }
            let snapshot = problem.snapshot();
            for (v, d) in &dx {
                problem.retract(*v, d);
            }
            problem.project();
            let trial = problem.evaluate();
            let trial_cost = trial.as_ref().map(|b| total_cost(b)).unwrap_or(f64::INFINITY);
            if trial_cost.is_finite() && trial_cost <= cost {
                let decrease = cost - trial_cost;
                blocks = trial?;
                cost = trial_cost;
                lambda /= config.lambda_scale;
                rejects = 0;
                report.iterations.push(IterationRecord {
                    iteration,
                    cost,
                    dx_norm,
                    lambda,
                    accepted: true,
                });
                if decrease <= config.convergence_tol_cost * cost.max(1e-300)
                    || decrease <= config.convergence_abs_cost
                {
                    report.converged = true;
                    break 'outer;
                }
                break;
            }
            problem.restore(snapshot);
            rejects += 1;
            report.iterations.push(IterationRecord {
                iteration,
                cost,
                dx_norm,
                lambda,
                accepted: false,
            });
            if rejects > config.max_rejects {
                // A tiny rejected step means we are at the numerical floor.
                if dx_norm < 1e3 * config.convergence_tol_dx {
                    report.converged = true;
                    break 'outer;
                }
                return Err(Error::DivergedCost { rejects });
            }
            lambda = (lambda * config.lambda_scale).max(1e-9);
        }
    }
    report.final_cost = cost;
    Ok(report)
}

/// Gauss-Newton marginal covariance of `vars`, or `None` if the
/// information matrix of `blocks` is singular.
pub fn marginal_covariance(blocks: &[ResidualBlock], vars: &[VarId]) -> Option<DMatrix<f64>> {
    let mut all = BTreeSet::new();
    for b in blocks {
        all.extend(b.jacobians.iter().map(|j| j.var));
    }
    let order: Vec<VarId> = all.into_iter().collect();
    let (h, _, index) = dense_system(blocks, &order);
    let cov = h.cholesky()?.inverse();
    let n: usize = vars.iter().map(VarId::dim).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut ri = 0;
    for a in vars {
        let mut ci = 0;
        for b in vars {
            let (oa, ob) = (*index.get(a)?, *index.get(b)?);
            out.view_mut((ri, ci), (a.dim(), b.dim()))
                .copy_from(&cov.view((oa, ob), (a.dim(), b.dim())));
            ci += b.dim();
        }
        ri += a.dim();
    }
    Some(out)
}

/// Dense `H`, `g` over the given variable order from whitened blocks.
pub(crate) fn dense_system(
    blocks: &[ResidualBlock],
    order: &[VarId],
) -> (DMatrix<f64>, DVector<f64>, BTreeMap<VarId, usize>) {
    let mut index = BTreeMap::new();
    let mut n = 0;
    for v in order {
        index.insert(*v, n);
        n += v.dim();
    }
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for b in blocks {
        let (r, js) = whiten(b);
        if js.len() > WIDE_BLOCK {
            NormalEquations::add_wide(&mut h, &mut g, &index, &r, &js);
            continue;
        }
        for (va, ja) in &js {
            let oa = index[va];
            let mut gv = g.rows_mut(oa, va.dim());
            gv += ja.transpose() * &r;
            for (vb, jb) in &js {
                let ob = index[vb];
                let mut hv = h.view_mut((oa, ob), (va.dim(), vb.dim()));
                hv += ja.transpose() * jb;
            }
        }
    }
    (h, g, index)
}
