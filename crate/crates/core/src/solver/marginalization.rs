use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factors::{PriorFactor, ResidualBlock, VarId, VarValue};

use super::dense_system;

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalizationOutcome {
    pub prior: PriorFactor,
    /// Set when the eliminated block needed diagonal regularization.
    pub regularized: bool,
}

/// Eliminates `drop` from the Gauss-Newton system of `blocks` by Schur
/// complement and returns the remaining information as a prior on every
/// other variable the blocks touch.
///
/// `blocks` must contain every residual that touches a dropped variable;
/// `value_of` returns the current (linearization) value of kept variables.
pub fn marginalize(
    blocks: &[ResidualBlock],
    drop: &BTreeSet<VarId>,
    value_of: impl Fn(VarId) -> Option<VarValue>,
) -> Result<MarginalizationOutcome> {
    let mut vars = BTreeSet::new();
    for b in blocks {
        vars.extend(b.jacobians.iter().map(|j| j.var));
    }
    let keep: Vec<VarId> = vars.iter().filter(|v| !drop.contains(v)).copied().collect();
    let dropped: Vec<VarId> = vars.iter().filter(|v| drop.contains(v)).copied().collect();
    let empty = MarginalizationOutcome {
        prior: PriorFactor {
            vars: Vec::new(),
            h: DMatrix::zeros(0, 0),
            b: DVector::zeros(0),
            linearization: Vec::new(),
        },
        regularized: false,
    };
    if keep.is_empty() {
        return Ok(empty);
    }
    let order: Vec<VarId> = keep.iter().chain(dropped.iter()).copied().collect();
    let (h, g, _) = dense_system(blocks, &order);
    let nk: usize = keep.iter().map(VarId::dim).sum();
    let nd = h.nrows() - nk;

    let h_kk = h.view((0, 0), (nk, nk)).into_owned();
    let g_k = g.rows(0, nk).into_owned();
    let (h_star, g_star, regularized) = if nd == 0 {
        (h_kk, g_k, false)
    } else {
        let h_kd = h.view((0, nk), (nk, nd)).into_owned();
        let h_dd = h.view((nk, nk), (nd, nd)).into_owned();
        let g_d = g.rows(nk, nd).into_owned();
        let (inv, regularized) = match h_dd.clone().cholesky() {
            Some(c) => (c.inverse(), false),
            None => {
                let reg = &h_dd + DMatrix::identity(nd, nd) * 1e-9;
                let c = reg.cholesky().ok_or(Error::SingularSubBlock)?;
                (c.inverse(), true)
            }
        };
        let t = &h_kd * inv;
        (
            &h_kk - &t * h_kd.transpose(),
            &g_k - &t * g_d,
            regularized,
        )
    };
    let h_star = 0.5 * (&h_star + h_star.transpose());

    // H* = V S Vᵀ; keep the well-conditioned part.
    let eig = h_star.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let thresh = (max_ev * 1e-12).max(1e-14);
    let kept: Vec<usize> = (0..nk).filter(|&i| eig.eigenvalues[i] > thresh).collect();
    let mut h_p = DMatrix::zeros(kept.len(), nk);
    let mut b_p = DVector::zeros(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        h_p.row_mut(row).copy_from(&(v.transpose() * s));
        b_p[row] = -v.dot(&g_star) / s;
    }
    if kept.is_empty() {
        return Ok(MarginalizationOutcome { regularized, ..empty });
    }
    let linearization = keep
        .iter()
        .map(|v| {
            value_of(*v).ok_or(Error::DimensionMismatch {
                expected: v.dim(),
                got: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalizationOutcome {
        prior: PriorFactor {
            vars: keep,
            h: h_p,
            b: b_p,
            linearization,
        },
        regularized,
    })
}
