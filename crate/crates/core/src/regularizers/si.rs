use std::sync::Arc;

use clbench_tensor::{Gradients, NodeId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{weighted_distance, weighted_distance_node};
use crate::error::{contract, Result};

/// Damping term added to the squared total displacement of a task.
pub const SI_XI: f64 = 0.1;

/// Path-integral importance estimates.
///
/// During a task every optimizer step adds `-g_i * delta_theta_i` to a
/// running `omega_i`. When the task ends, `Omega_i += omega_i /
/// (Delta_i^2 + xi)` with `Delta_i` the parameter's total change over the
/// task, and the penalty becomes `sum_i Omega_i (theta_i - anchor_i)^2`.
/// Contributions from steps that increased the loss are kept as they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiStore {
    xi: f64,
    omega: Vec<Vec<f64>>,
    importance: Vec<Vec<f64>>,
    start: Vec<Tensor>,
    penalty_weight: Vec<Arc<Tensor>>,
    anchor: Option<Vec<Arc<Tensor>>>,
}

impl SiStore {
    /// Starts tracking from the current parameter values.
    pub fn new(params: &ParamStore, xi: f64) -> Result<Self> {
        if !(xi > 0.0) {
            return Err(contract(format!("xi {xi} must be positive")));
        }
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            xi,
            omega: zeros(),
            importance: zeros(),
            start: params.tensors().to_vec(),
            penalty_weight: Vec::new(),
            anchor: None,
        })
    }

    /// Running per-step contributions of the current task.
    pub fn omega(&self) -> &[Vec<f64>] {
        &self.omega
    }

    /// Consolidated importance summed over completed tasks.
    pub fn importance(&self) -> &[Vec<f64>] {
        &self.importance
    }

    /// Adds one optimizer step: `before` are the values the gradient was
    /// taken at, `after` the values following the update.
    pub fn accumulate(&mut self, before: &[Tensor], after: &ParamStore, grads: &Gradients) -> Result<()> {
        after.check_layout(before)?;
        after.check_layout(grads.tensors())?;
        for (((om, b), a), g) in self
            .omega
            .iter_mut()
            .zip(before)
            .zip(after.tensors())
            .zip(grads.tensors())
        {
            for (((o, &bv), &av), &gv) in om.iter_mut().zip(b.data()).zip(a.data()).zip(g.data()) {
                *o -= gv as f64 * (av as f64 - bv as f64);
            }
        }
        Ok(())
    }

    /// Closes the current task at parameter values `end`.
    pub fn consolidate(&mut self, end: &ParamStore) -> Result<()> {
        end.check_layout(&self.start)?;
        for (((imp, om), s), e) in self
            .importance
            .iter_mut()
            .zip(self.omega.iter_mut())
            .zip(&self.start)
            .zip(end.tensors())
        {
            for (((i, o), &sv), &ev) in imp.iter_mut().zip(om.iter_mut()).zip(s.data()).zip(e.data()) {
                let delta = ev as f64 - sv as f64;
                *i += *o / (delta * delta + self.xi);
                *o = 0.0;
            }
        }
        self.start = end.tensors().to_vec();
        self.penalty_weight = self
            .importance
            .iter()
            .zip(end.tensors())
            .map(|(imp, t)| {
                let data = imp.iter().map(|&v| v as f32).collect();
                Tensor::new(t.shape().to_vec(), data).map(Arc::new)
            })
            .collect::<std::result::Result<_, _>>()?;
        self.anchor = Some(end.tensors().iter().map(|t| Arc::new(t.clone())).collect());
        Ok(())
    }

    pub fn penalty(&self, params: &ParamStore) -> f64 {
        self.anchor
            .as_ref()
            .map_or(0.0, |a| weighted_distance(params, a, &self.penalty_weight))
    }

    pub fn penalty_node(&self, tape: &mut Tape, params: &ParamStore) -> Result<Option<NodeId>> {
        self.anchor
            .as_ref()
            .map(|a| weighted_distance_node(tape, params, a, &self.penalty_weight))
            .transpose()
    }
}
