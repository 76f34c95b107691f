use std::sync::Arc;

use clbench_tensor::{NodeId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{snapshot_values, weighted_distance, weighted_distance_node};
use crate::error::{contract, Result};

fn check_fisher(params: &ParamStore, fisher: &[Tensor]) -> Result<()> {
    params.check_layout(fisher)?;
    if fisher.iter().any(|f| f.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite())) {
        return Err(contract("Fisher entries must be finite and non-negative"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Consolidated {
    anchor: Vec<Arc<Tensor>>,
    fisher: Vec<Arc<Tensor>>,
}

/// One quadratic penalty per completed task:
/// `sum_k 1/2 sum_i F_i^(k) (theta_i - anchor_i^(k))^2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EwcStore {
    tasks: Vec<Consolidated>,
}

impl EwcStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tasks holding a penalty.
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Adds a penalty anchored at `params` with importance `fisher`.
    pub fn consolidate(&mut self, params: &ParamStore, fisher: Vec<Tensor>) -> Result<()> {
        check_fisher(params, &fisher)?;
        self.tasks.push(Consolidated {
            anchor: snapshot_values(params),
            fisher: fisher.into_iter().map(Arc::new).collect(),
        });
        Ok(())
    }

    pub fn penalty(&self, params: &ParamStore) -> f64 {
        self.tasks
            .iter()
            .map(|t| 0.5 * weighted_distance(params, &t.anchor, &t.fisher))
            .sum()
    }

    /// Records the penalty on `tape`; `None` before the first task ends.
    pub fn penalty_node(&self, tape: &mut Tape, params: &ParamStore) -> Result<Option<NodeId>> {
        let mut total: Option<NodeId> = None;
        for t in &self.tasks {
            let d = weighted_distance_node(tape, params, &t.anchor, &t.fisher)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        Ok(total.map(|t| tape.scale(t, 0.5)))
    }
}

/// A single running penalty `sum_i F~_i (theta_i - anchor_i)^2` where
/// `F~ <- gamma F~ + F` after each task and the anchor is the latest optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineEwcStore {
    gamma: f64,
    state: Option<Consolidated>,
}

impl OnlineEwcStore {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(contract(format!("gamma {gamma} outside [0, 1]")));
        }
        Ok(Self { gamma, state: None })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_none()
    }

    /// The running Fisher, once a task has been consolidated.
    pub fn fisher(&self) -> Option<&[Arc<Tensor>]> {
        self.state.as_ref().map(|s| s.fisher.as_slice())
    }

    pub fn consolidate(&mut self, params: &ParamStore, fisher: Vec<Tensor>) -> Result<()> {
        check_fisher(params, &fisher)?;
        let merged: Vec<Arc<Tensor>> = match &self.state {
            None => fisher.into_iter().map(Arc::new).collect(),
            Some(prev) => prev
                .fisher
                .iter()
                .zip(fisher)
                .map(|(old, mut new)| {
                    for (n, &o) in new.data_mut().iter_mut().zip(old.data()) {
                        *n = (self.gamma * o as f64 + *n as f64) as f32;
                    }
                    Arc::new(new)
                })
                .collect(),
        };
        self.state = Some(Consolidated {
            anchor: snapshot_values(params),
            fisher: merged,
        });
        Ok(())
    }

    pub fn penalty(&self, params: &ParamStore) -> f64 {
        self.state
            .as_ref()
            .map_or(0.0, |s| weighted_distance(params, &s.anchor, &s.fisher))
    }

    pub fn penalty_node(&self, tape: &mut Tape, params: &ParamStore) -> Result<Option<NodeId>> {
        self.state
            .as_ref()
            .map(|s| weighted_distance_node(tape, params, &s.anchor, &s.fisher))
            .transpose()
    }
}
