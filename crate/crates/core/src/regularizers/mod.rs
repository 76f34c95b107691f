//! Parameter-importance stores: elastic weight consolidation (per task and
//! online) and synaptic intelligence.

mod ewc;
mod fisher;
mod si;

pub use ewc::{EwcStore, OnlineEwcStore};
pub use fisher::estimate_fisher;
pub use si::{SiStore, SI_XI};

use std::sync::Arc;

use clbench_tensor::{NodeId, ParamStore, Tape, Tensor};

use crate::error::{contract, Result};

/// `sum_i w_i (theta_i - anchor_i)^2` over every parameter, in `f64`.
pub(crate) fn weighted_distance(params: &ParamStore, anchor: &[Arc<Tensor>], weight: &[Arc<Tensor>]) -> f64 {
    let mut s = 0.0;
    for ((p, a), w) in params.tensors().iter().zip(anchor).zip(weight) {
        for ((&t, &a), &w) in p.data().iter().zip(a.data()).zip(w.data()) {
            let d = t as f64 - a as f64;
            s += w as f64 * d * d;
        }
    }
    s
}

/// Records `sum_i w_i (theta_i - anchor_i)^2` on `tape`.
pub(crate) fn weighted_distance_node(
    tape: &mut Tape,
    params: &ParamStore,
    anchor: &[Arc<Tensor>],
    weight: &[Arc<Tensor>],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for ((id, a), w) in params.ids().zip(anchor).zip(weight) {
        let p = tape.param(id);
        let q = tape.quad_penalty(p, Arc::clone(a), Arc::clone(w))?;
        total = Some(match total {
            Some(t) => tape.add(t, q)?,
            None => q,
        });
    }
    total.ok_or_else(|| contract("penalty over an empty parameter store"))
}

pub(crate) fn snapshot_values(params: &ParamStore) -> Vec<Arc<Tensor>> {
    params.tensors().iter().map(|t| Arc::new(t.clone())).collect()
}
