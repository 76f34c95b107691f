use std::sync::Arc;

use clbench_tensor::{masked_softmax, NodeId, ParamStore, Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Linear};
use crate::data::Scenario;
use crate::error::{contract, Result};

/// Fixed per-task binary masks over the hidden units of each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    fraction: f64,
    /// `masks[task][layer]` holds 0.0 for gated units and 1.0 otherwise.
    masks: Vec<Vec<Arc<Vec<f32>>>>,
}

impl GateSpec {
    /// For every task and hidden layer, silences `round(fraction * width)`
    /// randomly chosen units.
    pub fn draw(n_tasks: usize, widths: &[usize], fraction: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(contract(format!("gate fraction {fraction} outside [0, 1)")));
        }
        let masks = (0..n_tasks)
            .map(|_| {
                widths
                    .iter()
                    .map(|&w| {
                        let k = (fraction * w as f64).round() as usize;
                        let mut m = vec![1.0f32; w];
                        for i in sample(rng, w, k) {
                            m[i] = 0.0;
                        }
                        Arc::new(m)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { fraction, masks })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn n_tasks(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, task: usize, layer: usize) -> &Arc<Vec<f32>> {
        &self.masks[task][layer]
    }

    /// Indices of the silenced units of `layer` for `task`.
    pub fn gated_units(&self, task: usize, layer: usize) -> Vec<usize> {
        self.masks[task][layer]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Multilayer perceptron with two ReLU hidden layers and a linear output
/// layer holding every output unit of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    params: ParamStore,
    layers: Vec<Linear>,
    gates: Option<GateSpec>,
}

impl ClassifierNet {
    pub fn new(input_dim: usize, hidden: usize, output_width: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let layers = vec![
            Linear::new(&mut params, "fc1", input_dim, hidden, rng),
            Linear::new(&mut params, "fc2", hidden, hidden, rng),
            Linear::new(&mut params, "out", hidden, output_width, rng),
        ];
        Self {
            params,
            layers,
            gates: None,
        }
    }

    /// Attaches per-task context gates over both hidden layers.
    pub fn with_gates(mut self, gates: GateSpec) -> Result<Self> {
        let hidden = self.hidden();
        for t in 0..gates.n_tasks() {
            for l in 0..2 {
                if gates.mask(t, l).len() != hidden {
                    return Err(contract("gate width does not match hidden layer"));
                }
            }
        }
        self.gates = Some(gates);
        Ok(self)
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].out_dim
    }

    pub fn gates(&self) -> Option<&GateSpec> {
        self.gates.as_ref()
    }

    /// Class probabilities over `active` units for each row of `x`.
    ///
    /// Gates may only be requested for Task-IL, since only there is the task
    /// identity available at test time.
    pub fn classify(&self, x: &Tensor, active: &[usize], gate: Option<usize>, scenario: Scenario) -> Result<Tensor> {
        if gate.is_some() && scenario != Scenario::Task {
            return Err(contract(format!("context gates are not available in {scenario} scenario")));
        }
        let logits = self.logits_of(x, gate)?;
        Ok(masked_softmax(&logits, active)?)
    }
}

impl Classifier for ClassifierNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn output_width(&self) -> usize {
        self.layers[2].out_dim
    }

    fn logits(&self, tape: &mut Tape, x: NodeId, gate: Option<usize>) -> Result<NodeId> {
        let masks = match (gate, &self.gates) {
            (Some(t), Some(g)) => {
                if t >= g.n_tasks() {
                    return Err(contract(format!("no gates for task {t}")));
                }
                Some(t)
            }
            (Some(_), None) => return Err(contract("model has no context gates")),
            (None, _) => None,
        };
        let mut h = x;
        for (l, layer) in self.layers[..2].iter().enumerate() {
            h = layer.forward(tape, h)?;
            h = tape.relu(h);
            if let (Some(t), Some(g)) = (masks, &self.gates) {
                h = tape.col_mask(h, Arc::clone(g.mask(t, l)))?;
            }
        }
        self.layers[2].forward(tape, h)
    }
}
