use clbench_tensor::{NodeId, ParamStore, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Generator, Linear, VaeLayers};
use crate::error::{contract, Result};

/// A variational autoencoder whose encoder doubles as the classifier: a
/// softmax head reads the encoder's last hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfNet {
    params: ParamStore,
    vae: VaeLayers,
    head: Linear,
}

impl RtfNet {
    pub fn new(input_dim: usize, hidden: usize, latent: usize, output_width: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let vae = VaeLayers::new(&mut params, input_dim, hidden, latent, rng);
        let head = Linear::new(&mut params, "head", hidden, output_width, rng);
        Self { params, vae, head }
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Class logits from an already recorded encoder hidden layer.
    pub fn head_logits(&self, tape: &mut Tape, hidden: NodeId) -> Result<NodeId> {
        self.head.forward(tape, hidden)
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.vae.encode(&self.params, x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.vae.decode(&self.params, z)
    }
}

impl Classifier for RtfNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.vae.input_dim()
    }

    fn output_width(&self) -> usize {
        self.head.out_dim
    }

    fn logits(&self, tape: &mut Tape, x: NodeId, gate: Option<usize>) -> Result<NodeId> {
        if gate.is_some() {
            return Err(contract("model has no context gates"));
        }
        let h = self.vae.encode_hidden(tape, x)?;
        self.head_logits(tape, h)
    }
}

impl Generator for RtfNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn vae(&self) -> &VaeLayers {
        &self.vae
    }
}
