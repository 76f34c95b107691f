use clbench_tensor::{NodeId, ParamStore, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Generator, Linear};
use crate::error::{contract, Result};

/// Size of the latent code.
pub const LATENT_DIM: usize = 100;

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Layer layout of a variational autoencoder: encoder `D -> H -> H`, a
/// linear map to the latent mean and log-variance, and decoder
/// `L -> H -> H -> D` with a sigmoid output. Parameters live in the
/// owner's store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeLayers {
    pub enc: [Linear; 2],
    pub stats: Linear,
    pub dec: [Linear; 2],
    pub out: Linear,
    pub latent: usize,
}

/// Nodes of one recorded pass through a [`VaeLayers`].
#[derive(Debug, Clone, Copy)]
pub struct VaeForward {
    /// Last hidden layer of the encoder.
    pub hidden: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    /// Pre-sigmoid reconstruction.
    pub logits: NodeId,
}

impl VaeLayers {
    pub fn new(store: &mut ParamStore, input_dim: usize, hidden: usize, latent: usize, rng: &mut impl Rng) -> Self {
        Self {
            enc: [
                Linear::new(store, "enc1", input_dim, hidden, rng),
                Linear::new(store, "enc2", hidden, hidden, rng),
            ],
            stats: Linear::new(store, "latent", hidden, 2 * latent, rng),
            dec: [
                Linear::new(store, "dec1", latent, hidden, rng),
                Linear::new(store, "dec2", hidden, hidden, rng),
            ],
            out: Linear::new(store, "dec_out", hidden, input_dim, rng),
            latent,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.enc[0].in_dim
    }

    pub fn encode_hidden(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.enc {
            h = layer.forward(tape, h)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Latent mean and log-variance from the encoder's hidden layer.
    pub fn latent_stats(&self, tape: &mut Tape, hidden: NodeId) -> Result<(NodeId, NodeId)> {
        let s = self.stats.forward(tape, hidden)?;
        let mu = tape.slice_cols(s, 0, self.latent)?;
        let logvar = tape.slice_cols(s, self.latent, 2 * self.latent)?;
        Ok((mu, logvar))
    }

    pub fn decode_logits(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let mut h = z;
        for layer in &self.dec {
            h = layer.forward(tape, h)?;
            h = tape.relu(h);
        }
        self.out.forward(tape, h)
    }

    /// Encodes `x`, samples `z = mu + sigma * noise` and decodes it.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, noise: Tensor) -> Result<VaeForward> {
        let hidden = self.encode_hidden(tape, x)?;
        let (mu, logvar) = self.latent_stats(tape, hidden)?;
        let z = tape.reparameterize(mu, logvar, noise)?;
        let logits = self.decode_logits(tape, z)?;
        Ok(VaeForward {
            hidden,
            mu,
            logvar,
            logits,
        })
    }

    /// Latent mean and standard deviation for each row of `x`.
    pub fn encode(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.input_dim() {
            return Err(contract(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut tape = Tape::new(params);
        let xin = tape.input(x.clone());
        let h = self.encode_hidden(&mut tape, xin)?;
        let (mu, logvar) = self.latent_stats(&mut tape, h)?;
        let sigma = tape.value(logvar).map(|l| (0.5 * l).exp());
        Ok((tape.value(mu).clone(), sigma))
    }

    /// Reconstruction probabilities in `(0, 1)` for each latent row.
    pub fn decode(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.latent {
            return Err(contract(format!(
                "decoder expects {}-dimensional codes, got {}",
                self.latent,
                z.cols()
            )));
        }
        let mut tape = Tape::new(params);
        let zin = tape.input(z.clone());
        let logits = self.decode_logits(&mut tape, zin)?;
        let p = tape.sigmoid(logits);
        Ok(tape.value(p).clone())
    }
}

/// A standalone variational autoencoder used as a replay generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeNet {
    params: ParamStore,
    layers: VaeLayers,
}

impl VaeNet {
    pub fn new(input_dim: usize, hidden: usize, latent: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let layers = VaeLayers::new(&mut params, input_dim, hidden, latent, rng);
        Self { params, layers }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.layers.encode(&self.params, x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.layers.decode(&self.params, z)
    }
}

impl Generator for VaeNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn vae(&self) -> &VaeLayers {
        &self.layers
    }
}
