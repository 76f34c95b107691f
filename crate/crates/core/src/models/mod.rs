//! Networks: the MLP classifier with optional context gates, the
//! variational autoencoder used as a replay generator, and the combined
//! replay-through-feedback model.

mod classifier;
mod rtf;
mod vae;

use clbench_tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use classifier::{ClassifierNet, GateSpec};
pub use rtf::RtfNet;
pub use vae::{standard_normal, VaeForward, VaeLayers, VaeNet, LATENT_DIM};

use crate::error::Result;

/// A fully connected layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers a layer with weights and biases drawn from
    /// `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let w = Tensor::new(vec![in_dim, out_dim], draw(in_dim * out_dim)).expect("shape matches data");
        let b = Tensor::vector(draw(out_dim));
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        Ok(tape.linear(x, w, b)?)
    }
}

/// Anything that maps inputs to class logits.
pub trait Classifier {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn input_dim(&self) -> usize;
    fn output_width(&self) -> usize;

    /// Records the logits for `x` on `tape`. `gate` selects the context
    /// gates of a task when the model has them.
    fn logits(&self, tape: &mut Tape, x: NodeId, gate: Option<usize>) -> Result<NodeId>;

    /// Logits for `x` without keeping a tape around.
    fn logits_of(&self, x: &Tensor, gate: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new(self.params());
        let xin = tape.input(x.clone());
        let out = self.logits(&mut tape, xin, gate)?;
        Ok(tape.value(out).clone())
    }
}

/// Anything that can decode latent codes into images.
pub trait Generator {
    fn params(&self) -> &ParamStore;
    fn vae(&self) -> &VaeLayers;

    /// Decodes `n` standard-normal latent draws into images in `(0, 1)`.
    fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let z = vae::standard_normal(n, self.vae().latent, rng);
        self.vae().decode(self.params(), &z)
    }
}
