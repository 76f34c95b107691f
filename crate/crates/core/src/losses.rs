//! Loss functions evaluated outside the tape, in `f64`.
//!
//! Training records the same quantities on the tape; these versions are the
//! reference the tape is tested against and what reports use.

use clbench_tensor::Tensor;

use crate::error::{contract, Error, Result};

/// Temperature used for distillation targets during training.
pub const DISTILL_TEMPERATURE: f32 = 2.0;

/// Reconstruction probabilities are clamped into `[CLAMP, 1 - CLAMP]` before
/// taking logarithms.
pub const CLAMP: f64 = 1e-7;

fn check_rows(op: &str, probs: &Tensor, n: usize) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != n {
        return Err(contract(format!(
            "{op}: {n} targets for probabilities of shape {:?}",
            probs.shape()
        )));
    }
    if n == 0 {
        return Err(contract(format!("{op}: empty batch")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the target positions.
pub fn classification_loss(probs: &Tensor, targets: &[usize]) -> Result<f64> {
    check_rows("classification_loss", probs, targets.len())?;
    let k = probs.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(contract(format!("target {t} outside {k} active units")));
        }
        let p = probs.row(r)[t] as f64;
        if p <= 0.0 {
            return Err(Error::Numeric(format!("zero probability for target of row {r}")));
        }
        total -= p.ln();
    }
    Ok(total / targets.len() as f64)
}

/// Row-wise softmax of `logits[:, units] / temperature`, each row padded
/// with `pad` trailing zeros.
pub fn soft_targets(logits: &Tensor, units: &[usize], temperature: f32, pad: usize) -> Result<Tensor> {
    if units.is_empty() {
        return Err(contract("soft targets over an empty unit set"));
    }
    if let Some(&u) = units.iter().find(|&&u| u >= logits.cols()) {
        return Err(contract(format!("unit {u} outside {} logits", logits.cols())));
    }
    if !(temperature > 0.0) {
        return Err(contract(format!("temperature {temperature} must be positive")));
    }
    let k = units.len();
    let mut out = Tensor::zeros(&[logits.rows(), k + pad]);
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let scaled: Vec<f64> = units.iter().map(|&u| row[u] as f64 / temperature as f64).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
        for (o, s) in out.row_mut(r).iter_mut().zip(&scaled) {
            *o = ((s - max).exp() / z) as f32;
        }
    }
    Ok(out)
}

/// `-T^2 * mean_rows sum_c target_c * log(probs_c)`, where `probs` is the
/// student's softmax at temperature `T`.
pub fn distillation_loss(probs: &Tensor, targets: &Tensor, temperature: f32) -> Result<f64> {
    if probs.shape() != targets.shape() || probs.shape().len() != 2 {
        return Err(contract(format!(
            "distillation shapes differ: {:?} vs {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    for r in 0..targets.rows() {
        let s: f64 = targets.row(r).iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-4 || targets.row(r).iter().any(|&v| v < 0.0) {
            return Err(contract(format!("soft target row {r} is not a distribution (sums to {s})")));
        }
    }
    let mut total = 0.0;
    for r in 0..probs.rows() {
        for (&p, &t) in probs.row(r).iter().zip(targets.row(r)) {
            if t > 0.0 {
                total -= t as f64 * (p as f64).ln();
            }
        }
    }
    let t = temperature as f64;
    Ok(t * t * total / probs.rows() as f64)
}

/// Negative evidence lower bound of a variational autoencoder, averaged over
/// the batch and split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerativeLoss {
    /// Binary cross-entropy summed over pixels.
    pub reconstruction: f64,
    /// `KL(N(mu, sigma^2) || N(0, I))` summed over latent dimensions.
    pub kl: f64,
}

impl GenerativeLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl
    }
}

/// Generative loss for inputs `x`, latent statistics `(mu, sigma)` and
/// reconstruction probabilities `recon`.
pub fn generative_loss(x: &Tensor, mu: &Tensor, sigma: &Tensor, recon: &Tensor) -> Result<GenerativeLoss> {
    if x.shape() != recon.shape() || mu.shape() != sigma.shape() || x.rows() != mu.rows() {
        return Err(contract("generative loss shapes disagree"));
    }
    if x.rows() == 0 {
        return Err(contract("generative loss of an empty batch"));
    }
    let mut bce = 0.0;
    for (&xv, &pv) in x.data().iter().zip(recon.data()) {
        if !pv.is_finite() {
            return Err(Error::Numeric("non-finite reconstruction".into()));
        }
        let p = (pv as f64).clamp(CLAMP, 1.0 - CLAMP);
        let xv = xv as f64;
        bce -= xv * p.ln() + (1.0 - xv) * (1.0 - p).ln();
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        let (m, s) = (m as f64, s as f64);
        if !(s > 0.0) {
            return Err(Error::Numeric(format!("non-positive latent scale {s}")));
        }
        kl += 0.5 * (m * m + s * s - 1.0 - (s * s).ln());
    }
    let n = x.rows() as f64;
    Ok(GenerativeLoss {
        reconstruction: bce / n,
        kl: kl / n,
    })
}

/// Weights of the current-task and replay losses after `n_tasks` tasks
/// (including the current one): `1/N` and `1 - 1/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub current: f64,
    pub replay: f64,
}

impl LossWeights {
    pub fn new(n_tasks: usize) -> Result<Self> {
        if n_tasks == 0 {
            return Err(contract("loss weights need at least one task"));
        }
        let current = 1.0 / n_tasks as f64;
        Ok(Self {
            current,
            replay: 1.0 - current,
        })
    }
}

/// `(1/N) current + (1 - 1/N) replay`; the replay term must be present
/// exactly when `N > 1`.
pub fn combine_losses(current: f64, replay: Option<f64>, n_tasks: usize) -> Result<f64> {
    let w = LossWeights::new(n_tasks)?;
    match (replay, n_tasks) {
        (None, 1) => Ok(current),
        (Some(r), n) if n > 1 => Ok(w.current * current + w.replay * r),
        (None, _) => Err(contract("replay loss missing after the first task")),
        (Some(_), _) => Err(contract("replay loss given for the first task")),
    }
}

/// `current + lambda * penalty`.
pub fn regularized_loss(current: f64, penalty: f64, lambda: f64) -> f64 {
    current + lambda * penalty
}
