//! Frozen model copies and the replay batches built from them.

use std::ops::Deref;
use std::sync::Arc;

use clbench_tensor::{Adam, NodeId, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Scenario};
use crate::error::{contract, Result};
use crate::losses::{soft_targets, LossWeights};
use crate::models::{Classifier, Generator, VaeForward, VaeNet};

/// Read-only copy of a model taken at the end of a task.
///
/// The copy is shared behind an `Arc` and offers no mutable access, so
/// training the live model can never change what is replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<M>(Arc<M>);

impl<M: Clone> Snapshot<M> {
    pub fn capture(model: &M) -> Self {
        Self(Arc::new(model.clone()))
    }
}

impl<M> Deref for Snapshot<M> {
    type Target = M;

    fn deref(&self) -> &M {
        &self.0
    }
}

/// Targets for replayed inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplayTargets {
    /// Most likely class according to the frozen model, as a position
    /// within the row's units.
    Hard(Vec<usize>),
    /// Frozen model's probabilities at the distillation temperature,
    /// `[rows, width]`, zero on units it was never trained on.
    Soft { probs: Tensor, temperature: f32 },
}

/// Replayed inputs with the output units each row is trained on and its
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    pub x: Tensor,
    /// Row-major `[rows, width]` table of output units per row.
    pub units: Vec<usize>,
    pub width: usize,
    pub targets: ReplayTargets,
    /// Earlier task each row is attributed to (Task-IL only).
    pub owners: Option<Vec<usize>>,
}

impl ReplayBatch {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

/// Splits `n` rows as evenly as possible over `parts` owners, giving the
/// remainder to the earliest owners.
pub fn split_counts(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// How replay targets are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    Hard,
    Soft(f32),
}

/// Labels `x` with a frozen classifier trained on tasks `0..current`, for
/// use while training task `current`.
pub fn label_replay(
    teacher: &impl Classifier,
    x: Tensor,
    labels: &LabelMap,
    current: usize,
    kind: TargetKind,
) -> Result<ReplayBatch> {
    if current == 0 {
        return Err(contract("nothing to replay during the first task"));
    }
    let rows = x.rows();
    let logits = teacher.logits_of(&x, None)?;
    let owners: Vec<usize> = match labels.scenario() {
        Scenario::Task => split_counts(rows, current)
            .into_iter()
            .enumerate()
            .flat_map(|(t, c)| std::iter::repeat(t).take(c))
            .collect(),
        _ => vec![0; rows],
    };
    let width = match labels.scenario() {
        Scenario::Class => labels.train_units(current)?.len(),
        _ => labels.classes_per_task(),
    };
    let mut units = Vec::with_capacity(rows * width);
    let mut hard = Vec::new();
    let mut soft = Tensor::zeros(&[rows, width]);
    for (r, &owner) in owners.iter().enumerate() {
        let prev = labels.previous_units(owner, current)?;
        let own = match labels.scenario() {
            Scenario::Class => labels.train_units(current)?,
            _ => prev.clone(),
        };
        units.extend_from_slice(&own);
        let row = Tensor::matrix(1, logits.cols(), logits.row(r).to_vec())?;
        match kind {
            TargetKind::Hard => hard.push(row.argmax_rows(&prev)[0]),
            TargetKind::Soft(t) => {
                let p = soft_targets(&row, &prev, t, width - prev.len())?;
                soft.row_mut(r).copy_from_slice(p.data());
            }
        }
    }
    let targets = match kind {
        TargetKind::Hard => ReplayTargets::Hard(hard),
        TargetKind::Soft(temperature) => ReplayTargets::Soft {
            probs: soft,
            temperature,
        },
    };
    Ok(ReplayBatch {
        x,
        units,
        width,
        targets,
        owners: (labels.scenario() == Scenario::Task).then_some(owners),
    })
}

/// Learning without forgetting: the current inputs, labelled by the frozen
/// classifier's softened predictions.
pub fn replay_lwf(
    teacher: &impl Classifier,
    current_x: &Tensor,
    labels: &LabelMap,
    current: usize,
    temperature: f32,
) -> Result<ReplayBatch> {
    label_replay(teacher, current_x.clone(), labels, current, TargetKind::Soft(temperature))
}

/// Generative replay: `n` inputs sampled from a frozen generator, labelled
/// by a frozen classifier (hard labels, or soft targets when distilling).
#[allow(clippy::too_many_arguments)]
pub fn replay_generated(
    generator: &impl Generator,
    teacher: &impl Classifier,
    n: usize,
    labels: &LabelMap,
    current: usize,
    kind: TargetKind,
    rng: &mut impl Rng,
) -> Result<ReplayBatch> {
    let x = generator.sample(n, rng)?;
    label_replay(teacher, x, labels, current, kind)
}

/// Records `BCE + KL` for rows `start..end` of a VAE pass over `x`.
pub fn generative_loss_node(
    tape: &mut Tape,
    pass: &VaeForward,
    x: NodeId,
    start: usize,
    end: usize,
) -> Result<NodeId> {
    let rows = tape.value(x).rows();
    let (logits, target, mu, logvar) = if start == 0 && end == rows {
        (pass.logits, x, pass.mu, pass.logvar)
    } else {
        (
            tape.slice_rows(pass.logits, start, end)?,
            tape.slice_rows(x, start, end)?,
            tape.slice_rows(pass.mu, start, end)?,
            tape.slice_rows(pass.logvar, start, end)?,
        )
    };
    let bce = tape.bce_with_logits(logits, target)?;
    let kl = tape.kl_std_normal(mu, logvar)?;
    Ok(tape.add(bce, kl)?)
}

/// One optimizer step of a standalone generator on the current inputs and,
/// after the first task, the replayed inputs, weighted `1/N` and `1 - 1/N`.
/// Returns the weighted loss.
pub fn train_generator_step(
    generator: &mut VaeNet,
    adam: &mut Adam,
    current: &Tensor,
    replay: Option<&Tensor>,
    n_tasks: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let weights = LossWeights::new(n_tasks)?;
    if replay.is_some() != (n_tasks > 1) {
        return Err(contract("generator replay must be present exactly after the first task"));
    }
    let m = current.rows();
    let x = match replay {
        Some(r) => Tensor::concat_rows(&[current, r])?,
        None => current.clone(),
    };
    let rows = x.rows();
    let noise = crate::models::standard_normal(rows, generator.vae().latent, rng);
    let (loss_value, grads) = {
        let params = Generator::params(generator);
        let mut tape = Tape::new(params);
        let xin = tape.input(x);
        let pass = generator.vae().forward(&mut tape, xin, noise)?;
        let loss = if replay.is_some() {
            let cur = generative_loss_node(&mut tape, &pass, xin, 0, m)?;
            let rep = generative_loss_node(&mut tape, &pass, xin, m, rows)?;
            let cur = tape.scale(cur, weights.current as f32);
            let rep = tape.scale(rep, weights.replay as f32);
            tape.add(cur, rep)?
        } else {
            generative_loss_node(&mut tape, &pass, xin, 0, rows)?
        };
        (tape.value(loss).item() as f64, tape.backward(loss)?)
    };
    adam.step(generator.params_mut(), &grads)?;
    Ok(loss_value)
}
