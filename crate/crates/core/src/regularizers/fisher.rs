use clbench_tensor::{Tape, Tensor};

use crate::data::{LabelMap, TaskData};
use crate::error::{contract, Error, Result};
use crate::models::Classifier;

/// Diagonal empirical Fisher information of `model` on task `task`'s
/// training data: the mean over examples of the squared gradient of the
/// log-likelihood of each example's provided label, computed one example at
/// a time. Only the first `limit` examples are used when given.
///
/// Squares are accumulated in `f64`; every entry of the result is `>= 0`.
pub fn estimate_fisher(
    model: &impl Classifier,
    data: &TaskData,
    labels: &LabelMap,
    task: usize,
    gate: Option<usize>,
    limit: Option<usize>,
) -> Result<Vec<Tensor>> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(contract("Fisher estimate over zero examples"));
    }
    let active = labels.train_units(task)?;
    let params = model.params();
    let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for i in 0..n {
        let (x, digit) = data.batch(&[i]);
        let target = labels.target(task, digit[0])?;
        let mut tape = Tape::new(params);
        let xin = tape.input(x);
        let logits = model.logits(&mut tape, xin, gate)?;
        let lp = tape.masked_log_softmax(logits, &active, 1.0)?;
        let loss = tape.nll(lp, &[target])?;
        let grads = tape.backward(loss)?;
        for (a, g) in acc.iter_mut().zip(grads.tensors()) {
            for (s, &v) in a.iter_mut().zip(g.data()) {
                let v = v as f64;
                *s += v * v;
            }
        }
    }
    acc.into_iter()
        .zip(params.tensors())
        .map(|(a, t)| {
            let data: Vec<f32> = a.iter().map(|&s| (s / n as f64) as f32).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite Fisher entry".into()));
            }
            Ok(Tensor::new(t.shape().to_vec(), data)?)
        })
        .collect()
}
