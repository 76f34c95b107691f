//! Invariants of the losses, regularizers, label maps and data protocols,
//! checked against independent `f64` reimplementations. Each check is a
//! plain function that panics on failure, so the unit-test target and the
//! acceptance run share them.

use std::collections::BTreeSet;

use clbench::data::{build_permuted, build_split, permutations, LabelMap, Scenario};
use clbench::harness::{run_experiment, Method, RunConfig};
use clbench::losses::{distillation_loss, generative_loss};
use clbench::models::{Classifier, ClassifierNet, Generator, RtfNet};
use clbench::regularizers::{estimate_fisher, EwcStore, OnlineEwcStore, SiStore};
use clbench::replay::Snapshot;
use clbench_tensor::{Adam, AdamConfig, Gradients, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};

use crate::common;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

fn random_store(rng: &mut Pcg32, shapes: &[&[usize]]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.add(format!("p{i}"), Tensor::new(shape.to_vec(), data).unwrap());
    }
    s
}

fn positive_like(rng: &mut Pcg32, store: &ParamStore) -> Vec<Tensor> {
    store
        .tensors()
        .iter()
        .map(|t| {
            let data = (0..t.len()).map(|_| rng.gen_range(0.0..2.0)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

fn perturbed(rng: &mut Pcg32, store: &ParamStore, scale: f32) -> ParamStore {
    let mut s = store.clone();
    for t in s.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    s
}

fn values64(store: &ParamStore) -> Vec<Vec<f64>> {
    store.tensors().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
}

/// Central differences of `f` at every scalar of `theta`.
fn fd_gradient(theta: &[Vec<f64>], f: &dyn Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut work = theta.to_vec();
    let mut out = Vec::new();
    for p in 0..theta.len() {
        let mut g = Vec::new();
        for i in 0..theta[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let up = f(&work);
            work[p][i] = orig - h;
            let down = f(&work);
            work[p][i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

fn assert_close(auto: &[Tensor], fd: &[Vec<f64>], rel: f64, abs: f64) {
    for (a, f) in auto.iter().zip(fd) {
        for (&x, &y) in a.data().iter().zip(f) {
            let err = (x as f64 - y).abs();
            assert!(err <= abs + rel * y.abs(), "autodiff {x} vs finite difference {y}");
        }
    }
}

// ---- quadratic penalties ----

fn quad64(theta: &[Vec<f64>], anchor: &[Vec<f64>], weight: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for p in 0..theta.len() {
        for i in 0..theta[p].len() {
            let d = theta[p][i] - anchor[p][i];
            s += weight[p][i] * d * d;
        }
    }
    s
}

fn to64(ts: &[Tensor]) -> Vec<Vec<f64>> {
    ts.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
}

pub fn ewc_penalty_is_zero_at_anchor_and_matches_oracle_gradient() {
    let mut rng = Pcg32::seed_from_u64(1);
    let anchor1 = random_store(&mut rng, &[&[3, 4], &[4]]);
    let f1 = positive_like(&mut rng, &anchor1);
    let mut ewc = EwcStore::new();
    ewc.consolidate(&anchor1, f1.clone()).unwrap();
    assert_eq!(ewc.penalty(&anchor1), 0.0);

    let anchor2 = perturbed(&mut rng, &anchor1, 0.5);
    let f2 = positive_like(&mut rng, &anchor1);
    ewc.consolidate(&anchor2, f2.clone()).unwrap();

    let theta = perturbed(&mut rng, &anchor1, 0.8);
    let (a1, a2) = (values64(&anchor1), values64(&anchor2));
    let (w1, w2) = (to64(&f1), to64(&f2));
    let oracle = |t: &[Vec<f64>]| 0.5 * quad64(t, &a1, &w1) + 0.5 * quad64(t, &a2, &w2);
    let th = values64(&theta);
    assert!((ewc.penalty(&theta) - oracle(&th)).abs() < 1e-6 * oracle(&th).max(1.0));

    let mut tape = Tape::new(&theta);
    let p = ewc.penalty_node(&mut tape, &theta).unwrap().unwrap();
    let g = tape.backward(p).unwrap();
    assert_close(g.tensors(), &fd_gradient(&th, &oracle), 1e-4, 1e-5);
}

pub fn online_ewc_penalty_uses_decayed_running_fisher() {
    let mut rng = Pcg32::seed_from_u64(2);
    let gamma = 0.7;
    let anchor1 = random_store(&mut rng, &[&[5], &[2, 2]]);
    let f1 = positive_like(&mut rng, &anchor1);
    let anchor2 = perturbed(&mut rng, &anchor1, 0.5);
    let f2 = positive_like(&mut rng, &anchor1);
    let mut store = OnlineEwcStore::new(gamma).unwrap();
    store.consolidate(&anchor1, f1.clone()).unwrap();
    store.consolidate(&anchor2, f2.clone()).unwrap();
    assert_eq!(store.penalty(&anchor2), 0.0);

    let running: Vec<Vec<f64>> = to64(&f1)
        .iter()
        .zip(to64(&f2))
        .map(|(a, b)| a.iter().zip(&b).map(|(x, y)| gamma * x + y).collect())
        .collect();
    let a2 = values64(&anchor2);
    let oracle = |t: &[Vec<f64>]| quad64(t, &a2, &running);
    let theta = perturbed(&mut rng, &anchor2, 1.0);
    let th = values64(&theta);
    assert!((store.penalty(&theta) - oracle(&th)).abs() < 1e-5 * oracle(&th).max(1.0));

    let mut tape = Tape::new(&theta);
    let p = store.penalty_node(&mut tape, &theta).unwrap().unwrap();
    let g = tape.backward(p).unwrap();
    assert_close(g.tensors(), &fd_gradient(&th, &oracle), 1e-4, 1e-5);
}

/// Minimizes `sum (theta - target)^2` with Adam for `steps` steps, feeding
/// every step to `si` and recording `(before, after, grad)`.
fn si_trace(
    store: &mut ParamStore,
    adam: &mut Adam,
    si: &mut SiStore,
    target: f32,
    steps: usize,
    trace: &mut Vec<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)>,
) {
    for _ in 0..steps {
        let grads: Vec<Tensor> = store.tensors().iter().map(|t| t.map(|v| 2.0 * (v - target))).collect();
        let before = store.tensors().to_vec();
        let g = Gradients::new(grads.clone());
        adam.step(store, &g).unwrap();
        si.accumulate(&before, store, &g).unwrap();
        trace.push((before, store.tensors().to_vec(), grads));
    }
}

pub fn si_importance_equals_replay_of_recorded_trace() {
    let mut rng = Pcg32::seed_from_u64(3);
    let mut store = random_store(&mut rng, &[&[4, 3], &[3]]);
    let xi = 0.1;
    let start = values64(&store);
    let mut si = SiStore::new(&store, xi).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(0.05), &store);
    let mut trace1 = Vec::new();
    si_trace(&mut store, &mut adam, &mut si, 0.5, 30, &mut trace1);
    si.consolidate(&store).unwrap();
    let mid = values64(&store);
    let mut trace2 = Vec::new();
    si_trace(&mut store, &mut adam, &mut si, -0.3, 25, &mut trace2);
    si.consolidate(&store).unwrap();
    let end = values64(&store);

    let replay = |trace: &[(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)]| -> Vec<Vec<f64>> {
        let mut omega: Vec<Vec<f64>> = start.iter().map(|p| vec![0.0; p.len()]).collect();
        for (before, after, grad) in trace {
            for p in 0..omega.len() {
                for i in 0..omega[p].len() {
                    let d = after[p].data()[i] as f64 - before[p].data()[i] as f64;
                    omega[p][i] -= grad[p].data()[i] as f64 * d;
                }
            }
        }
        omega
    };
    let (o1, o2) = (replay(&trace1), replay(&trace2));
    let mut expected: Vec<Vec<f64>> = start.iter().map(|p| vec![0.0; p.len()]).collect();
    for p in 0..expected.len() {
        for i in 0..expected[p].len() {
            let d1 = mid[p][i] - start[p][i];
            expected[p][i] += o1[p][i] / (d1 * d1 + xi);
            let d2 = end[p][i] - mid[p][i];
            expected[p][i] += o2[p][i] / (d2 * d2 + xi);
        }
    }
    assert_eq!(si.importance(), &expected[..]);
    assert!(si.omega().iter().flatten().all(|&w| w == 0.0));

    // penalty vanishes at the latest anchor and has the oracle gradient elsewhere
    assert_eq!(si.penalty(&store), 0.0);
    let anchor = values64(&store);
    let weight: Vec<Vec<f64>> = expected.iter().map(|p| p.iter().map(|&v| v as f32 as f64).collect()).collect();
    let oracle = |t: &[Vec<f64>]| quad64(t, &anchor, &weight);
    let theta = perturbed(&mut rng, &store, 0.5);
    let mut tape = Tape::new(&theta);
    let p = si.penalty_node(&mut tape, &theta).unwrap().unwrap();
    let g = tape.backward(p).unwrap();
    assert_close(g.tensors(), &fd_gradient(&values64(&theta), &oracle), 1e-4, 1e-5);
}

// ---- Fisher ----

/// Log-likelihood of `target` among `active` outputs of a 3-layer ReLU
/// network with `[in, out]` weights, in `f64`.
fn mlp_loglik64(theta: &[Vec<f64>], dims: [usize; 4], x: &[f64], active: &[usize], target: usize) -> f64 {
    let mut h = x.to_vec();
    for l in 0..3 {
        let (w, b) = (&theta[2 * l], &theta[2 * l + 1]);
        let mut y = b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate() {
                *yo += hk * w[k * dims[l + 1] + o];
            }
        }
        if l < 2 {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    let sel: Vec<f64> = active.iter().map(|&c| h[c]).collect();
    let max = sel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + sel.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    sel[target] - lse
}

pub fn fisher_matches_per_example_finite_differences() {
    let mnist = common::synthetic(4, 3, 9);
    let stream = build_split(&mnist).unwrap();
    let labels = stream.label_map(Scenario::Class).unwrap();
    let mut rng = Pcg32::seed_from_u64(4);
    let dims = [16, 6, 6, 10];
    let net = ClassifierNet::new(dims[0], dims[1], dims[3], &mut rng);
    let task = 1;
    let data = &stream.tasks[task].train;
    let fisher = estimate_fisher(&net, data, &labels, task, None, None).unwrap();
    assert!(fisher.iter().all(|f| f.data().iter().all(|&v| v >= 0.0)));

    let theta = values64(net.params());
    let active = labels.train_units(task).unwrap();
    let mut expected: Vec<Vec<f64>> = theta.iter().map(|p| vec![0.0; p.len()]).collect();
    for i in 0..data.len() {
        let (x, d) = data.batch(&[i]);
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let target = labels.target(task, d[0]).unwrap();
        let g = fd_gradient(&theta, &|t| mlp_loglik64(t, dims, &x64, &active, target));
        for (e, gp) in expected.iter_mut().zip(&g) {
            for (ev, gv) in e.iter_mut().zip(gp) {
                *ev += gv * gv / data.len() as f64;
            }
        }
    }
    assert_close(&fisher, &expected, 1e-3, 1e-6);

    // a cap uses only the first examples
    let capped = estimate_fisher(&net, data, &labels, task, None, Some(2)).unwrap();
    assert_ne!(capped, fisher);
}

/// Softmax log-probabilities of `z[active] / t`, in `f64`.
fn log_softmax64(z: &[f64], active: &[usize], t: f64) -> Vec<f64> {
    let sel: Vec<f64> = active.iter().map(|&c| z[c] / t).collect();
    let max = sel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + sel.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    sel.iter().map(|v| v - lse).collect()
}

fn mlp_logits64(theta: &[Vec<f64>], dims: [usize; 4], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..3 {
        let (w, b) = (&theta[2 * l], &theta[2 * l + 1]);
        let mut y = b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate() {
                *yo += hk * w[k * dims[l + 1] + o];
            }
        }
        if l < 2 {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

/// The replay training objective on a stacked batch: cross-entropy on the
/// current rows, distillation at `T = 2` on the replayed rows, weighted
/// `1/N` and `1 - 1/N`, plus an EWC penalty.
pub fn replay_objective_matches_finite_differences() {
    let mut rng = Pcg32::seed_from_u64(8);
    let dims = [5, 6, 6, 4];
    let net = ClassifierNet::new(dims[0], dims[1], dims[3], &mut rng);
    let (m, r, n_tasks, t, lambda) = (3, 4, 2usize, 2.0f32, 7.0);
    let x: Vec<f32> = (0..(m + r) * dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cur_units = [0usize, 1, 2, 3];
    let cur_targets = [2usize, 3, 1];
    let rep_units = [0usize, 1, 2, 3];
    let soft: Vec<f32> = (0..r)
        .flat_map(|_| {
            let a: f32 = rng.gen_range(0.05..0.95);
            [a, 1.0 - a, 0.0, 0.0]
        })
        .collect();
    let anchor = perturbed(&mut rng, net.params(), 0.3);
    let fisher = positive_like(&mut rng, net.params());
    let mut ewc = EwcStore::new();
    ewc.consolidate(&anchor, fisher.clone()).unwrap();

    let mut tape = Tape::new(net.params());
    let xin = tape.input(Tensor::matrix(m + r, dims[0], x.clone()).unwrap());
    let logits = net.logits(&mut tape, xin, None).unwrap();
    let cur = tape.slice_rows(logits, 0, m).unwrap();
    let cur = tape.gather_cols_per_row(cur, cur_units.repeat(m), 4).unwrap();
    let lp = tape.log_softmax(cur, 1.0).unwrap();
    let cur_loss = tape.nll(lp, &cur_targets).unwrap();
    let rep = tape.slice_rows(logits, m, m + r).unwrap();
    let rep = tape.gather_cols_per_row(rep, rep_units.repeat(r), 4).unwrap();
    let lp = tape.log_softmax(rep, t).unwrap();
    let target = Tensor::matrix(r, 4, soft.clone()).unwrap();
    let rep_loss = tape.soft_cross_entropy(lp, target, t * t).unwrap();
    let w = 1.0 / n_tasks as f32;
    let a = tape.scale(cur_loss, w);
    let b = tape.scale(rep_loss, 1.0 - w);
    let loss = tape.add(a, b).unwrap();
    let pen = ewc.penalty_node(&mut tape, net.params()).unwrap().unwrap();
    let pen = tape.scale(pen, lambda);
    let loss = tape.add(loss, pen).unwrap();
    let grads = tape.backward(loss).unwrap();

    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let (a64, f64w) = (values64(&anchor), to64(&fisher));
    let objective = |th: &[Vec<f64>]| {
        let mut cur = 0.0;
        for (i, &tgt) in cur_targets.iter().enumerate() {
            let z = mlp_logits64(th, dims, &x64[i * dims[0]..(i + 1) * dims[0]]);
            cur -= log_softmax64(&z, &cur_units, 1.0)[tgt];
        }
        let mut rep = 0.0;
        for i in 0..r {
            let row = m + i;
            let z = mlp_logits64(th, dims, &x64[row * dims[0]..(row + 1) * dims[0]]);
            let lp = log_softmax64(&z, &rep_units, t as f64);
            for (c, l) in lp.iter().enumerate() {
                rep -= soft[i * 4 + c] as f64 * l;
            }
        }
        let w = 1.0 / n_tasks as f64;
        let tt = (t * t) as f64;
        w * cur / m as f64 + (1.0 - w) * tt * rep / r as f64 + lambda as f64 * 0.5 * quad64(th, &a64, &f64w)
    };
    let theta = values64(net.params());
    close_value(tape.value(loss).item() as f64, objective(&theta));
    assert_close(grads.tensors(), &fd_gradient(&theta, &objective), 1e-4, 1e-6);
}

fn dense64(x: &[f64], w: &[f64], b: &[f64], relu: bool) -> Vec<f64> {
    let mut y = b.to_vec();
    let n = b.len();
    for (k, xk) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xk * w[k * n + o];
        }
    }
    if relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

/// The joint objective of the generative classifier on current data:
/// cross-entropy of the head plus the summed BCE reconstruction and KL
/// terms, all averaged over the batch.
pub fn generative_classifier_objective_matches_finite_differences() {
    let mut rng = Pcg32::seed_from_u64(9);
    let (d, h, l, width, rows) = (6, 5, 3, 4, 3);
    let net = RtfNet::new(d, h, l, width, &mut rng);
    let x: Vec<f32> = (0..rows * d).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise: Vec<f32> = (0..rows * l).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let active = [1usize, 3];
    let targets = [0usize, 1, 1];

    let mut tape = Tape::new(Classifier::params(&net));
    let xin = tape.input(Tensor::matrix(rows, d, x.clone()).unwrap());
    let pass = net.vae().forward(&mut tape, xin, Tensor::matrix(rows, l, noise.clone()).unwrap()).unwrap();
    let bce = tape.bce_with_logits(pass.logits, xin).unwrap();
    let kl = tape.kl_std_normal(pass.mu, pass.logvar).unwrap();
    let logits = net.head_logits(&mut tape, pass.hidden).unwrap();
    let lp = tape.masked_log_softmax(logits, &active, 1.0).unwrap();
    let ce = tape.nll(lp, &targets).unwrap();
    let gen = tape.add(bce, kl).unwrap();
    let loss = tape.add(ce, gen).unwrap();
    let grads = tape.backward(loss).unwrap();

    let objective = |th: &[Vec<f64>]| {
        let mut total = 0.0;
        for r in 0..rows {
            let xr: Vec<f64> = x[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect();
            let h1 = dense64(&xr, &th[0], &th[1], true);
            let h2 = dense64(&h1, &th[2], &th[3], true);
            let stats = dense64(&h2, &th[4], &th[5], false);
            let mut z = vec![0.0; l];
            for j in 0..l {
                let (mu, lv) = (stats[j], stats[l + j]);
                z[j] = mu + (0.5 * lv).exp() * noise[r * l + j] as f64;
                total += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
            }
            let d1 = dense64(&z, &th[6], &th[7], true);
            let d2 = dense64(&d1, &th[8], &th[9], true);
            for (lg, xv) in dense64(&d2, &th[10], &th[11], false).iter().zip(&xr) {
                let p = 1.0 / (1.0 + (-lg).exp());
                total -= xv * p.ln() + (1.0 - xv) * (1.0 - p).ln();
            }
            let head = dense64(&h2, &th[12], &th[13], false);
            total -= log_softmax64(&head, &active, 1.0)[targets[r]];
        }
        total / rows as f64
    };
    let theta = values64(Classifier::params(&net));
    close_value(tape.value(loss).item() as f64, objective(&theta));
    assert_close(grads.tensors(), &fd_gradient(&theta, &objective), 1e-4, 1e-6);
}

fn close_value(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
}

// ---- losses ----

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>)
where
    S::Value: std::fmt::Debug,
{
    let config = ProptestConfig {
        cases: 200,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new(config);
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

pub fn kl_is_non_negative_and_zero_only_at_standard_normal() {
    let strategy = (prop::collection::vec(-3.0f32..3.0, 4), prop::collection::vec(0.05f32..4.0, 4));
    check(strategy, |(mu, sigma)| {
        let x = Tensor::full(&[1, 2], 0.5);
        let recon = Tensor::full(&[1, 2], 0.5);
        let m = Tensor::matrix(1, 4, mu.clone()).unwrap();
        let s = Tensor::matrix(1, 4, sigma.clone()).unwrap();
        let kl = generative_loss(&x, &m, &s, &recon).unwrap().kl;
        prop_assert!(kl >= 0.0);
        let far = mu.iter().any(|v| v.abs() > 1e-2) || sigma.iter().any(|v| (v - 1.0).abs() > 1e-2);
        if far {
            prop_assert!(kl > 0.0);
        }
        Ok(())
    });
    let x = Tensor::full(&[1, 2], 0.5);
    let zero = generative_loss(&x, &Tensor::zeros(&[1, 4]), &Tensor::full(&[1, 4], 1.0), &x).unwrap();
    assert_eq!(zero.kl, 0.0);
}

pub fn distillation_is_minimized_by_the_targets() {
    let strategy = (prop::collection::vec(0.01f32..1.0, 5), prop::collection::vec(0.01f32..1.0, 5));
    check(strategy, |(q, p)| {
        let norm = |v: &[f32]| {
            let s: f32 = v.iter().sum();
            Tensor::matrix(1, v.len(), v.iter().map(|x| x / s).collect()).unwrap()
        };
        let (q, p) = (norm(&q), norm(&p));
        let at_target = distillation_loss(&q, &q, 2.0).unwrap();
        let elsewhere = distillation_loss(&p, &q, 2.0).unwrap();
        prop_assert!(elsewhere >= at_target - 1e-6);
        Ok(())
    });
}

pub fn permutations_are_bijections() {
    check((any::<u64>(), 1usize..5), |(seed, n)| {
        let perms = permutations(n, 64, seed);
        prop_assert_eq!(&perms[0], &(0..64).collect::<Vec<_>>());
        for p in &perms {
            let mut s = p.clone();
            s.sort_unstable();
            prop_assert_eq!(s, (0..64).collect::<Vec<_>>());
        }
        Ok(())
    });
}

pub fn label_map_set_algebra() {
    check((1usize..12, 1usize..5), |(n_tasks, per_task)| {
        let classes: Vec<Vec<u8>> = (0..n_tasks).map(|_| (0..per_task as u8).collect()).collect();
        let task = LabelMap::new(Scenario::Task, classes.clone()).unwrap();
        let class = LabelMap::new(Scenario::Class, classes.clone()).unwrap();
        let domain = LabelMap::new(Scenario::Domain, classes).unwrap();

        let mut union = BTreeSet::new();
        for t in 0..n_tasks {
            let head: BTreeSet<usize> = task.train_units(t).unwrap().into_iter().collect();
            prop_assert!(union.is_disjoint(&head));
            union.extend(head.iter().copied());
            let grown: BTreeSet<usize> = class.train_units(t).unwrap().into_iter().collect();
            prop_assert_eq!(&grown, &union);
            prop_assert_eq!(domain.train_units(t).unwrap(), domain.train_units(0).unwrap());
            prop_assert_eq!(class.eval_units(0, t + 1).unwrap(), class.train_units(t).unwrap());
            for d in 0..per_task as u8 {
                for m in [&task, &class, &domain] {
                    let units = m.train_units(t).unwrap();
                    prop_assert_eq!(units[m.target(t, d).unwrap()], m.unit(t, d).unwrap());
                }
            }
        }
        prop_assert_eq!(union.len(), task.output_width());
        prop_assert_eq!(domain.output_width(), per_task);
        Ok(())
    });
}

pub fn permuted_tasks_view_padded_images_through_their_permutation() {
    let mnist = common::synthetic(28, 2, 5);
    let stream = build_permuted(&mnist, 3, 11).unwrap();
    let padded = mnist.train.padded(32).unwrap();
    let perms = permutations(3, 1024, 11);
    for (t, task) in stream.tasks.iter().enumerate() {
        let img = task.train.images(&[7]);
        let src = padded.images().row(task.train.source_indices()[7]);
        for (j, &v) in img.data().iter().enumerate() {
            assert_eq!(v, src[perms[t][j]]);
        }
    }
}

// ---- snapshots and determinism ----

pub fn snapshots_do_not_follow_the_live_model() {
    let mut rng = Pcg32::seed_from_u64(6);
    let mut net = ClassifierNet::new(4, 5, 2, &mut rng);
    let snap = Snapshot::capture(&net);
    let frozen = snap.params().clone();
    let mut adam = Adam::new(AdamConfig::with_lr(0.1), net.params());
    let ones = Gradients::new(net.params().tensors().iter().map(|t| t.map(|_| 1.0)).collect());
    adam.step(net.params_mut(), &ones).unwrap();
    assert_eq!(snap.params(), &frozen);
    assert_ne!(net.params(), &frozen);
}

fn tiny_config(method: Method, scenario: Scenario, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(clbench::data::Protocol::Split, scenario, method, seed);
    c.iters = 20;
    c.hidden = 16;
    c.batch = 16;
    c.replay_batch = 16;
    c
}

pub fn same_seed_gives_identical_runs() {
    let mnist = common::synthetic(6, 6, 1);
    for method in [Method::DgrDistill, Method::Si, Method::Rtf] {
        let c = tiny_config(method, Scenario::Class, 3);
        let a = run_experiment(&c, &mnist).unwrap();
        let b = run_experiment(&c, &mnist).unwrap();
        assert_eq!(a.accuracies, b.accuracies, "{method}");
        assert_eq!(a.loss_curves, b.loss_curves, "{method}");
        let other = run_experiment(&tiny_config(method, Scenario::Class, 4), &mnist).unwrap();
        assert_ne!(a.loss_curves, other.loss_curves, "{method}");
    }
}
