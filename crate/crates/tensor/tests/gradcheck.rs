//! Autodiff against central finite differences of an independent `f64`
//! forward implementation of the same graphs.

use clbench_tensor::{ParamId, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut Pcg32, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

struct Oracle64 {
    values: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Oracle64 {
    fn from_store(store: &ParamStore) -> Self {
        Self {
            values: store
                .tensors()
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
            shapes: store.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    fn central_difference(&mut self, p: usize, i: usize, f: &dyn Fn(&Oracle64) -> f64) -> f64 {
        let orig = self.values[p][i];
        self.values[p][i] = orig + H;
        let up = f(self);
        self.values[p][i] = orig - H;
        let down = f(self);
        self.values[p][i] = orig;
        (up - down) / (2.0 * H)
    }
}

fn dense64(x: &[f64], rows: usize, w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        for o in 0..out_dim {
            let mut s = b[o];
            for k in 0..in_dim {
                s += x[r * in_dim + k] * w[k * out_dim + o];
            }
            y[r * out_dim + o] = s;
        }
    }
    y
}

fn relu64(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

fn rel_err(auto: f64, fd: f64) -> f64 {
    (auto - fd).abs() / (auto.abs() + 1e-8)
}

struct Mlp {
    store: ParamStore,
    ids: Vec<ParamId>,
    dims: [usize; 4],
}

fn build_mlp(rng: &mut Pcg32, dims: [usize; 4]) -> Mlp {
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    for l in 0..3 {
        let bound = 1.0 / (dims[l] as f32).sqrt();
        ids.push(store.add(format!("w{l}"), uniform(rng, &[dims[l], dims[l + 1]], bound)));
        ids.push(store.add(format!("b{l}"), uniform(rng, &[dims[l + 1]], 0.1)));
    }
    Mlp { store, ids, dims }
}

fn mlp_loss_tape(m: &Mlp, x: &Tensor, active: &[usize], targets: &[usize]) -> (f32, Vec<Tensor>) {
    let mut tape = Tape::new(&m.store);
    let mut h = tape.input(x.clone());
    for l in 0..3 {
        let w = tape.param(m.ids[2 * l]);
        let b = tape.param(m.ids[2 * l + 1]);
        h = tape.linear(h, w, b).unwrap();
        if l < 2 {
            h = tape.relu(h);
        }
    }
    let lp = tape.masked_log_softmax(h, active, 1.0).unwrap();
    let loss = tape.nll(lp, targets).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.value(loss).item(), g.into_tensors())
}

fn mlp_loss64(o: &Oracle64, dims: [usize; 4], x: &[f64], rows: usize, active: &[usize], targets: &[usize]) -> f64 {
    let mut h = x.to_vec();
    for l in 0..3 {
        h = dense64(&h, rows, &o.values[2 * l], &o.values[2 * l + 1], dims[l], dims[l + 1]);
        if l < 2 {
            relu64(&mut h);
        }
    }
    let mut total = 0.0;
    for r in 0..rows {
        let row = &h[r * dims[3]..(r + 1) * dims[3]];
        let sel: Vec<f64> = active.iter().map(|&c| row[c]).collect();
        let max = sel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sel.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - sel[targets[r]];
    }
    total / rows as f64
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = Pcg32::seed_from_u64(11);
    let dims = [6, 5, 4, 5];
    let m = build_mlp(&mut rng, dims);
    let rows = 4;
    let x = uniform(&mut rng, &[rows, dims[0]], 1.0);
    let active = [1, 2, 4];
    let targets = [0, 2, 1, 1];
    let (_, grads) = mlp_loss_tape(&m, &x, &active, &targets);

    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut oracle = Oracle64::from_store(&m.store);
    let f = |o: &Oracle64| mlp_loss64(o, m.dims, &x64, rows, &active, &targets);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 60 {
        let p = rng.gen_range(0..oracle.values.len());
        let i = rng.gen_range(0..oracle.values[p].len());
        let fd = oracle.central_difference(p, i, &f);
        let auto = grads[p].data()[i] as f64;
        worst = worst.max(rel_err(auto, fd));
        checked += 1;
    }
    assert!(worst < TOL, "worst relative error {worst:e}");
}

#[test]
fn output_units_outside_active_set_get_zero_gradient() {
    let mut rng = Pcg32::seed_from_u64(3);
    let dims = [4, 3, 3, 6];
    let m = build_mlp(&mut rng, dims);
    let x = uniform(&mut rng, &[2, 4], 1.0);
    let (_, grads) = mlp_loss_tape(&m, &x, &[0, 1], &[1, 0]);
    // output weights are [3, 6]: columns 2..6 belong to inactive units
    let w_out = &grads[4];
    for r in 0..3 {
        for c in 2..6 {
            assert_eq!(w_out.data()[r * 6 + c], 0.0);
        }
    }
    for c in 2..6 {
        assert_eq!(grads[5].data()[c], 0.0);
    }
}

struct Vae {
    store: ParamStore,
    ids: Vec<ParamId>,
    d: usize,
    h: usize,
    l: usize,
}

fn build_vae(rng: &mut Pcg32, d: usize, h: usize, l: usize) -> Vae {
    let layers = [(d, h), (h, 2 * l), (l, h), (h, d)];
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    for (n, &(i, o)) in layers.iter().enumerate() {
        let bound = 1.0 / (i as f32).sqrt();
        ids.push(store.add(format!("w{n}"), uniform(rng, &[i, o], bound)));
        ids.push(store.add(format!("b{n}"), uniform(rng, &[o], 0.1)));
    }
    Vae { store, ids, d, h, l }
}

fn vae_loss_tape(v: &Vae, x: &Tensor, noise: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new(&v.store);
    let xin = tape.input(x.clone());
    let p = |tape: &mut Tape, k: usize| (tape.param(v.ids[2 * k]), tape.param(v.ids[2 * k + 1]));
    let (w, b) = p(&mut tape, 0);
    let h = tape.linear(xin, w, b).unwrap();
    let h = tape.relu(h);
    let (w, b) = p(&mut tape, 1);
    let stats = tape.linear(h, w, b).unwrap();
    let mu = tape.slice_cols(stats, 0, v.l).unwrap();
    let lv = tape.slice_cols(stats, v.l, 2 * v.l).unwrap();
    let z = tape.reparameterize(mu, lv, noise.clone()).unwrap();
    let (w, b) = p(&mut tape, 2);
    let hd = tape.linear(z, w, b).unwrap();
    let hd = tape.relu(hd);
    let (w, b) = p(&mut tape, 3);
    let logits = tape.linear(hd, w, b).unwrap();
    let bce = tape.bce_with_logits(logits, xin).unwrap();
    let kl = tape.kl_std_normal(mu, lv).unwrap();
    let loss = tape.add(bce, kl).unwrap();
    tape.backward(loss).unwrap().into_tensors()
}

fn vae_loss64(o: &Oracle64, v: &Vae, x: &[f64], rows: usize, noise: &[f64]) -> f64 {
    let (d, h, l) = (v.d, v.h, v.l);
    let mut hid = dense64(x, rows, &o.values[0], &o.values[1], d, h);
    relu64(&mut hid);
    let stats = dense64(&hid, rows, &o.values[2], &o.values[3], h, 2 * l);
    let mut z = vec![0.0; rows * l];
    let mut kl = 0.0;
    for r in 0..rows {
        for j in 0..l {
            let mu = stats[r * 2 * l + j];
            let lv = stats[r * 2 * l + l + j];
            z[r * l + j] = mu + (0.5 * lv).exp() * noise[r * l + j];
            kl += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
        }
    }
    let mut hd = dense64(&z, rows, &o.values[4], &o.values[5], l, h);
    relu64(&mut hd);
    let logits = dense64(&hd, rows, &o.values[6], &o.values[7], h, d);
    let mut bce = 0.0;
    for (lg, &xv) in logits.iter().zip(x) {
        let p = 1.0 / (1.0 + (-lg).exp());
        bce -= xv * p.ln() + (1.0 - xv) * (1.0 - p).ln();
    }
    (bce + kl) / rows as f64
}

#[test]
fn vae_graph_matches_finite_differences() {
    let mut rng = Pcg32::seed_from_u64(5);
    let v = build_vae(&mut rng, 7, 5, 3);
    let rows = 3;
    let x = Tensor::new(
        vec![rows, v.d],
        (0..rows * v.d).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let noise = uniform(&mut rng, &[rows, v.l], 1.5);
    let grads = vae_loss_tape(&v, &x, &noise);

    let x64: Vec<f64> = x.data().iter().map(|&a| a as f64).collect();
    let n64: Vec<f64> = noise.data().iter().map(|&a| a as f64).collect();
    let mut oracle = Oracle64::from_store(&v.store);
    let f = |o: &Oracle64| vae_loss64(o, &v, &x64, rows, &n64);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let p = rng.gen_range(0..oracle.values.len());
        let i = rng.gen_range(0..oracle.values[p].len());
        let fd = oracle.central_difference(p, i, &f);
        worst = worst.max(rel_err(grads[p].data()[i] as f64, fd));
    }
    assert!(worst < TOL, "worst relative error {worst:e}");
    assert_eq!(oracle.shapes.len(), 8);
}
