#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use clbench::data::{resolve_data_dir, Dataset, Mnist};
use clbench_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

/// Small learnable stand-in for MNIST: each digit lights up its own patch
/// of a `side x side` image, plus uniform noise.
pub fn synthetic(side: usize, per_class: usize, seed: u64) -> Mnist {
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut make = |n: usize| {
        let dim = side * side;
        let mut data = Vec::with_capacity(10 * n * dim);
        let mut labels = Vec::with_capacity(10 * n);
        for i in 0..10 * n {
            let digit = (i % 10) as u8;
            let mut img: Vec<f32> = (0..dim).map(|_| rng.gen_range(0.0..0.3)).collect();
            let start = (digit as usize * dim) / 10;
            for p in img.iter_mut().skip(start).take(dim / 10) {
                *p = rng.gen_range(0.7..1.0);
            }
            data.extend(img);
            labels.push(digit);
        }
        Arc::new(Dataset::new(side, Tensor::matrix(10 * n, dim, data).unwrap(), labels).unwrap())
    };
    Mnist {
        train: make(per_class),
        test: make(per_class / 2 + 1),
    }
}

/// The real MNIST files, when present.
pub fn real_mnist() -> Option<Mnist> {
    let dir = mnist_dir();
    match Mnist::load(&dir) {
        Ok(m) => Some(m),
        Err(e) => {
            eprintln!("skipping: MNIST not available in {} ({e})", dir.display());
            None
        }
    }
}

pub fn mnist_dir() -> PathBuf {
    let dir = resolve_data_dir(None);
    if dir.is_absolute() {
        dir
    } else {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(dir)
    }
}
