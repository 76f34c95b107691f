//! MNIST loading and the split / permuted task protocols.

mod files;
mod idx;
mod labels;

use std::path::Path;
use std::sync::Arc;

use clbench_tensor::Tensor;
use rand::seq::SliceRandom;

pub use files::{
    resolve_data_dir, sha256_hex, verify_dir, MnistFile, DATA_DIR_ENV, DEFAULT_DATA_DIR, MNIST_FILES,
    TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
pub use idx::{parse_images, parse_labels, read_images, read_labels, IdxImages};
pub use labels::{map_label, LabelMap, Protocol, Scenario};

use crate::error::{contract, Error, Result};
use crate::rng::{stream_rng, Stream};

/// Images scaled to `[0, 1]`, one row per example, with digit labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    side: usize,
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    /// `images` is `[n, side * side]` with values in `[0, 1]`.
    pub fn new(side: usize, images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 2 || images.cols() != side * side {
            return Err(contract(format!(
                "images of shape {:?} are not {side}x{side}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(contract(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(contract("pixel values must lie in [0, 1]"));
        }
        if labels.iter().any(|&l| l > 9) {
            return Err(contract("labels must lie in 0..=9"));
        }
        Ok(Self { side, images, labels })
    }

    fn from_idx(images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.rows != images.cols {
            return Err(contract("images must be square"));
        }
        let data = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let t = Tensor::matrix(images.count, images.rows * images.cols, data)?;
        Self::new(images.rows, t, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Zero-pads every image symmetrically to `side x side`.
    pub fn padded(&self, side: usize) -> Result<Self> {
        if side < self.side || (side - self.side) % 2 != 0 {
            return Err(contract(format!(
                "cannot pad {0}x{0} images to {side}x{side}",
                self.side
            )));
        }
        let off = (side - self.side) / 2;
        let n = self.len();
        let mut data = vec![0.0; n * side * side];
        for i in 0..n {
            let src = self.images.row(i);
            let dst = &mut data[i * side * side..(i + 1) * side * side];
            for r in 0..self.side {
                let d = (r + off) * side + off;
                dst[d..d + self.side].copy_from_slice(&src[r * self.side..(r + 1) * self.side]);
            }
        }
        Self::new(side, Tensor::matrix(n, side * side, data)?, self.labels.clone())
    }
}

/// The MNIST training and test sets.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

impl Mnist {
    /// Loads the four IDX files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let load = |img: &str, lab: &str| -> Result<Dataset> {
            let images = read_images(&dir.join(img))?;
            let labels = read_labels(&dir.join(lab))?;
            if images.count != labels.len() {
                return Err(Error::Format {
                    path: dir.join(lab),
                    offset: 4,
                    message: format!("{} labels for {} images", labels.len(), images.count),
                });
            }
            Dataset::from_idx(images, labels)
        };
        Ok(Self {
            train: Arc::new(load(TRAIN_IMAGES, TRAIN_LABELS)?),
            test: Arc::new(load(TEST_IMAGES, TEST_LABELS)?),
        })
    }
}

/// One task's examples: a subset of a shared dataset, optionally viewed
/// through a pixel permutation. Nothing is copied until a batch is drawn.
#[derive(Debug, Clone)]
pub struct TaskData {
    source: Arc<Dataset>,
    indices: Arc<Vec<usize>>,
    permutation: Option<Arc<Vec<usize>>>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn label(&self, pos: usize) -> u8 {
        self.source.labels[self.indices[pos]]
    }

    pub fn labels(&self) -> Vec<u8> {
        self.indices.iter().map(|&i| self.source.labels[i]).collect()
    }

    /// Indices into the shared source dataset.
    pub fn source_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn permutation(&self) -> Option<&[usize]> {
        self.permutation.as_deref().map(Vec::as_slice)
    }

    /// Images at task positions `positions`, permuted if the task is.
    pub fn images(&self, positions: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(&[positions.len(), d]);
        for (r, &p) in positions.iter().enumerate() {
            let src = self.source.images.row(self.indices[p]);
            let dst = out.row_mut(r);
            match &self.permutation {
                Some(perm) => {
                    for (o, &j) in dst.iter_mut().zip(perm.iter()) {
                        *o = src[j];
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
        out
    }

    /// Images and digit labels at `positions`.
    pub fn batch(&self, positions: &[usize]) -> (Tensor, Vec<u8>) {
        let labels = positions.iter().map(|&p| self.label(p)).collect();
        (self.images(positions), labels)
    }
}

/// One task of a stream.
#[derive(Debug, Clone)]
pub struct Task {
    pub index: usize,
    /// Digits of this task, in within-task order.
    pub classes: Vec<u8>,
    pub train: TaskData,
    pub test: TaskData,
}

/// An ordered sequence of tasks built from one dataset.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub protocol: Protocol,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn task_classes(&self) -> Vec<Vec<u8>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }

    pub fn label_map(&self, scenario: Scenario) -> Result<LabelMap> {
        LabelMap::new(scenario, self.task_classes())
    }
}

fn subset(data: &Arc<Dataset>, classes: &[u8]) -> TaskData {
    let indices = (0..data.len())
        .filter(|&i| classes.contains(&data.labels[i]))
        .collect();
    TaskData {
        source: Arc::clone(data),
        indices: Arc::new(indices),
        permutation: None,
    }
}

/// Five tasks over disjoint digit pairs `{0,1}, {2,3}, ..., {8,9}`.
pub fn build_split(mnist: &Mnist) -> Result<TaskStream> {
    let partition: Vec<Vec<u8>> = (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect();
    build_split_with(mnist, &partition)
}

/// One task per entry of `partition`; every class must appear at most once
/// and have both training and test examples.
pub fn build_split_with(mnist: &Mnist, partition: &[Vec<u8>]) -> Result<TaskStream> {
    if partition.is_empty() {
        return Err(contract("split protocol needs at least one task"));
    }
    let mut seen = [false; 10];
    for classes in partition {
        if classes.is_empty() {
            return Err(contract("a split task has no classes"));
        }
        for &c in classes {
            if c > 9 {
                return Err(contract(format!("class {c} outside 0..=9")));
            }
            if std::mem::replace(&mut seen[c as usize], true) {
                return Err(contract(format!("class {c} appears in two tasks")));
            }
        }
    }
    let tasks = partition
        .iter()
        .enumerate()
        .map(|(index, classes)| {
            let train = subset(&mnist.train, classes);
            let test = subset(&mnist.test, classes);
            if train.is_empty() || test.is_empty() {
                return Err(contract(format!("task {index} has no examples")));
            }
            Ok(Task {
                index,
                classes: classes.clone(),
                train,
                test,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream {
        protocol: Protocol::Split,
        tasks,
    })
}

/// Side length images are padded to before permuting.
pub const PERMUTED_SIDE: usize = 32;

/// Pixel permutations for a permuted stream: the first task keeps the
/// original order, the others are uniform random shuffles drawn from `seed`.
pub fn permutations(n_tasks: usize, dim: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, Stream::Permutations);
    (0..n_tasks)
        .map(|t| {
            let mut p: Vec<usize> = (0..dim).collect();
            if t > 0 {
                p.shuffle(&mut rng);
            }
            p
        })
        .collect()
}

/// `n_tasks` tasks that all hold the full digit set, each seeing the padded
/// images through its own fixed pixel permutation.
pub fn build_permuted(mnist: &Mnist, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(contract("permuted protocol needs at least one task"));
    }
    let train = Arc::new(mnist.train.padded(PERMUTED_SIDE)?);
    let test = Arc::new(mnist.test.padded(PERMUTED_SIDE)?);
    let all = |d: &Arc<Dataset>| Arc::new((0..d.len()).collect::<Vec<_>>());
    let (train_idx, test_idx) = (all(&train), all(&test));
    let classes: Vec<u8> = (0..10).collect();
    let tasks = permutations(n_tasks, train.dim(), seed)
        .into_iter()
        .enumerate()
        .map(|(index, perm)| {
            let perm = if index == 0 { None } else { Some(Arc::new(perm)) };
            Task {
                index,
                classes: classes.clone(),
                train: TaskData {
                    source: Arc::clone(&train),
                    indices: Arc::clone(&train_idx),
                    permutation: perm.clone(),
                },
                test: TaskData {
                    source: Arc::clone(&test),
                    indices: Arc::clone(&test_idx),
                    permutation: perm,
                },
            }
        })
        .collect();
    Ok(TaskStream {
        protocol: Protocol::Permuted,
        tasks,
    })
}
