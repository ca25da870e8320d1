//! MNIST ingestion and the sequential task benchmarks built from it.

pub mod idx;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const NUM_CLASSES: usize = 10;

/// Images `[n, 1, rows, cols]` with pixels in `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = rows * cols;
        if pixels.len() != labels.len() * per {
            return Err(Error::Consistency(format!(
                "{} labels but {} pixels ({} per image)",
                labels.len(),
                pixels.len(),
                per
            )));
        }
        if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!(
                "pixel {} of image {} is {} (outside [0, 1])",
                bad % per.max(1),
                bad / per.max(1),
                pixels[bad]
            )));
        }
        Ok(LabeledImages {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    /// Selected items, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImages {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels,
        }
    }

    /// Mini-batch tensor `[b, 1, rows, cols]` and labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        let shape = vec![indices.len(), 1, self.rows, self.cols];
        (
            Tensor::new(shape, sub.pixels).expect("subset sizes agree"),
            sub.labels,
        )
    }

    /// All images as one `[n, 1, rows, cols]` tensor.
    pub fn images_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.len(), 1, self.rows, self.cols],
            self.pixels.clone(),
        )
        .expect("sizes agree")
    }

    /// Same labels, new pixels (already validated by the caller's construction).
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<LabeledImages> {
        LabeledImages::new(self.rows, self.cols, pixels, self.labels.clone())
    }

    fn map_images(&self, f: impl Fn(&[f64], &mut [f64])) -> LabeledImages {
        let p = self.pixels_per_image();
        let mut pixels = vec![0.0; self.pixels.len()];
        for (src, dst) in self.pixels.chunks(p).zip(pixels.chunks_mut(p)) {
            f(src, dst);
        }
        LabeledImages {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels: self.labels.clone(),
        }
    }

    /// Quantizes pixels to bytes (`round(255 · x)`) for IDX output.
    pub fn to_idx(&self) -> (idx::IdxImages, Vec<u8>) {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let labels = self.labels.iter().map(|&l| l as u8).collect();
        (
            idx::IdxImages {
                count: self.len(),
                rows: self.rows,
                cols: self.cols,
                pixels,
            },
            labels,
        )
    }

    pub fn from_idx(images: &idx::IdxImages, labels: &[u8]) -> Result<LabeledImages> {
        if images.count != labels.len() {
            return Err(Error::Consistency(format!(
                "image file holds {} images but label file holds {} labels",
                images.count,
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {l} at index {i} is not a digit")));
        }
        let pixels = images.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        LabeledImages::new(
            images.rows,
            images.cols,
            pixels,
            labels.iter().map(|&l| l as usize).collect(),
        )
    }

    /// Writes the pair of IDX files.
    pub fn save_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let (images, labels) = self.to_idx();
        idx::write_images(images_path, &images)?;
        idx::write_labels(labels_path, &labels)
    }
}

/// Parses an IDX image file and its label file.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    let images = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    LabeledImages::from_idx(&images, &labels)
}

/// Official train and test splits.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

impl Mnist {
    /// Loads the four standard files from `dir`.
    pub fn load(dir: &Path) -> Result<Mnist> {
        let train = load_mnist_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = load_mnist_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?;
        Ok(Mnist { train, test })
    }
}

/// How a task's data was derived from the base set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskDescriptor {
    /// Pixel permutation; `seed` is `None` for the identity.
    Permutation { seed: Option<u64> },
    /// Digits `(a, b)` of the base set.
    DigitPair { first: usize, second: usize },
    /// Train split replaced by a perturbed copy.
    Poisoned {
        base: Box<TaskDescriptor>,
        method: String,
        target_task: Option<usize>,
        epsilon: f64,
    },
}

/// One task `T_k` of a sequential benchmark.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    /// 1-based task index.
    pub task_id: usize,
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub descriptor: TaskDescriptor,
    /// Pixel permutation applied to the base images, if any.
    pub permutation: Option<Vec<usize>>,
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng_from(seed));
    p
}

/// `out[i] = image[perm[i]]` for every image.
pub fn permute_pixels(data: &LabeledImages, perm: &[usize]) -> LabeledImages {
    data.map_images(|src, dst| {
        for (d, &p) in dst.iter_mut().zip(perm) {
            *d = src[p];
        }
    })
}

/// Inverse permutation: `inv[perm[i]] = i`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Permuted benchmark: task 1 is the identity, tasks `2..=n` each apply an
/// independent seeded pixel permutation to both splits.
pub fn make_permuted_tasks(
    train: &LabeledImages,
    test: &LabeledImages,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    if n_tasks == 0 {
        return Err(Error::Parameter("n_tasks must be >= 1".into()));
    }
    let npix = train.pixels_per_image();
    Ok((1..=n_tasks)
        .map(|k| {
            if k == 1 {
                return TaskDataset {
                    task_id: 1,
                    train: train.clone(),
                    test: test.clone(),
                    descriptor: TaskDescriptor::Permutation { seed: None },
                    permutation: None,
                };
            }
            let s = derive_seed(seed, "permutation", k as u64);
            let perm = seeded_permutation(npix, s);
            TaskDataset {
                task_id: k,
                train: permute_pixels(train, &perm),
                test: permute_pixels(test, &perm),
                descriptor: TaskDescriptor::Permutation { seed: Some(s) },
                permutation: Some(perm),
            }
        })
        .collect())
}

pub const SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

fn indices_with_labels(data: &LabeledImages, a: usize, b: usize) -> Vec<usize> {
    data.labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == a || l == b)
        .map(|(i, _)| i)
        .collect()
}

/// Split benchmark: five tasks over digit pairs (0,1), (2,3), (4,5), (6,7),
/// (8,9). Labels keep their original digit values.
pub fn make_split_tasks(train: &LabeledImages, test: &LabeledImages) -> Result<Vec<TaskDataset>> {
    for (name, data) in [("train", train), ("test", test)] {
        let mut seen = [false; NUM_CLASSES];
        for &l in data.labels() {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "{name} split has no examples of digit {missing}"
            )));
        }
    }
    Ok(SPLIT_PAIRS
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| TaskDataset {
            task_id: i + 1,
            train: train.subset(&indices_with_labels(train, a, b)),
            test: test.subset(&indices_with_labels(test, a, b)),
            descriptor: TaskDescriptor::DigitPair { first: a, second: b },
            permutation: None,
        })
        .collect())
}

/// Seeded sample of `n` distinct indices out of `0..len`.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Parameter(format!(
            "cannot sample {n} items from {len} without replacement"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    let (head, _) = idx.partial_shuffle(&mut rng_from(seed), n);
    Ok(head.to_vec())
}

/// Seeded subset of `n` training images of `task`, drawn without replacement.
pub fn sample_kd_subset(task: &TaskDataset, n: usize, seed: u64) -> Result<LabeledImages> {
    let idx = sample_indices(task.train.len(), n, seed)?;
    Ok(task.train.subset(&idx))
}

/// Keeps a seeded subsample of at most `n` training images per task.
pub fn subsample_train(tasks: &mut [TaskDataset], n: usize, seed: u64) -> Result<()> {
    for t in tasks.iter_mut() {
        if t.train.len() > n {
            let mut idx = sample_indices(t.train.len(), n, derive_seed(seed, "subsample", t.task_id as u64))?;
            idx.sort_unstable();
            t.train = t.train.subset(&idx);
        }
    }
    Ok(())
}

/// Index sets of one epoch of mini-batches; the last batch may be partial.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng_from(seed));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One epoch of `(x, y)` mini-batches.
pub fn batches<'a>(
    data: &'a LabeledImages,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + 'a> {
    let idx = batch_indices(data.len(), batch_size, seed, shuffle)?;
    Ok(idx.into_iter().map(move |b| data.batch(&b)))
}
