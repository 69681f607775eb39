//! Datasets, synthetic data and deterministic minibatch iteration.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PER_FILE: usize = 10_000;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel statistics of `ds`'s raw pixels.
    pub fn fit(ds: &Dataset) -> Self {
        let [c, h, w] = ds.image_shape;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in ds.images.chunks_exact(c * hw) {
            for ci in 0..c {
                for &v in &img[ci * hw..(ci + 1) * hw] {
                    mean[ci] += v as f64;
                    sq[ci] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (ds.len() * hw) as f64;
        let mut std = vec![0.0; c];
        for ci in 0..c {
            mean[ci] /= count;
            std[ci] = (sq[ci] / count - mean[ci] * mean[ci])
                .max(0.0)
                .sqrt()
                .max(1e-8);
        }
        Normalization { mean, std }
    }
}

/// Images in `[0, 1]`, stored `[N, C, H, W]` row-major, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        image_shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::shape(
                "Dataset::new",
                &[labels.len() * per],
                &[images.len()],
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            image_shape,
            num_classes,
            split,
            normalization: Normalization::identity(image_shape[0]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: vec![],
            labels: vec![],
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Normalized batch of the given sample indices, without augmentation.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            self.push_normalized(self.image(i), &mut data);
        }
        let t = Tensor::from_vec(&[idx.len(), c, h, w], data).expect("batch length matches");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    fn push_normalized<T: Scalar>(&self, img: &[f32], out: &mut Vec<T>) {
        let hw = self.image_shape[1] * self.image_shape[2];
        for (ci, plane) in img.chunks_exact(hw).enumerate() {
            let (m, s) = (self.normalization.mean[ci], self.normalization.std[ci]);
            out.extend(plane.iter().map(|&v| T::from_f64c((v as f64 - m) / s)));
        }
    }
}

fn read_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected {} bytes ({CIFAR_PER_FILE} records of {CIFAR_RECORD}), found {}",
                CIFAR_RECORD * CIFAR_PER_FILE,
                bytes.len()
            ),
        });
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("label byte {label} outside [0, 9]"),
            });
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Locates the directory holding the CIFAR-10 binary batches under `path`.
fn cifar_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Reads the CIFAR-10 binary batches. The test split shares the train-set normalization.
pub fn load_cifar10(path: &Path) -> Result<(Dataset, Dataset)> {
    let dir = cifar_dir(path);
    let mut images = Vec::with_capacity(5 * CIFAR_PER_FILE * 3072);
    let mut labels = Vec::with_capacity(5 * CIFAR_PER_FILE);
    for f in CIFAR_TRAIN_FILES {
        read_cifar_file(&dir.join(f), &mut images, &mut labels)?;
    }
    let mut train = Dataset::new(images, labels, [3, 32, 32], 10, Split::Train)?;
    let mut images = Vec::with_capacity(CIFAR_PER_FILE * 3072);
    let mut labels = Vec::with_capacity(CIFAR_PER_FILE);
    read_cifar_file(&dir.join(CIFAR_TEST_FILE), &mut images, &mut labels)?;
    let mut test = Dataset::new(images, labels, [3, 32, 32], 10, Split::Test)?;
    let norm = Normalization::fit(&train);
    train.normalization = norm.clone();
    test.normalization = norm;
    Ok((train, test))
}

/// Whether `path` looks like a CIFAR-10 binary directory.
pub fn cifar10_available(path: &Path) -> bool {
    let dir = cifar_dir(path);
    CIFAR_TRAIN_FILES
        .iter()
        .chain([&CIFAR_TEST_FILE])
        .all(|f| dir.join(f).is_file())
}

/// Class prototypes: a few colored Gaussian blobs per class on a dim background.
fn prototypes(classes: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let s = image_size as f64;
    (0..classes)
        .map(|_| {
            let mut img = vec![0.0f64; 3 * image_size * image_size];
            for _ in 0..3 {
                let cy = rng.random_range(0.2 * s..0.8 * s);
                let cx = rng.random_range(0.2 * s..0.8 * s);
                let sigma = rng.random_range(0.08 * s..0.2 * s);
                let color: [f64; 3] = [
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ];
                for (ci, &amp) in color.iter().enumerate() {
                    for y in 0..image_size {
                        for x in 0..image_size {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ci * image_size + y) * image_size + x] +=
                                amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            img.into_iter().map(|v| v as f32).collect()
        })
        .collect()
}

/// Pixel noise standard deviation of synthetic samples.
pub const SYNTHETIC_NOISE: f64 = 0.3;

fn synthetic_samples(
    protos: &[Vec<f32>],
    per_class: usize,
    image_size: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let classes = protos.len();
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive std");
    let gain = Normal::new(1.0, 0.25).expect("positive std");
    let mut images = Vec::with_capacity(classes * per_class * 3 * image_size * image_size);
    let mut labels = Vec::with_capacity(classes * per_class);
    // interleave classes so that every prefix is roughly balanced
    for _ in 0..per_class {
        for (label, proto) in protos.iter().enumerate() {
            let g: f64 = gain.sample(rng);
            let dy = rng.random_range(-1i64..=1);
            let dx = rng.random_range(-1i64..=1);
            for ci in 0..3 {
                for y in 0..image_size {
                    for x in 0..image_size {
                        let sy = (y as i64 - dy).clamp(0, image_size as i64 - 1) as usize;
                        let sx = (x as i64 - dx).clamp(0, image_size as i64 - 1) as usize;
                        let p = proto[(ci * image_size + sy) * image_size + sx] as f64;
                        let v = 0.5 + g * p + noise.sample(rng);
                        images.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(label);
        }
    }
    Dataset::new(images, labels, [3, image_size, image_size], classes, split)
}

fn check_positive(args: &[(&str, usize)]) -> Result<()> {
    match args.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::InvalidArgument(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

/// Class-conditional Gaussian-blob images; the train split of [`synthetic_split`].
pub fn synthetic_dataset(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(synthetic_split(classes, per_class, 1, image_size, seed)?.0)
}

/// Train and test splits drawn around the same class prototypes, both normalized with train statistics.
pub fn synthetic_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_positive(&[
        ("classes", classes),
        ("per_class", train_per_class),
        ("test_per_class", test_per_class),
        ("image_size", image_size),
    ])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(classes, image_size, &mut rng);
    rng.set_stream(1);
    let mut train =
        synthetic_samples(&protos, train_per_class, image_size, Split::Train, &mut rng)?;
    rng.set_stream(2);
    let mut test = synthetic_samples(&protos, test_per_class, image_size, Split::Test, &mut rng)?;
    let norm = Normalization::fit(&train);
    train.normalization = norm.clone();
    test.normalization = norm;
    Ok((train, test))
}

/// Mirrors an image left to right in place.
pub fn hflip(img: &mut [f32], image_shape: [usize; 3]) {
    let w = image_shape[2];
    for row in img.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Zero-pads by `pad` and crops back to the original size at offset `(oy, ox)` of the padded image.
pub fn pad_crop(
    img: &[f32],
    image_shape: [usize; 3],
    pad: usize,
    oy: usize,
    ox: usize,
) -> Vec<f32> {
    let [c, h, w] = image_shape;
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            let sy = (y + oy) as i64 - pad as i64;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as i64 - pad as i64;
                if sx >= 0 && sx < w as i64 {
                    out[(ci * h + y) * w + x] = img[(ci * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub const CROP_PAD: usize = 4;

/// Shuffled minibatches for one epoch.
///
/// Order and augmentation draws depend only on `(seed, epoch)`. The trailing
/// partial batch is dropped, so with `N % batch_size = r` the last `r`
/// shuffled samples are not visited that epoch.
pub struct Minibatches<'a, T> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: bool,
    rng: ChaCha8Rng,
    _scalar: std::marker::PhantomData<T>,
}

pub fn minibatches<T: Scalar>(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    augment: bool,
) -> Result<Minibatches<'_, T>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} must be in 1..={}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    Ok(Minibatches {
        ds,
        order,
        batch_size,
        pos: 0,
        augment,
        rng,
        _scalar: std::marker::PhantomData,
    })
}

impl<T: Scalar> Iterator for Minibatches<'_, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        if !self.augment {
            return Some(self.ds.batch(idx));
        }
        let shape = self.ds.image_shape;
        let mut data = Vec::with_capacity(idx.len() * self.ds.image_len());
        for &i in idx {
            let oy = self.rng.random_range(0..=2 * CROP_PAD);
            let ox = self.rng.random_range(0..=2 * CROP_PAD);
            let mut img = pad_crop(self.ds.image(i), shape, CROP_PAD, oy, ox);
            if self.rng.random_bool(0.5) {
                hflip(&mut img, shape);
            }
            self.ds.push_normalized(&img, &mut data);
        }
        let [c, h, w] = shape;
        let t = Tensor::from_vec(&[idx.len(), c, h, w], data).expect("batch length matches");
        Some((t, idx.iter().map(|&i| self.ds.labels[i]).collect()))
    }
}

/// In-order batches covering every sample, the last one possibly short.
pub fn eval_batches<T: Scalar>(
    ds: &Dataset,
    batch_size: usize,
) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
    let bs = batch_size.max(1);
    (0..ds.len()).step_by(bs).map(move |start| {
        let idx: Vec<usize> = (start..(start + bs).min(ds.len())).collect();
        ds.batch(&idx)
    })
}

/// Accuracy of assigning each sample to the nearest class mean (computed on `train`).
pub fn nearest_class_mean_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.image_len();
    let mut means = vec![vec![0.0f64; n]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for i in 0..train.len() {
        let l = train.labels[i];
        counts[l] += 1;
        for (m, &v) in means[l].iter_mut().zip(train.image(i)) {
            *m += v as f64;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let img = test.image(i);
            let best = (0..means.len())
                .map(|k| {
                    (
                        k,
                        means[k]
                            .iter()
                            .zip(img)
                            .map(|(m, &v)| (m - v as f64).powi(2))
                            .sum::<f64>(),
                    )
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(test.labels[i])
        })
        .count();
    correct as f64 / test.len() as f64
}
