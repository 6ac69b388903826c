//! Datasets and permuted task streams.
//!
//! Archives use the big-endian IDX layout: a 4-byte magic (`0x00000803` for
//! images, `0x00000801` for labels), one 4-byte count per dimension, then raw
//! `u8` payload. Pixels are scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Example;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != feature_dim {
                return Err(Error::input(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    ex.x.len()
                )));
            }
            if ex.y >= num_classes {
                return Err(Error::input(format!(
                    "example {i} has label {} but only {num_classes} classes",
                    ex.y
                )));
            }
            if ex.x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::input(format!("example {i} has features outside [0, 1]")));
            }
        }
        Ok(Dataset {
            examples,
            num_classes,
            feature_dim,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Same examples, declared over `num_classes` classes.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Dataset::new(self.examples, num_classes, self.feature_dim)
    }

    /// First `n` examples.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            examples: self.examples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    /// Applies `perm` to every feature vector.
    pub fn permuted(&self, perm: &Permutation) -> Result<Dataset> {
        if perm.len() != self.feature_dim {
            return Err(Error::input(format!(
                "permutation of length {} applied to {} features",
                perm.len(),
                self.feature_dim
            )));
        }
        Ok(Dataset {
            examples: self
                .examples
                .iter()
                .map(|ex| Example::new(perm.apply(&ex.x), ex.y))
                .collect(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            offset: self.pos,
            message: format!("{} archive truncated inside its header", self.what),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!(
                    "{} archive truncated: payload needs {len} bytes, found {available}",
                    self.what
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn expect_magic(&mut self, magic: u32) -> Result<()> {
        let got = self.u32()?;
        if got != magic {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "{} archive has magic {got:#010x} ({got}), expected {magic:#010x} ({magic})",
                    self.what
                ),
            });
        }
        Ok(())
    }
}

/// Parses in-memory image and label archives into one dataset.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = Cursor {
        bytes: images,
        pos: 0,
        what: "image",
    };
    img.expect_magic(IMAGES_MAGIC)?;
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let dim = rows * cols;
    let pixels = img.payload(count * dim)?;

    let mut lab = Cursor {
        bytes: labels,
        pos: 0,
        what: "label",
    };
    lab.expect_magic(LABELS_MAGIC)?;
    let label_count_offset = lab.pos;
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Parse {
            offset: label_count_offset,
            message: format!("label archive holds {label_count} labels for {count} images"),
        });
    }
    let ys = lab.payload(label_count)?;

    let num_classes = ys.iter().map(|&y| y as usize + 1).max().unwrap_or(0);
    let examples = pixels
        .chunks(dim.max(1))
        .take(count)
        .zip(ys)
        .map(|(px, &y)| Example::new(px.iter().map(|&p| f64::from(p) / 255.0).collect(), y as usize))
        .collect();
    Dataset::new(examples, num_classes, dim)
}

/// Reads an image archive and its label archive from disk.
pub fn load_idx_archive(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Encodes `images` (each `rows * cols` bytes) as an image archive.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Bijection on feature indices: `apply(x)[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(d: usize) -> Self {
        Permutation((0..d).collect())
    }

    pub fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p: Vec<usize> = (0..d).collect();
        p.shuffle(rng);
        Permutation(p)
    }

    pub fn from_vec(p: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; p.len()];
        for &i in &p {
            if i >= p.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::input("not a permutation"));
            }
        }
        Ok(Permutation(p))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.iter().map(|&i| x[i]).collect()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }
}

/// One task of a stream: disjoint train and reference splits plus a test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub reference: Dataset,
    pub test: Dataset,
    pub permutation: Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::input("a task stream needs at least one task"));
        }
        Ok(TaskStream { tasks })
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks[0].train.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.tasks[0].train.feature_dim()
    }
}

fn task_rng(seed: u64, task: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 8) | purpose);
    rng
}

/// Builds `n_tasks` tasks from a shared pool and test set.
///
/// Task 1 keeps the original pixel order; every later task draws its own
/// seeded permutation. Each task shuffles the pool independently and holds
/// out `round(ref_fraction * |pool|)` examples (at least one, at most
/// `|pool| - 1`) as its reference split.
pub fn make_permuted_stream(
    pool: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    seed: u64,
    ref_fraction: f64,
) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::config("number of tasks must be >= 1"));
    }
    if !(ref_fraction > 0.0 && ref_fraction < 1.0) {
        return Err(Error::config(format!(
            "reference fraction must lie in (0, 1), got {ref_fraction}"
        )));
    }
    if pool.len() < 2 {
        return Err(Error::input("training pool needs at least two examples to split"));
    }
    if test.feature_dim() != pool.feature_dim() {
        return Err(Error::input("test split and training pool differ in feature dimension"));
    }
    let classes = pool.num_classes().max(test.num_classes());
    let d = pool.feature_dim();
    let n_ref = ((ref_fraction * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1);

    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 1..=n_tasks {
        let permutation = if t == 1 {
            Permutation::identity(d)
        } else {
            Permutation::random(d, &mut task_rng(seed, t, 0))
        };
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut task_rng(seed, t, 1));
        let pick = |idx: &[usize]| -> Vec<Example> {
            idx.iter()
                .map(|&i| {
                    let ex = &pool.examples()[i];
                    Example::new(permutation.apply(&ex.x), ex.y)
                })
                .collect()
        };
        let reference = Dataset::new(pick(&order[..n_ref]), classes, d)?;
        let train = Dataset::new(pick(&order[n_ref..]), classes, d)?;
        let test = test.permuted(&permutation)?.with_num_classes(classes)?;
        tasks.push(TaskData {
            train,
            reference,
            test,
            permutation,
        });
    }
    TaskStream::new(tasks)
}

/// Gaussian class blobs with unit spread and pairwise mean distance `margin`.
///
/// Class means are `margin / sqrt(2)` times orthonormal directions (random
/// directions when `num_classes > d`). Raw coordinates are mapped into
/// `[0, 1]` by the fixed map `x -> 0.5 + x / 6`, clamped, so coordinates
/// beyond three blob standard deviations from the origin saturate.
const SATURATION: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct SyntheticBlobs {
    means: Vec<Vec<f64>>,
    offset: f64,
    span: f64,
    seed: u64,
}

impl SyntheticBlobs {
    pub fn new(d: usize, num_classes: usize, margin: f64, seed: u64) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::config(format!("margin must be > 0, got {margin}")));
        }
        if d == 0 || num_classes == 0 {
            return Err(Error::config("feature dimension and class count must be positive"));
        }
        let mut rng = task_rng(seed, 0, 0xB1);
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if c < d {
                for u in &dirs {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            dirs.push(v);
        }
        let radius = margin / std::f64::consts::SQRT_2;
        let means: Vec<Vec<f64>> = dirs
            .into_iter()
            .map(|u| u.into_iter().map(|a| a * radius).collect())
            .collect();
        Ok(SyntheticBlobs {
            means,
            offset: SATURATION,
            span: 2.0 * SATURATION,
            seed,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Maps a raw point into feature space.
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .map(|a| ((a + self.offset) / self.span).clamp(0.0, 1.0))
            .collect()
    }

    /// `n_per_class` samples of every class, interleaved by class, from split `split`.
    pub fn sample(&self, n_per_class: usize, split: u64) -> Result<Dataset> {
        let d = self.means.first().map_or(0, Vec::len);
        let mut rng = task_rng(self.seed, 0, 0xC0 + split);
        let mut examples = Vec::with_capacity(n_per_class * self.means.len());
        for _ in 0..n_per_class {
            for (c, mean) in self.means.iter().enumerate() {
                let raw: Vec<f64> = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + z
                    })
                    .collect();
                examples.push(Example::new(self.normalize(&raw), c));
            }
        }
        Dataset::new(examples, self.means.len(), d)
    }
}

/// Balanced synthetic dataset; see [`SyntheticBlobs`].
pub fn make_synthetic(d: usize, num_classes: usize, n_per_class: usize, margin: f64, seed: u64) -> Result<Dataset> {
    SyntheticBlobs::new(d, num_classes, margin, seed)?.sample(n_per_class, 0)
}

/// Train pool and test split drawn from the same blobs.
pub fn make_synthetic_split(
    d: usize,
    num_classes: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    margin: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let blobs = SyntheticBlobs::new(d, num_classes, margin, seed)?;
    Ok((blobs.sample(n_train_per_class, 0)?, blobs.sample(n_test_per_class, 1)?))
}
