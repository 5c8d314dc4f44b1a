//! Datasets, task generators and the one-pass continuum stream.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, IdxError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One observation `(x, y, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Arc<[f32]>,
    pub y: usize,
    pub task: usize,
}

/// Labeled grayscale images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    images: Vec<Arc<[f32]>>,
    labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated { expected: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found == expected {
        Ok(())
    } else {
        Err(IdxError::BadMagic { expected, found })
    }
}

/// Parses an IDX image file: `(rows, cols, images)` with raw bytes per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<&[u8]>), IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + n * size;
    if bytes.len() < expected {
        return Err(IdxError::Truncated { expected, found: bytes.len() });
    }
    let images = (0..n).map(|i| &bytes[16 + i * size..16 + (i + 1) * size]).collect();
    Ok((rows, cols, images))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(IdxError::Truncated { expected, found: bytes.len() });
    }
    Ok(&bytes[8..expected])
}

impl Dataset {
    /// Builds a dataset from image and label IDX payloads.
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self, IdxError> {
        let (rows, cols, raw) = parse_idx_images(images)?;
        let labels = parse_idx_labels(labels)?;
        if raw.len() != labels.len() {
            return Err(IdxError::CountMismatch { images: raw.len(), labels: labels.len() });
        }
        let images = raw.iter().map(|img| img.iter().map(|&p| p as f32 / 255.0).collect()).collect();
        Ok(Dataset { rows, cols, images, labels: labels.to_vec() })
    }

    pub fn from_parts(rows: usize, cols: usize, images: Vec<Vec<f32>>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(IdxError::CountMismatch { images: images.len(), labels: labels.len() }.into());
        }
        if let Some(bad) = images.iter().find(|i| i.len() != rows * cols) {
            return Err(Error::shape(format!("image of {} pixels in a {rows}x{cols} dataset", bad.len())));
        }
        Ok(Dataset { rows, cols, images: images.into_iter().map(Arc::from).collect(), labels })
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

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// FNV-1a over shape, labels and pixel bits.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&(self.rows as u64).to_le_bytes());
        eat(&(self.cols as u64).to_le_bytes());
        eat(&self.labels);
        for img in &self.images {
            for p in img.iter() {
                eat(&p.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// How a task transforms the source images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// Fixed pixel permutation derived from `seed`; seed 0 is the identity.
    Permutation { seed: u64 },
    /// Rotation about the image center by an angle in `[0, 180]` degrees.
    Rotation { degrees: f64 },
    /// All images of one class, untransformed (generative streams).
    Class { label: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub samples_per_task: usize,
}

/// Pixel permutation for a `d`-pixel image.
pub fn pixel_permutation(seed: u64, d: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..d).collect();
    if seed != 0 {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    perm
}

/// `out[i] = image[perm[i]]`.
pub fn permute_image(image: &[f32], perm: &[usize]) -> Vec<f32> {
    perm.iter().map(|&p| image[p]).collect()
}

/// Counter-clockwise rotation about the pixel-grid center with bilinear
/// interpolation and zero padding.
pub fn rotate_image(image: &[f32], rows: usize, cols: usize, degrees: f64) -> Vec<f32> {
    if degrees == 0.0 {
        return image.to_vec();
    }
    let (s, c) = libm::sincos(degrees.to_radians());
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let at = |r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= rows as isize || q >= cols as isize {
            0.0
        } else {
            image[r as usize * cols + q as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let (dy, dx) = (r as f64 - cy, q as f64 - cx);
            // inverse map: rotate the output coordinate back by -angle
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            out.push(v as f32);
        }
    }
    out
}

/// Evenly spaced angles `0, 180/(T-1), …, 180`.
pub fn rotation_angles(tasks: usize) -> Vec<f64> {
    match tasks {
        0 => Vec::new(),
        1 => alloc::vec![0.0],
        t => (0..t).map(|i| 180.0 * i as f64 / (t - 1) as f64).collect(),
    }
}

fn draw_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::invalid(format!("requested {n} samples from a dataset of {len}")));
    }
    Ok(rand::seq::index::sample(rng, len, n).into_vec())
}

/// `n` samples drawn without replacement, permuted by the seed's fixed permutation.
pub fn make_permutation_task<R: Rng + ?Sized>(
    data: &Dataset,
    seed: u64,
    n: usize,
    task: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let perm = pixel_permutation(seed, data.dim());
    Ok(draw_indices(data.len(), n, rng)?
        .into_iter()
        .map(|i| Sample { x: permute_image(data.image(i), &perm).into(), y: data.label(i), task })
        .collect())
}

/// `n` samples drawn without replacement, rotated by `degrees`.
pub fn make_rotation_task<R: Rng + ?Sized>(
    data: &Dataset,
    degrees: f64,
    n: usize,
    task: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if !(0.0..=180.0).contains(&degrees) {
        return Err(Error::invalid(format!("rotation angle {degrees} outside [0, 180]")));
    }
    Ok(draw_indices(data.len(), n, rng)?
        .into_iter()
        .map(|i| Sample { x: rotate_image(data.image(i), data.rows(), data.cols(), degrees).into(), y: data.label(i), task })
        .collect())
}

/// Up to `cap` images of class `label`, chosen at random.
pub fn make_class_task<R: Rng + ?Sized>(
    data: &Dataset,
    label: usize,
    cap: usize,
    task: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == label).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    Ok(idx.into_iter().map(|i| Sample { x: Arc::clone(&data.images[i]), y: label, task }).collect())
}

/// Task data for a spec. Class tasks treat `samples_per_task` as the cap.
pub fn build_task<R: Rng + ?Sized>(data: &Dataset, spec: &TaskSpec, task: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let n = spec.samples_per_task;
    match spec.kind {
        TaskKind::Permutation { seed } => make_permutation_task(data, seed, n, task, rng),
        TaskKind::Rotation { degrees } => make_rotation_task(data, degrees, n, task, rng),
        TaskKind::Class { label } => make_class_task(data, label, n, task, rng),
    }
}

/// Random disjoint split with `round(ratio·n)` training samples.
pub fn split_train_val<R: Rng + ?Sized>(
    mut data: Vec<Sample>,
    ratio: f64,
    rng: &mut R,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    data.shuffle(rng);
    let n_tr = libm::round(ratio * data.len() as f64) as usize;
    let val = data.split_off(n_tr);
    Ok((data, val))
}

/// One task's one-pass stream of aligned `(B^tr, B^val)` pairs.
///
/// Training data is cut into batches of `batch_size`; the validation data is
/// spread over the same number of pairs as evenly as possible.
#[derive(Debug, Clone)]
pub struct Continuum {
    task: usize,
    train: VecDeque<Sample>,
    val: VecDeque<Sample>,
    batch_size: usize,
    batches_left: usize,
}

impl Continuum {
    pub fn new(task: usize, train: Vec<Sample>, val: Vec<Sample>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let batches_left = train.len().div_ceil(batch_size);
        Ok(Continuum { task, train: train.into(), val: val.into(), batch_size, batches_left })
    }

    pub fn task(&self) -> usize {
        self.task
    }

    /// Pairs still to be yielded.
    pub fn remaining(&self) -> usize {
        self.batches_left
    }
}

impl Iterator for Continuum {
    type Item = (Vec<Sample>, Vec<Sample>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.batches_left == 0 {
            return None;
        }
        let take = self.batch_size.min(self.train.len());
        let tr: Vec<Sample> = self.train.drain(..take).collect();
        let v = self.val.len() / self.batches_left;
        let val: Vec<Sample> = self.val.drain(..v).collect();
        self.batches_left -= 1;
        if self.batches_left == 0 {
            // any leftover (only possible with more val than train batches) goes last
            let mut val = val;
            val.extend(self.val.drain(..));
            return Some((tr, val));
        }
        Some((tr, val))
    }
}

/// The ordered task list; each task yields its [`Continuum`] exactly once.
#[derive(Debug, Clone, Default)]
pub struct ContinuumStream {
    tasks: VecDeque<Continuum>,
}

impl ContinuumStream {
    pub fn new(tasks: Vec<Continuum>) -> Self {
        ContinuumStream { tasks: tasks.into() }
    }

    pub fn tasks_left(&self) -> usize {
        self.tasks.len()
    }
}

impl Iterator for ContinuumStream {
    type Item = Continuum;

    fn next(&mut self) -> Option<Continuum> {
        self.tasks.pop_front()
    }
}
