//! IDX dataset files on disk.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bicl_core::continuum::Dataset;

/// Environment variable naming the data root directory.
pub const DATA_ROOT_ENV: &str = "BICL_DATA_ROOT";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// `configured`, else `$BICL_DATA_ROOT`, else `./data`.
pub fn data_root(configured: Option<&Path>) -> PathBuf {
    match configured {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
    }
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).with_context(|| format!("reading {}", images.display()))?;
    let lbl = std::fs::read(labels).with_context(|| format!("reading {}", labels.display()))?;
    Dataset::from_idx(&img, &lbl).with_context(|| format!("parsing {} / {}", images.display(), labels.display()))
}

/// The standard train and test splits of an MNIST-layout dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads `<root>/<name>/{train,t10k}-*-idx?-ubyte`.
pub fn load_splits(root: &Path, name: &str) -> Result<Splits> {
    let dir = root.join(name);
    Ok(Splits {
        train: load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
        test: load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
    })
}
