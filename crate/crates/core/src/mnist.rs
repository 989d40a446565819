//! MNIST in the uncompressed IDX container.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: u32 = 28;
pub const PIXELS: usize = (SIDE * SIDE) as usize;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Raw images, `count × 784` bytes row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: DenseVector,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    split: Split,
}

impl Dataset {
    /// Builds a dataset from in-memory examples. Entries must lie in `[0, 1]`
    /// and labels below `classes`.
    pub fn new(examples: Vec<Example>, split: Split, classes: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        for (position, ex) in examples.iter().enumerate() {
            if ex.label >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: ex.label,
                    bound: classes,
                });
            }
            if let Some(&value) = ex.x.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidConfig(format!(
                    "example {position} has entry {value} outside [0, 1]"
                )));
            }
        }
        Ok(Self { examples, split })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples[0].x.dim()
    }

    pub fn label_histogram(&self) -> [usize; CLASSES] {
        let mut hist = [0; CLASSES];
        for ex in &self.examples {
            if ex.label < CLASSES {
                hist[ex.label] += 1;
            }
        }
        hist
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("dataset head"));
        }
        Ok(Self {
            examples: self.examples[..n.min(self.len())].to_vec(),
            split: self.split,
        })
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("dataset selection"));
        }
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples.get(i).cloned().ok_or(Error::IndexOutOfRange {
                    what: "example",
                    index: i,
                    bound: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            examples,
            split: self.split,
        })
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path, field: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Truncated {
            path: path.to_path_buf(),
            field,
            expected: offset + 4,
            found: bytes.len(),
        }),
    }
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0, path, "magic")?;
    if found != expected {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<RawImages> {
    check_magic(bytes, path, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4, path, "image count")? as usize;
    for (offset, field) in [(8, "rows"), (12, "cols")] {
        let found = read_u32(bytes, offset, path, field)?;
        if found != SIDE {
            return Err(Error::BadHeader {
                path: path.to_path_buf(),
                field,
                expected: SIDE,
                found,
            });
        }
    }
    let body = &bytes[16..];
    let expected = count * PIXELS;
    if body.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            field: "pixel data",
            expected,
            found: body.len(),
        });
    }
    Ok(RawImages {
        count,
        pixels: body[..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, path, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4, path, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            field: "label data",
            expected: count,
            found: body.len(),
        });
    }
    let labels = body[..count].to_vec();
    if let Some(position) = labels.iter().position(|&l| l as usize >= CLASSES) {
        return Err(Error::LabelOutOfRange {
            path: path.to_path_buf(),
            position,
            label: labels[position],
        });
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    let path = path.as_ref();
    parse_idx_images(&read_file(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read_file(path)?, path)
}

/// Pixels scaled by `1/255`; no centering.
pub fn to_dataset(images: &RawImages, labels: &[u8], split: Split) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let examples = images
        .pixels
        .chunks_exact(PIXELS)
        .zip(labels)
        .map(|(px, &label)| Example {
            x: DenseVector::from_raw(px.iter().map(|&p| f64::from(p) / 255.0).collect()),
            label: label as usize,
        })
        .collect();
    Dataset::new(examples, split, CLASSES)
}

pub fn load_pair(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    to_dataset(&images, &labels, split)
}

/// `$MNIST_DIR` if set, otherwise `fallback`.
pub fn data_dir(fallback: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.into())
}

pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (images, labels) = match split {
        Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
        Split::Test => (TEST_IMAGES, TEST_LABELS),
    };
    load_pair(dir.join(images), dir.join(labels), split)
}
