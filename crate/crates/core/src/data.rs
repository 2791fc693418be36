//! MNIST ingestion from the IDX container, pixel normalization and batching.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, SeededRng};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `n x (rows * cols)`, pixel bytes divided by 255.
    pub images: Matrix<T>,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Image height and width from the IDX header.
    pub image_dims: (usize, usize),
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    /// Builds a dataset from in-memory parts, validating pixel range and labels.
    pub fn from_parts(images: Matrix<T>, labels: Vec<usize>, split: Split, num_classes: usize) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        let cols = images.cols();
        Ok(Self {
            images,
            labels,
            split,
            image_dims: (1, cols),
        })
    }

    /// Copies of the listed samples.
    pub fn gather(&self, indices: &[usize]) -> Result<(Matrix<T>, Vec<usize>)> {
        let x = self.images.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx)?;
        Ok(Self {
            images,
            labels,
            split: self.split,
            image_dims: self.image_dims,
        })
    }

    /// Re-encodes the images as an IDX3 byte stream.
    pub fn images_to_idx(&self) -> Vec<u8> {
        let (h, w) = self.image_dims;
        let mut out = Vec::with_capacity(16 + self.images.as_slice().len());
        out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend_from_slice(&(h as u32).to_be_bytes());
        out.extend_from_slice(&(w as u32).to_be_bytes());
        let scale = T::lit(255.0);
        out.extend(
            self.images
                .as_slice()
                .iter()
                .map(|&v| (v * scale).round().to_u8().expect("pixel within byte range")),
        );
        out
    }

    /// Re-encodes the labels as an IDX1 byte stream.
    pub fn labels_to_idx(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len());
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx(format!("{what}: truncated header")))
}

/// Decodes IDX3 image bytes: returns `(count, height, width, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Idx(format!(
            "images: bad magic {magic:#010x} (expected {IMAGES_MAGIC:#010x})"
        )));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let expected = n * h * w;
    if body.len() != expected {
        return Err(Error::Idx(format!(
            "images: header promises {expected} pixel bytes, file has {}",
            body.len()
        )));
    }
    Ok((n, h, w, body))
}

/// Decodes IDX1 label bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Idx(format!(
            "labels: bad magic {magic:#010x} (expected {LABELS_MAGIC:#010x})"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Idx(format!(
            "labels: header promises {n} labels, file has {}",
            body.len()
        )));
    }
    Ok(body)
}

pub fn dataset_from_idx<T: Scalar>(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<Dataset<T>> {
    let (n, h, w, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Idx(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 || h * w == 0 {
        return Err(Error::Idx("empty image set".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Idx(format!("label {l} is not a digit")));
    }
    let scale = T::lit(255.0);
    let data = pixels.iter().map(|&p| T::from_u8(p).unwrap() / scale).collect();
    Ok(Dataset {
        images: Matrix::from_vec(n, h * w, data)?,
        labels: labels.iter().map(|&l| l as usize).collect(),
        split,
        image_dims: (h, w),
    })
}

pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    dataset_from_idx(&images, &labels, split)
}

/// Canonical MNIST file locations inside a directory.
#[derive(Clone, Debug)]
pub struct MnistPaths {
    pub dir: PathBuf,
}

impl MnistPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn files(&self, split: Split) -> (PathBuf, PathBuf) {
        let (i, l) = match split {
            Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
            Split::Test => (TEST_IMAGES, TEST_LABELS),
        };
        (self.dir.join(i), self.dir.join(l))
    }

    /// Fails with an I/O error naming the first missing file.
    pub fn check(&self) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let (i, l) = self.files(split);
            for p in [i, l] {
                if !p.is_file() {
                    return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "missing MNIST file")));
                }
            }
        }
        Ok(())
    }

    pub fn load<T: Scalar>(&self, split: Split) -> Result<Dataset<T>> {
        let (i, l) = self.files(split);
        load_idx(i, l, split)
    }
}

/// Sample order for one epoch, cut into consecutive batches. The final
/// batch keeps the remainder.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut SeededRng>) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let order = match rng {
        Some(rng) => rng.permutation(n),
        None => (0..n).collect(),
    };
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Materialized batches of `(images, labels)` for one epoch.
pub fn batches<'a, T: Scalar>(
    ds: &'a Dataset<T>,
    batch_size: usize,
    rng: Option<&mut SeededRng>,
) -> Result<impl Iterator<Item = Result<(Matrix<T>, Vec<usize>)>> + 'a> {
    let plan = batch_indices(ds.len(), batch_size, rng)?;
    Ok(plan.into_iter().map(move |idx| ds.gather(&idx)))
}
