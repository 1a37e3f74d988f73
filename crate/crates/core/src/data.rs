//! Dataset ingestion: IDX files, synthetic mixtures, and node partitioning.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Batch, Labels};
use crate::numerics::{gaussian_matrix, Matrix, Purpose, RngStream};
use crate::perturb::{apply, sample_node_shift, AffineShift};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const DEFAULT_HELD_OUT: usize = 5000;
pub const DEFAULT_NODES: usize = 10;
pub const DEFAULT_NODE_SAMPLES: usize = 5000;

/// Labelled samples before any node shift is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    /// `N × d`, one sample per row.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Image shape for IDX-backed data.
    pub image_shape: Option<(usize, usize)>,
    pub source: String,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Count of each label value.
    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                h[y] += 1;
            }
        }
        h
    }

    fn batch(&self, rows: &[usize]) -> Batch {
        let features = Matrix::from_fn(rows.len(), self.dim(), |i, k| self.features[(rows[i], k)]);
        Batch::new(
            features,
            Labels::Class(rows.iter().map(|&r| self.labels[r]).collect()),
        )
        .expect("row counts agree")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile {
            needed: end,
            found: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let needed = self.pos + len;
        if self.bytes.len() < needed {
            return Err(Error::TruncatedFile {
                needed,
                found: self.bytes.len(),
            });
        }
        Ok(&self.bytes[self.pos..needed])
    }
}

/// Parses an IDX image file and its label file. Pixel values stay in `0..=255`.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawDataset> {
    let mut img = Reader {
        bytes: image_bytes,
        pos: 0,
    };
    let magic = img.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let mut lab = Reader {
        bytes: label_bytes,
        pos: 0,
    };
    let magic = lab.u32()?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let d = rows * cols;
    let pixels = img.payload(count * d)?;
    let labels = lab.payload(count)?.iter().map(|&b| b as usize).collect();
    let features = Matrix::from_fn(count, d, |i, k| pixels[i * d + k] as f64);
    Ok(RawDataset {
        features,
        labels,
        image_shape: Some((rows, cols)),
        source: "idx".into(),
    })
}

/// Writes a dataset back to IDX image and label bytes. Features must be
/// integers in `0..=255` and labels below 256.
pub fn serialize_idx(raw: &RawDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = raw.image_shape.unwrap_or((1, raw.dim()));
    if rows * cols != raw.dim() {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: raw.dim(),
        });
    }
    let n = raw.len();
    let mut images = Vec::with_capacity(16 + n * raw.dim());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        for &v in raw.features.row(i) {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::OutOfRange(v));
            }
            images.push(v as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &y in &raw.labels {
        let b = u8::try_from(y).map_err(|_| Error::OutOfRange(y as f64))?;
        labels.push(b);
    }
    Ok((images, labels))
}

/// Maps pixel values from `[0, 255]` to `[-1, 1]`.
pub fn normalize(raw: &RawDataset) -> Result<RawDataset> {
    let mut out = raw.clone();
    for i in 0..raw.len() {
        for v in out.features.row_mut(i) {
            if !(0.0..=255.0).contains(v) {
                return Err(Error::OutOfRange(*v));
            }
            *v = *v / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Per-node training sets plus unshifted held-out splits.
#[derive(Debug, Clone)]
pub struct Partition {
    pub nodes: Vec<Batch>,
    /// Shift applied to each node's features.
    pub shifts: Vec<AffineShift>,
    /// Raw row indices behind each node's samples, in order.
    pub node_rows: Vec<Vec<usize>>,
    pub validation: Batch,
    pub test: Batch,
    pub validation_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Sizes of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub nodes: usize,
    pub per_node: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_NODES,
            per_node: DEFAULT_NODE_SAMPLES,
            validation: DEFAULT_HELD_OUT,
            test: DEFAULT_HELD_OUT,
        }
    }
}

/// Shuffles rows into disjoint node, validation and test sets, then pushes
/// node `i`'s features through its own random shift. Held-out sets stay
/// unshifted.
pub fn partition_with_shifts(
    raw: &RawDataset,
    sizes: SplitSizes,
    sigma: f64,
    seed: u64,
) -> Result<Partition> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument {
            name: "sigma",
            reason: format!("must be finite and nonnegative, got {sigma}"),
        });
    }
    if sizes.nodes == 0 || sizes.per_node == 0 {
        return Err(Error::InvalidArgument {
            name: "sizes",
            reason: "need at least one node and one sample per node".into(),
        });
    }
    let needed = sizes.nodes * sizes.per_node + sizes.validation + sizes.test;
    if needed > raw.len() {
        return Err(Error::InsufficientData {
            needed,
            available: raw.len(),
        });
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut RngStream::derive(seed, Purpose::Partition, 0, 0).rng());
    let d = raw.dim();
    let mut nodes = Vec::with_capacity(sizes.nodes);
    let mut shifts = Vec::with_capacity(sizes.nodes);
    let mut node_rows = Vec::with_capacity(sizes.nodes);
    for i in 0..sizes.nodes {
        let rows = order[i * sizes.per_node..(i + 1) * sizes.per_node].to_vec();
        let shift = if sigma == 0.0 {
            AffineShift::identity(d)
        } else {
            sample_node_shift(&RngStream::new(seed, i as u64), d, sigma)
        };
        let mut batch = raw.batch(&rows);
        if sigma != 0.0 {
            for j in 0..batch.len() {
                let moved = apply(&shift, &batch.sample(j))?;
                batch.features.row_mut(j).copy_from_slice(moved.as_slice());
            }
        }
        nodes.push(batch);
        shifts.push(shift);
        node_rows.push(rows);
    }
    let start = sizes.nodes * sizes.per_node;
    let validation_rows = order[start..start + sizes.validation].to_vec();
    let test_rows = order[start + sizes.validation..needed].to_vec();
    Ok(Partition {
        nodes,
        shifts,
        node_rows,
        validation: raw.batch(&validation_rows),
        test: raw.batch(&test_rows),
        validation_rows,
        test_rows,
    })
}

/// `K` spherical unit-variance Gaussian clusters whose means have norm
/// `separation`. Means are scaled basis vectors when `K ≤ d`, random
/// directions otherwise. Labels cycle through the classes.
pub fn synth_gaussian_mixture(
    k: usize,
    d: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<RawDataset> {
    if k < 2 {
        return Err(Error::InvalidArgument {
            name: "k",
            reason: format!("need at least two classes, got {k}"),
        });
    }
    if d == 0 {
        return Err(Error::InvalidArgument {
            name: "d",
            reason: "dimension must be positive".into(),
        });
    }
    let means = if k <= d {
        Matrix::from_fn(k, d, |c, j| if c == j { separation } else { 0.0 })
    } else {
        let mut m = gaussian_matrix(
            &RngStream::derive(seed, Purpose::Synthetic, 0, 0),
            k,
            d,
            1.0,
        );
        for c in 0..k {
            let norm = m.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            m.row_mut(c)
                .iter_mut()
                .for_each(|v| *v *= separation / norm);
        }
        m
    };
    let noise = gaussian_matrix(
        &RngStream::derive(seed, Purpose::Synthetic, 1, 0),
        n,
        d,
        1.0,
    );
    let labels: Vec<usize> = (0..n).map(|j| j % k).collect();
    let features = Matrix::from_fn(n, d, |j, c| means[(labels[j], c)] + noise[(j, c)]);
    Ok(RawDataset {
        features,
        labels,
        image_shape: None,
        source: format!("mixture(k={k}, d={d}, sep={separation})"),
    })
}
