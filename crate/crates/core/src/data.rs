//! Datasets: IDX loader, synthetic 2-D blobs, splits and seeded batches.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples with inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let n = inputs.rows();
        if inputs.shape().len() != 2 {
            return Err(Error::shape(format!("inputs must be [n x d], got {:?}", inputs.shape())));
        }
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("dataset inputs must lie in [0, 1]"));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Examples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Rows and labels for a batch of indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Seeded shuffle, then the first `n_train` and next `n_test` examples.
    pub fn split(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_test == 0 || n_train + n_test > self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} examples into {n_train} + {n_test}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&idx[..n_train]), self.subset(&idx[n_train..n_train + n_test])))
    }

    /// `x1,x2,label` rows with a header; 2-D datasets only.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.dim() != 2 {
            return Err(Error::invalid("CSV export is defined for 2-D inputs"));
        }
        writeln!(w, "x1,x2,label")?;
        for i in 0..self.len() {
            let r = self.inputs.row(i);
            writeln!(w, "{},{},{}", r[0], r[1], self.labels[i])?;
        }
        Ok(())
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated(format!("image data: need {need} bytes, have {}", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("label data: need {n} bytes, have {}", body.len())));
    }
    Ok(&body[..n])
}

/// Builds a dataset from raw IDX bytes. Pixels are scaled by `1/255`.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], provenance: &str) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("IDX file holds no examples"));
    }
    let d = rows * cols;
    let inputs = Tensor::matrix(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(inputs, labels, classes, provenance)
}

/// Loads an IDX image/label pair (optionally gzip-compressed).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_all(ip)?;
    let labels = read_all(lp)?;
    dataset_from_idx(&images, &labels, &format!("idx:{}", ip.display()))
}

/// Serializes images as IDX (`0x00000803`); pixels are `round(255 * x)`.
pub fn encode_idx_images(inputs: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if inputs.cols() != rows * cols {
        return Err(Error::shape(format!("{} pixels per row, expected {rows}x{cols}", inputs.cols())));
    }
    let mut out = Vec::with_capacity(16 + inputs.len());
    for v in [IDX_IMAGES_MAGIC, inputs.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(inputs.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid("IDX labels must fit in a byte"))?);
    }
    Ok(out)
}

/// Standard deviation of each blob.
pub const BLOB_STD: f64 = 0.05;

/// Blob centers for a given margin: on the diagonal, each at distance
/// `margin + 3 * BLOB_STD` from the boundary `x1 + x2 = 1`.
pub fn blob_centers(margin: f64) -> Result<[[f64; 2]; 2]> {
    if !(margin >= 0.0) {
        return Err(Error::invalid("margin must be non-negative"));
    }
    let offset = (margin + 3.0 * BLOB_STD) / std::f64::consts::SQRT_2;
    if offset + 3.0 * BLOB_STD >= 0.5 {
        return Err(Error::invalid(format!("margin {margin} does not fit in the unit square")));
    }
    Ok([[0.5 - offset, 0.5 - offset], [0.5 + offset, 0.5 + offset]])
}

/// Two Gaussian classes in `[0,1]^2` separated by the line `x1 + x2 = 1`.
///
/// Samples closer than `margin` to the line, or outside the unit square,
/// are redrawn, so the max-margin boundary has margin at least `margin`.
/// Classes alternate (`label = i % 2`).
pub fn synth_blobs(n: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("need at least 2 examples"));
    }
    let centers = blob_centers(margin)?;
    let normal = Normal::new(0.0, BLOB_STD).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 0 { -1.0 } else { 1.0 };
        loop {
            let p = [
                centers[y][0] + normal.sample(&mut rng),
                centers[y][1] + normal.sample(&mut rng),
            ];
            let dist = sign * (p[0] + p[1] - 1.0) / std::f64::consts::SQRT_2;
            if dist >= margin && p.iter().all(|v| (0.0..=1.0).contains(v)) {
                data.extend_from_slice(&p);
                break;
            }
        }
        labels.push(y);
    }
    Dataset::new(
        Tensor::matrix(n, 2, data)?,
        labels,
        2,
        format!("blobs(n={n},margin={margin},seed={seed})"),
    )
}

/// Seeded permutation of `0..n` cut into `ceil(n/m)` batches; the last may
/// be short.
pub fn batch_indices(n: usize, m: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("batch size {m} not in 1..={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(idx.chunks(m).map(|c| c.to_vec()).collect())
}

/// Index batches covering `dataset` once, in a seeded order.
pub fn batches(dataset: &Dataset, m: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    batch_indices(dataset.len(), m, epoch_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 3, 3] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 128, 255, 0, 0, 0, 255, 255, 255]);
        images.extend_from_slice(&[10, 20, 30, 40, 50, 60, 70, 80, 90]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 7]);
        (images, labels)
    }

    #[test]
    fn idx_fixture_parses() {
        let (images, labels) = fixture();
        let ds = dataset_from_idx(&images, &labels, "fixture").unwrap();
        assert_eq!(ds.inputs().shape(), &[2, 9]);
        assert_eq!(ds.labels(), &[3, 7]);
        let r = ds.inputs().row(0);
        assert_eq!(r[0], 0.0);
        // Byte 128 is the closest representable to one half: 128/255.
        assert_eq!(r[1], 128.0 / 255.0);
        assert!((r[1] - 0.5).abs() < 0.5 / 255.0 + 1e-12);
        assert_eq!(r[2], 1.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (images, labels) = fixture();
        assert!(matches!(
            dataset_from_idx(&images, &images, "x"),
            Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: IDX_IMAGES_MAGIC })
        ));
        assert!(matches!(
            dataset_from_idx(&images[..20], &labels, "x"),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(dataset_from_idx(&images[..6], &labels, "x"), Err(Error::Truncated(_))));
        let mut short_labels = labels.clone();
        short_labels[7] = 1;
        short_labels.pop();
        assert!(matches!(
            dataset_from_idx(&images, &short_labels, "x"),
            Err(Error::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn idx_round_trip_bytes() {
        let (images, labels) = fixture();
        let ds = dataset_from_idx(&images, &labels, "fixture").unwrap();
        assert_eq!(encode_idx_images(ds.inputs(), 3, 3).unwrap(), images);
        assert_eq!(encode_idx_labels(ds.labels()).unwrap(), labels);
    }

    #[test]
    fn load_idx_reads_gzip_and_plain() {
        let (images, labels) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx.gz");
        std::fs::write(&ip, &images).unwrap();
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&labels).unwrap();
        std::fs::write(&lp, enc.finish().unwrap()).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(matches!(load_idx(dir.path().join("nope"), &lp), Err(Error::Io(_))));
    }

    #[test]
    fn blobs_are_deterministic_and_separated() {
        let a = synth_blobs(1000, 0.3, 4).unwrap();
        assert_eq!(a, synth_blobs(1000, 0.3, 4).unwrap());
        assert_ne!(a, synth_blobs(1000, 0.3, 5).unwrap());
        // The boundary x1 + x2 = 1 classifies every point with margin >= 0.3.
        for i in 0..a.len() {
            let r = a.inputs().row(i);
            let s = (r[0] + r[1] - 1.0) / std::f64::consts::SQRT_2;
            assert_eq!((s > 0.0) as usize, a.labels()[i]);
            assert!(s.abs() >= 0.3);
        }
        assert!(synth_blobs(10, 0.6, 0).is_err());
    }

    #[test]
    fn blob_means_match_centers() {
        let ds = synth_blobs(10_000, 0.1, 1).unwrap();
        let centers = blob_centers(0.1).unwrap();
        for (y, c) in centers.iter().enumerate() {
            let rows: Vec<&[f64]> = (0..ds.len()).filter(|&i| ds.labels()[i] == y).map(|i| ds.inputs().row(i)).collect();
            for k in 0..2 {
                let mean = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                assert!((mean - c[k]).abs() < 0.02, "class {y} coord {k}: {mean} vs {}", c[k]);
            }
        }
    }

    #[test]
    fn batches_partition_indices() {
        let b = batch_indices(10, 3, 7).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[3].len(), 1);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let single = batch_indices(10, 10, 7).unwrap();
        assert_eq!(single.len(), 1);
        let other = batch_indices(10, 10, 8).unwrap();
        assert_ne!(single, other);
        let mut s = other[0].clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert!(batch_indices(10, 0, 1).is_err());
        assert!(batch_indices(10, 11, 1).is_err());
    }

    #[test]
    fn csv_export() {
        let ds = synth_blobs(4, 0.1, 0).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("x1,x2,label\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
