//! CIFAR-10 binary batches and IDX (Fashion-MNIST) files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use favit_core::imaging::ImageRgb;

use crate::config::DataFormat;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled images of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Vec<ImageRgb>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

impl DatasetSplit {
    pub fn new(images: Vec<ImageRgb>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(data_err(format!(
                "{split} split has {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(data_err(format!("{split} label {l} outside [0, {classes})")));
        }
        if let Some(first) = images.first() {
            let dims = (first.height(), first.width());
            if images.iter().any(|i| (i.height(), i.width()) != dims) {
                return Err(data_err(format!("{split} split mixes image sizes")));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the listed classes, relabelled to their position in `keep`.
    pub fn select_classes(&self, keep: &[usize]) -> Result<Self> {
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for (img, &l) in self.images.iter().zip(&self.labels) {
            if let Some(pos) = keep.iter().position(|&k| k == l) {
                images.push(img.clone());
                labels.push(pos);
            }
        }
        Self::new(images, labels, keep.len(), self.split)
    }

    /// First `n` items.
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }

    /// Nearest-neighbour resize preserving aspect ratio, then centred on a
    /// black `height x width` canvas. Matching sizes pass through.
    pub fn fit(&self, height: usize, width: usize) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|img| fit_image(img, height, width))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, self.labels.clone(), self.classes, self.split)
    }
}

pub fn fit_image(img: &ImageRgb, height: usize, width: usize) -> Result<ImageRgb> {
    if (img.height(), img.width()) == (height, width) {
        return Ok(img.clone());
    }
    let scale = (height as f64 / img.height() as f64).min(width as f64 / img.width() as f64);
    let h = ((img.height() as f64 * scale).floor() as usize).clamp(1, height);
    let w = ((img.width() as f64 * scale).floor() as usize).clamp(1, width);
    Ok(img.resize_nearest(h, w)?.center_embed(height, width)?)
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// Label byte plus 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

pub fn parse_cifar10_batch(bytes: &[u8], split: Split) -> Result<DatasetSplit> {
    if bytes.is_empty() {
        return Err(data_err("empty CIFAR-10 batch"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(data_err(format!(
            "truncated CIFAR-10 batch: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        let interleaved: Vec<u8> = (0..plane).flat_map(|i| [px[i], px[plane + i], px[2 * plane + i]]).collect();
        images.push(ImageRgb::from_rgb8(CIFAR_SIDE, CIFAR_SIDE, &interleaved)?);
    }
    DatasetSplit::new(images, labels, CIFAR_CLASSES, split)
}

fn to_u8(v: f64) -> Result<u8> {
    let b = (v * 255.0).round();
    if !(0.0..=255.0).contains(&b) {
        return Err(data_err(format!("pixel {v} outside [0, 1]")));
    }
    Ok(b as u8)
}

/// Inverse of [`parse_cifar10_batch`] for 32x32 splits.
pub fn encode_cifar10_batch(split: &DatasetSplit) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(split.len() * CIFAR_RECORD);
    for (img, &label) in split.images.iter().zip(&split.labels) {
        if (img.height(), img.width()) != (CIFAR_SIDE, CIFAR_SIDE) || label > 255 {
            return Err(data_err("CIFAR-10 records hold 32x32 images and byte labels"));
        }
        out.push(label as u8);
        for c in 0..3 {
            for i in 0..plane {
                out.push(to_u8(img.data()[3 * i + c])?);
            }
        }
    }
    Ok(out)
}

const CIFAR_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST: &str = "test_batch.bin";

fn cifar_root(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// The five training batches and the test batch from `dir` (or its
/// `cifar-10-batches-bin` subdirectory). Training batches must hold equal
/// record counts.
pub fn load_cifar10(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let root = cifar_root(dir);
    let mut train = DatasetSplit::new(Vec::new(), Vec::new(), CIFAR_CLASSES, Split::Train)?;
    let mut per_batch = None;
    for name in CIFAR_TRAIN {
        let batch = parse_cifar10_batch(&read(&root.join(name))?, Split::Train)?;
        match per_batch {
            None => per_batch = Some(batch.len()),
            Some(n) if n != batch.len() => {
                return Err(data_err(format!(
                    "record count mismatch: {name} holds {} records, earlier batches {n}",
                    batch.len()
                )))
            }
            Some(_) => {}
        }
        train.images.extend(batch.images);
        train.labels.extend(batch.labels);
    }
    let test = parse_cifar10_batch(&read(&root.join(CIFAR_TEST))?, Split::Test)?;
    Ok((train, test))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| data_err(format!("{what}: header truncated")))
}

/// Grayscale IDX images, replicated to three channels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ImageRgb>> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(data_err(format!(
            "IDX images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) || rows == 0 || cols == 0 {
        return Err(data_err(format!(
            "IDX images: extent mismatch, header says {n} x {rows} x {cols} but payload is {} bytes",
            bytes.len().saturating_sub(16)
        )));
    }
    bytes[16..]
        .chunks_exact(rows * cols)
        .map(|g| {
            let rgb: Vec<u8> = g.iter().flat_map(|&v| [v, v, v]).collect();
            Ok(ImageRgb::from_rgb8(rows, cols, &rgb)?)
        })
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(data_err(format!(
            "IDX labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX labels")? as usize;
    if bytes.len() != n + 8 {
        return Err(data_err(format!(
            "IDX labels: extent mismatch, header says {n} labels but payload is {} bytes",
            bytes.len() - 8
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// IDX image file for grayscale images; the red channel is written.
pub fn encode_idx_images(images: &[ImageRgb]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut out = Vec::new();
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if (img.height(), img.width()) != (rows, cols) {
            return Err(data_err("IDX images must share one size"));
        }
        for px in img.data().chunks_exact(3) {
            out.push(to_u8(px[0])?);
        }
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() + 8);
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| data_err(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

pub const FASHION_CLASSES: usize = 10;

fn idx_split(dir: &Path, prefix: &str, split: Split) -> Result<DatasetSplit> {
    let images = parse_idx_images(&read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    let labels = parse_idx_labels(&read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    DatasetSplit::new(images, labels, FASHION_CLASSES, split)
}

/// `train-*` and `t10k-*` IDX files from `dir`, uncompressed.
pub fn load_fashion_mnist(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    Ok((idx_split(dir, "train", Split::Train)?, idx_split(dir, "t10k", Split::Test)?))
}

pub fn load(format: DataFormat, dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    match format {
        DataFormat::Cifar10 => load_cifar10(dir),
        DataFormat::FashionMnist => load_fashion_mnist(dir),
    }
}
