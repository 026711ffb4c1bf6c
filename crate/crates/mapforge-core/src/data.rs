//! Dataset ingestion and subset construction.
//!
//! Two on-disk formats are supported: the IDX pair used by MNIST-style
//! corpora and the CIFAR-10 binary batches. Pixels are scaled from `[0,255]`
//! bytes to `[0,1]` reals at load time; no further normalization is applied,
//! so an l∞ budget of `8/255` keeps its pixel-unit meaning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod synth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// Big-endian IDX pair (`*-images-idx3-ubyte`, `*-labels-idx1-ubyte`).
    Idx,
    /// CIFAR-10 binary batches: 3073-byte records, label byte then R,G,B planes.
    Cifar10,
}

/// An immutable labelled image set.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, h, w, c]`, every value in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub source: String,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single image, `[h, w, c]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copy a batch of images by index into a `[k, h, w, c]` tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let img_len: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * img_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * img_len..(i + 1) * img_len]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        (Tensor::from_parts(shape, data), labels)
    }

    fn validate(self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::Dataset(format!("{}: empty dataset", self.source)));
        }
        if self
            .images
            .data()
            .iter()
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Dataset(format!(
                "{}: pixel outside [0,1] after scaling",
                self.source
            )));
        }
        Ok(self)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parse an IDX image file into `(n, h, w, pixels scaled to [0,1])`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let h = read_be_u32(bytes, 8, path)? as usize;
    let w = read_be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "header promises {n} images of {h}x{w} ({expected} bytes), file has {}",
                bytes.len()
            ),
        ));
    }
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, h, w, pixels))
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            path,
            format!("header promises {n} labels, file has {}", bytes.len() - 8),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn idx_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

const CIFAR_RECORD: usize = 3073; // label byte + 32*32*3 plane bytes
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Parse one CIFAR-10 binary batch into interleaved `[n,32,32,3]` pixels.
pub fn parse_cifar_batch(bytes: &[u8], path: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!(
                "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = vec![0.0f32; n * CIFAR_SIDE * CIFAR_SIDE * 3];
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let record = &bytes[rec * CIFAR_RECORD..(rec + 1) * CIFAR_RECORD];
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(
                path,
                format!("record {rec}: label {label} out of range"),
            ));
        }
        labels.push(label);
        let planes = &record[1..];
        let base = rec * CIFAR_SIDE * CIFAR_SIDE * 3;
        for row in 0..CIFAR_SIDE {
            for col in 0..CIFAR_SIDE {
                let spatial = row * CIFAR_SIDE + col;
                for ch in 0..3 {
                    pixels[base + spatial * 3 + ch] =
                        planes[ch * CIFAR_SIDE * CIFAR_SIDE + spatial] as f32 / 255.0;
                }
            }
        }
    }
    Ok((pixels, labels))
}

fn cifar_file_names(split: Split) -> Vec<&'static str> {
    match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => vec!["test_batch.bin"],
    }
}

/// Load one split of a dataset from `root`.
pub fn load_dataset(root: &Path, format: DataFormat, split: Split) -> Result<Dataset> {
    match format {
        DataFormat::Idx => {
            let (img_name, lbl_name) = idx_file_names(split);
            let img_path = root.join(img_name);
            let lbl_path = root.join(lbl_name);
            let (n, h, w, pixels) =
                parse_idx_images(&fs::read(&img_path)?, &img_path.display().to_string())?;
            let labels = parse_idx_labels(&fs::read(&lbl_path)?, &lbl_path.display().to_string())?;
            if labels.len() != n {
                return Err(Error::format(
                    lbl_path.display().to_string(),
                    format!("{} labels for {n} images", labels.len()),
                ));
            }
            let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
            Dataset {
                images: Tensor::from_parts(vec![n, h, w, 1], pixels),
                labels,
                split,
                source: format!("idx:{}", root.display()),
                num_classes,
            }
            .validate()
        }
        DataFormat::Cifar10 => {
            let mut pixels = Vec::new();
            let mut labels = Vec::new();
            for name in cifar_file_names(split) {
                let path = root.join(name);
                let (p, l) = parse_cifar_batch(&fs::read(&path)?, &path.display().to_string())?;
                pixels.extend(p);
                labels.extend(l);
            }
            let n = labels.len();
            Dataset {
                images: Tensor::from_parts(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], pixels),
                labels,
                split,
                source: format!("cifar10:{}", root.display()),
                num_classes: CIFAR_CLASSES,
            }
            .validate()
        }
    }
}

/// Draw a class-balanced subset of `n` images without replacement.
///
/// Per-class counts differ by at most one; when `n` is not divisible by the
/// class count the remainder goes to the lowest class ids. Deterministic for
/// a fixed seed.
pub fn sample_balanced_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dataset("requested empty subset".into()));
    }
    if n > dataset.len() {
        return Err(Error::Dataset(format!(
            "requested {n} of {} images",
            dataset.len()
        )));
    }
    let k = dataset.num_classes;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in dataset.labels.iter().enumerate() {
        per_class[label].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (class, pool) in per_class.iter_mut().enumerate() {
        let want = n / k + usize::from(class < n % k);
        if want > pool.len() {
            return Err(Error::Dataset(format!(
                "class {class} has {} examples, subset needs {want}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..want]);
    }

    let (images, labels) = dataset.gather(&chosen);
    Ok(Dataset {
        images,
        labels,
        split: dataset.split,
        source: format!("{}#subset(n={n},seed={seed})", dataset.source),
        num_classes: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(n as u32).to_be_bytes());
        out.extend_from_slice(&(h as u32).to_be_bytes());
        out.extend_from_slice(&(w as u32).to_be_bytes());
        out.extend_from_slice(pixels);
        out
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn idx_roundtrip_scales_to_unit_interval() {
        let bytes = idx_image_bytes(2, 2, 2, &[0, 255, 128, 1, 2, 3, 4, 5]);
        let (n, h, w, px) = parse_idx_images(&bytes, "mem").unwrap();
        assert_eq!((n, h, w), (2, 2, 2));
        assert_eq!(px[0], 0.0);
        assert_eq!(px[1], 1.0);
        assert!((px[2] - 128.0 / 255.0).abs() < 1e-7);
        assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_bad_magic_is_a_format_error() {
        let mut bytes = idx_image_bytes(1, 1, 1, &[7]);
        bytes[3] = 0x99;
        assert!(matches!(
            parse_idx_images(&bytes, "mem"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_count_mismatch_is_a_format_error() {
        let bytes = idx_image_bytes(3, 2, 2, &[0; 8]); // promises 12 pixel bytes
        assert!(matches!(
            parse_idx_images(&bytes, "mem"),
            Err(Error::Format { .. })
        ));
        let lbl = idx_label_bytes(&[1, 2]);
        assert!(parse_idx_labels(&lbl[..9], "mem").is_err());
    }

    #[test]
    fn cifar_record_layout() {
        // Two records; pixel (row 0, col 1) gets distinct R/G/B values.
        let mut rec = vec![0u8; CIFAR_RECORD * 2];
        rec[0] = 3; // label of record 0
        rec[1 + 1] = 255; // R plane, spatial index 1
        rec[1 + 1024 + 1] = 128; // G plane
        rec[1 + 2048 + 1] = 64; // B plane
        rec[CIFAR_RECORD] = 9; // label of record 1
        let (px, labels) = parse_cifar_batch(&rec, "mem").unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(px.len(), 2 * 32 * 32 * 3);
        assert_eq!(px[3], 1.0); // interleaved: spatial 1, channel R
        assert!((px[4] - 128.0 / 255.0).abs() < 1e-7);
        assert!((px[5] - 64.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn cifar_bad_record_size() {
        let bytes = vec![0u8; CIFAR_RECORD + 1];
        assert!(matches!(
            parse_cifar_batch(&bytes, "mem"),
            Err(Error::Format { .. })
        ));
    }

    fn tiny_dataset(n: usize, k: usize) -> Dataset {
        let images =
            Tensor::from_parts(vec![n, 1, 1, 1], (0..n).map(|i| i as f32 / n as f32).collect());
        Dataset {
            images,
            labels: (0..n).map(|i| i % k).collect(),
            split: Split::Train,
            source: "mem".into(),
            num_classes: k,
        }
    }

    #[test]
    fn balanced_subset_is_exactly_balanced() {
        let ds = tiny_dataset(1000, 10);
        let sub = sample_balanced_subset(&ds, 100, 0).unwrap();
        let mut counts = [0usize; 10];
        for &l in &sub.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));

        let minimal = sample_balanced_subset(&ds, 10, 0).unwrap();
        let mut counts = [0usize; 10];
        for &l in &minimal.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn balanced_subset_distributes_remainder_within_one() {
        let ds = tiny_dataset(1000, 10);
        let sub = sample_balanced_subset(&ds, 25, 3).unwrap();
        let mut counts = [0usize; 10];
        for &l in &sub.labels {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert_eq!(sub.len(), 25);
        assert!(max - min <= 1);
    }

    #[test]
    fn balanced_subset_is_deterministic_and_duplicate_free() {
        let ds = tiny_dataset(500, 10);
        let a = sample_balanced_subset(&ds, 50, 42).unwrap();
        let b = sample_balanced_subset(&ds, 50, 42).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);

        // Images in this fixture are unique per index, so duplicate pixels
        // would reveal duplicate indices.
        let mut seen: Vec<u32> = a.images.data().iter().map(|v| v.to_bits()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), a.len());
    }

    #[test]
    fn class_with_too_few_examples_is_an_error() {
        let mut ds = tiny_dataset(100, 10);
        ds.labels = (0..100).map(|i| if i < 99 { i % 9 } else { 9 }).collect();
        assert!(sample_balanced_subset(&ds, 100, 0).is_err());
    }
}
