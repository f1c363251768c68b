//! Dataset ingestion and synthetic dataset generation.
//!
//! IDX files (the MNIST container) are read bit-exactly: big-endian u32
//! magic, dimensions, u8 payload. Pixels are scaled by 1/255 and 28x28
//! images are zero-padded to 32x32 with a centered 2-pixel border.
//!
//! Synthetic generators cover the desk-scale experiments:
//! * [`generate_two_attribute`] — two spatially disjoint attribute regions
//!   with independent labels, so expected sieve behavior has a brute-force
//!   checkable ground truth.
//! * [`generate_biased`] — a label region plus a spurious sensitive-correlated
//!   region, for the fairness experiments.
//! * [`generate_digits`] — procedurally rendered digit glyphs in MNIST-like
//!   28x28 frames, used when no real IDX files are on disk.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature tensors plus integer labels, with optional sensitive-attribute
/// and private-task labels. All arrays have the same leading length.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub sensitive: Option<Vec<u32>>,
    pub private_labels: Option<Vec<u32>>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<u32>) -> Result<Self> {
        if features.shape().is_empty() || features.shape()[0] != labels.len() {
            return Err(Error::InvalidArg {
                op: "LabeledDataset::new",
                msg: format!(
                    "feature count {:?} does not match {} labels",
                    features.shape().first(),
                    labels.len()
                ),
            });
        }
        Ok(LabeledDataset {
            features,
            labels,
            sensitive: None,
            private_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one item (the classifier input shape).
    pub fn item_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    fn item_len(&self) -> usize {
        self.item_shape().iter().product()
    }

    /// Gather rows into a batch tensor `[indices.len(), ...item]`.
    pub fn batch_features(&self, indices: &[usize]) -> Tensor {
        let row = self.item_len();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.item_shape());
        Tensor::from_raw(shape, out)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// New dataset holding the selected rows (labels and optional attribute
    /// arrays follow along).
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.batch_features(indices),
            labels: self.batch_labels(indices),
            sensitive: self
                .sensitive
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            private_labels: self
                .private_labels
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Copy with the private-task labels promoted to the main labels.
    pub fn with_private_as_labels(&self) -> Result<LabeledDataset> {
        let private = self.private_labels.as_ref().ok_or_else(|| Error::InvalidArg {
            op: "with_private_as_labels",
            msg: "dataset has no private labels".into(),
        })?;
        Ok(LabeledDataset {
            features: self.features.clone(),
            labels: private.clone(),
            sensitive: self.sensitive.clone(),
            private_labels: self.private_labels.clone(),
        })
    }
}

fn read_be_u32(r: &mut impl Read, context: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated { context })?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label file pair. Pixels are scaled to [0, 1]; 28x28
/// images are zero-padded to 32x32 with the digit centered.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut img = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_be_u32(&mut img, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::InvalidArg {
            op: "load_idx",
            msg: format!("wrong images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&mut img, "image count")? as usize;
    let rows = read_be_u32(&mut img, "image rows")? as usize;
    let cols = read_be_u32(&mut img, "image cols")? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|_| Error::Truncated { context: "image payload" })?;

    let mut lab = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let lmagic = read_be_u32(&mut lab, "labels magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::InvalidArg {
            op: "load_idx",
            msg: format!("wrong labels magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = read_be_u32(&mut lab, "label count")? as usize;
    if ln != n {
        return Err(Error::InvalidArg {
            op: "load_idx",
            msg: format!("image count {n} does not match label count {ln}"),
        });
    }
    let mut labels_u8 = vec![0u8; ln];
    lab.read_exact(&mut labels_u8)
        .map_err(|_| Error::Truncated { context: "label payload" })?;

    // Pad 28x28 to 32x32 (2-pixel centered border); other sizes pass through.
    let (out_rows, out_cols, pad) = if rows == 28 && cols == 28 {
        (32usize, 32usize, 2usize)
    } else {
        (rows, cols, 0usize)
    };
    let mut data = vec![0.0f32; n * out_rows * out_cols];
    for i in 0..n {
        for r in 0..rows {
            for c in 0..cols {
                let v = pixels[(i * rows + r) * cols + c] as f32 / 255.0;
                data[(i * out_rows + r + pad) * out_cols + c + pad] = v;
            }
        }
    }
    let features = Tensor::from_raw(vec![n, 1, out_rows, out_cols], data);
    LabeledDataset::new(features, labels_u8.into_iter().map(u32::from).collect())
}

/// Write a dataset back out as an IDX image/label file pair (u8 pixels,
/// value = round(pixel * 255)).
pub fn save_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let shape = ds.features.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::InvalidArg {
            op: "save_idx",
            msg: format!("expected [n,1,h,w] features, got {:?}", shape),
        });
    }
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(ds.features.data().iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::File::create(images_path)?.write_all(&img)?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Zero-pad `[n, 1, h, w]` image features to a centered `side x side`
/// canvas — the same placement the IDX loader uses for 28x28 inputs.
pub fn pad_centered(ds: &LabeledDataset, side: usize) -> Result<LabeledDataset> {
    let shape = ds.features.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] > side || shape[3] > side {
        return Err(Error::InvalidArg {
            op: "pad_centered",
            msg: format!("cannot pad {:?} to {side}x{side}", shape),
        });
    }
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let (pr, pc) = ((side - rows) / 2, (side - cols) / 2);
    let mut out = vec![0.0f32; n * side * side];
    for i in 0..n {
        for r in 0..rows {
            for c in 0..cols {
                out[(i * side + r + pr) * side + c + pc] =
                    ds.features.data()[(i * rows + r) * cols + c];
            }
        }
    }
    Ok(LabeledDataset {
        features: Tensor::from_raw(vec![n, 1, side, side], out),
        labels: ds.labels.clone(),
        sensitive: ds.sensitive.clone(),
        private_labels: ds.private_labels.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// digit d -> 1 if d > 5 else 0 (strict inequality).
    Gt5,
    /// keep labels unchanged.
    Identity,
}

impl std::str::FromStr for LabelRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gt5" => Ok(LabelRule::Gt5),
            "identity" => Ok(LabelRule::Identity),
            other => Err(format!("unknown label rule '{other}'")),
        }
    }
}

pub fn derive_binary_labels(ds: &LabeledDataset, rule: LabelRule) -> LabeledDataset {
    let labels = match rule {
        LabelRule::Gt5 => ds.labels.iter().map(|&d| u32::from(d > 5)).collect(),
        LabelRule::Identity => ds.labels.clone(),
    };
    LabeledDataset {
        features: ds.features.clone(),
        labels,
        sensitive: ds.sensitive.clone(),
        private_labels: ds.private_labels.clone(),
    }
}

const TWO_ATTR_SIDE: usize = 16;

/// Stripe levels of the two-attribute generator. The two orientations use
/// different brightness pairs so every pixel of a region differs between the
/// two patterns; with a shared pair, pixels whose row and column parity agree
/// take the same value under both orientations and carry no label signal at
/// all. The moderate contrast also matters: the classifier must grow its
/// weights well past the random-init scale to reach its margin, which is the
/// separation the noise-map trainer keys on.
pub const STRIPE_V_HIGH: f32 = 0.65;
pub const STRIPE_V_LOW: f32 = 0.35;
pub const STRIPE_H_HIGH: f32 = 0.55;
pub const STRIPE_H_LOW: f32 = 0.45;

/// 16x16 images with two disjoint 8x16 regions. Region A (top) encodes the
/// target label as horizontal (0) vs vertical (1) stripes; region B (bottom)
/// encodes the private label the same way. Labels drawn independently.
/// Additive uniform pixel noise of amplitude `noise_level` pulls bright
/// pixels down and dark pixels up, so values stay in [0, 1].
pub fn generate_two_attribute(n: usize, seed: u64, noise_level: f32) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "generate_two_attribute",
            msg: "need at least one sample".into(),
        });
    }
    if !(0.0..=0.5).contains(&noise_level) {
        return Err(Error::InvalidArg {
            op: "generate_two_attribute",
            msg: format!("noise_level {noise_level} outside [0, 0.5]"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = TWO_ATTR_SIDE;
    let mut data = vec![0.0f32; n * side * side];
    let mut target = Vec::with_capacity(n);
    let mut private = Vec::with_capacity(n);
    for i in 0..n {
        let t: u32 = rng.gen_range(0..2);
        let p: u32 = rng.gen_range(0..2);
        target.push(t);
        private.push(p);
        for r in 0..side {
            for c in 0..side {
                let vertical = if r < side / 2 { t == 1 } else { p == 1 };
                let base = match (vertical, if vertical { c % 2 } else { r % 2 }) {
                    (true, 0) => STRIPE_V_HIGH,
                    (true, _) => STRIPE_V_LOW,
                    (false, 0) => STRIPE_H_HIGH,
                    (false, _) => STRIPE_H_LOW,
                };
                let u: f32 = if noise_level > 0.0 {
                    rng.gen_range(0.0..noise_level)
                } else {
                    0.0
                };
                let v = if base > 0.5 { base - u } else { base + u };
                data[(i * side + r) * side + c] = v;
            }
        }
    }
    let features = Tensor::from_raw(vec![n, 1, side, side], data);
    let mut ds = LabeledDataset::new(features, target)?;
    ds.private_labels = Some(private);
    Ok(ds)
}

/// Flat pixel indices of region B (the private-attribute half) of
/// [`generate_two_attribute`] images.
pub fn two_attribute_region_b() -> Vec<usize> {
    let side = TWO_ATTR_SIDE;
    (side / 2 * side..side * side).collect()
}

/// Flat pixel indices of region A (the target half).
pub fn two_attribute_region_a() -> Vec<usize> {
    let side = TWO_ATTR_SIDE;
    (0..side / 2 * side).collect()
}

/// Fairness variant: region A (top half) encodes the label as stripes but its
/// pattern is flipped with probability `label_flip`, so region A alone caps
/// accuracy at 1 - label_flip. Region C (bottom half) is a uniform block
/// whose intensity encodes the sensitive bit. Labels equal the sensitive bit
/// with probability `bias_rate` and are drawn fresh otherwise, which plants
/// the spurious shortcut a classifier picks up.
///
/// Contrast is deliberately asymmetric: the label stripes are low-contrast
/// (the classifier must grow large weights to read them) while the sensitive
/// block is high-contrast (small weights suffice). Under noise-map pressure
/// the low-weight shortcut region is the first to be suppressed, which is
/// the fairness effect the evaluation measures.
pub fn generate_biased(
    n: usize,
    seed: u64,
    bias_rate: f32,
    label_flip: f32,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "generate_biased",
            msg: "need at least one sample".into(),
        });
    }
    for (name, v) in [("bias_rate", bias_rate), ("label_flip", label_flip)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArg {
                op: "generate_biased",
                msg: format!("{name} {v} outside [0, 1]"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = TWO_ATTR_SIDE;
    let mut data = vec![0.0f32; n * side * side];
    let mut labels = Vec::with_capacity(n);
    let mut sensitive = Vec::with_capacity(n);
    for i in 0..n {
        let s: u32 = rng.gen_range(0..2);
        let y: u32 = if rng.gen::<f32>() < bias_rate {
            s
        } else {
            rng.gen_range(0..2)
        };
        sensitive.push(s);
        labels.push(y);
        // Pattern shown in region A: the label, sometimes flipped.
        let shown = if rng.gen::<f32>() < label_flip { 1 - y } else { y };
        let c_level = if s == 1 { 0.95f32 } else { 0.05f32 };
        for r in 0..side {
            for c in 0..side {
                let v = if r < side / 2 {
                    let parity = if shown == 1 { c % 2 } else { r % 2 };
                    if parity == 0 {
                        0.55
                    } else {
                        0.45
                    }
                } else {
                    c_level
                };
                let jitter: f32 = rng.gen_range(-0.05..0.05);
                data[(i * side + r) * side + c] = (v + jitter).clamp(0.0, 1.0);
            }
        }
    }
    let features = Tensor::from_raw(vec![n, 1, side, side], data);
    let mut ds = LabeledDataset::new(features, labels)?;
    ds.sensitive = Some(sensitive);
    Ok(ds)
}

/// Partition a dataset into disjoint subsets by fraction, after a seeded
/// shuffle. Fractions must be positive and sum to 1 (within 1e-9).
pub fn split_disjoint(ds: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArg {
            op: "split_disjoint",
            msg: "no fractions given".into(),
        });
    }
    if let Some(&bad) = fractions.iter().find(|&&f| f <= 0.0) {
        return Err(Error::InvalidArg {
            op: "split_disjoint",
            msg: format!("fraction {bad} must be positive"),
        });
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg {
            op: "split_disjoint",
            msg: format!("fractions sum to {sum}, expected 1"),
        });
    }
    let n = ds.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0usize;
    let mut cum = 0.0f64;
    for (i, &f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        out.push(ds.subset(&indices[start..end]));
        start = end;
    }
    Ok(out)
}

// 5x7 pixel glyphs for digits 0-9, one string row per scanline.
const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"], // 0
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"], // 1
    ["01110", "10001", "00001", "00110", "01000", "10000", "11111"], // 2
    ["01110", "10001", "00001", "00110", "00001", "10001", "01110"], // 3
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"], // 4
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"], // 5
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"], // 6
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"], // 7
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"], // 8
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"], // 9
];

/// Procedurally rendered digit dataset in MNIST-like 28x28 frames: scaled
/// glyphs on a mid-gray background with random shifts, per-sample stroke
/// intensity, per-pixel jitter, and a few full-contrast speckle pixels.
/// Labels are the digits 0-9. This is the stand-in corpus used when no real
/// IDX files are available.
///
/// The speckles matter for the information-theoretic protocol: they make
/// every image differ from every other image by full contrast somewhere,
/// the way handwriting variation does in real data, which keeps the k-NN
/// entropy estimate of the corpus positive.
pub fn generate_digits(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "generate_digits",
            msg: "need at least one sample".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 28usize;
    let scale = 3usize; // glyphs render at 15x21
    let mut data = vec![0.0f32; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = rng.gen_range(0..10u32);
        labels.push(digit);
        let stroke: f32 = rng.gen_range(0.85..1.0);
        let bg: f32 = rng.gen_range(0.40..0.50);
        let dy = rng.gen_range(-3i32..=3);
        let dx = rng.gen_range(-3i32..=3);
        let glyph = &GLYPHS[digit as usize];
        let (gh, gw) = (7 * scale, 5 * scale);
        let top = (side as i32 - gh as i32) / 2 + dy;
        let left = (side as i32 - gw as i32) / 2 + dx;
        for r in 0..side {
            for c in 0..side {
                let gy = r as i32 - top;
                let gx = c as i32 - left;
                let on = gy >= 0
                    && gx >= 0
                    && (gy as usize) < gh
                    && (gx as usize) < gw
                    && GLYPHS[digit as usize][gy as usize / scale]
                        .as_bytes()[gx as usize / scale]
                        == b'1';
                let _ = glyph;
                let base = if on { stroke } else { bg };
                let jitter: f32 = rng.gen_range(-0.04..0.04);
                data[(i * side + r) * side + c] = (base + jitter).clamp(0.0, 1.0);
            }
        }
        for _ in 0..6 {
            let p = (i * side + rng.gen_range(0..side)) * side + rng.gen_range(0..side);
            data[p] = 1.0;
            let p = (i * side + rng.gen_range(0..side)) * side + rng.gen_range(0..side);
            data[p] = 0.0;
        }
    }
    let features = Tensor::from_raw(vec![n, 1, side, side], data);
    LabeledDataset::new(features, labels)
}
