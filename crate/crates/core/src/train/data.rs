//! IDX files, normalized in-memory datasets, seeded batching and a
//! synthetic digit generator for desk-scale runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

/// Decoded IDX array, widened to `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parses an IDX buffer: magic `00 00 <dtype> <rank>`, `rank` big-endian
/// `u32` dimensions, then the big-endian payload. Accepts `u8` and `f32`.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let take = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(offset..offset + n)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated: needed {n} bytes at {offset}")))
    };
    let magic = take(0, 4)?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::format(0, format!("bad IDX magic {magic:02x?}")));
    }
    let width = match magic[2] {
        IDX_U8 => 1,
        IDX_F32 => 4,
        other => return Err(Error::format(2, format!("unsupported IDX dtype 0x{other:02x}"))),
    };
    let rank = magic[3] as usize;
    if rank == 0 {
        return Err(Error::format(3, "IDX rank 0"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = take(4 + 4 * i, 4)?;
        dims.push(u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize);
    }
    let start = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = take(start, count * width)?;
    if bytes.len() != start + count * width {
        return Err(Error::format(
            (start + count * width) as u64,
            format!("{} trailing bytes", bytes.len() - start - count * width),
        ));
    }
    let data = if width == 1 {
        payload.iter().map(|&b| f32::from(b)).collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    Ok(IdxArray { dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_idx(&fs::read(path)?)
}

pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::dim("write_idx_u8", dims, &[data.len()]));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&[0, 0, IDX_U8, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn split_paths(root: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        root.join(format!("{split}-images.idx")),
        root.join(format!("{split}-labels.idx")),
    )
}

/// Mini-batch of normalized images `[b, k, h, w]` and labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Position of each sample in its dataset.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, k, h, w]`, zero mean and unit variance per channel.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    /// Builds a dataset from raw pixel values, normalizing each channel with
    /// its own mean and standard deviation.
    pub fn from_raw(dims: &[usize], pixels: Vec<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = match *dims {
            [n, h, w] => vec![n, 1, h, w],
            [n, k, h, w] => vec![n, k, h, w],
            _ => return Err(Error::format(3, format!("image file must have rank 3 or 4, got {dims:?}"))),
        };
        let n = shape[0];
        if labels.len() != n {
            return Err(Error::format(
                0,
                format!("label count {} does not match image count {n}", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::format(4, "empty dataset"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        let (k, plane) = (shape[1], shape[2] * shape[3]);
        let mut pixels = pixels;
        for c in 0..k {
            let idx = |i: usize, j: usize| (i * k + c) * plane + j;
            let count = (n * plane) as f64;
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..plane {
                    sum += f64::from(pixels[idx(i, j)]);
                }
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..n {
                for j in 0..plane {
                    sq += (f64::from(pixels[idx(i, j)]) - mean).powi(2);
                }
            }
            let std = (sq / count).sqrt().max(1e-6);
            for i in 0..n {
                for j in 0..plane {
                    let p = &mut pixels[idx(i, j)];
                    *p = ((f64::from(*p) - mean) / std) as f32;
                }
            }
        }
        Ok(Self {
            images: Tensor::new(&shape, pixels)?,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// First `n` samples (all of them when `n` is 0 or too large).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n >= self.len() {
            return Ok(self.clone());
        }
        let per = self.images.len() / self.len();
        let (k, h, w) = self.image_shape();
        Ok(Self {
            images: Tensor::new(&[n, k, h, w], self.images.data()[..n * per].to_vec())?,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        })
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let per = self.images.len() / self.len();
        let (k, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Batch {
            images: Tensor::new(&[indices.len(), k, h, w], data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// Shuffled batches for one epoch; the order depends only on `(seed, epoch)`.
    /// The final batch may be smaller.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    /// Batches in storage order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }
}

/// Reads `<root>/<split>-images.idx` and `<root>/<split>-labels.idx`.
pub fn load_dataset(root: &Path, split: &str, num_classes: usize) -> Result<Dataset> {
    let (ip, lp) = split_paths(root, split);
    let images = read_idx(&ip)?;
    let labels = read_idx(&lp)?;
    if labels.dims.len() != 1 {
        return Err(Error::format(3, format!("label file must have rank 1, got {:?}", labels.dims)));
    }
    let labels: Vec<usize> = labels.data.iter().map(|&v| v as usize).collect();
    Dataset::from_raw(&images.dims, images.data, labels, num_classes)
}

/// 5x7 bitmaps for the digits 0-9, one row per byte, 5 low bits used.
const GLYPHS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Largest offset of the glyph center from the image center, as a fraction of the side.
const JITTER: f64 = 0.1;

fn glyph_on(class: usize, row: i64, col: i64) -> bool {
    (0..7).contains(&row) && (0..5).contains(&col) && GLYPHS[class][row as usize] >> (4 - col) & 1 == 1
}

/// Renders `n` single-channel `size x size` digit images with random scale,
/// shear, offset from center, stroke intensity and pixel noise. Labels cycle through
/// the first `num_classes` digits in shuffled order.
pub fn synth_digits(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<(Vec<u8>, Vec<usize>)> {
    if !(1..=10).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic digits support 1-10 classes, got {num_classes}")));
    }
    if size < 12 {
        return Err(Error::Config(format!("synthetic digits need images of at least 12 pixels, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 18.0).expect("valid std");
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let s = size as f64;
    let mut pixels = vec![0u8; n * size * size];
    for (img, &class) in pixels.chunks_exact_mut(size * size).zip(&labels) {
        // Glyph cell size in pixels; the glyph spans 5 x 7 cells.
        let cw = rng.random_range(0.45..0.65) * s / 5.0;
        let ch = rng.random_range(0.55..0.8) * s / 7.0;
        let shear: f64 = rng.random_range(-0.25..0.25);
        let (gw, gh) = (5.0 * cw, 7.0 * ch);
        // Centered like scanned-digit sets, with a few pixels of jitter.
        let jitter = JITTER * s;
        let x0 = (s - gw) / 2.0 + shear * gh / 2.0 + rng.random_range(-jitter..=jitter);
        let y0 = (s - gh) / 2.0 + rng.random_range(-jitter..=jitter);
        let ink = rng.random_range(150.0..255.0);
        for y in 0..size {
            for x in 0..size {
                // Pixel center mapped back into glyph cell coordinates.
                let (py, px) = (y as f64 + 0.5 - y0, x as f64 + 0.5 - x0);
                let gy = (py / ch).floor() as i64;
                let gx = ((px + shear * (py - gh)) / cw).floor() as i64;
                let base = if glyph_on(class, gy, gx) { ink } else { 0.0 };
                let v: f64 = base + noise.sample(&mut rng);
                img[y * size + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok((pixels, labels))
}

/// Writes a synthetic split as a pair of IDX files under `root`.
pub fn write_synth_split(root: &Path, split: &str, n: usize, size: usize, num_classes: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(root)?;
    let (pixels, labels) = synth_digits(n, size, num_classes, seed)?;
    let (ip, lp) = split_paths(root, split);
    write_idx_u8(&ip, &[n, size, size], &pixels)?;
    let labels: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    write_idx_u8(&lp, &[n], &labels)
}
