//! Image datasets: IDX files and synthetic generators.

use std::fs;
use std::path::Path;

use arbor_core::feature_map::scale_pixels;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with one label each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, image after image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub names: Option<Vec<String>>,
}

impl ImageSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if rows * cols == 0 || pixels.len() != rows * cols * labels.len() {
            return Err(Error::Usage(format!(
                "{} pixels do not form {} images of {}x{}",
                pixels.len(),
                labels.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, pixels, labels, names: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixel_count();
        &self.pixels[i * p..(i + 1) * p]
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn input(&self, i: usize) -> Vec<f64> {
        scale_pixels(self.image(i))
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.input(i)).collect()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| usize::from(l)).collect()
    }

    /// Smallest class count covering every label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(0)
    }

    /// The first `n` records.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.pixels.truncate(n * self.pixel_count());
            self.labels.truncate(n);
        }
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: offset as u64, message: message.into() }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, format!("file ends before the {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn rest(&self, expected: usize, what: &str) -> Result<&[u8]> {
        let have = self.bytes.len() - self.pos;
        if have < expected {
            return Err(self.fail(self.bytes.len(), format!("expected {expected} bytes of {what}, found {have}")));
        }
        if have > expected {
            return Err(self.fail(self.pos + expected, format!("{} trailing bytes after {what}", have - expected)));
        }
        Ok(&self.bytes[self.pos..])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(c: &mut Cursor<'_>, want: u32) -> Result<()> {
    let magic = c.u32("magic number")?;
    if magic != want {
        return Err(c.fail(0, format!("magic number {magic:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

/// Read an IDX image file and its IDX label file.
pub fn read_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let ib = read_file(images)?;
    let mut c = Cursor { path: images, bytes: &ib, pos: 0 };
    check_magic(&mut c, IMAGE_MAGIC)?;
    let count = c.u32("image count")? as usize;
    let rows = c.u32("row count")? as usize;
    let cols = c.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(c.fail(8, format!("degenerate image size {rows}x{cols}")));
    }
    let pixels = c.rest(count * rows * cols, "pixel data")?.to_vec();

    let lb = read_file(labels)?;
    let mut c = Cursor { path: labels, bytes: &lb, pos: 0 };
    check_magic(&mut c, LABEL_MAGIC)?;
    let lcount = c.u32("label count")? as usize;
    if lcount != count {
        return Err(c.fail(4, format!("{lcount} labels for {count} images")));
    }
    let label_bytes = c.rest(lcount, "label data")?.to_vec();
    Ok(ImageSet { rows, cols, pixels, labels: label_bytes, names: None })
}

/// Write an image set as a pair of IDX files.
pub fn write_idx(set: &ImageSet, images: &Path, labels: &Path) -> Result<()> {
    let mut ib = Vec::with_capacity(16 + set.pixels.len());
    for v in [IMAGE_MAGIC, set.len() as u32, set.rows as u32, set.cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(&set.pixels);
    fs::write(images, ib).map_err(|e| Error::io(images, e))?;
    let mut lb = Vec::with_capacity(8 + set.len());
    for v in [LABEL_MAGIC, set.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(&set.labels);
    fs::write(labels, lb).map_err(|e| Error::io(labels, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// 4x4 images, bright left half (class 0) or bright right half (class 1).
    TwoGaussianStripes,
    /// 2x2 binary images labelled by the parity of their lit pixels.
    ParityPatterns,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "two_gaussian_stripes" => Ok(Self::TwoGaussianStripes),
            "parity_patterns" => Ok(Self::ParityPatterns),
            _ => Err(Error::Core(arbor_core::Error::Argument(format!("unknown synthetic dataset '{s}'")))),
        }
    }
}

/// Deterministic synthetic dataset of `n` images.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<ImageSet> {
    if n == 0 {
        return Err(Error::Core(arbor_core::Error::Argument("synthetic dataset needs n >= 1".into())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::TwoGaussianStripes => {
            let bright = Normal::new(200.0f64, 15.0).unwrap();
            let dark = Normal::new(50.0f64, 15.0).unwrap();
            let mut pixels = Vec::with_capacity(16 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = (i % 2) as u8;
                for _ in 0..4 {
                    for col in 0..4 {
                        let lit = (col < 2) == (label == 0);
                        let v: f64 = if lit {
                            bright.sample(&mut rng).clamp(170.0, 230.0)
                        } else {
                            dark.sample(&mut rng).clamp(20.0, 80.0)
                        };
                        pixels.push(v.round() as u8);
                    }
                }
                labels.push(label);
            }
            let mut set = ImageSet::new(4, 4, pixels, labels)?;
            set.names = Some(vec!["left".into(), "right".into()]);
            Ok(set)
        }
        SynthKind::ParityPatterns => {
            let mut pixels = Vec::with_capacity(4 * n);
            let mut labels = Vec::with_capacity(n);
            let mut block: Vec<u8> = (0..16).collect();
            while labels.len() < n {
                block.shuffle(&mut rng);
                for &pattern in block.iter().take(n - labels.len()) {
                    pixels.extend((0..4).map(|b| if pattern >> b & 1 == 1 { 255 } else { 0 }));
                    labels.push((pattern.count_ones() % 2) as u8);
                }
            }
            let mut set = ImageSet::new(2, 2, pixels, labels)?;
            set.names = Some(vec!["even".into(), "odd".into()]);
            Ok(set)
        }
    }
}
