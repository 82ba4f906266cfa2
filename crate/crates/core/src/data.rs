//! Datasets: IDX ingestion and deterministic synthetic generators.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...sample_shape]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        if images.shape().len() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(&shape, data)?, labels))
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx).expect("indices in range");
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split.clone(),
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes an IDX image file (`0x00000803`) into `[n, 1, rows, cols]` pixels / 255.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format(
            (16 + need) as u64,
            "trailing bytes after pixel data",
        ));
    }
    if need == 0 {
        return Err(Error::format(4, "image file holds no pixels"));
    }
    Tensor::new(
        &[n, 1, rows, cols],
        body.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Decodes an IDX label file (`0x00000801`).
pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            (8 + body.len().min(n)) as u64,
            format!("expected {n} labels, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = decode_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = decode_idx_labels(&read_file(labels_path.as_ref())?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(images, labels, classes, "idx")
}

fn blob_center(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    if dim >= classes {
        (0..dim)
            .map(|j| if j == class { 0.75 } else { 0.25 })
            .collect()
    } else {
        vec![0.15 + 0.7 * class as f64 / (classes - 1) as f64; dim]
    }
}

/// Gaussian clusters around fixed, well-separated centers, clipped to `[0, 1]`.
///
/// With `dim ≥ classes` the centers are the scaled simplex vertices
/// `0.25 + 0.5·e_c`; otherwise they sit evenly spaced on the diagonal.
/// Samples are interleaved by class.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n_per_class == 0 {
        return Err(Error::invalid(
            "need classes >= 2, dim >= 1, n_per_class >= 1",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes).map(|c| blob_center(c, classes, dim)).collect();
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for _ in 0..n_per_class {
        for (c, center) in centers.iter().enumerate() {
            for &m in center {
                let v = if spread == 0.0 {
                    m
                } else {
                    m + normal.sample(&mut rng)
                };
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(&[labels.len(), dim], data)?,
        labels,
        classes,
        "synthetic",
    )
}

/// Side of the square glyph images.
pub const GLYPH_SIZE: usize = 12;

// Seven-segment encodings of the digits 0-9: a, b, c, d, e, f, g.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn glyph_template(digit: usize) -> [[f64; GLYPH_SIZE]; GLYPH_SIZE] {
    let mut img = [[0.0; GLYPH_SIZE]; GLYPH_SIZE];
    // Box spans rows 1..=10, cols 3..=8; strokes are two pixels wide.
    let (top, mid, bot, left, right) = (1, 5, 9, 3, 7);
    let hline = |r: usize, img: &mut [[f64; GLYPH_SIZE]; GLYPH_SIZE]| {
        for row in img.iter_mut().skip(r).take(2) {
            for v in row.iter_mut().take(right + 2).skip(left) {
                *v = 1.0;
            }
        }
    };
    let s = SEGMENTS[digit];
    if s[0] {
        hline(top, &mut img);
    }
    if s[6] {
        hline(mid, &mut img);
    }
    if s[3] {
        hline(bot, &mut img);
    }
    let vline = |c: usize, r0: usize, r1: usize, img: &mut [[f64; GLYPH_SIZE]; GLYPH_SIZE]| {
        for row in img.iter_mut().take(r1 + 1).skip(r0) {
            row[c] = 1.0;
            row[c + 1] = 1.0;
        }
    };
    if s[5] {
        vline(left, top, mid + 1, &mut img);
    }
    if s[1] {
        vline(right, top, mid + 1, &mut img);
    }
    if s[4] {
        vline(left, mid, bot + 1, &mut img);
    }
    if s[2] {
        vline(right, mid, bot + 1, &mut img);
    }
    img
}

/// Ten classes of 1×12×12 seven-segment digit glyphs with random ±1 pixel
/// shifts, stroke intensity in `[0.6, 1]` and additive Gaussian noise, clipped
/// to `[0, 1]`. A small MNIST-like task.
pub fn synth_glyphs(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be >= 0, got {noise}")));
    }
    let templates: Vec<_> = (0..10).map(glyph_template).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let n = GLYPH_SIZE;
    let mut data = Vec::with_capacity(10 * n_per_class * n * n);
    let mut labels = Vec::with_capacity(10 * n_per_class);
    for _ in 0..n_per_class {
        for (digit, t) in templates.iter().enumerate() {
            let dy = rng.random_range(-1i64..=1) as isize;
            let dx = rng.random_range(-1i64..=1) as isize;
            let ink: f64 = rng.random_range(0.6..=1.0);
            for r in 0..n {
                for c in 0..n {
                    let (sr, sc) = (r as isize - dy, c as isize - dx);
                    let base = if (0..n as isize).contains(&sr) && (0..n as isize).contains(&sc) {
                        t[sr as usize][sc as usize] * ink
                    } else {
                        0.0
                    };
                    let v = if noise == 0.0 {
                        base
                    } else {
                        base + normal.sample(&mut rng)
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(digit);
        }
    }
    Dataset::new(
        Tensor::new(&[labels.len(), 1, n, n], data)?,
        labels,
        10,
        "synthetic",
    )
}

/// A parsed dataset id.
///
/// * `synth-blobs[:classes=C][:dim=D][:n=N][:spread=S]`
/// * `synth-glyphs[:n=N][:noise=S]`
/// * `idx:<dir>` reading `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
///   `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte` from `<dir>`.
///
/// `n` is the per-class training count; the synthetic test split has half as
/// many samples and a derived seed.
pub fn load_dataset(id: &str, seed: u64) -> Result<(Dataset, Dataset)> {
    let (name, rest) = id.split_once(':').unwrap_or((id, ""));
    if name == "idx" {
        let dir = Path::new(rest);
        let mut train = load_idx(
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        )?;
        let mut test = load_idx(
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        )?;
        let classes = train.classes.max(test.classes);
        train.classes = classes;
        test.classes = classes;
        train.split = "train".into();
        test.split = "test".into();
        return Ok((train, test));
    }
    let mut opts = std::collections::HashMap::new();
    for kv in rest.split(':').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("dataset option '{kv}' is not key=value")))?;
        opts.insert(k, v);
    }
    let num = |k: &str, default: f64| -> Result<f64> {
        opts.get(k).map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for {k}: '{v}'")))
        })
    };
    let allowed: &[&str] = match name {
        "synth-blobs" => &["classes", "dim", "n", "spread"],
        "synth-glyphs" => &["n", "noise"],
        _ => return Err(Error::Config(format!("unknown dataset '{id}'"))),
    };
    if let Some(k) = opts.keys().find(|k| !allowed.contains(k)) {
        return Err(Error::Config(format!("unknown dataset option '{k}'")));
    }
    let test_seed = seed ^ 0x7e57_7e57;
    let (mut train, mut test) = if name == "synth-blobs" {
        let classes = num("classes", 2.0)? as usize;
        let dim = num("dim", 2.0)? as usize;
        let n = num("n", 100.0)? as usize;
        let spread = num("spread", 0.05)?;
        (
            synth_blobs(classes, dim, n, spread, seed)?,
            synth_blobs(classes, dim, n.div_ceil(2), spread, test_seed)?,
        )
    } else {
        let n = num("n", 200.0)? as usize;
        let noise = num("noise", 0.1)?;
        (
            synth_glyphs(n, noise, seed)?,
            synth_glyphs(n.div_ceil(2), noise, test_seed)?,
        )
    };
    train.split = "train".into();
    test.split = "test".into();
    Ok((train, test))
}
