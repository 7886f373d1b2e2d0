//! Real-data ingestion: IDX and CIFAR binary loaders, per-channel
//! standardization, class-indexed batch sampling, and a procedural fixture
//! generator so nothing in the test suite needs a download.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of `[0, 1]` pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn compute(pixels: &[u8], n: usize, c: usize, plane: usize) -> ChannelStats {
        let count = (n * plane).max(1) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let base = (i * c + ch) * plane;
                pixels[base..base + plane].iter().map(|&p| p as f64 / 255.0)
            });
            let m = vals.clone().sum::<f64>() / count;
            let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        ChannelStats { mean, std }
    }

    pub fn identity(channels: usize) -> ChannelStats {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// A labelled image set, standardized per channel.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    split: Split,
    stats: ChannelStats,
}

/// Images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from raw `u8` pixels in NCHW order.
    ///
    /// With `stats = None` the channel statistics are computed from these
    /// pixels and the set is tagged as a training split; otherwise the given
    /// (training) statistics are applied and the set is a test split.
    pub fn from_u8(
        pixels: &[u8],
        dims: [usize; 4],
        labels: Vec<usize>,
        num_classes: Option<usize>,
        stats: Option<&ChannelStats>,
    ) -> Result<Dataset> {
        let [n, c, h, w] = dims;
        let plane = h * w;
        if pixels.len() != n * c * plane {
            return Err(Error::format("dataset", format!("{} pixels for dims {dims:?}", pixels.len())));
        }
        if labels.len() != n {
            return Err(Error::format(
                "dataset",
                format!("count mismatch: {n} images but {} labels", labels.len()),
            ));
        }
        let num_classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::format("dataset", format!("label {bad} >= {num_classes} classes")));
        }
        let (split, stats) = match stats {
            Some(s) => {
                if s.mean.len() != c {
                    return Err(Error::invalid("dataset", format!("stats for {} channels, images have {c}", s.mean.len())));
                }
                (Split::Test, s.clone())
            }
            None => (Split::Train, ChannelStats::compute(pixels, n, c, plane)),
        };
        let mut data = Vec::with_capacity(pixels.len());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                data.extend(pixels[base..base + plane].iter().map(|&p| (p as f64 / 255.0 - m) / s));
            }
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        Ok(Dataset {
            images: Tensor::new(&dims, data)?,
            labels,
            num_classes,
            class_index,
            split,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(channels, height, width)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.class_index.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.select0(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Undoes standardization and quantizes back to `u8` pixels (NCHW).
    pub fn to_u8(&self) -> Vec<u8> {
        denormalize_u8(&self.images, &self.stats)
    }
}

/// Maps standardized NCHW values back to `[0, 255]`, clamping out-of-range pixels.
pub fn denormalize_u8(images: &Tensor, stats: &ChannelStats) -> Vec<u8> {
    let d = images.dims();
    let (c, plane) = (d[1], d[2] * d[3]);
    images
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = (k / plane) % c;
            let raw = (v * stats.std[ch] + stats.mean[ch]) * 255.0;
            raw.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("idx images", format!("bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let payload = &bytes[16..];
    if payload.len() < n * rows * cols {
        return Err(Error::format(
            "idx images",
            format!("truncated: need {} pixel bytes, found {}", n * rows * cols, payload.len()),
        ));
    }
    Ok((n, rows, cols, &payload[..n * rows * cols]))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("idx labels", format!("bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format("idx labels", format!("truncated: need {n} labels, found {}", payload.len())));
    }
    Ok(&payload[..n])
}

/// Loads an IDX image/label file pair (single-channel images).
pub fn load_idx(images: &Path, labels: &Path, stats: Option<&ChannelStats>) -> Result<Dataset> {
    load_idx_with_classes(images, labels, None, stats)
}

pub fn load_idx_with_classes(
    images: &Path,
    labels: &Path,
    num_classes: Option<usize>,
    stats: Option<&ChannelStats>,
) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let lbl_bytes = read(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbls = parse_idx_labels(&lbl_bytes)?;
    if lbls.len() != n {
        return Err(Error::format(
            "idx",
            format!("count mismatch: {n} images but {} labels", lbls.len()),
        ));
    }
    let labels = lbls.iter().map(|&l| l as usize).collect();
    Dataset::from_u8(pixels, [n, 1, rows, cols], labels, num_classes, stats)
}

/// Writes single-channel images and labels as an IDX pair.
pub fn write_idx(images_path: &Path, labels_path: &Path, pixels: &[u8], dims: [usize; 3], labels: &[u8]) -> Result<()> {
    let [n, rows, cols] = dims;
    if pixels.len() != n * rows * cols || labels.len() != n {
        return Err(Error::invalid("write_idx", format!("{} pixels / {} labels for dims {dims:?}", pixels.len(), labels.len())));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lbl).map_err(|e| Error::io(labels_path, e))
}

/// Exports a single-channel dataset back to an IDX pair.
pub fn export_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = ds.image_dims();
    if c != 1 {
        return Err(Error::invalid("export_idx", format!("IDX holds one channel, dataset has {c}")));
    }
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    write_idx(images_path, labels_path, &ds.to_u8(), [ds.len(), h, w], &labels)
}

/// Loads CIFAR binary batch files (3073-byte records: label then planar RGB).
pub fn load_cifar_bin(files: &[PathBuf], num_classes: usize, stats: Option<&ChannelStats>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                "cifar",
                format!("{}: length {} is not a multiple of {CIFAR_RECORD}", path.display(), bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len();
    Dataset::from_u8(&pixels, [n, 3, CIFAR_SIDE, CIFAR_SIDE], labels, Some(num_classes), stats)
}

/// The conventional CIFAR-10 file names in `dir`: `data_batch_*.bin` or `test_batch.bin`.
pub fn cifar_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match split {
                Split::Train => name.starts_with("data_batch_") && name.ends_with(".bin"),
                Split::Test => name == "test_batch.bin",
            }
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingInput {
            key: "cifar batches".into(),
            path: dir.to_path_buf(),
        });
    }
    Ok(files)
}

/// Writes a 3-channel 32x32 dataset as one CIFAR binary batch file.
pub fn export_cifar_bin(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.image_dims() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::invalid("export_cifar_bin", format!("dims {:?} are not 3x32x32", ds.image_dims())));
    }
    let pixels = ds.to_u8();
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(l as u8);
        out.extend_from_slice(&pixels[i * (CIFAR_RECORD - 1)..(i + 1) * (CIFAR_RECORD - 1)]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Draws `size` images of class `class`: without replacement when the class
/// is large enough, with replacement otherwise.
pub fn sample_class_batch<R: Rng + ?Sized>(ds: &Dataset, class: usize, size: usize, rng: &mut R) -> Result<Batch> {
    let pool = ds.class_indices(class);
    if pool.is_empty() {
        return Err(Error::invalid("sample_class_batch", format!("class {class} has no examples")));
    }
    let picks: Vec<usize> = if size <= pool.len() {
        index::sample(rng, pool.len(), size).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    ds.select(&picks)
}

/// Uniform mini-batch over the whole dataset, ignoring class balance.
pub fn sample_batch<R: Rng + ?Sized>(ds: &Dataset, size: usize, rng: &mut R) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::invalid("sample_batch", "dataset is empty"));
    }
    let size = size.min(ds.len());
    let picks: Vec<usize> = index::sample(rng, ds.len(), size).into_iter().collect();
    ds.select(&picks)
}

/// Procedurally generated datasets for tests and desk-scale experiments.
pub mod fixtures {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::{ChannelStats, Dataset};
    use crate::error::Result;

    /// Endpoints of the seven display segments in unit coordinates.
    const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
        ((0.3, 0.2), (0.7, 0.2)), // top
        ((0.7, 0.2), (0.7, 0.5)), // upper right
        ((0.7, 0.5), (0.7, 0.8)), // lower right
        ((0.3, 0.8), (0.7, 0.8)), // bottom
        ((0.3, 0.5), (0.3, 0.8)), // lower left
        ((0.3, 0.2), (0.3, 0.5)), // upper left
        ((0.3, 0.5), (0.7, 0.5)), // middle
    ];

    /// Segment masks for digits 0-9, bit i = segment i.
    const DIGITS: [u8; 10] = [
        0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111, 0b1111111,
        0b1101111,
    ];

    /// Knobs for the seven-segment digit generator.
    #[derive(Clone, Debug)]
    pub struct GlyphSpec {
        pub side: usize,
        pub classes: usize,
        /// Per-endpoint jitter, in unit coordinates.
        pub jitter: f64,
        /// Max rotation in radians.
        pub rotate: f64,
        /// Max translation, in unit coordinates.
        pub shift: f64,
        /// Stroke half-width range, in unit coordinates.
        pub thickness: (f64, f64),
        /// Std-dev of additive pixel noise on the `[0, 1]` scale.
        pub noise: f64,
        /// Probability of one extra random stroke.
        pub clutter: f64,
    }

    impl GlyphSpec {
        pub fn digits(side: usize) -> GlyphSpec {
            GlyphSpec {
                side,
                classes: 10,
                jitter: 0.07,
                rotate: 0.25,
                shift: 0.12,
                thickness: (0.04, 0.09),
                noise: 0.15,
                clutter: 0.5,
            }
        }
    }

    fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
        let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
        ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
    }

    /// One noisy seven-segment rendering of `class` (classes beyond 10 reuse
    /// digit shapes with a mirrored layout).
    pub fn render_glyph<R: Rng + ?Sized>(spec: &GlyphSpec, class: usize, rng: &mut R) -> Vec<u8> {
        let mask = DIGITS[class % 10];
        let mirror = (class / 10) % 2 == 1;
        let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("positive std");
        let mut jit = |v: f64| v + rng.random_range(-spec.jitter..=spec.jitter);
        let mut strokes: Vec<((f64, f64), (f64, f64))> = SEGMENTS
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &(a, b))| ((jit(a.0), jit(a.1)), (jit(b.0), jit(b.1))))
            .collect();
        if mirror {
            for s in &mut strokes {
                s.0 .0 = 1.0 - s.0 .0;
                s.1 .0 = 1.0 - s.1 .0;
            }
        }
        if rng.random::<f64>() < spec.clutter {
            let a = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let b = (
                (a.0 + rng.random_range(-0.2..0.2f64)).clamp(0.05, 0.95),
                (a.1 + rng.random_range(-0.2..0.2f64)).clamp(0.05, 0.95),
            );
            strokes.push((a, b));
        }
        let angle = rng.random_range(-spec.rotate..=spec.rotate);
        let scale = rng.random_range(0.85..1.1);
        let (tx, ty) = (rng.random_range(-spec.shift..=spec.shift), rng.random_range(-spec.shift..=spec.shift));
        let thick = rng.random_range(spec.thickness.0..=spec.thickness.1);
        let (sin, cos) = angle.sin_cos();
        let side = spec.side as f64;
        let soft = 0.6 / side;
        let mut out = Vec::with_capacity(spec.side * spec.side);
        for y in 0..spec.side {
            for x in 0..spec.side {
                // Map the pixel back into glyph coordinates.
                let (px, py) = ((x as f64 + 0.5) / side - 0.5 - tx, (y as f64 + 0.5) / side - 0.5 - ty);
                let (gx, gy) = ((cos * px + sin * py) / scale + 0.5, (-sin * px + cos * py) / scale + 0.5);
                let d = strokes
                    .iter()
                    .map(|&(a, b)| seg_dist((gx, gy), a, b))
                    .fold(f64::INFINITY, f64::min);
                let ink = (1.0 - (d - thick) / soft).clamp(0.0, 1.0);
                let v = ink + noise.sample(rng);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    /// Raw `u8` digit images with `per_class` examples per class, classes interleaved.
    pub fn glyph_pixels(spec: &GlyphSpec, per_class: usize, seed: u64) -> (Vec<u8>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(per_class * spec.classes * spec.side * spec.side);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for c in 0..spec.classes {
                pixels.extend(render_glyph(spec, c, &mut rng));
                labels.push(c);
            }
        }
        (pixels, labels)
    }

    /// Train and test splits of seven-segment digits (test uses train statistics).
    pub fn glyph_digits(spec: &GlyphSpec, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let side = spec.side;
        let (px, lb) = glyph_pixels(spec, train_per_class, seed);
        let train = Dataset::from_u8(&px, [lb.len(), 1, side, side], lb, Some(spec.classes), None)?;
        let (px, lb) = glyph_pixels(spec, test_per_class, seed ^ 0x5eed_7e57);
        let test = Dataset::from_u8(&px, [lb.len(), 1, side, side], lb, Some(spec.classes), Some(train.stats()))?;
        Ok((train, test))
    }

    /// Two linearly separable classes: class 0 bright on the left half,
    /// class 1 bright on the right half, plus mild noise.
    pub fn two_halves(side: usize, per_class: usize, seed: u64, stats: Option<&ChannelStats>) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per_class {
            for c in 0..2 {
                for _y in 0..side {
                    for x in 0..side {
                        let left = x < side / 2;
                        let base: f64 = if left == (c == 0) { 0.75 } else { 0.25 };
                        let v = base + rng.random_range(-0.2..0.2);
                        pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
                labels.push(c);
            }
        }
        Dataset::from_u8(&pixels, [labels.len(), 1, side, side], labels, Some(2), stats)
    }
}
