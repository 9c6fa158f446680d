//! Images and paired low/normal-light datasets.
//!
//! An [`Image`] is a `3 x H x W` `f32` tensor with values in `[0, 1]`. A
//! dataset root holds `low/` and `high/` folders whose PNG or JPEG files are
//! paired by identical filename.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageError, RgbImage};
use r2r_tensor::ops::crop_tensor;
use r2r_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Image = Tensor<f32>;

/// Values this far outside `[0, 1]` are clamped on save; larger excursions
/// are rejected.
pub const RANGE_TOLERANCE: f32 = 1e-6;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Environment variable capping loader threads.
pub const WORKERS_ENV: &str = "R2R_NUM_WORKERS";

/// Worker count for concurrent loading: `R2R_NUM_WORKERS` if set to a
/// positive integer, else the available parallelism.
pub fn num_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn load_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    if !has_image_extension(path) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let decoded = image::open(path).map_err(|e| match e {
        ImageError::Unsupported(_) => Error::UnsupportedFormat(path.to_path_buf()),
        ImageError::IoError(io) => Error::Io(io),
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    Ok(from_rgb8(&decoded.to_rgb8()))
}

pub fn from_rgb8(img: &RgbImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized above")
}

/// Converts a `3 x H x W` or `1 x 3 x H x W` image to bytes, rounding
/// `v * 255`.
pub fn to_rgb8(image: &Image) -> Result<RgbImage> {
    let (h, w) = match *image.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        ref s => {
            return Err(Error::Shape(format!(
                "expected a 3 x H x W image, got {s:?}"
            )))
        }
    };
    let n = h * w;
    let d = image.data();
    if let Some(&bad) = d
        .iter()
        .find(|&&v| !(v >= -RANGE_TOLERANCE && v <= 1.0 + RANGE_TOLERANCE))
    {
        return Err(Error::RangeError(bad as f64));
    }
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([byte(d[i]), byte(d[n + i]), byte(d[2 * n + i])])
    }))
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let rgb = to_rgb8(image)?;
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            ImageError::IoError(io) => Error::Io(io),
            other => Error::Io(std::io::Error::other(other.to_string())),
        })
}

/// Replicates a `1 x H x W` (or `1 x 1 x H x W`) map to three channels for
/// viewing.
pub fn gray_to_rgb(map: &Tensor<f32>) -> Result<Image> {
    let (h, w) = match *map.shape() {
        [1, h, w] | [1, 1, h, w] => (h, w),
        ref s => {
            return Err(Error::Shape(format!(
                "expected a single-channel map, got {s:?}"
            )))
        }
    };
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(map.data());
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub low: Image,
    pub normal: Image,
}

impl ImagePair {
    pub fn height(&self) -> usize {
        self.low.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.low.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
    pub root: PathBuf,
    pub manifest_hash: String,
}

impl PairedDataset {
    /// Validates pairs, sorts them by id and hashes `(id, size)` records.
    pub fn from_pairs(
        mut pairs: Vec<ImagePair>,
        root: PathBuf,
        sizes: &BTreeMap<String, u64>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.id.clone()) {
                return Err(Error::UnmatchedPair(format!("duplicate id {}", p.id)));
            }
            match p.low.shape() {
                [3, _, _] if p.low.shape() == p.normal.shape() => {}
                _ => {
                    return Err(Error::ShapeMismatch {
                        id: p.id.clone(),
                        low: spatial(&p.low),
                        normal: spatial(&p.normal),
                    })
                }
            }
        }
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut hasher = Sha256::new();
        for p in &pairs {
            let size = sizes.get(&p.id).copied().unwrap_or(0);
            hasher.update(format!("{}\t{}\n", p.id, size).as_bytes());
        }
        let manifest_hash = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(Self {
            pairs,
            root,
            manifest_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    /// Writes `low/<id>.png` and `high/<id>.png` under `root`.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for (dir, pick) in [("low", true), ("high", false)] {
            let d = root.join(dir);
            fs::create_dir_all(&d)?;
            for p in &self.pairs {
                save_image(
                    if pick { &p.low } else { &p.normal },
                    &d.join(format!("{}.png", p.id)),
                )?;
            }
        }
        Ok(())
    }
}

fn spatial(image: &Image) -> (usize, usize) {
    let s = image.shape();
    (
        s.get(1).copied().unwrap_or(0),
        s.get(2).copied().unwrap_or(0),
    )
}

/// Image files of a directory keyed by filename.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && has_image_extension(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads a `low/` + `high/` dataset, pairing files by exact filename.
pub fn load_pair_dataset(root: &Path) -> Result<PairedDataset> {
    let low = list_images(&root.join("low"))?;
    let high = list_images(&root.join("high"))?;
    if let Some(name) = low.keys().find(|k| !high.contains_key(*k)) {
        return Err(Error::UnmatchedPair(name.clone()));
    }
    if let Some(name) = high.keys().find(|k| !low.contains_key(*k)) {
        return Err(Error::UnmatchedPair(name.clone()));
    }
    let jobs: Vec<(String, PathBuf, PathBuf)> = low
        .iter()
        .map(|(name, lp)| {
            let id = Path::new(name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(name)
                .to_string();
            (id, lp.clone(), high[name].clone())
        })
        .collect();
    let mut sizes = BTreeMap::new();
    for (id, lp, hp) in &jobs {
        sizes.insert(
            id.clone(),
            fs::metadata(lp)?.len() + fs::metadata(hp)?.len(),
        );
    }
    let pairs = load_concurrently(&jobs, num_workers())?;
    PairedDataset::from_pairs(pairs, root.to_path_buf(), &sizes)
}

fn load_concurrently(
    jobs: &[(String, PathBuf, PathBuf)],
    workers: usize,
) -> Result<Vec<ImagePair>> {
    let load = |(id, lp, hp): &(String, PathBuf, PathBuf)| -> Result<ImagePair> {
        Ok(ImagePair {
            id: id.clone(),
            low: load_image(lp)?,
            normal: load_image(hp)?,
        })
    };
    let chunk = jobs.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(load).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `B x 3 x p x p`.
    pub low: Tensor<f32>,
    pub normal: Tensor<f32>,
    /// `(pair id, y, x)` of each crop's top-left corner.
    pub coords: Vec<(String, usize, usize)>,
}

/// Uniform crop origin for a `patch x patch` window.
pub fn random_origin(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    patch: usize,
) -> (usize, usize) {
    (
        rng.random_range(0..=height - patch),
        rng.random_range(0..=width - patch),
    )
}

pub fn check_patch_fits(dataset: &PairedDataset, patch: usize) -> Result<()> {
    for p in &dataset.pairs {
        if p.height() < patch || p.width() < patch || patch == 0 {
            return Err(Error::PatchTooLarge {
                patch,
                id: p.id.clone(),
                height: p.height(),
                width: p.width(),
            });
        }
    }
    Ok(())
}

/// Stacks `1 x C x p x p` crops of `C x H x W` (or `1 x C x H x W`) maps
/// into one batch.
pub fn crop_stack(
    maps: &[&Tensor<f32>],
    origins: &[(usize, usize)],
    patch: usize,
) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut channels = 0;
    for (map, &(y, x)) in maps.iter().zip(origins) {
        let m = match *map.shape() {
            [c, h, w] => (*map).clone().reshape(&[1, c, h, w])?,
            _ => (*map).clone(),
        };
        channels = m.shape()[1];
        data.extend_from_slice(crop_tensor(&m, y, x, patch, patch).data());
    }
    Ok(Tensor::from_vec(
        &[maps.len(), channels, patch, patch],
        data,
    )?)
}

/// Crops aligned patches from the given pairs, one random origin each.
pub fn crop_pairs(
    dataset: &PairedDataset,
    indices: &[usize],
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    check_patch_fits(dataset, patch)?;
    let origins: Vec<_> = indices
        .iter()
        .map(|&i| {
            random_origin(
                rng,
                dataset.pairs[i].height(),
                dataset.pairs[i].width(),
                patch,
            )
        })
        .collect();
    let low: Vec<_> = indices.iter().map(|&i| &dataset.pairs[i].low).collect();
    let normal: Vec<_> = indices.iter().map(|&i| &dataset.pairs[i].normal).collect();
    Ok(PatchBatch {
        low: crop_stack(&low, &origins, patch)?,
        normal: crop_stack(&normal, &origins, patch)?,
        coords: indices
            .iter()
            .zip(&origins)
            .map(|(&i, &(y, x))| (dataset.pairs[i].id.clone(), y, x))
            .collect(),
    })
}

/// Uniformly random pairs and crop origins; deterministic given `rng`.
pub fn sample_aligned_patches(
    dataset: &PairedDataset,
    batch_size: usize,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    check_patch_fits(dataset, patch_size)?;
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..dataset.len()))
        .collect();
    crop_pairs(dataset, &indices, patch_size, rng)
}

/// Separable Gaussian blur with reflected borders.
fn blur(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / s).collect();
    let idx = r2r_tensor::ops::reflect_index;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * w + idx(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[idx(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Smooth random RGB image: a coarse random grid, bilinearly upsampled and
/// blurred, stretched to `[0.05, 0.95]` per channel.
pub fn smooth_random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let grid = 5;
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let coarse: Vec<f32> = (0..grid * grid).map(|_| rng.random::<f32>()).collect();
        let mut plane = vec![0.0f32; size * size];
        let scale = (grid - 1) as f32 / (size - 1).max(1) as f32;
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f32 * scale, x as f32 * scale);
                let (y0, x0) = ((fy as usize).min(grid - 2), (fx as usize).min(grid - 2));
                let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                let g = |yy: usize, xx: usize| coarse[yy * grid + xx];
                plane[y * size + x] = (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x0 + 1))
                    + ty * ((1.0 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
            }
        }
        let plane = blur(&plane, size, size, 1.5);
        let (lo, hi) = plane
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = (hi - lo).max(1e-6);
        data.extend(plane.iter().map(|v| 0.05 + 0.9 * (v - lo) / span));
    }
    Tensor::from_vec(&[3, size, size], data).expect("sized above")
}

pub const TOY_GAMMA: f32 = 2.2;
pub const TOY_NOISE_SIGMA: f32 = 0.03;

/// Darkens with `v^2.2`, adds Gaussian noise and clamps to `[0, 1]`.
pub fn degrade(normal: &Image, rng: &mut ChaCha8Rng) -> Image {
    let noise = Normal::new(0.0f32, TOY_NOISE_SIGMA).expect("valid sigma");
    let data = normal
        .data()
        .iter()
        .map(|v| (v.powf(TOY_GAMMA) + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(normal.shape(), data).expect("same shape")
}

/// `count` synthetic `size x size` pairs with ids `toy00`, `toy01`, ...
pub fn synthetic_pairs(count: usize, size: usize, seed: u64) -> Result<PairedDataset> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    let mut sizes = BTreeMap::new();
    for k in 0..count {
        let normal = smooth_random_image(size, &mut rng);
        let low = degrade(&normal, &mut rng);
        let id = format!("toy{k:02}");
        sizes.insert(id.clone(), (2 * 3 * size * size) as u64);
        pairs.push(ImagePair { id, low, normal });
    }
    PairedDataset::from_pairs(pairs, PathBuf::from("<synthetic>"), &sizes)
}
