//! Full-reference image quality metrics.
//!
//! PSNR and MAE are computed on RGB values in `[0, 1]`. SSIM and GMSD are
//! computed on luma (`0.299 R + 0.587 G + 0.114 B`). Inputs are `C x H x W`
//! or `1 x C x H x W` tensors with `C` equal to 1 or 3.

use std::fmt::Write as _;

use r2r_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// GMSD stability constant for intensities in `[0, 1]`.
pub const GMSD_C: f64 = 0.0026;

/// Single-channel `f64` plane.
#[derive(Clone, Debug, PartialEq)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

fn chw<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] | [1, c, h, w] if c == 1 || c == 3 => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!(
            "expected a 1- or 3-channel image, got {s:?}"
        ))),
    }
}

fn check_pair<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let dims = chw(x)?;
    if dims != chw(y)? {
        return Err(Error::Shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(dims)
}

fn luma<T: Real>(x: &Tensor<T>) -> Plane {
    let (c, h, w) = chw(x).expect("checked by caller");
    let d = x.data();
    let n = h * w;
    let data = if c == 1 {
        d.iter().map(|v| v.as_f64()).collect()
    } else {
        (0..n)
            .map(|i| {
                0.299 * d[i].as_f64() + 0.587 * d[n + i].as_f64() + 0.114 * d[2 * n + i].as_f64()
            })
            .collect()
    };
    Plane { h, w, data }
}

fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    sum / x.len() as f64
}

/// Peak signal-to-noise ratio in dB for peak 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair(x, y)?;
    let m = mse(x, y);
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

pub fn mae<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(sum / x.len() as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode filtering with a symmetric 1-D kernel.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut rows = vec![0.0; p.h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p.at(y, x + i)).sum();
        }
    }
    let mut data = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            data[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane { h: oh, w: ow, data }
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

/// Mean single-scale SSIM over the valid region of an 11x11 Gaussian window.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (_, h, w) = check_pair(x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let (a, b) = (luma(x), luma(y));
    let k = gaussian_window();
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&product(&a, &a), &k);
    let bb = filter_valid(&product(&b, &b), &k);
    let ab = filter_valid(&product(&a, &b), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.data.len() as f64)
}

/// Prewitt gradient magnitude over the valid region.
fn gradient_magnitude(p: &Plane) -> Plane {
    let (oh, ow) = (p.h.saturating_sub(2), p.w.saturating_sub(2));
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..3 {
                gx += p.at(y + i, x) - p.at(y + i, x + 2);
                gy += p.at(y, x + i) - p.at(y + 2, x + i);
            }
            data.push(((gx / 3.0).powi(2) + (gy / 3.0).powi(2)).sqrt());
        }
    }
    Plane { h: oh, w: ow, data }
}

/// Gradient magnitude similarity deviation: population standard deviation
/// of the per-pixel gradient magnitude similarity.
pub fn gmsd<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (_, h, w) = check_pair(x, y)?;
    if h < 3 || w < 3 {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            min: 3,
        });
    }
    let ga = gradient_magnitude(&luma(x));
    let gb = gradient_magnitude(&luma(y));
    let gms: Vec<f64> = ga
        .data
        .iter()
        .zip(&gb.data)
        .map(|(a, b)| (2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C))
        .collect();
    let n = gms.len() as f64;
    let mean = gms.iter().sum::<f64>() / n;
    Ok((gms.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub gmsd: f64,
}

impl MetricRow {
    pub fn evaluate<T: Real>(
        id: impl Into<String>,
        prediction: &Tensor<T>,
        reference: &Tensor<T>,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr: psnr(prediction, reference)?,
            ssim: ssim(prediction, reference)?,
            mae: mae(prediction, reference)?,
            gmsd: gmsd(prediction, reference)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    /// Column means; `id` is `"mean"`.
    pub means: MetricRow,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<MetricRow>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = per_image.len() as f64;
        let col = |f: fn(&MetricRow) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let means = MetricRow {
            id: "mean".into(),
            psnr: col(|r| r.psnr),
            ssim: col(|r| r.ssim),
            mae: col(|r| r.mae),
            gmsd: col(|r| r.gmsd),
        };
        Ok(Self { per_image, means })
    }

    /// Header row, one row per image, then the `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,mae,gmsd\n");
        for row in self.per_image.iter().chain(std::iter::once(&self.means)) {
            let _ = writeln!(out, "{}", format_row(row));
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn format_row(row: &MetricRow) -> String {
    format!(
        "{},{},{},{},{}",
        row.id,
        format_value(row.psnr),
        format_value(row.ssim),
        format_value(row.mae),
        format_value(row.gmsd)
    )
}
