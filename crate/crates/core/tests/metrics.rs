use proptest::prelude::*;
use r2r_core::metrics::{gmsd, mae, psnr, ssim, MetricReport, MetricRow};
use r2r_core::Error;
use r2r_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[3, h, w], |_| rng.random::<f64>())
}

/// Circular shift of every channel by `(dy, dx)`.
fn roll(x: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.data_mut()[(ch * h + (y + dy) % h) * w + (xx + dx) % w] =
                    x.data()[(ch * h + y) * w + xx];
            }
        }
    }
    out
}

fn crop(x: &Tensor<f64>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f64> {
    let s = x.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    assert!(y0 + h <= sh && x0 + w <= sw);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        x.data()[(ch * sh + y0 + r / w) * sw + x0 + r % w]
    })
}

#[test]
fn psnr_of_constant_offset_is_twenty() {
    let x = Tensor::<f64>::full(&[3, 8, 8], 0.5);
    let y = Tensor::<f64>::full(&[3, 8, 8], 0.6);
    assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
}

#[test]
fn identity_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = image(16, 16, &mut rng);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(mae(&x, &x).unwrap(), 0.0);
    assert_eq!(gmsd(&x, &x).unwrap(), 0.0);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::full(&[3, 16, 16], 0.5);
    let unit: Tensor<f64> = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(-1.0..1.0));
    let scores: Vec<f64> = [0.01, 0.05, 0.2]
        .iter()
        .map(|&a| psnr(&x.zip_map(&unit, "n", |p, n| p + a * n).unwrap(), &x).unwrap())
        .collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}

#[test]
fn small_or_mismatched_inputs_are_rejected() {
    let a = Tensor::<f64>::zeros(&[3, 8, 8]);
    assert!(matches!(ssim(&a, &a), Err(Error::InputTooSmall { .. })));
    let b = Tensor::<f64>::zeros(&[3, 8, 9]);
    assert!(psnr(&a, &b).is_err());
}

#[test]
fn report_has_rows_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<MetricRow> = (0..3)
        .map(|i| {
            let (x, y) = (image(12, 12, &mut rng), image(12, 12, &mut rng));
            MetricRow::evaluate(format!("img{i}"), &x, &y).unwrap()
        })
        .collect();
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / 3.0;
    let report = MetricReport::from_rows(rows).unwrap();
    assert!((report.means.psnr - mean_psnr).abs() < 1e-12);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("id,"));
    assert!(lines[4].starts_with("mean,"));
    assert!(MetricReport::from_rows(Vec::new()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (image(h, w, &mut rng), image(h, w, &mut rng));
        prop_assert_eq!(mae(&x, &y).unwrap(), mae(&y, &x).unwrap());
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!((gmsd(&x, &y).unwrap() - gmsd(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_common_translation(seed in any::<u64>(), dy in 0usize..6, dx in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (image(24, 24, &mut rng), image(24, 24, &mut rng));
        let (xs, ys) = (roll(&x, dy, dx), roll(&y, dy, dx));
        let a = (crop(&x, 0, 0, 16, 16), crop(&y, 0, 0, 16, 16));
        let b = (crop(&xs, dy, dx, 16, 16), crop(&ys, dy, dx, 16, 16));
        prop_assert_eq!(psnr(&a.0, &a.1).unwrap(), psnr(&b.0, &b.1).unwrap());
        prop_assert_eq!(mae(&a.0, &a.1).unwrap(), mae(&b.0, &b.1).unwrap());
        prop_assert_eq!(ssim(&a.0, &a.1).unwrap(), ssim(&b.0, &b.1).unwrap());
        prop_assert_eq!(gmsd(&a.0, &a.1).unwrap(), gmsd(&b.0, &b.1).unwrap());
    }
}
