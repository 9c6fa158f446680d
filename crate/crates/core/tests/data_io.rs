use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;
use r2r_core::data_io::{
    crop_pairs, load_image, load_pair_dataset, sample_aligned_patches, save_image, synthetic_pairs,
    Image,
};
use r2r_core::Error;
use r2r_tensor::ops::crop_tensor;
use r2r_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_rgb(path: &Path, w: u32, h: u32, px: [u8; 3]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(w, h, Rgb(px)).save(path).unwrap();
}

#[test]
fn bytes_map_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("px.png");
    write_rgb(&p, 1, 1, [51, 102, 204]);
    let img = load_image(&p).unwrap();
    assert_eq!(img.shape(), &[3, 1, 1]);
    assert_eq!(img.data(), &[0.2, 0.4, 0.8]);
}

#[test]
fn grayscale_is_replicated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.png");
    GrayImage::from_pixel(3, 2, Luma([255])).save(&p).unwrap();
    let img = load_image(&p).unwrap();
    assert_eq!(img.shape(), &[3, 2, 3]);
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn load_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_image(&dir.path().join("none.png")),
        Err(Error::FileNotFound(_))
    ));
    let txt = dir.path().join("notes.txt");
    fs::write(&txt, "hello").unwrap();
    assert!(matches!(load_image(&txt), Err(Error::UnsupportedFormat(_))));
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    assert!(matches!(load_image(&bad), Err(Error::CorruptImage { .. })));
}

#[test]
fn out_of_range_images_are_not_saved() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_vec(&[3, 1, 1], vec![0.5, 1.5, 0.0]).unwrap();
    assert!(matches!(
        save_image(&img, &dir.path().join("x.png")),
        Err(Error::RangeError(_))
    ));
}

#[test]
fn dataset_layout_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(matches!(
        load_pair_dataset(root),
        Err(Error::MissingDirectory(_))
    ));

    write_rgb(&root.join("low/a.png"), 4, 4, [10, 10, 10]);
    write_rgb(&root.join("high/a.png"), 8, 8, [200, 200, 200]);
    assert!(matches!(
        load_pair_dataset(root),
        Err(Error::ShapeMismatch { .. })
    ));

    write_rgb(&root.join("high/a.png"), 4, 4, [200, 200, 200]);
    write_rgb(&root.join("low/b.png"), 4, 4, [10, 10, 10]);
    match load_pair_dataset(root) {
        Err(Error::UnmatchedPair(name)) => assert!(name.contains("b.png")),
        other => panic!("expected UnmatchedPair, got {other:?}"),
    }
    write_rgb(&root.join("high/b.png"), 4, 4, [200, 200, 200]);
    let ds = load_pair_dataset(root).unwrap();
    assert_eq!(ds.ids(), vec!["a", "b"]);
    assert_eq!(ds.manifest_hash.len(), 64);
    assert_eq!(
        load_pair_dataset(root).unwrap().manifest_hash,
        ds.manifest_hash
    );

    fs::write(root.join("low/readme.txt"), "ignored").unwrap();
    assert_eq!(load_pair_dataset(root).unwrap().ids(), vec!["a", "b"]);
}

#[test]
fn written_dataset_reloads_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic_pairs(3, 16, 1).unwrap();
    ds.write_to(dir.path()).unwrap();
    let back = load_pair_dataset(dir.path()).unwrap();
    assert_eq!(back.ids(), ds.ids());
    for (a, b) in ds.pairs.iter().zip(&back.pairs) {
        assert!(a.low.max_abs_diff(&b.low) <= 1.0 / 510.0 + 1e-6);
        assert!(a.normal.max_abs_diff(&b.normal) <= 1.0 / 510.0 + 1e-6);
    }
}

#[test]
fn toy_pairs_follow_the_degradation() {
    let ds = synthetic_pairs(2, 32, 3).unwrap();
    for p in &ds.pairs {
        assert!(p.normal.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.low.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let dark = p.normal.map(|v| v.powf(2.2));
        let residual = p.low.zip_map(&dark, "r", |a, b| a - b).unwrap();
        let n = residual.len() as f32;
        let mean = residual.data().iter().sum::<f32>() / n;
        let std = (residual
            .data()
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f32>()
            / n)
            .sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 0.03).abs() < 0.006, "std {std}");
    }
    assert_eq!(synthetic_pairs(2, 32, 3).unwrap().pairs, ds.pairs);
}

#[test]
fn patches_are_aligned_and_reproducible() {
    let ds = synthetic_pairs(4, 20, 2).unwrap();
    let batch = sample_aligned_patches(&ds, 6, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(batch.low.shape(), &[6, 3, 8, 8]);
    for (k, (id, y, x)) in batch.coords.iter().enumerate() {
        let pair = ds.pairs.iter().find(|p| &p.id == id).unwrap();
        let crop = |img: &Image| {
            let t = img.clone().reshape(&[1, 3, 20, 20]).unwrap();
            crop_tensor(&t, *y, *x, 8, 8)
        };
        let stride = 3 * 64;
        assert_eq!(
            crop(&pair.low).data(),
            &batch.low.data()[k * stride..(k + 1) * stride]
        );
        assert_eq!(
            crop(&pair.normal).data(),
            &batch.normal.data()[k * stride..(k + 1) * stride]
        );
    }
    let again = sample_aligned_patches(&ds, 6, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(again, batch);
    assert!(matches!(
        crop_pairs(&ds, &[0], 21, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::PatchTooLarge { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn png_round_trip_within_half_step(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Image = Tensor::from_fn(&[3, h, w], |_| rng.random::<f32>());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        prop_assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-6);
    }
}
