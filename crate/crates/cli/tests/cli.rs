use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use r2r_core::data_io::{load_image, save_image, synthetic_pairs};
use r2r_tensor::Tensor;
use serde_json::Value;

fn r2r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2r"))
        .args(args)
        .env("R2R_NUM_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Directory listing as (name, bytes) pairs.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    runs: PathBuf,
}

const TINY: [&str; 10] = [
    "--epochs",
    "1",
    "--lr-decay-epoch",
    "1",
    "--batch-size",
    "2",
    "--patch-size",
    "16",
    "--seed",
    "3",
];

/// Three trained stages on a three-pair fixture, shared by all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        synthetic_pairs(3, 24, 5).unwrap().write_to(&data).unwrap();
        let runs = dir.path().join("runs");
        let decom = runs.join("decom.ckpt");
        let denoise = runs.join("denoise.ckpt");
        for (stage, extra) in [
            ("decom", vec![]),
            ("denoise", vec!["--ckpt-decom", s(&decom)]),
            (
                "relight",
                vec!["--ckpt-decom", s(&decom), "--ckpt-denoise", s(&denoise)],
            ),
        ] {
            let mut args = vec![
                "train",
                "--stage",
                stage,
                "--data",
                s(&data),
                "--out-dir",
                s(&runs),
            ];
            args.extend(TINY);
            args.extend(extra);
            let out = r2r(&args);
            assert_eq!(
                code(&out),
                0,
                "{stage}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        Fixture {
            _dir: dir,
            data,
            runs,
        }
    })
}

fn ckpt_args(f: &Fixture) -> Vec<String> {
    ["decom", "denoise", "relight"]
        .iter()
        .flat_map(|st| {
            [
                format!("--ckpt-{st}"),
                f.runs.join(format!("{st}.ckpt")).display().to_string(),
            ]
        })
        .collect()
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let f = fixture();
    for stage in ["decom", "denoise", "relight"] {
        assert!(f.runs.join(format!("{stage}.ckpt")).is_file());
        let log = fs::read_to_string(f.runs.join(format!("{stage}.log"))).unwrap();
        let first = log.lines().next().unwrap();
        assert!(
            first.starts_with("epoch=0 step=0 loss=") && first.contains(" lr=0.001"),
            "{first}"
        );
        let manifest: Value = serde_json::from_str(
            &fs::read_to_string(f.runs.join(format!("{stage}.manifest.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(
            manifest["dataset_manifest_hash"].as_str().unwrap().len(),
            64
        );
        assert_eq!(manifest["config"]["seed"], "3");
        assert!(
            manifest["finished_at"].as_f64().unwrap() >= manifest["started_at"].as_f64().unwrap()
        );
    }
}

#[test]
fn same_seed_reproduces_checkpoint_and_manifest() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let before = snapshot(&f.data);
    let mut args = vec![
        "train",
        "--stage",
        "decom",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
    ];
    args.extend(TINY);
    assert_eq!(code(&r2r(&args)), 0);
    assert_eq!(snapshot(&f.data), before);
    let again = fs::read(dir.path().join("decom.ckpt")).unwrap();
    assert_eq!(again, fs::read(f.runs.join("decom.ckpt")).unwrap());

    let strip = |p: &Path| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        for k in ["started_at", "finished_at", "checkpoints", "artifacts"] {
            v.as_object_mut().unwrap().remove(k);
        }
        v
    };
    assert_eq!(
        strip(&dir.path().join("decom.manifest.json")),
        strip(&f.runs.join("decom.manifest.json"))
    );
}

#[test]
fn missing_upstream_exits_three() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let decom = f.runs.join("decom.ckpt");
    let out = r2r(&[
        "train",
        "--stage",
        "relight",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
        "--ckpt-decom",
        s(&decom),
    ]);
    assert_eq!(code(&out), 3);
    let gone = dir.path().join("nope.ckpt");
    let out = r2r(&[
        "train",
        "--stage",
        "denoise",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
        "--ckpt-decom",
        s(&gone),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn argument_errors_exit_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&r2r(&[
            "train",
            "--stage",
            "sideways",
            "--data",
            s(&f.data)
        ])),
        2
    );
    let out = r2r(&[
        "train",
        "--stage",
        "decom",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
        "--set",
        "lambda9=1",
    ]);
    assert_eq!(code(&out), 2);
    let out = r2r(&[
        "train",
        "--stage",
        "decom",
        "--data",
        s(&dir.path().join("nowhere")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    let out = r2r(&[
        "train",
        "--stage",
        "decom",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
        "--patch-size",
        "64",
    ]);
    assert_eq!(code(&out), 2);
    let out = r2r(&[
        "train",
        "--stage",
        "decom",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
        "--epochs",
        "4",
    ]);
    assert_eq!(code(&out), 2, "decay epoch 10 lies beyond 4 epochs");
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    fs::write(
        &cfg,
        "epochs=3\nlr_decay_epoch=1\nbatch_size=2\npatch_size=16\nseed=3\nlambda3=0.5\n",
    )
    .unwrap();
    let out = r2r(&[
        "train",
        "--stage",
        "decom",
        "--data",
        s(&f.data),
        "--out-dir",
        s(dir.path()),
        "--config",
        s(&cfg),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("decom.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["config"]["epochs"], "1");
    assert_eq!(m["config"]["lambda3"], "0.5");
}

#[test]
fn enhance_handles_odd_sizes_and_dumps_intermediates() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("odd.png");
    let img: Tensor<f32> = Tensor::from_fn(&[3, 13, 21], |i| ((i * 7) % 17) as f32 / 20.0);
    save_image(&img, &input).unwrap();
    let out_dir = dir.path().join("out");
    let mut args = vec![
        "enhance".to_string(),
        "--input".into(),
        s(&input).into(),
        "--output".into(),
        s(&out_dir).into(),
    ];
    args.extend(ckpt_args(f));
    args.push("--dump-intermediates".into());
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = r2r(&argv);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for suffix in ["enhanced", "R", "I", "Rhat", "Ihat"] {
        let got = load_image(&out_dir.join(format!("odd_{suffix}.png"))).unwrap();
        assert_eq!(got.shape(), &[3, 13, 21], "{suffix}");
    }
    let m: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 5);
}

#[test]
fn enhance_reports_bad_files_but_finishes_the_rest() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    fs::create_dir_all(&inputs).unwrap();
    fs::copy(f.data.join("low/toy00.png"), inputs.join("good.png")).unwrap();
    fs::write(inputs.join("broken.png"), b"garbage").unwrap();
    let out_dir = dir.path().join("out");
    let mut args = vec![
        "enhance".to_string(),
        "--input".into(),
        s(&inputs).into(),
        "--output".into(),
        s(&out_dir).into(),
    ];
    args.extend(ckpt_args(f));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = r2r(&argv);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
    assert!(out_dir.join("good_enhanced.png").is_file());
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn eval_pred_gt_matching() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gt = f.data.join("high");
    let csv = dir.path().join("m.csv");

    let out = r2r(&[
        "eval",
        "--pred",
        s(&gt),
        "--gt",
        s(&gt),
        "--output",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.starts_with("mean,inf,1.000000,0.000000,0.000000"),
        "{stdout}"
    );
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for id in ["toy00", "toy01"] {
        fs::copy(
            gt.join(format!("{id}.png")),
            pred.join(format!("{id}_enhanced.png")),
        )
        .unwrap();
        fs::copy(
            gt.join(format!("{id}.png")),
            pred.join(format!("{id}_R.png")),
        )
        .unwrap();
    }
    let out = r2r(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--output",
        s(&csv),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("toy02.png"));
    fs::copy(gt.join("toy02.png"), pred.join("toy02_enhanced.png")).unwrap();
    assert_eq!(
        code(&r2r(&[
            "eval",
            "--pred",
            s(&pred),
            "--gt",
            s(&gt),
            "--output",
            s(&csv)
        ])),
        0
    );
}

#[test]
fn eval_on_dataset_with_checkpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sub/metrics.csv");
    let mut args = vec![
        "eval".to_string(),
        "--data".into(),
        s(&f.data).into(),
        "--output".into(),
        s(&csv).into(),
    ];
    args.extend(ckpt_args(f));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = r2r(&argv);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "id,psnr,ssim,mae,gmsd");
    assert!(lines[1].starts_with("toy00,") && lines[4].starts_with("mean,"));
}

#[test]
fn grid_tiles_in_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    for (i, name) in ["x", "y", "z"].iter().enumerate() {
        let v = 0.1 * (i + 1) as f32;
        save_image(
            &Tensor::full(&[3, 20, 30], v),
            &a.join(format!("{name}.png")),
        )
        .unwrap();
        save_image(
            &Tensor::full(&[3, 20, 30], 1.0 - v),
            &b.join(format!("{name}.png")),
        )
        .unwrap();
    }
    let out_dir = dir.path().join("grid");
    let out = r2r(&[
        "grid",
        "--inputs",
        s(&a),
        s(&b),
        "--labels",
        "Input",
        "Ours",
        "--output",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let g = load_image(&out_dir.join("x_grid.png")).unwrap();
    let (h, w) = (g.shape()[1], g.shape()[2]);
    assert_eq!(w, 60);
    assert!(h > 20);
    let at = |y: usize, x: usize| g.data()[y * w + x];
    assert!((at(h - 1, 5) - 0.1).abs() < 0.01);
    assert!((at(h - 1, 35) - 0.9).abs() < 0.01);
    assert!(
        (0..h - 20).any(|y| (0..30).any(|x| at(y, x) == 1.0)),
        "label drawn"
    );
    assert_eq!(walk(&out_dir).len(), 3);

    fs::remove_file(b.join("z.png")).unwrap();
    assert_eq!(
        code(&r2r(&[
            "grid",
            "--inputs",
            s(&a),
            s(&b),
            "--output",
            s(&out_dir)
        ])),
        2
    );
    save_image(&Tensor::full(&[3, 10, 30], 0.5), &b.join("z.png")).unwrap();
    assert_eq!(
        code(&r2r(&[
            "grid",
            "--inputs",
            s(&a),
            s(&b),
            "--output",
            s(&out_dir)
        ])),
        2
    );
}
