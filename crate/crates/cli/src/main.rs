//! `r2r`: staged training, enhancement, evaluation and comparison grids.

mod font;
mod grid;
mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use r2r_core::data_io::{self, gray_to_rgb, load_image, load_pair_dataset, save_image};
use r2r_core::metrics::{format_row, MetricReport, MetricRow};
use r2r_core::pipeline::Pipeline;
use r2r_core::trainer::{
    load_checkpoint, save_checkpoint, train_stage, Stage, StageCheckpoint, TrainConfig, Upstream,
};

use manifest::{now, RunManifest};

#[derive(Parser)]
#[command(
    name = "r2r",
    version,
    about = "Low-light image enhancement by Retinex decomposition and relighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage on a paired `low/` + `high/` dataset.
    Train(TrainArgs),
    /// Enhance one image or every image in a directory.
    Enhance(EnhanceArgs),
    /// Score enhanced images against references.
    Eval(EvalArgs),
    /// Tile same-named images from several directories side by side.
    Grid(GridArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Decom,
    Denoise,
    Relight,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Decom => Stage::Decom,
            StageArg::Denoise => Stage::Denoise,
            StageArg::Relight => Stage::Relight,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    data: PathBuf,
    /// Flat `key=value` file of training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt_decom: Option<PathBuf>,
    #[arg(long)]
    ckpt_denoise: Option<PathBuf>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Receives `<stage>.ckpt`, `<stage>.log` and `<stage>.manifest.json`.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    #[arg(long)]
    lr_after_decay: Option<f64>,
    #[arg(long)]
    disable_cem: bool,
    #[arg(long)]
    disable_drm: bool,
    #[arg(long)]
    mse_content: bool,
    #[arg(long)]
    no_perceptual: bool,
    #[arg(long)]
    no_frequency: bool,
    /// Any other setting, e.g. `--set lambda6=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Checkpoints {
    #[arg(long)]
    ckpt_decom: PathBuf,
    #[arg(long)]
    ckpt_denoise: PathBuf,
    #[arg(long)]
    ckpt_relight: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    ckpts: Checkpoints,
    #[arg(long)]
    output: PathBuf,
    /// Also write R, I, denoised R and enhanced I.
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Paired dataset to enhance and score.
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt_decom: Option<PathBuf>,
    #[arg(long)]
    ckpt_denoise: Option<PathBuf>,
    #[arg(long)]
    ckpt_relight: Option<PathBuf>,
    /// Directory of predictions named `<stem>.png` or `<stem>_enhanced.png`.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    #[arg(long, default_value = "metrics.csv")]
    output: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    labels: Vec<String>,
    #[arg(long)]
    output: PathBuf,
}

/// Failure with a fixed exit status.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: 2,
        message: message.into(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<r2r_core::Error>() {
        Some(r2r_core::Error::MissingUpstream { .. }) => 3,
        Some(r2r_core::Error::DivergedLoss { .. }) => 4,
        Some(
            r2r_core::Error::Config(_)
            | r2r_core::Error::UnmatchedPair(_)
            | r2r_core::Error::MissingDirectory(_)
            | r2r_core::Error::PatchTooLarge { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grid(a) => grid::cmd_grid(&a.inputs, &a.labels, &a.output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        c.apply_text(&text)?;
    }
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                c.$field = v;
            }
        )*};
    }
    take!(
        seed,
        epochs,
        batch_size,
        patch_size,
        lr,
        lr_decay_epoch,
        lr_after_decay
    );
    let ab = &mut c.ablation;
    ab.disable_cem |= a.disable_cem;
    ab.disable_drm |= a.disable_drm;
    ab.mse_content |= a.mse_content;
    ab.no_perceptual |= a.no_perceptual;
    ab.no_frequency |= a.no_frequency;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

/// Loads an upstream checkpoint; an absent file counts as a missing
/// upstream stage.
fn load_upstream(
    path: Option<&Path>,
    stage: Stage,
    missing: &'static str,
) -> Result<Option<StageCheckpoint>> {
    let Some(path) = path else { return Ok(None) };
    match load_checkpoint(path) {
        Ok(c) => Ok(Some(c)),
        Err(r2r_core::Error::FileNotFound(_)) => {
            Err(anyhow::Error::new(r2r_core::Error::MissingUpstream {
                stage: stage.as_str(),
                missing,
            })
            .context(format!("{} does not exist", path.display())))
        }
        Err(e) => Err(e).with_context(|| format!("loading {}", path.display())),
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = now();
    let stage: Stage = a.stage.into();
    let config = build_config(&a)?;
    let upstream = Upstream {
        decom: load_upstream(a.ckpt_decom.as_deref(), stage, "decom")?,
        denoise: load_upstream(a.ckpt_denoise.as_deref(), stage, "denoise")?,
    };
    // Fail on missing upstream stages before reading the dataset.
    match stage {
        Stage::Decom => {}
        _ if upstream.decom.is_none() => {
            return Err(r2r_core::Error::MissingUpstream {
                stage: stage.as_str(),
                missing: "decom",
            }
            .into())
        }
        Stage::Relight if upstream.denoise.is_none() => {
            return Err(r2r_core::Error::MissingUpstream {
                stage: stage.as_str(),
                missing: "denoise",
            }
            .into())
        }
        _ => {}
    }
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let dataset = load_pair_dataset(&a.data)
        .with_context(|| format!("loading dataset {}", a.data.display()))?;
    fs::create_dir_all(&a.out_dir)?;
    let ckpt_path = a.out_dir.join(format!("{stage}.ckpt"));
    let log_path = a.out_dir.join(format!("{stage}.log"));
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    eprintln!(
        "training {stage} on {} pairs for {} epochs",
        dataset.len(),
        config.epochs
    );
    let outcome = train_stage(
        stage,
        &dataset,
        &config,
        &upstream,
        resume.as_ref(),
        &mut log,
    )?;
    std::io::Write::flush(&mut log)?;
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    if let Some(last) = outcome.history.epoch_means.last() {
        eprintln!("final epoch mean loss {last}");
    }
    let mut checkpoints = BTreeMap::new();
    for (name, p) in [
        ("decom", &a.ckpt_decom),
        ("denoise", &a.ckpt_denoise),
        ("resume", &a.resume),
    ] {
        if let Some(p) = p {
            checkpoints.insert(name.to_string(), path_string(p));
        }
    }
    checkpoints.insert(stage.as_str().to_string(), path_string(&ckpt_path));
    RunManifest {
        command: format!("train --stage {stage}"),
        config: config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        checkpoints,
        dataset_manifest_hash: Some(dataset.manifest_hash.clone()),
        started_at: started,
        finished_at: now(),
        artifacts: vec![path_string(&ckpt_path), path_string(&log_path)],
    }
    .write(&a.out_dir.join(format!("{stage}.manifest.json")))
}

fn load_pipeline(decom: &Path, denoise: &Path, relight: &Path) -> Result<Pipeline> {
    let d = load_upstream(Some(decom), Stage::Relight, "decom")?.expect("path given");
    let n = load_upstream(Some(denoise), Stage::Relight, "denoise")?.expect("path given");
    let r = load_upstream(Some(relight), Stage::Relight, "relight")?.expect("path given");
    Ok(Pipeline::from_checkpoints(&d, &n, &r)?)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files of a directory, sorted by path.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn enhance_one(
    pipeline: &Pipeline,
    input: &Path,
    out_dir: &Path,
    dump: bool,
) -> Result<Vec<PathBuf>> {
    let image = load_image(input)?;
    let e = pipeline.enhance(&image)?;
    let s = stem(input);
    let mut written = Vec::new();
    let mut put = |suffix: &str, img: &data_io::Image| -> Result<()> {
        let path = out_dir.join(format!("{s}_{suffix}.png"));
        save_image(img, &path)?;
        written.push(path);
        Ok(())
    };
    put("enhanced", &e.enhanced)?;
    if dump {
        put("R", &e.reflectance)?;
        put("I", &gray_to_rgb(&e.illumination)?)?;
        put("Rhat", &e.denoised_reflectance)?;
        put("Ihat", &gray_to_rgb(&e.enhanced_illumination)?)?;
    }
    Ok(written)
}

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let started = now();
    let inputs = if a.input.is_dir() {
        list_images(&a.input)?
    } else if a.input.is_file() {
        vec![a.input.clone()]
    } else {
        return Err(usage(format!("input {} does not exist", a.input.display())));
    };
    if inputs.is_empty() {
        return Err(usage(format!("no images found in {}", a.input.display())));
    }
    let c = &a.ckpts;
    let pipeline = load_pipeline(&c.ckpt_decom, &c.ckpt_denoise, &c.ckpt_relight)?;
    fs::create_dir_all(&a.output)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Vec<PathBuf>>)>> = Mutex::new(Vec::new());
    let workers = data_io::num_workers().min(inputs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(input) = inputs.get(i) else { break };
                let r = enhance_one(&pipeline, input, &a.output, a.dump_intermediates);
                results.lock().expect("no poisoned lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned lock");
    results.sort_by_key(|(i, _)| *i);
    let mut artifacts = Vec::new();
    let mut failed = 0;
    for (i, r) in results {
        match r {
            Ok(paths) => artifacts.extend(paths.iter().map(|p| path_string(p))),
            Err(e) => {
                failed += 1;
                eprintln!("failed on {}: {e:#}", inputs[i].display());
            }
        }
    }
    RunManifest {
        command: "enhance".into(),
        config: BTreeMap::from([
            ("input".to_string(), path_string(&a.input)),
            (
                "dump_intermediates".to_string(),
                a.dump_intermediates.to_string(),
            ),
        ]),
        checkpoints: BTreeMap::from([
            ("decom".to_string(), path_string(&c.ckpt_decom)),
            ("denoise".to_string(), path_string(&c.ckpt_denoise)),
            ("relight".to_string(), path_string(&c.ckpt_relight)),
        ]),
        dataset_manifest_hash: None,
        started_at: started,
        finished_at: now(),
        artifacts,
    }
    .write(&a.output.join("manifest.json"))?;
    if failed > 0 {
        return Err(Exit {
            code: 1,
            message: format!("{failed} of {} inputs failed", inputs.len()),
        }
        .into());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rows = match (&a.data, &a.pred, &a.gt) {
        (Some(data), None, None) => {
            let (Some(d), Some(n), Some(r)) = (&a.ckpt_decom, &a.ckpt_denoise, &a.ckpt_relight)
            else {
                return Err(usage(
                    "--data needs --ckpt-decom, --ckpt-denoise and --ckpt-relight",
                ));
            };
            let pipeline = load_pipeline(d, n, r)?;
            let dataset = load_pair_dataset(data)?;
            dataset
                .pairs
                .iter()
                .map(|p| {
                    Ok(MetricRow::evaluate(
                        &p.id,
                        &pipeline.enhance(&p.low)?.enhanced,
                        &p.normal,
                    )?)
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, Some(pred), Some(gt)) => eval_dirs(pred, gt)?,
        _ => {
            return Err(usage(
                "pass either --data with checkpoints or --pred with --gt",
            ))
        }
    };
    let report = MetricReport::from_rows(rows)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    r2r_core::trainer::write_atomic(&a.output, report.to_csv().as_bytes())?;
    println!("{}", format_row(&report.means));
    Ok(())
}

/// Suffixes of the maps written by `enhance --dump-intermediates`.
const INTERMEDIATE_SUFFIXES: [&str; 4] = ["_R", "_I", "_Rhat", "_Ihat"];

/// Pairs each reference with `<stem>.png` or `<stem>_enhanced.png` among
/// the predictions.
fn eval_dirs(pred: &Path, gt: &Path) -> Result<Vec<MetricRow>> {
    let preds: BTreeMap<String, PathBuf> = list_images(pred)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let refs = list_images(gt)?;
    if refs.is_empty() {
        return Err(usage(format!("no reference images in {}", gt.display())));
    }
    let mut matched = Vec::new();
    for r in &refs {
        let s = stem(r);
        let p = preds
            .get(&s)
            .or_else(|| preds.get(&format!("{s}_enhanced")))
            .ok_or_else(|| {
                anyhow::Error::new(r2r_core::Error::UnmatchedPair(format!(
                    "{} has no prediction in {}",
                    r.file_name().unwrap_or_default().to_string_lossy(),
                    pred.display()
                )))
            })?;
        matched.push((s, p.clone(), r.clone()));
    }
    let ref_stems: std::collections::HashSet<String> = refs.iter().map(|r| stem(r)).collect();
    for (s, p) in &preds {
        let base = s.strip_suffix("_enhanced").unwrap_or(s);
        let intermediate = INTERMEDIATE_SUFFIXES.iter().any(|x| s.ends_with(x));
        if !intermediate && !ref_stems.contains(base) {
            return Err(r2r_core::Error::UnmatchedPair(format!(
                "{} has no reference in {}",
                p.file_name().unwrap_or_default().to_string_lossy(),
                gt.display()
            ))
            .into());
        }
    }
    matched
        .into_iter()
        .map(|(id, p, r)| {
            let (x, y) = (load_image(&p)?, load_image(&r)?);
            if x.shape() != y.shape() {
                return Err(usage(format!(
                    "{} is {:?} but {} is {:?}",
                    p.display(),
                    x.shape(),
                    r.display(),
                    y.shape()
                )));
            }
            Ok(MetricRow::evaluate(id, &x, &y)?)
        })
        .collect()
}
