//! Staged training: decomposition, then denoising, then relighting.
//!
//! Each stage trains one network with Adam while the networks of earlier
//! stages stay frozen. Their outputs depend only on the fixed dataset, so
//! they are computed once on full images and patches are cropped from them.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use r2r_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::{check_patch_fits, crop_stack, random_origin, PairedDataset};
use crate::decom_net::DecomNet;
use crate::denoise_net::DenoiseNet;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::losses::{
    decom_loss, denoise_loss, relight_loss, ContentNorm, LossWeights, PerceptualExtractor,
};
use crate::relight_net::{Branches, RelightNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Decom,
    Denoise,
    Relight,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Decom, Stage::Denoise, Stage::Relight];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Decom => "decom",
            Stage::Denoise => "denoise",
            Stage::Relight => "relight",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Result<Self> {
        Stage::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::InvalidCheckpoint(format!("unknown stage code {code}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_cem: bool,
    pub disable_drm: bool,
    /// Mean squared error instead of L1 for the relighting content term.
    pub mse_content: bool,
    pub no_perceptual: bool,
    pub no_frequency: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    /// First (zero-based) epoch trained at `lr_after_decay`.
    pub lr_decay_epoch: usize,
    pub lr_after_decay: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            patch_size: 96,
            epochs: 20,
            lr_decay_epoch: 10,
            lr_after_decay: 1e-4,
            loss_weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr_after_decay > 0.0 && self.lr_after_decay <= self.lr) {
            return bad(format!(
                "need 0 < lr_after_decay <= lr, got lr={} lr_after_decay={}",
                self.lr, self.lr_after_decay
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.epochs == 0 {
            return bad("batch_size, patch_size and epochs must be positive".into());
        }
        if self.lr_decay_epoch > self.epochs {
            return bad(format!(
                "lr_decay_epoch {} exceeds epochs {}",
                self.lr_decay_epoch, self.epochs
            ));
        }
        if self.ablation.disable_cem && self.ablation.disable_drm {
            return bad("cannot disable both relighting branches".into());
        }
        self.loss_weights.validate()
    }

    /// Learning rate used throughout zero-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr
        } else {
            self.lr_after_decay
        }
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        if self.ablation.no_perceptual {
            w = w.without_perceptual();
        }
        if self.ablation.no_frequency {
            w = w.without_frequency();
        }
        w
    }

    pub fn content_norm(&self) -> ContentNorm {
        if self.ablation.mse_content {
            ContentNorm::Mse
        } else {
            ContentNorm::L1
        }
    }

    pub fn branches(&self) -> Branches {
        Branches {
            disable_cem: self.ablation.disable_cem,
            disable_drm: self.ablation.disable_drm,
        }
    }

    /// Every field as `(key, value)` text.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.loss_weights;
        let a = &self.ablation;
        vec![
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_decay_epoch", self.lr_decay_epoch.to_string()),
            ("lr_after_decay", self.lr_after_decay.to_string()),
            ("lambda1", w.lambda1.to_string()),
            ("lambda2", w.lambda2.to_string()),
            ("lambda3", w.lambda3.to_string()),
            ("lambda4", w.lambda4.to_string()),
            ("lambda5", w.lambda5.to_string()),
            ("lambda6", w.lambda6.to_string()),
            ("seed", self.seed.to_string()),
            ("disable_cem", a.disable_cem.to_string()),
            ("disable_drm", a.disable_drm.to_string()),
            ("mse_content", a.mse_content.to_string()),
            ("no_perceptual", a.no_perceptual.to_string()),
            ("no_frequency", a.no_frequency.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        let w = &mut self.loss_weights;
        let a = &mut self.ablation;
        match key.trim() {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_decay_epoch" => self.lr_decay_epoch = parse(key, value)?,
            "lr_after_decay" => self.lr_after_decay = parse(key, value)?,
            "lambda1" => w.lambda1 = parse(key, value)?,
            "lambda2" => w.lambda2 = parse(key, value)?,
            "lambda3" => w.lambda3 = parse(key, value)?,
            "lambda4" => w.lambda4 = parse(key, value)?,
            "lambda5" => w.lambda5 = parse(key, value)?,
            "lambda6" => w.lambda6 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "disable_cem" => a.disable_cem = parse(key, value)?,
            "disable_drm" => a.disable_drm = parse(key, value)?,
            "mse_content" => a.mse_content = parse(key, value)?,
            "no_perceptual" => a.no_perceptual = parse(key, value)?,
            "no_frequency" => a.no_frequency = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None`
/// keep their value and moments.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient {:?} for {} of shape {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGrad(params.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    for ((tensor, g), (m, v)) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let Some(g) = g else { continue };
        let (p, m, v) = (tensor.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            p[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"R2RCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct StageCheckpoint {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: u32,
    pub format_version: u32,
    pub weights: ParamStore<f32>,
    pub optimizer: AdamState,
    pub rng: RngState,
    /// Training configuration as `key=value` lines.
    pub config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, t: &Tensor<f32>) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::InvalidCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))
    }
    fn floats(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::InvalidCheckpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(shape, data)?)
    }
}

impl StageCheckpoint {
    /// Layout: magic, version, stage, epoch, Adam step, RNG state, config,
    /// named tensors with their Adam moments (f32 little-endian), CRC32.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(self.format_version);
        w.u8(self.stage.code());
        w.u32(self.epoch);
        w.u64(self.optimizer.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.bytes(self.config.as_bytes());
        w.u32(self.weights.len() as u32);
        for (i, (name, t)) in self.weights.iter().enumerate() {
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.floats(t);
            w.floats(&self.optimizer.m[i]);
            w.floats(&self.optimizer.v[i]);
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(MAGIC.len()).map_err(|_| Error::ChecksumMismatch)?;
        if magic != MAGIC {
            return Err(Error::InvalidCheckpoint("not a checkpoint file".into()));
        }
        let version = r.u32().map_err(|_| Error::ChecksumMismatch)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if buf.len() < MAGIC.len() + 8 {
            return Err(Error::ChecksumMismatch);
        }
        let (body, trailer) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader {
            buf: body,
            pos: r.pos,
        };
        let stage = Stage::from_code(r.u8()?)?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut weights = ParamStore::new();
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            weights.add(name, r.floats(&shape)?);
            m.push(r.floats(&shape)?);
            v.push(r.floats(&shape)?);
        }
        if r.pos != body.len() {
            return Err(Error::InvalidCheckpoint("trailing bytes".into()));
        }
        Ok(Self {
            stage,
            epoch,
            format_version: version,
            weights,
            optimizer: AdamState { step, m, v },
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            config,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_text(&self.config)
    }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| {
        Error::Io(io::Error::new(
            io::ErrorKind::InvalidInput,
            "path has no file name",
        ))
    })?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &StageCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<StageCheckpoint> {
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    StageCheckpoint::decode(&fs::read(path)?)
}

/// Checkpoints of earlier stages.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub decom: Option<StageCheckpoint>,
    pub denoise: Option<StageCheckpoint>,
}

fn expect_stage(ckpt: &StageCheckpoint, stage: Stage) -> Result<()> {
    if ckpt.stage != stage {
        return Err(Error::InvalidCheckpoint(format!(
            "expected a {stage} checkpoint, got {}",
            ckpt.stage
        )));
    }
    Ok(())
}

pub fn decom_from_checkpoint(ckpt: &StageCheckpoint) -> Result<DecomNet<f32>> {
    expect_stage(ckpt, Stage::Decom)?;
    let mut net = DecomNet::new(0);
    net.params.load_from(&ckpt.weights)?;
    Ok(net)
}

pub fn denoise_from_checkpoint(ckpt: &StageCheckpoint) -> Result<DenoiseNet<f32>> {
    expect_stage(ckpt, Stage::Denoise)?;
    let mut net = DenoiseNet::new(0);
    net.params.load_from(&ckpt.weights)?;
    Ok(net)
}

/// Restores the relighting network, including the branch switches it was
/// trained with.
pub fn relight_from_checkpoint(ckpt: &StageCheckpoint) -> Result<RelightNet<f32>> {
    expect_stage(ckpt, Stage::Relight)?;
    let mut net = RelightNet::new(0).with_branches(ckpt.train_config()?.branches());
    net.params.load_from(&ckpt.weights)?;
    Ok(net)
}

/// Per-step and per-epoch losses of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub step_losses: Vec<f64>,
    pub step_lrs: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: StageCheckpoint,
    pub history: History,
}

/// Full-image maps one stage crops its batches from.
enum Sources {
    Decom {
        low: Vec<Tensor<f32>>,
        normal: Vec<Tensor<f32>>,
    },
    Denoise {
        r_low: Vec<Tensor<f32>>,
        i_low: Vec<Tensor<f32>>,
        r_nor: Vec<Tensor<f32>>,
    },
    Relight {
        r_hat: Vec<Tensor<f32>>,
        i_low: Vec<Tensor<f32>>,
        normal: Vec<Tensor<f32>>,
    },
}

fn batch1(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    Ok(image.clone().reshape(&[1, s[0], s[1], s[2]])?)
}

fn prepare_sources(stage: Stage, dataset: &PairedDataset, upstream: &Upstream) -> Result<Sources> {
    let low: Vec<_> = dataset
        .pairs
        .iter()
        .map(|p| batch1(&p.low))
        .collect::<Result<_>>()?;
    let normal: Vec<_> = dataset
        .pairs
        .iter()
        .map(|p| batch1(&p.normal))
        .collect::<Result<_>>()?;
    if stage == Stage::Decom {
        return Ok(Sources::Decom { low, normal });
    }
    let decom_ckpt = upstream.decom.as_ref().ok_or(Error::MissingUpstream {
        stage: stage.as_str(),
        missing: "decom",
    })?;
    if stage == Stage::Relight && upstream.denoise.is_none() {
        return Err(Error::MissingUpstream {
            stage: stage.as_str(),
            missing: "denoise",
        });
    }
    let decom = decom_from_checkpoint(decom_ckpt)?;
    let mut r_low = Vec::new();
    let mut i_low = Vec::new();
    for x in &low {
        let d = decom.decompose(x)?;
        r_low.push(d.reflectance);
        i_low.push(d.illumination);
    }
    if stage == Stage::Denoise {
        let r_nor = normal
            .iter()
            .map(|x| Ok(decom.decompose(x)?.reflectance))
            .collect::<Result<_>>()?;
        return Ok(Sources::Denoise {
            r_low,
            i_low,
            r_nor,
        });
    }
    let denoise = denoise_from_checkpoint(upstream.denoise.as_ref().expect("checked above"))?;
    let r_hat = r_low
        .iter()
        .zip(&i_low)
        .map(|(r, i)| denoise.denoise(r, i))
        .collect::<Result<_>>()?;
    Ok(Sources::Relight {
        r_hat,
        i_low,
        normal,
    })
}

enum Net {
    Decom(DecomNet<f32>),
    Denoise(DenoiseNet<f32>),
    Relight(RelightNet<f32>),
}

impl Net {
    fn new(stage: Stage, config: &TrainConfig) -> Self {
        let seed = config.seed.wrapping_add(stage.code() as u64);
        match stage {
            Stage::Decom => Net::Decom(DecomNet::new(seed)),
            Stage::Denoise => Net::Denoise(DenoiseNet::new(seed)),
            Stage::Relight => Net::Relight(RelightNet::new(seed).with_branches(config.branches())),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Net::Decom(n) => &mut n.params,
            Net::Denoise(n) => &mut n.params,
            Net::Relight(n) => &mut n.params,
        }
    }

    fn params(&self) -> &ParamStore<f32> {
        match self {
            Net::Decom(n) => &n.params,
            Net::Denoise(n) => &n.params,
            Net::Relight(n) => &n.params,
        }
    }
}

struct StepContext<'a> {
    sources: &'a Sources,
    weights: LossWeights,
    norm: ContentNorm,
    extractor: &'a PerceptualExtractor<f32>,
}

/// Loss and parameter gradients for one batch.
fn loss_and_grads(
    net: &Net,
    ctx: &StepContext<'_>,
    indices: &[usize],
    origins: &[(usize, usize)],
    patch: usize,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let crop = |maps: &[Tensor<f32>]| -> Result<Var<f32>> {
        let picked: Vec<_> = indices.iter().map(|&i| &maps[i]).collect();
        Ok(Var::constant(crop_stack(&picked, origins, patch)?))
    };
    let tape = Tape::new();
    let p = net.params().bind(&tape);
    let w = &ctx.weights;
    let loss = match (net, ctx.sources) {
        (Net::Decom(n), Sources::Decom { low, normal }) => {
            let (s_low, s_nor) = (crop(low)?, crop(normal)?);
            let (r_low, i_low) = n.forward(&p, &s_low)?;
            let (r_nor, i_nor) = n.forward(&p, &s_nor)?;
            decom_loss(
                &r_low,
                &i_low,
                &r_nor,
                &i_nor,
                &s_low,
                &s_nor,
                w,
                ctx.extractor,
            )?
        }
        (
            Net::Denoise(n),
            Sources::Denoise {
                r_low,
                i_low,
                r_nor,
            },
        ) => {
            let r_hat = n.forward(&p, &crop(r_low)?, &crop(i_low)?)?;
            denoise_loss(&r_hat, &crop(r_nor)?, w, ctx.extractor)?
        }
        (
            Net::Relight(n),
            Sources::Relight {
                r_hat,
                i_low,
                normal,
            },
        ) => {
            let (_, s_hat) = n.forward(&p, &crop(r_hat)?, &crop(i_low)?)?;
            relight_loss(&s_hat, &crop(normal)?, w, ctx.norm, ctx.extractor)?
        }
        _ => unreachable!("network and sources built for the same stage"),
    };
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = loss.backward()?;
    let g = p.vars().iter().map(|v| grads.take(v)).collect();
    Ok((value, g))
}

/// Trains one stage.
///
/// Each epoch visits the pairs in a fresh random order, `batch_size` at a
/// time, with one random aligned crop per pair. Writes
/// `epoch=<e> step=<s> loss=<v> lr=<r>` per step and
/// `epoch=<e> mean_loss=<v>` per epoch to `log`. With `resume`, training
/// continues from that checkpoint's epoch, weights, moments and RNG.
pub fn train_stage(
    stage: Stage,
    dataset: &PairedDataset,
    config: &TrainConfig,
    upstream: &Upstream,
    resume: Option<&StageCheckpoint>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_patch_fits(dataset, config.patch_size)?;
    let sources = prepare_sources(stage, dataset, upstream)?;
    let extractor = PerceptualExtractor::default();
    let ctx = StepContext {
        sources: &sources,
        weights: config.effective_weights(),
        norm: config.content_norm(),
        extractor: &extractor,
    };
    let mut net = Net::new(stage, config);
    let (mut optimizer, mut rng, start_epoch) = match resume {
        Some(ckpt) => {
            expect_stage(ckpt, stage)?;
            net.params_mut().load_from(&ckpt.weights)?;
            (
                ckpt.optimizer.clone(),
                ckpt.rng.restore(),
                ckpt.epoch as usize,
            )
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stage.code() as u64);
            (AdamState::new(net.params()), rng, 0)
        }
    };
    let patch = config.patch_size;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in start_epoch..config.epochs {
        let lr = config.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for indices in order.chunks(config.batch_size) {
            let step = optimizer.step as usize;
            let origins: Vec<_> = indices
                .iter()
                .map(|&i| {
                    random_origin(
                        &mut rng,
                        dataset.pairs[i].height(),
                        dataset.pairs[i].width(),
                        patch,
                    )
                })
                .collect();
            let (loss, grads) = loss_and_grads(&net, &ctx, indices, &origins, patch)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            adam_step(
                net.params_mut(),
                &grads,
                &mut optimizer,
                lr,
                config.beta1,
                config.beta2,
                config.eps,
            )?;
            writeln!(log, "epoch={epoch} step={step} loss={loss} lr={lr}")?;
            history.step_losses.push(loss);
            history.step_lrs.push(lr);
            epoch_sum += loss;
            epoch_steps += 1;
        }
        let mean = epoch_sum / epoch_steps as f64;
        writeln!(log, "epoch={epoch} mean_loss={mean}")?;
        history.epoch_means.push(mean);
    }
    let checkpoint = StageCheckpoint {
        stage,
        epoch: config.epochs as u32,
        format_version: FORMAT_VERSION,
        weights: net.params().clone(),
        optimizer,
        rng: RngState::capture(&rng),
        config: config.to_text(),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (1e-3, 0.9, 0.999));
        assert_eq!((c.batch_size, c.patch_size, c.epochs), (4, 96, 20));
        assert_eq!((c.lr_decay_epoch, c.lr_after_decay), (10, 1e-4));
        assert_eq!(c.lr_at(9), 1e-3);
        assert_eq!(c.lr_at(10), 1e-4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig {
            seed: 7,
            ..Default::default()
        };
        c.ablation.no_frequency = true;
        c.loss_weights.lambda5 = 0.25;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(TrainConfig::from_text("bogus=1").is_err());
        assert!(TrainConfig::from_text("lr=abc").is_err());
        let bad = TrainConfig {
            lr_after_decay: 1e-2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.add("x", Tensor::scalar(0.5f32));
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &[Some(Tensor::scalar(1.0))],
            &mut state,
            1e-3,
            0.9,
            0.999,
            1e-8,
        )
        .unwrap();
        let moved = 0.5 - params.iter().next().unwrap().1.item() as f64;
        assert!((moved - 1e-3).abs() < 1e-7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ParamStore::new();
        params.add("x", Tensor::from_vec(&[2], vec![0.5f32, -1.0]).unwrap());
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &[Some(Tensor::zeros(&[2]))],
            &mut state,
            1e-3,
            0.9,
            0.999,
            1e-8,
        )
        .unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
        let nan = Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(
            adam_step(
                &mut params,
                &[Some(nan)],
                &mut state,
                1e-3,
                0.9,
                0.999,
                1e-8
            ),
            Err(Error::NonFiniteGrad(_))
        ));
        assert!(adam_step(
            &mut params,
            &[Some(Tensor::zeros(&[3]))],
            &mut state,
            1e-3,
            0.9,
            0.999,
            1e-8
        )
        .is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(2);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut back = state.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
