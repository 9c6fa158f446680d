//! Stage objectives.
//!
//! All pixel terms are means over batch, channels and pixels, so the loss
//! weights do not depend on batch size. A weight of exactly zero skips its
//! term entirely, which makes the ablated losses bitwise equal to the pure
//! content losses.

use r2r_tensor::{Conv2dOpts, Tensor, Var};

use crate::decom_net::compose_var;
use crate::error::{Error, Result};
use crate::layers::{Conv, Init, ParamStore};
use crate::spectral_ops::fft2_var;
use crate::Float;

/// Weights of the auxiliary loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Decomposition cross term `|R_nor ∘ I_low - S_low|`.
    pub lambda1: f64,
    /// Decomposition cross term `|R_low ∘ I_nor - S_nor|`.
    pub lambda2: f64,
    /// Perceptual term of the decomposition loss.
    pub lambda3: f64,
    /// Perceptual term of the denoising loss.
    pub lambda4: f64,
    /// Perceptual term of the relighting loss.
    pub lambda5: f64,
    /// Frequency term of the relighting loss.
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 0.1,
            lambda4: 0.1,
            lambda5: 0.1,
            lambda6: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ];
        if all.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {all:?}"
            )));
        }
        Ok(())
    }

    /// Zeroes the perceptual weights.
    pub fn without_perceptual(self) -> Self {
        Self {
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..self
        }
    }

    pub fn without_frequency(self) -> Self {
        Self {
            lambda6: 0.0,
            ..self
        }
    }
}

/// Pixel distance used by the relighting content term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContentNorm {
    #[default]
    L1,
    Mse,
}

impl ContentNorm {
    fn apply<T: Float>(self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        match self {
            ContentNorm::L1 => Ok(a.l1_to(b)?),
            ContentNorm::Mse => Ok(a.mse_to(b)?),
        }
    }
}

/// Frozen convolutional feature extractor for the perceptual loss.
///
/// Three stages of two 3x3 convolutions each; stages two and three open with
/// a stride-2 convolution. Features are read before the activation of the
/// last convolution. Weights are He-uniform, bound `sqrt(6 / fan_in)`.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T> {
    params: ParamStore<T>,
    convs: Vec<Conv>,
}

pub const EXTRACTOR_SEED: u64 = 0x5eed_0f_fea7;
const EXTRACTOR_WIDTHS: [usize; 3] = [16, 32, 32];

impl<T: Float> Default for PerceptualExtractor<T> {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

impl<T: Float> PerceptualExtractor<T> {
    /// Smallest accepted image side.
    pub const MIN_SIZE: usize = 8;

    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (stage, &width) in EXTRACTOR_WIDTHS.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            let opts = Conv2dOpts {
                stride,
                padding: 1,
                dilation: 1,
            };
            convs.push(Conv::new(
                &mut params,
                &mut init,
                &format!("stage{stage}.conv0"),
                in_ch,
                width,
                3,
                opts,
            ));
            convs.push(Conv::same(
                &mut params,
                &mut init,
                &format!("stage{stage}.conv1"),
                width,
                width,
                3,
            ));
            in_ch = width;
        }
        let gain = T::of(6f64.sqrt());
        for conv in &convs {
            for w in params.get_mut(conv.weight).data_mut() {
                *w = *w * gain;
            }
        }
        Self { params, convs }
    }

    /// Replaces the backbone weights; names and shapes must match.
    pub fn with_params(mut self, params: &ParamStore<T>) -> Result<Self> {
        self.params.load_from(params)?;
        Ok(self)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Index into [`Self::activations`] of the tapped layer.
    pub fn tap_index(&self) -> usize {
        self.convs.len() - 1
    }

    /// `(C_j, H_j, W_j)` for an `h x w` input.
    pub fn feature_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let half = |n: usize| n.div_ceil(2);
        (EXTRACTOR_WIDTHS[2], half(half(h)), half(half(w)))
    }

    fn check_size(&self, x: &Var<T>) -> Result<()> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch {
                op: "perceptual",
                expected: 3,
                got: c,
            });
        }
        if h < Self::MIN_SIZE || w < Self::MIN_SIZE {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: Self::MIN_SIZE,
            });
        }
        Ok(())
    }

    /// Pre-activation features of the tap layer. Gradients reach `x` only.
    pub fn features(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check_size(x)?;
        let p = self.params.bind_frozen();
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&p, &h)?;
            if i != self.tap_index() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Pre-activation output of every convolution, running the full stack.
    pub fn activations(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = Var::constant(x.clone());
        self.check_size(&x)?;
        let p = self.params.bind_frozen();
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for conv in &self.convs {
            let pre = conv.forward(&p, &h)?;
            out.push(pre.value().clone());
            h = pre.relu();
        }
        Ok(out)
    }
}

fn check_same<T: Float>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn weighted<T: Float>(
    total: Var<T>,
    lambda: f64,
    term: impl FnOnce() -> Result<Var<T>>,
) -> Result<Var<T>> {
    if lambda == 0.0 {
        return Ok(total);
    }
    Ok(total.add(&term()?.scale(T::of(lambda)))?)
}

/// `(1 / (C H W)) ||φ(x) - φ(y)||²`, averaged over the batch.
pub fn perceptual_loss<T: Float>(
    x: &Var<T>,
    y: &Var<T>,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var<T>> {
    check_same("perceptual", x, y)?;
    Ok(extractor.features(x)?.mse_to(&extractor.features(y)?)?)
}

/// L1 reconstruction of both images from their own factors plus the
/// weighted cross reconstructions.
#[allow(clippy::too_many_arguments)]
pub fn decom_content_loss<T: Float>(
    r_low: &Var<T>,
    i_low: &Var<T>,
    r_nor: &Var<T>,
    i_nor: &Var<T>,
    s_low: &Var<T>,
    s_nor: &Var<T>,
    weights: &LossWeights,
) -> Result<Var<T>> {
    check_same("decom", s_low, s_nor)?;
    let rec_low = compose_var(r_low, i_low)?;
    let rec_nor = compose_var(r_nor, i_nor)?;
    check_same("decom", &rec_low, s_low)?;
    let total = rec_low.l1_to(s_low)?.add(&rec_nor.l1_to(s_nor)?)?;
    let total = weighted(total, weights.lambda1, || {
        Ok(compose_var(r_nor, i_low)?.l1_to(s_low)?)
    })?;
    weighted(total, weights.lambda2, || {
        Ok(compose_var(r_low, i_nor)?.l1_to(s_nor)?)
    })
}

/// Content term plus the perceptual distance of both self-reconstructions.
#[allow(clippy::too_many_arguments)]
pub fn decom_loss<T: Float>(
    r_low: &Var<T>,
    i_low: &Var<T>,
    r_nor: &Var<T>,
    i_nor: &Var<T>,
    s_low: &Var<T>,
    s_nor: &Var<T>,
    weights: &LossWeights,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var<T>> {
    let content = decom_content_loss(r_low, i_low, r_nor, i_nor, s_low, s_nor, weights)?;
    weighted(content, weights.lambda3, || {
        let low = perceptual_loss(&compose_var(r_low, i_low)?, s_low, extractor)?;
        let nor = perceptual_loss(&compose_var(r_nor, i_nor)?, s_nor, extractor)?;
        Ok(low.add(&nor)?)
    })
}

pub fn denoise_loss<T: Float>(
    r_hat: &Var<T>,
    r_nor: &Var<T>,
    weights: &LossWeights,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var<T>> {
    check_same("denoise", r_hat, r_nor)?;
    weighted(r_hat.l1_to(r_nor)?, weights.lambda4, || {
        perceptual_loss(r_hat, r_nor, extractor)
    })
}

/// Sliced 1-D Wasserstein-1 distance between the real and imaginary FFT
/// coefficients of `x` and `y`.
///
/// For every image, channel and part the coefficients of each side are
/// sorted and the mean absolute difference of the sorted sequences is
/// taken. Parts are summed, images and channels averaged, and the result is
/// divided by `max(H, W)²`.
pub fn frequency_loss<T: Float>(x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
    check_same("frequency", x, y)?;
    let (n, c, h, w) = x.value().dims4()?;
    let side = h.max(w) as f64;
    let scale = 1.0 / ((n * c) as f64 * side * side);
    sorted_w1(&fft2_var(x)?, &fft2_var(y)?, T::of(scale))
}

/// `scale * Σ_rows mean_k |sort(a_row)_k - sort(b_row)_k|` over rows of
/// `H * W` coefficients.
fn sorted_w1<T: Float>(a: &Var<T>, b: &Var<T>, scale: T) -> Result<Var<T>> {
    let (n, c, h, w) = a.value().dims4()?;
    let len = h * w;
    let rows = n * c;
    let row_scale = scale / T::of(len as f64);
    // Per coefficient: its rank partner's sign, scattered back to the
    // original position, for both inputs.
    let mut sign_a = vec![T::zero(); rows * len];
    let mut sign_b = vec![T::zero(); rows * len];
    let mut total = T::zero();
    let mut order_a: Vec<usize> = Vec::with_capacity(len);
    let mut order_b: Vec<usize> = Vec::with_capacity(len);
    for row in 0..rows {
        let ra = &a.value().data()[row * len..(row + 1) * len];
        let rb = &b.value().data()[row * len..(row + 1) * len];
        order_a.clear();
        order_a.extend(0..len);
        order_b.clear();
        order_b.extend(0..len);
        order_a.sort_by(|&i, &j| {
            ra[i]
                .partial_cmp(&ra[j])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order_b.sort_by(|&i, &j| {
            rb[i]
                .partial_cmp(&rb[j])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut acc = T::zero();
        for (&ia, &ib) in order_a.iter().zip(&order_b) {
            let d = ra[ia] - rb[ib];
            acc += d.abs();
            let s = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            sign_a[row * len + ia] = s * row_scale;
            sign_b[row * len + ib] = -s * row_scale;
        }
        total += acc;
    }
    let value = Tensor::scalar(total * row_scale);
    let shape = a.shape().to_vec();
    let ga = Tensor::from_vec(&shape, sign_a)?;
    let gb = Tensor::from_vec(&shape, sign_b)?;
    Ok(Var::from_op(
        &[a, b],
        value,
        Box::new(move |g, needs| {
            let g = g.item();
            [(&ga, needs[0]), (&gb, needs[1])]
                .into_iter()
                .map(|(t, need)| need.then(|| t.map(|v| v * g)))
                .collect()
        }),
    ))
}

/// Content, perceptual and frequency terms of the relit image.
pub fn relight_loss<T: Float>(
    s_hat: &Var<T>,
    s_nor: &Var<T>,
    weights: &LossWeights,
    norm: ContentNorm,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var<T>> {
    check_same("relight", s_hat, s_nor)?;
    let total = norm.apply(s_hat, s_nor)?;
    let total = weighted(total, weights.lambda5, || {
        perceptual_loss(s_hat, s_nor, extractor)
    })?;
    weighted(total, weights.lambda6, || frequency_loss(s_hat, s_nor))
}
