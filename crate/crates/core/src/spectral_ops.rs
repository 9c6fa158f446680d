//! Frequency-domain primitives: 2-D FFT and its inverse over feature maps,
//! complex convolution, complex ReLU and the complex residual block.
//!
//! Two representations are provided. [`ComplexFeatureMap`] keeps real and
//! imaginary parts in separate tensors and is used by the plain functions.
//! Inside autodiff graphs a complex map of `C` channels is a single real
//! `N x 2C x H x W` [`Var`] whose first `C` channels hold the real part and
//! whose last `C` hold the imaginary part. On that layout a complex
//! convolution is one real convolution with the block filter
//! `[[A, -B], [B, A]]`, and CReLU is a plain ReLU.
//!
//! Conventions: forward transform unnormalized, inverse scaled by `1/(HW)`,
//! DC bin at index `(0, 0)` (no shift), zero padding for spatial filters.

use r2r_tensor::{Conv2dOpts, Tensor, Var};
use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::layers::{Bound, Init, ParamId, ParamStore};
use crate::Float;

/// Paired real/imaginary tensors of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexFeatureMap<T> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
}

impl<T: Float> ComplexFeatureMap<T> {
    pub fn new(real: Tensor<T>, imag: Tensor<T>) -> Result<Self> {
        real.check_same_shape(&imag, "complex feature map")?;
        Ok(Self { real, imag })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            real: Tensor::zeros(shape),
            imag: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }

    /// Stacks into the `N x 2C x H x W` graph layout.
    pub fn to_stacked(&self) -> Result<Tensor<T>> {
        let re = Var::constant(self.real.clone());
        let im = Var::constant(self.imag.clone());
        Ok(Var::concat(&[&re, &im], 1)?.value().clone())
    }

    /// Splits an `N x 2C x H x W` tensor into its real and imaginary halves.
    pub fn from_stacked(stacked: &Tensor<T>) -> Result<Self> {
        let (_, c2, _, _) = stacked.dims4()?;
        if c2 % 2 != 0 {
            return Err(Error::Shape(format!(
                "stacked complex map has odd channel count {c2}"
            )));
        }
        let c = c2 / 2;
        Ok(Self {
            real: r2r_tensor::ops::narrow_tensor(stacked, 1, 0, c),
            imag: r2r_tensor::ops::narrow_tensor(stacked, 1, c, c),
        })
    }
}

/// Filter bank `W = A + jB`, each part `out x in x k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexConvWeights<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Float> ComplexConvWeights<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        a.check_same_shape(&b, "complex conv weights")?;
        if a.rank() != 4 {
            return Err(Error::Shape(format!(
                "complex filter must be rank 4, got {:?}",
                a.shape()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        let shape = [out_ch, in_ch, kernel, kernel];
        Self {
            a: Tensor::zeros(&shape),
            b: Tensor::zeros(&shape),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.a.shape()[2]
    }
}

fn as_rank4<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        4 => Ok((x.clone(), false)),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Ok((x.clone().reshape(&shape)?, true))
        }
        _ => Err(Error::Shape(format!(
            "expected C x H x W or N x C x H x W, got {:?}",
            x.shape()
        ))),
    }
}

/// Per-plane 2-D DFT of complex data stored plane after plane.
fn transform_planes<T: Float>(
    data: &mut [Complex<T>],
    h: usize,
    w: usize,
    direction: FftDirection,
) {
    if h == 0 || w == 0 {
        return;
    }
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for plane in data.chunks_exact_mut(h * w) {
        row_fft.process(plane);
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

fn split<T: Float>(shape: &[usize], buf: &[Complex<T>]) -> (Tensor<T>, Tensor<T>) {
    let re = buf.iter().map(|c| c.re).collect();
    let im = buf.iter().map(|c| c.im).collect();
    (
        Tensor::from_vec(shape, re).expect("shape"),
        Tensor::from_vec(shape, im).expect("shape"),
    )
}

/// Unnormalized forward DFT of a real `[.., H, W]` tensor.
fn forward_real<T: Float>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut buf: Vec<Complex<T>> = x
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    transform_planes(&mut buf, h, w, FftDirection::Forward);
    split(shape, &buf)
}

/// DFT of a complex `[.., H, W]` map; `scale` multiplies the result.
fn transform_complex<T: Float>(
    re: &Tensor<T>,
    im: &Tensor<T>,
    direction: FftDirection,
    scale: T,
) -> (Tensor<T>, Tensor<T>) {
    let shape = re.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut buf: Vec<Complex<T>> = re
        .data()
        .iter()
        .zip(im.data())
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    transform_planes(&mut buf, h, w, direction);
    if scale != T::one() {
        for c in &mut buf {
            *c = *c * scale;
        }
    }
    split(shape, &buf)
}

/// Per-channel 2-D DFT of a real `C x H x W` (or `N x C x H x W`) tensor,
/// unnormalized.
pub fn fft2<T: Float>(x: &Tensor<T>) -> Result<ComplexFeatureMap<T>> {
    if x.rank() < 2 || x.shape().iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "fft2 needs non-empty spatial dims, got {:?}",
            x.shape()
        )));
    }
    let (real, imag) = forward_real(x);
    Ok(ComplexFeatureMap { real, imag })
}

/// `1/(HW)`-normalized inverse DFT, returning the real part.
///
/// With `strict`, the discarded imaginary residue must not exceed
/// `1e-5 * max|X|`; this holds for spectra of real signals.
pub fn ifft2<T: Float>(spectrum: &ComplexFeatureMap<T>, strict: bool) -> Result<Tensor<T>> {
    let shape = spectrum.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "ifft2 needs rank >= 2, got {shape:?}"
        )));
    }
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let scale = T::one() / T::of(hw as f64);
    let (re, im) = transform_complex(&spectrum.real, &spectrum.imag, FftDirection::Inverse, scale);
    if strict {
        let peak = spectrum
            .real
            .max_abs()
            .max(spectrum.imag.max_abs())
            .as_f64();
        let residue = im.max_abs().as_f64();
        let bound = 1e-5 * peak;
        if residue > bound {
            return Err(Error::NonConjugateSpectrum { residue, bound });
        }
    }
    Ok(re)
}

/// `(A*x - B*y) + j(B*x + A*y)` with stride 1 and zero "same" padding.
pub fn complex_conv<T: Float>(
    h: &ComplexFeatureMap<T>,
    w: &ComplexConvWeights<T>,
) -> Result<ComplexFeatureMap<T>> {
    let (x, squeezed) = as_rank4(&h.real)?;
    let (y, _) = as_rank4(&h.imag)?;
    let channels = x.shape()[1];
    if channels != w.in_channels() {
        return Err(Error::ChannelMismatch {
            op: "complex_conv",
            expected: w.in_channels(),
            got: channels,
        });
    }
    let z = Var::concat(&[&Var::constant(x), &Var::constant(y)], 1)?;
    let out = complex_conv_var(&z, &Var::constant(w.a.clone()), &Var::constant(w.b.clone()))?;
    let mut result = ComplexFeatureMap::from_stacked(out.value())?;
    if squeezed {
        let shape = result.real.shape()[1..].to_vec();
        result.real = result.real.reshape(&shape)?;
        result.imag = result.imag.reshape(&shape)?;
    }
    Ok(result)
}

/// `ReLU(re) + j ReLU(im)`.
pub fn crelu<T: Float>(h: &ComplexFeatureMap<T>) -> ComplexFeatureMap<T> {
    ComplexFeatureMap {
        real: h.real.map(|v| v.max(T::zero())),
        imag: h.imag.map(|v| v.max(T::zero())),
    }
}

/// `h + crelu(complex_conv(crelu(complex_conv(h, w1)), w2))`.
pub fn complex_resblock<T: Float>(
    h: &ComplexFeatureMap<T>,
    w1: &ComplexConvWeights<T>,
    w2: &ComplexConvWeights<T>,
) -> Result<ComplexFeatureMap<T>> {
    let branch = crelu(&complex_conv(&crelu(&complex_conv(h, w1)?), w2)?);
    if branch.shape() != h.shape() {
        return Err(Error::ChannelMismatch {
            op: "complex_resblock",
            expected: h.shape()[h.shape().len() - 3],
            got: branch.shape()[branch.shape().len() - 3],
        });
    }
    Ok(ComplexFeatureMap {
        real: h
            .real
            .zip_map(&branch.real, "complex_resblock", |a, b| a + b)?,
        imag: h
            .imag
            .zip_map(&branch.imag, "complex_resblock", |a, b| a + b)?,
    })
}

/// Differentiable forward DFT: real `N x C x H x W` to stacked `N x 2C x H x W`.
pub fn fft2_var<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let (re, im) = forward_real(x.value());
    let out = Var::concat(&[&Var::constant(re), &Var::constant(im)], 1)?
        .value()
        .clone();
    Ok(Var::from_op(
        &[x],
        out,
        Box::new(move |g, _| {
            // Adjoint of the forward DFT: Re(unnormalized inverse DFT of g).
            let gr = r2r_tensor::ops::narrow_tensor(g, 1, 0, c);
            let gi = r2r_tensor::ops::narrow_tensor(g, 1, c, c);
            let (dx, _) = transform_complex(&gr, &gi, FftDirection::Inverse, T::one());
            debug_assert_eq!(dx.shape(), &[n, c, h, w]);
            vec![Some(dx)]
        }),
    ))
}

/// Differentiable inverse DFT: stacked `N x 2C x H x W` to the real part
/// `N x C x H x W`.
pub fn ifft2_var<T: Float>(z: &Var<T>) -> Result<Var<T>> {
    let (_, c2, h, w) = z.value().dims4()?;
    if c2 % 2 != 0 {
        return Err(Error::Shape(format!(
            "stacked complex map has odd channel count {c2}"
        )));
    }
    let c = c2 / 2;
    let scale = T::one() / T::of((h * w) as f64);
    let zr = r2r_tensor::ops::narrow_tensor(z.value(), 1, 0, c);
    let zi = r2r_tensor::ops::narrow_tensor(z.value(), 1, c, c);
    let (re, _) = transform_complex(&zr, &zi, FftDirection::Inverse, scale);
    Ok(Var::from_op(
        &[z],
        re,
        Box::new(move |g, _| {
            // Adjoint of Re(inverse DFT): forward DFT of g scaled by 1/(HW).
            let (mut gr, mut gi) = forward_real(g);
            gr = gr.scale(scale);
            gi = gi.scale(scale);
            let stacked = Var::concat(&[&Var::constant(gr), &Var::constant(gi)], 1)
                .expect("matching halves")
                .value()
                .clone();
            vec![Some(stacked)]
        }),
    ))
}

/// Real block filter `[[A, -B], [B, A]]` acting on the stacked layout.
pub fn complex_block_filter<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let top = Var::concat(&[a, &b.neg()], 1)?;
    let bottom = Var::concat(&[b, a], 1)?;
    Ok(Var::concat(&[&top, &bottom], 0)?)
}

/// Differentiable complex convolution on the stacked layout.
pub fn complex_conv_var<T: Float>(z: &Var<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let in_ch = a.shape()[1];
    let channels = z.shape().get(1).copied().unwrap_or(0);
    if channels != 2 * in_ch {
        return Err(Error::ChannelMismatch {
            op: "complex_conv",
            expected: 2 * in_ch,
            got: channels,
        });
    }
    let filter = complex_block_filter(a, b)?;
    Ok(z.conv2d(&filter, None, Conv2dOpts::same(a.shape()[2]))?)
}

/// Complex convolution layer with learned `A` and `B` filters (no bias).
#[derive(Clone, Debug)]
pub struct ComplexConv {
    pub a: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ComplexConv {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        // A complex output sums 2 * in_ch * k^2 real products.
        let fan_in = 2 * in_ch * kernel * kernel;
        let shape = [out_ch, in_ch, kernel, kernel];
        let a = store.add(format!("{name}.a"), init.fan_in_uniform(&shape, fan_in));
        let b = store.add(format!("{name}.b"), init.fan_in_uniform(&shape, fan_in));
        Self {
            a,
            b,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, z: &Var<T>) -> Result<Var<T>> {
        complex_conv_var(z, p.var(self.a), p.var(self.b))
    }

    pub fn weights<T: Float>(&self, store: &ParamStore<T>) -> ComplexConvWeights<T> {
        ComplexConvWeights {
            a: store.get(self.a).clone(),
            b: store.get(self.b).clone(),
        }
    }
}

/// Complex residual block `h + crelu(conv2(crelu(conv1(h))))`.
#[derive(Clone, Debug)]
pub struct ComplexResBlock {
    pub conv1: ComplexConv,
    pub conv2: ComplexConv,
}

impl ComplexResBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        ch: usize,
    ) -> Self {
        Self {
            conv1: ComplexConv::new(store, init, &format!("{name}.cconv1"), ch, ch, 3),
            conv2: ComplexConv::new(store, init, &format!("{name}.cconv2"), ch, ch, 3),
        }
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, z: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(p, z)?.relu();
        let h = self.conv2.forward(p, &h)?.relu();
        Ok(z.add(&h)?)
    }
}
