//! Parameter storage and the convolutional building blocks shared by the
//! three sub-networks.

use std::rc::Rc;

use r2r_tensor::{Conv2dOpts, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replaces every tensor with the equally named entry of `other`,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidCheckpoint(format!(
                "parameter names differ ({} stored vs {} expected)",
                other.len(),
                self.len()
            )));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::InvalidCheckpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    theirs.shape(),
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Leaves on `tape`; their gradients are reported by `backward`.
    pub fn bind(&self, tape: &Rc<Tape<T>>) -> Bound<T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Untracked values for inference.
    pub fn bind_frozen(&self) -> Bound<T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| Var::constant(t.clone()))
                .collect(),
        }
    }
}

/// Parameters of one [`ParamStore`] materialized as graph values.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Deterministic weight initializer: uniform on `±1/sqrt(fan_in)`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn fan_in_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.rng)))
    }
}

/// Coarse layer classification used for structural assertions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        dilation: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
}

impl LayerKind {
    /// Side of the square input window seen by one output sample.
    pub fn receptive_field(&self) -> usize {
        match *self {
            LayerKind::Conv {
                kernel, dilation, ..
            } => dilation * (kernel - 1) + 1,
            LayerKind::UpsampleNearest { .. } => 1,
        }
    }
}

/// Biased 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub opts: Conv2dOpts,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        opts: Conv2dOpts,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            opts,
        }
    }

    /// Size-preserving `kernel x kernel` convolution.
    pub fn same<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        Self::new(
            store,
            init,
            name,
            in_ch,
            out_ch,
            kernel,
            Conv2dOpts::same(kernel),
        )
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let channels = x.shape().get(1).copied().unwrap_or(0);
        if channels != self.in_ch {
            return Err(Error::ChannelMismatch {
                op: "conv",
                expected: self.in_ch,
                got: channels,
            });
        }
        Ok(x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.opts)?)
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::Conv {
            kernel: self.kernel,
            stride: self.opts.stride,
            dilation: self.opts.dilation,
        }
    }
}

/// Five-convolution residual block with kernel sizes `{1, 3, 3, 3, 1}` and a
/// 1x1 shortcut projection. ReLU follows every chain convolution; the
/// residual sum itself is not activated.
#[derive(Clone, Debug)]
pub struct ResidualModule {
    pub chain: Vec<Conv>,
    pub shortcut: Conv,
}

pub const RM_KERNELS: [usize; 5] = [1, 3, 3, 3, 1];

impl ResidualModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        widths: [usize; 5],
    ) -> Self {
        let mut chain = Vec::with_capacity(5);
        let mut c = in_ch;
        for (i, (&k, &w)) in RM_KERNELS.iter().zip(&widths).enumerate() {
            chain.push(Conv::same(store, init, &format!("{name}.conv{i}"), c, w, k));
            c = w;
        }
        let shortcut = Conv::same(
            store,
            init,
            &format!("{name}.shortcut"),
            in_ch,
            widths[4],
            1,
        );
        Self { chain, shortcut }
    }

    pub fn in_channels(&self) -> usize {
        self.shortcut.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.shortcut.out_ch
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for conv in &self.chain {
            h = conv.forward(p, &h)?.relu();
        }
        Ok(h.add(&self.shortcut.forward(p, x)?)?)
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        self.chain
            .iter()
            .chain(std::iter::once(&self.shortcut))
            .map(Conv::kind)
            .collect()
    }
}

/// Two 3x3 convolutions with a ReLU in between, added back onto the input.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, ch: usize) -> Self {
        Self {
            conv1: Conv::same(store, init, &format!("{name}.conv1"), ch, ch, 3),
            conv2: Conv::same(store, init, &format!("{name}.conv2"), ch, ch, 3),
        }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(p, x)?.relu();
        Ok(x.add(&self.conv2.forward(p, &h)?)?)
    }
}

/// Reflect-pads an `N x C x H x W` map so both spatial dims are multiples of
/// `multiple`. Returns the padded map and the original `(H, W)`.
pub fn pad_to_multiple<T: Real>(x: &Var<T>, multiple: usize) -> Result<(Var<T>, (usize, usize))> {
    let (_, _, h, w) = x.value().dims4()?;
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return Ok((x.clone(), (h, w)));
    }
    Ok((x.pad_reflect(0, ph, 0, pw)?, (h, w)))
}

/// Crops the top-left `height x width` window when `x` is larger.
pub fn crop_to<T: Real>(x: &Var<T>, (height, width): (usize, usize)) -> Result<Var<T>> {
    let (_, _, h, w) = x.value().dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    Ok(x.crop(0, 0, height, width)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_module_widths_and_kernels() {
        let mut store = ParamStore::<f32>::new();
        let rm = ResidualModule::new(
            &mut store,
            &mut Init::new(0),
            "rm",
            64,
            [64, 128, 256, 128, 64],
        );
        let kernels: Vec<usize> = rm.chain.iter().map(|c| c.kernel).collect();
        assert_eq!(kernels, vec![1, 3, 3, 3, 1]);
        let widths: Vec<usize> = rm.chain.iter().map(|c| c.out_ch).collect();
        assert_eq!(widths, vec![64, 128, 256, 128, 64]);
        assert_eq!((rm.shortcut.kernel, rm.shortcut.out_ch), (1, 64));
        // 5 chain convs + shortcut, each with weight and bias.
        assert_eq!(store.len(), 12);
    }

    #[test]
    fn init_is_deterministic() {
        let a: Tensor<f32> = Init::new(5).fan_in_uniform(&[4, 3, 3, 3], 27);
        let b: Tensor<f32> = Init::new(5).fan_in_uniform(&[4, 3, 3, 3], 27);
        assert_eq!(a, b);
        let c: Tensor<f32> = Init::new(6).fan_in_uniform(&[4, 3, 3, 3], 27);
        assert_ne!(a, c);
    }

    #[test]
    fn load_from_rejects_shape_change() {
        let mut a = ParamStore::<f32>::new();
        a.add("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::<f32>::new();
        b.add("w", Tensor::zeros(&[3]));
        assert!(a.load_from(&b).is_err());
    }

    #[test]
    fn pad_and_crop_restore_size() {
        let x = Var::constant(Tensor::<f32>::from_fn(&[1, 2, 10, 13], |i| i as f32));
        let (p, orig) = pad_to_multiple(&x, 8).unwrap();
        assert_eq!(p.shape(), &[1, 2, 16, 16]);
        assert_eq!(crop_to(&p, orig).unwrap().value(), x.value());
    }
}
