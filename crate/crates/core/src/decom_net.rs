//! Retinex decomposition network.
//!
//! One set of weights maps any RGB image to a 3-channel reflectance and a
//! 1-channel illumination; the low- and normal-light images of a pair pass
//! through the same instance during training.

use r2r_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{Bound, Conv, Init, ParamStore, ResidualModule};
use crate::Float;

pub const DEFAULT_RM_BLOCKS: usize = 3;
pub const FEATURES: usize = 64;
pub const RM_WIDTHS: [usize; 5] = [64, 128, 256, 128, 64];

/// Reflectance `N x 3 x H x W` and illumination `N x 1 x H x W`, both in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub reflectance: Tensor<T>,
    pub illumination: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DecomNet<T> {
    pub params: ParamStore<T>,
    stem: Conv,
    blocks: Vec<ResidualModule>,
    /// 64x3x3 convolution following each residual module.
    inter: Vec<Conv>,
    head: Conv,
}

impl<T: Float> DecomNet<T> {
    pub fn new(seed: u64) -> Self {
        Self::with_blocks(DEFAULT_RM_BLOCKS, seed)
    }

    pub fn with_blocks(num_blocks: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let stem = Conv::same(&mut params, &mut init, "stem", 3, FEATURES, 3);
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut inter = Vec::with_capacity(num_blocks);
        for i in 0..num_blocks {
            blocks.push(ResidualModule::new(
                &mut params,
                &mut init,
                &format!("rm{i}"),
                FEATURES,
                RM_WIDTHS,
            ));
            inter.push(Conv::same(
                &mut params,
                &mut init,
                &format!("post{i}"),
                FEATURES,
                FEATURES,
                3,
            ));
        }
        let head = Conv::same(&mut params, &mut init, "head", FEATURES, 4, 1);
        Self {
            params,
            stem,
            blocks,
            inter,
            head,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[ResidualModule] {
        &self.blocks
    }

    /// Graph forward: `N x 3 x H x W` image to `(R, I)`.
    pub fn forward(&self, p: &Bound<T>, image: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_rgb(image.value())?;
        let mut h = self.stem.forward(p, image)?.relu();
        for (rm, post) in self.blocks.iter().zip(&self.inter) {
            h = rm.forward(p, &h)?;
            h = post.forward(p, &h)?.relu();
        }
        let out = self.head.forward(p, &h)?.sigmoid();
        Ok((out.narrow(1, 0, 3)?, out.narrow(1, 3, 1)?))
    }

    pub fn decompose(&self, image: &Tensor<T>) -> Result<Decomposition<T>> {
        let (r, i) = self.forward(&self.params.bind_frozen(), &Var::constant(image.clone()))?;
        Ok(Decomposition {
            reflectance: r.value().clone(),
            illumination: i.value().clone(),
        })
    }
}

fn check_rgb<T: Float>(x: &Tensor<T>) -> Result<()> {
    match x.shape() {
        [_, 3, _, _] => Ok(()),
        s => Err(Error::Shape(format!(
            "expected N x 3 x H x W image, got {s:?}"
        ))),
    }
}

/// Runs one residual module on a plain tensor.
pub fn residual_module_forward<T: Float>(
    x: &Tensor<T>,
    module: &ResidualModule,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    Ok(module
        .forward(&params.bind_frozen(), &Var::constant(x.clone()))?
        .value()
        .clone())
}

/// Retinex composition `R ∘ I`, with the single illumination channel
/// broadcast across the reflectance channels.
pub fn compose<T: Float>(reflectance: &Tensor<T>, illumination: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(compose_var(
        &Var::constant(reflectance.clone()),
        &Var::constant(illumination.clone()),
    )?
    .value()
    .clone())
}

pub fn compose_var<T: Float>(reflectance: &Var<T>, illumination: &Var<T>) -> Result<Var<T>> {
    reflectance
        .mul_channel_broadcast(illumination)
        .map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn compose_examples() {
        let r = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let i = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert_eq!(compose(&r, &i).unwrap(), Tensor::full(&[1, 3, 2, 2], 0.5));
        assert_eq!(
            compose(&r, &Tensor::zeros(&[1, 1, 2, 2])).unwrap(),
            Tensor::zeros(&[1, 3, 2, 2])
        );
        let out = compose(
            &t(&[1, 3, 1, 1], &[0.2, 0.4, 0.8]),
            &t(&[1, 1, 1, 1], &[0.5]),
        )
        .unwrap();
        assert!(out.max_abs_diff(&t(&[1, 3, 1, 1], &[0.1, 0.2, 0.4])) < 1e-15);
    }

    #[test]
    fn compose_rejects_mismatched_dims() {
        let r = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        assert!(compose(&r, &Tensor::ones(&[1, 1, 2, 3])).is_err());
        assert!(compose(&r, &Tensor::ones(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn zero_module_gives_zero() {
        let mut net = DecomNet::<f64>::with_blocks(1, 0);
        for t in net.params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::zeros(&[1, 64, 4, 4]);
        let out = residual_module_forward(&x, &net.blocks()[0], &net.params).unwrap();
        assert_eq!(out, Tensor::zeros(&[1, 64, 4, 4]));
    }

    #[test]
    fn shortcut_only_module() {
        // Zero chain weights and an identity shortcut leave only shortcut(x) = x.
        let mut net = DecomNet::<f64>::with_blocks(1, 0);
        let rm = net.blocks()[0].clone();
        for conv in &rm.chain {
            let w = net.params.get_mut(conv.weight);
            *w = Tensor::zeros(w.shape());
        }
        let mut eye = Tensor::zeros(&[64, 64, 1, 1]);
        for c in 0..64 {
            eye.data_mut()[c * 64 + c] = 1.0;
        }
        *net.params.get_mut(rm.shortcut.weight) = eye;
        let x = Tensor::from_fn(&[1, 64, 2, 2], |i| (i as f64 * 0.37).sin());
        let out = residual_module_forward(&x, &rm, &net.params).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn residual_module_rejects_wrong_channels() {
        let net = DecomNet::<f32>::with_blocks(1, 0);
        let x = Tensor::zeros(&[1, 32, 4, 4]);
        assert!(matches!(
            residual_module_forward(&x, &net.blocks()[0], &net.params),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn decompose_shapes_and_range() {
        let net = DecomNet::<f32>::new(3);
        let x = Tensor::from_fn(&[1, 3, 16, 12], |i| ((i * 7919) % 101) as f32 / 100.0);
        let d = net.decompose(&x).unwrap();
        assert_eq!(d.reflectance.shape(), &[1, 3, 16, 12]);
        assert_eq!(d.illumination.shape(), &[1, 1, 16, 12]);
        for &v in d.reflectance.data().iter().chain(d.illumination.data()) {
            assert!(v > 0.0 && v < 1.0);
        }
        assert!(net.decompose(&Tensor::zeros(&[1, 4, 8, 8])).is_err());
    }

    #[test]
    fn parameter_count_depends_only_on_block_count() {
        let a = DecomNet::<f32>::with_blocks(3, 1).params.num_scalars();
        let b = DecomNet::<f32>::with_blocks(3, 2).params.num_scalars();
        let c = DecomNet::<f32>::with_blocks(2, 1).params.num_scalars();
        assert_eq!(a, b);
        assert!(c < a);
    }
}
