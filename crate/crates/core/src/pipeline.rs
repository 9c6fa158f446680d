//! End-to-end enhancement with trained networks.

use std::path::Path;

use r2r_tensor::Tensor;

use crate::data_io::Image;
use crate::decom_net::DecomNet;
use crate::denoise_net::DenoiseNet;
use crate::error::{Error, Result};
use crate::relight_net::RelightNet;
use crate::trainer::{
    decom_from_checkpoint, denoise_from_checkpoint, load_checkpoint, relight_from_checkpoint,
    StageCheckpoint,
};

/// Every intermediate map of one enhancement, each `3 x H x W` or
/// `1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhancement {
    pub reflectance: Tensor<f32>,
    pub illumination: Tensor<f32>,
    pub denoised_reflectance: Tensor<f32>,
    pub enhanced_illumination: Tensor<f32>,
    pub enhanced: Image,
}

pub struct Pipeline {
    pub decom: DecomNet<f32>,
    pub denoise: DenoiseNet<f32>,
    pub relight: RelightNet<f32>,
}

fn unbatch(t: Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape()[1..].to_vec();
    Ok(t.reshape(&s)?)
}

impl Pipeline {
    pub fn from_checkpoints(
        decom: &StageCheckpoint,
        denoise: &StageCheckpoint,
        relight: &StageCheckpoint,
    ) -> Result<Self> {
        Ok(Self {
            decom: decom_from_checkpoint(decom)?,
            denoise: denoise_from_checkpoint(denoise)?,
            relight: relight_from_checkpoint(relight)?,
        })
    }

    pub fn load(decom: &Path, denoise: &Path, relight: &Path) -> Result<Self> {
        Self::from_checkpoints(
            &load_checkpoint(decom)?,
            &load_checkpoint(denoise)?,
            &load_checkpoint(relight)?,
        )
    }

    /// Decompose, denoise the reflectance, relight and recompose a
    /// `3 x H x W` image of any size.
    pub fn enhance(&self, image: &Image) -> Result<Enhancement> {
        let (h, w) = match *image.shape() {
            [3, h, w] => (h, w),
            ref s => {
                return Err(Error::Shape(format!(
                    "expected a 3 x H x W image, got {s:?}"
                )))
            }
        };
        let x = image.clone().reshape(&[1, 3, h, w])?;
        let d = self.decom.decompose(&x)?;
        let r_hat = self.denoise.denoise(&d.reflectance, &d.illumination)?;
        let out = self.relight.relight(&r_hat, &d.illumination)?;
        Ok(Enhancement {
            reflectance: unbatch(d.reflectance)?,
            illumination: unbatch(d.illumination)?,
            denoised_reflectance: unbatch(r_hat)?,
            enhanced_illumination: unbatch(out.enhanced_illumination)?,
            enhanced: unbatch(out.enhanced_image)?,
        })
    }
}
