//! Reflectance denoising with a deep-narrow residual U-Net.
//!
//! The U-Net keeps 128 channels at every level, downsamples with 2x2
//! stride-2 convolutions instead of pooling, upsamples with nearest-neighbour
//! resize followed by a 3x3 convolution, and concatenates encoder features
//! into the decoder. The first two layers are dilated 3x3 convolutions.

use r2r_tensor::{Conv2dOpts, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{
    crop_to, pad_to_multiple, Bound, Conv, Init, LayerKind, ParamStore, ResidualModule,
};
use crate::Float;

pub const WIDTH: usize = 128;
/// Number of stride-2 levels.
pub const DEPTH: usize = 3;
pub const ENTRY_DILATION: usize = 2;
/// Spatial dims must be multiples of this (`2^DEPTH`).
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;

const RM_WIDTHS: [usize; 5] = [WIDTH; 5];

/// Encoder/decoder body shared by the denoiser and the relighting CEM.
#[derive(Clone, Debug)]
pub struct UNet {
    entry: [Conv; 2],
    /// Levels `0..=DEPTH`; the last one is the bottleneck.
    encoder: Vec<ResidualModule>,
    down: Vec<Conv>,
    up: Vec<Conv>,
    /// `decoder[l]` produces the level-`l` output.
    decoder: Vec<ResidualModule>,
}

/// Per-level features of one U-Net pass.
pub struct UNetFeatures<T> {
    /// Encoder outputs for levels `0..=DEPTH`.
    pub encoder: Vec<Var<T>>,
    /// Decoder outputs for levels `0..DEPTH`; `decoder[0]` is full resolution.
    pub decoder: Vec<Var<T>>,
}

impl UNet {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        dilated_entry: bool,
    ) -> Self {
        let dilation = if dilated_entry { ENTRY_DILATION } else { 1 };
        let opts = Conv2dOpts::dilated_same(3, dilation);
        let entry = [
            Conv::new(
                store,
                init,
                &format!("{name}.entry0"),
                in_ch,
                WIDTH,
                3,
                opts,
            ),
            Conv::new(
                store,
                init,
                &format!("{name}.entry1"),
                WIDTH,
                WIDTH,
                3,
                opts,
            ),
        ];
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for level in 0..=DEPTH {
            if level > 0 {
                down.push(Conv::new(
                    store,
                    init,
                    &format!("{name}.down{level}"),
                    WIDTH,
                    WIDTH,
                    2,
                    Conv2dOpts::strided(2),
                ));
            }
            encoder.push(ResidualModule::new(
                store,
                init,
                &format!("{name}.enc{level}"),
                WIDTH,
                RM_WIDTHS,
            ));
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for level in 0..DEPTH {
            up.push(Conv::same(
                store,
                init,
                &format!("{name}.up{level}"),
                WIDTH,
                WIDTH,
                3,
            ));
            decoder.push(ResidualModule::new(
                store,
                init,
                &format!("{name}.dec{level}"),
                2 * WIDTH,
                RM_WIDTHS,
            ));
        }
        Self {
            entry,
            encoder,
            down,
            up,
            decoder,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.entry[0].in_ch
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<UNetFeatures<T>> {
        let (_, _, h, w) = x.value().dims4()?;
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::NonDivisibleDims {
                height: h,
                width: w,
                multiple: SIZE_MULTIPLE,
            });
        }
        let mut f = self.entry[0].forward(p, x)?.relu();
        f = self.entry[1].forward(p, &f)?.relu();
        let mut encoder = Vec::with_capacity(DEPTH + 1);
        for level in 0..=DEPTH {
            if level > 0 {
                f = self.down[level - 1].forward(p, &f)?.relu();
            }
            f = self.encoder[level].forward(p, &f)?;
            encoder.push(f.clone());
        }
        let mut decoder: Vec<Option<Var<T>>> = vec![None; DEPTH];
        for level in (0..DEPTH).rev() {
            let up = self.up[level].forward(p, &f.upsample_nearest(2)?)?.relu();
            let skip = &encoder[level];
            if up.shape() != skip.shape() {
                return Err(Error::Shape(format!(
                    "decoder level {level} gets {:?} but skip is {:?}",
                    up.shape(),
                    skip.shape()
                )));
            }
            f = self.decoder[level].forward(p, &Var::concat(&[&up, skip], 1)?)?;
            decoder[level] = Some(f.clone());
        }
        Ok(UNetFeatures {
            encoder,
            decoder: decoder
                .into_iter()
                .map(|d| d.expect("every level decoded"))
                .collect(),
        })
    }

    /// Every layer in execution order.
    pub fn layers(&self) -> Vec<LayerKind> {
        let mut layers: Vec<LayerKind> = self.entry.iter().map(Conv::kind).collect();
        for level in 0..=DEPTH {
            if level > 0 {
                layers.push(self.down[level - 1].kind());
            }
            layers.extend(self.encoder[level].layers());
        }
        for level in (0..DEPTH).rev() {
            layers.push(LayerKind::UpsampleNearest { factor: 2 });
            layers.push(self.up[level].kind());
            layers.extend(self.decoder[level].layers());
        }
        layers
    }

    pub fn entry_layers(&self) -> [LayerKind; 2] {
        [self.entry[0].kind(), self.entry[1].kind()]
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseNet<T> {
    pub params: ParamStore<T>,
    body: UNet,
    exit: Conv,
    /// Reflect-pad inputs to a multiple of 8 and crop the output back.
    pub auto_pad: bool,
}

impl<T: Float> DenoiseNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let body = UNet::new(&mut params, &mut init, "unet", 4, true);
        let exit = Conv::same(&mut params, &mut init, "exit", WIDTH, 3, 1);
        Self {
            params,
            body,
            exit,
            auto_pad: true,
        }
    }

    pub fn body(&self) -> &UNet {
        &self.body
    }

    /// Graph forward: `(R, I)` to the denoised reflectance.
    pub fn forward(
        &self,
        p: &Bound<T>,
        reflectance: &Var<T>,
        illumination: &Var<T>,
    ) -> Result<Var<T>> {
        check_pair(reflectance.value(), illumination.value())?;
        let x = Var::concat(&[reflectance, illumination], 1)?;
        let (x, orig) = if self.auto_pad {
            pad_to_multiple(&x, SIZE_MULTIPLE)?
        } else {
            let (_, _, h, w) = x.value().dims4()?;
            (x, (h, w))
        };
        let features = self.body.forward(p, &x)?;
        let out = self.exit.forward(p, &features.decoder[0])?.sigmoid();
        crop_to(&out, orig)
    }

    pub fn denoise(&self, reflectance: &Tensor<T>, illumination: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(
            &self.params.bind_frozen(),
            &Var::constant(reflectance.clone()),
            &Var::constant(illumination.clone()),
        )?;
        Ok(out.value().clone())
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        let mut layers = self.body.layers();
        layers.push(self.exit.kind());
        layers
    }
}

pub(crate) fn check_pair<T: Float>(
    reflectance: &Tensor<T>,
    illumination: &Tensor<T>,
) -> Result<()> {
    match (reflectance.shape(), illumination.shape()) {
        ([n, 3, h, w], [n2, 1, h2, w2]) if (n, h, w) == (n2, h2, w2) => Ok(()),
        (r, i) => Err(Error::Shape(format!(
            "expected N x 3 x H x W reflectance and N x 1 x H x W illumination, got {r:?} and {i:?}"
        ))),
    }
}

/// 2x2 stride-2 convolution halving both spatial dims.
pub fn strided_downsample<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDims {
            height: h,
            width: w,
        });
    }
    if weight.shape()[2..] != [2, 2] {
        return Err(Error::Shape(format!(
            "downsampling filter must be 2x2, got {:?}",
            weight.shape()
        )));
    }
    Ok(r2r_tensor::conv2d_forward(
        x,
        weight,
        bias,
        Conv2dOpts::strided(2),
    )?)
}
