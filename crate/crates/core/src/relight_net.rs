//! Illumination enhancement from the denoised reflectance and the low-light
//! illumination.
//!
//! Two branches see the same 4-channel input `R̂ ‖ I`:
//!
//! * the contrast branch is a U-Net like the denoiser whose decoder levels
//!   are all resized to full resolution, concatenated and projected to 64
//!   channels;
//! * the detail branch lifts the input to 64 channels, runs two
//!   spatial-frequency-spatial blocks, then mixes the feature spectrum with
//!   the spectrum of the input image.
//!
//! Their outputs are concatenated and reduced to one sigmoid channel.

use r2r_tensor::{Conv2dOpts, Tensor, Var};

use crate::decom_net::compose_var;
use crate::denoise_net::{check_pair, UNet, SIZE_MULTIPLE, WIDTH};
use crate::error::{Error, Result};
use crate::layers::{crop_to, pad_to_multiple, Bound, Conv, Init, ParamId, ParamStore, ResBlock};
use crate::spectral_ops::{fft2_var, ifft2_var, ComplexConv, ComplexResBlock};
use crate::Float;

/// Channels emitted by each branch.
pub const BRANCH_WIDTH: usize = 64;
pub const SFSC_BLOCKS: usize = 2;
/// Channels entering the contrast projection: one full-resolution map per
/// decoder level.
pub const CEM_CONCAT_CHANNELS: usize = crate::denoise_net::DEPTH * WIDTH;

/// Branch toggles for ablation runs. A disabled branch is not evaluated and
/// contributes zeros to the fusion input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Branches {
    pub disable_cem: bool,
    pub disable_drm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cem,
    Drm,
    Fusion,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Cem => "cem.",
            Branch::Drm => "drm.",
            Branch::Fusion => "fusion.",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedResult<T> {
    pub enhanced_illumination: Tensor<T>,
    pub enhanced_image: Tensor<T>,
}

/// Spatial resblock, FFT, complex resblock, inverse FFT.
#[derive(Clone, Debug)]
pub struct SfscBlock {
    pub spatial: ResBlock,
    pub spectral: ComplexResBlock,
}

impl SfscBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str) -> Self {
        Self {
            spatial: ResBlock::new(store, init, &format!("{name}.res"), BRANCH_WIDTH),
            spectral: ComplexResBlock::new(store, init, &format!("{name}.cres"), BRANCH_WIDTH),
        }
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("sfsc", x, BRANCH_WIDTH)?;
        let h = self.spatial.forward(p, x)?;
        let z = self.spectral.forward(p, &fft2_var(&h)?)?;
        ifft2_var(&z)
    }
}

/// Joins the feature spectrum with the spectrum of a bias-free 1x1 lift of
/// the input image, projects back to 64 complex channels and refines with a
/// complex resblock.
#[derive(Clone, Debug)]
pub struct FipBlock {
    /// `64 x 4 x 1 x 1` lift of the image.
    pub lift: ParamId,
    pub project: ComplexConv,
    pub refine: ComplexResBlock,
}

impl FipBlock {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        image_ch: usize,
    ) -> Self {
        Self {
            lift: store.add(
                format!("{name}.lift.weight"),
                init.fan_in_uniform(&[BRANCH_WIDTH, image_ch, 1, 1], image_ch),
            ),
            project: ComplexConv::new(
                store,
                init,
                &format!("{name}.project"),
                2 * BRANCH_WIDTH,
                BRANCH_WIDTH,
                1,
            ),
            refine: ComplexResBlock::new(store, init, &format!("{name}.cres"), BRANCH_WIDTH),
        }
    }

    pub fn forward<T: Float>(
        &self,
        p: &Bound<T>,
        features: &Var<T>,
        image: &Var<T>,
    ) -> Result<Var<T>> {
        check_channels("fip", features, BRANCH_WIDTH)?;
        if features.shape()[2..] != image.shape()[2..] || features.shape()[0] != image.shape()[0] {
            return Err(Error::Shape(format!(
                "features {:?} and image {:?} differ in batch or spatial size",
                features.shape(),
                image.shape()
            )));
        }
        let lifted = image.conv2d(p.var(self.lift), None, Conv2dOpts::same(1))?;
        let f = fft2_var(features)?;
        let g = fft2_var(&lifted)?;
        // Stacked complex layout: all real channels, then all imaginary ones.
        let c = BRANCH_WIDTH;
        let joined = Var::concat(
            &[
                &f.narrow(1, 0, c)?,
                &g.narrow(1, 0, c)?,
                &f.narrow(1, c, c)?,
                &g.narrow(1, c, c)?,
            ],
            1,
        )?;
        let z = self.project.forward(p, &joined)?;
        let z = self.refine.forward(p, &z)?;
        ifft2_var(&z)
    }
}

#[derive(Clone, Debug)]
pub struct RelightNet<T> {
    pub params: ParamStore<T>,
    cem_body: UNet,
    cem_project: Conv,
    drm_stem: Conv,
    sfsc: Vec<SfscBlock>,
    fip: FipBlock,
    fuse_spatial: Conv,
    fuse_reduce: Conv,
    pub branches: Branches,
}

impl<T: Float> RelightNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let store = &mut params;
        let init = &mut init;
        let cem_body = UNet::new(store, init, "cem.unet", 4, false);
        let cem_project = Conv::same(
            store,
            init,
            "cem.project",
            CEM_CONCAT_CHANNELS,
            BRANCH_WIDTH,
            1,
        );
        let drm_stem = Conv::same(store, init, "drm.stem", 4, BRANCH_WIDTH, 3);
        let sfsc = (0..SFSC_BLOCKS)
            .map(|i| SfscBlock::new(store, init, &format!("drm.sfsc{i}")))
            .collect();
        let fip = FipBlock::new(store, init, "drm.fip", 4);
        let fuse_spatial = Conv::same(
            store,
            init,
            "fusion.conv3",
            2 * BRANCH_WIDTH,
            BRANCH_WIDTH,
            3,
        );
        let fuse_reduce = Conv::same(store, init, "fusion.conv1", BRANCH_WIDTH, 1, 1);
        Self {
            params,
            cem_body,
            cem_project,
            drm_stem,
            sfsc,
            fip,
            fuse_spatial,
            fuse_reduce,
            branches: Branches::default(),
        }
    }

    pub fn with_branches(mut self, branches: Branches) -> Self {
        self.branches = branches;
        self
    }

    pub fn sfsc_blocks(&self) -> &[SfscBlock] {
        &self.sfsc
    }

    pub fn fip_block(&self) -> &FipBlock {
        &self.fip
    }

    /// Parameters owned by one branch.
    pub fn branch_params(&self, branch: Branch) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(branch.prefix()))
            .collect()
    }

    /// Contrast branch on a `N x 4 x H x W` map with `H`, `W` multiples of 8.
    /// Also returns the concatenated multi-scale decoder features.
    pub fn cem_features(&self, p: &Bound<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let features = self.cem_body.forward(p, x)?;
        let mut levels = Vec::with_capacity(features.decoder.len());
        for (level, d) in features.decoder.iter().enumerate() {
            levels.push(if level == 0 {
                d.clone()
            } else {
                d.upsample_nearest(1 << level)?
            });
        }
        let concat = Var::concat(&levels.iter().collect::<Vec<_>>(), 1)?;
        let out = self.cem_project.forward(p, &concat)?;
        Ok((out, concat))
    }

    pub fn cem_forward(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.cem_features(p, x)?.0)
    }

    pub fn drm_forward(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = self.drm_stem.forward(p, x)?.relu();
        for block in &self.sfsc {
            h = block.forward(p, &h)?;
        }
        self.fip.forward(p, &h, x)
    }

    /// Graph forward: `(R̂, I)` to `(Î, Ŝ)`.
    pub fn forward(
        &self,
        p: &Bound<T>,
        reflectance: &Var<T>,
        illumination: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        check_pair(reflectance.value(), illumination.value())?;
        let x = Var::concat(&[reflectance, illumination], 1)?;
        let (x, orig) = pad_to_multiple(&x, SIZE_MULTIPLE)?;
        let (n, _, h, w) = x.value().dims4()?;
        let zeros = || Var::constant(Tensor::zeros(&[n, BRANCH_WIDTH, h, w]));
        let cem = if self.branches.disable_cem {
            zeros()
        } else {
            self.cem_forward(p, &x)?
        };
        let drm = if self.branches.disable_drm {
            zeros()
        } else {
            self.drm_forward(p, &x)?
        };
        let fused = self
            .fuse_spatial
            .forward(p, &Var::concat(&[&cem, &drm], 1)?)?
            .relu();
        let illum = self.fuse_reduce.forward(p, &fused)?.sigmoid();
        let illum = crop_to(&illum, orig)?;
        let image = compose_var(reflectance, &illum)?;
        Ok((illum, image))
    }

    pub fn relight(
        &self,
        reflectance: &Tensor<T>,
        illumination: &Tensor<T>,
    ) -> Result<EnhancedResult<T>> {
        let (i, s) = self.forward(
            &self.params.bind_frozen(),
            &Var::constant(reflectance.clone()),
            &Var::constant(illumination.clone()),
        )?;
        Ok(EnhancedResult {
            enhanced_illumination: i.value().clone(),
            enhanced_image: s.value().clone(),
        })
    }
}

fn check_channels<T: Float>(op: &'static str, x: &Var<T>, expected: usize) -> Result<()> {
    let got = x.shape().get(1).copied().unwrap_or(0);
    if x.shape().len() != 4 || got != expected {
        return Err(Error::ChannelMismatch { op, expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decom_net::compose;
    use crate::spectral_ops::{complex_resblock, fft2, ifft2};
    use r2r_tensor::Tape;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    fn zero_weights(net: &mut RelightNet<f64>, ids: &[ParamId]) {
        for &id in ids {
            let t = net.params.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    fn frozen(x: &Tensor<f64>) -> Var<f64> {
        Var::constant(x.clone())
    }

    #[test]
    fn cem_shapes_and_concat_width() {
        let net = RelightNet::<f32>::new(0);
        let x = Var::constant(Tensor::full(&[1, 4, 16, 24], 0.5));
        let (out, concat) = net.cem_features(&net.params.bind_frozen(), &x).unwrap();
        assert_eq!(out.shape(), &[1, 64, 16, 24]);
        assert_eq!(concat.shape(), &[1, 384, 16, 24]);
        assert_eq!(CEM_CONCAT_CHANNELS, 384);
    }

    #[test]
    fn cem_zero_input_zero_bias() {
        let mut net = RelightNet::<f64>::new(0);
        let biases: Vec<_> = net
            .branch_params(Branch::Cem)
            .into_iter()
            .filter(|&id| net.params.name(id).ends_with(".bias"))
            .collect();
        zero_weights(&mut net, &biases);
        let out = net
            .cem_forward(
                &net.params.bind_frozen(),
                &frozen(&Tensor::zeros(&[1, 4, 8, 8])),
            )
            .unwrap();
        assert_eq!(out.value(), &Tensor::zeros(&[1, 64, 8, 8]));
    }

    #[test]
    fn sfsc_with_zero_spectral_weights_is_spatial_resblock() {
        let mut net = RelightNet::<f64>::new(1);
        let block = net.sfsc_blocks()[0].clone();
        let ids = [
            block.spectral.conv1.a,
            block.spectral.conv1.b,
            block.spectral.conv2.a,
            block.spectral.conv2.b,
        ];
        zero_weights(&mut net, &ids);
        let p = net.params.bind_frozen();
        let x = frozen(&random(&[1, 64, 6, 10], 2));
        let out = block.forward(&p, &x).unwrap();
        let spatial = block.spatial.forward(&p, &x).unwrap();
        assert_eq!(out.shape(), &[1, 64, 6, 10]);
        assert!(out.value().max_abs_diff(spatial.value()) < 1e-12);
    }

    #[test]
    fn sfsc_matches_explicit_composition() {
        let net = RelightNet::<f64>::new(2);
        let block = &net.sfsc_blocks()[1];
        let p = net.params.bind_frozen();
        let x = random(&[1, 64, 4, 6], 3);
        let out = block.forward(&p, &frozen(&x)).unwrap();

        let h = block
            .spatial
            .forward(&p, &frozen(&x))
            .unwrap()
            .value()
            .clone();
        let spectrum = fft2(&h.reshape(&[64, 4, 6]).unwrap()).unwrap();
        let w1 = block.spectral.conv1.weights(&net.params);
        let w2 = block.spectral.conv2.weights(&net.params);
        let z = complex_resblock(&spectrum, &w1, &w2).unwrap();
        let back = ifft2(&z, false).unwrap().reshape(&[1, 64, 4, 6]).unwrap();
        assert!(out.value().max_abs_diff(&back) < 1e-10);
    }

    #[test]
    fn fip_zero_inputs_give_zero() {
        let net = RelightNet::<f64>::new(3);
        let out = net
            .fip_block()
            .forward(
                &net.params.bind_frozen(),
                &frozen(&Tensor::zeros(&[1, 64, 4, 4])),
                &frozen(&Tensor::zeros(&[1, 4, 4, 4])),
            )
            .unwrap();
        assert_eq!(out.value(), &Tensor::zeros(&[1, 64, 4, 4]));
    }

    #[test]
    fn fip_block_identity_passes_features() {
        let mut net = RelightNet::<f64>::new(4);
        let fip = net.fip_block().clone();
        let mut a = Tensor::zeros(&[64, 128, 1, 1]);
        for c in 0..64 {
            a.data_mut()[c * 128 + c] = 1.0;
        }
        *net.params.get_mut(fip.project.a) = a;
        let ids = [
            fip.project.b,
            fip.refine.conv1.a,
            fip.refine.conv1.b,
            fip.refine.conv2.a,
            fip.refine.conv2.b,
        ];
        zero_weights(&mut net, &ids);
        let features = random(&[1, 64, 6, 8], 5);
        let image = random(&[1, 4, 6, 8], 6);
        let out = fip
            .forward(
                &net.params.bind_frozen(),
                &frozen(&features),
                &frozen(&image),
            )
            .unwrap();
        assert!(out.value().max_abs_diff(&features) < 1e-6);
    }

    #[test]
    fn fip_rejects_size_mismatch() {
        let net = RelightNet::<f64>::new(3);
        let r = net.fip_block().forward(
            &net.params.bind_frozen(),
            &frozen(&Tensor::zeros(&[1, 64, 4, 4])),
            &frozen(&Tensor::zeros(&[1, 4, 4, 6])),
        );
        assert!(r.is_err());
    }

    #[test]
    fn relight_shapes_range_and_composition() {
        let net = RelightNet::<f32>::new(5);
        let r = random(&[1, 3, 20, 12], 7).cast::<f32>();
        let i = random(&[1, 1, 20, 12], 8).cast::<f32>();
        let out = net.relight(&r, &i).unwrap();
        assert_eq!(out.enhanced_illumination.shape(), &[1, 1, 20, 12]);
        assert_eq!(out.enhanced_image.shape(), &[1, 3, 20, 12]);
        assert!(out
            .enhanced_illumination
            .data()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(
            out.enhanced_image,
            compose(&r, &out.enhanced_illumination).unwrap()
        );
    }

    #[test]
    fn disabled_branch_weights_do_not_matter() {
        let r = random(&[1, 3, 8, 8], 9);
        let i = random(&[1, 1, 8, 8], 10);
        for (branches, off) in [
            (
                Branches {
                    disable_cem: true,
                    disable_drm: false,
                },
                Branch::Cem,
            ),
            (
                Branches {
                    disable_cem: false,
                    disable_drm: true,
                },
                Branch::Drm,
            ),
        ] {
            let mut net = RelightNet::<f64>::new(6).with_branches(branches);
            let before = net.relight(&r, &i).unwrap();
            for id in net.branch_params(off) {
                let t = net.params.get_mut(id);
                *t = t.map(|v| v * -3.0 + 0.5);
            }
            let after = net.relight(&r, &i).unwrap();
            assert_eq!(before, after);

            let tape = Tape::new();
            let p = net.params.bind(&tape);
            let (_, s) = net.forward(&p, &frozen(&r), &frozen(&i)).unwrap();
            let grads = s.mean().backward().unwrap();
            for id in net.branch_params(off) {
                assert!(grads.get(p.var(id)).is_none_or(|g| g.max_abs() == 0.0));
            }
        }
    }
}
