//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::real::{gemm, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOpts {
    /// Stride 1, zero padding that preserves spatial size for an odd `kernel`.
    pub fn same(kernel: usize) -> Self {
        Self::dilated_same(kernel, 1)
    }

    pub fn dilated_same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: Conv2dOpts,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            opts,
        } = *self;
        let (s, p, d) = (
            opts.stride as isize,
            opts.padding as isize,
            opts.dilation as isize,
        );
        let mut row = 0;
        for c in 0..cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ki as isize * d;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kj as isize * d;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            opts,
        } = *self;
        let (s, p, d) = (
            opts.stride as isize,
            opts.padding as isize,
            opts.dilation as isize,
        );
        let mut row = 0;
        for c in 0..cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ki as isize * d;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * s - p + kj as isize * d;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn geometry<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, opts: Conv2dOpts) -> Result<Geometry> {
    let (_, cin, h, w) = x.dims4()?;
    let [_, wcin, kh, kw] = weight.shape()[..] else {
        return Err(TensorError::Rank {
            op: "conv2d weight",
            expected: 4,
            shape: weight.shape().to_vec(),
        });
    };
    if wcin != cin {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d",
            expected: wcin,
            got: cin,
        });
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(TensorError::Invalid(
            "conv2d stride and dilation must be >= 1".into(),
        ));
    }
    match (opts.output_size(h, kh), opts.output_size(w, kw)) {
        (Some(oh), Some(ow)) => Ok(Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            opts,
        }),
        _ => Err(TensorError::Invalid(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with {opts:?}"
        ))),
    }
}

/// Forward cross-correlation of an `N x Cin x H x W` input with a
/// `Cout x Cin x kh x kw` filter bank.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOpts,
) -> Result<Tensor<T>> {
    let g = geometry(x, weight, opts)?;
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (in_plane, out_plane) = (g.cin * g.h * g.w, g.oh * g.ow);
    let mut out = vec![T::zero(); n * cout * out_plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * out_plane]
    };
    for i in 0..n {
        let xi = &x.data()[i * in_plane..(i + 1) * in_plane];
        let oi = &mut out[i * cout * out_plane..(i + 1) * cout * out_plane];
        let cols_ref: &[T] = if g.is_pointwise() {
            xi
        } else {
            g.im2col(xi, &mut cols);
            &cols
        };
        gemm(
            cout,
            g.rows(),
            out_plane,
            weight.data(),
            false,
            cols_ref,
            false,
            oi,
            false,
        );
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut oi[co * out_plane..(co + 1) * out_plane] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, g.oh, g.ow], out)
}

/// Gradients of a convolution w.r.t. input, weight and bias, each computed
/// only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    opts: Conv2dOpts,
    needs: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = geometry(x, weight, opts).expect("validated in forward");
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let (in_plane, out_plane) = (g.cin * g.h * g.w, g.oh * g.ow);
    let rows = g.rows();
    let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = needs[1].then(|| Tensor::zeros(weight.shape()));
    let db = needs[2].then(|| {
        let mut db = Tensor::zeros(&[cout]);
        for i in 0..n {
            for co in 0..cout {
                let s = (i * cout + co) * out_plane;
                db.data_mut()[co] += grad_out.data()[s..s + out_plane].iter().copied().sum();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * out_plane }];
    let mut dcols = vec![
        T::zero();
        if pointwise || dx.is_none() {
            0
        } else {
            rows * out_plane
        }
    ];
    for i in 0..n {
        let xi = &x.data()[i * in_plane..(i + 1) * in_plane];
        let gi = &grad_out.data()[i * cout * out_plane..(i + 1) * cout * out_plane];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if pointwise {
                xi
            } else {
                g.im2col(xi, &mut cols);
                &cols
            };
            gemm(
                cout,
                out_plane,
                rows,
                gi,
                false,
                cols_ref,
                true,
                dw.data_mut(),
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_plane..(i + 1) * in_plane];
            if pointwise {
                gemm(
                    rows,
                    cout,
                    out_plane,
                    weight.data(),
                    true,
                    gi,
                    false,
                    dxi,
                    false,
                );
            } else {
                gemm(
                    rows,
                    cout,
                    out_plane,
                    weight.data(),
                    true,
                    gi,
                    false,
                    &mut dcols,
                    false,
                );
                g.col2im(&dcols, dxi);
            }
        }
    }
    (dx, dw, db)
}

impl<T: Real> Var<T> {
    /// Differentiable 2-D convolution (cross-correlation) with optional bias.
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        opts: Conv2dOpts,
    ) -> Result<Var<T>> {
        let value = conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()), opts)?;
        let x = self.shared_value();
        let w = weight.shared_value();
        let backward = Box::new(move |g: &Tensor<T>, needs: &[bool]| {
            let bias_need = needs.get(2).copied().unwrap_or(false);
            let (dx, dw, db) = conv2d_backward(&x, &w, g, opts, [needs[0], needs[1], bias_need]);
            let mut out = vec![dx, dw];
            if needs.len() == 3 {
                out.push(db);
            }
            out
        });
        Ok(match bias {
            Some(b) => Var::from_op(&[self, weight, b], value, backward),
            None => Var::from_op(&[self, weight], value, backward),
        })
    }
}
