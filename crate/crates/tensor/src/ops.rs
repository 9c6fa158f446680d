//! Differentiable elementwise, reduction and layout operations on [`Var`].

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

fn unary<T: Real>(
    x: &Var<T>,
    value: Tensor<T>,
    backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
) -> Var<T> {
    Var::from_op(&[x], value, Box::new(move |g, _| vec![Some(backward(g))]))
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "add", |a, b| a + b)?;
        Ok(Var::from_op(
            &[self, other],
            value,
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "sub", |a, b| a - b)?;
        Ok(Var::from_op(
            &[self, other],
            value,
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "mul", |a, b| a * b)?;
        let a = self.shared_value();
        let b = other.shared_value();
        Ok(Var::from_op(
            &[self, other],
            value,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, "mul", |g, b| g * b).unwrap()),
                    needs[1].then(|| g.zip_map(&a, "mul", |g, a| g * a).unwrap()),
                ]
            }),
        ))
    }

    /// `self[n, c, y, x] * other[n, 0, y, x]`: multiplies every channel of an
    /// `N x C x H x W` map by a single-channel `N x 1 x H x W` map.
    pub fn mul_channel_broadcast(&self, other: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let (on, oc, oh, ow) = other.value().dims4()?;
        if on != n || oc != 1 || oh != h || ow != w {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel_broadcast",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let plane = h * w;
        let a = self.shared_value();
        let b = other.shared_value();
        let mut out = (*a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ni = i / (c * plane);
            *v *= b.data()[ni * plane + i % plane];
        }
        Ok(Var::from_op(
            &[self, other],
            out,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        let ni = i / (c * plane);
                        *v *= b.data()[ni * plane + i % plane];
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = Tensor::zeros(&[n, 1, h, w]);
                    let gbd = gb.data_mut();
                    for (i, (&gv, &av)) in g.data().iter().zip(a.data()).enumerate() {
                        let ni = i / (c * plane);
                        gbd[ni * plane + i % plane] += gv * av;
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Var<T> {
        unary(self, self.value().scale(s), move |g| g.scale(s))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        unary(self, self.value().map(|v| v + s), |g| g.clone())
    }

    pub fn relu(&self) -> Var<T> {
        let x = self.shared_value();
        unary(self, x.map(|v| v.max(T::zero())), move |g| {
            g.zip_map(&x, "relu", |g, x| if x > T::zero() { g } else { T::zero() })
                .unwrap()
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let y = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let saved = y.clone();
        unary(self, y, move |g| {
            g.zip_map(&saved, "sigmoid", |g, y| g * y * (T::one() - y))
                .unwrap()
        })
    }

    pub fn abs(&self) -> Var<T> {
        let x = self.shared_value();
        unary(self, x.map(|v| v.abs()), move |g| {
            g.zip_map(&x, "abs", |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .unwrap()
        })
    }

    pub fn square(&self) -> Var<T> {
        let x = self.shared_value();
        unary(self, x.map(|v| v * v), move |g| {
            g.zip_map(&x, "square", |g, x| g * (x + x)).unwrap()
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        unary(self, Tensor::scalar(self.value().sum()), move |g| {
            Tensor::full(&shape, g.item())
        })
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let n = T::of(self.value().len() as f64);
        unary(self, Tensor::scalar(self.value().mean()), move |g| {
            Tensor::full(&shape, g.item() / n)
        })
    }

    /// Mean absolute difference `mean |self - other|`.
    pub fn l1_to(&self, other: &Var<T>) -> Result<Var<T>> {
        Ok(self.sub(other)?.abs().mean())
    }

    /// Mean squared difference `mean (self - other)^2`.
    pub fn mse_to(&self, other: &Var<T>) -> Result<Var<T>> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(vars: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = vars
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let shape = first.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid(format!(
                "concat axis {axis} out of range for {shape:?}"
            )));
        }
        let mut sizes = Vec::with_capacity(vars.len());
        for v in vars {
            let s = v.shape();
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out_shape = shape.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in vars.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&v.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(Var::from_op(
            vars,
            value,
            Box::new(move |g, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&sz, &need)| {
                        let start = offset;
                        offset += sz;
                        need.then(|| narrow_tensor(g, axis, start, sz))
                    })
                    .collect()
            }),
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let value = narrow_tensor(self.value(), axis, start, len);
        Ok(unary(self, value, move |g| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut full = Tensor::zeros(&shape);
            let fd = full.data_mut();
            for o in 0..outer {
                let dst = (o * shape[axis] + start) * inner;
                let src = o * len * inner;
                fd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            full
        }))
    }

    /// Nearest-neighbour upsampling of an `N x C x H x W` map by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value().data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    out.push(row[x / factor]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(unary(self, value, move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            let gd = gx.data_mut();
            for p in 0..n * c {
                let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        gd[p * h * w + (y / factor) * w + x / factor] += gp[y * ow + x];
                    }
                }
            }
            gx
        }))
    }

    /// Mirror padding (edge sample not repeated) of the two spatial axes.
    pub fn pad_reflect(
        &self,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let ys: Vec<usize> = (0..oh)
            .map(|y| reflect_index(y as isize - top as isize, h))
            .collect();
        let xs: Vec<usize> = (0..ow)
            .map(|x| reflect_index(x as isize - left as isize, w))
            .collect();
        let src = self.value().data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &sy in &ys {
                for &sx in &xs {
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(unary(self, value, move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            let gd = gx.data_mut();
            for p in 0..n * c {
                let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                for (y, &sy) in ys.iter().enumerate() {
                    for (x, &sx) in xs.iter().enumerate() {
                        gd[p * h * w + sy * w + sx] += gp[y * ow + x];
                    }
                }
            }
            gx
        }))
    }

    /// Spatial window `[top, top + height) x [left, left + width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        if top + height > h || left + width > w {
            return Err(TensorError::Invalid(format!(
                "crop {height}x{width}+{top}+{left} exceeds {h}x{w}"
            )));
        }
        let value = crop_tensor(self.value(), top, left, height, width);
        Ok(unary(self, value, move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            let gd = gx.data_mut();
            for p in 0..n * c {
                for y in 0..height {
                    let dst = p * h * w + (top + y) * w + left;
                    let src = (p * height + y) * width;
                    gd[dst..dst + width].copy_from_slice(&g.data()[src..src + width]);
                }
            }
            gx
        }))
    }
}

/// Index into `0..n` after mirror reflection about the edges, for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn narrow_tensor<T: Real>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * shape[axis] + start) * inner;
        data.extend_from_slice(&t.data()[s..s + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::from_vec(&out_shape, data).expect("narrow shape")
}

pub fn crop_tensor<T: Real>(
    t: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Tensor<T> {
    let (n, c, h, w) = t.dims4().expect("crop needs rank 4");
    let mut data = Vec::with_capacity(n * c * height * width);
    for p in 0..n * c {
        for y in 0..height {
            let s = p * h * w + (top + y) * w + left;
            data.extend_from_slice(&t.data()[s..s + width]);
        }
    }
    Tensor::from_vec(&[n, c, height, width], data).expect("crop shape")
}
