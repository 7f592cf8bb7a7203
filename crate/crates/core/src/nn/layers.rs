use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{Grads, ParamId, ParamKind, ParamStore, Scalar, Tensor};

/// Upper bound on im2col buffer elements; convolutions are chunked along
/// the output time axis to stay below it.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (time, height, width)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "input extent {} (padded {padded}) smaller than kernel {} on axis {a}",
                    dims[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }
}

/// Bias-free 3D convolution over `(batch, channels, time, height, width)`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub spec: Conv3dSpec,
    pub weight: ParamId,
}

struct Geometry {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl Conv3d {
    /// Kaiming-normal (fan-out, ReLU gain) initialization.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: Conv3dSpec, rng: &mut Rng) -> Self {
        let rows = spec.col_rows();
        let fan_out = spec.out_channels * spec.kernel.iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let data = (0..spec.out_channels * rows)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            Tensor::from_vec(&[spec.out_channels, rows], data).expect("sized"),
        );
        Self { spec, weight }
    }

    fn geometry<T: Scalar>(&self, x: &Tensor<T>) -> Result<Geometry> {
        if x.ndim() != 5 || x.dim(1) != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects (B, {}, D, H, W), got {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let [od, oh, ow] = self.spec.out_dims([x.dim(2), x.dim(3), x.dim(4)])?;
        Ok(Geometry {
            c: x.dim(1),
            d: x.dim(2),
            h: x.dim(3),
            w: x.dim(4),
            od,
            oh,
            ow,
        })
    }

    fn frames_per_chunk(&self, g: &Geometry) -> usize {
        let per_frame = self.spec.col_rows() * g.oh * g.ow;
        (COL_BUDGET / per_frame.max(1)).clamp(1, g.od)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let b = x.dim(0);
        let oc = self.spec.out_channels;
        let rows = self.spec.col_rows();
        let out_vol = g.od * g.oh * g.ow;
        let in_vol = g.c * g.d * g.h * g.w;
        let weight = store.get(self.weight).data();
        let mut out = Tensor::zeros(&[b, oc, g.od, g.oh, g.ow]);
        let chunk = self.frames_per_chunk(&g);
        let mut col = vec![T::zero(); rows * chunk * g.oh * g.ow];
        for bi in 0..b {
            let xb = &x.data()[bi * in_vol..(bi + 1) * in_vol];
            let mut od0 = 0;
            while od0 < g.od {
                let nf = chunk.min(g.od - od0);
                let ncols = nf * g.oh * g.ow;
                im2col(xb, &g, &self.spec, od0, nf, &mut col[..rows * ncols]);
                let offset = bi * oc * out_vol + od0 * g.oh * g.ow;
                T::gemm(
                    oc,
                    rows,
                    ncols,
                    T::one(),
                    weight,
                    rows,
                    1,
                    &col[..rows * ncols],
                    ncols,
                    1,
                    T::zero(),
                    &mut out.data_mut()[offset..],
                    out_vol,
                    1,
                );
                od0 += nf;
            }
        }
        Ok(out)
    }

    /// Accumulates the weight gradient and, if requested, returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = self.geometry(x)?;
        let b = x.dim(0);
        let oc = self.spec.out_channels;
        let rows = self.spec.col_rows();
        let out_vol = g.od * g.oh * g.ow;
        let in_vol = g.c * g.d * g.h * g.w;
        if dy.shape() != [b, oc, g.od, g.oh, g.ow] {
            return Err(Error::Shape(format!(
                "conv3d backward: dy {:?} does not match output",
                dy.shape()
            )));
        }
        let weight = store.get(self.weight).data();
        let chunk = self.frames_per_chunk(&g);
        let mut col = vec![T::zero(); rows * chunk * g.oh * g.ow];
        let mut dcol = if need_dx {
            vec![T::zero(); rows * chunk * g.oh * g.ow]
        } else {
            Vec::new()
        };
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let dw = grads.get_mut(self.weight);
        for bi in 0..b {
            let xb = &x.data()[bi * in_vol..(bi + 1) * in_vol];
            let mut od0 = 0;
            while od0 < g.od {
                let nf = chunk.min(g.od - od0);
                let ncols = nf * g.oh * g.ow;
                let dys = &dy.data()[bi * oc * out_vol + od0 * g.oh * g.ow..];
                im2col(xb, &g, &self.spec, od0, nf, &mut col[..rows * ncols]);
                // dW += dY * col^T
                T::gemm(
                    oc,
                    ncols,
                    rows,
                    T::one(),
                    dys,
                    out_vol,
                    1,
                    &col[..rows * ncols],
                    1,
                    ncols,
                    T::one(),
                    dw,
                    rows,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    // dcol = W^T * dY
                    T::gemm(
                        rows,
                        oc,
                        ncols,
                        T::one(),
                        weight,
                        1,
                        rows,
                        dys,
                        out_vol,
                        1,
                        T::zero(),
                        &mut dcol[..rows * ncols],
                        ncols,
                        1,
                    );
                    let dxb = &mut dx.data_mut()[bi * in_vol..(bi + 1) * in_vol];
                    col2im(&dcol[..rows * ncols], &g, &self.spec, od0, nf, dxb);
                }
                od0 += nf;
            }
        }
        Ok(dx)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, s: &Conv3dSpec, od0: usize, nf: usize, col: &mut [T]) {
    let ncols = nf * g.oh * g.ow;
    let [kd, kh, kw] = s.kernel;
    let [sd, sh, sw] = s.stride;
    let [pd, ph, pw] = s.padding;
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..kd {
            for bq in 0..kh {
                for cq in 0..kw {
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    let mut idx = 0;
                    for od in od0..od0 + nf {
                        let id = (od * sd + a) as isize - pd as isize;
                        if id < 0 || id >= g.d as isize {
                            dst[idx..idx + g.oh * g.ow].fill(T::zero());
                            idx += g.oh * g.ow;
                            continue;
                        }
                        let plane = (ci * g.d + id as usize) * g.h;
                        for oh in 0..g.oh {
                            let ih = (oh * sh + bq) as isize - ph as isize;
                            let out = &mut dst[idx..idx + g.ow];
                            idx += g.ow;
                            if ih < 0 || ih >= g.h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &x[(plane + ih as usize) * g.w..][..g.w];
                            for (ow, o) in out.iter_mut().enumerate() {
                                let iw = (ow * sw + cq) as isize - pw as isize;
                                *o = if iw >= 0 && iw < g.w as isize {
                                    src[iw as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, s: &Conv3dSpec, od0: usize, nf: usize, dx: &mut [T]) {
    let ncols = nf * g.oh * g.ow;
    let [kd, kh, kw] = s.kernel;
    let [sd, sh, sw] = s.stride;
    let [pd, ph, pw] = s.padding;
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..kd {
            for bq in 0..kh {
                for cq in 0..kw {
                    let src = &col[row * ncols..(row + 1) * ncols];
                    row += 1;
                    let mut idx = 0;
                    for od in od0..od0 + nf {
                        let id = (od * sd + a) as isize - pd as isize;
                        if id < 0 || id >= g.d as isize {
                            idx += g.oh * g.ow;
                            continue;
                        }
                        let plane = (ci * g.d + id as usize) * g.h;
                        for oh in 0..g.oh {
                            let ih = (oh * sh + bq) as isize - ph as isize;
                            let vals = &src[idx..idx + g.ow];
                            idx += g.ow;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let dst = &mut dx[(plane + ih as usize) * g.w..][..g.w];
                            for (ow, &v) in vals.iter().enumerate() {
                                let iw = (ow * sw + cq) as isize - pw as isize;
                                if iw >= 0 && iw < g.w as isize {
                                    dst[iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batch normalization over all axes except the channel axis (axis 1).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics to fold into the running estimates.
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            Tensor::full(&[channels], T::one()),
        );
        let beta = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[channels]));
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[channels]),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Tensor::full(&[channels], T::one()),
        );
        Self {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn layout<T: Scalar>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.ndim() < 2 || x.dim(1) != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm expects channel axis {}, got {:?}",
                self.channels,
                x.shape()
            )));
        }
        Ok((x.dim(0), x.shape()[2..].iter().product()))
    }

    pub fn forward_train<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let (b, s) = self.layout(x)?;
        let c = self.channels;
        let n = b * s;
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for (ci, m) in mean.iter_mut().enumerate() {
                *m += x.data()[(bi * c + ci) * s..][..s].iter().copied().sum::<T>();
            }
        }
        let nt = T::of(n as f64);
        for m in &mut mean {
            *m /= nt;
        }
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] += x.data()[(bi * c + ci) * s..][..s]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
        }
        let var_unbiased: Vec<T> = var
            .iter()
            .map(|&v| if n > 1 { v / T::of((n - 1) as f64) } else { v })
            .collect();
        let inv_std: Vec<T> = var.iter().map(|&v| (v / nt + T::of(self.eps)).sqrt().recip()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let (m, is, gm, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
                for i in base..base + s {
                    let xh = (x.data()[i] - m) * is;
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = gm * xh + bt;
                }
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var_unbiased,
            },
        ))
    }

    pub fn forward_eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, s) = self.layout(x)?;
        let c = self.channels;
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let rm = store.get(self.running_mean).data();
        let rv = store.get(self.running_var).data();
        let mut y = Tensor::zeros(x.shape());
        for ci in 0..c {
            let scale = gamma[ci] / (rv[ci] + T::of(self.eps)).sqrt();
            let shift = beta[ci] - rm[ci] * scale;
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                for i in base..base + s {
                    y.data_mut()[i] = x.data()[i] * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (b, s) = self.layout(dy)?;
        let c = self.channels;
        let n = T::of((b * s) as f64);
        let gamma = store.get(self.gamma).data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for i in base..base + s {
                    let g = dy.data()[i];
                    sum_dy[ci] += g;
                    sum_dy_xhat[ci] += g * cache.xhat.data()[i];
                }
            }
        }
        {
            let dgamma = grads.get_mut(self.gamma);
            for ci in 0..c {
                dgamma[ci] += sum_dy_xhat[ci];
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for ci in 0..c {
                dbeta[ci] += sum_dy[ci];
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let k = gamma[ci] * cache.inv_std[ci] / n;
                let (sd, sdx) = (sum_dy[ci], sum_dy_xhat[ci]);
                for i in base..base + s {
                    dx.data_mut()[i] = k * (n * dy.data()[i] - sd - cache.xhat.data()[i] * sdx);
                }
            }
        }
        Ok(dx)
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>) {
        let mom = T::of(self.momentum);
        let keep = T::one() - mom;
        for (r, &m) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&cache.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in store
            .get_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&cache.var_unbiased)
        {
            *r = keep * *r + mom * v;
        }
    }
}

/// Affine layer `y = x W^T + b` on `(batch, in)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect() };
        let w = draw(in_features * out_features);
        let b = draw(out_features);
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            Tensor::from_vec(&[out_features, in_features], w).expect("sized"),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Trainable,
            Tensor::from_vec(&[out_features], b).expect("sized"),
        );
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 2 || x.dim(1) != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects (B, {}), got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let b = x.dim(0);
        let (i, o) = (self.in_features, self.out_features);
        let bias = store.get(self.bias).data();
        let mut y = Tensor::zeros(&[b, o]);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(bias);
        }
        T::gemm(
            b,
            i,
            o,
            T::one(),
            x.data(),
            i,
            1,
            store.get(self.weight).data(),
            1,
            i,
            T::one(),
            y.data_mut(),
            o,
            1,
        );
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let b = x.dim(0);
        let (i, o) = (self.in_features, self.out_features);
        if dy.shape() != [b, o] {
            return Err(Error::Shape(format!("linear backward: dy {:?}", dy.shape())));
        }
        T::gemm(
            o,
            b,
            i,
            T::one(),
            dy.data(),
            1,
            o,
            x.data(),
            i,
            1,
            T::one(),
            grads.get_mut(self.weight),
            i,
            1,
        );
        let db = grads.get_mut(self.bias);
        for row in dy.data().chunks(o) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = Tensor::zeros(&[b, i]);
        T::gemm(
            b,
            o,
            i,
            T::one(),
            dy.data(),
            o,
            1,
            store.get(self.weight).data(),
            i,
            1,
            T::zero(),
            dx.data_mut(),
            i,
            1,
        );
        Ok(dx)
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Non-overlapping spatial average pooling by `factor` on 5D tensors.
pub fn avg_pool_spatial<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let &[b, c, d, h, w] = x.shape() else {
        return Err(Error::Shape(format!("avg pool expects 5D input, got {:?}", x.shape())));
    };
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} not divisible by pool factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::of(1.0 / (factor * factor) as f64);
    let mut y = Tensor::zeros(&[b, c, d, oh, ow]);
    let planes = b * c * d;
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for yy in 0..h {
            let row = &src[yy * w..(yy + 1) * w];
            let out = &mut dst[(yy / factor) * ow..(yy / factor + 1) * ow];
            for (xx, &v) in row.iter().enumerate() {
                out[xx / factor] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    Ok(y)
}

/// Mean over every axis after the channel axis: `(B, C, ...) -> (B, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.dim(0), x.dim(1));
    let s: usize = x.shape()[2..].iter().product();
    let inv = T::of(1.0 / s as f64);
    let data = x
        .data()
        .chunks(s)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], data).expect("sized")
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let s: usize = input_shape[2..].iter().product();
    let inv = T::of(1.0 / s as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(s).zip(dy.data()) {
        chunk.fill(g * inv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn naive_conv(x: &Tensor<f64>, w: &[f64], s: &Conv3dSpec) -> Tensor<f64> {
        let (b, c, d, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
        let [od, oh, ow] = s.out_dims([d, h, wd]).unwrap();
        let [kd, kh, kw] = s.kernel;
        let mut y = Tensor::zeros(&[b, s.out_channels, od, oh, ow]);
        for bi in 0..b {
            for o in 0..s.out_channels {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for a in 0..kd {
                                    for p in 0..kh {
                                        for q in 0..kw {
                                            let iz = (z * s.stride[0] + a) as isize - s.padding[0] as isize;
                                            let iy = (yy * s.stride[1] + p) as isize - s.padding[1] as isize;
                                            let ix = (xx * s.stride[2] + q) as isize - s.padding[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((bi * c + ci) * d + iz as usize) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = (((o * c + ci) * kd + a) * kh + p) * kw + q;
                                            acc += x.data()[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            let yi = (((bi * s.out_channels + o) * od + z) * oh + yy) * ow + xx;
                            y.data_mut()[yi] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let spec = Conv3dSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: [3, 3, 2],
            stride: [2, 1, 2],
            padding: [1, 1, 0],
        };
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut store, "c", spec, &mut rng::seeded(1));
        let x = random_tensor(&[2, 2, 5, 4, 6], 2);
        let y = conv.forward(&store, &x).unwrap();
        let expected = naive_conv(&x, store.get(conv.weight).data(), &spec);
        assert_eq!(y.shape(), expected.shape());
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = Conv3dSpec {
            in_channels: 2,
            out_channels: 2,
            kernel: [2, 3, 3],
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        };
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut store, "c", spec, &mut rng::seeded(3));
        let x = random_tensor(&[1, 2, 3, 5, 5], 4);
        let y = conv.forward(&store, &x).unwrap();
        let probe = random_tensor(y.shape(), 5);
        let loss = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
            let y = conv.forward(store, x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = Grads::zeros_like(&store);
        let dx = conv.backward(&store, &x, &probe, &mut grads, true).unwrap().unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        for i in 0..store.get(conv.weight).len() {
            let mut sp = store.clone();
            sp.get_mut(conv.weight).data_mut()[i] += h;
            let mut sm = store.clone();
            sm.get_mut(conv.weight).data_mut()[i] -= h;
            let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
            assert!((fd - grads.get(conv.weight)[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let x = random_tensor(&[4, 3, 2, 2, 2], 9);
        let (y, cache) = bn.forward_train(&store, &x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + c) * 8..][..8].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
        bn.update_running(&mut store, &cache);
        assert!(store.get(bn.running_mean).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 4, 3, &mut rng::seeded(1));
        let x = random_tensor(&[2, 4], 2);
        let probe = random_tensor(&[2, 3], 3);
        let loss = |s: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
            lin.forward(s, x)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads = Grads::zeros_like(&store);
        let dx = lin.backward(&store, &x, &probe, &mut grads).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            assert!(((loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h) - dx.data()[i]).abs() < 1e-8);
        }
        for i in 0..3 {
            let mut sp = store.clone();
            sp.get_mut(lin.bias).data_mut()[i] += h;
            let mut sm = store.clone();
            sm.get_mut(lin.bias).data_mut()[i] -= h;
            assert!(((loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h) - grads.get(lin.bias)[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn avg_pool_preserves_constants() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 8, 8], 3.0);
        let y = avg_pool_spatial(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }
}
