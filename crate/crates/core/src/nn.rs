//! Minimal convolutional network toolkit with explicit backward passes.
//!
//! Layers cache what their backward pass needs when a forward runs with
//! `keep_grad`, accumulate parameter gradients into [`Param::grad`], and
//! return the gradient with respect to their input, so both parameter
//! updates and input-space attacks fall out of the same machinery.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Forward-pass mode; only batch normalization distinguishes the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named, trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    /// Scale/shift of a normalization layer (the norm-affine scope).
    pub norm_affine: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>, norm_affine: bool) -> Self {
        let len = data.len();
        debug_assert_eq!(shape.iter().product::<usize>(), len);
        Param {
            name: name.into(),
            shape,
            data,
            grad: vec![T::zero(); len],
            norm_affine,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, norm_affine: bool) -> Self {
        let len = shape.iter().product();
        Param::new(name, shape, vec![T::zero(); len], norm_affine)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// He-uniform initialization over `fan_in`.
pub fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| sc::<T>((rng.random::<f64>() * 2.0 - 1.0) * limit))
        .collect()
}

/// 2D convolution over `(C, H, W)` maps via im2col and a single matmul.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    patches: Array2<T>,
    in_dims: (usize, usize, usize),
    out_dims: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * ksize * ksize;
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                vec![c_out, c_in, ksize, ksize],
                he_uniform(rng, c_out * fan_in, fan_in),
                false,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![c_out], false),
            c_in,
            c_out,
            ksize,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array3<T>, keep_grad: bool) -> Array3<T> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (ho, wo) = self.out_dims(h, w);
        let k = self.ksize;
        let ck2 = self.c_in * k * k;
        let mut patches = Array2::<T>::zeros((ck2, ho * wo));
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            patches[(row, oy * wo + ox)] = x[(ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        let w_mat = ArrayView2::from_shape((self.c_out, ck2), &self.weight.data).unwrap();
        let mut out_mat = w_mat.dot(&patches);
        for co in 0..self.c_out {
            let b = self.bias.data[co];
            out_mat.row_mut(co).iter_mut().for_each(|v| *v += b);
        }
        let out = out_mat
            .into_shape_with_order((self.c_out, ho, wo))
            .expect("conv output reshape");
        if keep_grad {
            self.cache = Some(ConvCache {
                patches,
                in_dims: (c, h, w),
                out_dims: (ho, wo),
            });
        } else {
            self.cache = None;
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array3<T>) -> Array3<T> {
        let cache = self.cache.as_ref().expect("conv backward without cache");
        let (ho, wo) = cache.out_dims;
        let (c, h, w) = cache.in_dims;
        let k = self.ksize;
        let ck2 = self.c_in * k * k;
        let g_mat = ArrayView2::from_shape(
            (self.c_out, ho * wo),
            grad_out.as_slice().expect("contiguous grad"),
        )
        .unwrap();

        let gw = g_mat.dot(&cache.patches.t());
        for (acc, g) in self.weight.grad.iter_mut().zip(gw.iter()) {
            *acc += *g;
        }
        for co in 0..self.c_out {
            let mut s = T::zero();
            for v in g_mat.row(co) {
                s += *v;
            }
            self.bias.grad[co] += s;
        }

        let w_mat = ArrayView2::from_shape((self.c_out, ck2), &self.weight.data).unwrap();
        let g_patches = w_mat.t().dot(&g_mat);
        let mut gx = Array3::<T>::zeros((c, h, w));
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[(ci, iy as usize, ix as usize)] += g_patches[(row, oy * wo + ox)];
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Per-channel batch normalization over the spatial plane. Evaluation mode
/// normalizes with frozen running statistics; training mode uses the current
/// plane statistics and folds them into the running buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Array3<T>,
    inv_std: Vec<T>,
    train_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(
                format!("{name}.gamma"),
                vec![channels],
                vec![T::one(); channels],
                true,
            ),
            beta: Param::zeros(format!("{name}.beta"), vec![channels], true),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<T>, mode: Mode, keep_grad: bool) -> Array3<T> {
        let (c, h, w) = x.dim();
        let n = sc::<T>((h * w) as f64);
        let eps = sc::<T>(self.eps);
        let mut xhat = Array3::<T>::zeros((c, h, w));
        let mut inv_std = vec![T::zero(); c];
        let mut out = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            let (mean, var) = match mode {
                Mode::Eval => (self.running_mean[ci], self.running_var[ci]),
                Mode::Train => {
                    let mut s = T::zero();
                    for y in 0..h {
                        for xx in 0..w {
                            s += x[(ci, y, xx)];
                        }
                    }
                    let mean = s / n;
                    let mut v = T::zero();
                    for y in 0..h {
                        for xx in 0..w {
                            let d = x[(ci, y, xx)] - mean;
                            v += d * d;
                        }
                    }
                    let var = v / n;
                    let m = sc::<T>(self.momentum);
                    let unbias = if h * w > 1 {
                        v / sc::<T>((h * w - 1) as f64)
                    } else {
                        var
                    };
                    self.running_mean[ci] = (T::one() - m) * self.running_mean[ci] + m * mean;
                    self.running_var[ci] = (T::one() - m) * self.running_var[ci] + m * unbias;
                    (mean, var)
                }
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ci] = istd;
            let g = self.gamma.data[ci];
            let b = self.beta.data[ci];
            for y in 0..h {
                for xx in 0..w {
                    let xh = (x[(ci, y, xx)] - mean) * istd;
                    xhat[(ci, y, xx)] = xh;
                    out[(ci, y, xx)] = g * xh + b;
                }
            }
        }
        if keep_grad {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                train_stats: mode == Mode::Train,
            });
        } else {
            self.cache = None;
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array3<T>) -> Array3<T> {
        let cache = self.cache.as_ref().expect("bn backward without cache");
        let (c, h, w) = cache.xhat.dim();
        let n = sc::<T>((h * w) as f64);
        let mut gx = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            let mut dg = T::zero();
            let mut db = T::zero();
            for y in 0..h {
                for xx in 0..w {
                    let gy = grad_out[(ci, y, xx)];
                    dg += gy * cache.xhat[(ci, y, xx)];
                    db += gy;
                }
            }
            self.gamma.grad[ci] += dg;
            self.beta.grad[ci] += db;
            let scale = self.gamma.data[ci] * cache.inv_std[ci];
            if cache.train_stats {
                // gradient through the plane statistics
                for y in 0..h {
                    for xx in 0..w {
                        let gy = grad_out[(ci, y, xx)];
                        gx[(ci, y, xx)] = scale / n
                            * (n * gy - db - cache.xhat[(ci, y, xx)] * dg);
                    }
                }
            } else {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(ci, y, xx)] = grad_out[(ci, y, xx)] * scale;
                    }
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    mask: Option<Array3<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Array3<T>, keep_grad: bool) -> Array3<T> {
        let out = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        if keep_grad {
            self.mask = Some(x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() }));
        } else {
            self.mask = None;
        }
        out
    }

    pub fn backward(&self, grad_out: &Array3<T>) -> Array3<T> {
        let mask = self.mask.as_ref().expect("relu backward without cache");
        grad_out * mask
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Debug, Clone, Default)]
pub struct UpsampleNearest2;

impl UpsampleNearest2 {
    pub fn forward<T: Scalar>(&self, x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let mut out = Array3::<T>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(ci, y, xx)];
                    out[(ci, 2 * y, 2 * xx)] = v;
                    out[(ci, 2 * y + 1, 2 * xx)] = v;
                    out[(ci, 2 * y, 2 * xx + 1)] = v;
                    out[(ci, 2 * y + 1, 2 * xx + 1)] = v;
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Array3<T>) -> Array3<T> {
        let (c, h2, w2) = grad_out.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    gx[(ci, y, xx)] = grad_out[(ci, 2 * y, 2 * xx)]
                        + grad_out[(ci, 2 * y + 1, 2 * xx)]
                        + grad_out[(ci, 2 * y, 2 * xx + 1)]
                        + grad_out[(ci, 2 * y + 1, 2 * xx + 1)];
                }
            }
        }
        gx
    }
}

/// Fully connected layer on flat vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub n_in: usize,
    pub n_out: usize,
    cache: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                vec![n_out, n_in],
                he_uniform(rng, n_out * n_in, n_in),
                false,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![n_out], false),
            n_in,
            n_out,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array1<T>, keep_grad: bool) -> Array1<T> {
        let w = ArrayView2::from_shape((self.n_out, self.n_in), &self.weight.data).unwrap();
        let mut out = w.dot(x);
        for (o, b) in out.iter_mut().zip(&self.bias.data) {
            *o += *b;
        }
        self.cache = if keep_grad { Some(x.clone()) } else { None };
        out
    }

    pub fn backward(&mut self, grad_out: &Array1<T>) -> Array1<T> {
        let x = self.cache.as_ref().expect("linear backward without cache");
        for o in 0..self.n_out {
            let g = grad_out[o];
            self.bias.grad[o] += g;
            for i in 0..self.n_in {
                self.weight.grad[o * self.n_in + i] += g * x[i];
            }
        }
        let w = ArrayView2::from_shape((self.n_out, self.n_in), &self.weight.data).unwrap();
        w.t().dot(grad_out)
    }
}

/// Concatenate two maps along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Array3::<T>::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(g: &Array3<T>, ca: usize) -> (Array3<T>, Array3<T>) {
    (
        g.slice(ndarray::s![..ca, .., ..]).to_owned(),
        g.slice(ndarray::s![ca.., .., ..]).to_owned(),
    )
}

/// Plain stochastic gradient descent on the selected parameters.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Param<T>], selected: &[usize], lr: f64) {
    let lr = sc::<T>(lr);
    for &idx in selected {
        let p = &mut params[idx];
        for (w, g) in p.data.iter_mut().zip(&p.grad) {
            *w = *w - lr * *g;
        }
    }
}

/// AdamW with decoupled weight decay; used for the auxiliary-network and
/// testbed-segmenter training loops.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                format!("{} optimizer slots", self.m.len()),
                format!("{} params", params.len()),
            ));
        }
        self.t += 1;
        let b1 = sc::<T>(self.beta1);
        let b2 = sc::<T>(self.beta2);
        let lr = sc::<T>(self.lr);
        let eps = sc::<T>(self.eps);
        let wd = sc::<T>(self.weight_decay);
        let bc1 = sc::<T>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = sc::<T>(1.0 - self.beta2.powi(self.t as i32));
        for (pi, p) in params.iter_mut().enumerate() {
            for i in 0..p.data.len() {
                let g = p.grad[i];
                self.m[pi][i] = b1 * self.m[pi][i] + (T::one() - b1) * g;
                self.v[pi][i] = b2 * self.v[pi][i] + (T::one() - b2) * g * g;
                let mhat = self.m[pi][i] / bc1;
                let vhat = self.v[pi][i] / bc2;
                p.data[i] = p.data[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p.data[i]);
            }
        }
        Ok(())
    }
}
