use ndarray::{
    linalg::general_mat_mul, s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4,
    ArrayViewD, ArrayViewMutD, Axis,
};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Real;

pub(crate) type TensorRefs<'a, T> = Vec<(String, ArrayViewD<'a, T>)>;
pub(crate) type TensorMuts<'a, T> = Vec<(String, ArrayViewMutD<'a, T>)>;

fn uniform_array<T: Real, R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Vec<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

/// Normal samples truncated at two standard deviations.
pub(crate) fn trunc_normal<T: Real, R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect()
}

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
        }
    }

    /// Uniform fan-in initialisation for weight and bias.
    pub fn init_fan_in<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((d_in, d_out), uniform_array(d_in * d_out, bound, rng))
                .expect("shape"),
            bias: Array1::from_vec(uniform_array(d_out, bound, rng)),
        }
    }

    /// Truncated-normal weights with zero bias.
    pub fn init_normal<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Array2::from_shape_vec((d_in, d_out), trunc_normal(d_in * d_out, std, rng))
                .expect("shape"),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn forward_vec(&self, x: ArrayView1<T>) -> Array1<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn backward_vec(&self, x: ArrayView1<T>, dy: ArrayView1<T>, grad: &mut Linear<T>) -> Array1<T> {
        let x2 = x.insert_axis(Axis(0));
        let dy2 = dy.insert_axis(Axis(0));
        self.backward_params(x2, dy2, grad);
        self.weight.dot(&dy)
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut TensorRefs<'a, T>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorMuts<'a, T>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

/// Channel-last 3x3 convolution with padding 1.
///
/// The kernel is stored flattened as `(9 * c_in, c_out)` with row index
/// `(ky * 3 + kx) * c_in + c`, which matches the column layout produced by
/// [`im2col3x3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Conv3x3Cache<T> {
    pub cols: Array2<T>,
    pub in_dim: (usize, usize, usize, usize),
}

pub fn conv_out_size(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// Unfolds 3x3 neighbourhoods (zero padding 1) into rows.
pub fn im2col3x3<T: Real>(x: ArrayView4<T>, stride: usize) -> Array2<T> {
    let (f, h, w, c) = x.dim();
    let ho = conv_out_size(h, stride);
    let wo = conv_out_size(w, stride);
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((f * ho * wo, 9 * c));
    let cd = cols.as_slice_mut().expect("fresh array");
    for fi in 0..f {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((fi * ho + oy) * wo + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((fi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cd[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back onto the input grid.
pub fn col2im3x3<T: Real>(
    dcols: ArrayView2<T>,
    in_dim: (usize, usize, usize, usize),
    stride: usize,
) -> Array4<T> {
    let (f, h, w, c) = in_dim;
    let ho = conv_out_size(h, stride);
    let wo = conv_out_size(w, stride);
    let dcs = dcols.as_standard_layout();
    let dd = dcs.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros(in_dim);
    let xd = dx.as_slice_mut().expect("fresh array");
    for fi in 0..f {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((fi * ho + oy) * wo + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((fi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for k in 0..c {
                            xd[dst + k] += dd[src + k];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Real> Conv3x3<T> {
    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weight: Array2::zeros((9 * c_in, c_out)),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn init_fan_in<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = 9 * c_in;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((fan_in, c_out), uniform_array(fan_in * c_out, bound, rng))
                .expect("shape"),
            bias: Array1::from_vec(uniform_array(c_out, bound, rng)),
            stride,
        }
    }

    /// He-style uniform initialisation suited to ReLU stacks.
    pub fn init_he<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = 9 * c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((fan_in, c_out), uniform_array(fan_in * c_out, bound, rng))
                .expect("shape"),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn c_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView4<T>) -> (Array4<T>, Conv3x3Cache<T>) {
        let in_dim = x.dim();
        let cols = im2col3x3(x, self.stride);
        let y = self.apply_cols(&cols, in_dim);
        (y, Conv3x3Cache { cols, in_dim })
    }

    pub fn forward_no_cache(&self, x: ArrayView4<T>) -> Array4<T> {
        let cols = im2col3x3(x, self.stride);
        self.apply_cols(&cols, x.dim())
    }

    fn apply_cols(&self, cols: &Array2<T>, in_dim: (usize, usize, usize, usize)) -> Array4<T> {
        let (f, h, w, _) = in_dim;
        let ho = conv_out_size(h, self.stride);
        let wo = conv_out_size(w, self.stride);
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        y.into_shape_with_order((f, ho, wo, self.c_out()))
            .expect("conv output shape")
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward(
        &self,
        cache: &Conv3x3Cache<T>,
        dy: ArrayView4<T>,
        grad: &mut Conv3x3<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let rows = dy.len() / self.c_out();
        let dys = dy.as_standard_layout();
        let dy2 = dys
            .view()
            .into_shape_with_order((rows, self.c_out()))
            .expect("conv grad shape");
        general_mat_mul(T::one(), &cache.cols.t(), &dy2, T::one(), &mut grad.weight);
        grad.bias += &dy2.sum_axis(Axis(0));
        if need_input_grad {
            let dcols = dy2.dot(&self.weight.t());
            Some(col2im3x3(dcols.view(), cache.in_dim, self.stride))
        } else {
            None
        }
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut TensorRefs<'a, T>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorMuts<'a, T>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

fn pool_bin(i: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let start = i * in_size / out_size;
    let end = ((i + 1) * in_size).div_ceil(out_size);
    (start, end)
}

/// Adaptive average pooling of `(F, H, W, C)` to `(F, g, g, C)`.
pub fn adaptive_avg_pool<T: Real>(x: ArrayView4<T>, g: usize) -> Array4<T> {
    let (f, h, w, c) = x.dim();
    let mut out = Array4::<T>::zeros((f, g, g, c));
    for fi in 0..f {
        for gy in 0..g {
            let (y0, y1) = pool_bin(gy, h, g);
            for gx in 0..g {
                let (x0, x1) = pool_bin(gx, w, g);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                let window = x.slice(s![fi, y0..y1, x0..x1, ..]);
                let mut acc = window.sum_axis(Axis(0)).sum_axis(Axis(0));
                acc /= count;
                out.slice_mut(s![fi, gy, gx, ..]).assign(&acc);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Real>(
    dy: ArrayView4<T>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (f, h, w, _) = in_dim;
    let g = dy.dim().1;
    let mut dx = Array4::<T>::zeros(in_dim);
    for fi in 0..f {
        for gy in 0..g {
            let (y0, y1) = pool_bin(gy, h, g);
            for gx in 0..g {
                let (x0, x1) = pool_bin(gx, w, g);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                let share = dy.slice(s![fi, gy, gx, ..]).mapv(|v| v / count);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let mut cell = dx.slice_mut(s![fi, yy, xx, ..]);
                        cell += &share;
                    }
                }
            }
        }
    }
    dx
}

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

const LN_EPS: f64 = 1e-6;

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).expect("dim");
        let mean = x.sum_axis(Axis(1)) / d;
        let mut xhat = &x - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| T::one() / (v + T::lit(LN_EPS)).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: ArrayView2<T>,
        grad: &mut LayerNorm<T>,
    ) -> Array2<T> {
        let d = T::from_usize(dy.ncols()).expect("dim");
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut dx = dxhat * d - sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
        let scale = cache.inv_std.mapv(|v| v / d);
        dx *= &scale.view().insert_axis(Axis(1));
        dx
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut TensorRefs<'a, T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorMuts<'a, T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

/// Multi-head self-attention over a token matrix `(L, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl<T: Real> Attention<T> {
    fn head_dim(&self) -> usize {
        self.proj.d_in() / self.heads
    }

    fn scale(&self) -> T {
        T::one() / T::from_usize(self.head_dim()).expect("dim").sqrt()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, AttentionCache<T>) {
        let d = self.proj.d_in();
        let dh = self.head_dim();
        let scale = self.scale();
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::<T>::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            p *= scale;
            softmax_rows(&mut p);
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let y = self.proj.forward(ctx.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache<T>, dy: ArrayView2<T>, grad: &mut Attention<T>) -> Array2<T> {
        let d = self.proj.d_in();
        let dh = self.head_dim();
        let scale = self.scale();
        let dctx = self.proj.backward(cache.ctx.view(), dy, &mut grad.proj);
        let mut dqkv = Array2::<T>::zeros(cache.qkv.dim());
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &cache.probs[h];
            let dout = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = (dp - row_dot) * p;
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(cache.x.view(), dqkv.view(), &mut grad.qkv)
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut TensorRefs<'a, T>) {
        self.qkv.tensors(&format!("{prefix}.qkv"), out);
        self.proj.tensors(&format!("{prefix}.proj"), out);
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorMuts<'a, T>) {
        self.qkv.tensors_mut(&format!("{prefix}.qkv"), out);
        self.proj.tensors_mut(&format!("{prefix}.proj"), out);
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Real> Mlp<T> {
    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(act.view());
        (
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: ArrayView2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let mut dact = self.fc2.backward(cache.act.view(), dy, &mut grad.fc2);
        dact.zip_mut_with(&cache.pre, |g, &p| *g *= gelu_grad(p));
        self.fc1.backward(cache.x.view(), dact.view(), &mut grad.fc1)
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut TensorRefs<'a, T>) {
        self.fc1.tensors(&format!("{prefix}.fc1"), out);
        self.fc2.tensors(&format!("{prefix}.fc2"), out);
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorMuts<'a, T>) {
        self.fc1.tensors_mut(&format!("{prefix}.fc1"), out);
        self.fc2.tensors_mut(&format!("{prefix}.fc2"), out);
    }
}
