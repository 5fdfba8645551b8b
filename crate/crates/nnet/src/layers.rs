//! Layer implementations. Every layer has a pure `infer` path used for
//! prediction on shared models and a caching `forward` + `backward` pair used
//! during training and gradient checking.

use rand::{Rng, RngCore};

use crate::tensor::{Real, Shape, Tensor};

/// A trainable parameter tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub trait Layer<T: Real>: Send + Sync {
    /// Short kind tag, e.g. `conv` or `lrn`.
    fn kind(&self) -> &'static str;

    fn output_shape(&self, input: Shape) -> Shape;

    /// Evaluation-mode forward pass without caching.
    fn infer(&self, x: &Tensor<T>) -> Tensor<T>;

    /// Forward pass that caches what `backward` needs. `train` enables dropout.
    fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut dyn RngCore) -> Tensor<T>;

    /// Propagates `dy` to the input and accumulates parameter gradients.
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;

    /// Accumulates parameter gradients only; layers whose input gradient is
    /// costly override this.
    fn backward_params(&mut self, dy: &Tensor<T>) {
        self.backward(dy);
    }

    /// Hash of the piecewise branch taken by the last `forward` (ReLU
    /// activity, pooling winners). Smooth layers return 0.
    fn branch_signature(&self) -> u64 {
        0
    }

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
}

/// FNV-1a over 64-bit words.
fn fnv(words: impl Iterator<Item = u64>) -> u64 {
    words.fold(0xcbf2_9ce4_8422_2325, |h, w| (h ^ w).wrapping_mul(0x0100_0000_01b3))
}

// ---------------------------------------------------------------------------
// Convolution

/// Square-kernel 2-D cross-correlation with stride 1.
///
/// Weights are stored as a `(k*k*in_c) x out_c` row-major matrix whose row
/// index is `(ky*k + kx)*in_c + ci`, so the forward pass is a single product
/// of the im2col matrix with the weights.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cols: Vec<T>,
    in_shape: Option<Shape>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> Self {
        let wlen = kernel * kernel * in_channels * out_channels;
        Self {
            in_channels,
            out_channels,
            kernel,
            pad,
            weight: Param::new(vec![T::zero(); wlen]),
            bias: Param::new(vec![T::zero(); out_channels]),
            cols: Vec::new(),
            in_shape: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + 2 * self.pad + 1 - self.kernel,
            w + 2 * self.pad + 1 - self.kernel,
        )
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let s = x.shape();
        let (oh, ow) = self.out_hw(s.h, s.w);
        let k = self.kernel;
        let kk = self.fan_in();
        let mut cols = vec![T::zero(); s.n * oh * ow * kk];
        let data = x.data();
        for n in 0..s.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((n * oh + oy) * ow + ox) * kk;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - self.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - self.pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let src = s.index(n, iy as usize, ix as usize, 0);
                            let dst = row + (ky * k + kx) * s.c;
                            cols[dst..dst + s.c].copy_from_slice(&data[src..src + s.c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], in_shape: Shape) -> Tensor<T> {
        let s = in_shape;
        let (oh, ow) = self.out_hw(s.h, s.w);
        let k = self.kernel;
        let kk = self.fan_in();
        let mut dx = Tensor::zeros(s);
        let out = dx.data_mut();
        for n in 0..s.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((n * oh + oy) * ow + ox) * kk;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - self.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - self.pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let dst = s.index(n, iy as usize, ix as usize, 0);
                            let src = row + (ky * k + kx) * s.c;
                            for c in 0..s.c {
                                out[dst + c] = out[dst + c] + dcols[src + c];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply(&self, cols: &[T], in_shape: Shape) -> Tensor<T> {
        let out_shape = self.output_shape(in_shape);
        let rows = out_shape.n * out_shape.h * out_shape.w;
        let mut out = vec![T::zero(); rows * self.out_channels];
        for row in out.chunks_exact_mut(self.out_channels) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(
            rows,
            self.fan_in(),
            self.out_channels,
            cols,
            false,
            &self.weight.value,
            false,
            T::one(),
            &mut out,
        );
        Tensor::from_vec(out_shape, out).expect("conv output shape")
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn output_shape(&self, input: Shape) -> Shape {
        let (oh, ow) = self.out_hw(input.h, input.w);
        Shape::new(input.n, oh, ow, self.out_channels)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.shape().c, self.in_channels);
        let cols = self.im2col(x);
        self.apply(&cols, x.shape())
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool, _rng: &mut dyn RngCore) -> Tensor<T> {
        debug_assert_eq!(x.shape().c, self.in_channels);
        self.cols = self.im2col(x);
        self.in_shape = Some(x.shape());
        self.apply(&self.cols, x.shape())
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let in_shape = self.in_shape.expect("conv backward before forward");
        self.backward_params(dy);
        let rows = dy.shape().n * dy.shape().h * dy.shape().w;
        let kk = self.fan_in();
        let oc = self.out_channels;
        // dcols = dy * W^T
        let mut dcols = vec![T::zero(); rows * kk];
        T::gemm(
            rows,
            oc,
            kk,
            dy.data(),
            false,
            &self.weight.value,
            true,
            T::zero(),
            &mut dcols,
        );
        self.col2im(&dcols, in_shape)
    }

    fn backward_params(&mut self, dy: &Tensor<T>) {
        let rows = dy.shape().n * dy.shape().h * dy.shape().w;
        let kk = self.fan_in();
        let oc = self.out_channels;
        // dW += cols^T * dy
        T::gemm(
            kk,
            rows,
            oc,
            &self.cols,
            true,
            dy.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.data().chunks_exact(oc) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Max pooling

/// Ceil-mode max pooling without padding. Windows hanging over the bottom or
/// right edge are clipped to the input.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
    argmax: Vec<usize>,
    in_shape: Option<Shape>,
}

/// Ceil-mode output extent: `ceil((len - window) / stride) + 1`, and a single
/// clipped window when the input is smaller than the window.
pub fn pooled_len(len: usize, window: usize, stride: usize) -> usize {
    if len <= window {
        1
    } else {
        (len - window).div_ceil(stride) + 1
    }
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            argmax: Vec::new(),
            in_shape: None,
        }
    }

    fn run<T: Real>(&self, x: &Tensor<T>, mut argmax: Option<&mut Vec<usize>>) -> Tensor<T> {
        let s = x.shape();
        let out_shape = self.output_shape_of(s);
        let mut out = Tensor::zeros(out_shape);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(out_shape.len());
        }
        let data = x.data();
        let od = out.data_mut();
        let mut o = 0;
        for n in 0..s.n {
            for oy in 0..out_shape.h {
                let y0 = oy * self.stride;
                let y1 = (y0 + self.window).min(s.h);
                for ox in 0..out_shape.w {
                    let x0 = ox * self.stride;
                    let x1 = (x0 + self.window).min(s.w);
                    for c in 0..s.c {
                        let mut best = s.index(n, y0, x0, c);
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let i = s.index(n, y, xx, c);
                                if data[i] > data[best] {
                                    best = i;
                                }
                            }
                        }
                        od[o] = data[best];
                        if let Some(a) = argmax.as_deref_mut() {
                            a.push(best);
                        }
                        o += 1;
                    }
                }
            }
        }
        out
    }

    fn output_shape_of(&self, s: Shape) -> Shape {
        Shape::new(
            s.n,
            pooled_len(s.h, self.window, self.stride),
            pooled_len(s.w, self.window, self.stride),
            s.c,
        )
    }
}

impl<T: Real> Layer<T> for MaxPool2d {
    fn kind(&self) -> &'static str {
        "pool"
    }

    fn output_shape(&self, input: Shape) -> Shape {
        self.output_shape_of(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, None)
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool, _rng: &mut dyn RngCore) -> Tensor<T> {
        let mut argmax = std::mem::take(&mut self.argmax);
        let y = self.run(x, Some(&mut argmax));
        self.argmax = argmax;
        self.in_shape = Some(x.shape());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let in_shape = self.in_shape.expect("pool backward before forward");
        let mut dx = Tensor::zeros(in_shape);
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(dy.data()) {
            d[src] = d[src] + g;
        }
        dx
    }

    fn branch_signature(&self) -> u64 {
        fnv(self.argmax.iter().map(|&i| i as u64))
    }
}

// ---------------------------------------------------------------------------
// Local response normalization

/// Cross-channel LRN: `b_i = a_i / (k + alpha/n * sum_j a_j^2)^beta`, the sum
/// running over a window of `local_size` channels centred on `i`.
#[derive(Debug, Clone)]
pub struct Lrn<T> {
    pub local_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    input: Option<Tensor<T>>,
    scale: Vec<T>,
    /// `scale^-beta`, kept so backward need not recompute the power.
    factor: Vec<T>,
    output: Option<Tensor<T>>,
}

impl<T: Real> Lrn<T> {
    pub fn new(local_size: usize, alpha: f64, beta: f64, k: f64) -> Self {
        Self {
            local_size,
            alpha,
            beta,
            k,
            input: None,
            scale: Vec::new(),
            factor: Vec::new(),
            output: None,
        }
    }

    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let half = (self.local_size - 1) / 2;
        let lo = c.saturating_sub(half);
        let hi = (c + self.local_size - half).min(channels);
        (lo, hi)
    }

    fn compute(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let s = x.shape();
        let coeff = T::from_f64_lossy(self.alpha / self.local_size as f64);
        let k = T::from_f64_lossy(self.k);
        let neg_beta = T::from_f64_lossy(-self.beta);
        let mut scale = vec![T::zero(); s.len()];
        let mut factor = vec![T::zero(); s.len()];
        let mut out = Tensor::zeros(s);
        let od = out.data_mut();
        let rows = x
            .data()
            .chunks_exact(s.c)
            .zip(scale.chunks_exact_mut(s.c))
            .zip(factor.chunks_exact_mut(s.c).zip(od.chunks_exact_mut(s.c)));
        for ((src, sc), (f, dst)) in rows {
            for c in 0..s.c {
                let (lo, hi) = self.window(c, s.c);
                let sq: T = src[lo..hi].iter().map(|&a| a * a).sum();
                sc[c] = k + coeff * sq;
                f[c] = sc[c].powf(neg_beta);
                dst[c] = src[c] * f[c];
            }
        }
        (out, scale, factor)
    }
}

impl<T: Real> Layer<T> for Lrn<T> {
    fn kind(&self) -> &'static str {
        "lrn"
    }

    fn output_shape(&self, input: Shape) -> Shape {
        input
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x).0
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool, _rng: &mut dyn RngCore) -> Tensor<T> {
        let (out, scale, factor) = self.compute(x);
        self.input = Some(x.clone());
        self.scale = scale;
        self.factor = factor;
        self.output = Some(out.clone());
        out
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("lrn backward before forward");
        let y = self.output.as_ref().expect("lrn backward before forward");
        let s = x.shape();
        let factor = T::from_f64_lossy(2.0 * self.alpha * self.beta / self.local_size as f64);
        let mut dx = Tensor::zeros(s);
        let dxd = dx.data_mut();
        let mut ratio = vec![T::zero(); s.c];
        for p in 0..s.len() / s.c.max(1) {
            let base = p * s.c;
            for c in 0..s.c {
                ratio[c] = dy.data()[base + c] * y.data()[base + c] / self.scale[base + c];
            }
            for c in 0..s.c {
                let (lo, hi) = self.window(c, s.c);
                let acc: T = ratio[lo..hi].iter().copied().sum();
                dxd[base + c] = dy.data()[base + c] * self.factor[base + c]
                    - factor * x.data()[base + c] * acc;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Layer<T> for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn output_shape(&self, input: Shape) -> Shape {
        input
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        y
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool, _rng: &mut dyn RngCore) -> Tensor<T> {
        self.mask = x.data().iter().map(|&v| v > T::zero()).collect();
        self.infer(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        for (d, &m) in dx.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *d = T::zero();
            }
        }
        dx
    }

    fn branch_signature(&self) -> u64 {
        fnv(self.mask.iter().map(|&m| m as u64))
    }
}

// ---------------------------------------------------------------------------
// Dense

/// Fully connected layer over the flattened NHWC item. Output shape is
/// `n x 1 x 1 x units`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(vec![T::zero(); in_features * out_features]),
            bias: Param::new(vec![T::zero(); out_features]),
            input: None,
        }
    }
}

impl<T: Real> Layer<T> for Dense<T> {
    fn kind(&self) -> &'static str {
        "fc"
    }

    fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(input.n, 1, 1, self.out_features)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.shape().n;
        debug_assert_eq!(x.shape().item_len(), self.in_features);
        let mut out = vec![T::zero(); n * self.out_features];
        for row in out.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            false,
            T::one(),
            &mut out,
        );
        Tensor::from_vec(Shape::new(n, 1, 1, self.out_features), out).expect("dense shape")
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool, _rng: &mut dyn RngCore) -> Tensor<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("dense backward before forward");
        let n = x.shape().n;
        T::gemm(
            self.in_features,
            n,
            self.out_features,
            x.data(),
            true,
            dy.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.data().chunks_exact(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        let mut dx = vec![T::zero(); n * self.in_features];
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            dy.data(),
            false,
            &self.weight.value,
            true,
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(x.shape(), dx).expect("dense input shape")
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: kept units are scaled by `1/(1-rate)` during training;
/// evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Vec<T>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            mask: Vec::new(),
        }
    }
}

impl<T: Real> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn output_shape(&self, input: Shape) -> Shape {
        input
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut dyn RngCore) -> Tensor<T> {
        if !train || self.rate == 0.0 {
            self.mask = vec![T::one(); x.shape().len()];
            return x.clone();
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        self.mask = (0..x.shape().len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&self.mask) {
            *v = *v * m;
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(&self.mask) {
            *v = *v * m;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1);
        conv.weight.value.iter_mut().for_each(|w| *w = 1.0);
        let x = Tensor::from_vec(Shape::new(1, 3, 3, 1), vec![1.0; 9]).unwrap();
        let y = conv.forward(&x, false, &mut rng());
        assert_eq!(y.shape(), Shape::new(1, 3, 3, 1));
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(y.data()[edge], 6.0);
        }
    }

    #[test]
    fn conv_identity_filter() {
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1);
        conv.weight.value[4] = 1.0;
        let data: Vec<f64> = (0..20).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = Tensor::from_vec(Shape::new(1, 4, 5, 1), data).unwrap();
        assert_eq!(conv.infer(&x), x);
    }

    #[test]
    fn pool_sizes_follow_ceil_mode() {
        assert_eq!(pooled_len(17, 3, 2), 8);
        assert_eq!(pooled_len(8, 3, 2), 4);
        assert_eq!(pooled_len(9, 3, 2), 4);
        assert_eq!(pooled_len(4, 3, 2), 2);
        assert_eq!(pooled_len(2, 3, 2), 1);
    }

    #[test]
    fn pool_enumerated_windows() {
        let x = Tensor::from_vec(
            Shape::new(1, 4, 4, 1),
            (1..=16).map(f64::from).collect(),
        )
        .unwrap();
        let pool = MaxPool2d::new(3, 2);
        let y = Layer::<f64>::infer(&pool, &x);
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 1));
        assert_eq!(y.data(), &[11.0, 12.0, 15.0, 16.0]);
    }

    #[test]
    fn pool_constant_input() {
        let x = Tensor::from_vec(Shape::new(2, 17, 17, 3), vec![2.5f64; 2 * 289 * 3]).unwrap();
        let y = Layer::<f64>::infer(&MaxPool2d::new(3, 2), &x);
        assert_eq!(y.shape(), Shape::new(2, 8, 8, 3));
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let x = Tensor::from_vec(
            Shape::new(1, 4, 4, 1),
            (1..=16).map(f64::from).collect(),
        )
        .unwrap();
        let mut pool = MaxPool2d::new(3, 2);
        let _ = Layer::<f64>::forward(&mut pool, &x, true, &mut rng());
        let dy = Tensor::from_vec(Shape::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dx = pool.backward(&dy);
        let mut expect = vec![0.0; 16];
        expect[10] = 1.0;
        expect[11] = 2.0;
        expect[14] = 3.0;
        expect[15] = 4.0;
        assert_eq!(dx.data(), expect.as_slice());
    }

    #[test]
    fn lrn_single_channel_value() {
        let lrn = Lrn::<f64>::new(5, 1e-4, 0.75, 1.0);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let y = lrn.infer(&x);
        let expect = 1.0 / (1.0f64 + 1e-4 / 5.0).powf(0.75);
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[0] - 0.999985).abs() < 1e-6);
    }

    #[test]
    fn lrn_zero_alpha_is_identity() {
        let lrn = Lrn::<f64>::new(5, 0.0, 0.75, 1.0);
        let x = Tensor::from_vec(
            Shape::new(1, 2, 2, 6),
            (0..24).map(|v| v as f64 - 7.0).collect(),
        )
        .unwrap();
        assert_eq!(lrn.infer(&x), x);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut d = Dropout::<f32>::new(0.9);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.forward(&x, false, &mut rng()), x);
        assert_eq!(d.infer(&x), x);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut d = Dropout::<f64>::new(0.5);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1000), vec![1.0; 1000]).unwrap();
        let y = d.forward(&x, true, &mut rng());
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v == 2.0).count();
        assert!((400..600).contains(&kept));
    }
}
