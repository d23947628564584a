//! Layer kernels with explicit forward and backward passes.
//!
//! Feature maps are `[C, H, W]` tensors. Convolution is a 3×3, stride-1
//! cross-correlation (no kernel flip) with one pixel of padding, lowered to
//! a single GEMM over an im2col buffer. Weights are laid out
//! `[C_out, C_in, 3, 3]`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Edge pixels are repeated outward, so a constant map stays constant.
    Replicate,
}

/// Gradients produced by a layer's backward pass: the input gradient (when
/// requested) and one tensor per parameter, in the layer's parameter order.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_input: Option<Tensor>,
    pub d_params: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: Padding,
}

fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected a [C, H, W] feature map".into(),
        }),
    }
}

impl Conv2d {
    /// He-uniform initialised weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn new(
        c_in: usize,
        c_out: usize,
        with_bias: bool,
        padding: Padding,
        rng: &mut Rng,
    ) -> Self {
        let bound = (6.0 / (c_in * TAPS) as f32).sqrt();
        let data = (0..c_out * c_in * TAPS)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self {
            weight: Tensor::from_raw(vec![c_out, c_in, KERNEL, KERNEL], data),
            bias: with_bias.then(|| Tensor::zeros(&[c_out])),
            padding,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, padding: Padding) -> Result<Self> {
        let [c_out, _, kh, kw] = *weight.shape() else {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "conv weight must be [C_out, C_in, 3, 3]".into(),
            });
        };
        if kh != KERNEL || kw != KERNEL {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "only 3x3 kernels are supported".into(),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::ShapeMismatch {
                    expected: vec![c_out],
                    actual: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            weight,
            bias,
            padding,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Multiply-adds for one forward pass over an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (TAPS * h * w * self.c_in() * self.c_out()) as u64
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.check_input(x)?;
        let hw = h * w;
        let col = im2col(x.data(), c, h, w, self.padding);
        let co = self.c_out();
        let mut out = vec![0f32; co * hw];
        if let Some(b) = &self.bias {
            for (o, &bv) in out.chunks_exact_mut(hw).zip(b.data()) {
                o.fill(bv);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            co,
            c * TAPS,
            hw,
            self.weight.data(),
            Layout::Normal,
            &col,
            Layout::Normal,
            beta,
            &mut out,
        );
        Ok(Tensor::from_raw(vec![co, h, w], out))
    }

    /// Backward pass for input `x` and upstream gradient `d_out`. Parameter
    /// gradients are skipped when `param_grads` is false (frozen layers).
    pub fn backward(
        &self,
        x: &Tensor,
        d_out: &Tensor,
        input_grad: bool,
        param_grads: bool,
    ) -> Result<LayerGrad> {
        let (c, h, w) = self.check_input(x)?;
        let co = self.c_out();
        if d_out.shape() != [co, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![co, h, w],
                actual: d_out.shape().to_vec(),
            });
        }
        let hw = h * w;
        let k = c * TAPS;
        let mut d_params = Vec::new();
        if param_grads {
            let col = im2col(x.data(), c, h, w, self.padding);
            let mut dw = vec![0f32; co * k];
            // dW[co, k] = dOut[co, hw] * col[k, hw]^T
            gemm(
                co,
                hw,
                k,
                d_out.data(),
                Layout::Normal,
                &col,
                Layout::Transposed { ld: hw },
                0.0,
                &mut dw,
            );
            d_params.push(Tensor::from_raw(self.weight.shape().to_vec(), dw));
            if self.bias.is_some() {
                let db = d_out
                    .data()
                    .chunks_exact(hw)
                    .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                d_params.push(Tensor::from_raw(vec![co], db));
            }
        }
        let d_input = if input_grad {
            let mut dcol = vec![0f32; k * hw];
            // dCol[k, hw] = W[co, k]^T * dOut[co, hw]
            gemm(
                k,
                co,
                hw,
                self.weight.data(),
                Layout::Transposed { ld: k },
                d_out.data(),
                Layout::Normal,
                0.0,
                &mut dcol,
            );
            Some(Tensor::from_raw(
                vec![c, h, w],
                col2im(&dcol, c, h, w, self.padding),
            ))
        } else {
            None
        };
        Ok(LayerGrad { d_input, d_params })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = chw(x)?;
        if c != self.c_in() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.c_in(), h, w],
                actual: x.shape().to_vec(),
            });
        }
        if h < KERNEL || w < KERNEL {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "convolution input must be at least 3x3".into(),
            });
        }
        Ok((c, h, w))
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    /// The operand is stored as the transpose of the logical matrix with the
    /// given row length.
    Transposed {
        ld: usize,
    },
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed { ld } => (1, ld as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed { ld } => (1, ld as isize),
    };
    // SAFETY: the slice lengths were checked against m, k, n above and the
    // strides describe dense row-major (or transposed) storage inside them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source coordinate for output coordinate `o` and tap offset `t ∈ {0,1,2}`,
/// or `None` when it falls in zero padding.
#[inline]
fn src_index(o: usize, t: usize, n: usize, padding: Padding) -> Option<usize> {
    let s = o as isize + t as isize - 1;
    if s >= 0 && (s as usize) < n {
        Some(s as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Replicate => Some(s.clamp(0, n as isize - 1) as usize),
        }
    }
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, padding: Padding) -> Vec<f32> {
    let hw = h * w;
    let mut col = vec![0f32; c * TAPS * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((ch * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = src_index(y, ky, h, padding) else {
                        continue;
                    };
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // interior columns are a shifted copy
                    let (lo, hi) = (usize::from(kx == 0), w - usize::from(kx == 2));
                    dst[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                    if lo == 1 {
                        if let Some(sx) = src_index(0, kx, w, padding) {
                            dst[0] = src[sx];
                        }
                    }
                    if hi == w - 1 {
                        if let Some(sx) = src_index(w - 1, kx, w, padding) {
                            dst[w - 1] = src[sx];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input,
/// folding replicated border taps onto the edge pixels they copied.
fn col2im(dcol: &[f32], c: usize, h: usize, w: usize, padding: Padding) -> Vec<f32> {
    let hw = h * w;
    let mut dx = vec![0f32; c * hw];
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &dcol[((ch * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = src_index(y, ky, h, padding) else {
                        continue;
                    };
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    let (lo, hi) = (usize::from(kx == 0), w - usize::from(kx == 2));
                    for (d, s) in dst[lo + kx - 1..hi + kx - 1].iter_mut().zip(&src[lo..hi]) {
                        *d += *s;
                    }
                    if lo == 1 {
                        if let Some(sx) = src_index(0, kx, w, padding) {
                            dst[sx] += src[0];
                        }
                    }
                    if hi == w - 1 {
                        if let Some(sx) = src_index(w - 1, kx, w, padding) {
                            dst[sx] += src[w - 1];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling with stride 2. Returns the pooled map and, for each
/// output element, the flat input index of the maximum (first in scan order
/// on ties).
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = chw(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "max pooling needs even extents".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xo + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_raw(vec![c, oh, ow], out), idx))
}

pub fn maxpool2_backward(d_out: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Result<Tensor> {
    if argmax.len() != d_out.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![argmax.len()],
            actual: d_out.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    let buf = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(d_out.data()) {
        buf[i as usize] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour ×2 upsampling: every pixel becomes a 2×2 block.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, oh, ow], out))
}

/// Adjoint of [`upsample_nearest2`]: sums each 2×2 block of gradients.
pub fn upsample_nearest2_backward(d_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = chw(d_out)?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: d_out.shape().to_vec(),
            reason: "upsampled gradient must have even extents".into(),
        });
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0f32; c * h * w];
    let d = d_out.data();
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                dx[ch * h * w + (y / 2) * w + xo / 2] += d[ch * oh * ow + y * ow + xo];
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, h, w], dx))
}

fn avgpool_extents(
    shape: &[usize],
    k: usize,
    s: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let [c, h, w] = *shape else {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected a [C, H, W] feature map".into(),
        });
    };
    if k == 0 || s == 0 || h < k || w < k || (h - k) % s != 0 || (w - k) % s != 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("average pool k={k} s={s} does not tile the input"),
        });
    }
    Ok((c, h, w, (h - k) / s + 1, (w - k) / s + 1))
}

/// Average pooling without padding.
pub fn avgpool(x: &Tensor, k: usize, s: usize) -> Result<Tensor> {
    let (c, h, w, oh, ow) = avgpool_extents(x.shape(), k, s)?;
    let d = x.data();
    let norm = (k * k) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f64;
                for y in oy * s..oy * s + k {
                    for xx in ox * s..ox * s + k {
                        acc += d[ch * h * w + y * w + xx] as f64;
                    }
                }
                out.push((acc / norm) as f32);
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, oh, ow], out))
}

pub fn avgpool_backward(
    d_out: &Tensor,
    input_shape: &[usize],
    k: usize,
    s: usize,
) -> Result<Tensor> {
    let (c, h, w, oh, ow) = avgpool_extents(input_shape, k, s)?;
    if d_out.shape() != [c, oh, ow] {
        return Err(Error::ShapeMismatch {
            expected: vec![c, oh, ow],
            actual: d_out.shape().to_vec(),
        });
    }
    let scale = 1.0 / (k * k) as f32;
    let mut dx = vec![0f32; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out.data()[ch * oh * ow + oy * ow + ox] * scale;
                for y in oy * s..oy * s + k {
                    for xx in ox * s..ox * s + k {
                        dx[ch * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(input_shape.to_vec(), dx))
}

/// Fully-connected affine map `W·x + b` over a flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [n_out, _] = *weight.shape() else {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "linear weight must be [out, in]".into(),
            });
        };
        if bias.shape() != [n_out] {
            return Err(Error::ShapeMismatch {
                expected: vec![n_out],
                actual: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fully_connected(&self.weight, &self.bias, x)
    }

    pub fn backward(&self, x: &Tensor, d_out: &Tensor, param_grads: bool) -> Result<LayerGrad> {
        let (n_out, n_in) = (self.n_out(), self.n_in());
        if x.len() != n_in || d_out.len() != n_out {
            return Err(Error::ShapeMismatch {
                expected: vec![n_in, n_out],
                actual: vec![x.len(), d_out.len()],
            });
        }
        let w = self.weight.data();
        let g = d_out.data();
        let dx = (0..n_in)
            .map(|i| {
                (0..n_out)
                    .map(|o| w[o * n_in + i] as f64 * g[o] as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let d_input = Some(Tensor::from_raw(x.shape().to_vec(), dx));
        let d_params = if param_grads {
            let dw = g
                .iter()
                .flat_map(|&go| x.data().iter().map(move |&xi| go * xi))
                .collect();
            vec![
                Tensor::from_raw(vec![n_out, n_in], dw),
                Tensor::from_raw(vec![n_out], g.to_vec()),
            ]
        } else {
            Vec::new()
        };
        Ok(LayerGrad { d_input, d_params })
    }
}

/// `W·x + b` for `W: [out, in]`, `b: [out]` and any `x` holding `in` values.
pub fn fully_connected(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let [n_out, n_in] = *w.shape() else {
        return Err(Error::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "weight must be [out, in]".into(),
        });
    };
    if x.len() != n_in || b.len() != n_out {
        return Err(Error::ShapeMismatch {
            expected: vec![n_out, n_in],
            actual: vec![b.len(), x.len()],
        });
    }
    let out = w
        .data()
        .chunks_exact(n_in)
        .zip(b.data())
        .map(|(row, &bias)| {
            (row.iter()
                .zip(x.data())
                .map(|(&a, &v)| a as f64 * v as f64)
                .sum::<f64>()
                + bias as f64) as f32
        })
        .collect();
    Ok(Tensor::from_raw(vec![n_out], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_raw(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Gradient of ReLU given its *input*; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if x.shape() != d_out.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            actual: d_out.shape().to_vec(),
        });
    }
    Ok(Tensor::from_raw(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(d_out.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// Max-subtracted softmax, evaluated in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Vector-Jacobian product of softmax: `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(p: &[f64], d_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(d_p).map(|(a, b)| a * b).sum();
    p.iter().zip(d_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Cross-entropy of softmax(logits) against `label`, with its logit gradient
/// `p − onehot(label)`.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<(f64, Vec<f32>)> {
    if label >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "label {label} with {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + logits
        .iter()
        .map(|&z| (z as f64 - m).exp())
        .sum::<f64>()
        .ln();
    let loss = lse - logits[label] as f64;
    let p = softmax(logits);
    let grad = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| (pi - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss, grad))
}
