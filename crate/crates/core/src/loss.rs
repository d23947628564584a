//! Training objective for the TEM: reconstruction (L1 + SSIM), sparsity on
//! the output, and the frozen SCM's cross-entropy.
//!
//! All per-image terms are means over pixels. Subgradients use
//! `sign(0) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scm::FrozenScm;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_C1: f64 = 0.02;
pub const SSIM_C2: f64 = 0.06;

/// Loss values for one image (or the mean over a batch).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_l1: f64,
    pub l_ssim: f64,
    pub l_t: f64,
    pub l_b: f64,
    pub l_c: f64,
    /// Weight of the sparsity term (1 for the joint loss).
    pub beta: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn assemble(l_l1: f64, l_ssim: f64, l_b: f64, l_c: f64, objective: Objective) -> Self {
        let l_t = l_l1 + l_ssim;
        Self {
            l_l1,
            l_ssim,
            l_t,
            l_b,
            l_c,
            beta: objective.beta,
            lambda: objective.lambda,
            total: l_t + objective.beta * l_b + objective.lambda * l_c,
        }
    }

    /// Component-wise mean; the total is rebuilt from the averaged parts.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self::assemble(
            avg(|b| b.l_l1),
            avg(|b| b.l_ssim),
            avg(|b| b.l_b),
            avg(|b| b.l_c),
            Objective {
                beta: first.beta,
                lambda: first.lambda,
            },
        ))
    }
}

/// Term weights. `lambda == 0` skips the SCM entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub beta: f64,
    pub lambda: f64,
}

impl Objective {
    /// The joint loss with unit weights.
    pub fn tbc() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
        }
    }

    /// Reconstruction only, for the ablation.
    pub fn target_only() -> Self {
        Self {
            beta: 0.0,
            lambda: 0.0,
        }
    }
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected a single-channel image".into(),
        }),
    }
}

fn same_plane(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = plane(a)?;
    if plane(b)? != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok((h, w))
}

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0f64;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
    let stride = w + 1;
    s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
}

/// Mean SSIM over every fully contained 11×11 box window, and optionally
/// its gradient with respect to `x`.
fn ssim_core(x: &[f32], y: &[f32], h: usize, w: usize, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: format!("SSIM needs at least {k}x{k} pixels"),
        });
    }
    let xv = |i: usize| x[i] as f64;
    let yv = |i: usize| y[i] as f64;
    let sx = integral(h, w, xv);
    let sy = integral(h, w, yv);
    let sxx = integral(h, w, |i| xv(i) * xv(i));
    let syy = integral(h, w, |i| yv(i) * yv(i));
    let sxy = integral(h, w, |i| xv(i) * yv(i));
    let (gh, gw) = (h - k + 1, w - k + 1);
    let n = (k * k) as f64;
    let mut total = 0f64;
    let mut coeff = if grad {
        Some((vec![0f64; gh * gw], vec![0f64; gh * gw], vec![0f64; gh * gw]))
    } else {
        None
    };
    for i in 0..gh {
        for j in 0..gw {
            let b = |s: &[f64]| box_sum(s, w, i, j, i + k, j + k) / n;
            let (mx, my) = (b(&sx), b(&sy));
            let vx = b(&sxx) - mx * mx;
            let vy = b(&syy) - my * my;
            let cxy = b(&sxy) - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let b1 = 2.0 * cxy + SSIM_C2;
            let c1 = mx * mx + my * my + SSIM_C1;
            let d1 = vx + vy + SSIM_C2;
            let s = (a1 * b1) / (c1 * d1);
            total += s;
            if let Some((alpha, beta, gamma)) = coeff.as_mut() {
                let t = 2.0 * s / n;
                alpha[i * gw + j] = t * (my / a1 - my / b1 - mx / c1 + mx / d1);
                beta[i * gw + j] = t / b1;
                gamma[i * gw + j] = -t / d1;
            }
        }
    }
    let windows = (gh * gw) as f64;
    let value = total / windows;
    let g = coeff.map(|(alpha, beta, gamma)| {
        let ia = integral(gh, gw, |i| alpha[i]);
        let ib = integral(gh, gw, |i| beta[i]);
        let ic = integral(gh, gw, |i| gamma[i]);
        let mut out = vec![0f64; h * w];
        for r in 0..h {
            let (i0, i1) = (r.saturating_sub(k - 1), r.min(gh - 1) + 1);
            for c in 0..w {
                let (j0, j1) = (c.saturating_sub(k - 1), c.min(gw - 1) + 1);
                let p = r * w + c;
                let a = box_sum(&ia, gw, i0, j0, i1, j1);
                let bb = box_sum(&ib, gw, i0, j0, i1, j1);
                let cc = box_sum(&ic, gw, i0, j0, i1, j1);
                out[p] = (a + bb * yv(p) + cc * xv(p)) / windows;
            }
        }
        out
    });
    Ok((value, g))
}

/// Structural similarity of two equally sized images.
pub fn ssim(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    if (x.width(), x.height()) != (y.width(), y.height()) {
        return Err(Error::ShapeMismatch {
            expected: vec![x.height(), x.width()],
            actual: vec![y.height(), y.width()],
        });
    }
    ssim_core(x.pixels(), y.pixels(), x.height(), x.width(), false).map(|(v, _)| v)
}

/// SSIM of two single-channel tensors (values unconstrained) with its
/// gradient with respect to `x`.
pub fn ssim_with_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let (h, w) = same_plane(x, y)?;
    let (v, g) = ssim_core(x.data(), y.data(), h, w, true)?;
    let g = g.unwrap().into_iter().map(|v| v as f32).collect();
    Ok((v, Tensor::new(x.shape().to_vec(), g)?))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its subgradient with respect to `pred`.
pub fn l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_plane(pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0f64;
    let mut g = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += (d as f64).abs();
        g.push((sign(d) as f64 / n) as f32);
    }
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), g)?))
}

/// Target reconstruction term: returns `(l_l1, l_ssim)` and the gradient
/// of their sum with respect to `pred`.
pub fn loss_t(pred: &Tensor, target: &Tensor) -> Result<((f64, f64), Tensor)> {
    let (l_l1, mut g) = l1(pred, target)?;
    let (s, gs) = ssim_with_grad(pred, target)?;
    for (a, b) in g.data_mut().iter_mut().zip(gs.data()) {
        *a -= b;
    }
    Ok(((l_l1, 1.0 - s), g))
}

/// Sparsity term: mean absolute value of the prediction.
pub fn loss_b(pred: &Tensor) -> Result<(f64, Tensor)> {
    plane(pred)?;
    let n = pred.len() as f64;
    let sum: f64 = pred.data().iter().map(|&v| (v as f64).abs()).sum();
    let g = pred.data().iter().map(|&v| (sign(v) as f64 / n) as f32).collect();
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), g)?))
}

/// Joint loss for one TEM output `pred` against target image `target` with
/// count label `y_t`. The SCM is consulted only when `objective.lambda > 0`.
pub fn loss_tbc(
    pred: &Tensor,
    target: &Tensor,
    scm: Option<&FrozenScm>,
    y_t: usize,
    objective: Objective,
) -> Result<(LossBreakdown, Tensor)> {
    if !(objective.lambda >= 0.0 && objective.beta >= 0.0) {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let ((l_l1, l_ssim), mut g) = loss_t(pred, target)?;
    let mut l_b = 0.0;
    if objective.beta > 0.0 {
        let (v, gb) = loss_b(pred)?;
        l_b = v;
        for (a, b) in g.data_mut().iter_mut().zip(gb.data()) {
            *a += (objective.beta * *b as f64) as f32;
        }
    }
    let mut l_c = 0.0;
    if objective.lambda > 0.0 {
        let scm = scm.ok_or_else(|| Error::Config("a frozen SCM is required when lambda > 0".into()))?;
        let (h, w) = plane(pred)?;
        let x = pred.clone().reshape(vec![1, h, w])?;
        let sg = scm.input_gradient(&x, y_t)?;
        l_c = sg.loss;
        for (a, b) in g.data_mut().iter_mut().zip(sg.d_input.data()) {
            *a += (objective.lambda * *b as f64) as f32;
        }
    }
    Ok((LossBreakdown::assemble(l_l1, l_ssim, l_b, l_c, objective), g))
}
