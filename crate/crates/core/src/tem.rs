//! Target Extraction Module: a bias-free encoder-decoder that maps an
//! observed frame to its target-only image.
//!
//! Layout for base channels `BC` and depth `L`:
//!
//! ```text
//! x0    = relu(conv 1 -> BC)
//! d_l   = maxpool(relu(conv BC*2^(l-1) -> BC*2^l))        l = 1..L
//! u_L   = d_L
//! u_l-1 = relu(conv BC*2^l -> BC*2^(l-1) (upsample(u_l))) + d_l-1,   d_0 = x0
//! out   = conv BC -> 1 (u_0)
//! ```
//!
//! Every convolution is 3×3 with replicate padding and no bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, ScoreMap};
use crate::nn::{self, Conv2d, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

const MEBI: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub bc: usize,
    pub levels: usize,
    pub height: usize,
    pub width: usize,
}

impl NetConfig {
    pub fn new(bc: usize, levels: usize, height: usize, width: usize) -> Result<Self> {
        let cfg = Self {
            bc,
            levels,
            height,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bc == 0 || self.levels == 0 {
            return Err(Error::Config(format!(
                "BC and L must be at least 1 (got BC={}, L={})",
                self.bc, self.levels
            )));
        }
        if self.levels > 16 {
            return Err(Error::Config(format!("L={} is too deep", self.levels)));
        }
        check_extents(self.levels, self.height, self.width)
    }
}

fn check_extents(levels: usize, height: usize, width: usize) -> Result<()> {
    let m = 1usize << levels;
    // the coarsest convolution runs at H / 2^(L-1) and needs a 3x3 window
    if height % m != 0 || width % m != 0 || height < 2 * m || width < 2 * m {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: format!("image extents must be multiples of 2^L = {m} and at least {}", 2 * m),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemNet {
    bc: usize,
    levels: usize,
    input_conv: Conv2d,
    /// `down[i]` raises `BC*2^i` to `BC*2^(i+1)` channels.
    down: Vec<Conv2d>,
    /// Construction order: `up[j]` serves level `L - j`.
    up: Vec<Conv2d>,
    output_conv: Conv2d,
}

pub fn build_tem(cfg: &NetConfig, rng: &mut Rng) -> Result<TemNet> {
    cfg.validate()?;
    let (bc, l) = (cfg.bc, cfg.levels);
    let conv = |ci, co, rng: &mut Rng| Conv2d::new(ci, co, false, Padding::Replicate, rng);
    let input_conv = conv(1, bc, rng);
    let down = (0..l).map(|i| conv(bc << i, bc << (i + 1), rng)).collect();
    let up = (0..l)
        .map(|j| {
            let level = l - j;
            conv(bc << level, bc << (level - 1), rng)
        })
        .collect();
    let output_conv = conv(bc, 1, rng);
    Ok(TemNet {
        bc,
        levels: l,
        input_conv,
        down,
        up,
        output_conv,
    })
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct TemCache {
    input: Tensor,
    pre_in: Tensor,
    /// Level inputs `d_0 = x0, d_1, ..., d_L`.
    skips: Vec<Tensor>,
    down_pre: Vec<Tensor>,
    down_arg: Vec<Vec<u32>>,
    up_in: Vec<Tensor>,
    up_pre: Vec<Tensor>,
    fused: Tensor,
}

impl TemNet {
    /// Reassembles a network from layers in construction order
    /// (input, down 1..L, up L..1, output).
    pub fn from_layers(bc: usize, levels: usize, layers: Vec<Conv2d>) -> Result<Self> {
        if bc == 0 || levels == 0 || layers.len() != 2 * levels + 2 {
            return Err(Error::Config(format!(
                "TEM with L={levels} needs {} layers, got {}",
                2 * levels + 2,
                layers.len()
            )));
        }
        let mut it = layers.into_iter();
        let input_conv = it.next().unwrap();
        let down: Vec<_> = it.by_ref().take(levels).collect();
        let up: Vec<_> = it.by_ref().take(levels).collect();
        let output_conv = it.next().unwrap();
        let mut shapes = vec![(1, bc)];
        shapes.extend((0..levels).map(|i| (bc << i, bc << (i + 1))));
        shapes.extend((0..levels).map(|j| (bc << (levels - j), bc << (levels - j - 1))));
        shapes.push((bc, 1));
        let net = Self {
            bc,
            levels,
            input_conv,
            down,
            up,
            output_conv,
        };
        for (layer, (ci, co)) in net.layers().into_iter().zip(shapes) {
            if layer.c_in() != ci || layer.c_out() != co || layer.bias().is_some() || layer.padding() != Padding::Replicate {
                return Err(Error::Config(format!(
                    "TEM layer must be a bias-free replicate-padded {ci}->{co} conv"
                )));
            }
        }
        Ok(net)
    }

    pub fn bc(&self) -> usize {
        self.bc
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn layers(&self) -> Vec<&Conv2d> {
        std::iter::once(&self.input_conv)
            .chain(&self.down)
            .chain(&self.up)
            .chain(std::iter::once(&self.output_conv))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(Conv2d::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.input_conv)
            .chain(&mut self.down)
            .chain(&mut self.up)
            .chain(std::iter::once(&mut self.output_conv))
            .flat_map(Conv2d::params_mut)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|c| c.param_count()).sum()
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        check_extents(self.levels, height, width)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Forward pass over a `[1, H, W]` input, returning `[1, H, W]`.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, TemCache)> {
        match *x.shape() {
            [1, h, w] => self.check_input(h, w)?,
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "TEM input must be [1, H, W]".into(),
                })
            }
        }
        let pre_in = self.input_conv.forward(x)?;
        let mut skips = vec![nn::relu(&pre_in)];
        let mut down_pre = Vec::with_capacity(self.levels);
        let mut down_arg = Vec::with_capacity(self.levels);
        for conv in &self.down {
            let pre = conv.forward(skips.last().unwrap())?;
            let (pooled, arg) = nn::maxpool2(&nn::relu(&pre))?;
            down_pre.push(pre);
            down_arg.push(arg);
            skips.push(pooled);
        }
        let mut u = skips[self.levels].clone();
        let mut up_in = Vec::with_capacity(self.levels);
        let mut up_pre = Vec::with_capacity(self.levels);
        for (j, conv) in self.up.iter().enumerate() {
            let inp = nn::upsample_nearest2(&u)?;
            let pre = conv.forward(&inp)?;
            u = nn::relu(&pre).add(&skips[self.levels - j - 1])?;
            up_in.push(inp);
            up_pre.push(pre);
        }
        let out = self.output_conv.forward(&u)?;
        Ok((
            out,
            TemCache {
                input: x.clone(),
                pre_in,
                skips,
                down_pre,
                down_arg,
                up_in,
                up_pre,
                fused: u,
            },
        ))
    }

    /// Parameter gradients (in [`TemNet::params`] order) for upstream
    /// gradient `d_out` on the output map.
    pub fn backward(&self, cache: &TemCache, d_out: &Tensor) -> Result<Vec<Tensor>> {
        let l = self.levels;
        let g_out = self.output_conv.backward(&cache.fused, d_out, true, true)?;
        let mut d_skip: Vec<Option<Tensor>> = vec![None; l + 1];
        let mut d_u = g_out.d_input.unwrap();
        let mut up_grads = Vec::with_capacity(l);
        for j in (0..l).rev() {
            let level = l - j;
            accumulate(&mut d_skip[level - 1], &d_u)?;
            let d_pre = nn::relu_backward(&cache.up_pre[j], &d_u)?;
            let g = self.up[j].backward(&cache.up_in[j], &d_pre, true, true)?;
            d_u = nn::upsample_nearest2_backward(g.d_input.as_ref().unwrap())?;
            up_grads.push(g.d_params);
        }
        up_grads.reverse();
        accumulate(&mut d_skip[l], &d_u)?;
        let mut down_grads = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let d_pooled = d_skip[i + 1].take().unwrap();
            let d_act = nn::maxpool2_backward(&d_pooled, &cache.down_arg[i], cache.down_pre[i].shape())?;
            let d_pre = nn::relu_backward(&cache.down_pre[i], &d_act)?;
            let g = self.down[i].backward(&cache.skips[i], &d_pre, true, true)?;
            accumulate(&mut d_skip[i], g.d_input.as_ref().unwrap())?;
            down_grads.push(g.d_params);
        }
        down_grads.reverse();
        let d_x0 = d_skip[0].take().unwrap();
        let d_pre_in = nn::relu_backward(&cache.pre_in, &d_x0)?;
        let g_in = self.input_conv.backward(&cache.input, &d_pre_in, false, true)?;
        let mut grads = g_in.d_params;
        grads.extend(down_grads.into_iter().flatten());
        grads.extend(up_grads.into_iter().flatten());
        grads.extend(g_out.d_params);
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

/// Runs the network on one frame. The raw output is unconstrained; detection
/// min-max normalises it.
pub fn extract(net: &TemNet, f_d: &GrayImage) -> Result<ScoreMap> {
    let (w, h) = (f_d.width(), f_d.height());
    let y = net.forward(&f_d.to_tensor())?;
    if !y.is_finite() {
        return Err(Error::NonFinite("TEM output".into()));
    }
    ScoreMap::new(w, h, y.into_data())
}

/// Closed-form storage and compute budget; all counts are element counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetReport {
    pub ops: f64,
    pub m_m: f64,
    pub m_p: f64,
    pub m_total: f64,
}

impl BudgetReport {
    /// The same quantities in units of 2^20.
    pub fn in_mebi(&self) -> BudgetReport {
        BudgetReport {
            ops: self.ops / MEBI,
            m_m: self.m_m / MEBI,
            m_p: self.m_p / MEBI,
            m_total: self.m_total / MEBI,
        }
    }
}

pub fn budget(cfg: &NetConfig) -> BudgetReport {
    let bc = cfg.bc as f64;
    let l = cfg.levels as i32;
    let hw = (cfg.height * cfg.width) as f64;
    let ops = 4.5 * bc * bc * hw * l as f64;
    let m_m = (bc * (4.0 - 6.0 / 2f64.powi(l)) + 2.0) * hw;
    let m_p = 12.0 * (4f64.powi(l) - 1.0) * bc * bc + 18.0 * bc;
    BudgetReport {
        ops,
        m_m,
        m_p,
        m_total: m_m + m_p,
    }
}

/// Multiply-add census of the down and up module convolutions, each taken
/// at the resolution it actually runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpsCensus {
    pub down: u64,
    pub up: u64,
}

impl OpsCensus {
    pub fn modules(&self) -> u64 {
        self.down + self.up
    }
}

pub fn count_actual_ops(net: &TemNet, height: usize, width: usize) -> OpsCensus {
    let l = net.levels;
    let down = (0..l)
        .map(|i| net.down[i].macs(height >> i, width >> i))
        .sum();
    let up = (0..l)
        .map(|j| {
            let level = l - j;
            net.up[j].macs(height >> (level - 1), width >> (level - 1))
        })
        .sum();
    OpsCensus { down, up }
}
