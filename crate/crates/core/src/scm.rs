//! Semantic Constraint Module: a small CNN that predicts how many targets a
//! target image contains. It is trained first on clean target images, then
//! frozen and used only to push a classification gradient into the TEM.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{self, Conv2d, Linear, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::weights;

/// Output channels of the four conv blocks.
pub const CHANNELS: [usize; 4] = [32, 64, 32, 16];
/// Shipped class count: 0, 1, 2 or 3 targets.
pub const DEFAULT_CLASSES: usize = 4;
const AVG_K: usize = 4;
/// Four 2x2 max pools then a stride-4 average pool.
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ScmNet {
    convs: Vec<Conv2d>,
    fc: Linear,
}

/// Length of the flattened average-pool output for an `h × w` input.
pub fn fc_inputs(height: usize, width: usize) -> Result<usize> {
    if height == 0 || width == 0 || height % INPUT_MULTIPLE != 0 || width % INPUT_MULTIPLE != 0 {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: format!("SCM input extents must be positive multiples of {INPUT_MULTIPLE}"),
        });
    }
    Ok(CHANNELS[3] * (height / INPUT_MULTIPLE) * (width / INPUT_MULTIPLE))
}

/// Builds an SCM for `height × width` inputs. Convolutions are He-uniform
/// with zero biases; the classifier starts at zero so every class begins
/// equally likely.
pub fn build_scm(classes: usize, height: usize, width: usize, rng: &mut Rng) -> Result<ScmNet> {
    if classes < 2 {
        return Err(Error::Config(format!("SCM needs at least 2 classes, got {classes}")));
    }
    let fc_in = fc_inputs(height, width)?;
    let mut c_in = 1;
    let convs = CHANNELS
        .iter()
        .map(|&c_out| {
            let conv = Conv2d::new(c_in, c_out, true, Padding::Zero, rng);
            c_in = c_out;
            conv
        })
        .collect();
    Ok(ScmNet {
        convs,
        fc: Linear::zeros(fc_in, classes),
    })
}

#[derive(Debug, Clone)]
pub struct ScmCache {
    /// Inputs of each conv block.
    block_in: Vec<Tensor>,
    pre: Vec<Tensor>,
    arg: Vec<Vec<u32>>,
    pooled: Tensor,
    flat: Tensor,
}

/// Result of one forward/backward pass through the SCM.
#[derive(Debug, Clone)]
pub struct ScmGrad {
    pub loss: f64,
    pub logits: Vec<f32>,
    pub d_input: Tensor,
    /// Empty when parameter gradients were not requested.
    pub d_params: Vec<Tensor>,
}

impl ScmNet {
    pub fn from_parts(convs: Vec<Conv2d>, fc: Linear) -> Result<Self> {
        if convs.len() != CHANNELS.len() {
            return Err(Error::Config(format!("SCM needs {} conv blocks", CHANNELS.len())));
        }
        let mut c_in = 1;
        for (conv, &c_out) in convs.iter().zip(&CHANNELS) {
            if conv.c_in() != c_in || conv.c_out() != c_out || conv.bias().is_none() || conv.padding() != Padding::Zero {
                return Err(Error::Config(format!(
                    "SCM block must be a biased zero-padded {c_in}->{c_out} conv"
                )));
            }
            c_in = c_out;
        }
        if fc.n_in() % CHANNELS[3] != 0 || fc.n_out() < 2 {
            return Err(Error::Config(format!(
                "SCM classifier {}x{} is not compatible with the conv stack",
                fc.n_out(),
                fc.n_in()
            )));
        }
        Ok(Self { convs, fc })
    }

    pub fn classes(&self) -> usize {
        self.fc.n_out()
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.convs
            .iter()
            .flat_map(Conv2d::params)
            .chain(self.fc.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(Conv2d::params_mut)
            .chain(self.fc.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let n = fc_inputs(height, width)?;
        if n != self.fc.n_in() {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!(
                    "this SCM was built for inputs flattening to {} features, got {n}",
                    self.fc.n_in()
                ),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Vec<f32>, ScmCache)> {
        match *x.shape() {
            [1, h, w] => self.check_input(h, w)?,
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "SCM input must be [1, H, W]".into(),
                })
            }
        }
        let mut block_in = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut arg = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let p = conv.forward(&h)?;
            let (pooled, a) = nn::maxpool2(&nn::relu(&p))?;
            block_in.push(std::mem::replace(&mut h, pooled));
            pre.push(p);
            arg.push(a);
        }
        let avg = nn::avgpool(&h, AVG_K, AVG_K)?;
        let n = avg.len();
        let flat = avg.reshape(vec![n])?;
        let logits = self.fc.forward(&flat)?.into_data();
        Ok((
            logits,
            ScmCache {
                block_in,
                pre,
                arg,
                pooled: h,
                flat,
            },
        ))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.forward_cached(x).map(|(l, _)| l)
    }

    /// Cross-entropy against `label` with the gradient on the input image.
    /// Parameter gradients are produced only when `param_grads` is set, so a
    /// frozen SCM never computes them.
    pub fn forward_backward(&self, x: &Tensor, label: usize, param_grads: bool) -> Result<ScmGrad> {
        if label >= self.classes() {
            return Err(Error::OutOfRange(format!(
                "label {label} with {} classes",
                self.classes()
            )));
        }
        let (logits, cache) = self.forward_cached(x)?;
        let (loss, d_logits) = nn::cross_entropy(&logits, label)?;
        let d_logits = Tensor::new(vec![d_logits.len()], d_logits)?;
        let g_fc = self.fc.backward(&cache.flat, &d_logits, param_grads)?;
        let d_flat = g_fc.d_input.unwrap();
        let d_avg = d_flat.reshape(avg_shape(cache.pooled.shape()))?;
        let mut d = nn::avgpool_backward(&d_avg, cache.pooled.shape(), AVG_K, AVG_K)?;
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for i in (0..self.convs.len()).rev() {
            let d_act = nn::maxpool2_backward(&d, &cache.arg[i], cache.pre[i].shape())?;
            let d_pre = nn::relu_backward(&cache.pre[i], &d_act)?;
            let g = self.convs[i].backward(&cache.block_in[i], &d_pre, true, param_grads)?;
            d = g.d_input.unwrap();
            conv_grads.push(g.d_params);
        }
        conv_grads.reverse();
        let d_params = if param_grads {
            conv_grads.into_iter().flatten().chain(g_fc.d_params).collect()
        } else {
            Vec::new()
        };
        Ok(ScmGrad {
            loss,
            logits,
            d_input: d,
            d_params,
        })
    }
}

fn avg_shape(pooled: &[usize]) -> Vec<usize> {
    vec![pooled[0], (pooled[1] - AVG_K) / AVG_K + 1, (pooled[2] - AVG_K) / AVG_K + 1]
}

/// Class probabilities for a target image.
pub fn classify(net: &ScmNet, f_t: &GrayImage) -> Result<Vec<f64>> {
    Ok(nn::softmax(&net.logits(&f_t.to_tensor())?))
}

pub fn scm_forward_backward(net: &ScmNet, f_t: &Tensor, y_t: usize) -> Result<ScmGrad> {
    net.forward_backward(f_t, y_t, true)
}

/// Read-only SCM handle for the TEM stage. The weight checksum is taken on
/// construction so callers can confirm nothing changed afterwards.
#[derive(Debug, Clone)]
pub struct FrozenScm {
    net: ScmNet,
    hash: u64,
}

impl FrozenScm {
    pub fn new(net: ScmNet) -> Self {
        let hash = weights::scm_hash(&net);
        Self { net, hash }
    }

    pub fn net(&self) -> &ScmNet {
        &self.net
    }

    pub fn recorded_hash(&self) -> u64 {
        self.hash
    }

    pub fn current_hash(&self) -> u64 {
        weights::scm_hash(&self.net)
    }

    pub fn into_inner(self) -> ScmNet {
        self.net
    }

    /// Input gradient of the cross-entropy; parameter gradients are skipped.
    pub fn input_gradient(&self, x: &Tensor, label: usize) -> Result<ScmGrad> {
        self.net.forward_backward(x, label, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn random_scm(seed: u64) -> ScmNet {
        let mut rng = Rng::new(seed);
        let mut net = build_scm(4, 64, 64, &mut rng).unwrap();
        for p in net.params_mut().into_iter().filter(|p| p.rank() == 1) {
            for v in p.data_mut() {
                *v = rng.uniform(0.1, 0.3);
            }
        }
        for p in net.fc.params_mut() {
            for v in p.data_mut() {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
        net
    }

    #[test]
    fn channel_trace_and_fc_width() {
        let net = build_scm(4, 256, 256, &mut Rng::new(0)).unwrap();
        let outs: Vec<usize> = net.convs().iter().map(|c| c.c_out()).collect();
        assert_eq!(outs, vec![32, 64, 32, 16]);
        assert_eq!(net.fc().n_in(), 256);
        assert_eq!(build_scm(4, 64, 64, &mut Rng::new(0)).unwrap().fc().n_in(), 16);
        assert!(build_scm(4, 96, 64, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn untrained_scm_is_uniform() {
        let net = build_scm(4, 64, 64, &mut Rng::new(1)).unwrap();
        let p = classify(&net, &GrayImage::zeros(64, 64)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let g = scm_forward_backward(&net, &Tensor::zeros(&[1, 64, 64]), 2).unwrap();
        assert!((g.loss - 4f64.ln()).abs() < 1e-9);
        assert!(scm_forward_backward(&net, &Tensor::zeros(&[1, 64, 64]), 4).is_err());
        assert!(classify(&net, &GrayImage::zeros(128, 64)).is_err());
    }

    #[test]
    fn saturated_logits_give_vanishing_loss() {
        let mut net = build_scm(4, 64, 64, &mut Rng::new(2)).unwrap();
        let b = net.fc.params_mut().pop().unwrap();
        b.data_mut().copy_from_slice(&[60.0, -60.0, -60.0, -60.0]);
        let g = net.forward_backward(&Tensor::zeros(&[1, 64, 64]), 0, true).unwrap();
        assert!(g.loss < 1e-12);
    }

    /// Forward-mode derivative of the loss along `v`, reusing the activation
    /// pattern of the base pass. The network is piecewise linear up to the
    /// softmax, so this is exact inside the current linear region.
    fn tangent(net: &ScmNet, x: &Tensor, label: usize, v: &Tensor) -> f64 {
        let (logits, cache) = net.forward_cached(x).unwrap();
        let mut t = v.clone();
        for (i, conv) in net.convs.iter().enumerate() {
            let linear = Conv2d::from_parts(conv.weight().clone(), None, Padding::Zero).unwrap();
            let mut dt = linear.forward(&t).unwrap();
            for (d, &p) in dt.data_mut().iter_mut().zip(cache.pre[i].data()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            let [c, h, w] = *dt.shape() else { unreachable!() };
            let pooled = cache.arg[i].iter().map(|&j| dt.data()[j as usize]).collect();
            t = Tensor::new(vec![c, h / 2, w / 2], pooled).unwrap();
        }
        let avg = nn::avgpool(&t, AVG_K, AVG_K).unwrap();
        let n = avg.len();
        let d_logits = nn::fully_connected(net.fc.weight(), &Tensor::zeros(&[net.classes()]), &avg.reshape(vec![n]).unwrap()).unwrap();
        let p = nn::softmax(&logits);
        p.iter()
            .enumerate()
            .map(|(k, &pk)| (pk - if k == label { 1.0 } else { 0.0 }) * d_logits.data()[k] as f64)
            .sum()
    }

    #[test]
    fn input_gradient_matches_tangent_propagation() {
        let net = random_scm(3);
        let mut rng = Rng::new(4);
        let x = Tensor::new(vec![1, 64, 64], (0..4096).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let g = net.forward_backward(&x, 1, false).unwrap();
        assert!(g.d_params.is_empty());
        for _ in 0..8 {
            let v = Tensor::new(vec![1, 64, 64], (0..4096).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let forward = tangent(&net, &x, 1, &v);
            let reverse: f64 = g.d_input.data().iter().zip(v.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((forward - reverse).abs() <= 1e-4 * forward.abs().max(1e-3), "{forward} vs {reverse}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = random_scm(3);
        let mut rng = Rng::new(5);
        let x = Tensor::new(vec![1, 64, 64], (0..4096).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let g = net.forward_backward(&x, 1, false).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..40 {
            let i = rng.index(4096);
            let eps = 1e-3;
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let lp = net.forward_backward(&xp, 1, false).unwrap().loss;
            let lm = net.forward_backward(&xm, 1, false).unwrap().loss;
            numeric.push(((lp - lm) / (xp.data()[i] - xm.data()[i]) as f64) as f32);
            analytic.push(g.d_input.data()[i]);
        }
        // four pooling stages in f32: step noise and crossed kinks set the floor
        assert!(relative_error(&analytic, &numeric, 1e-6) < 5e-2);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = random_scm(5);
        let mut rng = Rng::new(6);
        let x = Tensor::new(vec![1, 64, 64], (0..4096).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let g = net.forward_backward(&x, 3, true).unwrap();
        assert_eq!(g.d_params.len(), net.params().len());
        // the classifier and the last conv bias are smooth enough for a full check
        let n = net.params().len();
        for pi in [n - 1, n - 2, n - 3] {
            let fd = finite_diff_grad(
                |p| {
                    let mut m = net.clone();
                    *m.params_mut()[pi] = p.clone();
                    m.forward_backward(&x, 3, false).unwrap().loss
                },
                net.params()[pi],
                1e-3,
            )
            .unwrap();
            assert!(relative_error(g.d_params[pi].data(), fd.data(), 1e-6) < 1e-2, "param {pi}");
        }
    }

    #[test]
    fn frozen_handle_tracks_hash() {
        let f = FrozenScm::new(random_scm(7));
        assert_eq!(f.recorded_hash(), f.current_hash());
        let x = Tensor::zeros(&[1, 64, 64]);
        let g = f.input_gradient(&x, 0).unwrap();
        assert!(g.d_params.is_empty());
        assert_eq!(f.recorded_hash(), f.current_hash());
    }
}
