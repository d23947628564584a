//! Two-stage training: the SCM learns to count targets in `f_T`, is frozen,
//! and then supervises the TEM through the joint loss.
//!
//! Per-sample forward/backward passes fan out over rayon; gradients are
//! summed in sample order and the optimiser step is serial, so results do
//! not depend on the worker count.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PgmDepth;
use crate::loss::{loss_tbc, LossBreakdown, Objective};
use crate::nn::softmax;
use crate::rng::Rng;
use crate::scm::{build_scm, FrozenScm, ScmNet, DEFAULT_CLASSES};
use crate::synth::DatasetEntry;
use crate::tem::{build_tem, NetConfig, TemNet};
use crate::tensor::{read_u32, Tensor};
use crate::weights;

const INIT_STREAM: u64 = u64::MAX;
const PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Weight of the SCM term.
    pub lambda: f64,
    /// Weight of the sparsity term.
    pub beta: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub bc: usize,
    pub levels: usize,
    pub classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl TrainConfig {
    /// 64×64-scale recipe: batch 16, 60 epochs, Adam at 0.005 with tenfold
    /// decays at 70 % and 90 % of the run.
    pub fn desk(seed: u64) -> Self {
        Self {
            batch_size: 16,
            epochs: 60,
            lr: 0.005,
            decay_epochs: decay_schedule(60),
            decay_factor: 0.1,
            lambda: 1.0,
            beta: 1.0,
            seed,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bc: 4,
            levels: 3,
            classes: DEFAULT_CLASSES,
        }
    }

    /// Changes the run length and rescales the decay epochs to match.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.decay_epochs = decay_schedule(epochs);
        self
    }

    pub fn objective(&self) -> Objective {
        Objective {
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.decay_factor > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimiser hyperparameters out of range".into()));
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

fn decay_schedule(epochs: usize) -> Vec<usize> {
    let mut v = vec![epochs * 7 / 10, epochs * 9 / 10];
    v.retain(|&e| e > 0 && e < epochs);
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub scm_hash_before: Option<u64>,
    pub scm_hash_after: Option<u64>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    fn push(&mut self, rec: EpochRecord) {
        log::info!(
            "epoch {} lr {:.2e} total {:.5} (L1 {:.5} SSIM {:.5} B {:.5} C {:.5}){}",
            rec.epoch,
            rec.lr,
            rec.loss.total,
            rec.loss.l_l1,
            rec.loss.l_ssim,
            rec.loss.l_b,
            rec.loss.l_c,
            rec.val_accuracy.map(|a| format!(" val acc {a:.3}")).unwrap_or_default()
        );
        self.epochs.push(rec);
        let n = self.epochs.len();
        if n > PATIENCE {
            let recent = self.epochs[n - PATIENCE..].iter().map(|e| e.loss.total);
            let best_before = self.epochs[..n - PATIENCE].iter().map(|e| e.loss.total).fold(f64::INFINITY, f64::min);
            if recent.fold(f64::INFINITY, f64::min) >= best_before {
                let msg = format!("loss has not improved for {PATIENCE} epochs (epoch {})", n - 1);
                log::warn!("{msg}");
                self.warnings.push(msg);
            }
        }
    }
}

/// Plain gradient descent: `w ← w − lr·g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w = (*w as f64 - lr * d as f64) as f32;
        }
    }
    Ok(())
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    const MAGIC: &'static [u8; 4] = b"TBCO";

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            t.write_dump(&mut w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::format("optimiser state", "bad magic"));
        }
        let mut t = [0u8; 8];
        r.read_exact(&mut t)?;
        let n = read_u32(&mut r)? as usize;
        let mut all = (0..2 * n).map(|_| Tensor::read_dump(&mut r)).collect::<Result<Vec<_>>>()?;
        let v = all.split_off(n);
        Ok(Self {
            t: u64::from_le_bytes(t),
            m: all,
            v,
        })
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    check_pairs(params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(Error::Config("optimiser state does not match the parameters".into()));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let d = d as f64;
            let mk = beta1 * m[k] as f64 + (1.0 - beta1) * d;
            let vk = beta2 * v[k] as f64 + (1.0 - beta2) * d * d;
            m[k] = mk as f32;
            v[k] = vk as f32;
            *w = (*w as f64 - lr * (mk / c1) / ((vk / c2).sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

fn check_pairs(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.len()],
            actual: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, params: &[&Tensor]) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_step(params, grads, s, lr, cfg.beta1, cfg.beta2, cfg.eps),
            Optimizer::Sgd => sgd_step(params, grads, lr),
        }
    }
}

/// Where to keep per-epoch checkpoints and failed-batch dumps.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `checkpoint_dir` if one exists.
    pub resume: bool,
    pub dump_dir: Option<PathBuf>,
}

/// JSON sidecar written next to a checkpoint's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: String,
    pub config: TrainConfig,
    pub log: TrainLog,
    /// Last completed epoch.
    pub epoch: usize,
    pub height: usize,
    pub width: usize,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn write_sidecar(weights: &Path, sidecar: &Sidecar) -> Result<()> {
    let f = BufWriter::new(fs::File::create(sidecar_path(weights))?);
    serde_json::to_writer_pretty(f, sidecar)?;
    Ok(())
}

pub fn read_sidecar(weights: &Path) -> Result<Sidecar> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(sidecar_path(weights))?))?)
}

fn frame_extents(entries: &[DatasetEntry]) -> Result<(usize, usize)> {
    let first = entries.first().ok_or(Error::Empty("training set"))?;
    let (w, h) = (first.tuple.f_d.width(), first.tuple.f_d.height());
    if let Some(e) = entries.iter().find(|e| (e.tuple.f_d.width(), e.tuple.f_d.height()) != (w, h)) {
        return Err(Error::Config(format!(
            "mixed image sizes: tuple {} is {}x{}, expected {w}x{h}",
            e.seed_index,
            e.tuple.f_d.width(),
            e.tuple.f_d.height()
        )));
    }
    Ok((w, h))
}

/// Sums per-sample gradients in sample order and divides by the count.
fn reduce_mean(per_sample: Vec<Vec<Tensor>>) -> Result<Vec<Tensor>> {
    let n = per_sample.len() as f32;
    let mut it = per_sample.into_iter();
    let mut acc = it.next().ok_or(Error::Empty("batch"))?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b)?;
        }
    }
    for a in &mut acc {
        a.scale(1.0 / n);
    }
    Ok(acc)
}

fn non_finite(batch: &[&DatasetEntry], epoch: usize, b: usize, losses: &[f64], dump_dir: Option<&Path>) -> Error {
    let ids: Vec<u64> = batch.iter().map(|e| e.seed_index).collect();
    let mut msg = format!("non-finite loss or gradient at epoch {epoch}, batch {b}; tuples {ids:?}, losses {losses:?}");
    if let Some(dir) = dump_dir {
        let written = fs::create_dir_all(dir).map_err(Error::from).and_then(|_| {
            for e in batch {
                e.tuple.f_d.write_pgm(dir.join(format!("{:06}_d.pgm", e.seed_index)), PgmDepth::Sixteen)?;
                e.tuple.f_t.write_pgm(dir.join(format!("{:06}_t.pgm", e.seed_index)), PgmDepth::Sixteen)?;
            }
            Ok(())
        });
        match written {
            Ok(()) => msg.push_str(&format!("; batch dumped to {}", dir.display())),
            Err(e) => msg.push_str(&format!("; dump failed: {e}")),
        }
    }
    Error::Numerical(msg)
}

fn grads_finite(g: &[Tensor]) -> bool {
    g.iter().all(Tensor::is_finite)
}

struct Resumed<N> {
    net: N,
    optimizer: Optimizer,
    log: TrainLog,
    start: usize,
}

fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("checkpoint.tbcw"), dir.join("checkpoint.optim"))
}

fn save_checkpoint(dir: &Path, model_bytes: Vec<u8>, opt: &Optimizer, sidecar: &Sidecar) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (w, o) = checkpoint_paths(dir);
    fs::write(&w, model_bytes)?;
    if let Optimizer::Adam(s) = opt {
        s.write(BufWriter::new(fs::File::create(&o)?))?;
    }
    write_sidecar(&w, sidecar)
}

fn load_checkpoint<N>(
    opts: &RunOptions,
    cfg: &TrainConfig,
    model: &str,
    decode: fn(&[u8]) -> Result<N>,
    params: fn(&N) -> Vec<&Tensor>,
) -> Result<Option<Resumed<N>>> {
    let dir = match (&opts.checkpoint_dir, opts.resume) {
        (Some(d), true) => d,
        _ => return Ok(None),
    };
    let (w, o) = checkpoint_paths(dir);
    if !w.exists() {
        return Ok(None);
    }
    let side = read_sidecar(&w)?;
    if side.model != model {
        return Err(Error::Config(format!("checkpoint holds a {} model, not {model}", side.model)));
    }
    if side.config != *cfg {
        return Err(Error::Config("checkpoint was written with a different training configuration".into()));
    }
    let net = decode(&fs::read(&w)?)?;
    let optimizer = match cfg.optimizer {
        OptimizerKind::Adam => {
            let s = AdamState::read(BufReader::new(fs::File::open(&o)?))?;
            let p = params(&net);
            if s.m.len() != p.len() || s.m.iter().zip(&p).any(|(m, p)| m.shape() != p.shape()) {
                return Err(Error::format("optimiser state", "does not match the checkpoint weights"));
            }
            Optimizer::Adam(s)
        }
        OptimizerKind::Sgd => Optimizer::Sgd,
    };
    log::info!("resuming {model} training after epoch {}", side.epoch);
    Ok(Some(Resumed {
        net,
        optimizer,
        log: side.log,
        start: side.epoch + 1,
    }))
}

/// Fraction of entries whose `f_T` the SCM assigns to `y_T`.
pub fn scm_accuracy(net: &ScmNet, entries: &[DatasetEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let correct: Vec<bool> = entries
        .par_iter()
        .map(|e| {
            let logits = net.logits(&e.tuple.f_t.to_tensor())?;
            let p = softmax(&logits);
            let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap();
            Ok(best == e.tuple.y_t)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / entries.len() as f64)
}

fn check_labels(entries: &[DatasetEntry], classes: usize) -> Result<()> {
    if let Some(e) = entries.iter().find(|e| e.tuple.y_t >= classes) {
        return Err(Error::Config(format!(
            "tuple {} has label {} but the classifier has {classes} classes",
            e.seed_index, e.tuple.y_t
        )));
    }
    Ok(())
}

/// Stage one: fit the SCM to `(f_T, y_T)`; `val` is only scored.
pub fn train_scm(train: &[DatasetEntry], val: &[DatasetEntry], cfg: &TrainConfig, opts: &RunOptions) -> Result<(ScmNet, TrainLog)> {
    cfg.validate()?;
    let (w, h) = frame_extents(train)?;
    check_labels(train, cfg.classes)?;
    check_labels(val, cfg.classes)?;
    let (mut net, mut opt, mut log, start) = match load_checkpoint(opts, cfg, "scm", weights::decode_scm, ScmNet::params)? {
        Some(r) => (r.net, r.optimizer, r.log, r.start),
        None => {
            let net = build_scm(cfg.classes, h, w, &mut Rng::derive(cfg.seed, INIT_STREAM))?;
            let opt = Optimizer::new(cfg, &net.params());
            (net, opt, TrainLog::default(), 0)
        }
    };
    net.check_input(h, w)?;
    for epoch in start..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.lr_at(epoch);
        let order = Rng::derive(cfg.seed, epoch as u64).permutation(train.len());
        let mut losses = Vec::with_capacity(train.len());
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DatasetEntry> = idx.iter().map(|&i| &train[i]).collect();
            let out: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|e| {
                    let g = net.forward_backward(&e.tuple.f_t.to_tensor(), e.tuple.y_t, true)?;
                    Ok((g.loss, g.d_params))
                })
                .collect::<Result<_>>()?;
            let batch_losses: Vec<f64> = out.iter().map(|o| o.0).collect();
            if batch_losses.iter().any(|l| !l.is_finite()) || out.iter().any(|o| !grads_finite(&o.1)) {
                return Err(non_finite(&batch, epoch, b, &batch_losses, opts.dump_dir.as_deref()));
            }
            losses.extend(batch_losses);
            let grads = reduce_mean(out.into_iter().map(|o| o.1).collect())?;
            opt.step(cfg, &mut net.params_mut(), &grads, lr)?;
        }
        let mean_ce = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_accuracy = if val.is_empty() { None } else { Some(scm_accuracy(&net, val)?) };
        log.push(EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown::assemble(0.0, 0.0, 0.0, mean_ce, Objective { beta: 0.0, lambda: 1.0 }),
            val_accuracy,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if let Some(dir) = &opts.checkpoint_dir {
            let side = Sidecar {
                model: "scm".into(),
                config: cfg.clone(),
                log: log.clone(),
                epoch,
                height: h,
                width: w,
            };
            save_checkpoint(dir, weights::encode_scm(&net), &opt, &side)?;
        }
    }
    Ok((net, log))
}

/// Stage two: fit the TEM to `f_D → f_T` under the configured objective,
/// with the frozen SCM supplying the semantic term.
pub fn train_tem(train: &[DatasetEntry], scm: &FrozenScm, cfg: &TrainConfig, opts: &RunOptions) -> Result<(TemNet, TrainLog)> {
    cfg.validate()?;
    let (w, h) = frame_extents(train)?;
    let net_cfg = NetConfig::new(cfg.bc, cfg.levels, h, w)?;
    if cfg.lambda > 0.0 {
        scm.net().check_input(h, w)?;
        check_labels(train, scm.net().classes())?;
    }
    let before = scm.current_hash();
    if before != scm.recorded_hash() {
        return Err(Error::Config("SCM weights changed after they were frozen".into()));
    }
    let (mut net, mut opt, mut log, start) = match load_checkpoint(opts, cfg, "tem", weights::decode_tem, TemNet::params)? {
        Some(r) => (r.net, r.optimizer, r.log, r.start),
        None => {
            let net = build_tem(&net_cfg, &mut Rng::derive(cfg.seed, INIT_STREAM))?;
            let opt = Optimizer::new(cfg, &net.params());
            (net, opt, TrainLog::default(), 0)
        }
    };
    log.scm_hash_before.get_or_insert(before);
    let objective = cfg.objective();
    for epoch in start..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.lr_at(epoch);
        let order = Rng::derive(cfg.seed, epoch as u64).permutation(train.len());
        let mut breakdowns = Vec::with_capacity(train.len());
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DatasetEntry> = idx.iter().map(|&i| &train[i]).collect();
            let out: Vec<(LossBreakdown, Vec<Tensor>)> = batch
                .par_iter()
                .map(|e| {
                    let (pred, cache) = net.forward_cached(&e.tuple.f_d.to_tensor())?;
                    let (lb, d_pred) = loss_tbc(&pred, &e.tuple.f_t.to_tensor(), Some(scm), e.tuple.y_t, objective)?;
                    Ok((lb, net.backward(&cache, &d_pred)?))
                })
                .collect::<Result<_>>()?;
            let totals: Vec<f64> = out.iter().map(|o| o.0.total).collect();
            if totals.iter().any(|l| !l.is_finite()) || out.iter().any(|o| !grads_finite(&o.1)) {
                return Err(non_finite(&batch, epoch, b, &totals, opts.dump_dir.as_deref()));
            }
            breakdowns.extend(out.iter().map(|o| o.0));
            let grads = reduce_mean(out.into_iter().map(|o| o.1).collect())?;
            opt.step(cfg, &mut net.params_mut(), &grads, lr)?;
        }
        log.push(EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown::mean(&breakdowns).ok_or(Error::Empty("training set"))?,
            val_accuracy: None,
            seconds: clock.elapsed().as_secs_f64(),
        });
        log.scm_hash_after = Some(scm.current_hash());
        if let Some(dir) = &opts.checkpoint_dir {
            let side = Sidecar {
                model: "tem".into(),
                config: cfg.clone(),
                log: log.clone(),
                epoch,
                height: h,
                width: w,
            };
            save_checkpoint(dir, weights::encode_tem(&net), &opt, &side)?;
        }
    }
    let after = scm.current_hash();
    log.scm_hash_after = Some(after);
    if after != before {
        return Err(Error::Numerical("SCM weights changed during TEM training".into()));
    }
    Ok((net, log))
}
