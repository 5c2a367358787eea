//! Small dense conditional networks with exact reverse-mode gradients,
//! a forward-mode tangent, and a first-order optimizer.
//!
//! Each layer computes `a = act((W [x; c?] + b) * (g0 + G c)?)`, where the
//! bracketed condition is concatenated only for `Conditioning::Concat` and
//! the scale factor is present only for `Conditioning::Film`. All
//! parameters live in one flat vector in declaration order: per layer `W`
//! (row-major, outputs x effective inputs), then `b`, then `g0`, then `G`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    None,
    Film,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub cond: Conditioning,
    pub bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, cond: Conditioning, bias: bool, activation: Activation) -> Self {
        Self { inputs, outputs, cond, bias, activation }
    }

    fn effective_inputs(&self, cond_dim: usize) -> usize {
        match self.cond {
            Conditioning::Concat => self.inputs + cond_dim,
            _ => self.inputs,
        }
    }

    /// Parameters this layer owns given the conditioning width.
    pub fn param_count(&self, cond_dim: usize) -> usize {
        let mut n = self.outputs * self.effective_inputs(cond_dim);
        if self.bias {
            n += self.outputs;
        }
        if self.cond == Conditioning::Film {
            n += self.outputs * (1 + cond_dim);
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    w: usize,
    b: Option<usize>,
    g0: Option<usize>,
    g: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondNet {
    layers: Vec<LayerSpec>,
    cond_dim: usize,
    params: Vec<f64>,
    offsets: Vec<LayerOffsets>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Layer inputs, followed by the network output.
    acts: Vec<Vec<f64>>,
    /// Affine outputs before the film scale.
    z: Vec<Vec<f64>>,
    /// Film scales (empty for other layers).
    s: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn offsets_for(layers: &[LayerSpec], cond_dim: usize) -> (Vec<LayerOffsets>, usize) {
    let mut at = 0;
    let mut offs = Vec::with_capacity(layers.len());
    for l in layers {
        let w = at;
        at += l.outputs * l.effective_inputs(cond_dim);
        let b = l.bias.then(|| {
            let o = at;
            at += l.outputs;
            o
        });
        let (g0, g) = if l.cond == Conditioning::Film {
            let g0 = at;
            at += l.outputs;
            let g = at;
            at += l.outputs * cond_dim;
            (Some(g0), Some(g))
        } else {
            (None, None)
        };
        offs.push(LayerOffsets { w, b, g0, g });
    }
    (offs, at)
}

impl CondNet {
    /// Glorot-uniform weights, zero biases, unit film offsets and zero film
    /// gains.
    pub fn new(layers: Vec<LayerSpec>, cond_dim: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(layers, cond_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, o) in net.layers.clone().iter().zip(net.offsets.clone()) {
            let fan_in = l.effective_inputs(cond_dim);
            let limit = (6.0 / (fan_in + l.outputs) as f64).sqrt();
            for p in &mut net.params[o.w..o.w + l.outputs * fan_in] {
                *p = rng.gen_range(-limit..limit);
            }
            if let Some(g0) = o.g0 {
                net.params[g0..g0 + l.outputs].iter_mut().for_each(|p| *p = 1.0);
            }
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeroed(layers: Vec<LayerSpec>, cond_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::ShapeMismatch(format!("layer outputs {} do not feed inputs {}", pair[0].outputs, pair[1].inputs)));
            }
        }
        if cond_dim == 0 && layers.iter().any(|l| l.cond != Conditioning::None) {
            return Err(Error::ShapeMismatch("conditioned layer without condition".into()));
        }
        let (offsets, n) = offsets_for(&layers, cond_dim);
        Ok(Self { layers, cond_dim, params: vec![0.0; n], offsets })
    }

    /// Single bias-free linear layer initialised to the identity.
    pub fn identity(n: usize) -> Self {
        let mut net =
            Self::zeroed(vec![LayerSpec::new(n, n, Conditioning::None, false, Activation::Identity)], 0).expect("valid identity layer");
        for k in 0..n {
            net.params[k * n + k] = 1.0;
        }
        net
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// True when every layer is bias-free and uses only film conditioning
    /// (or none) with an odd activation, so a zero input maps to zero.
    pub fn preserves_zero(&self) -> bool {
        self.layers.iter().all(|l| !l.bias && l.cond != Conditioning::Concat)
    }

    fn check(&self, input: &[f64], cond: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() || cond.len() != self.cond_dim {
            return Err(Error::ShapeMismatch(format!(
                "net expects input {} / condition {}, got {} / {}",
                self.input_dim(),
                self.cond_dim,
                input.len(),
                cond.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        let mut trace = Trace::default();
        self.forward_traced(input, cond, &mut trace)?;
        Ok(trace.output().to_vec())
    }

    /// Forward pass recording everything `backward_traced` needs. `trace`
    /// buffers are reused between calls.
    pub fn forward_traced(&self, input: &[f64], cond: &[f64], trace: &mut Trace) -> Result<()> {
        self.check(input, cond)?;
        let nl = self.layers.len();
        trace.acts.resize(nl + 1, Vec::new());
        trace.z.resize(nl, Vec::new());
        trace.s.resize(nl, Vec::new());
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        for (k, (l, o)) in self.layers.iter().zip(&self.offsets).enumerate() {
            let fan_in = l.effective_inputs(self.cond_dim);
            let (head, tail) = trace.acts.split_at_mut(k + 1);
            let x = &head[k];
            let z = &mut trace.z[k];
            z.clear();
            for r in 0..l.outputs {
                let row = &self.params[o.w + r * fan_in..o.w + (r + 1) * fan_in];
                let mut acc: f64 = row[..l.inputs].iter().zip(x).map(|(w, a)| w * a).sum();
                if l.cond == Conditioning::Concat {
                    acc += row[l.inputs..].iter().zip(cond).map(|(w, c)| w * c).sum::<f64>();
                }
                if let Some(b) = o.b {
                    acc += self.params[b + r];
                }
                z.push(acc);
            }
            let s = &mut trace.s[k];
            s.clear();
            if let (Some(g0), Some(g)) = (o.g0, o.g) {
                for r in 0..l.outputs {
                    let grow = &self.params[g + r * self.cond_dim..g + (r + 1) * self.cond_dim];
                    s.push(self.params[g0 + r] + grow.iter().zip(cond).map(|(a, c)| a * c).sum::<f64>());
                }
            }
            let out = &mut tail[0];
            out.clear();
            for r in 0..l.outputs {
                let pre = if s.is_empty() { z[r] } else { z[r] * s[r] };
                out.push(match l.activation {
                    Activation::Tanh => pre.tanh(),
                    Activation::Identity => pre,
                });
            }
        }
        Ok(())
    }

    /// Reverse pass for `<upstream, output>`. Parameter gradients are added
    /// into `param_grad` when given; the input gradient is written to
    /// `input_grad` when given.
    pub fn backward_traced(
        &self,
        trace: &Trace,
        cond: &[f64],
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!("upstream has {} entries, output has {}", upstream.len(), self.output_dim())));
        }
        let mut dy = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let o = &self.offsets[k];
            let fan_in = l.effective_inputs(self.cond_dim);
            let x = &trace.acts[k];
            let a = &trace.acts[k + 1];
            let z = &trace.z[k];
            let s = &trace.s[k];
            let mut dz = vec![0.0; l.outputs];
            for r in 0..l.outputs {
                let dpre = match l.activation {
                    Activation::Tanh => dy[r] * (1.0 - a[r] * a[r]),
                    Activation::Identity => dy[r],
                };
                if s.is_empty() {
                    dz[r] = dpre;
                } else {
                    dz[r] = dpre * s[r];
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let ds = dpre * z[r];
                        pg[o.g0.unwrap() + r] += ds;
                        let g = o.g.unwrap() + r * self.cond_dim;
                        for (gi, c) in pg[g..g + self.cond_dim].iter_mut().zip(cond) {
                            *gi += ds * c;
                        }
                    }
                }
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                for r in 0..l.outputs {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    if let Some(b) = o.b {
                        pg[b + r] += d;
                    }
                    let row = &mut pg[o.w + r * fan_in..o.w + (r + 1) * fan_in];
                    for (g, xi) in row[..l.inputs].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                    if l.cond == Conditioning::Concat {
                        for (g, c) in row[l.inputs..].iter_mut().zip(cond) {
                            *g += d * c;
                        }
                    }
                }
            }
            let mut dx = vec![0.0; l.inputs];
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[o.w + r * fan_in..o.w + r * fan_in + l.inputs];
                for (g, w) in dx.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            dy = dx;
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&dy);
        }
        Ok(())
    }

    /// Parameter gradients and input gradient of `<upstream, net(input | cond)>`.
    pub fn backward(&self, input: &[f64], cond: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut trace = Trace::default();
        self.forward_traced(input, cond, &mut trace)?;
        let mut pg = vec![0.0; self.params.len()];
        let mut ig = vec![0.0; self.input_dim()];
        self.backward_traced(&trace, cond, upstream, Some(&mut pg), Some(&mut ig))?;
        Ok((pg, ig))
    }

    /// Forward-mode derivative of the output along the input direction `dinput`.
    pub fn jvp_traced(&self, trace: &Trace, dinput: &[f64]) -> Result<Vec<f64>> {
        if dinput.len() != self.input_dim() {
            return Err(Error::ShapeMismatch("tangent direction has wrong length".into()));
        }
        let mut dx = dinput.to_vec();
        for (k, (l, o)) in self.layers.iter().zip(&self.offsets).enumerate() {
            let fan_in = l.effective_inputs(self.cond_dim);
            let a = &trace.acts[k + 1];
            let s = &trace.s[k];
            let mut out = Vec::with_capacity(l.outputs);
            for r in 0..l.outputs {
                let row = &self.params[o.w + r * fan_in..o.w + r * fan_in + l.inputs];
                let mut d: f64 = row.iter().zip(&dx).map(|(w, t)| w * t).sum();
                if !s.is_empty() {
                    d *= s[r];
                }
                out.push(match l.activation {
                    Activation::Tanh => d * (1.0 - a[r] * a[r]),
                    Activation::Identity => d,
                });
            }
            dx = out;
        }
        Ok(dx)
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn cond_code(c: Conditioning) -> u8 {
    match c {
        Conditioning::None => 0,
        Conditioning::Film => 1,
        Conditioning::Concat => 2,
    }
}

/// Checkpoint layout (little-endian): magic `XCNN`, u32 version, u32
/// condition width, u32 layer count, then per layer u32 inputs, u32
/// outputs, u8 conditioning (0 none, 1 film, 2 concat), u8 bias flag, u8
/// activation (0 tanh, 1 identity), u8 reserved; then u64 parameter count
/// and the f64 parameters.
pub fn encode_checkpoint(net: &CondNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.cond_dim as u32).to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        out.push(cond_code(l.cond));
        out.push(l.bias as u8);
        out.push(match l.activation {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        });
        out.push(0);
    }
    out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for p in &net.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CondNet> {
    let short = || Error::ShapeMismatch("truncated checkpoint".into());
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(short);
    let u32_at = |at: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap())) };
    let magic: [u8; 4] = take(0, 4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = u32_at(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let cond_dim = u32_at(8)? as usize;
    let n_layers = u32_at(12)? as usize;
    let mut at = 16;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let inputs = u32_at(at)? as usize;
        let outputs = u32_at(at + 4)? as usize;
        let flags = take(at + 8, 4)?;
        let cond = match flags[0] {
            0 => Conditioning::None,
            1 => Conditioning::Film,
            2 => Conditioning::Concat,
            c => return Err(Error::Parse(format!("unknown conditioning code {c}"))),
        };
        let activation = match flags[2] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            a => return Err(Error::Parse(format!("unknown activation code {a}"))),
        };
        layers.push(LayerSpec::new(inputs, outputs, cond, flags[1] != 0, activation));
        at += 12;
    }
    let mut net = CondNet::zeroed(layers, cond_dim)?;
    let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
    at += 8;
    if count != net.params.len() || bytes.len() != at + 8 * count {
        return Err(Error::ShapeMismatch(format!("checkpoint holds {count} parameters, layer table implies {}", net.params.len())));
    }
    for (k, c) in bytes[at..].chunks_exact(8).enumerate() {
        let p = f64::from_le_bytes(c.try_into().unwrap());
        if !p.is_finite() {
            return Err(Error::NonFiniteValue(k));
        }
        net.params[k] = p;
    }
    Ok(net)
}

pub fn write_checkpoint(path: impl AsRef<Path>, net: &CondNet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_checkpoint(net))?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CondNet> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    #[serde(default = "one")]
    pub final_lr_frac: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self { lr, batch_size, epochs, seed, clip: 10.0, optimizer: OptimizerKind::default(), final_lr_frac: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.clip > 0.0 && self.batch_size > 0 && self.epochs > 0) {
            return Err(Error::InvalidParameter("training config values must be positive".into()));
        }
        Ok(())
    }

    /// Cosine-decayed rate for step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.final_lr_frac == 1.0 {
            return self.lr;
        }
        let frac = step as f64 / (total - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self { kind, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One optimizer update on `batch`. `loss_grad` returns the loss of one
/// sample and adds that sample's parameter gradient into the buffer. Losses
/// and gradients are averaged over the batch in batch order.
pub fn train_step<S>(
    net: &mut CondNet,
    opt: &mut Optimizer,
    batch: &[S],
    cfg: &TrainConfig,
    lr: f64,
    mut loss_grad: impl FnMut(&CondNet, &S, &mut [f64]) -> Result<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut grad = vec![0.0; net.param_count()];
    let mut loss = 0.0;
    for sample in batch {
        loss += loss_grad(net, sample, &mut grad)?;
    }
    let n = batch.len() as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if norm > cfg.clip {
        let s = cfg.clip / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    opt.update(&mut net.params, &grad, lr);
    Ok(loss)
}

/// Minibatch training over `samples` for `cfg.epochs` epochs with a seeded
/// shuffle. Returns the mean loss of every epoch.
pub fn fit<S>(
    net: &mut CondNet,
    samples: &[S],
    cfg: &TrainConfig,
    mut loss_grad: impl FnMut(&CondNet, &S, &mut [f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, net.param_count());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&S> = chunk.iter().map(|&k| &samples[k]).collect();
            let lr = cfg.lr_at(step, total);
            sum += train_step(net, &mut opt, &batch, cfg, lr, |n, s, g| loss_grad(n, s, g))? * chunk.len() as f64;
            step += 1;
        }
        history.push(sum / samples.len() as f64);
    }
    Ok(history)
}
