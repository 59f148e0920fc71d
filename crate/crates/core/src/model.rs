//! The learnable hash function: features -> `r` sigmoid outputs, fitted to inferred codes
//! with a multi-label cross-entropy loss, and the incremental group-wise training driver.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bqp::{extend_codes, BitSummary, CodeMatrix, SweepConfig, TripletSet};
use crate::data::Standardizer;
use crate::error::{check_dim, Error, Result};
use crate::loss::Hinge;

pub const DEFAULT_EPS: f64 = 1e-7;

/// Row-major `n x d` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(n * d, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("features must be finite"));
        }
        Ok(FeatureMatrix { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            check_dim(d, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n: idx.len(),
            d: self.d,
            data,
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Linear,
    /// One `tanh` hidden layer of the given width.
    Hidden { width: usize },
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Hidden { width: 128 }
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Parameters live in one flat vector: `[W1 (h x d), b1 (h), W2 (r x h), b2 (r)]` with a
/// hidden layer, `[W (r x d), b (r)]` without.
#[derive(Clone, Debug, PartialEq)]
pub struct HashModel {
    input_dim: usize,
    hidden: usize,
    outputs: usize,
    eps: f64,
    params: Vec<f64>,
    input_norm: Option<Standardizer>,
}

impl HashModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(input_dim: usize, outputs: usize, arch: Arch, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(input_dim, outputs, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, r) = (model.input_dim, model.hidden, model.outputs);
        if h > 0 {
            let s1 = (6.0 / (d + h) as f64).sqrt();
            for w in &mut model.params[..h * d] {
                *w = rng.random_range(-s1..s1);
            }
            let s2 = (6.0 / (h + r) as f64).sqrt();
            let off = h * d + h;
            for w in &mut model.params[off..off + r * h] {
                *w = rng.random_range(-s2..s2);
            }
        } else {
            let s = (6.0 / (d + r) as f64).sqrt();
            for w in &mut model.params[..r * d] {
                *w = rng.random_range(-s..s);
            }
        }
        Ok(model)
    }

    pub fn zeros(input_dim: usize, outputs: usize, arch: Arch) -> Result<Self> {
        if input_dim == 0 || outputs == 0 {
            return Err(Error::validation("model needs at least one input and one output"));
        }
        let hidden = match arch {
            Arch::Linear => 0,
            Arch::Hidden { width: 0 } => return Err(Error::validation("hidden width must be >= 1")),
            Arch::Hidden { width } => width,
        };
        let len = param_count(input_dim, hidden, outputs);
        Ok(HashModel {
            input_dim,
            hidden,
            outputs,
            eps: DEFAULT_EPS,
            params: vec![0.0; len],
            input_norm: None,
        })
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::validation(format!("clamp epsilon {eps} outside (0, 0.5)")));
        }
        self.eps = eps;
        Ok(self)
    }

    /// Inputs are standardized with `norm` before the first layer.
    pub fn with_input_norm(mut self, norm: Standardizer) -> Result<Self> {
        check_dim(self.input_dim, norm.dim())?;
        self.input_norm = Some(norm);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn arch(&self) -> Arch {
        if self.hidden == 0 {
            Arch::Linear
        } else {
            Arch::Hidden { width: self.hidden }
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_norm(&self) -> Option<&Standardizer> {
        self.input_norm.as_ref()
    }

    /// Adds output units up to `outputs`, keeping every existing parameter.
    pub fn grow_outputs<R: Rng>(&mut self, outputs: usize, rng: &mut R) -> Result<()> {
        if outputs < self.outputs {
            return Err(Error::validation("cannot shrink the output layer"));
        }
        let extra = outputs - self.outputs;
        if extra == 0 {
            return Ok(());
        }
        let fan_in = if self.hidden > 0 { self.hidden } else { self.input_dim };
        let s = (6.0 / (fan_in + outputs) as f64).sqrt();
        let off = self.output_offset();
        let (head, tail) = self.params.split_at(off);
        let mut params = head.to_vec();
        params.extend_from_slice(&tail[..self.outputs * fan_in]);
        params.extend((0..extra * fan_in).map(|_| rng.random_range(-s..s)));
        params.extend_from_slice(&tail[self.outputs * fan_in..]);
        params.extend(std::iter::repeat_n(0.0, extra));
        self.params = params;
        self.outputs = outputs;
        Ok(())
    }

    fn output_offset(&self) -> usize {
        if self.hidden > 0 {
            self.hidden * self.input_dim + self.hidden
        } else {
            0
        }
    }

    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        match &self.input_norm {
            Some(norm) => norm.apply(x),
            None => x.to_vec(),
        }
    }

    /// Hidden activations (empty for a linear model) and output logits.
    fn activations(&self, x: &[f64], mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let (d, h, r) = (self.input_dim, self.hidden, self.outputs);
        let p = &self.params;
        let (feat, fan_in): (Vec<f64>, usize) = if h > 0 {
            let mut act = Vec::with_capacity(h);
            for u in 0..h {
                let w = &p[u * d..(u + 1) * d];
                let pre = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[h * d + u];
                let mut v = pre.tanh();
                if let Some(m) = mask {
                    v *= m[u];
                }
                act.push(v);
            }
            (act, h)
        } else {
            (Vec::new(), d)
        };
        let input: &[f64] = if h > 0 { &feat } else { x };
        let off = self.output_offset();
        let bias = off + r * fan_in;
        let logits = (0..r)
            .map(|o| {
                let w = &p[off + o * fan_in..off + (o + 1) * fan_in];
                w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + p[bias + o]
            })
            .collect();
        (feat, logits)
    }

    /// Sigmoid outputs clamped to `[eps, 1 - eps]`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        let x = self.prepare(x);
        let (_, logits) = self.activations(&x, None);
        Ok(logits
            .into_iter()
            .map(|a| sigmoid(a).clamp(self.eps, 1.0 - self.eps))
            .collect())
    }

    pub fn forward_all(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        check_dim(self.input_dim, features.d())?;
        (0..features.n()).map(|i| self.forward(features.row(i))).collect()
    }

    /// Summed cross-entropy over `rows` and its gradient with respect to `params`.
    ///
    /// The gradient is that of the unclamped loss; it agrees with the clamped loss wherever
    /// no output saturates at the clamp.
    pub fn loss_and_gradient(
        &self,
        features: &FeatureMatrix,
        targets: &CodeMatrix,
        rows: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        self.loss_grad_masked(features, targets, rows, &mut |_| None)
    }

    fn loss_grad_masked(
        &self,
        features: &FeatureMatrix,
        targets: &CodeMatrix,
        rows: &[usize],
        mask_for: &mut dyn FnMut(usize) -> Option<Vec<f64>>,
    ) -> Result<(f64, Vec<f64>)> {
        check_dim(self.input_dim, features.d())?;
        check_dim(self.outputs, targets.q())?;
        check_dim(features.n(), targets.n())?;
        let (d, h, r) = (self.input_dim, self.hidden, self.outputs);
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        let off = self.output_offset();
        let fan_in = if h > 0 { h } else { d };
        let bias = off + r * fan_in;
        for &i in rows {
            let x = self.prepare(features.row(i));
            let mask = mask_for(i);
            let (act, logits) = self.activations(&x, mask.as_deref());
            let input: &[f64] = if h > 0 { &act } else { &x };
            let mut back = vec![0.0; h];
            for (o, &a) in logits.iter().enumerate() {
                let prob = sigmoid(a);
                let pc = prob.clamp(self.eps, 1.0 - self.eps);
                let positive = targets.row(o)[i] > 0;
                loss -= if positive { pc.ln() } else { (1.0 - pc).ln() };
                let delta = prob - if positive { 1.0 } else { 0.0 };
                let w_off = off + o * fan_in;
                for (g, v) in grad[w_off..w_off + fan_in].iter_mut().zip(input) {
                    *g += delta * v;
                }
                grad[bias + o] += delta;
                if h > 0 {
                    for (b, w) in back.iter_mut().zip(&p[w_off..w_off + fan_in]) {
                        *b += delta * w;
                    }
                }
            }
            for u in 0..h {
                // act already includes the mask, so act = m * tanh(pre)
                let m = mask.as_ref().map_or(1.0, |m| m[u]);
                let t = if m != 0.0 { act[u] / m } else { 0.0 };
                let dpre = back[u] * m * (1.0 - t * t);
                for (g, v) in grad[u * d..(u + 1) * d].iter_mut().zip(&x) {
                    *g += dpre * v;
                }
                grad[h * d + u] += dpre;
            }
        }
        Ok((loss, grad))
    }

    /// Writes the versioned binary checkpoint with a free-form provenance header.
    pub fn save<W: Write>(&self, mut w: W, header: &str) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_u64(&mut w, header.len() as u64)?;
        w.write_all(header.as_bytes())?;
        for v in [self.input_dim, self.hidden, self.outputs] {
            write_u64(&mut w, v as u64)?;
        }
        w.write_all(&self.eps.to_le_bytes())?;
        match &self.input_norm {
            Some(norm) => {
                w.write_all(&[1])?;
                for v in norm.mean().iter().chain(norm.scale()) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
        write_u64(&mut w, self.params.len() as u64)?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`HashModel::save`]; returns the model and its header.
    pub fn load<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let hlen = read_len(&mut r, 1 << 24)?;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header = String::from_utf8(hbuf).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let input_dim = read_len(&mut r, 1 << 24)?;
        let hidden = read_len(&mut r, 1 << 24)?;
        let outputs = read_len(&mut r, 1 << 24)?;
        let eps = read_f64(&mut r)?;
        let arch = if hidden == 0 { Arch::Linear } else { Arch::Hidden { width: hidden } };
        let mut model = HashModel::zeros(input_dim, outputs, arch)?.with_eps(eps)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if flag[0] == 1 {
            let mean = (0..input_dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let scale = (0..input_dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            model.input_norm = Some(Standardizer::from_parts(mean, scale)?);
        } else if flag[0] != 0 {
            return Err(Error::format("checkpoint", "bad normalization flag"));
        }
        let count = read_len(&mut r, usize::MAX)?;
        check_dim(model.params.len(), count)?;
        for v in &mut model.params {
            *v = read_f64(&mut r)?;
        }
        Ok((model, header))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TPHMODEL";
const CHECKPOINT_VERSION: u32 = 1;

fn param_count(d: usize, h: usize, r: usize) -> usize {
    if h > 0 {
        h * d + h + r * h + r
    } else {
        r * d + r
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_len<R: Read>(r: &mut R, max: usize) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let v = u64::from_le_bytes(b);
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= max)
        .ok_or_else(|| Error::format("checkpoint", format!("length {v} out of range")))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Multi-label cross-entropy of `outputs` (one row per point) against the code rows.
pub fn cross_entropy(outputs: &[Vec<f64>], targets: &CodeMatrix, eps: f64) -> Result<f64> {
    check_dim(targets.n(), outputs.len())?;
    let mut total = 0.0;
    for (i, out) in outputs.iter().enumerate() {
        check_dim(targets.q(), out.len())?;
        for (rho, &p) in out.iter().enumerate() {
            let p = p.clamp(eps, 1.0 - eps);
            total -= if targets.row(rho)[i] > 0 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub eps: f64,
    /// Probability of dropping a hidden unit during training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            momentum: 0.9,
            weight_decay: 0.0005,
            learning_rate: 0.02,
            epochs: 60,
            eps: DEFAULT_EPS,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::validation("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::validation("weight decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::validation("clamp epsilon must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Full-set cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Cross-entropy plus `n * weight_decay / 2 * |theta|^2`, the quantity the updates descend.
    pub epoch_objectives: Vec<f64>,
}

/// Mini-batch gradient descent with momentum and weight decay on the summed cross-entropy
/// of the first `model.outputs()` code rows. Batch gradients are averaged over the batch.
pub fn train(
    mut model: HashModel,
    features: &FeatureMatrix,
    targets: &CodeMatrix,
    cfg: &TrainConfig,
) -> Result<(HashModel, TrainReport)> {
    cfg.validate()?;
    check_dim(features.n(), targets.n())?;
    if targets.q() < model.outputs {
        return Err(Error::Dimension {
            expected: model.outputs,
            got: targets.q(),
        });
    }
    let targets = targets.prefix(model.outputs);
    model.eps = cfg.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..features.n()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut objectives = Vec::with_capacity(cfg.epochs);
    let hidden = model.hidden;
    let keep = 1.0 - cfg.dropout;

    for epoch in 0..cfg.epochs {
        let stable = model.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = if cfg.dropout > 0.0 && hidden > 0 {
                let mut draw = |_| {
                    Some(
                        (0..hidden)
                            .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                            .collect(),
                    )
                };
                model.loss_grad_masked(features, &targets, batch, &mut draw)?
            } else {
                model.loss_and_gradient(features, &targets, batch)?
            };
            let scale = 1.0 / batch.len() as f64;
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(model.params.iter_mut()) {
                *v = cfg.momentum * *v - cfg.learning_rate * (g * scale + cfg.weight_decay * *p);
                *p += *v;
            }
        }
        let loss = cross_entropy(&model.forward_all(features)?, &targets, cfg.eps)?;
        if !loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                last_stable: Box::new(stable),
            });
        }
        log::debug!("epoch {epoch}: loss {loss:.6}");
        let norm: f64 = model.params.iter().map(|p| p * p).sum();
        objectives.push(loss + 0.5 * cfg.weight_decay * features.n() as f64 * norm);
        losses.push(loss);
    }
    Ok((
        model,
        TrainReport {
            epoch_losses: losses,
            epoch_objectives: objectives,
        },
    ))
}

/// Thresholds every output at 0.5 (ties map to +1). Returns an `r x n` code matrix.
pub fn predict_codes(model: &HashModel, features: &FeatureMatrix) -> Result<CodeMatrix> {
    let outputs = model.forward_all(features)?;
    let rows = (0..model.outputs)
        .map(|o| outputs.iter().map(|out| if out[o] >= 0.5 { 1 } else { -1 }).collect())
        .collect();
    CodeMatrix::from_rows(features.n(), rows)
}

/// `groups` groups of `group_len` bits each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    group_len: usize,
    groups: usize,
}

impl GroupPlan {
    pub fn new(group_len: usize, groups: usize) -> Result<Self> {
        if group_len == 0 || groups == 0 {
            return Err(Error::validation("group length and group count must be >= 1"));
        }
        Ok(GroupPlan { group_len, groups })
    }

    /// Plan for `total_bits` bits in groups of `group_len`; `total_bits` must be a multiple.
    pub fn for_bits(total_bits: usize, group_len: usize) -> Result<Self> {
        if group_len == 0 || total_bits == 0 || !total_bits.is_multiple_of(group_len) {
            return Err(Error::validation(format!(
                "{total_bits} bits cannot be split into groups of {group_len}"
            )));
        }
        Self::new(group_len, total_bits / group_len)
    }

    pub fn group_len(&self) -> usize {
        self.group_len
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn total_bits(&self) -> usize {
        self.group_len * self.groups
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalConfig {
    pub plan: GroupPlan,
    pub train: TrainConfig,
    pub arch: Arch,
    pub sweep: SweepConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub bits: usize,
    pub inference: Vec<BitSummary>,
    pub epoch_losses: Vec<f64>,
    /// Fraction of target bits the fitted model reproduces before the overwrite.
    pub bit_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct IncrementalOutcome {
    pub model: HashModel,
    pub codes: CodeMatrix,
    pub stages: Vec<StageReport>,
}

const STREAM_INFER: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Interleaves code inference and model fitting one group of bits at a time.
///
/// Stage `p` infers the `p`-th group bit by bit conditioned on all current codes, fits the
/// model to all `p * a` bits, then replaces all `p * a` code rows with the model's predictions.
/// `init` may carry a model prepared by the caller (e.g. with input normalization); its output
/// layer is resized as stages progress.
pub fn incremental_train(
    features: &FeatureMatrix,
    triplets: &TripletSet,
    cfg: &IncrementalConfig,
    init: Option<HashModel>,
) -> Result<IncrementalOutcome> {
    check_dim(features.n(), triplets.n())?;
    cfg.train.validate()?;
    let a = cfg.plan.group_len();
    let mut infer_rng = stream_rng(cfg.seed, STREAM_INFER);
    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut model = match init {
        Some(mut m) => {
            check_dim(features.d(), m.input_dim)?;
            if m.outputs > a {
                return Err(Error::validation("initial model has more outputs than one group"));
            }
            m.grow_outputs(a, &mut init_rng)?;
            m
        }
        None => HashModel::new(features.d(), a, cfg.arch, init_rng.random())?,
    };
    let mut codes = CodeMatrix::empty(features.n());
    let mut stages = Vec::with_capacity(cfg.plan.groups());

    for stage in 1..=cfg.plan.groups() {
        let inference = extend_codes(triplets, &mut codes, a, &Hinge, &cfg.sweep, &mut infer_rng)?;
        let bits = stage * a;
        model.grow_outputs(bits, &mut init_rng)?;
        let mut tc = cfg.train.clone();
        tc.seed = stream_rng(cfg.seed, STREAM_TRAIN + stage as u64).random();
        let (fitted, report) = train(model, features, &codes, &tc)?;
        model = fitted;
        let predicted = predict_codes(&model, features)?;
        let agree: usize = predicted
            .rows()
            .iter()
            .zip(codes.rows())
            .map(|(p, t)| p.iter().zip(t).filter(|(x, y)| x == y).count())
            .sum();
        let bit_accuracy = agree as f64 / (bits * features.n()).max(1) as f64;
        log::info!(
            "stage {stage}: {bits} bits, loss {:.4}, bit accuracy {bit_accuracy:.4}",
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        codes = predicted;
        stages.push(StageReport {
            stage,
            bits,
            inference,
            epoch_losses: report.epoch_losses,
            bit_accuracy,
        });
    }
    Ok(IncrementalOutcome { model, codes, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bqp::BitVector;

    fn separable(n_per: usize, seed: u64) -> (FeatureMatrix, CodeMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in [-1i8, 1] {
            for _ in 0..n_per {
                let x: Vec<f64> = (0..4)
                    .map(|k| if k == 0 { 2.0 * f64::from(class) } else { 0.0 } + rng.random_range(-0.5..0.5))
                    .collect();
                rows.push(x);
                labels.push(class);
            }
        }
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let n = labels.len();
        (f, CodeMatrix::from_rows(n, vec![labels]).unwrap())
    }

    #[test]
    fn zero_model_outputs_half() {
        let m = HashModel::zeros(3, 4, Arch::Hidden { width: 5 }).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5; 4]);
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn large_logit_saturates_at_clamp() {
        let mut m = HashModel::zeros(1, 2, Arch::Linear).unwrap();
        // W = [[1000], [0]], b = 0
        m.params_mut()[0] = 1000.0;
        let out = m.forward(&[1.0]).unwrap();
        assert_eq!(out[0], 1.0 - DEFAULT_EPS);
        assert_eq!(out[1], 0.5);
        m.params_mut()[0] = -1000.0;
        assert_eq!(m.forward(&[1.0]).unwrap()[0], DEFAULT_EPS);
    }

    #[test]
    fn seeded_model_is_deterministic() {
        let a = HashModel::new(6, 3, Arch::default(), 42).unwrap();
        let b = HashModel::new(6, 3, Arch::default(), 42).unwrap();
        let x = [0.1, -0.2, 0.3, 0.5, -1.0, 2.0];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_ne!(a.params(), HashModel::new(6, 3, Arch::default(), 43).unwrap().params());
    }

    #[test]
    fn cross_entropy_examples() {
        let eps = DEFAULT_EPS;
        let t = CodeMatrix::from_rows(2, vec![vec![1, -1], vec![-1, 1]]).unwrap();
        let perfect = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let expected = 4.0 * (1.0 / (1.0 - eps)).ln();
        assert!((cross_entropy(&perfect, &t, eps).unwrap() - expected).abs() < 1e-12);
        let half = vec![vec![0.5; 2]; 2];
        assert!((cross_entropy(&half, &t, eps).unwrap() - 4.0 * 2f64.ln()).abs() < 1e-12);
        let one = CodeMatrix::from_rows(1, vec![vec![1]]).unwrap();
        assert!((cross_entropy(&[vec![0.25]], &one, eps).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[vec![0.5, 0.5]], &one, eps).is_err());
    }

    fn finite_difference_check(arch: Arch, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, r) = (5, 4, 3);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let t = CodeMatrix::from_rows(
            n,
            (0..r).map(|_| BitVector::random(n, &mut rng).into_inner()).collect(),
        )
        .unwrap();
        let model = HashModel::new(d, r, arch, seed).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let (_, grad) = model.loss_and_gradient(&f, &t, &all).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..model.params().len() {
            let mut plus = model.clone();
            plus.params_mut()[p] += h;
            let mut minus = model.clone();
            minus.params_mut()[p] -= h;
            let lp = cross_entropy(&plus.forward_all(&f).unwrap(), &t, DEFAULT_EPS).unwrap();
            let lm = cross_entropy(&minus.forward_all(&f).unwrap(), &t, DEFAULT_EPS).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[p]).abs() / fd.abs().max(grad[p].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            assert!(finite_difference_check(Arch::Hidden { width: 6 }, seed) <= 1e-4);
            assert!(finite_difference_check(Arch::Linear, seed) <= 1e-4);
        }
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let (f, t) = separable(20, 1);
        let model = HashModel::new(4, 1, Arch::default(), 3).unwrap();
        let (model, report) = train(model, &f, &t, &TrainConfig::default()).unwrap();
        assert_eq!(predict_codes(&model, &f).unwrap(), t);
        let losses = &report.epoch_objectives;
        let rises = losses[1..]
            .windows(2)
            .filter(|w| w[1] > w[0])
            .inspect(|w| assert!(w[1] < w[0] * 1.01, "{w:?}"))
            .count();
        assert!(rises as f64 <= 0.05 * losses.len() as f64, "{rises} rises in {losses:?}");
    }

    #[test]
    fn published_training_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 50);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.dropout, 0.0);
        assert_eq!(c.eps, 1e-7);
        assert_eq!(Arch::default(), Arch::Hidden { width: 128 });
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (f, t) = separable(10, 2);
        let model = HashModel::new(4, 1, Arch::default(), 4).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let (after, _) = train(model.clone(), &f, &t, &cfg).unwrap();
        assert_eq!(after.params(), model.params());
    }

    #[test]
    fn divergence_reports_last_stable_model() {
        let (f, t) = separable(10, 2);
        let mut model = HashModel::new(4, 1, Arch::Linear, 4).unwrap();
        model.params_mut()[0] = 1e308;
        let cfg = TrainConfig {
            learning_rate: 1e10,
            momentum: 0.0,
            weight_decay: 1e10,
            epochs: 5,
            ..TrainConfig::default()
        };
        match train(model.clone(), &f, &t, &cfg) {
            Err(Error::Diverged { epoch, last_stable }) => {
                assert_eq!(epoch, 0);
                assert_eq!(last_stable.params(), model.params());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn predict_tie_maps_to_plus_one() {
        let mut m = HashModel::zeros(1, 2, Arch::Linear).unwrap();
        // W = [[0], [0]], b = [0, -5]
        m.params_mut()[3] = -5.0;
        let f = FeatureMatrix::from_rows(&[vec![0.0]]).unwrap();
        let codes = predict_codes(&m, &f).unwrap();
        assert_eq!(codes.column(0), vec![1, -1]);
    }

    #[test]
    fn grow_keeps_existing_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for arch in [Arch::Linear, Arch::Hidden { width: 4 }] {
            let m = HashModel::new(3, 2, arch, 8).unwrap();
            let x = [0.3, -0.7, 1.1];
            let before = m.forward(&x).unwrap();
            let mut g = m.clone();
            g.grow_outputs(5, &mut rng).unwrap();
            let after = g.forward(&x).unwrap();
            assert_eq!(after.len(), 5);
            assert_eq!(&after[..2], &before[..]);
            assert!(g.grow_outputs(1, &mut rng).is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let norm = Standardizer::from_parts(vec![0.5, -1.0, 2.0], vec![1.0, 0.25, 3.0]).unwrap();
        for arch in [Arch::Linear, Arch::Hidden { width: 7 }] {
            let m = HashModel::new(3, 4, arch, 12).unwrap().with_input_norm(norm.clone()).unwrap();
            let mut buf = Vec::new();
            m.save(&mut buf, "seed=12").unwrap();
            let (back, header) = HashModel::load(buf.as_slice()).unwrap();
            assert_eq!(header, "seed=12");
            assert_eq!(back, m);
            let bits: Vec<u64> = back.params().iter().map(|p| p.to_bits()).collect();
            let orig: Vec<u64> = m.params().iter().map(|p| p.to_bits()).collect();
            assert_eq!(bits, orig);
        }
        assert!(HashModel::load(&b"NOTAMODEL___"[..]).is_err());
    }

    #[test]
    fn group_plan_validation() {
        assert!(GroupPlan::new(0, 1).is_err());
        assert!(GroupPlan::for_bits(30, 8).is_err());
        assert_eq!(GroupPlan::for_bits(32, 8).unwrap().groups(), 4);
    }
}
