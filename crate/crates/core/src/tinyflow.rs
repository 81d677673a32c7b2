//! A small FiLM-conditioned MLP noise predictor with hand-written
//! reverse-mode differentiation.
//!
//! Architecture for scalar `x` and scalar `z`:
//!
//! ```text
//! u   = [sin(f_k s), cos(f_k s)]_k ++ [z]          (time/condition features)
//! e   = gelu(W_e u + b_e)                          (embedding, width W)
//! h_0 = [c_in(s) x, z]
//! a_l = W_l h_l + b_l
//! h_l+1 = gelu((1 + S_l e + s_l) * a_l + T_l e + t_l)     l = 0..L
//! eps = w_o . h_L + b_o
//! ```
//!
//! with `c_in(s) = 1 / sqrt(sigma(s)^2 + sigma_data^2)`. FiLM weights and the
//! output layer start at zero, so a fresh network predicts `eps = 0` and its
//! modulation is the identity.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::ConditionalFlow;
use crate::par::Execution;
use crate::rng;
use crate::schedules::DiffusionSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `0.5 u (1 + tanh(sqrt(2/pi) (u + 0.044715 u^3)))`
    GeluTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    pub width: usize,
    /// FiLM-modulated hidden layers; the output layer comes on top.
    pub hidden_layers: usize,
    /// Number of sin/cos frequency pairs, geometric over `[freq_min, freq_max]`.
    pub frequencies: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    pub sigma_data: f64,
    pub activation: Activation,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            width: 64,
            hidden_layers: 4,
            frequencies: 16,
            freq_min: 1.0,
            freq_max: 1000.0,
            sigma_data: 1.0,
            activation: Activation::GeluTanh,
            sigma_min: 5e-4,
            sigma_max: 5.0,
        }
    }
}

impl Arch {
    pub fn miniature(width: usize) -> Self {
        Arch {
            width,
            ..Arch::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.hidden_layers == 0 || self.frequencies == 0 {
            return Err(Error::InvalidArgument("width, hidden_layers and frequencies must be positive".into()));
        }
        if !(self.freq_min > 0.0 && self.freq_max >= self.freq_min && self.sigma_data > 0.0) {
            return Err(Error::InvalidArgument("frequencies and sigma_data must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::log_linear(self.sigma_min, self.sigma_max)
    }

    fn embed_inputs(&self) -> usize {
        2 * self.frequencies + 1
    }

    fn frequency(&self, k: usize) -> f64 {
        if self.frequencies == 1 {
            return self.freq_min;
        }
        self.freq_min * (self.freq_max / self.freq_min).powf(k as f64 / (self.frequencies - 1) as f64)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Dense {
    fn weights(&self) -> Range<usize> {
        self.w..self.w + self.rows * self.cols
    }

    fn bias(&self) -> Range<usize> {
        self.b..self.b + self.rows
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Dense,
    layers: Vec<Dense>,
    scale: Vec<Dense>,
    shift: Vec<Dense>,
    out: Dense,
    total: usize,
}

impl Layout {
    fn new(arch: &Arch) -> Self {
        let mut next = 0;
        let mut dense = |rows: usize, cols: usize| {
            let d = Dense {
                w: next,
                b: next + rows * cols,
                rows,
                cols,
            };
            next += rows * cols + rows;
            d
        };
        let w = arch.width;
        let embed = dense(w, arch.embed_inputs());
        let layers = (0..arch.hidden_layers).map(|l| dense(w, if l == 0 { 2 } else { w })).collect();
        let scale = (0..arch.hidden_layers).map(|_| dense(w, w)).collect();
        let shift = (0..arch.hidden_layers).map(|_| dense(w, w)).collect();
        let out = dense(1, w);
        Layout {
            embed,
            layers,
            scale,
            shift,
            out,
            total: next,
        }
    }

    /// Named parameter groups, in storage order.
    fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut g = Vec::new();
        let mut push = |name: String, d: &Dense| {
            g.push((format!("{name}.weight"), d.weights()));
            g.push((format!("{name}.bias"), d.bias()));
        };
        push("embed".into(), &self.embed);
        for l in 0..self.layers.len() {
            push(format!("layer{l}"), &self.layers[l]);
        }
        for l in 0..self.scale.len() {
            push(format!("film{l}.scale"), &self.scale[l]);
        }
        for l in 0..self.shift.len() {
            push(format!("film{l}.shift"), &self.shift[l]);
        }
        push("out".into(), &self.out);
        g.sort_by_key(|(_, r)| r.start);
        g
    }
}

fn gelu(u: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let t = (K * (u + A * u * u * u)).tanh();
    let value = 0.5 * u * (1.0 + t);
    let slope = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * K * (1.0 + 3.0 * A * u * u);
    (value, slope)
}

// four independent accumulators let the compiler vectorize the reduction
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x + b`.
fn affine(p: &[f64], d: &Dense, x: &[f64], out: &mut [f64]) {
    let w = &p[d.weights()];
    let b = &p[d.bias()];
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot(&w[o * d.cols..(o + 1) * d.cols], x) + b[o];
    }
}

/// Accumulates `dW += dy x^T`, `db += dy` and, if requested, `dx += W^T dy`.
fn affine_backward(p: &[f64], d: &Dense, x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
    {
        let gw = &mut grad[d.weights()];
        for (o, &g) in dy.iter().enumerate() {
            axpy(g, x, &mut gw[o * d.cols..(o + 1) * d.cols]);
        }
    }
    for (gb, g) in grad[d.bias()].iter_mut().zip(dy) {
        *gb += g;
    }
    if let Some(dx) = dx {
        let w = &p[d.weights()];
        for (o, &g) in dy.iter().enumerate() {
            axpy(g, &w[o * d.cols..(o + 1) * d.cols], dx);
        }
    }
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
struct Tape {
    u: Vec<f64>,
    ae: Vec<f64>,
    e: Vec<f64>,
    h: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
}

impl Tape {
    fn new(arch: &Arch) -> Self {
        let w = arch.width;
        let l = arch.hidden_layers;
        let mut h = vec![vec![0.0; 2]];
        h.extend((0..l).map(|_| vec![0.0; w]));
        Tape {
            u: vec![0.0; arch.embed_inputs()],
            ae: vec![0.0; w],
            e: vec![0.0; w],
            h,
            a: vec![vec![0.0; w]; l],
            g: vec![vec![0.0; w]; l],
            m: vec![vec![0.0; w]; l],
        }
    }
}

/// One training example: clean point, condition, time and the noise draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainItem {
    pub x0: f64,
    pub z: f64,
    pub s: f64,
    pub xi: f64,
}

#[derive(Clone, Debug)]
pub struct TinyFlowNet {
    arch: Arch,
    layout: Layout,
    schedule: DiffusionSchedule,
    params: Vec<f64>,
}

impl TinyFlowNet {
    /// Gaussian `N(0, 1/fan_in)` weights for the embedding and hidden layers;
    /// zeros for biases, FiLM maps and the output layer.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut r = rng::stream(seed, 0);
        for d in std::iter::once(&layout.embed).chain(&layout.layers) {
            let scale = (1.0 / d.cols as f64).sqrt();
            for p in &mut params[d.weights()] {
                *p = scale * rng::normal(&mut r);
            }
        }
        Ok(TinyFlowNet {
            schedule: arch.schedule()?,
            arch,
            layout,
            params,
        })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::ModelFormat(format!(
                "expected {} parameters for this architecture, found {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        Ok(TinyFlowNet {
            schedule: arch.schedule()?,
            arch,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Named parameter groups as ranges into [`TinyFlowNet::params`].
    pub fn param_groups(&self) -> Vec<(String, Range<usize>)> {
        self.layout.groups()
    }

    fn forward_into(&self, x: f64, z: f64, s: f64, t: &mut Tape) -> Result<f64> {
        let sigma = self.schedule.sigma(s)?;
        let p = &self.params;
        let f = self.arch.frequencies;
        for k in 0..f {
            let (sin, cos) = (self.arch.frequency(k) * s).sin_cos();
            t.u[2 * k] = sin;
            t.u[2 * k + 1] = cos;
        }
        t.u[2 * f] = z;
        affine(p, &self.layout.embed, &t.u, &mut t.ae);
        for (e, &a) in t.e.iter_mut().zip(&t.ae) {
            *e = gelu(a).0;
        }
        let c_in = 1.0 / (sigma * sigma + self.arch.sigma_data.powi(2)).sqrt();
        t.h[0][0] = c_in * x;
        t.h[0][1] = z;
        for l in 0..self.arch.hidden_layers {
            affine(p, &self.layout.layers[l], &t.h[l], &mut t.a[l]);
            affine(p, &self.layout.scale[l], &t.e, &mut t.g[l]);
            affine(p, &self.layout.shift[l], &t.e, &mut t.m[l]);
            for i in 0..self.arch.width {
                t.g[l][i] += 1.0;
                t.m[l][i] += t.g[l][i] * t.a[l][i];
                t.h[l + 1][i] = gelu(t.m[l][i]).0;
            }
        }
        let mut out = [0.0];
        affine(p, &self.layout.out, &t.h[self.arch.hidden_layers], &mut out);
        Ok(out[0])
    }

    fn backward(&self, t: &Tape, dout: f64, grad: &mut [f64]) {
        let p = &self.params;
        let w = self.arch.width;
        let top = self.arch.hidden_layers;
        let mut dh = vec![0.0; w];
        affine_backward(p, &self.layout.out, &t.h[top], &[dout], grad, Some(&mut dh));
        let mut de = vec![0.0; w];
        let (mut dm, mut dg, mut da) = (vec![0.0; w], vec![0.0; w], vec![0.0; w]);
        for l in (0..top).rev() {
            for i in 0..w {
                dm[i] = dh[i] * gelu(t.m[l][i]).1;
                dg[i] = dm[i] * t.a[l][i];
                da[i] = dm[i] * t.g[l][i];
            }
            affine_backward(p, &self.layout.scale[l], &t.e, &dg, grad, Some(&mut de));
            affine_backward(p, &self.layout.shift[l], &t.e, &dm, grad, Some(&mut de));
            if l == 0 {
                affine_backward(p, &self.layout.layers[l], &t.h[l], &da, grad, None);
            } else {
                dh.fill(0.0);
                affine_backward(p, &self.layout.layers[l], &t.h[l], &da, grad, Some(&mut dh));
            }
        }
        for (d, &a) in de.iter_mut().zip(&t.ae) {
            *d *= gelu(a).1;
        }
        affine_backward(p, &self.layout.embed, &t.u, &de, grad, None);
    }

    /// Predicted noise `eps_hat(x, z, s)`.
    pub fn predict(&self, x: f64, z: f64, s: f64) -> Result<f64> {
        self.forward_into(x, z, s, &mut Tape::new(&self.arch))
    }

    /// Mean squared error `mean (eps_hat(x0 + sigma(s) xi, z, s) - xi)^2` and
    /// its gradient. The batch is processed in fixed chunks whose partial
    /// gradients are summed in order, so the result does not depend on the
    /// execution mode.
    pub fn loss_and_grad(&self, items: &[TrainItem], exec: Execution) -> Result<(f64, Vec<f64>)> {
        const CHUNK: usize = 32;
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let n = items.len() as f64;
        let chunks = items.len().div_ceil(CHUNK);
        let parts = exec.try_map(chunks, |c| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new(&self.arch);
            let mut grad = vec![0.0; self.layout.total];
            let mut loss = 0.0;
            for it in &items[c * CHUNK..((c + 1) * CHUNK).min(items.len())] {
                let xs = it.x0 + self.schedule.sigma(it.s)? * it.xi;
                let r = self.forward_into(xs, it.z, it.s, &mut tape)? - it.xi;
                loss += r * r;
                self.backward(&tape, 2.0 * r / n, &mut grad);
            }
            Ok((loss, grad))
        })?;
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            axpy(1.0, &g, &mut grad);
        }
        Ok((loss / n, grad))
    }

    /// Loss only (used by finite-difference checks).
    pub fn loss(&self, items: &[TrainItem]) -> Result<f64> {
        let mut tape = Tape::new(&self.arch);
        let mut total = 0.0;
        for it in items {
            let xs = it.x0 + self.schedule.sigma(it.s)? * it.xi;
            let r = self.forward_into(xs, it.z, it.s, &mut tape)? - it.xi;
            total += r * r;
        }
        Ok(total / items.len() as f64)
    }

    const MAGIC: &'static [u8; 8] = b"SDEVFLOW";
    const VERSION: u32 = 1;

    /// Model file: magic, format version, JSON architecture descriptor and
    /// the flat little-endian parameter array.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let descriptor = serde_json::to_vec(&self.arch)?;
        out.write_all(Self::MAGIC)?;
        out.write_all(&Self::VERSION.to_le_bytes())?;
        out.write_all(&(descriptor.len() as u32).to_le_bytes())?;
        out.write_all(&descriptor)?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::ModelFormat("not a tiny-flow model file".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != Self::VERSION {
            return Err(Error::ModelFormat(format!("unsupported format version {version}")));
        }
        input.read_exact(&mut word)?;
        let mut descriptor = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut descriptor)?;
        let arch: Arch = serde_json::from_slice(&descriptor)?;
        let mut long = [0u8; 8];
        input.read_exact(&mut long)?;
        let count = u64::from_le_bytes(long) as usize;
        let expected = Layout::new(&arch).total;
        if count != expected {
            return Err(Error::ModelFormat(format!(
                "parameter count {count} does not match the architecture ({expected})"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut long)?;
            params.push(f64::from_le_bytes(long));
        }
        TinyFlowNet::from_params(arch, params)
    }
}

impl ConditionalFlow for TinyFlowNet {
    fn dim(&self) -> usize {
        1
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn velocity(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let eps = self.epsilon(x, z, s)?;
        let rate = self.schedule.sigma_dot(s)?;
        Ok(vec![rate * eps[0]])
    }

    fn epsilon(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        if x.len() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: x.len() });
        }
        if z.len() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: z.len() });
        }
        Ok(vec![self.predict(x[0], z[0], s)?])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Training times are the midpoints of this many uniform cells of `[0, 1]`.
    pub time_steps: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch: 128,
            lr: 4e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            time_steps: 512,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.time_steps == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "iterations, batch, time_steps and log_every must be positive".into(),
            ));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.adam_eps > 0.0 && unit(self.beta1) && unit(self.beta2)) {
            return Err(Error::InvalidArgument("invalid optimizer hyper-parameters".into()));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to 0.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        0.5 * self.lr * (1.0 + (PI * iteration as f64 / self.iterations as f64).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
            params[i] -= lr * (update + cfg.weight_decay * params[i]);
        }
    }
}

/// Draws the batch of iteration `iteration` from `(z, x)` pairs.
pub fn draw_batch(data: &[(f64, f64)], cfg: &TrainConfig, iteration: usize) -> Vec<TrainItem> {
    let mut r = rng::stream(rng::derive_seed(cfg.seed, 0x7261_696e), iteration as u64);
    (0..cfg.batch)
        .map(|_| {
            let (z, x0) = data[r.gen_range(0..data.len())];
            let j = r.gen_range(0..cfg.time_steps);
            TrainItem {
                x0,
                z,
                s: (j as f64 + 0.5) / cfg.time_steps as f64,
                xi: rng::normal(&mut r),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: TinyFlowNet,
    /// Loss of every iteration.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// `(first iteration, mean loss)` per window of `every` iterations.
    pub fn loss_log(&self, every: usize) -> Vec<(usize, f64)> {
        self.losses
            .chunks(every.max(1))
            .enumerate()
            .map(|(k, c)| (k * every.max(1), c.iter().sum::<f64>() / c.len() as f64))
            .collect()
    }
}

/// Trains on `(z, x)` pairs with the configured optimizer schedule.
pub fn train(mut net: TinyFlowNet, data: &[(f64, f64)], cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut opt = AdamW::new(net.param_count());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw_batch(data, cfg, it);
        let (loss, grad) = net.loss_and_grad(&batch, exec)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(it));
        }
        opt.step(&mut net.params, &grad, cfg.learning_rate(it), cfg);
        losses.push(loss);
    }
    Ok(TrainOutcome { net, losses })
}
