//! Small fully-connected networks with analytic backpropagation, Adam, and
//! the actor/critic heads used by the scheduler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{obs_width, BidBounds, Mode, RobotAction, CAPACITY_LEVELS};
use crate::error::{Error, Result};

/// Tanh hidden layers, linear output. Parameters are stored flat, layer by
/// layer, as a row-major weight matrix followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    version: u64,
}

/// Layer activations from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut m = Self::zeros(sizes);
        let mut off = 0;
        for w in sizes.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for p in &mut m.params[off..off + w[0] * w[1]] {
                *p = rng.random_range(-limit..limit);
            }
            off += w[0] * w[1] + w[1];
        }
        m
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "invalid layer sizes {sizes:?}");
        Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)], version: 0 }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(sizes) {
            return Err(Error::Shape { expected: param_count(sizes), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self { sizes: sizes.to_vec(), params, version: 0 })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Offsets of weights and biases of layer `l`.
    fn layer(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input_width() {
            return Err(Error::Shape { expected: self.input_width(), got: x.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer(l);
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let row = &self.params[w_off + j * n_in..w_off + (j + 1) * n_in];
                let z = self.params[b_off + j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                out.push(if l + 1 < layers { z.tanh() } else { z });
            }
            acts.push(out);
        }
        Ok(MlpCache { version: self.version, acts })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.acts.pop().unwrap())
    }

    /// Accumulate dL/dθ into `grads` and return dL/dx.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache: cache.version, params: self.version });
        }
        if grad_out.len() != self.output_width() {
            return Err(Error::Shape { expected: self.output_width(), got: grad_out.len() });
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len(), got: grads.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer(l);
            let input = &cache.acts[l];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                grads[b_off + j] += d;
                for (g, a) in grads[w_off + j * n_in..w_off + (j + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&self.params[w_off + j * n_in..w_off + (j + 1) * n_in]) {
                    *p += d * w;
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        let layers = (0..self.sizes.len() - 1)
            .map(|l| {
                let (w, b) = self.layer(l);
                LayerSnapshot {
                    rows: self.sizes[l + 1],
                    cols: self.sizes[l],
                    weights: self.params[w..b].to_vec(),
                    bias: self.params[b..b + self.sizes[l + 1]].to_vec(),
                }
            })
            .collect();
        MlpSnapshot { layers }
    }

    pub fn from_snapshot(s: &MlpSnapshot) -> Result<Self> {
        if s.layers.is_empty() {
            return Err(Error::InvalidInput("network has no layers".into()));
        }
        let mut sizes = vec![s.layers[0].cols];
        let mut params = Vec::new();
        for (i, l) in s.layers.iter().enumerate() {
            if l.cols != *sizes.last().unwrap() {
                return Err(Error::InvalidInput(format!("layer {i} expects {} inputs, previous emits {}", l.cols, sizes.last().unwrap())));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Shape { expected: l.rows * l.cols + l.rows, got: l.weights.len() + l.bias.len() });
            }
            sizes.push(l.rows);
            params.extend_from_slice(&l.weights);
            params.extend_from_slice(&l.bias);
        }
        Self::from_params(&sizes, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub layers: Vec<LayerSnapshot>,
}

/// Categorical distribution with hard-masked slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCategorical {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl MaskedCategorical {
    pub fn new(logits: &[f64], mask: &[bool]) -> Result<Self> {
        if logits.len() != mask.len() {
            return Err(Error::Shape { expected: logits.len(), got: mask.len() });
        }
        let max = logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidInput("every categorical slot is masked".into()));
        }
        if !max.is_finite() {
            return Err(Error::InvalidInput("non-finite logits".into()));
        }
        let log_z = max + logits.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| (l - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> =
            logits.iter().zip(mask).map(|(l, &m)| if m { l - log_z } else { f64::NEG_INFINITY }).collect();
        let probs = log_probs.iter().map(|lp| if lp.is_finite() { lp.exp() } else { 0.0 }).collect();
        Ok(Self { probs, log_probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_prob(&self, a: usize) -> Result<f64> {
        match self.log_probs.get(a) {
            Some(lp) if lp.is_finite() => Ok(*lp),
            Some(_) => Err(Error::InvalidInput(format!("action {a} is masked"))),
            None => Err(Error::Shape { expected: self.probs.len(), got: a + 1 }),
        }
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().zip(&self.log_probs).filter(|(p, _)| **p > 0.0).map(|(p, lp)| p * lp).sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    /// d log p(a) / d logits; masked entries are exactly 0.
    pub fn grad_log_prob(&self, a: usize) -> Result<Vec<f64>> {
        self.log_prob(a)?;
        Ok(self.probs.iter().enumerate().map(|(i, p)| if i == a { 1.0 - p } else { -p }).collect())
    }

    /// dH / d logits.
    pub fn grad_entropy(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, lp)| if *p > 0.0 { -p * (lp + h) } else { 0.0 })
            .collect()
    }
}

/// Gaussian in latent space squashed into the bid interval by tanh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedGaussian {
    pub mean: f64,
    pub log_sd: f64,
    pub bounds: BidBounds,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl BoundedGaussian {
    pub fn new(mean: f64, log_sd: f64, bounds: BidBounds) -> Result<Self> {
        if !mean.is_finite() || !log_sd.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite bid distribution (mean {mean}, log_sd {log_sd})")));
        }
        bounds.validate()?;
        Ok(Self { mean, log_sd, bounds })
    }

    pub fn sd(&self) -> f64 {
        self.log_sd.exp()
    }

    pub fn squash(&self, u: f64) -> f64 {
        (self.bounds.mid() + self.bounds.half_width() * u.tanh()).clamp(self.bounds.a_min, self.bounds.a_max)
    }

    /// Latent value for a bid; interior bids only, edges are pulled in.
    pub fn unsquash(bounds: &BidBounds, bid: f64) -> f64 {
        let y = ((bid - bounds.mid()) / bounds.half_width()).clamp(-0.999, 0.999);
        y.atanh()
    }

    pub fn mode(&self) -> f64 {
        self.squash(self.mean)
    }

    /// Returns (bid, latent, log-density of the bid).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, f64) {
        let z: f64 = StandardNormal.sample(rng);
        let u = self.mean + self.sd() * z;
        (self.squash(u), u, self.log_prob_latent(u))
    }

    /// Log-density of the squashed variable at the bid produced by `u`.
    pub fn log_prob_latent(&self, u: f64) -> f64 {
        let z = (u - self.mean) / self.sd();
        let gauss = -0.5 * z * z - self.log_sd - LN_SQRT_2PI;
        // |d bid / d u| = half × (1 − tanh²u), computed stably.
        let log_det = self.bounds.half_width().ln() + 2.0 * (std::f64::consts::LN_2 - u.abs() - (-2.0 * u.abs()).exp().ln_1p());
        gauss - log_det
    }

    /// (d logp / d mean, d logp / d log_sd) at latent `u`.
    pub fn grad_log_prob(&self, u: f64) -> (f64, f64) {
        let sd = self.sd();
        let z = (u - self.mean) / sd;
        (z / sd, z * z - 1.0)
    }

    /// Entropy of the latent Gaussian; its gradient w.r.t. log_sd is 1.
    pub fn latent_entropy(&self) -> f64 {
        0.5 + LN_SQRT_2PI + self.log_sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected Adam step. Returns false (and leaves everything
    /// untouched) when a gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!("skipping optimizer step: gradient {i} is {}", grads[i]);
            return Ok(false);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(true)
    }
}

/// Head layout of the actor output vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub max_robots: usize,
}

impl HeadLayout {
    pub fn mode(&self) -> std::ops::Range<usize> {
        0..Mode::COUNT
    }
    pub fn target(&self) -> std::ops::Range<usize> {
        Mode::COUNT..Mode::COUNT + self.max_robots
    }
    pub fn capacity(&self) -> std::ops::Range<usize> {
        let s = Mode::COUNT + self.max_robots;
        s..s + CAPACITY_LEVELS.len()
    }
    pub fn bid(&self) -> usize {
        Mode::COUNT + self.max_robots + CAPACITY_LEVELS.len()
    }
    pub fn width(&self) -> usize {
        self.bid() + 1
    }
}

/// Shared multi-head policy: mode, target, capacity and a squashed
/// Gaussian bid with a state-independent log-sd.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub net: Mlp,
    pub log_sd: f64,
    pub layout: HeadLayout,
    pub bounds: BidBounds,
}

pub const ACTOR_HIDDEN: [usize; 2] = [64, 64];
pub const CRITIC_HIDDEN: [usize; 2] = [128, 128];

impl Actor {
    pub fn new<R: Rng + ?Sized>(max_robots: usize, bounds: BidBounds, rng: &mut R) -> Self {
        Self::with_hidden(obs_width(max_robots), &ACTOR_HIDDEN, max_robots, bounds, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(input: usize, hidden: &[usize], max_robots: usize, bounds: BidBounds, rng: &mut R) -> Self {
        let layout = HeadLayout { max_robots };
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.width());
        let mut net = Mlp::new(&sizes, rng);
        // Small output layer keeps the initial heads near uniform.
        let last = sizes.len() - 2;
        let (w, b) = net.layer(last);
        for p in &mut net.params_mut()[w..b] {
            *p *= 0.1;
        }
        Self { net, log_sd: -0.5, layout, bounds }
    }

    /// Trunk parameters followed by log_sd.
    pub fn param_count(&self) -> usize {
        self.net.len() + 1
    }

    pub fn forward(&self, features: &[f64]) -> Result<MlpCache> {
        self.net.forward(features)
    }

    pub fn bid_dist(&self, out: &[f64]) -> Result<BoundedGaussian> {
        BoundedGaussian::new(out[self.layout.bid()], self.log_sd, self.bounds)
    }

    pub fn mode_dist(&self, out: &[f64], mask: &[bool]) -> Result<MaskedCategorical> {
        MaskedCategorical::new(&out[self.layout.mode()], mask)
    }

    pub fn target_dist(&self, out: &[f64], mask: &[bool]) -> Result<MaskedCategorical> {
        MaskedCategorical::new(&out[self.layout.target()], mask)
    }

    pub fn capacity_dist(&self, out: &[f64]) -> Result<MaskedCategorical> {
        MaskedCategorical::new(&out[self.layout.capacity()], &[true; CAPACITY_LEVELS.len()])
    }

    /// Backprop head gradients; the last entry of `grads` receives the
    /// log_sd gradient passed in `d_log_sd`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], d_log_sd: f64, grads: &mut [f64]) -> Result<()> {
        let n = self.net.len();
        if grads.len() != n + 1 {
            return Err(Error::Shape { expected: n + 1, got: grads.len() });
        }
        self.net.backward(cache, grad_out, &mut grads[..n])?;
        grads[n] += d_log_sd;
        Ok(())
    }

    pub fn apply(&mut self, adam: &mut AdamState, grads: &[f64]) -> Result<bool> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(self.net.params());
        flat.push(self.log_sd);
        let applied = adam.step(&mut flat, grads)?;
        if applied {
            let n = self.net.len();
            self.net.params_mut().copy_from_slice(&flat[..n]);
            self.log_sd = flat[n].clamp(-5.0, 2.0);
        }
        Ok(applied)
    }

    /// Bid and capacity for one observation. Mode and target are filled in
    /// by the auction outcome.
    pub fn act<R: Rng + ?Sized>(&self, features: &[f64], stochastic: bool, rng: &mut R) -> Result<RobotAction> {
        let cache = self.forward(features)?;
        let out = cache.output();
        let bid = self.bid_dist(out)?;
        let cap = self.capacity_dist(out)?;
        let (value, latent, log_prob) = if stochastic {
            let (b, u, lp) = bid.sample(rng);
            (b, Some(u), Some(lp))
        } else {
            (bid.mode(), None, None)
        };
        Ok(RobotAction { bid: value, mode: Mode::Local, target: None, capacity: cap.argmax(), latent, log_prob })
    }
}

/// Centralized value function.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Self {
        Self::with_hidden(input, &CRITIC_HIDDEN, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::new(&sizes, rng) }
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.net.predict(state)?[0])
    }
}

pub const CHECKPOINT_FORMAT: &str = "fleetsched-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub phase: String,
    pub config_hash: String,
    pub max_robots: usize,
    pub bounds: BidBounds,
    pub actor: MlpSnapshot,
    pub log_sd: f64,
    #[serde(default)]
    pub critic: Option<MlpSnapshot>,
    /// Identity slot presented by each roster slot.
    #[serde(default)]
    pub embed_alias: Vec<usize>,
    /// Throughput of each occupied slot, used to pick donors for new devices.
    #[serde(default)]
    pub slot_throughput: Vec<f64>,
}

impl Checkpoint {
    pub fn new(phase: &str, config_hash: &str, actor: &Actor, critic: Option<&Critic>, slot_throughput: Vec<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            phase: phase.into(),
            config_hash: config_hash.into(),
            max_robots: actor.layout.max_robots,
            bounds: actor.bounds,
            actor: actor.net.snapshot(),
            log_sd: actor.log_sd,
            critic: critic.map(|c| c.net.snapshot()),
            embed_alias: (0..slot_throughput.len()).collect(),
            slot_throughput,
        }
    }

    pub fn actor(&self) -> Result<Actor> {
        let net = Mlp::from_snapshot(&self.actor)?;
        let layout = HeadLayout { max_robots: self.max_robots };
        if net.output_width() != layout.width() || net.input_width() != obs_width(self.max_robots) {
            return Err(Error::InvalidInput("actor shape does not match the roster width".into()));
        }
        Ok(Actor { net, log_sd: self.log_sd, layout, bounds: self.bounds })
    }

    pub fn critic(&self) -> Result<Option<Critic>> {
        self.critic.as_ref().map(|s| Mlp::from_snapshot(s).map(|net| Critic { net })).transpose()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("checkpoint {}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint {}: unsupported format {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}
