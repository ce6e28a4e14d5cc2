//! A minimal pre-norm decoder-only transformer with a pluggable rotary
//! variant and hand-written reverse-mode gradients.
//!
//! Layout per block: `x += Wo * attn(rms(x))`, `x += W_down * silu(W_up * rms(x))`.
//! The output head is tied to the token embedding.

mod checkpoint;
mod grad;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::Gradients;
pub use train::{steps_for_token_budget, train, Curriculum, TrainOptions, TrainedModel};

use rand::Rng;

use crate::attention::{causal_head, AttentionMap, AttentionRecord};
use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::rope::{RotaryVariant, RotationTable};
use crate::seed::{child_rng, rng_from};

pub const DEFAULT_INFERENCE_CAP: usize = 8192;
pub(crate) const RMS_EPS: f64 = 1e-6;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub train_context_length: usize,
    pub variant: RotaryVariant,
    pub seed: u64,
    /// Matrices are drawn from `U(-a, a)` with `a = init_scale * sqrt(3 / fan_in)`.
    pub init_scale: f64,
    pub inference_cap: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if self.layer_count == 0 || self.head_count == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "layer_count, head_count and mlp_ratio must be positive".into(),
            ));
        }
        if self.head_dim < 2 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be even and >= 2, got {}",
                self.head_dim
            )));
        }
        if self.train_context_length < 8 {
            return Err(Error::Config(format!(
                "train_context_length must be >= 8, got {}",
                self.train_context_length
            )));
        }
        if self.variant.head_dim() != self.head_dim {
            return Err(Error::Config(format!(
                "variant head_dim {} differs from model head_dim {}",
                self.variant.head_dim(),
                self.head_dim
            )));
        }
        self.variant.validate()?;
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::Config(format!(
                "init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        if self.inference_cap == 0 {
            return Err(Error::Config("inference_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.head_count * self.head_dim
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim()
    }

    /// `V*D + L*(2D + 4D^2 + 2*D*H) + D`.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim();
        let h = self.mlp_dim();
        self.vocab_size * d + self.layer_count * (2 * d + 4 * d * d + 2 * d * h) + d
    }

    /// `(name, shape)` of every tensor in declaration order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim();
        let h = self.mlp_dim();
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        for l in 0..self.layer_count {
            out.push((format!("layer{l}.attn_norm"), vec![d]));
            out.push((format!("layer{l}.wq"), vec![d, d]));
            out.push((format!("layer{l}.wk"), vec![d, d]));
            out.push((format!("layer{l}.wv"), vec![d, d]));
            out.push((format!("layer{l}.wo"), vec![d, d]));
            out.push((format!("layer{l}.mlp_norm"), vec![d]));
            out.push((format!("layer{l}.w_up"), vec![d, h]));
            out.push((format!("layer{l}.w_down"), vec![h, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![0.0; len],
        }
    }
}

pub(crate) const PER_LAYER: usize = 8;
pub(crate) const ATTN_NORM: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const MLP_NORM: usize = 5;
pub(crate) const W_UP: usize = 6;
pub(crate) const W_DOWN: usize = 7;

#[inline]
pub(crate) fn slot(layer: usize, which: usize) -> usize {
    1 + layer * PER_LAYER + which
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    config: ModelConfig,
    params: Vec<ParamTensor>,
}

impl TinyModel {
    /// Seeded scaled-uniform initialization; norm gains start at 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = child_rng(config.seed, "init");
        let params = config
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = ParamTensor::zeros(name, shape);
                if t.shape.len() == 1 {
                    t.data.fill(1.0);
                } else {
                    let fan_in = if t.name == "embed" { t.shape[1] } else { t.shape[0] };
                    let a = config.init_scale * (3.0 / fan_in as f64).sqrt();
                    if a > 0.0 {
                        for x in &mut t.data {
                            *x = rng.gen_range(-a..a);
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Every parameter zero, so every logit is zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| ParamTensor::zeros(name, shape))
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<ParamTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.tensor_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {name} has wrong shape")));
            }
            if p.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("tensor {name} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Replaces the model's own rotary variant, e.g. to evaluate a model
    /// trained with plain RoPE under NTK scaling.
    pub fn with_variant(&self, variant: RotaryVariant) -> Result<Self> {
        let mut config = self.config.clone();
        config.variant = variant;
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        &self.params[idx].data
    }

    // ── Forward ─────────────────────────────────────────────────────────

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        self.forward_with(tokens, &self.config.variant)
    }

    /// Forward pass under an arbitrary rotary variant of matching head_dim.
    pub fn forward_with(&self, tokens: &[usize], variant: &RotaryVariant) -> Result<ForwardOutput> {
        let cache = self.run(tokens, variant)?;
        Ok(cache.into_output(&self.config))
    }

    /// Logits only; skips assembling the attention record.
    pub fn logits_with(&self, tokens: &[usize], variant: &RotaryVariant) -> Result<Vec<f64>> {
        Ok(self.run(tokens, variant)?.logits)
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.inference_cap {
            return Err(Error::CapExceeded {
                len: tokens.len(),
                cap: self.config.inference_cap,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn run(&self, tokens: &[usize], variant: &RotaryVariant) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        if variant.head_dim() != self.config.head_dim {
            return Err(Error::Shape(format!(
                "variant head_dim {} differs from model head_dim {}",
                variant.head_dim(),
                self.config.head_dim
            )));
        }
        variant.validate()?;
        let cfg = &self.config;
        let n = tokens.len();
        let d = cfg.model_dim();
        let dh = cfg.head_dim;
        let hm = cfg.mlp_dim();
        let positions: Vec<usize> = (0..n).collect();
        let table = variant.rotation_table(&positions);
        let scale = variant.logit_scale();

        let embed = self.data(0);
        let mut x = Vec::with_capacity(n * d);
        for &t in tokens {
            x.extend_from_slice(&embed[t * d..(t + 1) * d]);
        }

        let mut layers = Vec::with_capacity(cfg.layer_count);
        for l in 0..cfg.layer_count {
            let (a, inv1) = rms_norm(&x, self.data(slot(l, ATTN_NORM)), n, d);
            let q_all = matmul(&a, self.data(slot(l, WQ)), n, d, d);
            let k_all = matmul(&a, self.data(slot(l, WK)), n, d, d);
            let v_all = matmul(&a, self.data(slot(l, WV)), n, d, d);

            let mut q = Vec::with_capacity(cfg.head_count);
            let mut k = Vec::with_capacity(cfg.head_count);
            let mut v = Vec::with_capacity(cfg.head_count);
            let mut probs = Vec::with_capacity(cfg.head_count);
            let mut o = vec![0.0; n * d];
            for h in 0..cfg.head_count {
                let mut qh = head_slice(&q_all, n, d, h, dh);
                let mut kh = head_slice(&k_all, n, d, h, dh);
                let vh = head_slice(&v_all, n, d, h, dh);
                rotate_rows(&table, &mut qh, dh);
                rotate_rows(&table, &mut kh, dh);
                let mut p = vec![0.0; n * n];
                let mut oh = vec![0.0; n * dh];
                causal_head(&qh, &kh, &vh, n, dh, scale, &mut p, &mut oh);
                for i in 0..n {
                    o[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
                q.push(qh);
                k.push(kh);
                v.push(vh);
                probs.push(p);
            }

            let attn_out = matmul(&o, self.data(slot(l, WO)), n, d, d);
            let x_in = x;
            let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let (b, inv2) = rms_norm(&x_mid, self.data(slot(l, MLP_NORM)), n, d);
            let u = matmul(&b, self.data(slot(l, W_UP)), n, d, hm);
            let s: Vec<f64> = u.iter().map(|&z| silu(z)).collect();
            let mlp_out = matmul(&s, self.data(slot(l, W_DOWN)), n, hm, d);
            x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

            if x.iter().any(|z| !z.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activations in layer {l}")));
            }
            layers.push(LayerCache {
                x_in,
                inv1,
                a,
                q,
                k,
                v,
                probs,
                o,
                x_mid,
                inv2,
                b,
                u,
                s,
            });
        }

        let final_idx = slot(cfg.layer_count, 0);
        let (f, inv_f) = rms_norm(&x, self.data(final_idx), n, d);
        let logits = matmul_bt(&f, embed, n, d, cfg.vocab_size);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite logits in output head".into()));
        }
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            table,
            scale,
            layers,
            x_final: x,
            inv_f,
            f,
            logits,
        })
    }

    // ── Generation ──────────────────────────────────────────────────────

    /// Autoregressive decoding without a KV cache: every step re-runs the
    /// whole context and keeps that step's attention record.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new_tokens: usize,
        decoding: Decoding,
    ) -> Result<Generation> {
        self.generate_with(prompt, max_new_tokens, decoding, &self.config.variant)
    }

    pub fn generate_with(
        &self,
        prompt: &[usize],
        max_new_tokens: usize,
        decoding: Decoding,
        variant: &RotaryVariant,
    ) -> Result<Generation> {
        self.check_tokens(prompt)?;
        let total = prompt.len() + max_new_tokens;
        if total > self.config.inference_cap {
            return Err(Error::CapExceeded {
                len: total,
                cap: self.config.inference_cap,
            });
        }
        let mut rng = match decoding {
            Decoding::Greedy => None,
            Decoding::Sample { seed } => Some(rng_from(seed)),
        };
        let vocab = self.config.vocab_size;
        let mut context = prompt.to_vec();
        let mut tokens = Vec::with_capacity(max_new_tokens);
        let mut records = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            let out = self.forward_with(&context, variant)?;
            let last = &out.logits[(context.len() - 1) * vocab..];
            let next = match rng.as_mut() {
                None => argmax(last),
                Some(r) => sample_softmax(last, r),
            };
            tokens.push(next);
            records.push(out.attention);
            context.push(next);
        }
        Ok(Generation { tokens, records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Sample { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// One record per generated token: the forward pass that produced it.
    pub records: Vec<AttentionRecord>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `[n, vocab_size]`.
    pub logits: Vec<f64>,
    pub attention: AttentionRecord,
}

impl ForwardOutput {
    pub fn logits_row(&self, i: usize, vocab: usize) -> &[f64] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }
}

// ── Forward caches ──────────────────────────────────────────────────────

pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub inv1: Vec<f64>,
    pub a: Vec<f64>,
    /// Rotated queries per head, `[n, dh]`.
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub o: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub inv2: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
}

pub(crate) struct ForwardCache {
    pub tokens: Vec<usize>,
    pub table: RotationTable,
    pub scale: f64,
    pub layers: Vec<LayerCache>,
    pub x_final: Vec<f64>,
    pub inv_f: Vec<f64>,
    pub f: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    fn into_output(self, cfg: &ModelConfig) -> ForwardOutput {
        let n = self.tokens.len();
        let mut maps = Vec::with_capacity(cfg.layer_count * cfg.head_count);
        let mut outputs = Vec::with_capacity(cfg.layer_count);
        let d = cfg.model_dim();
        for (l, layer) in self.layers.into_iter().enumerate() {
            for (h, weights) in layer.probs.into_iter().enumerate() {
                maps.push(AttentionMap {
                    layer: l,
                    head: h,
                    n,
                    weights,
                });
            }
            outputs.push(layer.o.chunks(d).map(<[f64]>::to_vec).collect());
        }
        ForwardOutput {
            logits: self.logits,
            attention: AttentionRecord {
                n,
                layer_count: cfg.layer_count,
                head_count: cfg.head_count,
                maps,
                outputs,
            },
        }
    }
}

// ── Small kernels ───────────────────────────────────────────────────────

/// `y = g * x / sqrt(mean(x^2) + eps)` per row; returns `(y, 1/rms)`.
pub(crate) fn rms_norm(x: &[f64], gain: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|z| z * z).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv[i] = r;
        for ((o, &z), &g) in y[i * d..(i + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = g * z * r;
        }
    }
    (y, inv)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn head_slice(all: &[f64], n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&all[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn rotate_rows(table: &RotationTable, rows: &mut [f64], dh: usize) {
    for (i, chunk) in rows.chunks_mut(dh).enumerate() {
        table.apply(i, chunk);
    }
}

/// `a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    crate::linalg::matmul_a_bt_acc(a, b, m, k, n, &mut out);
    out
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return i;
        }
    }
    row.len() - 1
}

/// `ln(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}
