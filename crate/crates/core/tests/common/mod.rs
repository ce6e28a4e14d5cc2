//! Independent reference implementations used as test oracles. Everything
//! here is written directly from the definitions with plain loops and
//! shares no kernels with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use ropelab::{RotaryVariant, TinyModel};

// ── Rotary ──────────────────────────────────────────────────────────────

fn base_theta(base: f64, d: usize, j: usize) -> f64 {
    base.powf(-(2.0 * j as f64) / d as f64)
}

/// Angle for pair `j` at position `m`, from the variant definitions.
pub fn angle(v: &RotaryVariant, m: usize, j: usize) -> f64 {
    let c = v.config();
    let d = c.head_dim();
    let theta = base_theta(c.base(), d, j);
    let m = m as f64;
    match *v {
        RotaryVariant::Rope { .. } => m * theta,
        RotaryVariant::Pi { alpha, .. } => m / alpha * theta,
        RotaryVariant::Ntk { new_base, .. } => m * base_theta(new_base, d, j),
        RotaryVariant::Yarn {
            alpha,
            ramp_low,
            ramp_high,
            ..
        } => {
            let wavelength = 2.0 * std::f64::consts::PI / theta;
            let r = if wavelength <= ramp_low {
                1.0
            } else if wavelength >= ramp_high {
                0.0
            } else {
                (ramp_high / wavelength - 1.0) / (ramp_high / ramp_low - 1.0)
            };
            m * (r * theta + (1.0 - r) * theta / alpha)
        }
    }
}

pub fn rotate(v: &RotaryVariant, h: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for j in 0..h.len() / 2 {
        let a = angle(v, m, j);
        let (x, y) = (h[2 * j], h[2 * j + 1]);
        out[2 * j] = x * a.cos() - y * a.sin();
        out[2 * j + 1] = y * a.cos() + x * a.sin();
    }
    out
}

pub fn logit_scale(v: &RotaryVariant) -> f64 {
    match *v {
        RotaryVariant::Yarn { temperature, .. } => 1.0 / temperature,
        _ => 1.0,
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

// ── Attention ───────────────────────────────────────────────────────────

pub struct BruteAttention {
    /// `[head][i][j]`
    pub weights: Vec<Vec<Vec<f64>>>,
    /// `[head][i][lane]`
    pub outputs: Vec<Vec<Vec<f64>>>,
}

/// Softmax attention over `j <= i` with explicit loops and no max shift.
pub fn brute_attention(
    q: &[Vec<Vec<f64>>],
    k: &[Vec<Vec<f64>>],
    v: &[Vec<Vec<f64>>],
    positions: &[usize],
    variant: &RotaryVariant,
) -> BruteAttention {
    let n = positions.len();
    let mut weights = Vec::new();
    let mut outputs = Vec::new();
    for h in 0..q.len() {
        let d = q[h][0].len();
        let mut w = vec![vec![0.0; n]; n];
        let mut o = vec![vec![0.0; d]; n];
        for i in 0..n {
            let qi = rotate(variant, &q[h][i], positions[i]);
            let mut e = vec![0.0; i + 1];
            let mut total = 0.0;
            for j in 0..=i {
                let kj = rotate(variant, &k[h][j], positions[j]);
                e[j] = (logit_scale(variant) * dot(&qi, &kj) / (d as f64).sqrt()).exp();
                total += e[j];
            }
            for j in 0..=i {
                w[i][j] = e[j] / total;
                for lane in 0..d {
                    o[i][lane] += w[i][j] * v[h][j][lane];
                }
            }
        }
        weights.push(w);
        outputs.push(o);
    }
    BruteAttention { weights, outputs }
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

// ── Model ───────────────────────────────────────────────────────────────

fn tensor<'a>(model: &'a TinyModel, name: &str) -> &'a [f64] {
    &model.param(name).unwrap_or_else(|| panic!("no tensor {name}")).data
}

/// `x[i] * W` with `W` stored row-major as `[rows, cols]`.
fn times(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, xr) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xr * w[r * cols + c];
        }
    }
    out
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(a, g)| g * a / s).collect()
}

pub struct OracleForward {
    /// `[position][token]`
    pub logits: Vec<Vec<f64>>,
    /// `[layer][head][i][j]`
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Straight-line forward pass of the pre-norm decoder, one position at a
/// time, reading tensors by name.
pub fn forward(model: &TinyModel, tokens: &[usize], variant: &RotaryVariant) -> OracleForward {
    let cfg = model.config();
    let d = cfg.head_count * cfg.head_dim;
    let dh = cfg.head_dim;
    let hidden = cfg.mlp_ratio * d;
    let n = tokens.len();
    let embed = tensor(model, "embed");
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| embed[t * d..(t + 1) * d].to_vec()).collect();
    let mut attention = Vec::new();

    for l in 0..cfg.layer_count {
        let p = |s: &str| format!("layer{l}.{s}");
        let a: Vec<Vec<f64>> = x.iter().map(|r| rms(r, tensor(model, &p("attn_norm")))).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| times(r, tensor(model, &p("wq")), d)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| times(r, tensor(model, &p("wk")), d)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| times(r, tensor(model, &p("wv")), d)).collect();
        let split = |m: &Vec<Vec<f64>>, h: usize| -> Vec<Vec<f64>> {
            m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect()
        };
        let qh: Vec<_> = (0..cfg.head_count).map(|h| split(&q, h)).collect();
        let kh: Vec<_> = (0..cfg.head_count).map(|h| split(&k, h)).collect();
        let vh: Vec<_> = (0..cfg.head_count).map(|h| split(&v, h)).collect();
        let positions: Vec<usize> = (0..n).collect();
        let att = brute_attention(&qh, &kh, &vh, &positions, variant);

        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut concat = Vec::with_capacity(d);
            for h in 0..cfg.head_count {
                concat.extend_from_slice(&att.outputs[h][i]);
            }
            let proj = times(&concat, tensor(model, &p("wo")), d);
            let mid: Vec<f64> = x[i].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let b = rms(&mid, tensor(model, &p("mlp_norm")));
            let up = times(&b, tensor(model, &p("w_up")), hidden);
            let act: Vec<f64> = up.iter().map(|z| z / (1.0 + (-z).exp())).collect();
            let down = times(&act, tensor(model, &p("w_down")), d);
            next.push(mid.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        x = next;
        attention.push(att.weights);
    }

    let logits = x
        .iter()
        .map(|r| {
            let f = rms(r, tensor(model, "final_norm"));
            (0..cfg.vocab_size)
                .map(|t| dot(&f, &embed[t * d..(t + 1) * d]))
                .collect()
        })
        .collect();
    OracleForward { logits, attention }
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Generate-and-average loop: per generated token, entropy of every
/// (layer, head) last attention row, averaged; then averaged over steps.
pub fn entropy_loop(model: &TinyModel, prompt: &[usize], steps: usize, variant: &RotaryVariant) -> (Vec<f64>, f64) {
    let mut context = prompt.to_vec();
    let mut per_step = Vec::new();
    for _ in 0..steps {
        let out = forward(model, &context, variant);
        let last = context.len() - 1;
        let mut sum = 0.0;
        let mut count = 0;
        for layer in &out.attention {
            for head in layer {
                let mut e = 0.0;
                for &p in &head[last] {
                    if p > 1e-12 {
                        e -= p * p.ln();
                    }
                }
                sum += e;
                count += 1;
            }
        }
        per_step.push(sum / count as f64);
        context.push(first_argmax(&out.logits[last]));
    }
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    (per_step, mean)
}

/// Mean next-token NLL of one window.
pub fn window_nll(model: &TinyModel, window: &[usize], variant: &RotaryVariant) -> f64 {
    let out = forward(model, window, variant);
    let mut total = 0.0;
    for i in 0..window.len() - 1 {
        let row = &out.logits[i];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[window[i + 1]];
    }
    total / (window.len() - 1) as f64
}

// ── Gradients ───────────────────────────────────────────────────────────

/// Per tensor: `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)` with central
/// differences of step `eps` on every scalar.
pub fn gradient_check(
    model: &TinyModel,
    batch: &[ropelab::TrainingExample],
    eps: f64,
) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_gradients(batch).unwrap();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (t, analytic) in grads.tensors.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.data.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params()[t].data[i];
            probe.params_mut()[t].data[i] = orig + eps;
            let plus = probe.loss(batch).unwrap();
            probe.params_mut()[t].data[i] = orig - eps;
            let minus = probe.loss(batch).unwrap();
            probe.params_mut()[t].data[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let diff: Vec<f64> = analytic.data.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic.data).max(norm(&numeric)).max(1e-12);
        out.push((analytic.name.clone(), norm(&diff) / scale));
    }
    out
}

// ── Pinned desk recipe ──────────────────────────────────────────────────

pub mod desk {
    use ropelab::model::{Curriculum, TrainOptions};
    use ropelab::task::LossScope;
    use ropelab::{ModelConfig, RopeConfig, RotaryVariant, SyntheticTask};

    pub const SEED: u64 = 1;
    pub const GRID_SEED: u64 = 7;
    pub const CASES: usize = 8;
    pub const SHORT: usize = 32;
    pub const SHORT_STEPS: usize = 800;
    pub const MAIN_STEPS: usize = 500;

    pub fn rope() -> RopeConfig {
        RopeConfig::new(8, 10_000.0).unwrap()
    }

    pub fn task() -> SyntheticTask {
        SyntheticTask {
            loss_scope: LossScope::All { answer_weight: 16.0 },
            ..Default::default()
        }
    }

    pub fn model_config(train_length: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: task().vocab_size(),
            layer_count: 2,
            head_count: 2,
            head_dim: 8,
            mlp_ratio: 2,
            train_context_length: train_length,
            variant: RotaryVariant::rope(rope()),
            seed: SEED,
            init_scale: 1.0,
            inference_cap: 8192,
        }
    }

    pub fn options() -> TrainOptions {
        TrainOptions {
            steps: SHORT_STEPS + MAIN_STEPS,
            learning_rate: 0.05,
            batch_size: 8,
            momentum: 0.9,
            clip_norm: Some(1.0),
            warmup_steps: 20,
            cosine_decay: true,
            curriculum: Some(Curriculum {
                length: SHORT,
                steps: SHORT_STEPS,
            }),
            threads: 1,
        }
    }
}
