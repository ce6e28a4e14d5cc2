//! Mean next-token cross-entropy and its reverse-mode gradient.

use super::{
    log_sum_exp, sigmoid, slot, ForwardCache, ParamTensor, TinyModel, ATTN_NORM, MLP_NORM, WK,
    WO, WQ, WV, W_DOWN, W_UP,
};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_a_bt_acc, matmul_at_b_acc};
use crate::rope::RotaryVariant;
use crate::task::TrainingExample;

/// Gradient of the loss for every parameter, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<ParamTensor>,
}

impl Gradients {
    fn zeros_like(model: &TinyModel) -> Self {
        Self {
            tensors: model
                .params()
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

impl TinyModel {
    /// Weighted mean next-token cross-entropy over the scored positions of
    /// the batch: `sum(w * nll) / sum(w)`.
    pub fn loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        let count = self.check_batch(batch)?;
        let mut total = 0.0;
        for ex in batch {
            let cache = self.run(&ex.tokens, &self.config.variant)?;
            total += example_nll(&cache.logits, ex, self.config.vocab_size);
        }
        finite_loss(total / count)
    }

    pub fn loss_and_gradients(&self, batch: &[TrainingExample]) -> Result<(f64, Gradients)> {
        self.loss_and_gradients_threaded(batch, 1)
    }

    /// Per-example gradients are computed independently (optionally on
    /// `threads` workers) and reduced in batch order, so the result does not
    /// depend on the thread count.
    pub fn loss_and_gradients_threaded(
        &self,
        batch: &[TrainingExample],
        threads: usize,
    ) -> Result<(f64, Gradients)> {
        let count = self.check_batch(batch)?;
        let weight = 1.0 / count;
        let variant = self.config.variant;

        let per_example: Vec<Result<(f64, Gradients)>> = if threads <= 1 || batch.len() < 2 {
            batch
                .iter()
                .map(|ex| self.example_gradients(ex, &variant, weight))
                .collect()
        } else {
            let chunk = batch.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || {
                            part.iter()
                                .map(|ex| self.example_gradients(ex, &variant, weight))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("gradient worker panicked"))
                    .collect()
            })
        };

        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(self);
        for item in per_example {
            let (nll, g) = item?;
            total += nll;
            grads.add_assign(&g);
        }
        let loss = finite_loss(total * weight)?;
        Ok((loss, grads))
    }

    fn check_batch(&self, batch: &[TrainingExample]) -> Result<f64> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Empty("training batch".into()))?;
        let len = first.tokens.len();
        let mut count = 0.0;
        for ex in batch {
            if ex.tokens.len() != len {
                return Err(Error::Shape(format!(
                    "batch sequences differ in length: {} vs {len}",
                    ex.tokens.len()
                )));
            }
            if ex.loss_weights.len() + 1 != len {
                return Err(Error::Shape(format!(
                    "loss weights have {} entries for {len} tokens",
                    ex.loss_weights.len()
                )));
            }
            if ex.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Validation("loss weights must be finite and >= 0".into()));
            }
            count += ex.total_weight();
        }
        if count <= 0.0 {
            return Err(Error::Empty("batch has no scored positions".into()));
        }
        Ok(count)
    }

    fn example_gradients(
        &self,
        ex: &TrainingExample,
        variant: &RotaryVariant,
        weight: f64,
    ) -> Result<(f64, Gradients)> {
        let cache = self.run(&ex.tokens, variant)?;
        let mut grads = Gradients::zeros_like(self);
        let nll = self.backward(&cache, ex, weight, &mut grads.tensors);
        if !nll.is_finite() {
            return Err(Error::Numeric("non-finite loss in output head".into()));
        }
        for (l, layer) in grads.tensors[1..grads.tensors.len() - 1]
            .chunks(super::PER_LAYER)
            .enumerate()
        {
            if layer.iter().flat_map(|t| &t.data).any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in layer {l}")));
            }
        }
        Ok((nll, grads))
    }

    /// Accumulates `weight * d(sum of w * NLL)/d(params)` into `grads` and
    /// returns `sum(w * NLL)`.
    fn backward(
        &self,
        cache: &ForwardCache,
        ex: &TrainingExample,
        weight: f64,
        grads: &mut [ParamTensor],
    ) -> f64 {
        let cfg = &self.config;
        let n = cache.tokens.len();
        let d = cfg.model_dim();
        let dh = cfg.head_dim;
        let hm = cfg.mlp_dim();
        let vocab = cfg.vocab_size;
        let factor = cache.scale / (dh as f64).sqrt();

        // Output head.
        let mut dlogits = vec![0.0; n * vocab];
        let mut nll = 0.0;
        for (i, &w) in ex.loss_weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &cache.logits[i * vocab..(i + 1) * vocab];
            let target = ex.tokens[i + 1];
            let lse = log_sum_exp(row);
            nll += w * (lse - row[target]);
            let scale = w * weight;
            let drow = &mut dlogits[i * vocab..(i + 1) * vocab];
            for (g, &z) in drow.iter_mut().zip(row) {
                *g = (z - lse).exp() * scale;
            }
            drow[target] -= scale;
        }
        let embed = self.data(0);
        matmul_at_b_acc(&dlogits, &cache.f, n, vocab, d, &mut grads[0].data);
        let df = matmul(&dlogits, embed, n, vocab, d);

        let final_idx = slot(cfg.layer_count, 0);
        let mut dx = vec![0.0; n * d];
        rms_backward(
            &df,
            &cache.x_final,
            &cache.inv_f,
            self.data(final_idx),
            n,
            d,
            &mut grads[final_idx].data,
            &mut dx,
        );

        for l in (0..cfg.layer_count).rev() {
            let lc = &cache.layers[l];

            // MLP: x = x_mid + s * W_down, s = silu(b * W_up).
            matmul_at_b_acc(&lc.s, &dx, n, hm, d, &mut grads[slot(l, W_DOWN)].data);
            let mut du = vec![0.0; n * hm];
            matmul_a_bt_acc(&dx, self.data(slot(l, W_DOWN)), n, d, hm, &mut du);
            for (g, &z) in du.iter_mut().zip(&lc.u) {
                let sg = sigmoid(z);
                *g *= sg * (1.0 + z * (1.0 - sg));
            }
            matmul_at_b_acc(&lc.b, &du, n, d, hm, &mut grads[slot(l, W_UP)].data);
            let mut db = vec![0.0; n * d];
            matmul_a_bt_acc(&du, self.data(slot(l, W_UP)), n, hm, d, &mut db);
            let mut dx_mid = dx.clone();
            rms_backward(
                &db,
                &lc.x_mid,
                &lc.inv2,
                self.data(slot(l, MLP_NORM)),
                n,
                d,
                &mut grads[slot(l, MLP_NORM)].data,
                &mut dx_mid,
            );

            // Attention: x_mid = x_in + o * Wo.
            matmul_at_b_acc(&lc.o, &dx_mid, n, d, d, &mut grads[slot(l, WO)].data);
            let mut d_o = vec![0.0; n * d];
            matmul_a_bt_acc(&dx_mid, self.data(slot(l, WO)), n, d, d, &mut d_o);

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..cfg.head_count {
                let (qh, kh, vh, p) = (&lc.q[h], &lc.k[h], &lc.v[h], &lc.probs[h]);
                let mut dqh = vec![0.0; n * dh];
                let mut dkh = vec![0.0; n * dh];
                let mut dvh = vec![0.0; n * dh];
                for i in 0..n {
                    let doi = &d_o[i * d + h * dh..i * d + (h + 1) * dh];
                    let prow = &p[i * n..i * n + i + 1];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let g = crate::attention::dot(doi, &vh[j * dh..(j + 1) * dh]);
                        dp[j] = g;
                        weighted += prow[j] * g;
                    }
                    let qi = &qh[i * dh..(i + 1) * dh];
                    for j in 0..=i {
                        let pij = prow[j];
                        for (dvj, &g) in dvh[j * dh..(j + 1) * dh].iter_mut().zip(doi) {
                            *dvj += pij * g;
                        }
                        let ds = pij * (dp[j] - weighted) * factor;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kh[j * dh..(j + 1) * dh];
                        for (dqi, &kv) in dqh[i * dh..(i + 1) * dh].iter_mut().zip(kj) {
                            *dqi += ds * kv;
                        }
                        for (dkj, &qv) in dkh[j * dh..(j + 1) * dh].iter_mut().zip(qi) {
                            *dkj += ds * qv;
                        }
                    }
                }
                for i in 0..n {
                    cache.table.apply_inverse(i, &mut dqh[i * dh..(i + 1) * dh]);
                    cache.table.apply_inverse(i, &mut dkh[i * dh..(i + 1) * dh]);
                    let cols = i * d + h * dh..i * d + (h + 1) * dh;
                    dq[cols.clone()].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
                    dk[cols.clone()].copy_from_slice(&dkh[i * dh..(i + 1) * dh]);
                    dv[cols].copy_from_slice(&dvh[i * dh..(i + 1) * dh]);
                }
            }

            matmul_at_b_acc(&lc.a, &dq, n, d, d, &mut grads[slot(l, WQ)].data);
            matmul_at_b_acc(&lc.a, &dk, n, d, d, &mut grads[slot(l, WK)].data);
            matmul_at_b_acc(&lc.a, &dv, n, d, d, &mut grads[slot(l, WV)].data);
            let mut da = vec![0.0; n * d];
            matmul_a_bt_acc(&dq, self.data(slot(l, WQ)), n, d, d, &mut da);
            matmul_a_bt_acc(&dk, self.data(slot(l, WK)), n, d, d, &mut da);
            matmul_a_bt_acc(&dv, self.data(slot(l, WV)), n, d, d, &mut da);

            let mut dx_in = dx_mid;
            rms_backward(
                &da,
                &lc.x_in,
                &lc.inv1,
                self.data(slot(l, ATTN_NORM)),
                n,
                d,
                &mut grads[slot(l, ATTN_NORM)].data,
                &mut dx_in,
            );
            dx = dx_in;
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            for (g, &x) in grads[0].data[t * d..(t + 1) * d]
                .iter_mut()
                .zip(&dx[i * d..(i + 1) * d])
            {
                *g += x;
            }
        }
        nll
    }
}

/// Backward of `y = g * x * r`, `r = 1/sqrt(mean(x^2) + eps)`. Adds into
/// `dgain` and `dx`.
#[allow(clippy::too_many_arguments)]
fn rms_backward(
    dy: &[f64],
    x: &[f64],
    inv: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    dgain: &mut [f64],
    dx: &mut [f64],
) {
    for i in 0..n {
        let r = inv[i];
        let xi = &x[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut proj = 0.0;
        for c in 0..d {
            dgain[c] += dyi[c] * xi[c] * r;
            proj += dyi[c] * gain[c] * xi[c];
        }
        let coef = r * r * r * proj / d as f64;
        for c in 0..d {
            dx[i * d + c] += r * dyi[c] * gain[c] - coef * xi[c];
        }
    }
}

fn example_nll(logits: &[f64], ex: &TrainingExample, vocab: usize) -> f64 {
    ex.loss_weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| {
            let row = &logits[i * vocab..(i + 1) * vocab];
            w * (log_sum_exp(row) - row[ex.tokens[i + 1]])
        })
        .sum()
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}
