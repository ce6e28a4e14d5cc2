mod common;

use common::{brute_attention, desk, entropy_loop, forward, gradient_check, random_matrix};
use rand::Rng;
use ropelab::analysis::attention_entropy_with;
use ropelab::harness::{build_needle_case, run_ppl_curve, window_nll, PplParams};
use ropelab::model::{train, Decoding, TrainOptions};
use ropelab::seed::rng_from;
use ropelab::task::TaskKind;
use ropelab::{attend, AttentionInput, ModelConfig, RopeConfig, RotaryVariant, SyntheticTask, TinyModel, TrainingExample};

fn small(seed: u64, variant: RotaryVariant) -> TinyModel {
    TinyModel::init(ModelConfig {
        vocab_size: 11,
        layer_count: 2,
        head_count: 2,
        head_dim: 8,
        mlp_ratio: 2,
        train_context_length: 16,
        variant,
        seed,
        init_scale: 1.0,
        inference_cap: 256,
    })
    .unwrap()
}

fn variants() -> Vec<RotaryVariant> {
    let c = RopeConfig::new(8, 10_000.0).unwrap();
    vec![
        RotaryVariant::rope(c),
        RotaryVariant::pi(c, 4.0).unwrap(),
        RotaryVariant::ntk_for_scale(c, 4.0).unwrap(),
        RotaryVariant::yarn_default(c, 4.0, 16).unwrap(),
        RotaryVariant::yarn(c, 8.0, 2.0, 40.0, 1.3).unwrap(),
    ]
}

fn random_tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ── Forward ─────────────────────────────────────────────────────────────

#[test]
fn forward_matches_straight_line_oracle() {
    for (i, v) in variants().into_iter().enumerate() {
        let model = small(10 + i as u64, v);
        let tokens = random_tokens(i as u64, 5, 11);
        let got = model.forward_with(&tokens, &v).unwrap();
        let want = forward(&model, &tokens, &v);
        let flat: Vec<f64> = want.logits.concat();
        assert!(max_abs_diff(&got.logits, &flat) < 1e-9, "{v}");
        for (l, layer) in want.attention.iter().enumerate() {
            for (h, rows) in layer.iter().enumerate() {
                let map = got.attention.map(l, h).unwrap();
                for (r, row) in rows.iter().enumerate() {
                    assert!(max_abs_diff(map.row(r), &row[..map.row(r).len()]) < 1e-9);
                }
            }
        }
    }
}

#[test]
fn pi_one_hot_swap_is_exact() {
    let c = RopeConfig::new(8, 10_000.0).unwrap();
    let model = small(3, RotaryVariant::rope(c));
    let tokens = random_tokens(9, 24, 11);
    let a = model.forward_with(&tokens, &RotaryVariant::rope(c)).unwrap();
    let b = model.forward_with(&tokens, &RotaryVariant::pi(c, 1.0).unwrap()).unwrap();
    assert!(max_abs_diff(&a.logits, &b.logits) < 1e-12);
    let c2 = model.forward_with(&tokens, &RotaryVariant::ntk(c, 10_000.0).unwrap()).unwrap();
    assert!(max_abs_diff(&a.logits, &c2.logits) < 1e-12);
}

// ── Attention ───────────────────────────────────────────────────────────

#[test]
fn four_token_attention_and_last_row() {
    let mut rng = rng_from(44);
    let heads = 2;
    let mk = |rng: &mut _| (0..heads).map(|_| random_matrix(rng, 4, 8, 1.5)).collect::<Vec<_>>();
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    for variant in variants() {
        let rec = attend(&AttentionInput::new(q.clone(), k.clone(), v.clone()).unwrap(), &variant).unwrap();
        let want = brute_attention(&q, &k, &v, &[0, 1, 2, 3], &variant);
        for h in 0..heads {
            let map = rec.map(0, h).unwrap();
            for i in 0..4 {
                assert!(max_abs_diff(map.row(i), &want.weights[h][i][..map.row(i).len()]) < 1e-9);
            }
            let last = rec.last_row_distribution(0, h).unwrap();
            assert!(max_abs_diff(&last, &want.weights[h][3]) < 1e-9);
        }
    }
}

// ── Entropy and perplexity ──────────────────────────────────────────────

#[test]
fn generation_entropy_matches_loop_oracle() {
    for (i, v) in variants().into_iter().enumerate() {
        let model = small(20 + i as u64, v);
        let prompt = random_tokens(30 + i as u64, 8, 11);
        let report = attention_entropy_with(&model, &prompt, 4, &v).unwrap();
        let (per_step, mean) = entropy_loop(&model, &prompt, 4, &v);
        assert!(max_abs_diff(&report.per_step, &per_step) < 1e-9, "{v}");
        assert!((report.mean - mean).abs() < 1e-9);
        assert_eq!(report.context_lengths, vec![8, 9, 10, 11]);
    }
}

#[test]
fn window_nll_and_ppl_match_loop_oracle() {
    let v = variants()[3];
    let model = small(5, v);
    let corpus = random_tokens(6, 64, 11);
    let (sum, count) = window_nll(&model, &v, &corpus[..16]).unwrap();
    assert_eq!(count, 15);
    assert!((sum / count as f64 - common::window_nll(&model, &corpus[..16], &v)).abs() < 1e-9);

    let curve = run_ppl_curve(&model, &v, &corpus, &PplParams::new(vec![16, 32])).unwrap();
    for (n, ppl) in [16usize, 32].iter().zip(&curve.ppl) {
        let windows: Vec<&[usize]> = corpus.chunks_exact(*n).collect();
        let mean = windows.iter().map(|w| common::window_nll(&model, w, &v)).sum::<f64>() / windows.len() as f64;
        assert!((ppl - mean.exp()).abs() / ppl < 1e-9, "{n}");
    }
}

// ── Gradients ───────────────────────────────────────────────────────────

fn gradient_batch() -> Vec<TrainingExample> {
    let task = SyntheticTask {
        key_alphabet: 2,
        value_alphabet: 3,
        filler_alphabet: 5,
        loss_scope: ropelab::task::LossScope::All { answer_weight: 4.0 },
        ..Default::default()
    };
    let mut rng = rng_from(2);
    let mut batch = vec![task.sample(&mut rng, 10).unwrap()];
    batch.push(TrainingExample::full(random_tokens(3, 10, 11)));
    batch
}

#[test]
fn every_tensor_passes_finite_differences() {
    let c = RopeConfig::new(8, 10_000.0).unwrap();
    for v in [RotaryVariant::rope(c), RotaryVariant::yarn(c, 8.0, 2.0, 40.0, 1.3).unwrap()] {
        let model = small(8, v);
        for (name, err) in gradient_check(&model, &gradient_batch(), 1e-4) {
            assert!(err < 1e-3, "{v} {name}: relative error {err}");
        }
    }
}

// ── Trained models ──────────────────────────────────────────────────────

#[test]
fn trained_model_extends_to_eight_times_length() {
    let c = RopeConfig::new(8, 10_000.0).unwrap();
    let mut cfg = small(4, RotaryVariant::rope(c)).config().clone();
    cfg.train_context_length = 16;
    let opts = TrainOptions {
        steps: 20,
        ..Default::default()
    };
    let task = SyntheticTask {
        key_alphabet: 2,
        value_alphabet: 3,
        filler_alphabet: 5,
        ..Default::default()
    };
    let trained = train(cfg, &task, &opts).unwrap();
    let tokens = random_tokens(1, 128, 11);
    for v in variants() {
        let out = trained.model.forward_with(&tokens, &v).unwrap();
        assert!(out.logits.iter().all(|x| x.is_finite()), "{v}");
    }
}

#[test]
fn copy_task_halves_loss() {
    let task = SyntheticTask {
        kind: TaskKind::Copy,
        ..Default::default()
    };
    let mut cfg = desk::model_config(32);
    cfg.vocab_size = task.vocab_size();
    let opts = TrainOptions {
        steps: 500,
        warmup_steps: 20,
        cosine_decay: true,
        ..Default::default()
    };
    let trace = train(cfg, &task, &opts).unwrap().loss_trace;
    assert_eq!(trace.len(), 500);
    let initial = trace[..10].iter().sum::<f64>() / 10.0;
    let last = trace[490..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.5 * initial, "{initial} -> {last}");
}

#[test]
fn kv_model_retrieves_at_train_length() {
    let task = desk::task();
    let mut opts = desk::options();
    opts.curriculum = None;
    opts.steps = desk::SHORT_STEPS;
    let trained = train(desk::model_config(desk::SHORT), &task, &opts).unwrap();
    let haystack = task.haystack_for_total(desk::SHORT).unwrap();
    let mut passes = 0;
    for seed in 0..8 {
        let case = build_needle_case(&task, haystack, 50.0, seed).unwrap();
        let gen = trained
            .model
            .generate(&case.sequence.prompt, case.sequence.answer.len(), Decoding::Greedy)
            .unwrap();
        passes += usize::from(gen.tokens == case.sequence.answer);
    }
    assert!(passes >= 6, "{passes}/8");
}
