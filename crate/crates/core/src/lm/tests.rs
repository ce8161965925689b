use rand::Rng;

use super::*;
use crate::tokenizer::VocabLayout;
use crate::util::rng_from_seed;

fn tiny_cfg(vocab: usize, d: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        n_kv_heads: heads,
        d_ff: 2 * d,
        context_len: 128,
        rope_theta: 100_000.0,
        profile: "test".into(),
    }
}

/// Random weights with a larger spread than the training init so that every
/// path carries a visible signal.
fn random_model<T: Real>(cfg: ModelConfig, seed: u64, std: f64) -> Model<T> {
    let mut p = Params::<f64>::init(&cfg, seed);
    let mut rng = rng_from_seed(seed ^ 0xABCD);
    for (name, t) in p.names.iter().zip(p.data.iter_mut()) {
        for x in t.iter_mut() {
            *x = if name.ends_with("norm") {
                1.0 + 0.3 * rng.gen_range(-1.0..1.0)
            } else {
                std * rng.gen_range(-1.7..1.7)
            };
        }
    }
    Model::new(cfg, p.cast()).unwrap()
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Straightforward dense implementation of the same network, written
/// independently of the GEMM-based path.
fn oracle_logits(m: &Model<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &m.cfg;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let dh = d / nh;
    let t = |name: &str| -> &Vec<f64> {
        let i = m.params.names.iter().position(|n| n == name).unwrap();
        &m.params.data[i]
    };
    let vecmat = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
    };
    let norm = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + 1e-5).sqrt();
        x.iter().zip(g).map(|(v, g)| v / r * g).collect()
    };
    let rot = |x: &[f64], pos: usize| -> Vec<f64> {
        let mut out = Vec::new();
        for h in 0..nh {
            out.extend(rope_rotate(&x[h * dh..(h + 1) * dh], pos, cfg.rope_theta).unwrap());
        }
        out
    };
    let emb = t("tok_emb");
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&tok| emb[tok as usize * d..(tok as usize + 1) * d].to_vec()).collect();
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, t(&name("attn_norm")))).collect();
        let qs: Vec<Vec<f64>> = hs.iter().enumerate().map(|(p, h)| rot(&vecmat(h, t(&name("wq")), d), p)).collect();
        let ks: Vec<Vec<f64>> = hs.iter().enumerate().map(|(p, h)| rot(&vecmat(h, t(&name("wk")), d), p)).collect();
        let vs: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, t(&name("wv")), d)).collect();
        for i in 0..xs.len() {
            let mut ctx = vec![0.0; d];
            for h in 0..nh {
                let r = h * dh..(h + 1) * dh;
                let s: Vec<f64> = (0..=i)
                    .map(|j| qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        ctx[c] += ej / z * vs[j][c];
                    }
                }
            }
            let o = vecmat(&ctx, t(&name("wo")), d);
            xs[i].iter_mut().zip(o).for_each(|(x, o)| *x += o);
            let h2 = norm(&xs[i], t(&name("ffn_norm")));
            let a = vecmat(&h2, t(&name("w_gate")), cfg.d_ff);
            let b = vecmat(&h2, t(&name("w_up")), cfg.d_ff);
            let act: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
            let down = vecmat(&act, t(&name("w_down")), d);
            xs[i].iter_mut().zip(down).for_each(|(x, o)| *x += o);
        }
    }
    xs.iter()
        .map(|x| vecmat(&norm(x, t("final_norm")), t("head"), cfg.vocab_size))
        .collect()
}

#[test]
fn matches_dense_oracle_tiny() {
    let m = random_model::<f64>(tiny_cfg(11, 4, 1, 1), 3, 0.5);
    let tokens = [3, 0, 10, 7, 7, 1];
    let got = m.forward(&tokens).unwrap();
    let want = oracle_logits(&m, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            assert!((got[i * 11 + j] - w).abs() < 1e-6, "({i},{j}) {} vs {w}", got[i * 11 + j]);
        }
    }
}

#[test]
fn matches_dense_oracle_multi_head() {
    let m = random_model::<f64>(tiny_cfg(13, 8, 2, 2), 4, 0.4);
    let tokens = random_tokens(9, 13, 1);
    let got = m.forward(&tokens).unwrap();
    for (i, row) in oracle_logits(&m, &tokens).iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            assert!((got[i * 13 + j] - w).abs() < 1e-9);
        }
    }
}

#[test]
fn causal_perturbation_is_exact() {
    let m = random_model::<f32>(tiny_cfg(20, 16, 2, 2), 5, 0.2);
    let v = 20;
    let tokens = random_tokens(24, v, 2);
    let base = m.forward(&tokens).unwrap();
    for t in 0..tokens.len() {
        let mut alt = tokens.clone();
        alt[t] = (alt[t] + 1) % v as u32;
        let out = m.forward(&alt).unwrap();
        assert_eq!(&out[..t * v], &base[..t * v], "position {t}");
        assert_ne!(&out[t * v..(t + 1) * v], &base[t * v..(t + 1) * v]);
    }
}

#[test]
fn appending_a_token_keeps_earlier_logits() {
    let m = random_model::<f32>(tiny_cfg(20, 16, 2, 2), 6, 0.2);
    let a = m.forward(&[4, 9]).unwrap();
    let b = m.forward(&[4, 9, 13]).unwrap();
    assert!(a.iter().zip(&b[..40]).all(|(x, y)| (x - y).abs() < 1e-6));
}

#[test]
fn attention_rows_are_distributions() {
    let m = random_model::<f64>(tiny_cfg(20, 16, 2, 4), 7, 0.3);
    let tr = m.trace(&random_tokens(17, 20, 3)).unwrap();
    for lt in &tr.layers {
        for row in lt.probs.chunks_exact(17) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(tr.logits.iter().all(|v| v.is_finite()));
}

#[test]
fn context_and_vocab_limits() {
    let m = random_model::<f32>(tiny_cfg(20, 8, 1, 1), 1, 0.1);
    assert!(matches!(m.forward(&vec![1; 129]), Err(crate::Error::ContextOverflow { len: 129, limit: 128 })));
    assert!(matches!(m.forward(&[20]), Err(crate::Error::Index { .. })));
}

#[test]
fn uniform_logits_give_ln_vocab() {
    let mut m = random_model::<f64>(tiny_cfg(37, 8, 1, 1), 1, 0.3);
    let hi = m.params.names.iter().position(|n| n == "head").unwrap();
    m.params.data[hi].iter_mut().for_each(|v| *v = 0.0);
    let tokens = random_tokens(10, 37, 4);
    let mask = clean_target_mask(10, 2);
    let (sum, n) = m.loss(&tokens, &mask).unwrap();
    assert!((sum / n as f64 - (37f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    // Head maps the final hidden state to a huge margin for the right token:
    // with one layer zeroed out the hidden state is the input embedding.
    let cfg = tiny_cfg(6, 6, 1, 1);
    let mut p = Params::<f64>::zeros(&cfg);
    for (name, t) in p.names.iter().zip(p.data.iter_mut()) {
        if name.ends_with("norm") {
            t.iter_mut().for_each(|v| *v = 1.0);
        }
    }
    // Token i embeds as e_i; the head sends e_i to token (i + 1) mod 6.
    for i in 0..6 {
        p.data[0][i * 6 + i] = 1.0;
        let hi = p.names.len() - 1;
        p.data[hi][i * 6 + (i + 1) % 6] = 100.0;
    }
    let m = Model::new(cfg, p).unwrap();
    let tokens = [0, 1, 2, 3, 4, 5];
    let (sum, n) = m.loss(&tokens, &[true, true, true, true, true, false]).unwrap();
    assert!(sum / (n as f64) < 1e-6);
}

#[test]
fn empty_mask_is_degenerate() {
    let m = random_model::<f32>(tiny_cfg(20, 8, 1, 1), 1, 0.1);
    let tokens = [1, 2, 3];
    assert!(matches!(m.loss(&tokens, &[false; 3]), Err(crate::Error::DegenerateBatch)));
    let item = BatchItem {
        tokens: &tokens,
        mask: vec![false; 3],
        task: 1,
    };
    assert!(matches!(m.batch_gradient(&[item]), Err(crate::Error::DegenerateBatch)));
}

#[test]
fn batch_loss_is_order_and_duplication_invariant() {
    let m = random_model::<f32>(tiny_cfg(30, 16, 2, 2), 9, 0.2);
    let seqs: Vec<Vec<u32>> = (0..4).map(|i| random_tokens(8 + i, 30, i as u64)).collect();
    let items = |order: &[usize]| -> Vec<BatchItem> {
        order
            .iter()
            .map(|&i| BatchItem {
                tokens: &seqs[i],
                mask: clean_target_mask(seqs[i].len(), 3),
                task: i as u8,
            })
            .collect()
    };
    let (a, _) = m.batch_gradient(&items(&[0, 1, 2, 3])).unwrap();
    let (b, _) = m.batch_gradient(&items(&[3, 1, 0, 2])).unwrap();
    let (c, _) = m.batch_gradient(&items(&[0, 1, 2, 3, 0, 1, 2, 3])).unwrap();
    assert!((a.mean() - b.mean()).abs() < 1e-12);
    assert!((a.mean() - c.mean()).abs() < 1e-12);
    let per_task: f64 = a.per_task.values().map(|(s, _)| s).sum();
    assert!((per_task - a.loss_sum).abs() < 1e-9);
}

fn mean_loss(m: &Model<f64>, tokens: &[u32], mask: &[bool]) -> f64 {
    let (s, n) = m.loss(tokens, mask).unwrap();
    s / n as f64
}

#[test]
fn gradients_match_central_differences() {
    let cfg = tiny_cfg(12, 8, 1, 2);
    let mut m = random_model::<f64>(cfg, 21, 0.4);
    let tokens = random_tokens(7, 11, 5);
    let mask = clean_target_mask(7, 2);
    let count = mask.iter().filter(|&&x| x).count();
    let mut g = m.params.zeros_like();
    m.accumulate_grad(&tokens, &mask, 1.0 / count as f64, &mut g).unwrap();
    let h = 1e-4;
    for ti in 0..m.params.data.len() {
        let mut worst: f64 = 0.0;
        for j in 0..m.params.data[ti].len() {
            let orig = m.params.data[ti][j];
            m.params.data[ti][j] = orig + h;
            let up = mean_loss(&m, &tokens, &mask);
            m.params.data[ti][j] = orig - h;
            let down = mean_loss(&m, &tokens, &mask);
            m.params.data[ti][j] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = g.data[ti][j];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "{}: relative error {worst:e}", m.params.names[ti]);
    }
}

#[test]
fn unused_embedding_rows_get_no_gradient() {
    let m = random_model::<f64>(tiny_cfg(12, 8, 1, 2), 2, 0.3);
    let pad = 11u32;
    let tokens: Vec<u32> = random_tokens(9, 11, 8);
    let mut g = m.params.zeros_like();
    m.accumulate_grad(&tokens, &clean_target_mask(9, 3), 1.0, &mut g).unwrap();
    let row = &g.data[0][pad as usize * 8..(pad as usize + 1) * 8];
    assert!(row.iter().all(|&v| v == 0.0));
}

#[test]
fn initial_loss_is_near_uniform() {
    let layout = VocabLayout::new(4, 64);
    let m = Model::<f32>::init(ModelConfig::desk(layout.vocab_size()), 1).unwrap();
    let tokens = random_tokens(101, 256, 3);
    let (s, n) = m.loss(&tokens, &clean_target_mask(101, 50)).unwrap();
    let ln_v = (layout.vocab_size() as f64).ln();
    assert!(((s / n as f64) - ln_v).abs() < 0.05 * ln_v);
}

fn prompt(layout: &VocabLayout, frames: usize, seed: u64) -> Vec<u32> {
    let mut rng = rng_from_seed(seed);
    let mut p = vec![layout.bos()];
    for i in 0..frames * layout.n_codebooks {
        let r = layout.book_range(i);
        p.push(rng.gen_range(r));
    }
    p.push(layout.start_clean());
    p
}

#[test]
fn cached_and_uncached_decoding_agree() {
    let layout = VocabLayout::new(2, 5);
    let m = random_model::<f32>(tiny_cfg(layout.vocab_size(), 16, 2, 2), 3, 0.3);
    for s in 0..10 {
        let p = prompt(&layout, 3, s);
        let a = m.generate(&p, &layout, 6, &DecodePolicy::Greedy).unwrap();
        let b = m.generate_uncached(&p, &layout, 6, &DecodePolicy::Greedy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.generate(&p, &layout, 6, &DecodePolicy::Greedy).unwrap());
    }
    let mut cache_logits = Vec::new();
    let p = prompt(&layout, 2, 99);
    let (mut cache, first) = m.prefill(&p).unwrap();
    cache_logits.push(first);
    let extra = [1u32, 7, 3];
    for &t in &extra {
        cache_logits.push(m.step(&mut cache, t).unwrap());
    }
    let mut full = p.clone();
    full.extend(extra);
    let all = m.forward(&full).unwrap();
    let v = layout.vocab_size();
    for (i, row) in cache_logits.iter().enumerate() {
        let pos = p.len() - 1 + i;
        let want = &all[pos * v..(pos + 1) * v];
        assert!(row.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}

#[test]
fn generated_streams_are_always_valid() {
    let layout = VocabLayout::new(3, 4);
    for seed in 0..20 {
        let m = random_model::<f32>(tiny_cfg(layout.vocab_size(), 8, 1, 2), seed, 1.0);
        let p = prompt(&layout, 2, seed);
        let policy = DecodePolicy::Sample {
            temperature: 2.0,
            top_k: 0,
            seed,
        };
        let g = m.generate(&p, &layout, 6, &policy).unwrap();
        crate::tokenizer::validate_stream(&g.tokens, &layout).unwrap();
        assert_eq!(g.tokens.len() % 3, 0);
        if let Some(e) = g.eos_position {
            assert_eq!(e, g.tokens.len());
        }
    }
}

#[test]
fn prompt_preconditions() {
    let layout = VocabLayout::new(2, 5);
    let m = random_model::<f32>(tiny_cfg(layout.vocab_size(), 8, 1, 1), 3, 0.3);
    let p = prompt(&layout, 3, 0);
    assert!(m.generate(&p[..p.len() - 1], &layout, 4, &DecodePolicy::Greedy).is_err());
    assert!(matches!(
        m.generate(&p, &layout, 120, &DecodePolicy::Greedy),
        Err(crate::Error::ContextOverflow { .. })
    ));
}

#[test]
fn checkpoint_roundtrip() {
    let m = random_model::<f32>(tiny_cfg(10, 8, 1, 1), 3, 0.3);
    let mut ck = Checkpoint::from_model(&m, "stage1");
    ck.optimizer = Some(AdamW::new(OptimConfig::default(), &m.params));
    ck.step = 17;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"DSE1CKPT");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(crate::Error::Format(_))));
}

#[test]
fn adamw_reduces_loss_on_one_sequence() {
    let cfg = tiny_cfg(16, 16, 1, 2);
    let mut m = Model::<f32>::init(cfg, 4).unwrap();
    let tokens = random_tokens(12, 16, 1);
    let mask = clean_target_mask(12, 1);
    let ocfg = OptimConfig {
        lr: 1e-2,
        warmup_steps: 1,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(ocfg, &m.params);
    let item = || BatchItem {
        tokens: &tokens,
        mask: mask.clone(),
        task: 0,
    };
    let (first, _) = m.batch_gradient(&[item()]).unwrap();
    for _ in 0..60 {
        let (_, g) = m.batch_gradient(&[item()]).unwrap();
        opt.update(&mut m.params, &g, 1e-2);
    }
    let (last, _) = m.batch_gradient(&[item()]).unwrap();
    assert!(last.mean() < 0.1 * first.mean(), "{} -> {}", first.mean(), last.mean());
}
