//! Graph, composite-op, and gradient-check tests. Oracles here are
//! independent scalar loops, never the graph kernels themselves.

use super::*;
use crate::seeds;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn_tensor(rows: usize, cols: usize, seed: u64, tag: &str) -> Tensor {
    let mut rng = seeds::rng(seed, tag, 0);
    let vals: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::matrix(rows, cols, vals).unwrap()
}

fn assert_close(actual: &[f64], expect: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expect.len(), "{what}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expect).enumerate() {
        assert!((a - e).abs() <= tol, "{what}[{i}]: {a} vs {e}");
    }
}

// ── Basic backward identities ────────────────────────────────────────

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::new();
    let x = g.input(&randn_tensor(3, 4, 1, "x").with_grad());
    let loss = g.sum_all(x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 12][..]);
}

#[test]
fn backward_of_dot_swaps_operands() {
    let xv = vec![1.0, 2.0, 3.0];
    let yv = vec![4.0, 5.0, 6.0];
    let mut g = Graph::new();
    let x = g.input(&Tensor::row(xv.clone()).unwrap().with_grad());
    let y = g.input(&Tensor::row(yv.clone()).unwrap().with_grad());
    let prod = g.mul(x, y);
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &yv[..]);
    assert_eq!(grads.get(y).unwrap(), &xv[..]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(&randn_tensor(2, 2, 2, "x").with_grad());
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(NumError::Dimension(_))));
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let x = g.input(&randn_tensor(4, 4, 3, "x").with_grad());
        let w = g.input(&randn_tensor(4, 4, 3, "w").with_grad());
        let y = g.matmul(x, w);
        let s = g.sigmoid(y);
        let loss = g.sum_all(s);
        let grads = g.backward(loss).unwrap();
        (grads.get(x).unwrap().to_vec(), grads.get(w).unwrap().to_vec())
    };
    let (a1, b1) = build();
    let (a2, b2) = build();
    // Bit-identical, not merely close.
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

// ── conv1d ───────────────────────────────────────────────────────────

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(4, 1, vec![1.0, -2.0, 3.0, 0.5]);
    let taps = g.constant(1, 3, vec![0.0, 1.0, 0.0]);
    let bias = g.constant_scalar(0.0);
    let y = g.conv1d_same(x, taps, bias).unwrap();
    assert_eq!(g.value(y), &[1.0, -2.0, 3.0, 0.5]);
}

#[test]
fn conv1d_box_kernel_hand_case() {
    let mut g = Graph::new();
    let x = g.constant(3, 1, vec![1.0, 2.0, 3.0]);
    let taps = g.constant(1, 3, vec![1.0, 1.0, 1.0]);
    let bias = g.constant_scalar(0.0);
    let y = g.conv1d_same(x, taps, bias).unwrap();
    assert_eq!(g.value(y), &[3.0, 6.0, 5.0]);
}

#[test]
fn conv1d_rejects_even_kernels() {
    let mut g = Graph::new();
    let x = g.constant(3, 1, vec![0.0; 3]);
    let taps = g.constant(1, 4, vec![0.0; 4]);
    let bias = g.constant_scalar(0.0);
    assert!(matches!(g.conv1d_same(x, taps, bias), Err(NumError::Config(_))));
}

#[test]
fn conv1d_matches_double_loop_oracle() {
    for seed in 0..20u64 {
        let n = 5 + (seed as usize % 9);
        let k = [3usize, 5, 7][seed as usize % 3];
        let x = randn_tensor(n, 1, seed, "conv_x");
        let taps = randn_tensor(1, k, seed, "conv_t");
        let bias: f64 = seeds::rng(seed, "conv_b", 0).gen_range(-1.0..1.0);

        // Independent double-loop oracle with explicit zero padding.
        let half = k / 2;
        let mut expect = vec![0.0; n];
        for i in 0..n {
            let mut s = bias;
            for j in 0..k {
                let src = i as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < n {
                    s += taps.values()[j] * x.values()[src as usize];
                }
            }
            expect[i] = s;
        }

        let mut g = Graph::new();
        let xi = g.input(&x);
        let ti = g.input(&taps);
        let bi = g.constant_scalar(bias);
        let y = g.conv1d_same(xi, ti, bi).unwrap();
        assert_close(g.value(y), &expect, 1e-10, "conv1d");
    }
}

// ── multi-head self-attention ────────────────────────────────────────

struct AttnParams {
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Vec<Tensor>,
}

fn attn_params(d: usize, heads: usize, seed: u64) -> AttnParams {
    let dh = d / heads;
    let mk = |tag: &str, h: usize, r: usize, c: usize| {
        randn_tensor(r, c, seed.wrapping_add(h as u64 * 7919), tag)
    };
    AttnParams {
        wq: (0..heads).map(|h| mk("wq", h, d, dh)).collect(),
        wk: (0..heads).map(|h| mk("wk", h, d, dh)).collect(),
        wv: (0..heads).map(|h| mk("wv", h, d, dh)).collect(),
        wo: (0..heads).map(|h| mk("wo", h, dh, d)).collect(),
    }
}

fn register_attn(g: &mut Graph, p: &AttnParams) -> AttentionIds {
    AttentionIds {
        wq: p.wq.iter().map(|t| g.input(t)).collect(),
        wk: p.wk.iter().map(|t| g.input(t)).collect(),
        wv: p.wv.iter().map(|t| g.input(t)).collect(),
        wo: p.wo.iter().map(|t| g.input(t)).collect(),
    }
}

/// Unvectorized attention oracle: per-head scalar loops over query, key and
/// feature indices, with its own naive softmax.
fn attention_oracle(z: &Tensor, p: &AttnParams, heads: usize) -> Vec<f64> {
    let (l, d) = (z.rows(), z.cols());
    let dh = d / heads;
    let mut out = vec![0.0; l * d];
    for h in 0..heads {
        let proj = |w: &Tensor, row: usize, col: usize| -> f64 {
            let mut s = 0.0;
            for t in 0..d {
                s += z.at(row, t) * w.at(t, col);
            }
            s
        };
        for i in 0..l {
            // scores against every key
            let mut scores = vec![0.0; l];
            for j in 0..l {
                let mut s = 0.0;
                for c in 0..dh {
                    s += proj(&p.wq[h], i, c) * proj(&p.wk[h], j, c);
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            // context then output projection
            for od in 0..d {
                let mut acc = 0.0;
                for c in 0..dh {
                    let mut ctx = 0.0;
                    for j in 0..l {
                        ctx += exps[j] / denom * proj(&p.wv[h], j, c);
                    }
                    acc += ctx * p.wo[h].at(c, od);
                }
                out[i * d + od] += acc;
            }
        }
    }
    out
}

#[test]
fn attention_zero_value_projection_gives_zero_output() {
    let d = 4;
    let heads = 2;
    let mut p = attn_params(d, heads, 5);
    for w in p.wv.iter_mut() {
        *w = Tensor::zeros(d, d / heads);
    }
    let z = randn_tensor(3, d, 5, "z");
    let mut g = Graph::new();
    let zi = g.input(&z);
    let ids = register_attn(&mut g, &p);
    let out = multihead_self_attention(&mut g, zi, &ids, heads).unwrap();
    assert!(g.value(out).iter().all(|v| *v == 0.0));
}

#[test]
fn attention_single_token_weight_is_one() {
    let d = 4;
    let heads = 2;
    let p = attn_params(d, heads, 6);
    let z = randn_tensor(1, d, 6, "z");
    let mut g = Graph::new();
    let zi = g.input(&z);
    let ids = register_attn(&mut g, &p);
    let out = multihead_self_attention(&mut g, zi, &ids, heads).unwrap();
    // With one token, attention is [1.0] and output = sum_h (z Wv_h) Wo_h.
    let mut expect = vec![0.0; d];
    for h in 0..heads {
        for od in 0..d {
            for c in 0..d / heads {
                let mut v = 0.0;
                for t in 0..d {
                    v += z.at(0, t) * p.wv[h].at(t, c);
                }
                expect[od] += v * p.wo[h].at(c, od);
            }
        }
    }
    assert_close(g.value(out), &expect, 1e-12, "single-token attention");
}

#[test]
fn attention_matches_per_head_loop_oracle() {
    for seed in 0..10u64 {
        let (l, d, heads) = (3, 4, 2);
        let p = attn_params(d, heads, seed);
        let z = randn_tensor(l, d, seed, "z");
        let expect = attention_oracle(&z, &p, heads);
        let mut g = Graph::new();
        let zi = g.input(&z);
        let ids = register_attn(&mut g, &p);
        let out = multihead_self_attention(&mut g, zi, &ids, heads).unwrap();
        assert_close(g.value(out), &expect, 1e-10, "attention");
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let d = 4;
    let p = attn_params(d, 2, 9);
    let z = randn_tensor(2, d, 9, "z");
    let mut g = Graph::new();
    let zi = g.input(&z);
    let ids = register_attn(&mut g, &p);
    assert!(matches!(
        multihead_self_attention(&mut g, zi, &ids, 3),
        Err(NumError::Config(_))
    ));
}

// ── LSTM mean pool ───────────────────────────────────────────────────

struct LstmParamsT {
    w: [Tensor; 8],
    b: [Tensor; 4],
}

fn lstm_params(d: usize, seed: u64, zero_bias: bool) -> LstmParamsT {
    let tags = ["w_ii", "w_if", "w_ig", "w_io", "w_hi", "w_hf", "w_hg", "w_ho"];
    let w: Vec<Tensor> = tags.iter().map(|t| randn_tensor(d, d, seed, t)).collect();
    let b: Vec<Tensor> = ["b_i", "b_f", "b_g", "b_o"]
        .iter()
        .map(|t| {
            if zero_bias {
                Tensor::zeros(1, d)
            } else {
                randn_tensor(1, d, seed, t)
            }
        })
        .collect();
    LstmParamsT { w: w.try_into().unwrap(), b: b.try_into().unwrap() }
}

fn register_lstm(g: &mut Graph, p: &LstmParamsT) -> LstmIds {
    let w: Vec<TensorId> = p.w.iter().map(|t| g.input(t)).collect();
    let b: Vec<TensorId> = p.b.iter().map(|t| g.input(t)).collect();
    LstmIds {
        w_ii: w[0],
        w_if: w[1],
        w_ig: w[2],
        w_io: w[3],
        w_hi: w[4],
        w_hf: w[5],
        w_hg: w[6],
        w_ho: w[7],
        b_i: b[0],
        b_f: b[1],
        b_g: b[2],
        b_o: b[3],
    }
}

/// Scalar-gate reference recurrence, returning the mean-pooled hidden state.
fn lstm_oracle(x: &Tensor, p: &LstmParamsT) -> Vec<f64> {
    let (m, d) = (x.rows(), x.cols());
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut pool = vec![0.0; d];
    for t in 0..m {
        let gate = |wx: &Tensor, wh: &Tensor, b: &Tensor, j: usize| -> f64 {
            let mut s = b.at(0, j);
            for k in 0..d {
                s += x.at(t, k) * wx.at(k, j) + h[k] * wh.at(k, j);
            }
            s
        };
        let mut hn = vec![0.0; d];
        let mut cn = vec![0.0; d];
        for j in 0..d {
            let i = sigmoid(gate(&p.w[0], &p.w[4], &p.b[0], j));
            let f = sigmoid(gate(&p.w[1], &p.w[5], &p.b[1], j));
            let gg = gate(&p.w[2], &p.w[6], &p.b[2], j).tanh();
            let o = sigmoid(gate(&p.w[3], &p.w[7], &p.b[3], j));
            cn[j] = f * c[j] + i * gg;
            hn[j] = o * cn[j].tanh();
        }
        h = hn;
        c = cn;
        for j in 0..d {
            pool[j] += h[j];
        }
    }
    pool.iter().map(|v| v / m as f64).collect()
}

#[test]
fn lstm_single_step_equals_hidden_state() {
    let d = 3;
    let p = lstm_params(d, 11, false);
    let x = randn_tensor(1, d, 11, "x");
    let mut g = Graph::new();
    let xi = g.input(&x);
    let ids = register_lstm(&mut g, &p);
    let pooled = lstm_mean_pool(&mut g, &ids, xi).unwrap();
    assert_close(g.value(pooled), &lstm_oracle(&x, &p), 1e-12, "lstm m=1");
}

#[test]
fn lstm_zero_input_zero_bias_is_zero() {
    let d = 4;
    let p = lstm_params(d, 12, true);
    let x = Tensor::zeros(3, d);
    let mut g = Graph::new();
    let xi = g.input(&x);
    let ids = register_lstm(&mut g, &p);
    let pooled = lstm_mean_pool(&mut g, &ids, xi).unwrap();
    assert!(g.value(pooled).iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_matches_scalar_gate_oracle() {
    for seed in 0..8u64 {
        let d = 2;
        let p = lstm_params(d, seed, false);
        let x = randn_tensor(3, d, seed, "x");
        let mut g = Graph::new();
        let xi = g.input(&x);
        let ids = register_lstm(&mut g, &p);
        let pooled = lstm_mean_pool(&mut g, &ids, xi).unwrap();
        assert_close(g.value(pooled), &lstm_oracle(&x, &p), 1e-10, "lstm");
    }
}

// ── finite differences ───────────────────────────────────────────────

#[test]
fn finite_diff_square_at_three() {
    let params = vec![("x".to_string(), Tensor::scalar(3.0).unwrap())];
    let report = finite_diff_check(&params, 1e-5, |g, ids| {
        let x = ids[0];
        Ok(g.mul(x, x))
    })
    .unwrap();
    let numeric = report.params[0].numeric[0];
    assert!((numeric - 6.0).abs() < 1e-9, "numeric {numeric}");
    assert!(report.max_rel_err < 1e-9);
}

#[test]
fn finite_diff_rejects_bad_eps() {
    let params = vec![("x".to_string(), Tensor::scalar(1.0).unwrap())];
    assert!(matches!(
        finite_diff_check(&params, 1e-2, |g, ids| Ok(g.sum_all(ids[0]))),
        Err(NumError::Config(_))
    ));
}

#[test]
fn finite_diff_cross_entropy_softmax() {
    for seed in 0..10u64 {
        let logits = randn_tensor(5, 1, seed, "logits");
        let params = vec![("logits".to_string(), logits)];
        let report = finite_diff_check(&params, 1e-5, |g, ids| {
            let p = g.softmax_col(ids[0]);
            g.cross_entropy(p, 2)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "seed {seed}: {}", report.max_rel_err);
    }
}

/// Every registered differentiable op, exercised through a scalar head, for
/// 10 seeds each. This is the per-op half of the gradient-correctness gate.
#[test]
fn finite_diff_all_ops() {
    for seed in 0..10u64 {
        let a = randn_tensor(3, 4, seed, "a");
        let b = randn_tensor(3, 4, seed, "b");
        let w = randn_tensor(4, 3, seed, "w");
        let row = randn_tensor(1, 4, seed, "row");
        let scalar = randn_tensor(1, 1, seed, "s");
        let seq = randn_tensor(6, 1, seed, "seq");
        let taps = randn_tensor(1, 3, seed, "taps");
        let table = randn_tensor(5, 4, seed, "table");

        type Builder = Box<dyn Fn(&mut Graph, &[TensorId]) -> NumResult<TensorId>>;
        let cases: Vec<(&str, Vec<(String, Tensor)>, Builder)> = vec![
            (
                "add_mul_sub",
                vec![("a".into(), a.clone()), ("b".into(), b.clone())],
                Box::new(|g, ids| {
                    let s = g.add(ids[0], ids[1]);
                    let m = g.mul(s, ids[0]);
                    let d = g.sub(m, ids[1]);
                    Ok(g.sum_all(d))
                }),
            ),
            (
                "matmul",
                vec![("a".into(), a.clone()), ("w".into(), w.clone())],
                Box::new(|g, ids| {
                    let y = g.matmul(ids[0], ids[1]);
                    let t = g.tanh(y);
                    Ok(g.sum_all(t))
                }),
            ),
            (
                "matmul_nt",
                vec![("a".into(), a.clone()), ("b".into(), b.clone())],
                Box::new(|g, ids| {
                    let y = g.matmul_nt(ids[0], ids[1]);
                    let t = g.sigmoid(y);
                    Ok(g.sum_all(t))
                }),
            ),
            (
                "softmax_rows",
                vec![("a".into(), a.clone()), ("b".into(), b.clone())],
                Box::new(|g, ids| {
                    let p = g.softmax_rows(ids[0]);
                    let m = g.mul(p, ids[1]);
                    Ok(g.sum_all(m))
                }),
            ),
            (
                "softmax_col_ce",
                vec![("seq".into(), seq.clone())],
                Box::new(|g, ids| {
                    let p = g.softmax_col(ids[0]);
                    g.cross_entropy(p, 1)
                }),
            ),
            (
                "layer_norm",
                vec![
                    ("a".into(), a.clone()),
                    ("gamma".into(), row.clone()),
                    ("beta".into(), row.clone()),
                ],
                Box::new(|g, ids| {
                    let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                    let t = g.tanh(y);
                    Ok(g.sum_all(t))
                }),
            ),
            (
                "add_row_mul_scalar",
                vec![
                    ("a".into(), a.clone()),
                    ("row".into(), row.clone()),
                    ("s".into(), scalar.clone()),
                ],
                Box::new(|g, ids| {
                    let y = g.add_row(ids[0], ids[1]);
                    let z = g.mul_scalar(y, ids[2]);
                    Ok(g.sum_all(z))
                }),
            ),
            (
                "relu_scale",
                vec![("a".into(), a.clone())],
                Box::new(|g, ids| {
                    let y = g.relu(ids[0]);
                    let z = g.scale(y, 1.7);
                    Ok(g.sum_all(z))
                }),
            ),
            (
                "concat_slice_mean",
                vec![("a".into(), a.clone()), ("b".into(), b.clone())],
                Box::new(|g, ids| {
                    let z = g.concat_rows(ids[0], ids[1]);
                    let s = g.slice_rows(z, 1, 4);
                    let m = g.mean_rows(s);
                    let t = g.tanh(m);
                    Ok(g.sum_all(t))
                }),
            ),
            (
                "max_all",
                vec![("a".into(), a.clone())],
                Box::new(|g, ids| {
                    let t = g.tanh(ids[0]);
                    Ok(g.max_all(t))
                }),
            ),
            (
                "conv1d",
                vec![
                    ("seq".into(), seq.clone()),
                    ("taps".into(), taps.clone()),
                    ("bias".into(), scalar.clone()),
                ],
                Box::new(|g, ids| {
                    let y = g.conv1d_same(ids[0], ids[1], ids[2])?;
                    let t = g.tanh(y);
                    Ok(g.sum_all(t))
                }),
            ),
            (
                "embed_lookup",
                vec![("table".into(), table.clone())],
                Box::new(|g, ids| {
                    let e = g.embed_lookup(ids[0], &[0, 3, 3, 1])?;
                    let t = g.tanh(e);
                    Ok(g.sum_all(t))
                }),
            ),
        ];

        for (name, params, build) in cases {
            let report = finite_diff_check(&params, 1e-5, build.as_ref()).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "op {name} seed {seed}: max rel err {}",
                report.max_rel_err
            );
        }
    }
}

#[test]
fn finite_diff_attention_and_lstm() {
    for seed in 0..10u64 {
        let (l, d, heads) = (3, 4, 2);
        let p = attn_params(d, heads, seed);
        let z = randn_tensor(l, d, seed, "z");
        let mut params: Vec<(String, Tensor)> = vec![("z".into(), z)];
        for h in 0..heads {
            params.push((format!("wq{h}"), p.wq[h].clone()));
            params.push((format!("wk{h}"), p.wk[h].clone()));
            params.push((format!("wv{h}"), p.wv[h].clone()));
            params.push((format!("wo{h}"), p.wo[h].clone()));
        }
        let report = finite_diff_check(&params, 1e-5, |g, ids| {
            let ids_attn = AttentionIds {
                wq: vec![ids[1], ids[5]],
                wk: vec![ids[2], ids[6]],
                wv: vec![ids[3], ids[7]],
                wo: vec![ids[4], ids[8]],
            };
            let out = multihead_self_attention(g, ids[0], &ids_attn, heads)?;
            let t = g.tanh(out);
            Ok(g.sum_all(t))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "attention seed {seed}: {}", report.max_rel_err);

        let lp = lstm_params(2, seed, false);
        let x = randn_tensor(3, 2, seed, "x");
        let mut params: Vec<(String, Tensor)> = vec![("x".into(), x)];
        for (i, wt) in lp.w.iter().enumerate() {
            params.push((format!("w{i}"), wt.clone()));
        }
        for (i, bt) in lp.b.iter().enumerate() {
            params.push((format!("b{i}"), bt.clone()));
        }
        let report = finite_diff_check(&params, 1e-5, |g, ids| {
            let l = LstmIds {
                w_ii: ids[1],
                w_if: ids[2],
                w_ig: ids[3],
                w_io: ids[4],
                w_hi: ids[5],
                w_hf: ids[6],
                w_hg: ids[7],
                w_ho: ids[8],
                b_i: ids[9],
                b_f: ids[10],
                b_g: ids[11],
                b_o: ids[12],
            };
            let pooled = lstm_mean_pool(g, &l, ids[0])?;
            let t = g.tanh(pooled);
            Ok(g.sum_all(t))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "lstm seed {seed}: {}", report.max_rel_err);
    }
}

// ── properties ───────────────────────────────────────────────────────

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&xs).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn layer_norm_rows_are_standardized(
            rows in 1usize..4,
            seed in 0u64..500,
        ) {
            let d = 6;
            let x = randn_tensor(rows, d, seed, "ln");
            let y = layer_norm(&x, &[1.0; 6], &[0.0; 6], 1e-8).unwrap();
            for r in 0..rows {
                let row = &y.values()[r * d..(r + 1) * d];
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }
}
