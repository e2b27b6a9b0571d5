//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the crate's numeric code; models are only read.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use finlora::corpus::{AnnotatedSentence, EntityMap, EntityType};
use finlora::lora::LoraLinear;
use finlora::model::Transformer;
use finlora::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bundled_corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic50.jsonl")
}

type Mat = Vec<Vec<f64>>;

fn to_rows(m: &Matrix<f64>) -> Mat {
    (0..m.rows).map(|r| m.data[r * m.cols..(r + 1) * m.cols].to_vec()).collect()
}

/// `W + scale * B * A`, computed element by element.
fn effective_weight(lin: &LoraLinear<f64>) -> Mat {
    let mut w = to_rows(&lin.weight);
    if let Some(f) = &lin.lora {
        if !f.merged {
            let a = to_rows(&f.a);
            let b = to_rows(&f.b);
            for (o, row) in w.iter_mut().enumerate() {
                for (i, cell) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..a.len() {
                        acc += b[o][k] * a[k][i];
                    }
                    *cell += f.scale * acc;
                }
            }
        }
    }
    w
}

fn apply(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn rotate(head: &mut [f64], pos: usize, base: f64) {
    let d = head.len();
    for i in 0..d / 2 {
        let theta = pos as f64 / base.powf(2.0 * i as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        let (a, b) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
    }
}

/// Plain multi-head attention transformer forward pass. Query head `h` uses
/// key/value head `h * n_kv_heads / n_heads`, which for `n_kv_heads ==
/// n_heads` is the textbook per-head attention. `segment_starts` lists
/// positions where a new document begins.
pub fn reference_logits(model: &Transformer<f64>, tokens: &[u32], segment_starts: &[usize]) -> Mat {
    let c = &model.config;
    let n = tokens.len();
    let hd = c.d_model / c.n_heads;
    let segment = |t: usize| segment_starts.iter().filter(|&&s| s <= t && s > 0).count();
    let embeddings = to_rows(&model.tok_embeddings);
    let mut xs: Mat = tokens.iter().map(|&t| embeddings[t as usize].clone()).collect();
    for b in &model.layers {
        let wq = effective_weight(&b.wq);
        let wk = effective_weight(&b.wk);
        let wv = effective_weight(&b.wv);
        let wo = effective_weight(&b.wo);
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (t, x) in xs.iter().enumerate() {
            let h = rmsnorm(x, &b.attention_norm.data, c.norm_eps);
            let mut q = apply(&wq, &h);
            let mut k = apply(&wk, &h);
            for head in q.chunks_mut(hd) {
                rotate(head, t, c.rope_base);
            }
            for head in k.chunks_mut(hd) {
                rotate(head, t, c.rope_base);
            }
            qs.push(q);
            ks.push(k);
            vs.push(apply(&wv, &h));
        }
        let mut next = Vec::with_capacity(n);
        for t in 0..n {
            let mut att = vec![0.0; c.d_model];
            for h in 0..c.n_heads {
                let kvh = h * c.n_kv_heads / c.n_heads;
                let q = &qs[t][h * hd..(h + 1) * hd];
                let visible: Vec<usize> = (0..=t).filter(|&j| segment(j) == segment(t)).collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        let k = &ks[j][kvh * hd..(kvh + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&visible) {
                    for d in 0..hd {
                        att[h * hd + d] += w / z * vs[j][kvh * hd + d];
                    }
                }
            }
            let o = apply(&wo, &att);
            let mid: Vec<f64> = xs[t].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h = rmsnorm(&mid, &b.ffn_norm.data, c.norm_eps);
            let gate = apply(&to_rows(&b.w_gate), &h);
            let up = apply(&to_rows(&b.w_up), &h);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = apply(&to_rows(&b.w_down), &act);
            next.push(mid.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let out = to_rows(&model.output);
    xs.iter().map(|x| apply(&out, &rmsnorm(x, &model.norm.data, c.norm_eps))).collect()
}

/// Masked mean of `-log softmax(logits)[target]`.
pub fn reference_loss(logits: &Mat, targets: &[u32], mask: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if m == 1 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[t as usize].exp() / z).ln();
            count += 1;
        }
    }
    total / count as f64
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Randomizes every LoRA factor so adapters contribute to the forward pass.
pub fn perturb_adapters(model: &mut Transformer<f64>, seed: u64, amplitude: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, kind, t) in model.tensors_mut() {
        if kind != finlora::model::ParamKind::Base {
            for v in t.data.iter_mut() {
                *v = rng.random_range(-amplitude..amplitude);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn canonical(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Largest matching between gold and predicted mentions where an edge joins
/// equal strings, found by trying every assignment.
fn max_matching(gold: &[String], pred: &[String], used: &mut Vec<bool>) -> usize {
    let Some((first, rest)) = gold.split_first() else {
        return 0;
    };
    let mut best = max_matching(rest, pred, used);
    for j in 0..pred.len() {
        if !used[j] && canonical(&pred[j]) == canonical(first) {
            used[j] = true;
            best = best.max(1 + max_matching(rest, pred, used));
            used[j] = false;
        }
    }
    best
}

pub fn brute_force_counts(gold: &EntityMap, pred: &EntityMap) -> [Tally; 7] {
    let mut out = [Tally::default(); 7];
    for ty in EntityType::ALL {
        let g = gold.get(ty);
        let p = pred.get(ty);
        let tp = max_matching(g, p, &mut vec![false; p.len()]);
        out[ty.index()] = Tally {
            tp,
            fp: p.len() - tp,
            fn_: g.len() - tp,
        };
    }
    out
}

/// Statistics recomputed from scratch with maps keyed by type name.
pub struct ReferenceStats {
    pub total: usize,
    pub with_entities: usize,
    pub without_entities: usize,
    pub avg_chars: f64,
    pub avg_entities: f64,
    pub per_type: BTreeMap<String, usize>,
}

pub fn reference_stats(corpus: &[AnnotatedSentence]) -> ReferenceStats {
    let total = corpus.len();
    let counts: Vec<usize> = corpus
        .iter()
        .map(|s| EntityType::ALL.iter().map(|&t| s.entities.get(t).len()).sum())
        .collect();
    let with_entities = counts.iter().filter(|&&c| c > 0).count();
    let mut per_type = BTreeMap::new();
    for ty in EntityType::ALL {
        let n = corpus.iter().filter(|s| !s.entities.get(ty).is_empty()).count();
        per_type.insert(ty.to_string(), n);
    }
    let div = |x: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    ReferenceStats {
        total,
        with_entities,
        without_entities: total - with_entities,
        avg_chars: div(corpus.iter().map(|s| s.text.chars().count()).sum()),
        avg_entities: div(counts.iter().sum()),
        per_type,
    }
}
