//! A small decoder-only transformer in the Llama style: pre-norm blocks with
//! RMSNorm, rotary positions, grouped-query attention and a SwiGLU MLP,
//! followed by a final RMSNorm and an untied output projection.
//!
//! The backward pass is written out by hand per layer. Gradients are produced
//! only for tensors in the requested [`TrainScope`]; frozen tensors get no
//! entry at all.

mod attention;
mod config;
mod norm;
pub mod rope;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use attention::{attention_backward, attention_forward, AttentionMask, HeadLayout};
pub use config::ModelConfig;
pub use norm::{rms_norm, rms_norm_backward};
use rope::RopeTable;

use crate::error::{Error, Result};
use crate::lora::{LinearCache, LinearGrads, LoraConfig, LoraLinear, Projection};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Matrix, Scalar};
use crate::tokenizer::{TokenId, EOS};

/// Standard deviation of the Gaussian used for embeddings and linear weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attention_norm: Matrix<T>,
    pub wq: LoraLinear<T>,
    pub wk: LoraLinear<T>,
    pub wv: LoraLinear<T>,
    pub wo: LoraLinear<T>,
    pub ffn_norm: Matrix<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Scalar> Block<T> {
    pub fn proj(&self, p: Projection) -> &LoraLinear<T> {
        match p {
            Projection::Wq => &self.wq,
            Projection::Wk => &self.wk,
            Projection::Wv => &self.wv,
            Projection::Wo => &self.wo,
        }
    }

    pub fn proj_mut(&mut self, p: Projection) -> &mut LoraLinear<T> {
        match p {
            Projection::Wq => &mut self.wq,
            Projection::Wk => &mut self.wk,
            Projection::Wv => &mut self.wv,
            Projection::Wo => &mut self.wo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub tok_embeddings: Matrix<T>,
    pub layers: Vec<Block<T>>,
    pub norm: Matrix<T>,
    pub output: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    LoraA,
    LoraB,
}

/// Which tensors receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Only LoRA factors; every base tensor is frozen.
    Adapters,
    /// Every tensor, adapters included. Used to build base checkpoints.
    Full,
}

impl TrainScope {
    pub fn includes(self, kind: ParamKind) -> bool {
        match self {
            TrainScope::Adapters => kind != ParamKind::Base,
            TrainScope::Full => true,
        }
    }
}

/// Gradients keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    tensors: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Matrix<T>) {
        self.tensors.insert(name, grad);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Element-wise `self += other`; tensors missing on one side are taken
    /// from the other.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.tensors.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.tensors.values_mut() {
            for v in g.data.iter_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }
}

struct LayerCache<T> {
    input: Matrix<T>,
    normed1: Matrix<T>,
    inv1: Vec<T>,
    q_cache: LinearCache<T>,
    k_cache: LinearCache<T>,
    v_cache: LinearCache<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    att: Matrix<T>,
    o_cache: LinearCache<T>,
    mid: Matrix<T>,
    normed2: Matrix<T>,
    inv2: Vec<T>,
    gate: Matrix<T>,
    up: Matrix<T>,
    hidden: Matrix<T>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    rope: RopeTable<T>,
    final_in: Matrix<T>,
    final_normed: Matrix<T>,
    final_inv: Vec<T>,
}

/// Options for [`Transformer::backward`].
#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    pub scope: TrainScope,
    /// Seed for LoRA dropout masks; dropout stays off when `None`.
    pub dropout_seed: Option<u64>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            scope: TrainScope::Adapters,
            dropout_seed: None,
        }
    }
}

fn layer_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

fn proj_name(layer: usize, p: Projection) -> String {
    layer_name(layer, &format!("attention.{}", p.as_str()))
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Transformer<T> {
    /// All-zero parameters with unit norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ones = || Matrix::from_vec(1, d, vec![T::one(); d]);
        let layers = (0..config.n_layers)
            .map(|_| Block {
                attention_norm: ones(),
                wq: LoraLinear::plain(Matrix::zeros(d, d)),
                wk: LoraLinear::plain(Matrix::zeros(config.kv_dim(), d)),
                wv: LoraLinear::plain(Matrix::zeros(config.kv_dim(), d)),
                wo: LoraLinear::plain(Matrix::zeros(d, d)),
                ffn_norm: ones(),
                w_gate: Matrix::zeros(config.d_ff, d),
                w_up: Matrix::zeros(config.d_ff, d),
                w_down: Matrix::zeros(d, config.d_ff),
            })
            .collect();
        Ok(Self {
            tok_embeddings: Matrix::zeros(config.vocab_size, d),
            layers,
            norm: ones(),
            output: Matrix::zeros(config.vocab_size, d),
            config,
        })
    }

    /// Gaussian(0, 0.02²) embeddings and weights, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, kind, tensor) in model.tensors_mut() {
            debug_assert_eq!(kind, ParamKind::Base);
            if name.ends_with("_norm") || name == "norm" {
                continue;
            }
            for v in tensor.data.iter_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_heads: self.config.n_heads,
            n_kv_heads: self.config.n_kv_heads,
            head_dim: self.config.head_dim(),
        }
    }

    /// Every tensor with its name and kind, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Matrix<T>)> {
        let mut out = vec![("tok_embeddings".to_string(), ParamKind::Base, &self.tok_embeddings)];
        for (l, b) in self.layers.iter().enumerate() {
            out.push((layer_name(l, "attention_norm"), ParamKind::Base, &b.attention_norm));
            for p in Projection::ALL {
                let lin = b.proj(p);
                let name = proj_name(l, p);
                out.push((name.clone(), ParamKind::Base, &lin.weight));
                if let Some(lora) = &lin.lora {
                    out.push((format!("{name}.lora_a"), ParamKind::LoraA, &lora.a));
                    out.push((format!("{name}.lora_b"), ParamKind::LoraB, &lora.b));
                }
            }
            out.push((layer_name(l, "ffn_norm"), ParamKind::Base, &b.ffn_norm));
            out.push((layer_name(l, "feed_forward.w_gate"), ParamKind::Base, &b.w_gate));
            out.push((layer_name(l, "feed_forward.w_up"), ParamKind::Base, &b.w_up));
            out.push((layer_name(l, "feed_forward.w_down"), ParamKind::Base, &b.w_down));
        }
        out.push(("norm".to_string(), ParamKind::Base, &self.norm));
        out.push(("output".to_string(), ParamKind::Base, &self.output));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Matrix<T>)> {
        let mut out = vec![("tok_embeddings".to_string(), ParamKind::Base, &mut self.tok_embeddings)];
        for (l, b) in self.layers.iter_mut().enumerate() {
            out.push((layer_name(l, "attention_norm"), ParamKind::Base, &mut b.attention_norm));
            for (p, lin) in [
                (Projection::Wq, &mut b.wq),
                (Projection::Wk, &mut b.wk),
                (Projection::Wv, &mut b.wv),
                (Projection::Wo, &mut b.wo),
            ] {
                let name = proj_name(l, p);
                out.push((name.clone(), ParamKind::Base, &mut lin.weight));
                if let Some(lora) = lin.lora.as_mut() {
                    out.push((format!("{name}.lora_a"), ParamKind::LoraA, &mut lora.a));
                    out.push((format!("{name}.lora_b"), ParamKind::LoraB, &mut lora.b));
                }
            }
            out.push((layer_name(l, "ffn_norm"), ParamKind::Base, &mut b.ffn_norm));
            out.push((layer_name(l, "feed_forward.w_gate"), ParamKind::Base, &mut b.w_gate));
            out.push((layer_name(l, "feed_forward.w_up"), ParamKind::Base, &mut b.w_up));
            out.push((layer_name(l, "feed_forward.w_down"), ParamKind::Base, &mut b.w_down));
        }
        out.push(("norm".to_string(), ParamKind::Base, &mut self.norm));
        out.push(("output".to_string(), ParamKind::Base, &mut self.output));
        out
    }

    /// Base tensors only, as owned copies (used for frozen-weight checks).
    pub fn base_snapshot(&self) -> Vec<(String, Matrix<T>)> {
        self.tensors()
            .into_iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Base)
            .map(|(n, _, t)| (n, t.clone()))
            .collect()
    }

    pub fn total_parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.data.len()).sum()
    }

    pub fn base_parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, k, _)| *k == ParamKind::Base)
            .map(|(_, _, t)| t.data.len())
            .sum()
    }

    /// Σ over wrapped projections of `r·(d_in + d_out)`.
    pub fn trainable_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|b| Projection::ALL.map(|p| b.proj(p).trainable_count()))
            .sum()
    }

    pub fn has_adapters(&self) -> bool {
        self.layers
            .iter()
            .any(|b| Projection::ALL.iter().any(|&p| b.proj(p).lora.is_some()))
    }

    /// Wraps the configured projections of every layer with fresh adapters.
    /// Each matrix gets its own `A` stream derived from `seed`.
    pub fn wrap_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        config.validate()?;
        for (l, block) in self.layers.iter_mut().enumerate() {
            for (pi, p) in Projection::ALL.into_iter().enumerate() {
                if !config.targets(p) {
                    continue;
                }
                let lin = block.proj_mut(p);
                if lin.lora.is_some() {
                    return Err(Error::InvalidConfig(format!("layer {l} {p} is already wrapped")));
                }
                let weight = std::mem::replace(&mut lin.weight, Matrix::zeros(0, 0));
                *lin = LoraLinear::wrap(weight, config, mix_seed(seed, (l * 4 + pi) as u64 + 1))?;
            }
        }
        Ok(())
    }

    pub fn merge_lora(&mut self) -> Result<()> {
        self.for_each_adapter(LoraLinear::merge)
    }

    pub fn unmerge_lora(&mut self) -> Result<()> {
        self.for_each_adapter(LoraLinear::unmerge)
    }

    fn for_each_adapter(&mut self, mut f: impl FnMut(&mut LoraLinear<T>) -> Result<()>) -> Result<()> {
        for block in &mut self.layers {
            for p in Projection::ALL {
                let lin = block.proj_mut(p);
                if lin.lora.is_some() {
                    f(lin)?;
                }
            }
        }
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        self.layers
            .iter()
            .any(|b| Projection::ALL.iter().any(|&p| b.proj(p).is_merged()))
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        let lin = |l: &LoraLinear<T>| LoraLinear {
            weight: l.weight.cast(),
            lora: l.lora.as_ref().map(|f| crate::lora::LoraFactors {
                a: f.a.cast(),
                b: f.b.cast(),
                scale: U::from_f64_lossy(f.scale.to_f64_lossy()),
                dropout: f.dropout,
                merged: f.merged,
            }),
        };
        Transformer {
            config: self.config.clone(),
            tok_embeddings: self.tok_embeddings.cast(),
            layers: self
                .layers
                .iter()
                .map(|b| Block {
                    attention_norm: b.attention_norm.cast(),
                    wq: lin(&b.wq),
                    wk: lin(&b.wk),
                    wv: lin(&b.wv),
                    wo: lin(&b.wo),
                    ffn_norm: b.ffn_norm.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            norm: self.norm.cast(),
            output: self.output.cast(),
        }
    }

    /// Checks tensor shapes against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let d = c.d_model;
        let expect = |name: &str, t: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
            if t.shape() != shape || t.data.len() != shape.0 * shape.1 {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok(())
        };
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!("expected {} layers, found {}", c.n_layers, self.layers.len())));
        }
        expect("tok_embeddings", &self.tok_embeddings, (c.vocab_size, d))?;
        expect("output", &self.output, (c.vocab_size, d))?;
        expect("norm", &self.norm, (1, d))?;
        for (l, b) in self.layers.iter().enumerate() {
            expect(&layer_name(l, "attention_norm"), &b.attention_norm, (1, d))?;
            expect(&layer_name(l, "ffn_norm"), &b.ffn_norm, (1, d))?;
            for (p, shape) in [
                (Projection::Wq, (d, d)),
                (Projection::Wk, (c.kv_dim(), d)),
                (Projection::Wv, (c.kv_dim(), d)),
                (Projection::Wo, (d, d)),
            ] {
                let lin = b.proj(p);
                let name = proj_name(l, p);
                expect(&name, &lin.weight, shape)?;
                if let Some(lora) = &lin.lora {
                    let r = lora.rank();
                    expect(&format!("{name}.lora_a"), &lora.a, (r, shape.1))?;
                    expect(&format!("{name}.lora_b"), &lora.b, (shape.0, r))?;
                }
            }
            expect(&layer_name(l, "feed_forward.w_gate"), &b.w_gate, (c.d_ff, d))?;
            expect(&layer_name(l, "feed_forward.w_up"), &b.w_up, (c.d_ff, d))?;
            expect(&layer_name(l, "feed_forward.w_down"), &b.w_down, (d, c.d_ff))?;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the stack up to (and including) the final norm.
    fn forward_hidden(
        &self,
        tokens: &[TokenId],
        mask: &AttentionMask,
        dropout_seed: Option<u64>,
    ) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let len = tokens.len();
        let eps = c.norm_eps;
        let layout = self.layout();
        let rope = RopeTable::new(c.head_dim(), c.rope_base, len);
        let starts = mask.window_starts(len);

        let mut x = Matrix::zeros(len, c.d_model);
        for (t, &id) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.tok_embeddings.row(id as usize));
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, b) in self.layers.iter().enumerate() {
            let rng = |p: usize| dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(mix_seed(s, (l * 4 + p) as u64)));
            let (normed1, inv1) = rms_norm(&x, &b.attention_norm.data, eps);
            let (mut q, q_cache) = b.wq.forward_train(&normed1, rng(0).as_mut())?;
            let (mut k, k_cache) = b.wk.forward_train(&normed1, rng(1).as_mut())?;
            let (v, v_cache) = b.wv.forward_train(&normed1, rng(2).as_mut())?;
            for t in 0..len {
                rope.rotate_row(q.row_mut(t), t);
                rope.rotate_row(k.row_mut(t), t);
            }
            let (att, probs) = attention_forward(&q, &k, &v, layout, &starts);
            let (o, o_cache) = b.wo.forward_train(&att, rng(3).as_mut())?;
            let mut mid = x.clone();
            mid.add_assign(&o);

            let (normed2, inv2) = rms_norm(&mid, &b.ffn_norm.data, eps);
            let gate = matmul_nt(&normed2, &b.w_gate);
            let up = matmul_nt(&normed2, &b.w_up);
            let hidden = Matrix::from_vec(
                len,
                c.d_ff,
                gate.data
                    .iter()
                    .zip(&up.data)
                    .map(|(&g, &u)| g * sigmoid(g) * u)
                    .collect(),
            );
            let down = matmul_nt(&hidden, &b.w_down);
            let mut out = mid.clone();
            out.add_assign(&down);

            layers.push(LayerCache {
                input: std::mem::replace(&mut x, out),
                normed1,
                inv1,
                q_cache,
                k_cache,
                v_cache,
                q,
                k,
                v,
                probs,
                att,
                o_cache,
                mid,
                normed2,
                inv2,
                gate,
                up,
                hidden,
            });
        }
        let (final_normed, final_inv) = rms_norm(&x, &self.norm.data, eps);
        Ok(ForwardCache {
            layers,
            rope,
            final_in: x,
            final_normed,
            final_inv,
        })
    }

    /// Next-token logits for every position (`len × vocab_size`).
    pub fn forward(&self, tokens: &[TokenId], mask: &AttentionMask) -> Result<Matrix<T>> {
        let cache = self.forward_hidden(tokens, mask, None)?;
        Ok(matmul_nt(&cache.final_normed, &self.output))
    }

    /// Masked mean cross-entropy and exact gradients for every tensor in
    /// `opts.scope`.
    pub fn backward(
        &self,
        tokens: &[TokenId],
        targets: &[TokenId],
        loss_mask: &[u8],
        mask: &AttentionMask,
        opts: &BackwardOptions,
    ) -> Result<(f64, Gradients<T>)> {
        let cache = self.forward_hidden(tokens, mask, opts.dropout_seed)?;
        let logits = matmul_nt(&cache.final_normed, &self.output);
        let (loss, dlogits) = cross_entropy_with_grad(&logits, targets, loss_mask)?;
        let full = opts.scope == TrainScope::Full;
        let c = &self.config;
        let d = c.d_model;
        let layout = self.layout();
        let mut grads = Gradients::new();

        let d_final = matmul_nn(&dlogits, &self.output);
        if full {
            grads.insert("output".into(), matmul_tn(&dlogits, &cache.final_normed));
        }
        let mut dnorm = full.then(|| vec![T::zero(); d]);
        let mut dx = rms_norm_backward(&cache.final_in, &self.norm.data, &cache.final_inv, &d_final, dnorm.as_deref_mut());
        if let Some(g) = dnorm {
            grads.insert("norm".into(), Matrix::from_vec(1, d, g));
        }

        for (l, (b, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            // feed-forward branch
            let d_hidden = matmul_nn(&dx, &b.w_down);
            if full {
                grads.insert(layer_name(l, "feed_forward.w_down"), matmul_tn(&dx, &lc.hidden));
            }
            let mut d_gate = Matrix::zeros(lc.gate.rows, lc.gate.cols);
            let mut d_up = Matrix::zeros(lc.up.rows, lc.up.cols);
            for i in 0..d_hidden.data.len() {
                let g = lc.gate.data[i];
                let s = sigmoid(g);
                let silu = g * s;
                let dh = d_hidden.data[i];
                d_up.data[i] = dh * silu;
                d_gate.data[i] = dh * lc.up.data[i] * s * (T::one() + g * (T::one() - s));
            }
            let mut d_normed2 = matmul_nn(&d_gate, &b.w_gate);
            d_normed2.add_assign(&matmul_nn(&d_up, &b.w_up));
            if full {
                grads.insert(layer_name(l, "feed_forward.w_gate"), matmul_tn(&d_gate, &lc.normed2));
                grads.insert(layer_name(l, "feed_forward.w_up"), matmul_tn(&d_up, &lc.normed2));
            }
            let mut dgain = full.then(|| vec![T::zero(); d]);
            let mut d_mid = rms_norm_backward(&lc.mid, &b.ffn_norm.data, &lc.inv2, &d_normed2, dgain.as_deref_mut());
            d_mid.add_assign(&dx);
            if let Some(g) = dgain {
                grads.insert(layer_name(l, "ffn_norm"), Matrix::from_vec(1, d, g));
            }

            // attention branch
            let (d_att, g_o) = b.wo.backward(&lc.att, &lc.o_cache, &d_mid, full);
            store_linear_grads(&mut grads, proj_name(l, Projection::Wo), g_o);
            let (mut dq, mut dk, dv) = attention_backward(&lc.q, &lc.k, &lc.v, &lc.probs, &d_att, layout);
            for t in 0..dq.rows {
                cache.rope.unrotate_row(dq.row_mut(t), t);
                cache.rope.unrotate_row(dk.row_mut(t), t);
            }
            let (mut d_normed1, g_q) = b.wq.backward(&lc.normed1, &lc.q_cache, &dq, full);
            let (d_k_in, g_k) = b.wk.backward(&lc.normed1, &lc.k_cache, &dk, full);
            let (d_v_in, g_v) = b.wv.backward(&lc.normed1, &lc.v_cache, &dv, full);
            d_normed1.add_assign(&d_k_in);
            d_normed1.add_assign(&d_v_in);
            store_linear_grads(&mut grads, proj_name(l, Projection::Wq), g_q);
            store_linear_grads(&mut grads, proj_name(l, Projection::Wk), g_k);
            store_linear_grads(&mut grads, proj_name(l, Projection::Wv), g_v);

            let mut dgain = full.then(|| vec![T::zero(); d]);
            let mut d_in = rms_norm_backward(&lc.input, &b.attention_norm.data, &lc.inv1, &d_normed1, dgain.as_deref_mut());
            d_in.add_assign(&d_mid);
            if let Some(g) = dgain {
                grads.insert(layer_name(l, "attention_norm"), Matrix::from_vec(1, d, g));
            }
            dx = d_in;
        }

        if full {
            let mut d_emb = Matrix::zeros(c.vocab_size, d);
            for (t, &id) in tokens.iter().enumerate() {
                let row = d_emb.row_mut(id as usize);
                for (a, g) in row.iter_mut().zip(dx.row(t)) {
                    *a = *a + *g;
                }
            }
            grads.insert("tok_embeddings".into(), d_emb);
        }
        Ok((loss, grads))
    }

    /// Feeds `tokens` after everything already in `cache` under a causal mask
    /// and returns the final-norm hidden state of the last new position.
    fn extend(&self, tokens: &[TokenId], cache: &mut KvCache<T>) -> Matrix<T> {
        let c = &self.config;
        let eps = c.norm_eps;
        let hd = c.head_dim();
        let group = c.group_size();
        let scale = T::one() / T::from_usize(hd).expect("head dim fits").sqrt();
        let start = cache.len;
        let n = tokens.len();
        let mut x = Matrix::zeros(n, c.d_model);
        for (t, &id) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.tok_embeddings.row(id as usize));
        }
        for (l, b) in self.layers.iter().enumerate() {
            let (normed1, _) = rms_norm(&x, &b.attention_norm.data, eps);
            let mut q = b.wq.forward(&normed1).expect("validated shapes");
            let mut k = b.wk.forward(&normed1).expect("validated shapes");
            let v = b.wv.forward(&normed1).expect("validated shapes");
            let (keys, values) = &mut cache.layers[l];
            for t in 0..n {
                cache.rope.rotate_row(q.row_mut(t), start + t);
                cache.rope.rotate_row(k.row_mut(t), start + t);
                keys.row_mut(start + t).copy_from_slice(k.row(t));
                values.row_mut(start + t).copy_from_slice(v.row(t));
            }
            let mut att = Matrix::zeros(n, c.d_model);
            let mut scores = vec![T::zero(); start + n];
            for t in 0..n {
                let visible = start + t + 1;
                for h in 0..c.n_heads {
                    let qh = &q.row(t)[h * hd..(h + 1) * hd];
                    let kv = (h / group) * hd;
                    let mut max = T::neg_infinity();
                    for (j, s) in scores[..visible].iter_mut().enumerate() {
                        *s = crate::tensor::dot(qh, &keys.row(j)[kv..kv + hd]) * scale;
                        max = max.max(*s);
                    }
                    let mut total = T::zero();
                    for s in scores[..visible].iter_mut() {
                        *s = (*s - max).exp();
                        total = total + *s;
                    }
                    let out = &mut att.row_mut(t)[h * hd..(h + 1) * hd];
                    for (j, &s) in scores[..visible].iter().enumerate() {
                        let w = s / total;
                        for (o, &vv) in out.iter_mut().zip(&values.row(j)[kv..kv + hd]) {
                            *o = *o + w * vv;
                        }
                    }
                }
            }
            let o = b.wo.forward(&att).expect("validated shapes");
            x.add_assign(&o);
            let (normed2, _) = rms_norm(&x, &b.ffn_norm.data, eps);
            let gate = matmul_nt(&normed2, &b.w_gate);
            let up = matmul_nt(&normed2, &b.w_up);
            let hidden = Matrix::from_vec(
                n,
                c.d_ff,
                gate.data.iter().zip(&up.data).map(|(&g, &u)| g * sigmoid(g) * u).collect(),
            );
            x.add_assign(&matmul_nt(&hidden, &b.w_down));
        }
        cache.len += n;
        let last = Matrix::from_vec(1, c.d_model, x.row(n - 1).to_vec());
        rms_norm(&last, &self.norm.data, eps).0
    }

    /// Greedy decoding: appends the argmax token until EOS or `max_new`
    /// tokens. Returns the prompt followed by the generated ids.
    pub fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        Ok(self.generate_detailed(prompt, max_new)?.tokens)
    }

    pub fn generate_detailed(&self, prompt: &[TokenId], max_new: usize) -> Result<Generation> {
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(Error::BudgetExceeded {
                prompt: prompt.len(),
                max_new,
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        let mut hit_eos = false;
        if max_new == 0 {
            return Ok(Generation {
                prompt_len: prompt.len(),
                tokens,
                hit_eos,
            });
        }
        if prompt.is_empty() {
            return Err(Error::InvalidConfig("generation needs a non-empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        let mut cache = KvCache::new(self, prompt.len() + max_new);
        let mut last = self.extend(prompt, &mut cache);
        for step in 0..max_new {
            let logits = matmul_nt(&last, &self.output);
            let next = argmax(&logits.data) as TokenId;
            tokens.push(next);
            if next == EOS {
                hit_eos = true;
                break;
            }
            if step + 1 < max_new {
                last = self.extend(&[next], &mut cache);
            }
        }
        Ok(Generation {
            prompt_len: prompt.len(),
            tokens,
            hit_eos,
        })
    }
}

/// Rotated keys and values of every position fed so far, per layer.
struct KvCache<T> {
    layers: Vec<(Matrix<T>, Matrix<T>)>,
    rope: RopeTable<T>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    fn new(model: &Transformer<T>, capacity: usize) -> Self {
        let c = &model.config;
        Self {
            layers: (0..c.n_layers)
                .map(|_| (Matrix::zeros(capacity, c.kv_dim()), Matrix::zeros(capacity, c.kv_dim())))
                .collect(),
            rope: RopeTable::new(c.head_dim(), c.rope_base, capacity),
            len: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub prompt_len: usize,
    pub tokens: Vec<TokenId>,
    pub hit_eos: bool,
}

impl Generation {
    /// Generated ids without the prompt.
    pub fn continuation(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

fn store_linear_grads<T: Scalar>(grads: &mut Gradients<T>, name: String, g: LinearGrads<T>) {
    if let Some(a) = g.a {
        grads.insert(format!("{name}.lora_a"), a);
    }
    if let Some(b) = g.b {
        grads.insert(format!("{name}.lora_b"), b);
    }
    if let Some(w) = g.weight {
        grads.insert(name, w);
    }
}

/// First index of the maximum; NaNs never win.
fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Mean next-token cross-entropy over positions with `loss_mask == 1`,
/// using a max-shifted log-sum-exp.
pub fn loss<T: Scalar>(logits: &Matrix<T>, targets: &[TokenId], loss_mask: &[u8]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, targets, loss_mask)?.0)
}

fn cross_entropy_with_grad<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[TokenId],
    loss_mask: &[u8],
) -> Result<(f64, Matrix<T>)> {
    if targets.len() != logits.rows || loss_mask.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            loss_mask.len()
        )));
    }
    let count = loss_mask.iter().filter(|&&m| m != 0).count();
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    let inv_count = 1.0 / count as f64;
    let mut total = 0.0f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (t, (&target, &m)) in targets.iter().zip(loss_mask).enumerate() {
        if m == 0 {
            continue;
        }
        let target = target as usize;
        if target >= logits.cols {
            return Err(Error::TokenOutOfRange {
                id: target as TokenId,
                vocab_size: logits.cols,
            });
        }
        let row = logits.row(t);
        let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target].to_f64_lossy();
        let g = grad.row_mut(t);
        for (j, v) in row.iter().enumerate() {
            let p = (v.to_f64_lossy() - lse).exp();
            let onehot = if j == target { 1.0 } else { 0.0 };
            g[j] = T::from_f64_lossy((p - onehot) * inv_count);
        }
    }
    let loss = total * inv_count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}
