//! Low-rank adapters for linear projections.
//!
//! A wrapped projection computes `y = x Wᵀ + (α/r) · (x Aᵀ) Bᵀ` where `W`
//! (`d_out × d_in`) stays frozen and only `A` (`r × d_in`) and `B`
//! (`d_out × r`) are trained. The update is kept in factored form; `B·A` is
//! only materialized by [`LoraLinear::merge`] / [`LoraLinear::unmerge`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, matmul_nn, matmul_nt, matmul_tn, Matrix, Scalar};

/// Standard deviation of the Gaussian used for `A`.
pub const LORA_A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Wq, Projection::Wk, Projection::Wv, Projection::Wo];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Wq => "wq",
            Projection::Wk => "wk",
            Projection::Wv => "wv",
            Projection::Wo => "wo",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Projection::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown projection {s:?} (expected wq, wk, wv or wo)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 16.0,
            dropout: 0.0,
            targets: Projection::ALL.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidConfig("LoRA rank r must be at least 1".into()));
        }
        let scale = self.scale();
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidConfig(format!("LoRA scale alpha/r = {scale} must be finite and positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("LoRA dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn targets(&self, p: Projection) -> bool {
        self.targets.contains(&p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub scale: T,
    pub dropout: f64,
    pub merged: bool,
}

impl<T: Scalar> LoraFactors<T> {
    pub fn rank(&self) -> usize {
        self.a.rows
    }

    /// `scale · B · A`, shaped like the base weight.
    pub fn delta(&self) -> Matrix<T> {
        let mut d = matmul_nn(&self.b, &self.a);
        for v in d.data.iter_mut() {
            *v = *v * self.scale;
        }
        d
    }
}

/// A projection with an optional adapter. Unwrapped projections behave as
/// plain linear maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear<T> {
    pub weight: Matrix<T>,
    pub lora: Option<LoraFactors<T>>,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    /// Adapter input after dropout; `None` when identical to the layer input.
    dropped: Option<Matrix<T>>,
    /// Dropout keep-mask already divided by the keep probability.
    keep: Option<Vec<T>>,
    /// `x_dropped · Aᵀ`.
    u: Option<Matrix<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct LinearGrads<T> {
    pub weight: Option<Matrix<T>>,
    pub a: Option<Matrix<T>>,
    pub b: Option<Matrix<T>>,
}

impl<T: Scalar> LoraLinear<T> {
    pub fn plain(weight: Matrix<T>) -> Self {
        Self { weight, lora: None }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows
    }

    /// Attaches a fresh adapter: `A ~ N(0, 0.02²)` from `seed`, `B = 0`.
    pub fn wrap(weight: Matrix<T>, config: &LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !weight.is_finite() {
            return Err(Error::NonFinite("base weight passed to LoRA wrap".into()));
        }
        let (d_out, d_in) = weight.shape();
        let r = config.r;
        if r > d_in.min(d_out) {
            log_rank_warning(r, d_in, d_out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, LORA_A_INIT_STD).expect("valid std");
        let a = Matrix::from_vec(
            r,
            d_in,
            (0..r * d_in).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect(),
        );
        let b = Matrix::zeros(d_out, r);
        Ok(Self {
            weight,
            lora: Some(LoraFactors {
                a,
                b,
                scale: T::from_f64_lossy(config.scale()),
                dropout: config.dropout,
                merged: false,
            }),
        })
    }

    /// Adapter factors that currently contribute to the forward pass.
    fn active(&self) -> Option<&LoraFactors<T>> {
        self.lora.as_ref().filter(|l| !l.merged)
    }

    pub fn is_merged(&self) -> bool {
        self.lora.as_ref().is_some_and(|l| l.merged)
    }

    pub fn trainable_count(&self) -> usize {
        self.lora
            .as_ref()
            .map_or(0, |l| l.rank() * (self.d_in() + self.d_out()))
    }

    /// Inference forward pass (dropout inactive).
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_train(x, None)?.0)
    }

    /// Forward pass that also returns the cache for [`LoraLinear::backward`].
    /// Dropout on the adapter input is applied only when `dropout_rng` is given
    /// and the configured rate is positive.
    pub fn forward_train(
        &self,
        x: &Matrix<T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, LinearCache<T>)> {
        if x.cols != self.d_in() {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {}",
                self.d_in(),
                x.cols
            )));
        }
        let mut y = matmul_nt(x, &self.weight);
        let mut cache = LinearCache {
            dropped: None,
            keep: None,
            u: None,
        };
        if let Some(lora) = self.active() {
            if let (Some(rng), true) = (dropout_rng, lora.dropout > 0.0) {
                let keep_p = 1.0 - lora.dropout;
                let inv = T::from_f64_lossy(1.0 / keep_p);
                let keep: Vec<T> = (0..x.data.len())
                    .map(|_| if rng.random::<f64>() < keep_p { inv } else { T::zero() })
                    .collect();
                let dropped = Matrix::from_vec(
                    x.rows,
                    x.cols,
                    x.data.iter().zip(&keep).map(|(v, k)| *v * *k).collect(),
                );
                cache.keep = Some(keep);
                cache.dropped = Some(dropped);
            }
            let adapter_in = cache.dropped.as_ref().unwrap_or(x);
            let u = matmul_nt(adapter_in, &lora.a);
            gemm_into(&u, false, &lora.b, true, lora.scale, T::one(), &mut y);
            cache.u = Some(u);
        }
        Ok((y, cache))
    }

    /// Returns `dx` and fills gradients for the base weight (when
    /// `base_grad`) and for an unmerged adapter.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        cache: &LinearCache<T>,
        dy: &Matrix<T>,
        base_grad: bool,
    ) -> (Matrix<T>, LinearGrads<T>) {
        let mut dx = matmul_nn(dy, &self.weight);
        let mut grads = LinearGrads::default();
        if base_grad {
            grads.weight = Some(matmul_tn(dy, x));
        }
        if let (Some(lora), Some(u)) = (self.active(), cache.u.as_ref()) {
            let adapter_in = cache.dropped.as_ref().unwrap_or(x);
            let mut du = matmul_nn(dy, &lora.b);
            for v in du.data.iter_mut() {
                *v = *v * lora.scale;
            }
            let mut db = matmul_tn(dy, u);
            for v in db.data.iter_mut() {
                *v = *v * lora.scale;
            }
            grads.a = Some(matmul_tn(&du, adapter_in));
            grads.b = Some(db);
            let dx_adapter = matmul_nn(&du, &lora.a);
            match &cache.keep {
                Some(keep) => {
                    for ((d, a), k) in dx.data.iter_mut().zip(&dx_adapter.data).zip(keep) {
                        *d = *d + *a * *k;
                    }
                }
                None => dx.add_assign(&dx_adapter),
            }
        }
        (dx, grads)
    }

    /// Folds `scale·B·A` into the base weight.
    pub fn merge(&mut self) -> Result<()> {
        let lora = self.lora.as_mut().ok_or(Error::MergeState("unwrapped"))?;
        if lora.merged {
            return Err(Error::MergeState("merged"));
        }
        let delta = lora.delta();
        self.weight.add_assign(&delta);
        lora.merged = true;
        Ok(())
    }

    pub fn unmerge(&mut self) -> Result<()> {
        let lora = self.lora.as_mut().ok_or(Error::MergeState("unwrapped"))?;
        if !lora.merged {
            return Err(Error::MergeState("unmerged"));
        }
        let delta = lora.delta();
        for (w, d) in self.weight.data.iter_mut().zip(&delta.data) {
            *w = *w - *d;
        }
        lora.merged = false;
        Ok(())
    }
}

fn log_rank_warning(r: usize, d_in: usize, d_out: usize) {
    eprintln!("warning: LoRA rank {r} exceeds min(d_in={d_in}, d_out={d_out})");
}
