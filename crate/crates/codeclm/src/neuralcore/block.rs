//! The pre-norm transformer block: RMSNorm, RoPE attention, SwiGLU, and
//! optional low-rank adapters on the query/value projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, ParamId, ParamStore};
use super::kernels::AttnMask;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub rope_base: f64,
}

impl BlockConfig {
    /// The desk-scale default used throughout training and tests.
    pub fn desk_default() -> Self {
        BlockConfig { layers: 2, model_dim: 64, ffn_dim: 176, heads: 4, rope_base: 10_000.0 }
    }

    /// The full-scale configuration; constructible but far too big to train
    /// here.
    pub fn full_scale() -> Self {
        BlockConfig { layers: 12, model_dim: 1024, ffn_dim: 4096, heads: 16, rope_base: 10_000.0 }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("block dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

/// Standard-normal draw via Box–Muller, so initialization depends only on
/// the rng stream and not on platform distributions.
pub fn normal<F: Scalar>(rng: &mut impl Rng, std: f64) -> F {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    F::from_f64(z * std)
}

pub fn normal_tensor<F: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<F> {
    let count: usize = shape.iter().product();
    let data = (0..count).map(|_| normal(rng, std)).collect();
    Tensor::from_vec(shape, data).expect("shape matches count")
}

pub fn ones_tensor<F: Scalar>(len: usize) -> Tensor<F> {
    Tensor::from_vec(vec![len], vec![F::one(); len]).expect("shape matches count")
}

pub const INIT_STD: f64 = 0.02;

/// Low-rank adapter pair: `a` is `[r, d_in]`, `b` is `[d_out, r]`, and `b`
/// starts at zero so the adapter begins as the identity correction.
#[derive(Debug, Clone)]
pub struct LoraParams {
    pub a: ParamId,
    pub b: ParamId,
}

pub fn init_lora<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    rng: &mut impl Rng,
) -> LoraParams {
    let a = store.add(format!("{name}.lora_a"), normal_tensor(rng, vec![rank, d_in], INIT_STD));
    let b = store.add(format!("{name}.lora_b"), Tensor::zeros(vec![d_out, rank]));
    LoraParams { a, b }
}

/// `base_out + (x Aᵀ) Bᵀ`: the low-rank correction applied on top of a base
/// projection output.
pub fn lora_apply<F: Scalar>(
    g: &mut Graph<F>,
    base_out: NodeId,
    a: NodeId,
    b: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let (ra, rb) = (g.value(a).rows(), g.value(b).cols());
    if ra != rb {
        return Err(Error::ShapeMismatch {
            expected: g.value(a).shape().to_vec(),
            actual: g.value(b).shape().to_vec(),
        });
    }
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let xa = g.matmul(x, at)?;
    let delta = g.matmul(xa, bt)?;
    g.add(base_out, delta)
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub lora_q: Option<LoraParams>,
    pub lora_v: Option<LoraParams>,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// A stack of pre-norm blocks with a final RMSNorm.
#[derive(Debug, Clone)]
pub struct StackParams {
    pub config: BlockConfig,
    pub layers: Vec<LayerParams>,
    pub final_norm: ParamId,
}

pub fn init_stack<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    config: &BlockConfig,
    lora_rank: Option<usize>,
    rng: &mut impl Rng,
) -> Result<StackParams> {
    config.validate()?;
    let d = config.model_dim;
    let f = config.ffn_dim;
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let name = |part: &str| format!("{prefix}.layer{i}.{part}");
        let attn_norm = store.add(name("attn_norm"), ones_tensor(d));
        let wq = store.add(name("wq"), normal_tensor(rng, vec![d, d], INIT_STD));
        let wk = store.add(name("wk"), normal_tensor(rng, vec![d, d], INIT_STD));
        let wv = store.add(name("wv"), normal_tensor(rng, vec![d, d], INIT_STD));
        let wo = store.add(name("wo"), normal_tensor(rng, vec![d, d], INIT_STD));
        let (lora_q, lora_v) = match lora_rank {
            Some(r) => (
                Some(init_lora(store, &name("wq"), d, d, r, rng)),
                Some(init_lora(store, &name("wv"), d, d, r, rng)),
            ),
            None => (None, None),
        };
        let ffn_norm = store.add(name("ffn_norm"), ones_tensor(d));
        let w_gate = store.add(name("w_gate"), normal_tensor(rng, vec![d, f], INIT_STD));
        let w_up = store.add(name("w_up"), normal_tensor(rng, vec![d, f], INIT_STD));
        let w_down = store.add(name("w_down"), normal_tensor(rng, vec![f, d], INIT_STD));
        layers.push(LayerParams {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            lora_q,
            lora_v,
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        });
    }
    let final_norm = store.add(format!("{prefix}.final_norm"), ones_tensor(d));
    Ok(StackParams { config: config.clone(), layers, final_norm })
}

/// SwiGLU feed-forward: `silu(x W_g) ⊙ (x W_u)` through `W_d`.
pub fn swiglu<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    w_gate: NodeId,
    w_up: NodeId,
    w_down: NodeId,
) -> Result<NodeId> {
    let gate = g.matmul(x, w_gate)?;
    let gate = g.silu(gate);
    let up = g.matmul(x, w_up)?;
    let gated = g.mul(gate, up)?;
    g.matmul(gated, w_down)
}

/// Runs the whole stack over `x` (`[T, model_dim]`) and applies the final
/// norm. `positions` feed the rotary embedding; `mask` selects causal or
/// bidirectional attention.
pub fn stack_forward<F: Scalar>(
    g: &mut Graph<F>,
    stack: &StackParams,
    x: NodeId,
    positions: &[usize],
    mask: &AttnMask,
) -> Result<NodeId> {
    let cfg = &stack.config;
    let mut h = x;
    for layer in &stack.layers {
        let attn_gain = g.param(layer.attn_norm);
        let a_in = g.rmsnorm(h, attn_gain)?;
        let wq = g.param(layer.wq);
        let mut q = g.matmul(a_in, wq)?;
        if let Some(lora) = &layer.lora_q {
            let a = g.param(lora.a);
            let b = g.param(lora.b);
            q = lora_apply(g, q, a, b, a_in)?;
        }
        let wk = g.param(layer.wk);
        let k = g.matmul(a_in, wk)?;
        let wv = g.param(layer.wv);
        let mut v = g.matmul(a_in, wv)?;
        if let Some(lora) = &layer.lora_v {
            let a = g.param(lora.a);
            let b = g.param(lora.b);
            v = lora_apply(g, v, a, b, a_in)?;
        }
        let q = g.rope(q, positions, cfg.heads, cfg.rope_base)?;
        let k = g.rope(k, positions, cfg.heads, cfg.rope_base)?;
        let attn = g.attention(q, k, v, cfg.heads, mask)?;
        let wo = g.param(layer.wo);
        let attn_out = g.matmul(attn, wo)?;
        h = g.add(h, attn_out)?;

        let ffn_gain = g.param(layer.ffn_norm);
        let f_in = g.rmsnorm(h, ffn_gain)?;
        let w_gate = g.param(layer.w_gate);
        let w_up = g.param(layer.w_up);
        let w_down = g.param(layer.w_down);
        let ffn_out = swiglu(g, f_in, w_gate, w_up, w_down)?;
        h = g.add(h, ffn_out)?;
    }
    let gain = g.param(stack.final_norm);
    g.rmsnorm(h, gain)
}
