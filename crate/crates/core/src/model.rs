//! Llama-style decoder: RoPE, grouped-query attention, SwiGLU MLP,
//! pre-norm residual blocks with pluggable normalization sites.
//!
//! Weights are stored `[in, out]` so projections are `x @ W`. There are no
//! biases and the embedding and output head are untied.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::norm::{NormConfig, NormKind, NormSite, SiteRole, SiteTap};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::{AttentionShape, Graph, Result, RopeTable, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Learnable per-sublayer output scales, initialized to 0.5.
    pub residual_scaling: bool,
    pub rope_base: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            kv_heads: 2,
            intermediate: 352,
            vocab: 256,
            seq_len: 128,
            residual_scaling: false,
            rope_base: 10_000.0,
            init_std: 0.02,
        }
    }
}

pub const RESIDUAL_SCALE_INIT: f64 = 0.5;

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("intermediate", self.intermediate),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("model.{name} must be positive"));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(format!(
                "model.heads ({}) must be divisible by model.kv_heads ({})",
                self.heads, self.kv_heads
            ));
        }
        if self.hidden % self.heads != 0 {
            return Err(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(format!("head dim {} must be even for RoPE", self.head_dim()));
        }
        if !(self.init_std > 0.0) || !(self.rope_base > 0.0) {
            return Err("model.init_std and model.rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Two sites per block plus the final norm.
    pub fn norm_sites(&self) -> usize {
        2 * self.layers + 1
    }

    /// Scalars held by one normalization site of `kind`.
    pub fn site_param_count(&self, kind: NormKind) -> usize {
        let d = self.hidden;
        match kind {
            NormKind::Rmsnorm => d,
            NormKind::Dyt => 2 * d + 1,
            NormKind::Derf | NormKind::DerfEma => 2 * d + 2,
            NormKind::AsinhDerf => 2 * d + 3,
        }
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self, kind: NormKind) -> usize {
        let (d, hd, i) = (self.hidden, self.head_dim(), self.intermediate);
        let attn = d * self.heads * hd * 2 + 2 * d * self.kv_heads * hd;
        let mlp = 3 * d * i;
        let res = if self.residual_scaling { 2 } else { 0 };
        2 * self.vocab * d + self.layers * (attn + mlp + res) + self.norm_sites() * self.site_param_count(kind)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub res_attn: Option<ParamId>,
    pub res_ffn: Option<ParamId>,
}

impl BlockParams {
    pub fn attn_matrices(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    pub fn mlp_matrices(&self) -> [ParamId; 3] {
        [self.w_gate, self.w_up, self.w_down]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub params: BlockParams,
    pub attn_norm: NormSite,
    pub ffn_norm: NormSite,
}

/// Output of a forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[batch * len, vocab]`.
    pub logits: Var,
    /// One entry per norm site in `Model::sites` order when taps are armed.
    pub taps: Vec<Option<SiteTap>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub head: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: NormSite,
    #[serde(skip)]
    rope: Option<Arc<RopeTable>>,
}

impl Model {
    pub fn new(config: &ModelConfig, norm: &NormConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        norm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| e.to_string())?;
        let mut init = |shape: Vec<usize>| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("shape and data agree")
        };
        let (d, hd) = (config.hidden, config.head_dim());
        let mut store = ParamStore::new();
        let embed = store.register("embed", ParamRole::Embedding, init(vec![config.vocab, d]));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let attn_norm = NormSite::new(norm, SiteRole::Attn, l, d, &format!("{p}.attn_norm"), &mut store);
            let mut mat = |name: &str, r: usize, c: usize, store: &mut ParamStore| {
                store.register(format!("{p}.{name}"), ParamRole::Matrix, init(vec![r, c]))
            };
            let wq = mat("wq", d, config.heads * hd, &mut store);
            let wk = mat("wk", d, config.kv_heads * hd, &mut store);
            let wv = mat("wv", d, config.kv_heads * hd, &mut store);
            let wo = mat("wo", config.heads * hd, d, &mut store);
            let ffn_norm = NormSite::new(norm, SiteRole::Ffn, l, d, &format!("{p}.ffn_norm"), &mut store);
            let w_gate = mat("w_gate", d, config.intermediate, &mut store);
            let w_up = mat("w_up", d, config.intermediate, &mut store);
            let w_down = mat("w_down", config.intermediate, d, &mut store);
            let (res_attn, res_ffn) = if config.residual_scaling {
                let scale = |name: &str, store: &mut ParamStore| {
                    store.register(
                        format!("{p}.{name}"),
                        ParamRole::ResidualScale,
                        Tensor::scalar(RESIDUAL_SCALE_INIT),
                    )
                };
                (Some(scale("res_attn", &mut store)), Some(scale("res_ffn", &mut store)))
            } else {
                (None, None)
            };
            blocks.push(Block {
                params: BlockParams {
                    wq,
                    wk,
                    wv,
                    wo,
                    w_gate,
                    w_up,
                    w_down,
                    res_attn,
                    res_ffn,
                },
                attn_norm,
                ffn_norm,
            });
        }
        let final_norm = NormSite::new(norm, SiteRole::Final, config.layers, d, "final_norm", &mut store);
        let head = store.register("head", ParamRole::Head, init(vec![d, config.vocab]));
        let mut model = Self {
            config: config.clone(),
            store,
            embed,
            head,
            blocks,
            final_norm,
            rope: None,
        };
        model.rope_table().map_err(|e| e.to_string())?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn rope_table(&mut self) -> Result<Arc<RopeTable>> {
        if self.rope.is_none() {
            let t = RopeTable::new(self.config.seq_len, self.config.head_dim(), self.config.rope_base)?;
            self.rope = Some(Arc::new(t));
        }
        Ok(Arc::clone(self.rope.as_ref().expect("initialized above")))
    }

    /// Norm sites in order: per block attn then ffn, then the final site.
    pub fn sites(&self) -> impl Iterator<Item = &NormSite> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.attn_norm, &b.ffn_norm])
            .chain(std::iter::once(&self.final_norm))
    }

    pub fn sites_mut(&mut self) -> impl Iterator<Item = &mut NormSite> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.attn_norm, &mut b.ffn_norm])
            .chain(std::iter::once(&mut self.final_norm))
    }

    /// Runs the decoder on `batch` sequences of `len` tokens laid out
    /// row-major in `tokens`. `vars` come from `self.store.bind(g)`.
    /// `first_microbatch` refreshes running scale statistics; `arm_taps`
    /// collects detached site diagnostics.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        tokens: &[usize],
        batch: usize,
        len: usize,
        first_microbatch: bool,
        arm_taps: bool,
    ) -> Result<Forward> {
        let cfg = self.config.clone();
        if tokens.len() != batch * len {
            return Err(TensorError::ShapeMismatch {
                op: "model.forward",
                left: vec![tokens.len()],
                right: vec![batch, len],
            });
        }
        if len == 0 || len > cfg.seq_len {
            return Err(TensorError::Invalid(format!(
                "sequence length {len} outside 1..={}",
                cfg.seq_len
            )));
        }
        let rope = self.rope_table()?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let shape = AttentionShape {
            batch,
            seq: len,
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim(),
        };
        let mut taps = Vec::new();
        let slot = |taps: &mut Vec<Option<SiteTap>>| {
            taps.push(None);
            arm_taps
        };

        let mut h = g.embedding(vars[self.embed.0], tokens)?;
        for block in &mut self.blocks {
            let p = block.params;
            let armed = slot(&mut taps);
            let x = block
                .attn_norm
                .forward(g, h, vars, first_microbatch, armed.then(|| taps.last_mut().unwrap()))?;
            let q = g.matmul(x, vars[p.wq.0])?;
            let k = g.matmul(x, vars[p.wk.0])?;
            let v = g.matmul(x, vars[p.wv.0])?;
            let q = g.rope(q, &rope, &positions)?;
            let k = g.rope(k, &rope, &positions)?;
            let a = g.causal_attention(q, k, v, shape)?;
            let mut o = g.matmul(a, vars[p.wo.0])?;
            if let Some(s) = p.res_attn {
                o = g.scale_by(o, vars[s.0])?;
            }
            h = g.add(h, o)?;

            let armed = slot(&mut taps);
            let x = block
                .ffn_norm
                .forward(g, h, vars, first_microbatch, armed.then(|| taps.last_mut().unwrap()))?;
            let gate = g.matmul(x, vars[p.w_gate.0])?;
            let gate = g.silu(gate);
            let up = g.matmul(x, vars[p.w_up.0])?;
            let act = g.mul(gate, up)?;
            let mut o = g.matmul(act, vars[p.w_down.0])?;
            if let Some(s) = p.res_ffn {
                o = g.scale_by(o, vars[s.0])?;
            }
            h = g.add(h, o)?;
        }
        let armed = slot(&mut taps);
        let x = self
            .final_norm
            .forward(g, h, vars, first_microbatch, armed.then(|| taps.last_mut().unwrap()))?;
        let logits = g.matmul(x, vars[self.head.0])?;
        if !arm_taps {
            taps.clear();
        }
        Ok(Forward { logits, taps })
    }

    /// Mean next-token cross-entropy over a `[batch, len + 1]` block.
    pub fn loss(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        block: &[usize],
        batch: usize,
        len: usize,
        first_microbatch: bool,
        arm_taps: bool,
    ) -> Result<(Var, Vec<Option<SiteTap>>)> {
        let (inputs, targets) = split_block(block, batch, len)?;
        let fwd = self.forward(g, vars, &inputs, batch, len, first_microbatch, arm_taps)?;
        let loss = g.softmax_cross_entropy(fwd.logits, &targets)?;
        Ok((loss, fwd.taps))
    }

    /// Root-sum-square Frobenius norms `(attention, mlp)` of a block.
    pub fn block_weight_norms(&self, layer: usize) -> (f64, f64) {
        let p = &self.blocks[layer].params;
        let rss = |ids: &[ParamId]| {
            ids.iter()
                .map(|id| self.store.get(*id).tensor.frobenius_norm().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        (rss(&p.attn_matrices()), rss(&p.mlp_matrices()))
    }
}

/// Splits a `[batch, len + 1]` block into inputs `[:, :-1]` and targets
/// `[:, 1:]`.
pub fn split_block(block: &[usize], batch: usize, len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if block.len() != batch * (len + 1) {
        return Err(TensorError::ShapeMismatch {
            op: "split_block",
            left: vec![block.len()],
            right: vec![batch, len + 1],
        });
    }
    let mut inputs = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    for row in block.chunks_exact(len + 1) {
        inputs.extend_from_slice(&row[..len]);
        targets.extend_from_slice(&row[1..]);
    }
    Ok((inputs, targets))
}
