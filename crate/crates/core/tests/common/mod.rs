//! Shared fixtures for the integration and acceptance targets.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use normopt::harness::{CellResult, RunConfig};
use normopt::optim::OptimizerKind;
use normopt::tensor::gradcheck::check_gradients;
use normopt::tensor::{AttentionShape, Graph, Result, RopeTable, Stat, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(x * w)` for a fixed random weight `w`, so adjoints are not all ones.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(x).len();
    let w = g.constant(g.shape(x).to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

pub struct CaseResult {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
}

/// Runs a finite-difference check of every differentiable op on `cases`
/// randomly drawn small shapes.
pub fn gradcheck_suite(cases: usize, seed: u64) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in 0..cases {
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(1..5);
        let shape = vec![rows, cols];
        let ws = case as u64;
        let x = random_tensor(&mut rng, shape.clone(), 1.5);
        let y = random_tensor(&mut rng, shape.clone(), 1.5);
        let s = random_tensor(&mut rng, vec![1], 1.0);
        let b = random_tensor(&mut rng, vec![1], 1.0);
        let row = random_tensor(&mut rng, vec![cols], 1.0);
        let mut push = |op: &'static str, shape: Vec<usize>, r: Result<normopt::tensor::gradcheck::GradCheckReport>| {
            out.push(CaseResult {
                op,
                shape,
                max_rel_error: r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY),
            });
        };
        macro_rules! unary {
            ($name:literal, $f:ident) => {
                push($name, shape.clone(), check_gradients(&[x.clone()], FD_STEP, |g, v| {
                    let o = g.$f(v[0]);
                    weighted_sum(g, o, ws)
                }));
            };
        }
        unary!("erf", erf);
        unary!("tanh", tanh);
        unary!("asinh", asinh);
        unary!("silu", silu);
        push("add", shape.clone(), check_gradients(&[x.clone(), y.clone()], FD_STEP, |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));
        push("mul", shape.clone(), check_gradients(&[x.clone(), y.clone()], FD_STEP, |g, v| {
            let o = g.mul(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));
        push("scale", shape.clone(), check_gradients(&[x.clone()], FD_STEP, |g, v| {
            let o = g.scale(v[0], -1.7);
            weighted_sum(g, o, ws)
        }));
        push("scale_by", shape.clone(), check_gradients(&[x.clone(), s.clone()], FD_STEP, |g, v| {
            let o = g.scale_by(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));
        push("affine", shape.clone(), check_gradients(&[x.clone(), s.clone(), b.clone()], FD_STEP, |g, v| {
            let o = g.affine(v[0], v[1], v[2])?;
            weighted_sum(g, o, ws)
        }));
        push("add_row", shape.clone(), check_gradients(&[x.clone(), row.clone()], FD_STEP, |g, v| {
            let o = g.add_row(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));
        push("mul_row", shape.clone(), check_gradients(&[x.clone(), row.clone()], FD_STEP, |g, v| {
            let o = g.mul_row(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));
        push("asinh_compress", shape.clone(), check_gradients(&[x.clone(), s.clone()], FD_STEP, |g, v| {
            let o = g.asinh_compress(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));
        push("rms_norm_rows", shape.clone(), check_gradients(&[x.clone()], FD_STEP, |g, v| {
            let o = g.rms_norm_rows(v[0], 1e-6)?;
            weighted_sum(g, o, ws)
        }));
        for (name, stat) in [("mean", Stat::Mean), ("mean_square", Stat::MeanSquare), ("std", Stat::StdPopulation)] {
            push(name, shape.clone(), check_gradients(&[x.clone()], FD_STEP, |g, v| g.reduce(v[0], stat)));
        }
        push("sum", shape.clone(), check_gradients(&[x.clone()], FD_STEP, |g, v| Ok(g.sum(v[0]))));

        let inner = rng.random_range(1..4);
        let a = random_tensor(&mut rng, vec![rows, inner], 1.0);
        let bm = random_tensor(&mut rng, vec![inner, cols], 1.0);
        push("matmul", vec![rows, inner, cols], check_gradients(&[a, bm], FD_STEP, |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o, ws)
        }));

        let vocab = cols + 1;
        let table = random_tensor(&mut rng, vec![vocab, 3], 1.0);
        let ids: Vec<usize> = (0..rows + 1).map(|_| rng.random_range(0..vocab)).collect();
        push("embedding", vec![vocab, 3], check_gradients(&[table], FD_STEP, |g, v| {
            let o = g.embedding(v[0], &ids)?;
            weighted_sum(g, o, ws)
        }));

        let logits = random_tensor(&mut rng, vec![rows, vocab], 2.0);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
        push("softmax_cross_entropy", vec![rows, vocab], check_gradients(&[logits], FD_STEP, |g, v| {
            g.softmax_cross_entropy(v[0], &targets)
        }));

        let head_dim = 2 * rng.random_range(1..3);
        let heads = 2;
        let kv_heads = if rng.random_bool(0.5) { 1 } else { 2 };
        let batch = rng.random_range(1..3);
        let seq = rng.random_range(1..4);
        let table = Arc::new(RopeTable::new(8, head_dim, 10_000.0).unwrap());
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let xr = random_tensor(&mut rng, vec![batch * seq, heads * head_dim], 1.0);
        push("rope", vec![batch * seq, heads * head_dim], check_gradients(&[xr], FD_STEP, |g, v| {
            let o = g.rope(v[0], &table, &positions)?;
            weighted_sum(g, o, ws)
        }));
        let shape_a = AttentionShape {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        };
        let q = random_tensor(&mut rng, vec![batch * seq, heads * head_dim], 1.0);
        let k = random_tensor(&mut rng, vec![batch * seq, kv_heads * head_dim], 1.0);
        let vv = random_tensor(&mut rng, vec![batch * seq, kv_heads * head_dim], 1.0);
        push("causal_attention", vec![batch, seq, heads, kv_heads, head_dim], check_gradients(&[q, k, vv], FD_STEP, |g, v| {
            let o = g.causal_attention(v[0], v[1], v[2], shape_a)?;
            weighted_sum(g, o, ws)
        }));
    }
    out
}

/// Per-seed final losses (seeds 42, 43, 44) of the published runs.
pub const PUBLISHED_SEED_LOSSES: [(&str, OptimizerKind, [f64; 3]); 10] = [
    ("rmsnorm", OptimizerKind::Muon, [3.321, 3.319, 3.325]),
    ("rmsnorm", OptimizerKind::Adamw, [3.874, 3.888, 3.888]),
    ("dyt", OptimizerKind::Muon, [3.545, 3.538, 3.541]),
    ("dyt", OptimizerKind::Adamw, [4.204, 4.192, 4.207]),
    ("derf_ema_l0.9", OptimizerKind::Muon, [3.476, 3.476, 3.477]),
    ("derf_ema_l0.7", OptimizerKind::Muon, [3.502, 3.503, 3.507]),
    ("derf", OptimizerKind::Adamw, [4.189, 4.192, 4.194]),
    ("derf", OptimizerKind::Muon, [4.271, 4.306, 4.290]),
    ("derf_a0.3", OptimizerKind::Muon, [3.513, 3.510, 3.510]),
    ("derf_a0.3", OptimizerKind::Adamw, [4.259, 4.228, 4.256]),
];

pub fn published_results() -> Vec<CellResult> {
    PUBLISHED_SEED_LOSSES
        .iter()
        .flat_map(|(label, opt, losses)| {
            [42u64, 43, 44].into_iter().zip(losses).map(|(seed, &l)| CellResult {
                label: label.to_string(),
                optimizer: *opt,
                seed,
                loss: Some(l),
            })
        })
        .collect()
}

/// A model and schedule small enough to train in well under a second.
/// Writes a synthetic corpus into `dir` on first use.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let corpus = dir.join("corpus.txt");
    if !corpus.exists() {
        std::fs::write(&corpus, normopt::corpus::synthetic_text(7, 120_000)).unwrap();
    }
    let mut cfg = RunConfig::default();
    cfg.model.layers = 1;
    cfg.model.hidden = 16;
    cfg.model.heads = 2;
    cfg.model.kv_heads = 1;
    cfg.model.intermediate = 32;
    cfg.model.seq_len = 16;
    cfg.optim.adamw.lr = 3e-3;
    cfg.optim.muon.fallback_lr = 3e-3;
    cfg.train.steps = 30;
    cfg.train.warmup = 3;
    cfg.train.micro_batch = 4;
    cfg.train.grad_accum = 2;
    cfg.train.eval_every = 10;
    cfg.train.eval_tokens = 512;
    cfg.train.diag_every = 10;
    cfg.train.checkpoint_every = 10;
    cfg.data.corpus = Some(corpus);
    cfg
}
