//! AdamW, Muon and global-norm gradient clipping over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::{GroupKind, ParamId, ParamStore};
use crate::tensor::kernels::gemm;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient norm {0}")]
    NonFiniteGradNorm(f64),
    #[error("non-finite update for parameter '{0}'")]
    NonFiniteUpdate(String),
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Muon,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 2] = [OptimizerKind::Adamw, OptimizerKind::Muon];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Muon => "muon",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown optimizer '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamwConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to hidden 2D weights only.
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuonConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub ns_steps: usize,
    pub ns_coefficients: [f64; 3],
    /// Multiply updates by `sqrt(max(rows, cols) / min(rows, cols))`.
    pub shape_scale: bool,
    pub weight_decay: f64,
    /// AdamW learning rate for parameters Muon does not handle.
    pub fallback_lr: f64,
    pub fallback_weight_decay: f64,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.95,
            nesterov: true,
            ns_steps: 5,
            ns_coefficients: NS_COEFFICIENTS,
            shape_scale: true,
            weight_decay: 0.0,
            fallback_lr: 3e-4,
            fallback_weight_decay: 0.0,
        }
    }
}

pub const NS_COEFFICIENTS: [f64; 3] = [3.4445, -4.7750, 2.0315];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
    /// Replaces the weight decay of hidden 2D weights under either optimizer.
    pub weight_decay_override: Option<f64>,
    /// Learning-rate multiplier for normalizer alpha parameters.
    pub alpha_lr_multiplier: f64,
    pub adamw: AdamwConfig,
    pub muon: MuonConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            max_grad_norm: 1.0,
            weight_decay_override: None,
            alpha_lr_multiplier: 1.0,
            adamw: AdamwConfig::default(),
            muon: MuonConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let a = &self.adamw;
        let m = &self.muon;
        let bad = |msg: &str| Err(OptimError::Config(msg.into()));
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adamw betas must lie in [0, 1)");
        }
        if a.lr < 0.0 || m.lr < 0.0 || m.fallback_lr < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if a.eps < 0.0 {
            return bad("adamw eps must be non-negative");
        }
        if !(0.0..1.0).contains(&m.momentum) {
            return bad("muon momentum must lie in [0, 1)");
        }
        if self.max_grad_norm < 0.0 || self.alpha_lr_multiplier < 0.0 {
            return bad("max_grad_norm and alpha_lr_multiplier must be non-negative");
        }
        Ok(())
    }
}

/// Scale factor that brings a gradient of global norm `norm` under `max_norm`.
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && max_norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    pub norm: f64,
    pub factor: f64,
}

/// Global L2 norm over every populated gradient in `store`.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`
/// (`0` disables) and returns the norm and factor applied.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<ClipOutcome, OptimError> {
    let norm = global_grad_norm(store);
    if !norm.is_finite() {
        return Err(OptimError::NonFiniteGradNorm(norm));
    }
    let factor = clip_factor(norm, max_norm);
    if factor != 1.0 {
        for (_, p) in store.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    Ok(ClipOutcome { norm, factor })
}

/// Result of [`newton_schulz`].
#[derive(Debug, Clone, PartialEq)]
pub struct Orthogonalized {
    /// `rows x cols`, row-major.
    pub u: Vec<f64>,
    /// Set when the input was zero (or numerically so); `u` is then zero.
    pub degenerate: bool,
}

/// Approximates the orthogonal polar factor of the `rows x cols` matrix `g`
/// with the quintic Newton-Schulz iteration
/// `X <- a X + (b A + c A^2) X`, `A = X X^T`, after Frobenius normalization.
/// Works on the wide orientation, transposing when `rows > cols`.
pub fn newton_schulz(g: &[f64], rows: usize, cols: usize, steps: usize, coeffs: [f64; 3]) -> Orthogonalized {
    assert_eq!(g.len(), rows * cols, "newton_schulz: data does not match shape");
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-30) {
        return Orthogonalized {
            u: vec![0.0; g.len()],
            degenerate: true,
        };
    }
    let transpose = rows > cols;
    let (m, n) = if transpose { (cols, rows) } else { (rows, cols) };
    let inv = 1.0 / (norm + 1e-7);
    let mut x = vec![0.0; m * n];
    if transpose {
        for r in 0..rows {
            for c in 0..cols {
                x[c * n + r] = g[r * cols + c] * inv;
            }
        }
    } else {
        x.iter_mut().zip(g).for_each(|(d, s)| *d = s * inv);
    }
    let [a, b, c] = coeffs;
    let mut gram = vec![0.0; m * m];
    let mut poly = vec![0.0; m * m];
    let mut next = vec![0.0; m * n];
    for _ in 0..steps {
        // gram = X X^T
        gemm(m, n, m, 1.0, &x, (n, 1), &x, (1, n), 0.0, &mut gram, (m, 1));
        // poly = b * gram + c * gram^2
        poly.iter_mut().zip(&gram).for_each(|(p, g)| *p = b * g);
        gemm(m, m, m, c, &gram, (m, 1), &gram, (m, 1), 1.0, &mut poly, (m, 1));
        // next = a * X + poly X
        next.iter_mut().zip(&x).for_each(|(d, s)| *d = a * s);
        gemm(m, m, n, 1.0, &poly, (m, 1), &x, (n, 1), 1.0, &mut next, (n, 1));
        std::mem::swap(&mut x, &mut next);
    }
    let u = if transpose {
        let mut u = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                u[r * cols + c] = x[c * n + r];
            }
        }
        u
    } else {
        x
    };
    Orthogonalized { u, degenerate: false }
}

/// How a parameter is updated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Route {
    Muon { lr: f64, weight_decay: f64 },
    Adamw { lr: f64, weight_decay: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AdamSlot {
    #[serde(with = "crate::codec::f64_vec")]
    m: Vec<f64>,
    #[serde(with = "crate::codec::f64_vec")]
    v: Vec<f64>,
}

/// Per-step summary for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub muon_params: usize,
    pub adamw_params: usize,
    /// Newton-Schulz calls that received a zero matrix.
    pub degenerate: usize,
}

/// Combined optimizer: routes each parameter to Muon or AdamW by group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    config: OptimConfig,
    step: u64,
    adam: Vec<Option<AdamSlot>>,
    muon: Vec<Option<MomentumSlot>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct MomentumSlot(#[serde(with = "crate::codec::f64_vec")] Vec<f64>);

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            adam: Vec::new(),
            muon: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Peak route for a parameter, before schedule scaling.
    pub fn route(&self, store: &ParamStore, id: ParamId) -> Route {
        let cfg = &self.config;
        let p = store.get(id);
        let is_matrix = p.role.group() == GroupKind::Matrix2d && p.tensor.dims2().is_some();
        let alpha_mult = if p.role.is_alpha() { cfg.alpha_lr_multiplier } else { 1.0 };
        match (cfg.kind, is_matrix) {
            (OptimizerKind::Muon, true) => Route::Muon {
                lr: cfg.muon.lr,
                weight_decay: cfg.weight_decay_override.unwrap_or(cfg.muon.weight_decay),
            },
            (OptimizerKind::Muon, false) => Route::Adamw {
                lr: cfg.muon.fallback_lr * alpha_mult,
                weight_decay: cfg.muon.fallback_weight_decay,
            },
            (OptimizerKind::Adamw, true) => Route::Adamw {
                lr: cfg.adamw.lr,
                weight_decay: cfg.weight_decay_override.unwrap_or(cfg.adamw.weight_decay),
            },
            (OptimizerKind::Adamw, false) => Route::Adamw {
                lr: cfg.adamw.lr * alpha_mult,
                weight_decay: 0.0,
            },
        }
    }

    /// Applies one update using the gradients stored on each parameter.
    /// `lr_factor` scales every learning rate (the schedule multiplier).
    /// Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, lr_factor: f64) -> Result<StepStats, OptimError> {
        self.step += 1;
        self.adam.resize_with(store.len(), || None);
        self.muon.resize_with(store.len(), || None);
        let t = self.step as i32;
        let mut stats = StepStats::default();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let route = self.route(store, id);
            let p = store.get_mut(id);
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            match route {
                Route::Adamw { lr, weight_decay } => {
                    let a = &self.config.adamw;
                    let slot = self.adam[id.0].get_or_insert_with(|| AdamSlot {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                    adamw_update(
                        p.tensor.data_mut(),
                        &grad,
                        slot,
                        AdamwStep {
                            lr: lr * lr_factor,
                            beta1: a.beta1,
                            beta2: a.beta2,
                            eps: a.eps,
                            weight_decay,
                            t,
                        },
                    );
                    stats.adamw_params += 1;
                }
                Route::Muon { lr, weight_decay } => {
                    let (rows, cols) = p.tensor.dims2().expect("muon routes only matrices");
                    let m = &self.config.muon;
                    let buf = &mut self.muon[id.0].get_or_insert_with(|| MomentumSlot(vec![0.0; grad.len()])).0;
                    for (b, g) in buf.iter_mut().zip(&grad) {
                        *b = m.momentum * *b + g;
                    }
                    let dir: Vec<f64> = if m.nesterov {
                        grad.iter().zip(buf.iter()).map(|(g, b)| g + m.momentum * b).collect()
                    } else {
                        buf.clone()
                    };
                    let ortho = newton_schulz(&dir, rows, cols, m.ns_steps, m.ns_coefficients);
                    if ortho.degenerate {
                        stats.degenerate += 1;
                    }
                    let scale = if m.shape_scale { shape_scale(rows, cols) } else { 1.0 };
                    let lr = lr * lr_factor;
                    let decay = 1.0 - lr * weight_decay;
                    for (w, u) in p.tensor.data_mut().iter_mut().zip(&ortho.u) {
                        *w = *w * decay - lr * scale * u;
                    }
                    stats.muon_params += 1;
                }
            }
            if p.tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteUpdate(p.name.clone()));
            }
        }
        Ok(stats)
    }
}

/// `sqrt(max(rows, cols) / min(rows, cols))`.
pub fn shape_scale(rows: usize, cols: usize) -> f64 {
    (rows.max(cols) as f64 / rows.min(cols) as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
struct AdamwStep {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
}

fn adamw_update(w: &mut [f64], g: &[f64], slot: &mut AdamSlot, s: AdamwStep) {
    let bc1 = 1.0 - s.beta1.powi(s.t);
    let bc2 = 1.0 - s.beta2.powi(s.t);
    let decay = 1.0 - s.lr * s.weight_decay;
    for i in 0..w.len() {
        slot.m[i] = s.beta1 * slot.m[i] + (1.0 - s.beta1) * g[i];
        slot.v[i] = s.beta2 * slot.v[i] + (1.0 - s.beta2) * g[i] * g[i];
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        w[i] = w[i] * decay - s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
}
