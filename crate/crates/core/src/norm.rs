//! Normalization sites: RMSNorm and the bounded pointwise family
//! (Derf, DyT, EMA-blended Derf, asinh-compressed Derf).
//!
//! Every site owns its learnable parameters through [`ParamId`]s in the
//! model's [`ParamStore`]; only the parameters its kind uses are
//! registered. The running scale estimate of `derf_ema` is plain state on
//! the site and never enters the autodiff graph.

use std::f64::consts::FRAC_2_SQRT_PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::{self, special, Graph, Result, Stat, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rmsnorm,
    Derf,
    Dyt,
    DerfEma,
    AsinhDerf,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [
        NormKind::Rmsnorm,
        NormKind::Derf,
        NormKind::Dyt,
        NormKind::DerfEma,
        NormKind::AsinhDerf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Rmsnorm => "rmsnorm",
            NormKind::Derf => "derf",
            NormKind::Dyt => "dyt",
            NormKind::DerfEma => "derf_ema",
            NormKind::AsinhDerf => "asinh_derf",
        }
    }

    /// The bounded nonlinearity, if any.
    pub fn nonlinearity(self) -> Option<Nonlinearity> {
        match self {
            NormKind::Rmsnorm => None,
            NormKind::Dyt => Some(Nonlinearity::Tanh),
            NormKind::Derf | NormKind::DerfEma | NormKind::AsinhDerf => Some(Nonlinearity::Erf),
        }
    }

    pub fn is_derf_family(self) -> bool {
        self.nonlinearity() == Some(Nonlinearity::Erf)
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown norm kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Erf,
    Tanh,
}

impl Nonlinearity {
    /// Argument magnitude beyond which the output exceeds 0.99 in magnitude.
    pub fn saturation_threshold(self) -> f64 {
        match self {
            Nonlinearity::Erf => special::erf_saturation_threshold(),
            Nonlinearity::Tanh => special::tanh_saturation_threshold(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    Attn,
    Ffn,
    Final,
}

impl SiteRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteRole::Attn => "attn",
            SiteRole::Ffn => "ffn",
            SiteRole::Final => "final",
        }
    }
}

/// Reduction scope for the running scale statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaScope {
    /// Population std over the whole `[tokens, hidden]` activation.
    Tensor,
    /// Mean over tokens of the per-token population std.
    PerTokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub kind: NormKind,
    /// Initial alpha for the Derf family.
    pub alpha: f64,
    /// Initial learnable shift `s` for the Derf family.
    pub shift: f64,
    pub dyt_alpha_attn: f64,
    /// DyT alpha for FFN sites and the final site.
    pub dyt_alpha_ffn: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub sigma_init: f64,
    pub sigma_floor: f64,
    pub sigma_scope: SigmaScope,
    pub eps: f64,
    /// Initial `log(beta)` for asinh compression.
    pub asinh_log_beta: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            kind: NormKind::Rmsnorm,
            alpha: 0.5,
            shift: 0.0,
            dyt_alpha_attn: 0.5,
            dyt_alpha_ffn: 0.3,
            lambda: 0.9,
            momentum: 0.5,
            sigma_init: 1.0,
            sigma_floor: 1e-6,
            sigma_scope: SigmaScope::Tensor,
            eps: 1e-6,
            asinh_log_beta: 0.0,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("norm.lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(format!("norm.momentum must lie in [0, 1], got {}", self.momentum));
        }
        if self.sigma_floor <= 0.0 || self.sigma_init < self.sigma_floor {
            return Err("norm.sigma_floor must be positive and not exceed sigma_init".into());
        }
        if self.eps < 0.0 {
            return Err("norm.eps must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteParams {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
    pub alpha: Option<ParamId>,
    pub shift: Option<ParamId>,
    pub log_beta: Option<ParamId>,
}

/// What the pre-nonlinearity std is measured on.
enum PreNonlin {
    /// `c * x` for a constant `c`.
    Scaled(f64),
    Node(Var),
}

/// Detached measurements captured from one forward pass of a site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTap {
    /// Pre-nonlinearity argument, e.g. `alpha * x + s`. Empty for RMSNorm.
    pub argument: Vec<f64>,
    pub input_rms: f64,
    /// Std of the input after blending/compression but before alpha and
    /// shift. `None` for RMSNorm.
    pub pre_nonlin_std: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma_hat: Option<f64>,
}

/// Factor `1 - lambda + lambda / sigma_hat` applied to alpha by the blend.
pub fn blend_factor(lambda: f64, sigma_hat: f64) -> f64 {
    1.0 - lambda + lambda / sigma_hat
}

/// `alpha * (1 - lambda + lambda / sigma_hat)`.
pub fn effective_alpha(alpha: f64, lambda: f64, sigma_hat: f64) -> f64 {
    alpha * blend_factor(lambda, sigma_hat)
}

/// One step of the running scale recurrence.
pub fn ema_update(prev: f64, momentum: f64, std: f64) -> f64 {
    (1.0 - momentum) * prev + momentum * std
}

/// Closed-form `dL/dalpha` for a Derf-family site with argument
/// `alpha * x + s`, given the upstream adjoint of the site output.
/// `x` and `upstream` are `[tokens, hidden]`; `gamma` is `[hidden]`.
pub fn alpha_gradient(x: &[f64], upstream: &[f64], gamma: &[f64], alpha: f64, shift: f64) -> f64 {
    let h = gamma.len();
    x.iter()
        .zip(upstream)
        .enumerate()
        .map(|(i, (&xi, &ui))| {
            let u = alpha * xi + shift;
            ui * gamma[i % h] * FRAC_2_SQRT_PI * (-u * u).exp() * xi
        })
        .sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormSite {
    kind: NormKind,
    role: SiteRole,
    layer: usize,
    hidden: usize,
    params: SiteParams,
    sigma_hat: f64,
    lambda: f64,
    momentum: f64,
    sigma_floor: f64,
    sigma_scope: SigmaScope,
    eps: f64,
    floor_clamps: u64,
}

impl NormSite {
    /// Creates a site and registers its active parameters under `prefix`.
    pub fn new(
        cfg: &NormConfig,
        role: SiteRole,
        layer: usize,
        hidden: usize,
        prefix: &str,
        store: &mut ParamStore,
    ) -> Self {
        let kind = cfg.kind;
        let scalar = |v: f64| Tensor::scalar(v);
        let gamma = store.register(
            format!("{prefix}.gamma"),
            ParamRole::NormGain,
            Tensor::filled(vec![hidden], 1.0),
        );
        let bounded = kind != NormKind::Rmsnorm;
        let beta = bounded
            .then(|| store.register(format!("{prefix}.beta"), ParamRole::NormBias, Tensor::zeros(vec![hidden])));
        let alpha_init = match (kind, role) {
            (NormKind::Dyt, SiteRole::Attn) => cfg.dyt_alpha_attn,
            (NormKind::Dyt, _) => cfg.dyt_alpha_ffn,
            _ => cfg.alpha,
        };
        let alpha = bounded.then(|| store.register(format!("{prefix}.alpha"), ParamRole::NormAlpha, scalar(alpha_init)));
        let shift = kind
            .is_derf_family()
            .then(|| store.register(format!("{prefix}.shift"), ParamRole::NormShift, scalar(cfg.shift)));
        let log_beta = (kind == NormKind::AsinhDerf).then(|| {
            store.register(
                format!("{prefix}.log_beta"),
                ParamRole::NormLogBeta,
                scalar(cfg.asinh_log_beta),
            )
        });
        Self {
            kind,
            role,
            layer,
            hidden,
            params: SiteParams {
                gamma,
                beta,
                alpha,
                shift,
                log_beta,
            },
            sigma_hat: cfg.sigma_init,
            lambda: cfg.lambda,
            momentum: cfg.momentum,
            sigma_floor: cfg.sigma_floor,
            sigma_scope: cfg.sigma_scope,
            eps: cfg.eps,
            floor_clamps: 0,
        }
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn role(&self) -> SiteRole {
        self.role
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &SiteParams {
        &self.params
    }

    pub fn sigma_hat(&self) -> f64 {
        self.sigma_hat
    }

    pub fn set_sigma_hat(&mut self, v: f64) {
        self.sigma_hat = v.max(self.sigma_floor);
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of times the running scale hit its floor.
    pub fn floor_clamps(&self) -> u64 {
        self.floor_clamps
    }

    fn check_hidden(&self, g: &Graph, x: Var) -> Result<()> {
        match g.shape(x) {
            &[_, h] if h == self.hidden => Ok(()),
            other => Err(TensorError::ShapeMismatch {
                op: "norm_site",
                left: other.to_vec(),
                right: vec![self.hidden],
            }),
        }
    }

    fn var(vars: &[Var], id: Option<ParamId>) -> Var {
        vars[id.expect("kind-specific parameter is registered").0]
    }

    /// Runs the site. `vars` are the bound parameter vars indexed by
    /// `ParamId`. `update_sigma` refreshes the running scale first (only
    /// meaningful for `derf_ema`). When `tap` is given it receives detached
    /// diagnostics.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: Var,
        vars: &[Var],
        update_sigma: bool,
        tap: Option<&mut Option<SiteTap>>,
    ) -> Result<Var> {
        self.check_hidden(g, x)?;
        let (out, argument, pre) = match self.kind {
            NormKind::Rmsnorm => (self.rmsnorm_forward(g, x, vars)?, None, None),
            NormKind::Derf => {
                let (o, a) = self.derf_forward(g, x, vars)?;
                (o, Some(a), Some(PreNonlin::Scaled(1.0)))
            }
            NormKind::Dyt => {
                let (o, a) = self.dyt_forward(g, x, vars)?;
                (o, Some(a), Some(PreNonlin::Scaled(1.0)))
            }
            NormKind::DerfEma => {
                let (o, a) = self.derf_ema_forward(g, x, vars, update_sigma)?;
                let c = blend_factor(self.lambda, self.sigma_hat);
                (o, Some(a), Some(PreNonlin::Scaled(c)))
            }
            NormKind::AsinhDerf => {
                let (o, a, c) = self.asinh_derf_forward(g, x, vars)?;
                (o, Some(a), Some(PreNonlin::Node(c)))
            }
        };
        if let Some(slot) = tap {
            let xv = g.value(x);
            let input_rms = tensor::reduce_stats(xv, Stat::MeanSquare)?.sqrt();
            let pre_nonlin_std = match pre {
                Some(PreNonlin::Node(v)) => Some(tensor::reduce_stats(g.value(v), Stat::StdPopulation)?),
                Some(PreNonlin::Scaled(c)) => Some(c.abs() * tensor::reduce_stats(xv, Stat::StdPopulation)?),
                None => None,
            };
            *slot = Some(SiteTap {
                argument: argument.map(|a| g.value(a).to_vec()).unwrap_or_default(),
                input_rms,
                pre_nonlin_std,
                alpha: self.params.alpha.map(|id| g.value(vars[id.0])[0]),
                sigma_hat: (self.kind == NormKind::DerfEma).then_some(self.sigma_hat),
            });
        }
        Ok(out)
    }

    /// `gamma * x / sqrt(mean(x^2) + eps)` per token; gain only.
    pub fn rmsnorm_forward(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<Var> {
        let normed = g.rms_norm_rows(x, self.eps)?;
        g.mul_row(normed, vars[self.params.gamma.0])
    }

    fn bounded_output(&self, g: &mut Graph, squashed: Var, vars: &[Var]) -> Result<Var> {
        let scaled = g.mul_row(squashed, vars[self.params.gamma.0])?;
        g.add_row(scaled, Self::var(vars, self.params.beta))
    }

    /// `gamma * erf(alpha * x + s) + beta`; also returns the erf argument.
    pub fn derf_forward(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<(Var, Var)> {
        let alpha = Self::var(vars, self.params.alpha);
        let shift = Self::var(vars, self.params.shift);
        let arg = g.affine(x, alpha, shift)?;
        let e = g.erf(arg);
        Ok((self.bounded_output(g, e, vars)?, arg))
    }

    /// `gamma * tanh(alpha * x) + beta`; also returns the tanh argument.
    pub fn dyt_forward(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<(Var, Var)> {
        let alpha = Self::var(vars, self.params.alpha);
        let arg = g.scale_by(x, alpha)?;
        let t = g.tanh(arg);
        Ok((self.bounded_output(g, t, vars)?, arg))
    }

    /// EMA-blended Derf in factored form:
    /// `gamma * erf(alpha * (1 - lambda + lambda / sigma_hat) * x + s) + beta`.
    ///
    /// With `is_first_microbatch` the running scale is refreshed from the
    /// detached std of `x` before use.
    pub fn derf_ema_forward(&mut self, g: &mut Graph, x: Var, vars: &[Var], is_first_microbatch: bool) -> Result<(Var, Var)> {
        if is_first_microbatch {
            let std = self.scale_statistic(g.value(x))?;
            let next = ema_update(self.sigma_hat, self.momentum, std);
            if !(next >= self.sigma_floor) {
                self.floor_clamps += 1;
                log::warn!(
                    "layer {} {} site: running scale {next} clamped to floor {}",
                    self.layer,
                    self.role.as_str(),
                    self.sigma_floor
                );
                self.sigma_hat = self.sigma_floor;
            } else {
                self.sigma_hat = next;
            }
        }
        let alpha = Self::var(vars, self.params.alpha);
        let shift = Self::var(vars, self.params.shift);
        let alpha_eff = g.scale(alpha, blend_factor(self.lambda, self.sigma_hat));
        let arg = g.affine(x, alpha_eff, shift)?;
        let e = g.erf(arg);
        Ok((self.bounded_output(g, e, vars)?, arg))
    }

    fn scale_statistic(&self, x: &[f64]) -> Result<f64> {
        match self.sigma_scope {
            SigmaScope::Tensor => tensor::reduce_stats(x, Stat::StdPopulation),
            SigmaScope::PerTokenMean => {
                let rows: Vec<f64> = x
                    .chunks_exact(self.hidden)
                    .map(|r| tensor::reduce_stats(r, Stat::StdPopulation))
                    .collect::<Result<_>>()?;
                tensor::reduce_stats(&rows, Stat::Mean)
            }
        }
    }

    /// `gamma * erf(alpha * asinh(beta x) / beta + s) + beta_out` with
    /// `beta = exp(log_beta)`. Returns output, erf argument and the
    /// compressed input.
    pub fn asinh_derf_forward(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<(Var, Var, Var)> {
        let alpha = Self::var(vars, self.params.alpha);
        let shift = Self::var(vars, self.params.shift);
        let compressed = g.asinh_compress(x, Self::var(vars, self.params.log_beta))?;
        let arg = g.affine(compressed, alpha, shift)?;
        let e = g.erf(arg);
        Ok((self.bounded_output(g, e, vars)?, arg, compressed))
    }
}
