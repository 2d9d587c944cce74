//! Named trainable parameters and their optimizer-group classification.

use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a parameter is for. Determines its optimizer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Hidden 2D weight (attention or MLP projection).
    Matrix,
    Embedding,
    Head,
    NormAlpha,
    NormShift,
    NormGain,
    NormBias,
    NormLogBeta,
    ResidualScale,
}

/// Optimizer routing class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Hidden 2D weights: Muon-eligible, weight-decayed under AdamW.
    Matrix2d,
    /// Everything else: embeddings, output head, normalizer scalars and
    /// vectors, residual scales.
    Other,
}

impl ParamRole {
    pub fn group(self) -> GroupKind {
        match self {
            ParamRole::Matrix => GroupKind::Matrix2d,
            _ => GroupKind::Other,
        }
    }

    pub fn is_alpha(self) -> bool {
        matches!(self, ParamRole::NormAlpha)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            tensor: tensor.with_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        self.params[id.0].tensor.data()
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.params[id.0].tensor.data()[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter on `g`, returning vars indexed by `ParamId`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.input(&p.tensor)).collect()
    }

    /// Adds the adjoints of bound vars into each parameter's grad slot.
    pub fn accumulate(&mut self, vars: &[Var], grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                p.tensor.accumulate_grad(g).expect("bound var matches parameter shape");
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}
