//! Seed aggregation, gaps to a reference normalizer, interactions and
//! percentile bootstrap intervals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Percentile bootstrap of an arbitrary statistic over `n` units. `stat`
/// receives the resampled unit indices.
pub fn bootstrap_ci_by<F>(n: usize, cfg: BootstrapConfig, stat: F) -> Result<Interval, HarnessError>
where
    F: Fn(&[usize]) -> f64,
{
    if n < 2 {
        return Err(HarnessError::Stats(format!("bootstrap needs at least 2 values, got {n}")));
    }
    if cfg.resamples == 0 || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(HarnessError::Stats("bootstrap needs resamples > 0 and confidence in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..cfg.resamples)
        .map(|_| {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.confidence) / 2.0;
    Ok(Interval {
        lo: quantile(&stats, tail),
        hi: quantile(&stats, 1.0 - tail),
    })
}

/// Percentile bootstrap CI of the mean of `values`.
pub fn bootstrap_ci(values: &[f64], cfg: BootstrapConfig) -> Result<Interval, HarnessError> {
    bootstrap_ci_by(values.len(), cfg, |idx| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Final loss of one run. `loss` is `None` when the run is missing or
/// produced no usable value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
    pub losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub label: String,
    pub optimizer: OptimizerKind,
    /// Mean loss of the cell minus mean loss of the reference cell.
    pub gap: f64,
    /// Seed-paired differences.
    pub per_seed: Vec<f64>,
    pub ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub label: String,
    pub muon_gap: f64,
    pub adamw_gap: f64,
    /// `muon_gap - adamw_gap`.
    pub interaction: f64,
    pub per_seed: Vec<f64>,
    pub ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub reference: String,
    pub cells: Vec<CellSummary>,
    pub gaps: Vec<Gap>,
    pub interactions: Vec<Interaction>,
    pub complete: bool,
    pub missing: Vec<String>,
}

impl GapReport {
    pub fn cell(&self, label: &str, optimizer: OptimizerKind) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.label == label && c.optimizer == optimizer)
    }

    pub fn gap(&self, label: &str, optimizer: OptimizerKind) -> Option<&Gap> {
        self.gaps.iter().find(|g| g.label == label && g.optimizer == optimizer)
    }

    pub fn interaction(&self, label: &str) -> Option<&Interaction> {
        self.interactions.iter().find(|i| i.label == label)
    }
}

/// Aggregates per-seed results into means, gaps against `reference` under
/// each optimizer, and interactions for labels present under both
/// optimizers. Bootstrap intervals are attached when `bootstrap` is given
/// and at least two seeds pair up.
pub fn gap_report(results: &[CellResult], reference: &str, bootstrap: Option<BootstrapConfig>) -> GapReport {
    let mut missing = Vec::new();
    let mut by_cell: BTreeMap<(String, OptimizerKind), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results {
        let cell = by_cell.entry((r.label.clone(), r.optimizer)).or_default();
        match r.loss {
            Some(l) if l.is_finite() => {
                cell.insert(r.seed, l);
            }
            _ => missing.push(format!("{}+{} seed {}", r.label, r.optimizer, r.seed)),
        }
    }
    let cells: Vec<CellSummary> = by_cell
        .iter()
        .filter(|(_, seeds)| !seeds.is_empty())
        .map(|((label, opt), seeds)| {
            let losses: Vec<f64> = seeds.values().copied().collect();
            CellSummary {
                label: label.clone(),
                optimizer: *opt,
                seeds: seeds.keys().copied().collect(),
                mean: mean(&losses),
                std: sample_std(&losses),
                losses,
            }
        })
        .collect();
    let ci = |values: &[f64]| bootstrap.and_then(|b| bootstrap_ci(values, b).ok());

    let mut gaps = Vec::new();
    for ((label, opt), seeds) in &by_cell {
        if label == reference || seeds.is_empty() {
            continue;
        }
        let Some(reference_seeds) = by_cell.get(&(reference.to_string(), *opt)).filter(|s| !s.is_empty()) else {
            missing.push(format!("{reference}+{opt} (reference for {label})"));
            continue;
        };
        let per_seed: Vec<f64> = seeds
            .iter()
            .filter_map(|(s, l)| reference_seeds.get(s).map(|r| l - r))
            .collect();
        let gap = mean(&seeds.values().copied().collect::<Vec<_>>())
            - mean(&reference_seeds.values().copied().collect::<Vec<_>>());
        gaps.push(Gap {
            label: label.clone(),
            optimizer: *opt,
            gap,
            ci: ci(&per_seed),
            per_seed,
        });
    }

    let mut interactions = Vec::new();
    let labels: Vec<&String> = gaps.iter().map(|g| &g.label).collect();
    let mut seen = Vec::new();
    for label in labels {
        if seen.contains(&label) {
            continue;
        }
        seen.push(label);
        let find = |o| gaps.iter().find(|g| &g.label == label && g.optimizer == o);
        match (find(OptimizerKind::Muon), find(OptimizerKind::Adamw)) {
            (Some(m), Some(a)) => {
                let per_seed = paired_interaction(&by_cell, reference, label);
                interactions.push(Interaction {
                    label: label.clone(),
                    muon_gap: m.gap,
                    adamw_gap: a.gap,
                    interaction: m.gap - a.gap,
                    ci: ci(&per_seed),
                    per_seed,
                });
            }
            _ => log::debug!("no interaction for {label}: needs both optimizers"),
        }
    }

    GapReport {
        reference: reference.to_string(),
        cells,
        complete: missing.is_empty(),
        missing,
        gaps,
        interactions,
    }
}

fn paired_interaction(
    by_cell: &BTreeMap<(String, OptimizerKind), BTreeMap<u64, f64>>,
    reference: &str,
    label: &str,
) -> Vec<f64> {
    let get = |l: &str, o| by_cell.get(&(l.to_string(), o));
    let (Some(nm), Some(rm), Some(na), Some(ra)) = (
        get(label, OptimizerKind::Muon),
        get(reference, OptimizerKind::Muon),
        get(label, OptimizerKind::Adamw),
        get(reference, OptimizerKind::Adamw),
    ) else {
        return Vec::new();
    };
    nm.iter()
        .filter_map(|(s, l)| Some((l - rm.get(s)?) - (na.get(s)? - ra.get(s)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
        assert!((quantile(&s, 0.125) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn constant_values_give_zero_width() {
        let ci = bootstrap_ci(&[0.4, 0.4, 0.4], BootstrapConfig::default()).unwrap();
        assert!((ci.lo - 0.4).abs() < 1e-15 && (ci.hi - 0.4).abs() < 1e-15);
    }

    #[test]
    fn needs_two_values() {
        assert!(bootstrap_ci(&[1.0], BootstrapConfig::default()).is_err());
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let v = [0.1, 0.5, 0.3, 0.9];
        let a = bootstrap_ci(&v, BootstrapConfig::default()).unwrap();
        let b = bootstrap_ci(&v, BootstrapConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[5.0]), 0.0);
    }

    #[test]
    fn identical_losses_give_zero_gaps() {
        let mut results = Vec::new();
        for label in ["rmsnorm", "derf", "dyt"] {
            for opt in OptimizerKind::ALL {
                for seed in [1, 2] {
                    results.push(CellResult {
                        label: label.into(),
                        optimizer: opt,
                        seed,
                        loss: Some(3.0),
                    });
                }
            }
        }
        let r = gap_report(&results, "rmsnorm", None);
        assert!(r.complete);
        assert_eq!(r.gaps.len(), 4);
        assert!(r.gaps.iter().all(|g| g.gap == 0.0));
        assert!(r.interactions.iter().all(|i| i.interaction == 0.0));
    }

    #[test]
    fn missing_cells_mark_report_incomplete() {
        let results = vec![
            CellResult {
                label: "derf".into(),
                optimizer: OptimizerKind::Muon,
                seed: 1,
                loss: Some(4.0),
            },
            CellResult {
                label: "rmsnorm".into(),
                optimizer: OptimizerKind::Muon,
                seed: 1,
                loss: None,
            },
        ];
        let r = gap_report(&results, "rmsnorm", None);
        assert!(!r.complete);
        assert_eq!(r.missing.len(), 2);
        assert!(r.gaps.is_empty());
    }
}
