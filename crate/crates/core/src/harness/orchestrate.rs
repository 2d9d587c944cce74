//! Grids of runs: the normalizer x optimizer factorial and one-dimensional
//! sweeps, executed by a small pool of worker threads.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::stats::{self, gap_report, BootstrapConfig, CellResult, GapReport};
use super::train::{read_summary, train, RunStatus, RunSummary, TrainOptions};
use super::{HarnessError, RunConfig};
use crate::norm::NormKind;
use crate::optim::OptimizerKind;

/// One run to execute. `value` is the swept value, if any; `reference`
/// marks baseline cells that gaps are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub label: String,
    pub value: Option<f64>,
    pub reference: bool,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub value: Option<f64>,
    pub reference: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

impl RunRecord {
    /// Final validation loss when the run finished with usable output.
    pub fn loss(&self) -> Option<f64> {
        self.summary
            .as_ref()
            .filter(|s| matches!(s.status, RunStatus::Completed | RunStatus::Plateau))
            .and_then(|s| s.final_loss)
    }
}

pub fn cell_label(cfg: &RunConfig) -> String {
    cfg.norm.kind.as_str().to_string()
}

/// Runs every spec under `out_dir/run_<hash>`, at most `jobs` at a time.
/// Runs that already have a summary are read back instead of retrained;
/// interrupted runs continue from their checkpoint. Failures are recorded
/// per run rather than aborting the grid.
pub fn run_all(specs: &[CellSpec], out_dir: &Path, jobs: usize) -> Vec<RunRecord> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; specs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, specs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = specs.get(i) else { break };
                let record = run_one(spec, out_dir);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(record);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn run_one(spec: &CellSpec, out_dir: &Path) -> RunRecord {
    let cfg = &spec.config;
    let run_dir = out_dir.join(cfg.run_id());
    let result = match read_summary(&run_dir) {
        Ok(s) if s.config_hash == cfg.hash() => {
            log::info!("{}: already finished ({})", s.run_id, s.status.as_str());
            Ok(s)
        }
        _ => train(
            cfg,
            &run_dir,
            TrainOptions {
                resume: true,
                stop_after: None,
            },
        )
        .map(|o| o.summary),
    };
    let (summary, error) = match result {
        Ok(s) => (Some(s), None),
        Err(e) => {
            log::error!("{}: {e}", run_dir.display());
            (None, Some(e.to_string()))
        }
    };
    RunRecord {
        label: spec.label.clone(),
        value: spec.value,
        reference: spec.reference,
        optimizer: cfg.optim.kind,
        seed: cfg.seed,
        run_dir,
        summary,
        error,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorialSpec {
    pub norms: Vec<NormKind>,
    pub optimizers: Vec<OptimizerKind>,
    pub seeds: Vec<u64>,
    pub reference: NormKind,
    pub base: RunConfig,
}

impl Default for FactorialSpec {
    fn default() -> Self {
        Self {
            norms: vec![NormKind::Rmsnorm, NormKind::Derf, NormKind::Dyt],
            optimizers: OptimizerKind::ALL.to_vec(),
            seeds: vec![42, 43, 44],
            reference: NormKind::Rmsnorm,
            base: RunConfig::default(),
        }
    }
}

pub fn factorial_grid(spec: &FactorialSpec) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for &norm in &spec.norms {
        for &opt in &spec.optimizers {
            for &seed in &spec.seeds {
                let mut config = spec.base.clone();
                config.norm.kind = norm;
                config.optim.kind = opt;
                config.seed = seed;
                cells.push(CellSpec {
                    label: cell_label(&config),
                    value: None,
                    reference: norm == spec.reference,
                    config,
                });
            }
        }
    }
    cells
}

/// Runs (or resumes) the whole factorial and aggregates it.
pub fn factorial(
    spec: &FactorialSpec,
    out_dir: &Path,
    jobs: usize,
    bootstrap: Option<BootstrapConfig>,
) -> (Vec<RunRecord>, GapReport) {
    let records = run_all(&factorial_grid(spec), out_dir, jobs);
    let results: Vec<CellResult> = records
        .iter()
        .map(|r| CellResult {
            label: r.label.clone(),
            optimizer: r.optimizer,
            seed: r.seed,
            loss: r.loss(),
        })
        .collect();
    let report = gap_report(&results, spec.reference.as_str(), bootstrap);
    (records, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// `derf_ema` blend weight under Muon, against RMSNorm+Muon.
    Lambda,
    /// Derf alpha under both optimizers, against RMSNorm.
    Alpha,
    /// Muon learning rate for RMSNorm and Derf; gaps at matched rate.
    MuonLr,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Lambda => "lambda",
            SweepKind::Alpha => "alpha",
            SweepKind::MuonLr => "muon_lr",
        }
    }

    pub fn default_values(self) -> &'static [f64] {
        match self {
            SweepKind::Lambda => &[0.0, 0.5, 0.7, 0.9, 1.0],
            SweepKind::Alpha => &[0.3, 0.5],
            SweepKind::MuonLr => &[0.02, 0.01, 0.005],
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda" => Ok(SweepKind::Lambda),
            "alpha" => Ok(SweepKind::Alpha),
            "muon_lr" | "muon-lr" => Ok(SweepKind::MuonLr),
            other => Err(format!("unknown sweep kind '{other}' (expected lambda, alpha or muon_lr)")),
        }
    }
}

pub fn sweep_grid(kind: SweepKind, values: &[f64], seeds: &[u64], base: &RunConfig) -> Result<Vec<CellSpec>, HarnessError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value and one seed".into()));
    }
    let mut cells = Vec::new();
    let mut push = |norm: NormKind, opt: OptimizerKind, seed: u64, value: Option<f64>, reference: bool| {
        let mut config = base.clone();
        config.norm.kind = norm;
        config.optim.kind = opt;
        config.seed = seed;
        if let Some(v) = value {
            match kind {
                SweepKind::Lambda => config.norm.lambda = v,
                SweepKind::Alpha => config.norm.alpha = v,
                SweepKind::MuonLr => config.optim.muon.lr = v,
            }
        }
        config.validate()?;
        cells.push(CellSpec {
            label: cell_label(&config),
            value,
            reference,
            config,
        });
        Ok::<_, HarnessError>(())
    };
    for &seed in seeds {
        match kind {
            SweepKind::Lambda => {
                push(NormKind::Rmsnorm, OptimizerKind::Muon, seed, None, true)?;
                for &v in values {
                    push(NormKind::DerfEma, OptimizerKind::Muon, seed, Some(v), false)?;
                }
            }
            SweepKind::Alpha => {
                for opt in OptimizerKind::ALL {
                    push(NormKind::Rmsnorm, opt, seed, None, true)?;
                    for &v in values {
                        push(NormKind::Derf, opt, seed, Some(v), false)?;
                    }
                }
            }
            SweepKind::MuonLr => {
                for &v in values {
                    push(NormKind::Rmsnorm, OptimizerKind::Muon, seed, Some(v), true)?;
                    push(NormKind::Derf, OptimizerKind::Muon, seed, Some(v), false)?;
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: Option<f64>,
    pub label: String,
    pub optimizer: OptimizerKind,
    pub losses: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Mean loss minus the matching reference mean.
    pub gap: Option<f64>,
    /// Seeds whose run failed, diverged or is missing.
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

/// Builds the sweep table from finished runs.
pub fn sweep_report(kind: SweepKind, records: &[RunRecord]) -> SweepReport {
    let mut keys: Vec<(Option<f64>, String, OptimizerKind, bool)> = Vec::new();
    for r in records {
        let k = (r.value, r.label.clone(), r.optimizer, r.reference);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let summarize = |value: Option<f64>, label: &str, opt: OptimizerKind| {
        let mut losses = Vec::new();
        let mut failed = Vec::new();
        for r in records
            .iter()
            .filter(|r| r.value == value && r.label == label && r.optimizer == opt)
        {
            match r.loss() {
                Some(l) => losses.push(l),
                None => failed.push(r.seed),
            }
        }
        (losses, failed)
    };
    let rows = keys
        .iter()
        .map(|(value, label, opt, reference)| {
            let (losses, failed_seeds) = summarize(*value, label, *opt);
            let mean = (!losses.is_empty()).then(|| stats::mean(&losses));
            let gap = if *reference {
                None
            } else {
                records
                    .iter()
                    .find(|r| r.reference && r.optimizer == *opt && (kind != SweepKind::MuonLr || r.value == *value))
                    .and_then(|r| {
                        let (ref_losses, _) = summarize(r.value, &r.label, *opt);
                        Some(mean? - (!ref_losses.is_empty()).then(|| stats::mean(&ref_losses))?)
                    })
            };
            SweepRow {
                value: *value,
                label: label.clone(),
                optimizer: *opt,
                std: mean.map(|_| stats::sample_std(&losses)),
                mean,
                gap,
                failed_seeds,
                losses,
            }
        })
        .collect();
    SweepReport { kind, rows }
}

pub fn sweep(
    kind: SweepKind,
    values: &[f64],
    seeds: &[u64],
    base: &RunConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<(Vec<RunRecord>, SweepReport), HarnessError> {
    let cells = sweep_grid(kind, values, seeds, base)?;
    let records = run_all(&cells, out_dir, jobs);
    let report = sweep_report(kind, &records);
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorial_grid_covers_every_cell_and_seed() {
        let cells = factorial_grid(&FactorialSpec::default());
        assert_eq!(cells.len(), 18);
        assert_eq!(cells.iter().filter(|c| c.reference).count(), 6);
        let mut hashes: Vec<String> = cells.iter().map(|c| c.config.hash()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 18);
    }

    #[test]
    fn lambda_grid_has_five_values_and_reference() {
        let values = SweepKind::Lambda.default_values();
        assert_eq!(values, &[0.0, 0.5, 0.7, 0.9, 1.0]);
        let cells = sweep_grid(SweepKind::Lambda, values, &[42], &RunConfig::default()).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().filter(|c| !c.reference).all(|c| c.config.norm.kind == NormKind::DerfEma));
        let lambdas: Vec<f64> = cells.iter().filter_map(|c| c.value).collect();
        assert_eq!(lambdas, values);
    }

    #[test]
    fn alpha_and_muon_lr_grids_are_expressible() {
        let a = sweep_grid(SweepKind::Alpha, &[0.3, 0.5], &[42], &RunConfig::default()).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.iter().any(|c| c.config.norm.alpha == 0.3 && c.config.optim.kind == OptimizerKind::Muon));
        let m = sweep_grid(SweepKind::MuonLr, &[0.02, 0.01, 0.005], &[42], &RunConfig::default()).unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.iter().all(|c| c.config.optim.muon.lr == c.value.unwrap()));
    }

    #[test]
    fn empty_sweep_is_rejected() {
        assert!(sweep_grid(SweepKind::Alpha, &[], &[42], &RunConfig::default()).is_err());
    }

    #[test]
    fn sweep_report_matches_reference_by_rate() {
        let rec = |label: &str, value, reference, loss| RunRecord {
            label: label.into(),
            value: Some(value),
            reference,
            optimizer: OptimizerKind::Muon,
            seed: 42,
            run_dir: PathBuf::new(),
            summary: Some(RunSummary {
                run_id: String::new(),
                config_hash: String::new(),
                status: RunStatus::Completed,
                final_loss: Some(loss),
                final_train_loss: None,
                initial_train_loss: None,
                steps_completed: 1,
                norm: NormKind::Derf,
                optimizer: OptimizerKind::Muon,
                seed: 42,
                reason: None,
                wall_seconds: 0.0,
            }),
            error: None,
        };
        let records = vec![
            rec("rmsnorm", 0.02, true, 3.321),
            rec("derf", 0.02, false, 4.271),
            rec("rmsnorm", 0.01, true, 3.379),
            rec("derf", 0.01, false, 3.656),
        ];
        let r = sweep_report(SweepKind::MuonLr, &records);
        let gap = |v: f64| r.rows.iter().find(|x| x.value == Some(v) && !x.label.starts_with("rms")).unwrap().gap.unwrap();
        assert!((gap(0.02) - 0.950).abs() < 1e-9);
        assert!((gap(0.01) - 0.277).abs() < 1e-9);
    }
}
