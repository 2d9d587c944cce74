use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunConfig, Schedule};
use crate::corpus::BatchPlan;
use crate::diagnostics::{self, DiagWriter};
use crate::model::Model;
use crate::norm::NormKind;
use crate::optim::{self, OptimError, Optimizer, OptimizerKind};
use crate::tensor::Graph;

pub const METRICS_HEADER: [&str; 7] = ["run_id", "step", "train_loss", "val_loss", "lr", "grad_norm", "clip_factor"];

const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.csv";
const DIAG_FILE: &str = "diagnostics.csv";
const SUMMARY_FILE: &str = "summary.json";
const CHECKPOINT_FILE: &str = "checkpoints/latest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    Plateau,
    /// Stopped early on request; resumable from the last checkpoint.
    Interrupted,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
            RunStatus::Plateau => "plateau",
            RunStatus::Interrupted => "interrupted",
        }
    }
}

/// One metrics row per optimizer step. `val_loss` is set on eval steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub status: RunStatus,
    /// Validation loss (nats) after the last step; `None` for diverged runs.
    pub final_loss: Option<f64>,
    /// Mean train loss over the last ten steps.
    pub final_train_loss: Option<f64>,
    pub initial_train_loss: Option<f64>,
    pub steps_completed: usize,
    pub norm: NormKind,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub reason: Option<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/latest.json` when it matches the config.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are done in total.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRow>,
    pub run_dir: PathBuf,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub next_step: usize,
    pub model: Model,
    pub optimizer: Optimizer,
    #[serde(with = "crate::codec::f64_vec")]
    pub train_losses: Vec<f64>,
    pub last_val: Option<f64>,
    pub metrics_len: u64,
    pub diag_len: u64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(HarnessError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(HarnessError::io(path))
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary, HarnessError> {
    let path = run_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
    Ok(serde_json::from_str(&text)?)
}

struct MetricsLog {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(HarnessError::io(path))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(METRICS_HEADER).map_err(|e| csv_io(path, e))?;
        inner.flush().map_err(HarnessError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    fn resume(path: &Path, len: u64) -> Result<Self, HarnessError> {
        let file = OpenOptions::new().append(true).open(path).map_err(HarnessError::io(path))?;
        file.set_len(len).map_err(HarnessError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<(), HarnessError> {
        let path = self.path.clone();
        let result = self
            .inner
            .serialize(row)
            .map_err(|e| csv_io(&path, e))
            .and_then(|_| self.inner.flush().map_err(HarnessError::io(&path)));
        if let Err(e) = &result {
            diagnostics::mark_partial(&path, &e.to_string());
        }
        result
    }
}

fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    }
}

fn file_len(path: &Path) -> Result<u64, HarnessError> {
    Ok(fs::metadata(path).map_err(HarnessError::io(path))?.len())
}

/// Mean cross-entropy (nats per token) over the fixed validation blocks.
fn evaluate(model: &mut Model, blocks: &[Vec<usize>], batch: usize) -> Result<f64, HarnessError> {
    let len = model.config().seq_len;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in blocks.chunks(batch) {
        let flat: Vec<usize> = chunk.concat();
        let mut g = Graph::no_grad();
        let vars = model.store.bind(&mut g);
        let (loss, _) = model.loss(&mut g, &vars, &flat, chunk.len(), len, false, false)?;
        let n = chunk.len() * len;
        total += g.item(loss).expect("loss is scalar") * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn tail_mean(values: &[f64], n: usize) -> Option<f64> {
    let tail = &values[values.len().saturating_sub(n)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Trains one run, writing its logs, checkpoints and summary under
/// `run_dir`. Divergence ends the run with status `diverged`; it is not an
/// error. Errors are reserved for invalid configs and I/O failures.
pub fn train(cfg: &RunConfig, run_dir: &Path, opts: TrainOptions) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.hash();
    let run_id = cfg.run_id();
    let t = &cfg.train;
    fs::create_dir_all(run_dir.join("checkpoints")).map_err(HarnessError::io(run_dir))?;
    write_atomic(&run_dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let diag_path = run_dir.join(DIAG_FILE);
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let summary_path = run_dir.join(SUMMARY_FILE);

    let resumed = if opts.resume && ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(HarnessError::io(&ckpt_path))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.config_hash == hash {
            Some(ck)
        } else {
            log::warn!("{}: checkpoint belongs to another config; starting over", run_dir.display());
            None
        }
    } else {
        None
    };
    let _ = fs::remove_file(&summary_path);
    for p in [&metrics_path, &diag_path] {
        let _ = fs::remove_file(diagnostics::partial_marker(p));
    }

    let (mut model, mut optimizer, mut train_losses, mut last_val, start, mut metrics_log, mut diag_log) =
        match resumed {
            Some(ck) => {
                log::info!("{run_id}: resuming at step {}", ck.next_step);
                (
                    ck.model,
                    ck.optimizer,
                    ck.train_losses,
                    ck.last_val,
                    ck.next_step,
                    MetricsLog::resume(&metrics_path, ck.metrics_len)?,
                    DiagWriter::resume(&diag_path, ck.diag_len)?,
                )
            }
            None => (
                Model::new(&cfg.model, &cfg.norm, cfg.seed).map_err(HarnessError::Config)?,
                Optimizer::new(cfg.optim.clone())?,
                Vec::new(),
                None,
                0,
                MetricsLog::create(&metrics_path)?,
                DiagWriter::create(&diag_path)?,
            ),
        };

    let corpus = cfg.data.load()?;
    let mut plan = BatchPlan::new(
        corpus,
        cfg.seed,
        t.micro_batch,
        t.grad_accum,
        cfg.model.seq_len,
        cfg.data.split(),
    )?;
    let val_blocks = plan.validation_blocks(t.eval_tokens);
    let schedule = Schedule {
        peak: 1.0,
        warmup: t.warmup,
        total: t.steps,
        min_lr: t.min_lr_ratio,
    };
    let divergence_limit = t.divergence_ratio * (cfg.model.vocab as f64).ln();
    let (batch, len) = (t.micro_batch, cfg.model.seq_len);
    let mut metrics = Vec::new();
    let mut diverged: Option<String> = None;
    let mut step = start;

    while step < t.steps {
        if opts.stop_after.is_some_and(|n| step >= n) {
            break;
        }
        let lr_factor = schedule.lr_at(step)?;
        let emit = diagnostics::is_emission_step(step, t.diag_every);
        let mut loss_sum = 0.0;
        let mut taps = Vec::new();
        for mb in 0..t.grad_accum {
            let block = plan.next_microbatch(step, mb);
            let mut g = Graph::new();
            let vars = model.store.bind(&mut g);
            let (loss, mb_taps) = model.loss(&mut g, &vars, &block, batch, len, mb == 0, emit && mb == 0)?;
            if mb == 0 {
                taps = mb_taps;
            }
            loss_sum += g.item(loss).expect("loss is scalar");
            let scaled = g.scale(loss, 1.0 / t.grad_accum as f64);
            let grads = g.backward(scaled)?;
            model.store.accumulate(&vars, &grads);
        }
        let train_loss = loss_sum / t.grad_accum as f64;
        let alpha_grads: Vec<Option<f64>> = model
            .sites()
            .map(|s| s.params().alpha.and_then(|id| model.store.get(id).tensor.grad().map(|g| g[0])))
            .collect();

        let mut row = MetricsRow {
            run_id: run_id.clone(),
            step,
            train_loss,
            val_loss: None,
            lr: lr_factor,
            grad_norm: f64::NAN,
            clip_factor: f64::NAN,
        };
        let outcome = if !train_loss.is_finite() {
            Err(format!("non-finite train loss {train_loss} at step {step}"))
        } else if train_loss > divergence_limit {
            Err(format!("train loss {train_loss:.4} above {divergence_limit:.4} at step {step}"))
        } else {
            optim::clip_global_norm(&mut model.store, cfg.optim.max_grad_norm)
                .and_then(|clip| {
                    row.grad_norm = clip.norm;
                    row.clip_factor = clip.factor;
                    optimizer.step(&mut model.store, lr_factor)
                })
                .map_err(|e: OptimError| format!("{e} at step {step}"))
        };
        model.store.zero_grads();
        if let Err(reason) = outcome {
            log::warn!("{run_id}: diverged: {reason}");
            train_losses.push(train_loss);
            metrics_log.write(&row)?;
            metrics.push(row);
            diverged = Some(reason);
            step += 1;
            break;
        }
        train_losses.push(train_loss);

        if emit {
            let rows = diagnostics::collect(&model, &taps, &alpha_grads, step, &run_id)?;
            diag_log.write(&rows)?;
        }
        let last = step + 1 == t.steps;
        if last || (t.eval_every > 0 && (step + 1) % t.eval_every == 0) {
            let v = evaluate(&mut model, &val_blocks, batch)?;
            log::info!("{run_id}: step {} train {train_loss:.4} val {v:.4}", step + 1);
            row.val_loss = Some(v);
            last_val = Some(v);
        }
        metrics_log.write(&row)?;
        metrics.push(row);
        step += 1;

        let stopping = opts.stop_after.is_some_and(|n| step >= n);
        if last || stopping || (t.checkpoint_every > 0 && step % t.checkpoint_every == 0) {
            let ck = Checkpoint {
                config_hash: hash.clone(),
                next_step: step,
                model: model.clone(),
                optimizer: optimizer.clone(),
                train_losses: train_losses.clone(),
                last_val,
                metrics_len: file_len(&metrics_path)?,
                diag_len: file_len(&diag_path)?,
            };
            write_atomic(&ckpt_path, &serde_json::to_vec(&ck)?)?;
        }
    }

    let window = (t.steps / 10).max(1);
    let status = if diverged.is_some() {
        RunStatus::Diverged
    } else if step < t.steps {
        RunStatus::Interrupted
    } else {
        let first = train_losses[..window.min(train_losses.len())].iter().sum::<f64>() / window as f64;
        let final_window = tail_mean(&train_losses, window).expect("completed run has losses");
        if final_window >= first - t.plateau_tolerance {
            RunStatus::Plateau
        } else {
            RunStatus::Completed
        }
    };
    let reason = match status {
        RunStatus::Plateau => Some(format!(
            "final-window train loss did not improve by {} nats on the first window",
            t.plateau_tolerance
        )),
        _ => diverged,
    };
    let summary = RunSummary {
        run_id,
        config_hash: hash,
        status,
        final_loss: if status == RunStatus::Diverged { None } else { last_val },
        final_train_loss: tail_mean(&train_losses, 10),
        initial_train_loss: train_losses.first().copied(),
        steps_completed: step,
        norm: cfg.norm.kind,
        optimizer: cfg.optim.kind,
        seed: cfg.seed,
        reason,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    if status != RunStatus::Interrupted {
        write_atomic(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(RunOutcome {
        summary,
        metrics,
        run_dir: run_dir.to_path_buf(),
    })
}
