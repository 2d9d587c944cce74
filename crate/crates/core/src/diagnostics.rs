//! Per-layer mechanism measurements and their CSV log.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::model::Model;
use crate::norm::{NormKind, Nonlinearity, SiteRole, SiteTap};

#[derive(Debug, thiserror::Error)]
pub enum DiagError {
    #[error("saturation requested on an empty tap")]
    EmptyTap,
    #[error("diagnostics log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fraction of elements whose nonlinearity output exceeds 0.99 in
/// magnitude, i.e. `|arg| > threshold` (strict).
pub fn saturation_fraction(args: &[f64], nonlin: Nonlinearity) -> Result<f64, DiagError> {
    if args.is_empty() {
        return Err(DiagError::EmptyTap);
    }
    let t = nonlin.saturation_threshold();
    let hits = args.iter().filter(|a| a.abs() > t).count();
    Ok(hits as f64 / args.len() as f64)
}

/// Frobenius norm of a flat matrix.
pub fn weight_frobenius(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub const CSV_HEADER: [&str; 14] = [
    "run_id",
    "step",
    "layer",
    "site",
    "kind",
    "activation_rms",
    "pre_nonlin_std",
    "saturation_fraction",
    "wF_attn",
    "wF_mlp",
    "alpha",
    "alpha_grad",
    "sigma_hat",
    "res_scale",
];

/// One diagnostics row. `None` fields are written as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagSnapshot {
    pub run_id: String,
    pub step: usize,
    pub layer: usize,
    pub site: SiteRole,
    pub kind: NormKind,
    pub activation_rms: f64,
    pub pre_nonlin_std: Option<f64>,
    pub saturation_fraction: Option<f64>,
    #[serde(rename = "wF_attn")]
    pub wf_attn: Option<f64>,
    #[serde(rename = "wF_mlp")]
    pub wf_mlp: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_grad: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub res_scale: Option<f64>,
}

/// Whether diagnostics are due at 0-indexed `step`.
pub fn is_emission_step(step: usize, cadence: usize) -> bool {
    cadence > 0 && step % cadence == 0
}

/// Builds one snapshot per norm site from the taps of an armed forward
/// pass. `alpha_grads` holds the accumulated alpha gradient of each site
/// (same order as `Model::sites`), taken before clipping.
pub fn collect(
    model: &Model,
    taps: &[Option<SiteTap>],
    alpha_grads: &[Option<f64>],
    step: usize,
    run_id: &str,
) -> Result<Vec<DiagSnapshot>, DiagError> {
    let mut rows = Vec::with_capacity(taps.len());
    for (i, site) in model.sites().enumerate() {
        let Some(tap) = taps.get(i).and_then(Option::as_ref) else {
            continue;
        };
        let layer = site.layer();
        let (wf_attn, wf_mlp, res_scale) = match site.role() {
            SiteRole::Final => (None, None, None),
            role => {
                let (a, m) = model.block_weight_norms(layer);
                let p = &model.blocks[layer].params;
                let res = match role {
                    SiteRole::Attn => p.res_attn,
                    _ => p.res_ffn,
                };
                (Some(a), Some(m), res.map(|id| model.store.scalar(id)))
            }
        };
        let saturation = match site.kind().nonlinearity() {
            Some(n) => Some(saturation_fraction(&tap.argument, n)?),
            None => None,
        };
        rows.push(DiagSnapshot {
            run_id: run_id.to_string(),
            step,
            layer,
            site: site.role(),
            kind: site.kind(),
            activation_rms: tap.input_rms,
            pre_nonlin_std: tap.pre_nonlin_std,
            saturation_fraction: saturation,
            wf_attn,
            wf_mlp,
            alpha: tap.alpha,
            alpha_grad: alpha_grads.get(i).copied().flatten().map(f64::abs),
            sigma_hat: tap.sigma_hat,
            res_scale,
        });
    }
    Ok(rows)
}

/// Appends snapshots to a CSV file with the fixed header.
///
/// On an I/O failure a `<file>.partial` marker is left next to the log so
/// readers can tell the log was cut short.
pub struct DiagWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl DiagWriter {
    pub fn create(path: &Path) -> Result<Self, DiagError> {
        let io = |source| DiagError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner
            .write_record(CSV_HEADER)
            .and_then(|_| inner.flush().map_err(csv::Error::from))
            .map_err(|e| io(std::io::Error::other(e)))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    /// Reopens an existing log for appending after truncating it to `len`
    /// bytes, discarding rows written after the last checkpoint.
    pub fn resume(path: &Path, len: u64) -> Result<Self, DiagError> {
        let io = |source| DiagError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::OpenOptions::new().append(true).open(path).map_err(io)?;
        file.set_len(len).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, rows: &[DiagSnapshot]) -> Result<(), DiagError> {
        let result = rows
            .iter()
            .try_for_each(|r| self.inner.serialize(r))
            .map_err(std::io::Error::other)
            .and_then(|_| self.inner.flush());
        result.map_err(|source| {
            mark_partial(&self.path, &source.to_string());
            DiagError::Io {
                path: self.path.display().to_string(),
                source,
            }
        })
    }
}

/// Path of the marker written next to a cut-short log.
pub fn partial_marker(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Best-effort: the log may be unwritable for the same reason.
pub fn mark_partial(path: &Path, reason: &str) {
    if let Ok(mut f) = File::create(partial_marker(path)) {
        let _ = writeln!(f, "{reason}");
    }
}
