//! Analytic allreduce accounting for normalizers under tensor parallelism.
//!
//! Everything here is a cost *model*. Nothing is measured.

use serde::{Deserialize, Serialize};

use crate::norm::NormKind;

pub const MODEL_LABEL: &str = "model, not measurement";

/// Published 8-way norm-layer speedups over RMSNorm, carried as annotations
/// for comparison only.
pub const REFERENCE_SPEEDUPS: [(NormKind, f64); 3] =
    [(NormKind::Dyt, 9.4), (NormKind::Derf, 9.3), (NormKind::DerfEma, 7.8)];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TpError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("baseline method {0} is not in the method list")]
    MissingBaseline(NormKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpScenario {
    pub sites: u64,
    pub micro_batches: u64,
    pub tp_degree: u64,
    /// Tokens in one micro-batch; sets the per-token statistic payload.
    pub tokens_per_microbatch: u64,
    pub bytes_per_value: u64,
    /// Per-hop latency of a ring allreduce, microseconds.
    pub latency_us: f64,
    /// Link bandwidth, GB/s.
    pub bandwidth_gbps: f64,
}

impl Default for TpScenario {
    fn default() -> Self {
        Self {
            sites: 33,
            micro_batches: 64,
            tp_degree: 8,
            tokens_per_microbatch: 8 * 2048,
            bytes_per_value: 4,
            latency_us: 5.0,
            bandwidth_gbps: 200.0,
        }
    }
}

impl TpScenario {
    pub fn validate(&self) -> Result<(), TpError> {
        if self.tp_degree == 0 || self.micro_batches == 0 || self.bytes_per_value == 0 {
            return Err(TpError::Scenario("tp_degree, micro_batches and bytes_per_value must be positive".into()));
        }
        if !(self.latency_us > 0.0 && self.bandwidth_gbps > 0.0) {
            return Err(TpError::Scenario("latency and bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Allreduce operations per optimizer step, forward and backward.
pub fn allreduce_count(method: NormKind, s: &TpScenario) -> u64 {
    match method {
        // per-token RMS in every micro-batch, forward and backward
        NormKind::Rmsnorm => s.sites * s.micro_batches * 2,
        // one sigma-hat statistic per site per step
        NormKind::DerfEma => s.sites,
        NormKind::Derf | NormKind::Dyt | NormKind::AsinhDerf => 0,
    }
}

/// Payload of one allreduce in bytes.
pub fn allreduce_bytes(method: NormKind, s: &TpScenario) -> u64 {
    match method {
        NormKind::Rmsnorm => s.tokens_per_microbatch * s.bytes_per_value,
        // sum and sum of squares
        NormKind::DerfEma => 2 * s.bytes_per_value,
        _ => 0,
    }
}

/// Ring allreduce time, microseconds: `2(p-1)` latency hops plus
/// `2(p-1)/p` of the payload over the link.
pub fn allreduce_time_us(bytes: u64, s: &TpScenario) -> f64 {
    if s.tp_degree <= 1 {
        return 0.0;
    }
    let p = s.tp_degree as f64;
    let hops = 2.0 * (p - 1.0);
    hops * s.latency_us + hops / p * bytes as f64 / (s.bandwidth_gbps * 1e3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpRow {
    pub method: NormKind,
    pub allreduces: u64,
    pub relative_count: f64,
    pub bytes_per_allreduce: u64,
    pub est_comm_us: f64,
    pub relative_time: f64,
    pub reference_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpTable {
    pub label: String,
    pub baseline: NormKind,
    pub scenario: TpScenario,
    pub rows: Vec<TpRow>,
}

pub const CSV_HEADER: [&str; 7] = [
    "method",
    "allreduces",
    "relative_count",
    "bytes_per_allreduce",
    "est_comm_us",
    "relative_time",
    "reference_speedup",
];

pub fn relative_cost(methods: &[NormKind], baseline: NormKind, s: &TpScenario) -> Result<TpTable, TpError> {
    s.validate()?;
    if !methods.contains(&baseline) {
        return Err(TpError::MissingBaseline(baseline));
    }
    let time = |m| allreduce_count(m, s) as f64 * allreduce_time_us(allreduce_bytes(m, s), s);
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let base_count = allreduce_count(baseline, s) as f64;
    let base_time = time(baseline);
    let rows = methods
        .iter()
        .map(|&m| TpRow {
            method: m,
            allreduces: allreduce_count(m, s),
            relative_count: ratio(allreduce_count(m, s) as f64, base_count),
            bytes_per_allreduce: allreduce_bytes(m, s),
            est_comm_us: time(m),
            relative_time: ratio(time(m), base_time),
            reference_speedup: REFERENCE_SPEEDUPS.iter().find(|(k, _)| *k == m).map(|(_, v)| *v),
        })
        .collect();
    Ok(TpTable {
        label: MODEL_LABEL.into(),
        baseline,
        scenario: *s,
        rows,
    })
}

impl TpTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let mut out = format!(
            "Allreduce cost per optimizer step ({}): {} sites, {} micro-batches, TP={}\n",
            self.label, s.sites, s.micro_batches, s.tp_degree
        );
        out.push_str(&format!(
            "{:<11} {:>11} {:>9} {:>12} {:>9} {:>10}\n",
            "method", "allreduces", "relative", "comm (us)", "rel time", "published"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<11} {:>11} {:>8.4}x {:>12.1} {:>8.4}x {:>10}\n",
                r.method.as_str(),
                r.allreduces,
                r.relative_count,
                r.est_comm_us,
                r.relative_time,
                r.reference_speedup.map(|v| format!("{v}x faster")).unwrap_or_else(|| "-".into())
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_model_has_no_cost_without_parallelism() {
        let s = TpScenario {
            tp_degree: 1,
            ..TpScenario::default()
        };
        assert_eq!(allreduce_time_us(1 << 20, &s), 0.0);
    }

    #[test]
    fn ring_time_closed_form() {
        let s = TpScenario {
            tp_degree: 2,
            latency_us: 1.0,
            bandwidth_gbps: 1.0,
            ..TpScenario::default()
        };
        // 2 hops of 1 us plus 1000 bytes at 1 kB/us
        assert!((allreduce_time_us(1000, &s) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_scenarios_are_rejected() {
        let s = TpScenario {
            bandwidth_gbps: 0.0,
            ..TpScenario::default()
        };
        assert!(relative_cost(&[NormKind::Rmsnorm], NormKind::Rmsnorm, &s).is_err());
        assert!(relative_cost(&[NormKind::Derf], NormKind::Rmsnorm, &TpScenario::default()).is_err());
    }

    #[test]
    fn table_is_labeled_as_a_model() {
        let t = relative_cost(&NormKind::ALL, NormKind::Rmsnorm, &TpScenario::default()).unwrap();
        assert!(t.to_text().contains(MODEL_LABEL));
        assert_eq!(t.to_csv().lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(t.to_csv().lines().count(), NormKind::ALL.len() + 1);
    }
}
