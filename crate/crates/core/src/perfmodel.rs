//! Analytic per-iteration time model for local, split and split-decomposed
//! training.
//!
//! ```text
//! naive = t_edge_layer * (n_edge + n_cloud)        (or a measured override)
//! sl    = t_edge_layer * n_edge + t_cloud_layer * n_cloud + t_comm
//! sft   = same as sl, with the smaller exchanged volume
//! t_comm = override, or volume_bytes * 8 / bandwidth_bps
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Bytes exchanged for a `batch x tokens x width` tensor.
pub fn comm_volume(batch: u64, tokens: u64, width: u64, bytes_per_elem: u64) -> u64 {
    batch * tokens * width * bytes_per_elem
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Naive,
    Sl,
    Sft,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Naive, Mode::Sl, Mode::Sft];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::Sl => "sl",
            Mode::Sft => "sft",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Mode::Naive),
            "sl" => Ok(Mode::Sl),
            "sft" => Ok(Mode::Sft),
            other => Err(Error::PerfModel(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerfParams {
    pub t_edge_layer_ms: f64,
    pub t_cloud_layer_ms: f64,
    pub n_edge_layers: u32,
    pub n_cloud_layers: u32,
    /// Bytes exchanged per iteration.
    pub volume_bytes: u64,
    pub bandwidth_bps: f64,
    /// Communication time to use instead of `volume * 8 / bandwidth`.
    pub t_comm_override_ms: Option<f64>,
    /// Whole-model edge iteration time, when measured directly rather than
    /// as `t_edge_layer * n_layers`.
    pub t_naive_override_ms: Option<f64>,
}

/// One row of an estimate table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mode: Mode,
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub total_ms: f64,
}

impl PerfParams {
    pub fn validate(&self) -> Result<()> {
        let times = [
            ("t_edge_layer_ms", self.t_edge_layer_ms),
            ("t_cloud_layer_ms", self.t_cloud_layer_ms),
            ("bandwidth_bps", self.bandwidth_bps),
            ("t_comm_override_ms", self.t_comm_override_ms.unwrap_or(0.0)),
            ("t_naive_override_ms", self.t_naive_override_ms.unwrap_or(0.0)),
        ];
        for (name, v) in times {
            if v.is_nan() || v < 0.0 || (v.is_infinite() && name != "bandwidth_bps") {
                return Err(Error::PerfModel(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn split_compute_ms(&self) -> f64 {
        self.t_edge_layer_ms * f64::from(self.n_edge_layers)
            + self.t_cloud_layer_ms * f64::from(self.n_cloud_layers)
    }

    pub fn naive_ms(&self) -> f64 {
        self.t_naive_override_ms.unwrap_or_else(|| {
            self.t_edge_layer_ms * f64::from(self.n_edge_layers + self.n_cloud_layers)
        })
    }

    pub fn comm_ms(&self) -> Result<f64> {
        if let Some(t) = self.t_comm_override_ms {
            return Ok(t);
        }
        if self.bandwidth_bps <= 0.0 {
            return Err(Error::PerfModel(
                "bandwidth is zero and no communication time override is set".into(),
            ));
        }
        Ok(self.volume_bytes as f64 * 8.0 / self.bandwidth_bps * 1e3)
    }
}

/// Per-iteration time of `mode` in milliseconds.
pub fn estimate(mode: Mode, p: &PerfParams) -> Result<Estimate> {
    p.validate()?;
    let (compute_ms, comm_ms) = match mode {
        Mode::Naive => (p.naive_ms(), 0.0),
        Mode::Sl | Mode::Sft => (p.split_compute_ms(), p.comm_ms()?),
    };
    Ok(Estimate {
        mode,
        compute_ms,
        comm_ms,
        total_ms: compute_ms + comm_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Breakeven {
    /// Minimum link rate, in bits per second, at which the split run is no
    /// slower than local training.
    Bandwidth(f64),
    /// Split compute alone already takes at least as long as local training.
    NeverBeneficial { compute_ms: f64 },
}

/// Bandwidth at which `estimate(Sft) == t_naive_ms`.
pub fn breakeven_bandwidth(p: &PerfParams, t_naive_ms: f64) -> Result<Breakeven> {
    p.validate()?;
    if p.t_comm_override_ms.is_some() {
        return Err(Error::PerfModel(
            "communication time is overridden, so bandwidth has no effect".into(),
        ));
    }
    let compute = p.split_compute_ms();
    if compute >= t_naive_ms {
        return Ok(Breakeven::NeverBeneficial { compute_ms: compute });
    }
    let budget_s = (t_naive_ms - compute) / 1e3;
    Ok(Breakeven::Bandwidth(p.volume_bytes as f64 * 8.0 / budget_s))
}

/// `bytes` in both decimal megabytes and mebibytes.
pub fn format_bytes(bytes: u64) -> String {
    format!(
        "{bytes} B ({:.1} MB, {:.1} MiB)",
        bytes as f64 / 1e6,
        bytes as f64 / (1024.0 * 1024.0)
    )
}
