//! Scenario configuration: a flat key=value text format covering the
//! protocol switch, cost-model fields, launch-strategy calibrations, and
//! sweep ranges. Unset keys keep their defaults.

use std::path::Path;

use thiserror::Error;

use crate::driver::{DriverConfig, LaunchStrategy, StrategyKind};
use crate::pbdma::CostModel;
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for `{key}`: {value}")]
    BadValue { line: usize, key: String, value: String },
    #[error("config line {line}: expected key = value")]
    BadLine { line: usize },
    #[error("invalid sweep range: {0}")]
    BadRange(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    // simulator
    pub pid: u64,
    pub host_ram_bytes: u64,
    pub device_vram_bytes: u64,
    pub gp_ring_len: u32,
    pub first_channel_id: u32,
    pub auto_writeback: bool,
    pub node_cost_ns: f64,
    // cost model
    pub inline_startup_ns: f64,
    pub inline_sat_gibps: f64,
    pub copy_startup_ns: f64,
    pub copy_sat_gibps: f64,
    pub inline_max_bytes: u64,
    pub inline_calibration: Vec<(u64, f64)>,
    // driver
    pub inline_switch_bytes: u64,
    pub max_segment_dwords: u64,
    // strategies
    pub legacy118: LaunchStrategy,
    pub modern130: LaunchStrategy,
    // memcpy sweep
    pub memcpy_exp_min_bytes: u64,
    pub memcpy_exp_max_bytes: u64,
    pub memcpy_linear_min_bytes: u64,
    pub memcpy_linear_max_bytes: u64,
    pub memcpy_linear_step_bytes: u64,
    pub warmup_iters: u32,
    pub test_iters: u32,
    // graph sweep
    pub graph_min_len: u32,
    pub graph_max_len: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let cost = CostModel::default();
        let driver = DriverConfig::default();
        ScenarioConfig {
            pid: 1000,
            host_ram_bytes: 1 << 31,
            device_vram_bytes: 1 << 31,
            gp_ring_len: 1024,
            first_channel_id: 0x10011,
            auto_writeback: false,
            node_cost_ns: 0.0,
            inline_startup_ns: cost.inline_startup_ns,
            inline_sat_gibps: cost.inline_sat_gibps,
            copy_startup_ns: cost.copy_startup_ns,
            copy_sat_gibps: cost.copy_sat_gibps,
            inline_max_bytes: cost.inline_max_bytes,
            inline_calibration: cost.inline_calibration,
            inline_switch_bytes: driver.inline_switch_bytes,
            max_segment_dwords: driver.max_segment_dwords,
            legacy118: LaunchStrategy::legacy118_default(),
            modern130: LaunchStrategy::modern130_default(),
            memcpy_exp_min_bytes: 4,
            memcpy_exp_max_bytes: 16 * 1024,
            memcpy_linear_min_bytes: 1024,
            memcpy_linear_max_bytes: 31 * 1024,
            memcpy_linear_step_bytes: 1024,
            warmup_iters: 3,
            test_iters: 10,
            graph_min_len: 1,
            graph_max_len: 2000,
        }
    }
}

fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_calibration(s: &str) -> Option<Vec<(u64, f64)>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    for pair in s.split(',') {
        let (bytes, ns) = pair.split_once(':')?;
        out.push((parse_u64(bytes)?, ns.trim().parse().ok()?));
    }
    Some(out)
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) =
                stripped.split_once('=').ok_or(ConfigError::BadLine { line })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let bad = || ConfigError::BadValue { line, key: key.into(), value: value.into() };
        macro_rules! set_u64 {
            ($field:expr) => {
                $field = parse_u64(value).ok_or_else(bad)?
            };
        }
        macro_rules! set_u32 {
            ($field:expr) => {
                $field = parse_u64(value).ok_or_else(bad)?.try_into().map_err(|_| bad())?
            };
        }
        macro_rules! set_f64 {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "pid" => set_u64!(self.pid),
            "host_ram_bytes" => set_u64!(self.host_ram_bytes),
            "device_vram_bytes" => set_u64!(self.device_vram_bytes),
            "gp_ring_len" => set_u32!(self.gp_ring_len),
            "first_channel_id" => set_u32!(self.first_channel_id),
            "auto_writeback" => {
                self.auto_writeback = value.parse().map_err(|_| bad())?;
            }
            "node_cost_ns" => set_f64!(self.node_cost_ns),
            "inline_startup_ns" => set_f64!(self.inline_startup_ns),
            "inline_sat_gibps" => set_f64!(self.inline_sat_gibps),
            "copy_startup_ns" => set_f64!(self.copy_startup_ns),
            "copy_sat_gibps" => set_f64!(self.copy_sat_gibps),
            "inline_max_bytes" => set_u64!(self.inline_max_bytes),
            "inline_calibration" => {
                self.inline_calibration = parse_calibration(value).ok_or_else(bad)?;
            }
            "inline_switch_bytes" => set_u64!(self.inline_switch_bytes),
            "max_segment_dwords" => set_u64!(self.max_segment_dwords),
            "legacy118_per_node_bytes" => set_u64!(self.legacy118.per_node_bytes),
            "legacy118_per_chunk_overhead_bytes" => {
                set_u64!(self.legacy118.per_chunk_overhead_bytes)
            }
            "legacy118_chunk_nodes" => set_u32!(self.legacy118.chunk_nodes),
            "legacy118_base_bytes" => set_u64!(self.legacy118.base_bytes),
            "legacy118_eff_write_bw_mibps" => set_f64!(self.legacy118.effective_write_bw_mibps),
            "legacy118_base_launch_ns" => set_f64!(self.legacy118.base_launch_ns),
            "modern130_per_node_bytes" => set_u64!(self.modern130.per_node_bytes),
            "modern130_per_chunk_overhead_bytes" => {
                set_u64!(self.modern130.per_chunk_overhead_bytes)
            }
            "modern130_chunk_nodes" => set_u32!(self.modern130.chunk_nodes),
            "modern130_base_bytes" => set_u64!(self.modern130.base_bytes),
            "modern130_eff_write_bw_mibps" => set_f64!(self.modern130.effective_write_bw_mibps),
            "modern130_base_launch_ns" => set_f64!(self.modern130.base_launch_ns),
            "memcpy_exp_min_bytes" => set_u64!(self.memcpy_exp_min_bytes),
            "memcpy_exp_max_bytes" => set_u64!(self.memcpy_exp_max_bytes),
            "memcpy_linear_min_bytes" => set_u64!(self.memcpy_linear_min_bytes),
            "memcpy_linear_max_bytes" => set_u64!(self.memcpy_linear_max_bytes),
            "memcpy_linear_step_bytes" => set_u64!(self.memcpy_linear_step_bytes),
            "warmup_iters" => set_u32!(self.warmup_iters),
            "test_iters" => set_u32!(self.test_iters),
            "graph_min_len" => set_u32!(self.graph_min_len),
            "graph_max_len" => set_u32!(self.graph_max_len),
            _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.memcpy_exp_min_bytes > self.memcpy_exp_max_bytes
            || self.memcpy_exp_min_bytes == 0
        {
            return Err(ConfigError::BadRange("memcpy exponential sweep".into()));
        }
        if self.memcpy_linear_min_bytes > self.memcpy_linear_max_bytes
            || self.memcpy_linear_step_bytes == 0
        {
            return Err(ConfigError::BadRange("memcpy linear sweep".into()));
        }
        if self.graph_min_len > self.graph_max_len || self.graph_min_len == 0 {
            return Err(ConfigError::BadRange("graph sweep".into()));
        }
        if self.warmup_iters == 0 || self.test_iters == 0 {
            return Err(ConfigError::BadRange("iteration counts".into()));
        }
        Ok(())
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            inline_startup_ns: self.inline_startup_ns,
            inline_sat_gibps: self.inline_sat_gibps,
            copy_startup_ns: self.copy_startup_ns,
            copy_sat_gibps: self.copy_sat_gibps,
            inline_max_bytes: self.inline_max_bytes,
            inline_calibration: self.inline_calibration.clone(),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            pid: self.pid,
            host_ram_bytes: self.host_ram_bytes,
            device_vram_bytes: self.device_vram_bytes,
            first_channel_id: self.first_channel_id,
            gp_ring_len: self.gp_ring_len,
            cost: self.cost_model(),
            node_cost_ns: self.node_cost_ns,
            auto_writeback: self.auto_writeback,
            ..SimConfig::default()
        }
    }

    pub fn driver_config(&self) -> DriverConfig {
        DriverConfig {
            inline_switch_bytes: self.inline_switch_bytes,
            max_segment_dwords: self.max_segment_dwords,
            ..DriverConfig::default()
        }
    }

    pub fn strategy(&self, kind: StrategyKind) -> LaunchStrategy {
        match kind {
            StrategyKind::Legacy118 => self.legacy118.clone(),
            StrategyKind::Modern130 => self.modern130.clone(),
        }
    }
}
