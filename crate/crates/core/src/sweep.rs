//! Sweep drivers: size sweeps over the two DMA engines and graph-length
//! sweeps over the two launch strategies. Every sweep point runs on its own
//! simulator instance, so points are independent; with the `parallel`
//! feature they fan out across a rayon pool, and either way rows come back
//! in sweep-index order, byte-identical between the two code paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::capture::{fit_bandwidth, FitResult};
use crate::config::ScenarioConfig;
use crate::driver::{
    build_coalesced_benchmark, graph_launch, graph_upload, measured_latency_ns, BenchTransfer,
    DriverError, GraphSpec, Stream, StrategyKind,
};
use crate::pbdma::EngineKind;
use crate::sim::Simulator;
use crate::vmem::{AllocTag, MemDomain};

pub type Result<T> = std::result::Result<T, DriverError>;

const RING_BASE: u64 = 0x2_0021_b000;
const PB_BASE: u64 = 0x2_0260_0000;
const PB_LEN: u64 = 4 << 20;
const SEM_BASE: u64 = 0x2_0070_0000;
const SEM_LEN: u64 = 64 << 10;
const SRC_BASE: u64 = 0x7fa8_2000_0000;
const DST_BASE: u64 = 0x7fa8_0e00_0000;

fn sweep_sim(cfg: &ScenarioConfig) -> Result<(Simulator, Stream)> {
    let mut sim = Simulator::new(cfg.sim_config());
    sim.mem.map(
        RING_BASE,
        u64::from(cfg.gp_ring_len) * 8,
        MemDomain::DeviceVram,
        AllocTag::Gpfifo,
    )?;
    sim.mem.map(PB_BASE, PB_LEN, MemDomain::HostRam, AllocTag::Pushbuffer)?;
    sim.mem.map(SEM_BASE, SEM_LEN, MemDomain::HostRam, AllocTag::SemaphoreBuf)?;
    let id = sim.create_channel(RING_BASE, cfg.gp_ring_len)?;
    let stream = Stream::new(id, PB_BASE, PB_LEN, SEM_BASE, SEM_LEN);
    Ok((sim, stream))
}

fn map_points<T, U, F>(points: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        points.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        points.into_iter().map(f).collect()
    }
}

fn map_points_seq<T, U, F>(points: Vec<T>, f: F) -> Result<Vec<U>>
where
    F: Fn(T) -> Result<U>,
{
    points.into_iter().map(f).collect()
}

// ---------------------------------------------------------------------------
// Memcpy sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemcpySweepRow {
    pub size_bytes: u64,
    pub engine: EngineKind,
    pub latency_ns: f64,
    pub bandwidth_gibps: f64,
}

/// Run one coalesced benchmark on a fresh simulator and report the
/// device-side per-iteration latency.
pub fn measure_transfer(cfg: &ScenarioConfig, engine: EngineKind, size: u64) -> Result<MemcpySweepRow> {
    let (mut sim, mut stream) = sweep_sim(cfg)?;
    let buf_len = size.next_multiple_of(crate::vmem::PAGE_SIZE);
    sim.mem.map(SRC_BASE, buf_len, MemDomain::HostRam, AllocTag::UserData)?;
    sim.mem.map(DST_BASE, buf_len, MemDomain::DeviceVram, AllocTag::UserData)?;
    let dcfg = cfg.driver_config();
    let trackers = build_coalesced_benchmark(
        &mut sim,
        &mut stream,
        &dcfg,
        BenchTransfer { engine, src_va: SRC_BASE, dst_va: DST_BASE, len: size },
        cfg.warmup_iters,
        cfg.test_iters,
    )?;
    let latency_ns = measured_latency_ns(&sim, &trackers)?;
    Ok(MemcpySweepRow {
        size_bytes: size,
        engine,
        latency_ns,
        bandwidth_gibps: size as f64 / latency_ns * 1e9 / (1u64 << 30) as f64,
    })
}

fn memcpy_points(cfg: &ScenarioConfig) -> Vec<(EngineKind, u64)> {
    let mut sizes = Vec::new();
    let mut s = cfg.memcpy_exp_min_bytes;
    while s <= cfg.memcpy_exp_max_bytes {
        sizes.push(s);
        s *= 2;
    }
    let mut s = cfg.memcpy_linear_min_bytes;
    while s <= cfg.memcpy_linear_max_bytes {
        sizes.push(s);
        s += cfg.memcpy_linear_step_bytes;
    }
    let mut points = Vec::new();
    for size in sizes {
        // The compute engine does not accept transfers above its cap, so
        // inline rows stop there.
        if size <= cfg.inline_max_bytes {
            points.push((EngineKind::ComputeInline, size));
        }
        points.push((EngineKind::CopyDirect, size));
    }
    points
}

pub fn run_memcpy_sweep(cfg: &ScenarioConfig) -> Result<Vec<MemcpySweepRow>> {
    map_points(memcpy_points(cfg), |(engine, size)| measure_transfer(cfg, engine, size))
}

/// Sequential twin of [`run_memcpy_sweep`]; same rows in the same order.
pub fn run_memcpy_sweep_seq(cfg: &ScenarioConfig) -> Result<Vec<MemcpySweepRow>> {
    map_points_seq(memcpy_points(cfg), |(engine, size)| measure_transfer(cfg, engine, size))
}

pub fn memcpy_rows_to_csv(rows: &[MemcpySweepRow]) -> String {
    let mut out = String::from("size_bytes,engine,latency_ns,bandwidth_gibps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.6}\n",
            r.size_bytes,
            r.engine.csv_name(),
            r.latency_ns,
            r.bandwidth_gibps
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Graph sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphSweepRow {
    pub length: u32,
    pub strategy: StrategyKind,
    pub emitted_bytes: u64,
    pub doorbells: u64,
    pub launch_time_ns: f64,
}

impl GraphSweepRow {
    pub fn launch_us(&self) -> f64 {
        self.launch_time_ns / 1000.0
    }
}

/// Launch a chain of `length` nodes under `strategy` on a fresh simulator,
/// with the capture watch installed. Command volume and doorbell count come
/// from the reconstructed records and are cross-checked against the
/// driver-side stats.
pub fn measure_graph_launch(
    cfg: &ScenarioConfig,
    strategy: StrategyKind,
    length: u32,
) -> Result<GraphSweepRow> {
    let (mut sim, mut stream) = sweep_sim(cfg)?;
    sim.capture.install_watch(&sim.channels).expect("fresh capture");
    let exec = graph_upload(
        GraphSpec { chain_length: length, node_cost_ns: cfg.node_cost_ns },
        cfg.strategy(strategy),
    )?;
    let dcfg = cfg.driver_config();
    let stats = graph_launch(&mut sim, &mut stream, &dcfg, &exec)?;
    let captured_bytes = sim.capture.total_footprint_bytes();
    let captured_doorbells = sim.capture.records.len() as u64;
    debug_assert_eq!(captured_bytes, stats.emitted_bytes);
    debug_assert_eq!(captured_doorbells, stats.doorbell_writes);
    Ok(GraphSweepRow {
        length,
        strategy,
        emitted_bytes: captured_bytes,
        doorbells: captured_doorbells,
        launch_time_ns: stats.launch_time_ns,
    })
}

#[derive(Debug, Clone)]
pub struct GraphSweepResult {
    pub rows: Vec<GraphSweepRow>,
    /// Effective-write-bandwidth fit per strategy over (bytes, launch ns).
    pub fits: Vec<(StrategyKind, FitResult)>,
}

fn graph_points(cfg: &ScenarioConfig) -> Vec<(StrategyKind, u32)> {
    let mut points = Vec::new();
    for strategy in [StrategyKind::Legacy118, StrategyKind::Modern130] {
        for n in cfg.graph_min_len..=cfg.graph_max_len {
            points.push((strategy, n));
        }
    }
    points
}

fn fit_rows(rows: &[GraphSweepRow]) -> Vec<(StrategyKind, FitResult)> {
    let mut fits = Vec::new();
    for strategy in [StrategyKind::Legacy118, StrategyKind::Modern130] {
        let samples: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| (r.emitted_bytes as f64, r.launch_time_ns))
            .collect();
        if let Ok(fit) = fit_bandwidth(&samples) {
            fits.push((strategy, fit));
        }
    }
    fits
}

pub fn run_graph_sweep(cfg: &ScenarioConfig) -> Result<GraphSweepResult> {
    let rows = map_points(graph_points(cfg), |(s, n)| measure_graph_launch(cfg, s, n))?;
    let fits = fit_rows(&rows);
    Ok(GraphSweepResult { rows, fits })
}

/// Sequential twin of [`run_graph_sweep`].
pub fn run_graph_sweep_seq(cfg: &ScenarioConfig) -> Result<GraphSweepResult> {
    let rows = map_points_seq(graph_points(cfg), |(s, n)| measure_graph_launch(cfg, s, n))?;
    let fits = fit_rows(&rows);
    Ok(GraphSweepResult { rows, fits })
}

pub fn graph_rows_to_csv(rows: &[GraphSweepRow]) -> String {
    let mut out = String::from("length,strategy,emitted_bytes,doorbells,launch_us\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.length,
            r.strategy.csv_name(),
            r.emitted_bytes,
            r.doorbells,
            r.launch_us()
        ));
    }
    out
}

pub fn graph_fit_summary(result: &GraphSweepResult, cfg: &ScenarioConfig) -> String {
    let mut out = String::new();
    for (strategy, fit) in &result.fits {
        out.push_str(&format!(
            "fit strategy={} range={}..{} slope_mibps={:.2} intercept_us={:.3} r2={:.6}\n",
            strategy.csv_name(),
            cfg.graph_min_len,
            cfg.graph_max_len,
            fit.slope_mibps(),
            fit.intercept_ns / 1000.0,
            fit.r2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig::parse(
            "memcpy_exp_min_bytes = 4\n\
             memcpy_exp_max_bytes = 64\n\
             memcpy_linear_min_bytes = 1024\n\
             memcpy_linear_max_bytes = 2048\n\
             warmup_iters = 1\n\
             test_iters = 2\n\
             graph_min_len = 1\n\
             graph_max_len = 80\n",
        )
        .unwrap()
    }

    #[test]
    fn memcpy_sweep_rows_ordered_and_deterministic() {
        let cfg = small_cfg();
        let a = run_memcpy_sweep(&cfg).unwrap();
        let b = run_memcpy_sweep(&cfg).unwrap();
        assert_eq!(a, b);
        // exp sizes 4..64 doubling (5) + linear 1024,2048 (2) = 7 sizes,
        // each with inline + copy rows
        assert_eq!(a.len(), 14);
        assert_eq!(a[0].size_bytes, 4);
        assert_eq!(a[0].engine, EngineKind::ComputeInline);
        assert_eq!(a[1].engine, EngineKind::CopyDirect);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let cfg = small_cfg();
        assert_eq!(run_memcpy_sweep(&cfg).unwrap(), run_memcpy_sweep_seq(&cfg).unwrap());
        let par = run_graph_sweep(&cfg).unwrap();
        let seq = run_graph_sweep_seq(&cfg).unwrap();
        assert_eq!(par.rows, seq.rows);
    }

    #[test]
    fn inline_rows_capped_at_engine_limit() {
        let mut cfg = small_cfg();
        cfg.memcpy_linear_max_bytes = 32 * 1024;
        cfg.memcpy_linear_step_bytes = 1024;
        cfg.memcpy_linear_min_bytes = 30 * 1024;
        let rows = run_memcpy_sweep(&cfg).unwrap();
        assert!(rows
            .iter()
            .any(|r| r.size_bytes == 31 * 1024 && r.engine == EngineKind::ComputeInline));
        assert!(!rows
            .iter()
            .any(|r| r.size_bytes == 32 * 1024 && r.engine == EngineKind::ComputeInline));
        assert!(rows.iter().any(|r| r.size_bytes == 32 * 1024 && r.engine == EngineKind::CopyDirect));
    }

    #[test]
    fn graph_sweep_staircase_and_doorbells() {
        let cfg = small_cfg();
        let result = run_graph_sweep(&cfg).unwrap();
        let legacy: Vec<_> =
            result.rows.iter().filter(|r| r.strategy == StrategyKind::Legacy118).collect();
        // Non-decreasing, piecewise-constant between chunk boundaries.
        for w in legacy.windows(2) {
            assert!(w[1].emitted_bytes >= w[0].emitted_bytes);
            if (w[0].length - 1) / 32 == (w[1].length - 1) / 32 {
                assert_eq!(w[0].emitted_bytes, w[1].emitted_bytes);
            }
        }
        for r in &result.rows {
            match r.strategy {
                StrategyKind::Legacy118 => {
                    assert_eq!(r.doorbells, u64::from(r.length.div_ceil(32)));
                }
                StrategyKind::Modern130 => assert_eq!(r.doorbells, 1),
            }
        }
    }

    #[test]
    fn graph_fits_recover_configured_bandwidths() {
        let cfg = small_cfg();
        let result = run_graph_sweep(&cfg).unwrap();
        for (strategy, fit) in &result.fits {
            let expect = match strategy {
                StrategyKind::Legacy118 => 220.0,
                StrategyKind::Modern130 => 440.0,
            };
            assert!(
                (fit.slope_mibps() - expect).abs() / expect < 1e-9,
                "{strategy:?}: {}",
                fit.slope_mibps()
            );
        }
    }

    #[test]
    fn csv_shapes() {
        let cfg = small_cfg();
        let rows = run_memcpy_sweep(&cfg).unwrap();
        let csv = memcpy_rows_to_csv(&rows);
        assert!(csv.starts_with("size_bytes,engine,latency_ns,bandwidth_gibps\n"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
        let g = run_graph_sweep(&cfg).unwrap();
        let csv = graph_rows_to_csv(&g.rows);
        assert!(csv.starts_with("length,strategy,emitted_bytes,doorbells,launch_us\n"));
    }
}
