//! The assembled simulator: memory, channel table, consumer, and capture,
//! wired together along the doorbell path.

use thiserror::Error;

use crate::capture::{Capture, CaptureError};
use crate::channel::{ChannelError, ChannelTable};
use crate::codec::ClassBindings;
use crate::pbdma::{CostModel, ExecError, ExecutionReport, Pbdma};
use crate::vmem::{AllocTag, MemDomain, MemStore, VmemError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Vmem(#[from] VmemError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Process-ID analog printed in trace headers.
    pub pid: u64,
    pub host_ram_bytes: u64,
    pub device_vram_bytes: u64,
    pub mmio_bytes: u64,
    /// VA where the MMIO window (and in it the doorbell) is mapped.
    pub mmio_va: u64,
    /// Doorbell register offset inside the MMIO window.
    pub doorbell_offset: u64,
    pub first_channel_id: u32,
    pub gp_ring_len: u32,
    pub cost: CostModel,
    /// Simulated cost of one graph kernel node.
    pub node_cost_ns: f64,
    /// Mirror GP_GET into USERD after every consumed entry.
    pub auto_writeback: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            pid: 1000,
            host_ram_bytes: 1 << 31,
            device_vram_bytes: 1 << 31,
            mmio_bytes: 1 << 16,
            mmio_va: 0x7ffe_0000_0000,
            doorbell_offset: 0x90,
            first_channel_id: 0x10011,
            gp_ring_len: 1024,
            cost: CostModel::default(),
            node_cost_ns: 0.0,
            auto_writeback: false,
        }
    }
}

/// What one doorbell ring did: the capture record it produced (if the watch
/// is installed) and the consumer's execution report.
#[derive(Debug)]
pub struct RingOutcome {
    pub record_seq: Option<u64>,
    pub report: ExecutionReport,
}

#[derive(Debug)]
pub struct Simulator {
    pub mem: MemStore,
    pub channels: ChannelTable,
    pub pbdma: Pbdma,
    pub capture: Capture,
    pub bindings: ClassBindings,
    pub pid: u64,
    pub gp_ring_len: u32,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Self {
        let mut mem = MemStore::new(cfg.host_ram_bytes, cfg.device_vram_bytes, cfg.mmio_bytes);
        mem.map(cfg.mmio_va, crate::vmem::PAGE_SIZE, MemDomain::Mmio, AllocTag::Unknown)
            .expect("mmio window maps at init");
        let doorbell_va = cfg.mmio_va + cfg.doorbell_offset;
        let (_, db_pa) = mem.translate(doorbell_va).expect("doorbell page just mapped");
        mem.set_doorbell_pa(db_pa);
        let channels = ChannelTable::new(cfg.first_channel_id, doorbell_va);
        let mut pbdma = Pbdma::new(cfg.cost);
        pbdma.node_cost_ns = cfg.node_cost_ns;
        pbdma.auto_writeback = cfg.auto_writeback;
        Simulator {
            mem,
            channels,
            pbdma,
            capture: Capture::default(),
            bindings: ClassBindings::default(),
            pid: cfg.pid,
            gp_ring_len: cfg.gp_ring_len,
        }
    }

    pub fn create_channel(&mut self, gp_base: u64, ring_len: u32) -> Result<u32> {
        Ok(self.channels.create_channel(&self.mem, gp_base, ring_len)?)
    }

    /// Ring the doorbell with a channel ID. The write lands in the shadow
    /// page, the capture hook (when installed) runs to completion over the
    /// quiescent channel, and only then is the value forwarded: the consumer
    /// loads GP_PUT from USERD and drains the ring.
    pub fn ring_doorbell(&mut self, value: u32) -> Result<RingOutcome> {
        self.channels.doorbell_write(&mut self.mem, value);
        let record_seq =
            self.capture.on_doorbell(&self.mem, &self.channels, &self.bindings, value, self.pid)?;
        if !self.channels.contains(value) {
            return Err(ChannelError::NoSuchChannel(value).into());
        }
        self.channels.load_userd(value)?;
        let report = self.pbdma.consume(&mut self.mem, &mut self.channels, value, &self.bindings)?;
        Ok(RingOutcome { record_seq, report })
    }
}
