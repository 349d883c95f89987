//! Channel contexts and the doorbell: the GP_PUT/GP_GET replicas held in
//! USERD (userspace window), RAMFC (saved context), and the live PBDMA
//! registers, plus the propagation rules between them.
//!
//! Replica roles:
//! - USERD holds the freshest GP_PUT while the channel runs; GP_GET is only
//!   written back there on request.
//! - RAMFC is frozen while the channel runs and only updated by a context
//!   save; a restore loads it back into the PBDMA registers.
//! - The PBDMA registers are the consumer's live view. A doorbell write makes
//!   the consumer reload GP_PUT from USERD.
//!
//! Indices are free-running 32-bit counters; the ring slot is
//! `index % ring_len`, which keeps monotonicity checkable and full/empty
//! unambiguous.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{GpFifoEntry, GP_ENTRY_SIZE};
use crate::vmem::{MemStore, VmemError};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("gpfifo ring va 0x{0:x} is not mapped")]
    VaUnmapped(u64),
    #[error("gpfifo ring full: gp_put {gp_put} gp_get {gp_get} ring_len {ring_len}")]
    RingFull { gp_put: u32, gp_get: u32, ring_len: u32 },
    #[error("channel {0:#x} not registered")]
    NoSuchChannel(u32),
    #[error("channel {channel:#x} is {actual}, expected {expected}")]
    BadState { channel: u32, expected: &'static str, actual: &'static str },
    #[error(transparent)]
    Vmem(#[from] VmemError),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelState {
    Idle,
    Running,
    SwitchedOut,
}

impl ChannelState {
    fn name(self) -> &'static str {
        match self {
            ChannelState::Idle => "Idle",
            ChannelState::Running => "Running",
            ChannelState::SwitchedOut => "SwitchedOut",
        }
    }
}

/// The user-visible per-channel window.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Userd {
    pub gp_put: u32,
    pub gp_get: u32,
}

/// Saved execution state; only touched by context save/restore.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Ramfc {
    pub gp_put: u32,
    pub gp_get: u32,
    pub gp_base: u64,
    pub gp_ring_len: u32,
}

/// Live consumer registers while the channel is scheduled.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PbdmaRegs {
    /// GP_PUT as loaded from USERD at the last doorbell.
    pub gp_put: u32,
    pub gp_get: u32,
    pub gp_base: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelContext {
    pub channel_id: u32,
    /// Opaque kernel-object token printed in traces.
    pub kernel_handle: u64,
    pub userd: Userd,
    pub ramfc: Ramfc,
    pub pbdma_regs: Option<PbdmaRegs>,
    pub state: ChannelState,
}

impl ChannelContext {
    /// The consumer-visible GP_GET: live registers when scheduled, the saved
    /// context otherwise.
    pub fn consumer_gp_get(&self) -> u32 {
        match &self.pbdma_regs {
            Some(r) => r.gp_get,
            None => self.ramfc.gp_get,
        }
    }

    pub fn assert_replica_order(&self) {
        debug_assert!(self.userd.gp_get <= self.userd.gp_put);
        debug_assert!(self.ramfc.gp_get <= self.ramfc.gp_put);
        if let Some(r) = &self.pbdma_regs {
            debug_assert!(r.gp_get <= r.gp_put);
        }
    }
}

/// The one global doorbell register: a shadow MMIO page that retains the
/// last written channel ID for the capture path, while architectural reads
/// of the register itself return zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DoorbellRegister {
    /// VA of the doorbell slot inside the mapped MMIO page.
    pub va: u64,
    pub last_value: u32,
}

fn default_kernel_handle(channel_id: u32) -> u64 {
    // splitmix64 of the channel id: stable, distinct, opaque-looking.
    let mut z = (channel_id as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Kernel-side channel table: the lookup that maps an intercepted doorbell
/// value back to the channel's backing state.
#[derive(Debug)]
pub struct ChannelTable {
    channels: HashMap<u32, ChannelContext>,
    order: Vec<u32>,
    next_id: u32,
    pub doorbell: DoorbellRegister,
}

impl ChannelTable {
    pub fn new(first_channel_id: u32, doorbell_va: u64) -> Self {
        ChannelTable {
            channels: HashMap::new(),
            order: Vec::new(),
            next_id: first_channel_id,
            doorbell: DoorbellRegister { va: doorbell_va, last_value: 0 },
        }
    }

    pub fn create_channel(&mut self, mem: &MemStore, gp_base: u64, gp_ring_len: u32) -> Result<u32> {
        if !mem.is_mapped(gp_base, u64::from(gp_ring_len) * GP_ENTRY_SIZE) {
            return Err(ChannelError::VaUnmapped(gp_base));
        }
        let id = self.next_id;
        self.next_id += 1;
        let ctx = ChannelContext {
            channel_id: id,
            kernel_handle: default_kernel_handle(id),
            userd: Userd::default(),
            ramfc: Ramfc { gp_put: 0, gp_get: 0, gp_base, gp_ring_len },
            pbdma_regs: None,
            state: ChannelState::Idle,
        };
        self.channels.insert(id, ctx);
        self.order.push(id);
        Ok(id)
    }

    pub fn lookup(&self, channel_id: u32) -> Result<&ChannelContext> {
        self.channels.get(&channel_id).ok_or(ChannelError::NoSuchChannel(channel_id))
    }

    pub fn lookup_mut(&mut self, channel_id: u32) -> Result<&mut ChannelContext> {
        self.channels.get_mut(&channel_id).ok_or(ChannelError::NoSuchChannel(channel_id))
    }

    pub fn contains(&self, channel_id: u32) -> bool {
        self.channels.contains_key(&channel_id)
    }

    pub fn ids(&self) -> &[u32] {
        &self.order
    }

    pub fn set_kernel_handle(&mut self, channel_id: u32, handle: u64) -> Result<()> {
        self.lookup_mut(channel_id)?.kernel_handle = handle;
        Ok(())
    }

    /// Driver-side submission: write the entry into the next ring slot and
    /// advance GP_PUT in USERD.
    pub fn submit_entry(&mut self, mem: &mut MemStore, channel_id: u32, entry: GpFifoEntry) -> Result<u64> {
        let ctx = self.lookup_mut(channel_id)?;
        let consumer_get = ctx.consumer_gp_get();
        let ring_len = ctx.ramfc.gp_ring_len;
        if ctx.userd.gp_put.wrapping_sub(consumer_get) >= ring_len {
            return Err(ChannelError::RingFull {
                gp_put: ctx.userd.gp_put,
                gp_get: consumer_get,
                ring_len,
            });
        }
        let slot = ctx.userd.gp_put % ring_len;
        let va = ctx.ramfc.gp_base + u64::from(slot) * GP_ENTRY_SIZE;
        mem.write_u64(va, entry.raw)?;
        ctx.userd.gp_put = ctx.userd.gp_put.wrapping_add(1);
        ctx.assert_replica_order();
        Ok(va)
    }

    /// The raw doorbell write: store the channel ID to the shadow page and
    /// remember it. Never fails; a bogus channel ID surfaces when the
    /// consumer tries to look it up.
    pub fn doorbell_write(&mut self, mem: &mut MemStore, value: u32) {
        mem.write_u32(self.doorbell.va, value).expect("doorbell page mapped at init");
        self.doorbell.last_value = value;
    }

    /// Consumer-side reaction to the doorbell: load the freshest GP_PUT from
    /// USERD into the PBDMA registers, scheduling the channel if idle.
    pub fn load_userd(&mut self, channel_id: u32) -> Result<()> {
        let ctx = self.lookup_mut(channel_id)?;
        match ctx.state {
            ChannelState::Idle => {
                ctx.pbdma_regs = Some(PbdmaRegs {
                    gp_put: ctx.userd.gp_put,
                    gp_get: ctx.ramfc.gp_get,
                    gp_base: ctx.ramfc.gp_base,
                });
                ctx.state = ChannelState::Running;
            }
            ChannelState::Running => {
                let regs = ctx.pbdma_regs.as_mut().expect("running channel has live regs");
                regs.gp_put = ctx.userd.gp_put;
            }
            ChannelState::SwitchedOut => {
                return Err(ChannelError::BadState {
                    channel: channel_id,
                    expected: "Idle or Running",
                    actual: ctx.state.name(),
                });
            }
        }
        self.lookup(channel_id)?.assert_replica_order();
        Ok(())
    }

    pub fn context_save(&mut self, channel_id: u32) -> Result<()> {
        let ctx = self.lookup_mut(channel_id)?;
        if ctx.state != ChannelState::Running {
            return Err(ChannelError::BadState {
                channel: channel_id,
                expected: "Running",
                actual: ctx.state.name(),
            });
        }
        let regs = ctx.pbdma_regs.take().expect("running channel has live regs");
        ctx.ramfc.gp_put = regs.gp_put;
        ctx.ramfc.gp_get = regs.gp_get;
        ctx.state = ChannelState::SwitchedOut;
        Ok(())
    }

    pub fn context_restore(&mut self, channel_id: u32) -> Result<()> {
        let ctx = self.lookup_mut(channel_id)?;
        if ctx.state != ChannelState::SwitchedOut {
            return Err(ChannelError::BadState {
                channel: channel_id,
                expected: "SwitchedOut",
                actual: ctx.state.name(),
            });
        }
        ctx.pbdma_regs = Some(PbdmaRegs {
            gp_put: ctx.ramfc.gp_put,
            gp_get: ctx.ramfc.gp_get,
            gp_base: ctx.ramfc.gp_base,
        });
        ctx.state = ChannelState::Running;
        Ok(())
    }

    /// Write the consumer index back to USERD (Fig-style step 4; the real GPU
    /// does this periodically when configured, we expose it explicitly).
    pub fn writeback_gp_get(&mut self, channel_id: u32) -> Result<()> {
        let ctx = self.lookup_mut(channel_id)?;
        match &ctx.pbdma_regs {
            Some(regs) if ctx.state == ChannelState::Running => {
                ctx.userd.gp_get = regs.gp_get;
                Ok(())
            }
            _ => Err(ChannelError::BadState {
                channel: channel_id,
                expected: "Running",
                actual: ctx.state.name(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// GPFIFO summary snapshot
// ---------------------------------------------------------------------------

/// The state block printed at the head of a trace record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpfifoSnapshot {
    pub gp_get: u32,
    pub gp_put: u32,
    pub gp_base: u64,
    /// VA and raw value of the newest entry, absent when the ring is empty.
    pub newest_entry: Option<(u64, u64)>,
}

impl ChannelTable {
    pub fn snapshot(&self, mem: &MemStore, channel_id: u32) -> Result<GpfifoSnapshot> {
        let ctx = self.lookup(channel_id)?;
        let gp_put = ctx.userd.gp_put;
        let gp_get = ctx.consumer_gp_get();
        let gp_base = ctx.ramfc.gp_base;
        let newest_entry = if gp_put == 0 {
            None
        } else {
            let idx = gp_put - 1;
            let va = gp_base + u64::from(idx % ctx.ramfc.gp_ring_len) * GP_ENTRY_SIZE;
            Some((va, mem.read_u64(va)?))
        };
        Ok(GpfifoSnapshot { gp_get, gp_put, gp_base, newest_entry })
    }
}

/// Render the snapshot in the fixed trace layout.
pub fn render_gpfifo_summary(snap: &GpfifoSnapshot) -> String {
    let mut out = String::new();
    out.push_str("=====   GPFIFO SUMMARY   =====\n");
    out.push_str(&format!("{:<12}{:<10}: {}\n", "GP_GET", "(index)", snap.gp_get));
    out.push_str(&format!("{:<12}{:<10}: {}\n", "GP_PUT", "(index)", snap.gp_put));
    out.push_str(&format!("{:<12}{:<10}: 0x{:x}\n", "GP_base", "(VA)", snap.gp_base));
    if let Some((va, raw)) = snap.newest_entry {
        out.push_str(&format!("{:<12}{:<10}: 0x{:x}\n", "GP_NEWENTRY", "(VA)", va));
        out.push_str(&format!("{:<12}{:<10}: 0x{:016x}\n", "GP_NEWENTRY", "", raw));
    }
    out.push_str("===== END GPFIFO SUMMARY =====\n");
    out
}
