//! Doorbell interception and submission reconstruction, plus the analysis
//! helpers built on the captured data (least-squares bandwidth fits,
//! observed-vs-raw gap percentages).
//!
//! The capture hook runs synchronously inside the doorbell path, before the
//! value is forwarded to the consumer: the producing side is quiescent while
//! a record is taken, so each record is a complete, intact view of exactly
//! the entries added since the previous doorbell on that channel. Per-channel
//! progress bookkeeping lives here, not in the channel, so installing or
//! removing the watch never perturbs channel state.

use std::collections::HashMap;

use serde_json::json;
use thiserror::Error;

use crate::channel::{render_gpfifo_summary, ChannelError, ChannelTable, GpfifoSnapshot};
use crate::codec::{decode_gpfifo_entry, decode_stream_partial, render_dword, ClassBindings, CodecError, DwordDecode};
use crate::vmem::{MemStore, VmemError};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("capture watch already installed")]
    AlreadyInstalled,
    #[error("bandwidth fit needs at least two distinct byte counts")]
    DegenerateInput,
    #[error("gap percentage requires observed >= raw > 0 (got observed {observed}, raw {raw})")]
    InvalidOrder { observed: f64, raw: f64 },
    #[error("trace line {line}: {reason}")]
    BadTrace { line: usize, reason: String },
    #[error(transparent)]
    Vmem(#[from] VmemError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

pub type Result<T> = std::result::Result<T, CaptureError>;

/// One reconstructed GPFIFO entry with the pushbuffer segment it references.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// VA of the ring slot holding this entry.
    pub entry_va: u64,
    pub raw: u64,
    pub pb_va: u64,
    pub length_dw: u32,
    pub dwords: Vec<u32>,
    pub decoded: Vec<DwordDecode>,
}

/// One intercepted submission.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub seq: u64,
    pub pid: u64,
    pub channel_id: u32,
    pub kernel_handle: u64,
    pub doorbell_value: u32,
    pub gp_get: u32,
    pub gp_put: u32,
    pub gp_base: u64,
    pub entries: Vec<TraceEntry>,
    pub footprint_bytes: u64,
}

/// Rebuild the submission state visible at a doorbell: entry VAs follow
/// `gp_base + (index % ring_len) * 8` for every index in
/// `[prev_put, gp_put)`; each entry's pushbuffer segment is read back through
/// the page table and decoded. Read-only with respect to simulator state.
pub fn reconstruct(
    mem: &MemStore,
    channels: &ChannelTable,
    bindings: &ClassBindings,
    channel_id: u32,
    prev_put: u32,
    doorbell_value: u32,
    pid: u64,
    seq: u64,
) -> Result<TraceRecord> {
    let ctx = channels.lookup(channel_id)?;
    let gp_put = ctx.userd.gp_put;
    let gp_get = ctx.consumer_gp_get();
    let gp_base = ctx.ramfc.gp_base;
    let ring_len = ctx.ramfc.gp_ring_len;

    let mut entries = Vec::new();
    let mut footprint_bytes = 0u64;
    for idx in prev_put..gp_put {
        let entry_va = gp_base + u64::from(idx % ring_len) * crate::codec::GP_ENTRY_SIZE;
        let raw = mem.read_u64(entry_va)?;
        let e = decode_gpfifo_entry(raw);
        let dwords = mem.read_dwords(e.pb_va, u64::from(e.length_dw))?;
        let (decoded, err) = decode_stream_partial(&dwords, bindings);
        if let Some(err) = err {
            return Err(err.into());
        }
        footprint_bytes += u64::from(e.length_dw) * 4;
        entries.push(TraceEntry {
            entry_va,
            raw,
            pb_va: e.pb_va,
            length_dw: e.length_dw,
            dwords,
            decoded,
        });
    }
    Ok(TraceRecord {
        seq,
        pid,
        channel_id,
        kernel_handle: ctx.kernel_handle,
        doorbell_value,
        gp_get,
        gp_put,
        gp_base,
        entries,
        footprint_bytes,
    })
}

/// The watchpoint stand-in. While installed, every doorbell write produces
/// exactly one record before the value reaches the consumer.
#[derive(Debug, Default)]
pub struct Capture {
    installed: bool,
    seq: u64,
    prev_put: HashMap<u32, u32>,
    pub records: Vec<TraceRecord>,
}

impl Capture {
    /// Install the watch. Channels that already exist start recording from
    /// their current GP_PUT, so pre-install traffic is never misattributed.
    pub fn install_watch(&mut self, channels: &ChannelTable) -> Result<()> {
        if self.installed {
            return Err(CaptureError::AlreadyInstalled);
        }
        self.installed = true;
        for &id in channels.ids() {
            let put = channels.lookup(id).expect("listed channel exists").userd.gp_put;
            self.prev_put.insert(id, put);
        }
        Ok(())
    }

    pub fn uninstall(&mut self) {
        self.installed = false;
        self.prev_put.clear();
    }

    pub fn is_installed(&self) -> bool {
        self.installed
    }

    /// Hook body, run synchronously in the doorbell path. Returns the new
    /// record's sequence number when one was taken.
    pub fn on_doorbell(
        &mut self,
        mem: &MemStore,
        channels: &ChannelTable,
        bindings: &ClassBindings,
        value: u32,
        pid: u64,
    ) -> Result<Option<u64>> {
        if !self.installed || !channels.contains(value) {
            return Ok(None);
        }
        let prev = *self.prev_put.get(&value).unwrap_or(&0);
        let record = reconstruct(mem, channels, bindings, value, prev, value, pid, self.seq)?;
        self.prev_put.insert(value, record.gp_put);
        self.seq += 1;
        let seq = record.seq;
        self.records.push(record);
        Ok(Some(seq))
    }

    pub fn total_footprint_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.footprint_bytes).sum()
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Render a record in the fixed trace layout: header lines, GPFIFO summary,
/// then each new entry's dwords with their decode annotations.
pub fn render_trace(rec: &TraceRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("Doorbell hit, pid {}\n", rec.pid));
    out.push_str(&format!(
        "value 0x{:x}, Kernel Channel 0x{:016X}\n",
        rec.doorbell_value, rec.kernel_handle
    ));
    let snap = GpfifoSnapshot {
        gp_get: rec.gp_get,
        gp_put: rec.gp_put,
        gp_base: rec.gp_base,
        newest_entry: rec.entries.last().map(|e| (e.entry_va, e.raw)),
    };
    out.push_str(&render_gpfifo_summary(&snap));
    for entry in &rec.entries {
        out.push_str(&format!("Pushbuffer Entries count {}\n", entry.length_dw));
        render_pb_entries(&entry.dwords, &entry.decoded, &mut out);
    }
    out
}

fn render_pb_entries(dwords: &[u32], decoded: &[DwordDecode], out: &mut String) {
    // one annotation per dword, by construction of the stream decoder
    for (idx, (raw, d)) in dwords.iter().zip(decoded).enumerate() {
        render_dword(idx, *raw, d, out);
    }
}

// ---------------------------------------------------------------------------
// JSON-lines trace files
// ---------------------------------------------------------------------------

fn hex(v: u64) -> String {
    format!("0x{v:x}")
}

fn parse_hex(s: &str, line: usize, what: &str) -> Result<u64> {
    let digits = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(digits, 16)
        .map_err(|_| CaptureError::BadTrace { line, reason: format!("bad hex for {what}: {s}") })
}

impl TraceRecord {
    /// One JSON object, every integer rendered as a hex string so 64-bit
    /// values survive any JSON reader.
    pub fn to_json(&self) -> String {
        let entries: Vec<_> = self
            .entries
            .iter()
            .map(|e| {
                json!({
                    "entry_va": hex(e.entry_va),
                    "raw": format!("0x{:016x}", e.raw),
                    "pb_va": hex(e.pb_va),
                    "length_dw": hex(e.length_dw.into()),
                    "dwords": e.dwords.iter().map(|d| format!("0x{d:08x}")).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "seq": hex(self.seq),
            "pid": hex(self.pid),
            "channel_id": hex(self.channel_id.into()),
            "kernel_handle": format!("0x{:016x}", self.kernel_handle),
            "doorbell_value": hex(self.doorbell_value.into()),
            "gp_get": hex(self.gp_get.into()),
            "gp_put": hex(self.gp_put.into()),
            "gp_base": hex(self.gp_base),
            "footprint_bytes": hex(self.footprint_bytes),
            "entries": entries,
        })
        .to_string()
    }

    /// Parse one JSON-lines record and re-derive the decode annotations.
    pub fn from_json(text: &str, line: usize, bindings: &ClassBindings) -> Result<TraceRecord> {
        let v: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CaptureError::BadTrace { line, reason: e.to_string() })?;
        let field = |name: &str| -> Result<u64> {
            let s = v
                .get(name)
                .and_then(|x| x.as_str())
                .ok_or_else(|| CaptureError::BadTrace { line, reason: format!("missing {name}") })?;
            parse_hex(s, line, name)
        };
        let mut entries = Vec::new();
        for je in v.get("entries").and_then(|x| x.as_array()).unwrap_or(&Vec::new()) {
            let efield = |name: &str| -> Result<u64> {
                let s = je.get(name).and_then(|x| x.as_str()).ok_or_else(|| {
                    CaptureError::BadTrace { line, reason: format!("missing entry {name}") }
                })?;
                parse_hex(s, line, name)
            };
            let mut dwords = Vec::new();
            for d in je.get("dwords").and_then(|x| x.as_array()).unwrap_or(&Vec::new()) {
                let s = d.as_str().ok_or_else(|| CaptureError::BadTrace {
                    line,
                    reason: "dword is not a string".into(),
                })?;
                dwords.push(parse_hex(s, line, "dword")? as u32);
            }
            let (decoded, err) = decode_stream_partial(&dwords, bindings);
            if let Some(err) = err {
                return Err(err.into());
            }
            entries.push(TraceEntry {
                entry_va: efield("entry_va")?,
                raw: efield("raw")?,
                pb_va: efield("pb_va")?,
                length_dw: efield("length_dw")? as u32,
                dwords,
                decoded,
            });
        }
        let footprint_bytes = field("footprint_bytes")?;
        Ok(TraceRecord {
            seq: field("seq")?,
            pid: field("pid")?,
            channel_id: field("channel_id")? as u32,
            kernel_handle: field("kernel_handle")?,
            doorbell_value: field("doorbell_value")? as u32,
            gp_get: field("gp_get")? as u32,
            gp_put: field("gp_put")? as u32,
            gp_base: field("gp_base")?,
            entries,
            footprint_bytes,
        })
    }
}

pub fn records_to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json());
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str, bindings: &ClassBindings) -> Result<Vec<TraceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| TraceRecord::from_json(l, i + 1, bindings))
        .collect()
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

/// Ordinary least squares of time against bytes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub slope_bytes_per_ns: f64,
    pub intercept_ns: f64,
    pub r2: f64,
}

impl FitResult {
    /// The fitted slope as an effective write bandwidth.
    pub fn slope_mibps(&self) -> f64 {
        self.slope_bytes_per_ns * 1e9 / (1u64 << 20) as f64
    }
}

/// Fit `ns = intercept + slope * bytes` over (bytes, ns) samples and report
/// the inverted slope as bytes/ns.
pub fn fit_bandwidth(samples: &[(f64, f64)]) -> Result<FitResult> {
    if samples.len() < 2 {
        return Err(CaptureError::DegenerateInput);
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in samples {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(CaptureError::DegenerateInput);
    }
    let slope_ns_per_byte = sxy / sxx;
    let intercept_ns = mean_y - slope_ns_per_byte * mean_x;
    let ss_res: f64 = samples
        .iter()
        .map(|(x, y)| {
            let e = y - (intercept_ns + slope_ns_per_byte * x);
            e * e
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(FitResult { slope_bytes_per_ns: 1.0 / slope_ns_per_byte, intercept_ns, r2 })
}

/// Fraction of an observed duration not accounted for by raw execution,
/// in percent.
pub fn gap_percent(t_observed_ns: f64, t_raw_ns: f64) -> Result<f64> {
    if !(t_raw_ns > 0.0 && t_observed_ns >= t_raw_ns) {
        return Err(CaptureError::InvalidOrder { observed: t_observed_ns, raw: t_raw_ns });
    }
    Ok(100.0 * (t_observed_ns - t_raw_ns) / t_observed_ns)
}
