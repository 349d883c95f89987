//! Bit-exact codecs for the command-stream wire formats: pushbuffer method
//! headers, GPFIFO ring descriptors, and the LAUNCH_DMA flag word, plus the
//! data-driven class/method name tables used to annotate decoded streams.
//!
//! Method header, 32 bits:
//!
//! ```text
//!   31:29  opcode   (Inc=0b001, NonInc=0b011, OneInc=0b101, Immediate=0b100)
//!   28:16  count    payload dwords, or the immediate data value
//!   15:13  subchannel
//!   12:0   addr_dw  method address in dwords (byte offset = addr_dw * 4)
//! ```
//!
//! GPFIFO entry, 64 bits:
//!
//! ```text
//!   1:0    fetch bits, zero here
//!   31:2   pushbuffer VA bits 31:2
//!   39:32  pushbuffer VA bits 39:32
//!   40     PRIV flag
//!   41     LEVEL flag
//!   62:42  segment length in dwords
//!   63     SYNC flag, zero here
//! ```
//!
//! Pushbuffer VAs carried by GPFIFO entries are limited to 40 bits; wider
//! addresses are an encode error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unknown method-header opcode in word 0x{0:08x}")]
    UnknownOpcode(u32),
    #[error("header field {field} value 0x{value:x} exceeds its width")]
    FieldOverflow { field: &'static str, value: u64 },
    #[error("pushbuffer va 0x{0:x} is not dword-aligned")]
    MisalignedVa(u64),
    #[error("stream truncated: header at dword {header_at} wants {want} payload dwords, {have} left")]
    TruncatedStream { header_at: usize, want: usize, have: usize },
    #[error("malformed table line {line}: {reason}")]
    BadTable { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, CodecError>;

// ---------------------------------------------------------------------------
// Method headers
// ---------------------------------------------------------------------------

/// How the method address advances across the payload words that follow a
/// header. `Inc` is the form seen in captured submissions; the other opcodes
/// follow the public class headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodOp {
    /// Address advances one dword per payload word.
    Inc,
    /// Address stays fixed for every payload word.
    NonInc,
    /// Address advances once, then stays fixed.
    OneInc,
    /// Data is carried in the count field; no payload words.
    Immediate,
}

impl MethodOp {
    fn code(self) -> u32 {
        match self {
            MethodOp::Inc => 0b001,
            MethodOp::NonInc => 0b011,
            MethodOp::OneInc => 0b101,
            MethodOp::Immediate => 0b100,
        }
    }

    fn from_code(code: u32) -> Option<MethodOp> {
        match code {
            0b001 => Some(MethodOp::Inc),
            0b011 => Some(MethodOp::NonInc),
            0b101 => Some(MethodOp::OneInc),
            0b100 => Some(MethodOp::Immediate),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodOp::Inc => "INC",
            MethodOp::NonInc => "NONINC",
            MethodOp::OneInc => "ONEINC",
            MethodOp::Immediate => "IMMD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodHeader {
    pub op: MethodOp,
    /// Payload dword count, or the immediate data value for `Immediate`.
    pub count: u16,
    pub subchannel: u8,
    /// Method address in dwords; byte offset = `addr_dw * 4`.
    pub addr_dw: u16,
}

impl MethodHeader {
    pub fn byte_offset(&self) -> u32 {
        u32::from(self.addr_dw) * 4
    }
}

pub fn decode_header(word: u32) -> Result<MethodHeader> {
    let op = MethodOp::from_code(word >> 29).ok_or(CodecError::UnknownOpcode(word))?;
    Ok(MethodHeader {
        op,
        count: ((word >> 16) & 0x1fff) as u16,
        subchannel: ((word >> 13) & 0x7) as u8,
        addr_dw: (word & 0x1fff) as u16,
    })
}

pub fn encode_header(h: &MethodHeader) -> Result<u32> {
    if h.count > 0x1fff {
        return Err(CodecError::FieldOverflow { field: "count", value: h.count as u64 });
    }
    if h.subchannel > 0x7 {
        return Err(CodecError::FieldOverflow { field: "subchannel", value: h.subchannel as u64 });
    }
    if h.addr_dw > 0x1fff {
        return Err(CodecError::FieldOverflow { field: "addr_dw", value: h.addr_dw as u64 });
    }
    Ok((h.op.code() << 29)
        | ((h.count as u32) << 16)
        | ((h.subchannel as u32) << 13)
        | h.addr_dw as u32)
}

// ---------------------------------------------------------------------------
// GPFIFO entries
// ---------------------------------------------------------------------------

pub const GP_ENTRY_SIZE: u64 = 8;
const PB_VA_BITS: u32 = 40;
const LENGTH_DW_BITS: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpFifoEntry {
    pub pb_va: u64,
    pub length_dw: u32,
    pub raw: u64,
}

impl GpFifoEntry {
    pub fn new(pb_va: u64, length_dw: u32) -> Result<GpFifoEntry> {
        Self::with_flags(pb_va, length_dw, false, false)
    }

    pub fn with_flags(pb_va: u64, length_dw: u32, priv_: bool, level: bool) -> Result<GpFifoEntry> {
        if pb_va % 4 != 0 {
            return Err(CodecError::MisalignedVa(pb_va));
        }
        if pb_va >> PB_VA_BITS != 0 {
            return Err(CodecError::FieldOverflow { field: "pb_va", value: pb_va });
        }
        if length_dw >> LENGTH_DW_BITS != 0 {
            return Err(CodecError::FieldOverflow { field: "length_dw", value: length_dw as u64 });
        }
        let raw = (pb_va & 0xffff_fffc)
            | ((pb_va >> 32) & 0xff) << 32
            | (priv_ as u64) << 40
            | (level as u64) << 41
            | (length_dw as u64) << 42;
        Ok(GpFifoEntry { pb_va, length_dw, raw })
    }

    /// The entry shape the production driver submits: LEVEL bit set, as seen
    /// in captured ring contents.
    pub fn for_submission(pb_va: u64, length_dw: u32) -> Result<GpFifoEntry> {
        Self::with_flags(pb_va, length_dw, false, true)
    }

    pub fn priv_flag(&self) -> bool {
        (self.raw >> 40) & 1 != 0
    }

    pub fn level_flag(&self) -> bool {
        (self.raw >> 41) & 1 != 0
    }
}

pub fn decode_gpfifo_entry(raw: u64) -> GpFifoEntry {
    GpFifoEntry {
        pb_va: (raw & 0xffff_fffc) | (((raw >> 32) & 0xff) << 32),
        length_dw: ((raw >> 42) & 0x1f_ffff) as u32,
        raw,
    }
}

pub fn encode_gpfifo_entry(pb_va: u64, length_dw: u32) -> Result<u64> {
    Ok(GpFifoEntry::new(pb_va, length_dw)?.raw)
}

// ---------------------------------------------------------------------------
// LAUNCH_DMA flag word
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LaunchDmaFields {
    /// Bits 1:0. 0=NONE, 1=PIPELINED, 2=NON_PIPELINED.
    pub data_transfer_type: u8,
    /// Bit 2.
    pub flush_enable: bool,
    /// Bits 4:3.
    pub semaphore_type: u8,
    /// Bit 7. 0=BLOCKLINEAR, 1=PITCH.
    pub src_memory_layout: u8,
    /// Bit 8. 0=BLOCKLINEAR, 1=PITCH.
    pub dst_memory_layout: u8,
    /// Bit 9.
    pub multi_line_enable: bool,
    /// Bit 12. 0=VIRTUAL, 1=PHYSICAL.
    pub src_type: u8,
    /// Bit 13. 0=VIRTUAL, 1=PHYSICAL.
    pub dst_type: u8,
    /// Any bits outside the fields above, reported raw.
    pub unknown_bits: u32,
}

const LAUNCH_DMA_KNOWN_MASK: u32 = 0b11_0011_1001_1111;

pub fn decode_launch_dma(data: u32) -> LaunchDmaFields {
    LaunchDmaFields {
        data_transfer_type: (data & 0x3) as u8,
        flush_enable: data & (1 << 2) != 0,
        semaphore_type: ((data >> 3) & 0x3) as u8,
        src_memory_layout: ((data >> 7) & 1) as u8,
        dst_memory_layout: ((data >> 8) & 1) as u8,
        multi_line_enable: data & (1 << 9) != 0,
        src_type: ((data >> 12) & 1) as u8,
        dst_type: ((data >> 13) & 1) as u8,
        unknown_bits: data & !LAUNCH_DMA_KNOWN_MASK,
    }
}

pub fn encode_launch_dma(f: &LaunchDmaFields) -> u32 {
    (f.data_transfer_type as u32 & 0x3)
        | (f.flush_enable as u32) << 2
        | (f.semaphore_type as u32 & 0x3) << 3
        | (f.src_memory_layout as u32 & 1) << 7
        | (f.dst_memory_layout as u32 & 1) << 8
        | (f.multi_line_enable as u32) << 9
        | (f.src_type as u32 & 1) << 12
        | (f.dst_type as u32 & 1) << 13
        | f.unknown_bits
}

// ---------------------------------------------------------------------------
// Class/method tables
// ---------------------------------------------------------------------------

/// Sub-field of a method's data word: `NAME:hi:lo` with optional value labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub hi: u8,
    pub lo: u8,
    pub labels: Vec<(String, u32)>,
}

impl FieldSpec {
    pub fn extract(&self, data: u32) -> u32 {
        let width = self.hi - self.lo + 1;
        let mask = if width >= 32 { u32::MAX } else { (1u32 << width) - 1 };
        (data >> self.lo) & mask
    }

    pub fn label_for(&self, value: u32) -> Option<&str> {
        self.labels.iter().find(|(_, v)| *v == value).map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodDef {
    pub name: String,
    pub fields: Vec<FieldSpec>,
}

/// Method-name tables keyed by (class, byte offset), plus the default class
/// names. Loaded from the embedded table file or a user-supplied one.
#[derive(Debug, Clone, Default)]
pub struct MethodTable {
    methods: HashMap<(u16, u32), MethodDef>,
}

pub const AMPERE_DMA_CLASS: u16 = 0xc7b5;
pub const AMPERE_DMA_CLASS_NAME: &str = "AMPERE_DMA_COPY_B";

/// Known byte offsets of the copy-class methods.
pub mod method_offsets {
    pub const OFFSET_IN_UPPER: u32 = 0x400;
    pub const OFFSET_IN_LOWER: u32 = 0x404;
    pub const OFFSET_OUT_UPPER: u32 = 0x408;
    pub const OFFSET_OUT_LOWER: u32 = 0x40c;
    pub const LINE_LENGTH_IN: u32 = 0x418;
    pub const LAUNCH_DMA: u32 = 0x300;
    pub const SEM_ADDR_HI: u32 = 0x240;
    pub const SEM_ADDR_LO: u32 = 0x244;
    pub const SEM_PAYLOAD: u32 = 0x248;
    pub const SEM_EXECUTE: u32 = 0x24c;
    pub const LOAD_INLINE_DATA: u32 = 0x700;
}

const EMBEDDED_TABLE: &str = include_str!("data/ampere_dma.table");

impl MethodTable {
    pub fn embedded() -> MethodTable {
        Self::parse(EMBEDDED_TABLE).expect("embedded table parses")
    }

    pub fn load(path: &Path) -> Result<MethodTable> {
        let text = std::fs::read_to_string(path).map_err(|e| CodecError::BadTable {
            line: 0,
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<MethodTable> {
        let mut methods = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bad = |reason: &str| CodecError::BadTable { line: idx + 1, reason: reason.into() };
            let class = parts.next().ok_or_else(|| bad("missing class id"))?;
            let class = u16::from_str_radix(class.trim_start_matches("0x"), 16)
                .map_err(|_| bad("class id is not hex"))?;
            let off = parts.next().ok_or_else(|| bad("missing method offset"))?;
            let off = u32::from_str_radix(off.trim_start_matches("0x"), 16)
                .map_err(|_| bad("method offset is not hex"))?;
            let name = parts.next().ok_or_else(|| bad("missing method name"))?.to_string();
            let mut fields = Vec::new();
            for spec in parts {
                fields.push(Self::parse_field(spec, idx + 1)?);
            }
            methods.insert((class, off), MethodDef { name, fields });
        }
        Ok(MethodTable { methods })
    }

    fn parse_field(spec: &str, line: usize) -> Result<FieldSpec> {
        let bad = |reason: String| CodecError::BadTable { line, reason };
        let mut it = spec.splitn(4, ':');
        let name = it.next().unwrap_or_default().to_string();
        let hi: u8 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("field {name}: bad hi bit")))?;
        let lo: u8 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("field {name}: bad lo bit")))?;
        if hi < lo || hi > 31 {
            return Err(bad(format!("field {name}: bit range {hi}:{lo} invalid")));
        }
        let mut labels = Vec::new();
        if let Some(enums) = it.next() {
            for pair in enums.split(',') {
                let (label, val) = pair
                    .split_once('=')
                    .ok_or_else(|| bad(format!("field {name}: bad enum pair {pair}")))?;
                let val: u32 =
                    val.parse().map_err(|_| bad(format!("field {name}: bad enum value {val}")))?;
                labels.push((label.to_string(), val));
            }
        }
        Ok(FieldSpec { name, hi, lo, labels })
    }

    pub fn lookup(&self, class: u16, byte_offset: u32) -> Option<&MethodDef> {
        self.methods.get(&(class, byte_offset))
    }

    pub fn method_name(&self, class: u16, byte_offset: u32) -> String {
        match self.lookup(class, byte_offset) {
            Some(def) => def.name.clone(),
            None => format!("METHOD_0x{byte_offset:x}"),
        }
    }
}

/// Subchannel-to-class bindings plus the method table used to name methods.
#[derive(Debug, Clone)]
pub struct ClassBindings {
    bound: HashMap<u8, (u16, String)>,
    pub table: MethodTable,
}

impl Default for ClassBindings {
    fn default() -> Self {
        let mut bound = HashMap::new();
        bound.insert(4u8, (AMPERE_DMA_CLASS, AMPERE_DMA_CLASS_NAME.to_string()));
        ClassBindings { bound, table: MethodTable::embedded() }
    }
}

impl ClassBindings {
    pub fn with_table(table: MethodTable) -> Self {
        ClassBindings { table, ..Default::default() }
    }

    pub fn bind(&mut self, subchannel: u8, class_id: u16, class_name: &str) {
        self.bound.insert(subchannel, (class_id, class_name.to_string()));
    }

    pub fn class_of(&self, subchannel: u8) -> Option<(u16, &str)> {
        self.bound.get(&subchannel).map(|(id, name)| (*id, name.as_str()))
    }
}

// ---------------------------------------------------------------------------
// Stream decode
// ---------------------------------------------------------------------------

/// One method/data pair recovered from a pushbuffer stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedMethod {
    pub subchannel: u8,
    /// Bound class, if the subchannel has one.
    pub class: Option<(u16, String)>,
    pub method_name: String,
    pub byte_offset: u32,
    pub raw_data: u32,
    /// (field name, value, optional enum label)
    pub fields: Vec<(String, u32, Option<String>)>,
}

/// Per-dword annotation of a decoded stream; what renderers walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DwordDecode {
    Header(MethodHeader),
    Method(DecodedMethod),
    /// Header that also carries data (`Immediate`): both views apply.
    ImmediateHeader(MethodHeader, DecodedMethod),
}

fn decoded_method(bindings: &ClassBindings, subch: u8, byte_offset: u32, data: u32) -> DecodedMethod {
    let class = bindings.class_of(subch).map(|(id, name)| (id, name.to_string()));
    let (method_name, fields) = match class {
        Some((id, _)) => match bindings.table.lookup(id, byte_offset) {
            Some(def) => {
                let fields = def
                    .fields
                    .iter()
                    .map(|f| {
                        let v = f.extract(data);
                        (f.name.clone(), v, f.label_for(v).map(str::to_string))
                    })
                    .collect();
                (def.name.clone(), fields)
            }
            None => (format!("METHOD_0x{byte_offset:x}"), Vec::new()),
        },
        None => (format!("METHOD_0x{byte_offset:x}"), Vec::new()),
    };
    DecodedMethod { subchannel: subch, class, method_name, byte_offset, raw_data: data, fields }
}

/// Walk a pushbuffer segment, pairing each header with its payload words.
/// Returns the per-dword annotations and, when the final header's payload
/// runs past the end of the slice, the truncation error alongside whatever
/// decoded cleanly. Never reads past `dwords`.
pub fn decode_stream_partial(
    dwords: &[u32],
    bindings: &ClassBindings,
) -> (Vec<DwordDecode>, Option<CodecError>) {
    let mut out = Vec::with_capacity(dwords.len());
    let mut i = 0usize;
    while i < dwords.len() {
        let header = match decode_header(dwords[i]) {
            Ok(h) => h,
            Err(e) => return (out, Some(e)),
        };
        if header.op == MethodOp::Immediate {
            let m = decoded_method(bindings, header.subchannel, header.byte_offset(), header.count as u32);
            out.push(DwordDecode::ImmediateHeader(header, m));
            i += 1;
            continue;
        }
        out.push(DwordDecode::Header(header));
        let want = header.count as usize;
        let have = dwords.len() - i - 1;
        let take = want.min(have);
        for k in 0..take {
            let offset = match header.op {
                MethodOp::Inc => header.byte_offset() + 4 * k as u32,
                MethodOp::NonInc => header.byte_offset(),
                MethodOp::OneInc => header.byte_offset() + 4 * (k.min(1)) as u32,
                MethodOp::Immediate => unreachable!(),
            };
            let m = decoded_method(bindings, header.subchannel, offset, dwords[i + 1 + k]);
            out.push(DwordDecode::Method(m));
        }
        if want > have {
            return (out, Some(CodecError::TruncatedStream { header_at: i, want, have }));
        }
        i += 1 + want;
    }
    (out, None)
}

pub fn decode_stream_annotated(dwords: &[u32], bindings: &ClassBindings) -> Result<Vec<DwordDecode>> {
    let (out, err) = decode_stream_partial(dwords, bindings);
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// The method/data pairs of a segment, in execution order.
pub fn decode_stream(dwords: &[u32], bindings: &ClassBindings) -> Result<Vec<DecodedMethod>> {
    Ok(decode_stream_annotated(dwords, bindings)?
        .into_iter()
        .filter_map(|d| match d {
            DwordDecode::Method(m) | DwordDecode::ImmediateHeader(_, m) => Some(m),
            DwordDecode::Header(_) => None,
        })
        .collect())
}

/// Render one decoded dword in the trace layout. `raw` is the dword value.
pub fn render_dword(idx: usize, raw: u32, decode: &DwordDecode, out: &mut String) {
    let _ = writeln!(out, "PB entry[{idx}] = 0x{raw:08x}");
    match decode {
        DwordDecode::Header(h) => render_header_line(h, out),
        DwordDecode::Method(m) => render_method_lines(m, out),
        DwordDecode::ImmediateHeader(h, m) => {
            render_header_line(h, out);
            render_method_lines(m, out);
        }
    }
}

fn render_header_line(h: &MethodHeader, out: &mut String) {
    let _ = writeln!(
        out,
        "    PB HDR {:<7}count={} subch={} addr_dw=0x{:x} (byte 0x{:x})",
        h.op.name(),
        h.count,
        h.subchannel,
        h.addr_dw,
        h.byte_offset()
    );
}

fn render_method_lines(m: &DecodedMethod, out: &mut String) {
    match &m.class {
        Some((id, name)) => {
            let _ = writeln!(
                out,
                "    SUBCH{} {}(0x{:x}) {}(0x{:x}) data=0x{:08x}",
                m.subchannel, name, id, m.method_name, m.byte_offset, m.raw_data
            );
        }
        None => {
            let _ = writeln!(
                out,
                "    SUBCH{} {}(0x{:x}) data=0x{:08x}",
                m.subchannel, m.method_name, m.byte_offset, m.raw_data
            );
        }
    }
    for (name, value, label) in &m.fields {
        match label {
            Some(l) => {
                let _ = writeln!(out, "        {name}={value} ({l})");
            }
            None => {
                let _ = writeln!(out, "        {name}={value}");
            }
        }
    }
}
