//! Simulated memory: physical domains (host RAM, device VRAM, MMIO window),
//! a flat GPU page table for VA->PA translation, and an allocation registry
//! that attributes virtual ranges to the objects they back.
//!
//! The same virtual address resolves identically from the "host side"
//! (VA accessors) and the "GPU side" (translate-then-PA accessors); both
//! paths go through the one page table, which is the unified-addressing
//! behavior the rest of the simulator relies on.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Page size for the simulated GPU page table.
pub const PAGE_SIZE: u64 = 4096;

/// Disjoint physical-address windows, one per domain. Every physical
/// address belongs to exactly one domain.
const HOST_PA_BASE: u64 = 0x0000_0000_0000;
const VRAM_PA_BASE: u64 = 0x1000_0000_0000;
const MMIO_PA_BASE: u64 = 0x2000_0000_0000;
const DOMAIN_PA_SPAN: u64 = 0x1000_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemDomain {
    HostRam,
    DeviceVram,
    Mmio,
}

impl MemDomain {
    fn pa_base(self) -> u64 {
        match self {
            MemDomain::HostRam => HOST_PA_BASE,
            MemDomain::DeviceVram => VRAM_PA_BASE,
            MemDomain::Mmio => MMIO_PA_BASE,
        }
    }

    pub fn of_pa(pa: u64) -> Option<MemDomain> {
        match pa / DOMAIN_PA_SPAN {
            0 => Some(MemDomain::HostRam),
            1 => Some(MemDomain::DeviceVram),
            2 => Some(MemDomain::Mmio),
            _ => None,
        }
    }
}

impl std::fmt::Display for MemDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MemDomain::HostRam => "HostRam",
            MemDomain::DeviceVram => "DeviceVram",
            MemDomain::Mmio => "Mmio",
        };
        f.write_str(s)
    }
}

/// What a mapped range backs. Used to attribute addresses seen in decoded
/// command streams to the objects they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocTag {
    Pushbuffer,
    Gpfifo,
    SemaphoreBuf,
    UserData,
    Unknown,
}

#[derive(Debug, Error)]
pub enum VmemError {
    #[error("va 0x{va:x} is not aligned to the {align}-byte boundary")]
    Unaligned { va: u64, align: u64 },
    #[error("mapping 0x{va:x}+0x{len:x} overlaps an existing mapping")]
    Overlap { va: u64, len: u64 },
    #[error("zero-length range at va 0x{va:x}")]
    EmptyRange { va: u64 },
    #[error("page fault at va 0x{va:x}")]
    PageFault { va: u64 },
    #[error("physical access out of bounds: pa 0x{pa:x} len 0x{len:x}")]
    OutOfBounds { pa: u64, len: u64 },
    #[error("domain {domain} capacity exhausted")]
    DomainFull { domain: MemDomain },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VmemError>;

#[derive(Debug, Clone, Copy)]
struct PageEntry {
    domain: MemDomain,
    pa_page: u64,
    valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocRecord {
    pub va_base: u64,
    pub len: u64,
    pub domain: MemDomain,
    pub tag: AllocTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocHandle(pub usize);

#[derive(Debug)]
struct DomainStore {
    capacity: u64,
    /// Bump pointer, in bytes from the domain's PA base. Pages are never freed;
    /// deterministic PA assignment keeps golden outputs stable.
    next_offset: u64,
    backing: Vec<u8>,
}

impl DomainStore {
    fn new(capacity: u64) -> Self {
        DomainStore { capacity, next_offset: 0, backing: Vec::new() }
    }

    fn alloc_pages(&mut self, domain: MemDomain, pages: u64) -> Result<u64> {
        let bytes = pages * PAGE_SIZE;
        if self.next_offset + bytes > self.capacity {
            return Err(VmemError::DomainFull { domain });
        }
        let off = self.next_offset;
        self.next_offset += bytes;
        self.backing.resize(self.next_offset as usize, 0);
        Ok(off)
    }
}

/// The simulated memory system: three physical domains, one GPU page table,
/// and the allocation registry.
#[derive(Debug)]
pub struct MemStore {
    host: DomainStore,
    vram: DomainStore,
    mmio: DomainStore,
    pages: HashMap<u64, PageEntry>,
    records: Vec<AllocRecord>,
    /// PA of the doorbell register slot inside the MMIO window, once mapped.
    /// Reads covering it always return zero; writes land in the shadow
    /// backing and stay readable through the raw (kernel-side) accessors.
    doorbell_pa: Option<u64>,
}

impl Default for MemStore {
    fn default() -> Self {
        Self::new(1 << 31, 1 << 31, 1 << 16)
    }
}

impl MemStore {
    pub fn new(host_capacity: u64, vram_capacity: u64, mmio_capacity: u64) -> Self {
        MemStore {
            host: DomainStore::new(host_capacity),
            vram: DomainStore::new(vram_capacity),
            mmio: DomainStore::new(mmio_capacity),
            pages: HashMap::new(),
            records: Vec::new(),
            doorbell_pa: None,
        }
    }

    fn domain_mut(&mut self, d: MemDomain) -> &mut DomainStore {
        match d {
            MemDomain::HostRam => &mut self.host,
            MemDomain::DeviceVram => &mut self.vram,
            MemDomain::Mmio => &mut self.mmio,
        }
    }

    fn domain_ref(&self, d: MemDomain) -> &DomainStore {
        match d {
            MemDomain::HostRam => &self.host,
            MemDomain::DeviceVram => &self.vram,
            MemDomain::Mmio => &self.mmio,
        }
    }

    /// Install a mapping of `len` bytes at page-aligned `va` and record it in
    /// the registry. Physical pages come from the domain's bump allocator.
    pub fn map(&mut self, va: u64, len: u64, domain: MemDomain, tag: AllocTag) -> Result<AllocHandle> {
        if va % PAGE_SIZE != 0 {
            return Err(VmemError::Unaligned { va, align: PAGE_SIZE });
        }
        if len == 0 {
            return Err(VmemError::EmptyRange { va });
        }
        let pages = len.div_ceil(PAGE_SIZE);
        for i in 0..pages {
            if self.pages.contains_key(&(va / PAGE_SIZE + i)) {
                return Err(VmemError::Overlap { va, len });
            }
        }
        if self.records.iter().any(|r| va < r.va_base + r.len && r.va_base < va + len) {
            return Err(VmemError::Overlap { va, len });
        }
        let base_off = self.domain_mut(domain).alloc_pages(domain, pages)?;
        let pa_base = domain.pa_base() + base_off;
        for i in 0..pages {
            self.pages.insert(
                va / PAGE_SIZE + i,
                PageEntry { domain, pa_page: (pa_base / PAGE_SIZE) + i, valid: true },
            );
        }
        self.records.push(AllocRecord { va_base: va, len, domain, tag });
        Ok(AllocHandle(self.records.len() - 1))
    }

    /// Walk the page table. Fails with a fault for unmapped or invalid pages.
    pub fn translate(&self, va: u64) -> Result<(MemDomain, u64)> {
        match self.pages.get(&(va / PAGE_SIZE)) {
            Some(e) if e.valid => Ok((e.domain, e.pa_page * PAGE_SIZE + va % PAGE_SIZE)),
            _ => Err(VmemError::PageFault { va }),
        }
    }

    pub fn is_mapped(&self, va: u64, len: u64) -> bool {
        if len == 0 {
            return false;
        }
        let first = va / PAGE_SIZE;
        let last = (va + len - 1) / PAGE_SIZE;
        (first..=last).all(|p| self.pages.get(&p).is_some_and(|e| e.valid))
    }

    /// The unique registry record containing `va`, or `Unknown`.
    pub fn attribute(&self, va: u64) -> AllocTag {
        self.records
            .iter()
            .find(|r| va >= r.va_base && va < r.va_base + r.len)
            .map(|r| r.tag)
            .unwrap_or(AllocTag::Unknown)
    }

    pub fn records(&self) -> &[AllocRecord] {
        &self.records
    }

    pub fn set_doorbell_pa(&mut self, pa: u64) {
        self.doorbell_pa = Some(pa);
    }

    pub fn read_va(&self, va: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.read_va_into(va, &mut out)?;
        Ok(out)
    }

    pub fn read_va_into(&self, va: u64, out: &mut [u8]) -> Result<()> {
        let mut done = 0usize;
        while done < out.len() {
            let cur = va + done as u64;
            let (_, pa) = self.translate(cur)?;
            let in_page = (PAGE_SIZE - cur % PAGE_SIZE) as usize;
            let n = in_page.min(out.len() - done);
            self.read_pa_into(pa, &mut out[done..done + n])?;
            done += n;
        }
        Ok(())
    }

    pub fn write_va(&mut self, va: u64, data: &[u8]) -> Result<()> {
        let mut done = 0usize;
        while done < data.len() {
            let cur = va + done as u64;
            let (_, pa) = self.translate(cur)?;
            let in_page = (PAGE_SIZE - cur % PAGE_SIZE) as usize;
            let n = in_page.min(data.len() - done);
            self.write_pa(pa, &data[done..done + n])?;
            done += n;
        }
        Ok(())
    }

    pub fn read_pa(&self, pa: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.read_pa_into(pa, &mut out)?;
        Ok(out)
    }

    fn read_pa_into(&self, pa: u64, out: &mut [u8]) -> Result<()> {
        self.read_pa_raw(pa, out)?;
        // The doorbell register never reads back what was written.
        if let Some(db) = self.doorbell_pa {
            let lo = pa;
            let hi = pa + out.len() as u64;
            for b in db..db + 4 {
                if b >= lo && b < hi {
                    out[(b - lo) as usize] = 0;
                }
            }
        }
        Ok(())
    }

    /// Kernel-side physical read that bypasses the doorbell read-zero rule;
    /// this is how the shadow page contents stay observable.
    pub fn read_pa_raw(&self, pa: u64, out: &mut [u8]) -> Result<()> {
        let domain =
            MemDomain::of_pa(pa).ok_or(VmemError::OutOfBounds { pa, len: out.len() as u64 })?;
        let store = self.domain_ref(domain);
        let off = (pa - domain.pa_base()) as usize;
        if off + out.len() > store.backing.len() {
            return Err(VmemError::OutOfBounds { pa, len: out.len() as u64 });
        }
        out.copy_from_slice(&store.backing[off..off + out.len()]);
        Ok(())
    }

    pub fn write_pa(&mut self, pa: u64, data: &[u8]) -> Result<()> {
        let domain =
            MemDomain::of_pa(pa).ok_or(VmemError::OutOfBounds { pa, len: data.len() as u64 })?;
        let store = self.domain_mut(domain);
        let off = (pa - domain.pa_base()) as usize;
        if off + data.len() > store.backing.len() {
            return Err(VmemError::OutOfBounds { pa, len: data.len() as u64 });
        }
        store.backing[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read_u32(&self, va: u64) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_va_into(va, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, va: u64, v: u32) -> Result<()> {
        self.write_va(va, &v.to_le_bytes())
    }

    pub fn read_u64(&self, va: u64) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_va_into(va, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, va: u64, v: u64) -> Result<()> {
        self.write_va(va, &v.to_le_bytes())
    }

    pub fn read_dwords(&self, va: u64, count: u64) -> Result<Vec<u32>> {
        let bytes = self.read_va(va, count * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn write_dwords(&mut self, va: u64, dwords: &[u32]) -> Result<()> {
        let mut bytes = Vec::with_capacity(dwords.len() * 4);
        for d in dwords {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        self.write_va(va, &bytes)
    }

    /// Map a raw dump (little-endian dwords) at `va_base` and load its bytes.
    pub fn load_dump(
        &mut self,
        path: &Path,
        va_base: u64,
        domain: MemDomain,
        tag: AllocTag,
    ) -> Result<u64> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            return Ok(0);
        }
        self.map(va_base, bytes.len() as u64, domain, tag)?;
        self.write_va(va_base, &bytes)?;
        Ok(bytes.len() as u64)
    }

    /// Stable digest of all backing bytes, used to check that read paths
    /// really are read-only.
    pub fn state_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for store in [&self.host, &self.vram, &self.mmio] {
            for &b in &store.backing {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> MemStore {
        MemStore::default()
    }

    #[test]
    fn map_then_translate_lands_in_domain() {
        let mut m = store();
        m.map(0x2_0000_0000, 64 << 20, MemDomain::HostRam, AllocTag::UserData).unwrap();
        let (d, pa) = m.translate(0x2_0000_0000).unwrap();
        assert_eq!(d, MemDomain::HostRam);
        assert_eq!(MemDomain::of_pa(pa), Some(MemDomain::HostRam));
    }

    #[test]
    fn map_gpfifo_ring_in_vram() {
        let mut m = store();
        m.map(0x2_0021_b000, 8192, MemDomain::DeviceVram, AllocTag::Gpfifo).unwrap();
        let (d, _) = m.translate(0x2_0021_b000).unwrap();
        assert_eq!(d, MemDomain::DeviceVram);
    }

    #[test]
    fn overlapping_map_rejected() {
        let mut m = store();
        m.map(0x1000, 0x3000, MemDomain::HostRam, AllocTag::UserData).unwrap();
        let err = m.map(0x3000, 0x1000, MemDomain::HostRam, AllocTag::UserData).unwrap_err();
        assert!(matches!(err, VmemError::Overlap { .. }));
    }

    #[test]
    fn unaligned_map_rejected() {
        let mut m = store();
        let err = m.map(0x1004, 0x1000, MemDomain::HostRam, AllocTag::UserData).unwrap_err();
        assert!(matches!(err, VmemError::Unaligned { .. }));
    }

    #[test]
    fn translate_preserves_page_offset() {
        let mut m = store();
        m.map(0x7000_0000, 0x4000, MemDomain::HostRam, AllocTag::UserData).unwrap();
        for va in [0x7000_0000u64, 0x7000_0abc, 0x7000_3fff] {
            let (_, pa) = m.translate(va).unwrap();
            assert_eq!(pa % PAGE_SIZE, va % PAGE_SIZE);
        }
    }

    #[test]
    fn translate_unmapped_faults() {
        let m = store();
        assert!(matches!(m.translate(0xdead_0000), Err(VmemError::PageFault { .. })));
    }

    #[test]
    fn write_read_roundtrip() {
        let mut m = store();
        m.map(0x9000, 0x1000, MemDomain::HostRam, AllocTag::UserData).unwrap();
        m.write_u32(0x9010, 0xdead_beef).unwrap();
        assert_eq!(m.read_u32(0x9010).unwrap(), 0xdead_beef);
    }

    #[test]
    fn cross_page_read_matches_two_half_reads() {
        let mut m = store();
        m.map(0xa000, 0x2000, MemDomain::HostRam, AllocTag::UserData).unwrap();
        m.write_u64(0xaffc, 0x1122_3344_5566_7788).unwrap();
        let whole = m.read_u64(0xaffc).unwrap();
        let lo = m.read_u32(0xaffc).unwrap() as u64;
        let hi = m.read_u32(0xb000).unwrap() as u64;
        assert_eq!(whole, (hi << 32) | lo);
    }

    #[test]
    fn uvm_host_and_gpu_paths_agree() {
        let mut m = store();
        m.map(0x5_0000_0000, 0x3000, MemDomain::DeviceVram, AllocTag::UserData).unwrap();
        let mut seed = 0x1234_5678_u64;
        for _ in 0..1000 {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let va = 0x5_0000_0000 + seed % (0x3000 - 4);
            let val = (seed >> 16) as u32;
            m.write_u32(va, val).unwrap();
            let (_, pa) = m.translate(va).unwrap();
            let mut b = [0u8; 4];
            m.read_pa_into(pa, &mut b).unwrap();
            assert_eq!(u32::from_le_bytes(b), val);
        }
    }

    #[test]
    fn doorbell_offset_reads_zero() {
        let mut m = store();
        m.map(0x7ffe_0000_0000, PAGE_SIZE, MemDomain::Mmio, AllocTag::Unknown).unwrap();
        let (_, pa) = m.translate(0x7ffe_0000_0090).unwrap();
        m.set_doorbell_pa(pa);
        m.write_u32(0x7ffe_0000_0090, 0x10011).unwrap();
        assert_eq!(m.read_u32(0x7ffe_0000_0090).unwrap(), 0);
        // Shadow contents stay visible through the raw path.
        let mut b = [0u8; 4];
        m.read_pa_raw(pa, &mut b).unwrap();
        assert_eq!(u32::from_le_bytes(b), 0x10011);
    }

    #[test]
    fn attribution_is_a_partition() {
        let mut m = store();
        m.map(0x1000, 0x1000, MemDomain::HostRam, AllocTag::Pushbuffer).unwrap();
        m.map(0x2000, 0x1000, MemDomain::DeviceVram, AllocTag::Gpfifo).unwrap();
        assert_eq!(m.attribute(0x1800), AllocTag::Pushbuffer);
        assert_eq!(m.attribute(0x2000), AllocTag::Gpfifo);
        assert_eq!(m.attribute(0x3000), AllocTag::Unknown);
        for r in m.records() {
            let hits = m
                .records()
                .iter()
                .filter(|o| r.va_base < o.va_base + o.len && o.va_base < r.va_base + r.len)
                .count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn load_dump_roundtrip() {
        let dir = std::env::temp_dir().join("pushtrace-vmem-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dump.bin");
        let dwords: Vec<u32> = vec![0x2004_8100, 0x0000_7fa8, 0x2000_0000];
        let mut bytes = Vec::new();
        for d in &dwords {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let mut m = store();
        let n = m.load_dump(&path, 0x4_0000_0000, MemDomain::HostRam, AllocTag::Pushbuffer).unwrap();
        assert_eq!(n, 12);
        assert_eq!(m.read_dwords(0x4_0000_0000, 3).unwrap(), dwords);
    }
}
