//! Registered memory regions shared between host agents, the emulator and
//! copy engines.
//!
//! A region models a pinned, physically contiguous buffer (ring memory, I/O
//! buffers, the backing store). Accesses are unsynchronized byte copies; the
//! queue protocol (doorbells, phase bits, completion records) provides the
//! happens-before edges, exactly as with device DMA.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub u32);

/// A byte address inside a registered region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Addr {
    pub region: RegionId,
    pub offset: u64,
}

impl Addr {
    pub fn new(region: RegionId, offset: u64) -> Self {
        Self { region, offset }
    }

    /// Packs the address into a 64-bit data pointer: region id in the top
    /// 24 bits, offset in the low 40.
    pub fn to_ptr(self) -> u64 {
        debug_assert!(self.offset < 1 << PTR_OFFSET_BITS && self.region.0 < 1 << 24);
        ((self.region.0 as u64) << PTR_OFFSET_BITS) | self.offset
    }

    pub fn from_ptr(ptr: u64) -> Self {
        Self {
            region: RegionId((ptr >> PTR_OFFSET_BITS) as u32),
            offset: ptr & ((1 << PTR_OFFSET_BITS) - 1),
        }
    }
}

const PTR_OFFSET_BITS: u32 = 40;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("unknown region {0:?}")]
    UnknownRegion(RegionId),
    #[error("range {offset}+{len} exceeds region {region:?} of {size} bytes")]
    OutOfBounds {
        region: RegionId,
        offset: u64,
        len: u64,
        size: u64,
    },
}

/// Contiguous, 8-byte aligned buffer with interior mutability.
pub struct Region {
    id: RegionId,
    len: usize,
    words: Box<[UnsafeCell<u64>]>,
}

// SAFETY: concurrent access is coordinated by the queue protocol (single
// writer per byte range between publication points); the only bytes touched
// concurrently by design are accessed through atomics.
unsafe impl Sync for Region {}
unsafe impl Send for Region {}

impl std::fmt::Debug for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Region")
            .field("id", &self.id)
            .field("len", &self.len)
            .finish()
    }
}

impl Region {
    fn new(id: RegionId, len: usize) -> Self {
        let words = (0..len.div_ceil(8)).map(|_| UnsafeCell::new(0u64)).collect();
        Self { id, len, words }
    }

    pub fn id(&self) -> RegionId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn addr(&self, offset: u64) -> Addr {
        Addr::new(self.id, offset)
    }

    fn base(&self) -> *mut u8 {
        self.words.as_ptr() as *mut u8
    }

    pub fn check(&self, offset: u64, len: u64) -> Result<(), MemoryError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.len as u64 => Ok(()),
            _ => Err(MemoryError::OutOfBounds {
                region: self.id,
                offset,
                len,
                size: self.len as u64,
            }),
        }
    }

    pub fn read(&self, offset: u64, out: &mut [u8]) -> Result<(), MemoryError> {
        self.check(offset, out.len() as u64)?;
        // SAFETY: bounds checked above; see the type-level note on races.
        unsafe {
            std::ptr::copy_nonoverlapping(
                self.base().add(offset as usize),
                out.as_mut_ptr(),
                out.len(),
            );
        }
        Ok(())
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> Result<(), MemoryError> {
        self.check(offset, data.len() as u64)?;
        // SAFETY: bounds checked above.
        unsafe {
            std::ptr::copy_nonoverlapping(
                data.as_ptr(),
                self.base().add(offset as usize),
                data.len(),
            );
        }
        Ok(())
    }

    pub fn fill(&self, offset: u64, len: u64, byte: u8) -> Result<(), MemoryError> {
        self.check(offset, len)?;
        // SAFETY: bounds checked above.
        unsafe { std::ptr::write_bytes(self.base().add(offset as usize), byte, len as usize) };
        Ok(())
    }

    /// Copies `len` bytes from `src` into this region.
    pub fn copy_from(
        &self,
        dst_offset: u64,
        src: &Region,
        src_offset: u64,
        len: u64,
    ) -> Result<(), MemoryError> {
        self.check(dst_offset, len)?;
        src.check(src_offset, len)?;
        // SAFETY: both ranges bounds checked; `copy` tolerates overlap when
        // source and destination are the same region.
        unsafe {
            std::ptr::copy(
                src.base().add(src_offset as usize),
                self.base().add(dst_offset as usize),
                len as usize,
            );
        }
        Ok(())
    }

    fn atomic_u16(&self, offset: u64) -> &AtomicU16 {
        assert!(offset % 2 == 0, "unaligned 16-bit atomic at {offset}");
        self.check(offset, 2).expect("atomic access out of bounds");
        // SAFETY: in bounds, 2-byte aligned (base is 8-byte aligned), and the
        // storage lives in an UnsafeCell for the lifetime of `self`.
        unsafe { &*(self.base().add(offset as usize) as *const AtomicU16) }
    }

    pub fn load_u16_acquire(&self, offset: u64) -> u16 {
        u16::from_le(self.atomic_u16(offset).load(Ordering::Acquire))
    }

    pub fn store_u16_release(&self, offset: u64, value: u16) {
        self.atomic_u16(offset).store(value.to_le(), Ordering::Release);
    }
}

/// Registry of every region reachable by copy descriptors.
#[derive(Debug, Default)]
pub struct MemoryMap {
    regions: RwLock<Vec<Arc<Region>>>,
}

impl MemoryMap {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, len: usize) -> Arc<Region> {
        let mut regions = self.regions.write().unwrap();
        let region = Arc::new(Region::new(RegionId(regions.len() as u32), len));
        regions.push(region.clone());
        region
    }

    pub fn get(&self, id: RegionId) -> Result<Arc<Region>, MemoryError> {
        self.regions
            .read()
            .unwrap()
            .get(id.0 as usize)
            .cloned()
            .ok_or(MemoryError::UnknownRegion(id))
    }

    pub fn copy(&self, dst: Addr, src: Addr, len: u64) -> Result<(), MemoryError> {
        let d = self.get(dst.region)?;
        let s = self.get(src.region)?;
        d.copy_from(dst.offset, &s, src.offset, len)
    }

    pub fn check(&self, addr: Addr, len: u64) -> Result<(), MemoryError> {
        self.get(addr.region)?.check(addr.offset, len)
    }
}
