//! NVMe-style submission/completion rings with software doorbells.
//!
//! Layouts are byte-exact: 64-byte submission entries and 16-byte completion
//! entries carrying a phase tag. Roles are fixed per queue pair: one host
//! submitter and one host consumer ([`HostPort`]), one dispatcher consuming
//! the SQ ([`SqConsumer`]), and CQ producers serialized per CQ.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::memory::{Addr, MemoryError, MemoryMap, Region};

pub const SQE_BYTES: usize = 64;
pub const CQE_BYTES: usize = 16;
pub const DEFAULT_QUEUE_DEPTH: u32 = 1024;

pub const OPC_READ: u8 = 0x02;
pub const NSID: u32 = 1;

/// Status codes carried in bits 1..=15 of the completion status word.
pub mod status {
    pub const SUCCESS: u16 = 0x0;
    pub const INVALID_OPCODE: u16 = 0x1;
    pub const INVALID_FIELD: u16 = 0x2;
    pub const DATA_TRANSFER_ERROR: u16 = 0x4;
    pub const INVALID_NAMESPACE: u16 = 0xB;
    pub const LBA_OUT_OF_RANGE: u16 = 0x80;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue depth {0} is not a power of two >= 2")]
    InvalidDepth(u32),
    #[error("submission queue full: {free} free, {needed} needed")]
    Full { free: u32, needed: u32 },
    #[error("corrupted doorbell value {value} for depth {depth}")]
    CorruptDoorbell { value: u32, depth: u32 },
    #[error("fetch of {0} entries is outside 1..depth")]
    BadFetchCount(u32),
    #[error("fetch transfer failed: {0}")]
    Transfer(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// A 64-byte read command. Unlisted bytes are zero on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SubmissionEntry {
    pub opcode: u8,
    pub cid: u16,
    pub nsid: u32,
    /// Byte address of the destination buffer (PRP1 analog).
    pub data_ptr: u64,
    pub slba: u64,
    /// Number of logical blocks, zero-based.
    pub nlb: u16,
}

impl SubmissionEntry {
    pub fn read(cid: u16, slba: u64, nlb: u16, data_ptr: u64) -> Self {
        Self {
            opcode: OPC_READ,
            cid,
            nsid: NSID,
            data_ptr,
            slba,
            nlb,
        }
    }

    pub fn to_bytes(&self) -> [u8; SQE_BYTES] {
        let mut b = [0u8; SQE_BYTES];
        b[0] = self.opcode;
        b[2..4].copy_from_slice(&self.cid.to_le_bytes());
        b[4..8].copy_from_slice(&self.nsid.to_le_bytes());
        b[24..32].copy_from_slice(&self.data_ptr.to_le_bytes());
        b[40..48].copy_from_slice(&self.slba.to_le_bytes());
        b[48..50].copy_from_slice(&self.nlb.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        assert!(b.len() >= SQE_BYTES);
        Self {
            opcode: b[0],
            cid: u16::from_le_bytes([b[2], b[3]]),
            nsid: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            data_ptr: u64::from_le_bytes(b[24..32].try_into().unwrap()),
            slba: u64::from_le_bytes(b[40..48].try_into().unwrap()),
            nlb: u16::from_le_bytes([b[48], b[49]]),
        }
    }

    pub fn blocks(&self) -> u64 {
        self.nlb as u64 + 1
    }
}

/// A 16-byte completion entry. Bytes 0..8 are reserved (zero).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompletionEntry {
    pub sq_head: u16,
    pub sq_id: u16,
    pub cid: u16,
    /// Bit 0: phase tag; bits 1..=15: status code.
    pub status: u16,
}

impl CompletionEntry {
    pub fn new(sq_head: u16, sq_id: u16, cid: u16, code: u16, phase: bool) -> Self {
        Self {
            sq_head,
            sq_id,
            cid,
            status: (code << 1) | phase as u16,
        }
    }

    pub fn phase(&self) -> bool {
        self.status & 1 == 1
    }

    pub fn status_code(&self) -> u16 {
        self.status >> 1
    }

    pub fn is_success(&self) -> bool {
        self.status_code() == status::SUCCESS
    }

    pub fn to_bytes(&self) -> [u8; CQE_BYTES] {
        let mut b = [0u8; CQE_BYTES];
        b[8..10].copy_from_slice(&self.sq_head.to_le_bytes());
        b[10..12].copy_from_slice(&self.sq_id.to_le_bytes());
        b[12..14].copy_from_slice(&self.cid.to_le_bytes());
        b[14..16].copy_from_slice(&self.status.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        assert!(b.len() >= CQE_BYTES);
        Self {
            sq_head: u16::from_le_bytes([b[8], b[9]]),
            sq_id: u16::from_le_bytes([b[10], b[11]]),
            cid: u16::from_le_bytes([b[12], b[13]]),
            status: u16::from_le_bytes([b[14], b[15]]),
        }
    }
}

/// Returns `(new_tail - old_tail) mod depth`.
pub fn doorbell_delta(old_tail: u32, new_tail: u32, depth: u32) -> Result<u32, QueueError> {
    for value in [old_tail, new_tail] {
        if value >= depth {
            return Err(QueueError::CorruptDoorbell { value, depth });
        }
    }
    Ok(new_tail.wrapping_sub(old_tail) & (depth - 1))
}

#[derive(Debug)]
struct CqProducer {
    tail: u32,
    phase: bool,
}

/// One SQ/CQ pair. Each ring lives in its own contiguous region, so any
/// non-wrapping run of entries can be moved by a single transfer.
#[derive(Debug)]
pub struct QueuePair {
    qid: u16,
    depth: u32,
    sq: Arc<Region>,
    cq: Arc<Region>,
    sq_tail_doorbell: AtomicU32,
    cq_head_doorbell: AtomicU32,
    /// Dispatcher's head index, republished after each fetch so submitters
    /// can compute free slots (the CQE head field carries the same value).
    sq_head: AtomicU32,
    cq_producer: Mutex<CqProducer>,
    host_claimed: AtomicBool,
    dispatcher_claimed: AtomicBool,
    doorbell_writes: AtomicU64,
}

impl QueuePair {
    pub fn create(memory: &MemoryMap, qid: u16, depth: u32) -> Result<Arc<Self>, QueueError> {
        if depth < 2 || !depth.is_power_of_two() || depth > 1 << 16 {
            return Err(QueueError::InvalidDepth(depth));
        }
        Ok(Arc::new(Self {
            qid,
            depth,
            sq: memory.register(depth as usize * SQE_BYTES),
            cq: memory.register(depth as usize * CQE_BYTES),
            sq_tail_doorbell: AtomicU32::new(0),
            cq_head_doorbell: AtomicU32::new(0),
            sq_head: AtomicU32::new(0),
            cq_producer: Mutex::new(CqProducer {
                tail: 0,
                phase: true,
            }),
            host_claimed: AtomicBool::new(false),
            dispatcher_claimed: AtomicBool::new(false),
            doorbell_writes: AtomicU64::new(0),
        }))
    }

    pub fn qid(&self) -> u16 {
        self.qid
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn sq_region(&self) -> &Arc<Region> {
        &self.sq
    }

    pub fn cq_region(&self) -> &Arc<Region> {
        &self.cq
    }

    pub fn sq_tail_doorbell(&self) -> u32 {
        self.sq_tail_doorbell.load(Ordering::Acquire)
    }

    pub fn cq_head_doorbell(&self) -> u32 {
        self.cq_head_doorbell.load(Ordering::Acquire)
    }

    pub fn sq_head(&self) -> u32 {
        self.sq_head.load(Ordering::Acquire)
    }

    pub fn doorbell_writes(&self) -> u64 {
        self.doorbell_writes.load(Ordering::Relaxed)
    }

    /// Entries submitted but not yet fetched.
    pub fn sq_pending(&self) -> u32 {
        self.sq_tail_doorbell().wrapping_sub(self.sq_head()) & (self.depth - 1)
    }

    /// Claims the host role (submitter + completion consumer). Once only.
    pub fn host_port(self: &Arc<Self>) -> Option<HostPort> {
        if self.host_claimed.swap(true, Ordering::AcqRel) {
            return None;
        }
        Some(HostPort {
            qp: self.clone(),
            sq_tail: self.sq_tail_doorbell(),
            cq_head: 0,
            cq_phase: true,
            doorbell_writes: 0,
        })
    }

    /// Claims the SQ consumer role. Once only.
    pub fn sq_consumer(self: &Arc<Self>) -> Option<SqConsumer> {
        if self.dispatcher_claimed.swap(true, Ordering::AcqRel) {
            return None;
        }
        Some(SqConsumer {
            qp: self.clone(),
            head: self.sq_head(),
        })
    }

    /// Writes a completion at the CQ tail with the producer phase. The status
    /// word (which carries the phase) is stored last with release ordering so
    /// a consumer never accepts a torn entry.
    pub fn post_completion(&self, cid: u16, sq_head_snapshot: u32, code: u16) {
        let mut p = self.cq_producer.lock().unwrap();
        let next = (p.tail + 1) & (self.depth - 1);
        assert_ne!(
            next,
            self.cq_head_doorbell(),
            "CQ {} overflow: outstanding requests exceed depth",
            self.qid
        );
        let entry = CompletionEntry::new(sq_head_snapshot as u16, self.qid, cid, code, p.phase);
        let off = p.tail as u64 * CQE_BYTES as u64;
        let bytes = entry.to_bytes();
        self.cq.write(off, &bytes[..14]).expect("cq slot in range");
        self.cq.store_u16_release(off + 14, entry.status);
        p.tail = next;
        if next == 0 {
            p.phase = !p.phase;
        }
    }

    /// One line per SQ entry: slot index then the 64 bytes in hex.
    pub fn dump_sq(&self) -> String {
        dump_ring(&self.sq, SQE_BYTES, self.depth)
    }

    /// One line per CQ entry: slot index then the 16 bytes in hex.
    pub fn dump_cq(&self) -> String {
        dump_ring(&self.cq, CQE_BYTES, self.depth)
    }
}

fn dump_ring(region: &Region, entry_bytes: usize, depth: u32) -> String {
    let mut out = String::new();
    let mut buf = vec![0u8; entry_bytes];
    for slot in 0..depth {
        region
            .read(slot as u64 * entry_bytes as u64, &mut buf)
            .expect("slot in range");
        let _ = write!(out, "{slot:04x}:");
        for b in &buf {
            let _ = write!(out, " {b:02x}");
        }
        out.push('\n');
    }
    out
}

/// Host side of a queue pair: the single submitter and single completion
/// consumer.
#[derive(Debug)]
pub struct HostPort {
    qp: Arc<QueuePair>,
    sq_tail: u32,
    cq_head: u32,
    cq_phase: bool,
    doorbell_writes: u64,
}

impl HostPort {
    pub fn qp(&self) -> &Arc<QueuePair> {
        &self.qp
    }

    pub fn qid(&self) -> u16 {
        self.qp.qid
    }

    pub fn sq_tail(&self) -> u32 {
        self.sq_tail
    }

    pub fn expected_phase(&self) -> bool {
        self.cq_phase
    }

    pub fn doorbell_writes(&self) -> u64 {
        self.doorbell_writes
    }

    /// Free SQ slots; occupancy is capped at depth - 1.
    pub fn sq_free(&self) -> u32 {
        let depth = self.qp.depth;
        let used = self.sq_tail.wrapping_sub(self.qp.sq_head()) & (depth - 1);
        depth - 1 - used
    }

    /// Writes `entries` at consecutive tail slots and rings the doorbell once.
    pub fn try_submit(&mut self, entries: &[SubmissionEntry]) -> Result<(), QueueError> {
        if entries.is_empty() {
            return Ok(());
        }
        let free = self.sq_free();
        if (entries.len() as u64) > free as u64 {
            return Err(QueueError::Full {
                free,
                needed: entries.len() as u32,
            });
        }
        let mask = self.qp.depth - 1;
        let mut tail = self.sq_tail;
        for e in entries {
            self.qp
                .sq
                .write(tail as u64 * SQE_BYTES as u64, &e.to_bytes())
                .expect("sq slot in range");
            tail = (tail + 1) & mask;
        }
        self.sq_tail = tail;
        self.qp.sq_tail_doorbell.store(tail, Ordering::Release);
        self.qp.doorbell_writes.fetch_add(1, Ordering::Relaxed);
        self.doorbell_writes += 1;
        Ok(())
    }

    /// Blocking submit: spins until enough slots are free. Only usable when
    /// the dispatcher runs on another thread.
    pub fn submit(&mut self, entries: &[SubmissionEntry]) {
        loop {
            match self.try_submit(entries) {
                Ok(()) => return,
                Err(QueueError::Full { .. }) => std::hint::spin_loop(),
                Err(e) => panic!("submit failed: {e}"),
            }
        }
    }

    /// Appends up to `max` new completions to `out` in ring order and writes
    /// the CQ head doorbell if anything was consumed.
    pub fn consume_into(&mut self, max: usize, out: &mut Vec<CompletionEntry>) -> usize {
        let mask = self.qp.depth - 1;
        let mut n = 0;
        let mut buf = [0u8; CQE_BYTES];
        while n < max {
            let off = self.cq_head as u64 * CQE_BYTES as u64;
            let word = self.qp.cq.load_u16_acquire(off + 14);
            if (word & 1 == 1) != self.cq_phase {
                break;
            }
            self.qp.cq.read(off, &mut buf).expect("cq slot in range");
            let mut entry = CompletionEntry::from_bytes(&buf);
            entry.status = word;
            out.push(entry);
            self.cq_head = (self.cq_head + 1) & mask;
            if self.cq_head == 0 {
                self.cq_phase = !self.cq_phase;
            }
            n += 1;
        }
        if n > 0 {
            self.qp
                .cq_head_doorbell
                .store(self.cq_head, Ordering::Release);
        }
        n
    }

    pub fn consume_completions(&mut self, max: usize) -> Vec<CompletionEntry> {
        let mut out = Vec::new();
        self.consume_into(max, &mut out);
        out
    }
}

/// Reserved region that receives one fetch cycle's worth of SQ entries.
#[derive(Debug, Clone)]
pub struct FetchBuffer {
    region: Arc<Region>,
    depth: u32,
}

impl FetchBuffer {
    pub fn new(memory: &MemoryMap, depth: u32) -> Self {
        Self {
            region: memory.register(depth as usize * SQE_BYTES),
            depth,
        }
    }

    pub fn region(&self) -> &Arc<Region> {
        &self.region
    }

    pub fn capacity(&self) -> u32 {
        self.depth
    }

    pub fn entry(&self, i: u32) -> SubmissionEntry {
        let mut b = [0u8; SQE_BYTES];
        self.region
            .read(i as u64 * SQE_BYTES as u64, &mut b)
            .expect("fetch buffer index in range");
        SubmissionEntry::from_bytes(&b)
    }
}

/// How SQ bytes reach the fetch buffer: through the copy engine's
/// synchronous path or a direct CPU copy.
pub trait FetchPath {
    fn transfer(&mut self, dst: Addr, src: Addr, len: u64) -> Result<(), QueueError>;
}

/// A contiguous run of ring slots moved by one transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub slot: u32,
    pub bytes: u32,
}

/// Dispatcher side of the SQ.
#[derive(Debug)]
pub struct SqConsumer {
    qp: Arc<QueuePair>,
    head: u32,
}

impl SqConsumer {
    pub fn qp(&self) -> &Arc<QueuePair> {
        &self.qp
    }

    pub fn head(&self) -> u32 {
        self.head
    }

    /// Number of new entries announced by the tail doorbell.
    pub fn pending(&self) -> Result<u32, QueueError> {
        doorbell_delta(self.head, self.qp.sq_tail_doorbell(), self.qp.depth)
    }

    /// Copies `n` entries from the head into `dst` with at most two
    /// transfers (two only when the range wraps).
    pub fn fetch_coalesced(
        &mut self,
        n: u32,
        dst: &FetchBuffer,
        via: &mut dyn FetchPath,
    ) -> Result<Vec<Segment>, QueueError> {
        let depth = self.qp.depth;
        if n == 0 || n >= depth || n > dst.depth {
            return Err(QueueError::BadFetchCount(n));
        }
        let first = n.min(depth - self.head);
        let mut segments = vec![Segment {
            slot: self.head,
            bytes: first * SQE_BYTES as u32,
        }];
        if first < n {
            segments.push(Segment {
                slot: 0,
                bytes: (n - first) * SQE_BYTES as u32,
            });
        }
        let mut dst_off = 0u64;
        for s in &segments {
            via.transfer(
                dst.region.addr(dst_off),
                self.qp.sq.addr(s.slot as u64 * SQE_BYTES as u64),
                s.bytes as u64,
            )?;
            dst_off += s.bytes as u64;
        }
        self.advance(n);
        Ok(segments)
    }

    /// Baseline path: one transfer per entry.
    pub fn fetch_per_entry(
        &mut self,
        n: u32,
        dst: &FetchBuffer,
        via: &mut dyn FetchPath,
    ) -> Result<Vec<Segment>, QueueError> {
        let depth = self.qp.depth;
        if n == 0 || n >= depth || n > dst.depth {
            return Err(QueueError::BadFetchCount(n));
        }
        let mut segments = Vec::with_capacity(n as usize);
        for i in 0..n {
            let slot = (self.head + i) & (depth - 1);
            via.transfer(
                dst.region.addr(i as u64 * SQE_BYTES as u64),
                self.qp.sq.addr(slot as u64 * SQE_BYTES as u64),
                SQE_BYTES as u64,
            )?;
            segments.push(Segment {
                slot,
                bytes: SQE_BYTES as u32,
            });
        }
        self.advance(n);
        Ok(segments)
    }

    fn advance(&mut self, n: u32) {
        self.head = (self.head + n) & (self.qp.depth - 1);
        self.qp.sq_head.store(self.head, Ordering::Release);
    }
}

/// Direct CPU copy; `cost_ns` models the latency of each transfer across the
/// interconnect.
pub struct DirectFetch {
    pub memory: Arc<MemoryMap>,
    pub clock: crate::clock::Clock,
    pub cost_ns: u64,
}

impl FetchPath for DirectFetch {
    fn transfer(&mut self, dst: Addr, src: Addr, len: u64) -> Result<(), QueueError> {
        self.clock.burn(self.cost_ns);
        self.memory.copy(dst, src, len)?;
        Ok(())
    }
}
