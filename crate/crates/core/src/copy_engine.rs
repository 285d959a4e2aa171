//! Software copy engine: groups of work queues feeding one engine agent,
//! plus the per-agent asynchronous, batched offload API.
//!
//! An engine fetches descriptors round-robin across its group's work
//! queues (FIFO within a queue), keeps up to `pipeline_depth` copies in
//! flight, performs each memory copy when it retires, and writes a
//! completion record only after every constituent copy is visible.
//!
//! Two synthetic knobs stand in for hardware costs: `synthetic_issue_cost_ns`
//! is charged to the issuing agent per descriptor pushed, and
//! `synthetic_per_copy_cost_ns` is the engine-side latency of each copy.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use crossbeam_queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Nanos};
use crate::exec::{Agent, Poll};
use crate::memory::{Addr, MemoryError, MemoryMap};
use crate::queue::{FetchPath, QueueError};

pub const STATUS_PENDING: u8 = 0;
pub const STATUS_DONE: u8 = 1;
pub const STATUS_BAD_RANGE: u8 = 2;
pub const STATUS_BAD_REGION: u8 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum CopyError {
    #[error("copy engine groups are already configured")]
    AlreadyConfigured,
    #[error("at least one engine group is required")]
    NoGroups,
    #[error("invalid parameter: {0}")]
    InvalidParam(&'static str),
    #[error("work queue {group}/{wq} is already owned")]
    WqOwned { group: u32, wq: usize },
    #[error("no work queue {wq} in group {group}")]
    NoSuchWq { group: u32, wq: usize },
    #[error("copy length must be at least one byte")]
    ZeroLength,
    #[error("work queue {0} rejected a descriptor: slot accounting violated")]
    WqFull(usize),
    #[error("no batch in flight")]
    NothingInFlight,
    #[error("copy failed with status {0}")]
    Failed(u8),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub groups: u32,
    pub wq_depth: u32,
    pub wqs_per_group: usize,
    pub pipeline_depth: u32,
    pub synthetic_issue_cost_ns: u64,
    pub synthetic_per_copy_cost_ns: u64,
    pub s_timeout_ns: u64,
    pub c_timeout_ns: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            wq_depth: 32,
            wqs_per_group: 2,
            pipeline_depth: 8,
            synthetic_issue_cost_ns: 0,
            synthetic_per_copy_cost_ns: 0,
            s_timeout_ns: 5_000,
            c_timeout_ns: 10_000,
        }
    }
}

/// One-byte completion record: 0 pending, 1 done, >= 2 error.
#[derive(Debug, Default)]
pub struct CompletionRecord(AtomicU8);

impl CompletionRecord {
    pub fn status(&self) -> u8 {
        self.0.load(Ordering::Acquire)
    }

    fn reset(&self) {
        self.0.store(STATUS_PENDING, Ordering::Relaxed);
    }

    fn complete(&self, status: u8) {
        self.0.store(status, Ordering::Release);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopyDescriptor {
    pub dst: Addr,
    pub src: Addr,
    pub len: u32,
    /// Caller cookie returned with the completed batch.
    pub tag: u64,
}

/// Reusable batch descriptor. The owner fills `descs` while it is idle; the
/// engine reads them after the descriptor is pushed.
#[derive(Debug, Default)]
pub struct BatchDescriptor {
    descs: Mutex<Vec<CopyDescriptor>>,
    completion: CompletionRecord,
}

impl BatchDescriptor {
    pub fn status(&self) -> u8 {
        self.completion.status()
    }
}

#[derive(Debug)]
enum Descriptor {
    Copy {
        desc: CopyDescriptor,
        completion: Arc<CompletionRecord>,
    },
    Batch(Arc<BatchDescriptor>),
}

/// Dedicated-mode work queue: bounded FIFO, at most one owner, slot
/// accounting done by the owner.
#[derive(Debug)]
pub struct WorkQueue {
    depth: u32,
    slots: ArrayQueue<Descriptor>,
    owned: AtomicBool,
}

impl WorkQueue {
    fn new(depth: u32) -> Self {
        Self {
            depth,
            slots: ArrayQueue::new(depth as usize),
            owned: AtomicBool::new(false),
        }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn queued(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Debug)]
enum Owner {
    Single(Arc<CompletionRecord>),
    Batch { batch: Arc<BatchDescriptor>, last: bool },
}

#[derive(Debug)]
struct InFlight {
    desc: CopyDescriptor,
    ready_at: Nanos,
    owner: Owner,
}

#[derive(Debug, Default)]
struct EngineState {
    next_wq: usize,
    /// Members of the descriptor currently being admitted.
    staged: VecDeque<(CopyDescriptor, Owner)>,
    pipeline: VecDeque<InFlight>,
    /// Worst status seen so far in the batch at the pipeline head.
    batch_status: u8,
}

/// Upper bound on copies retired per engine poll, so other agents sharing
/// the thread get a turn.
const MAX_RETIRE_PER_POLL: usize = 256;

#[derive(Debug)]
pub struct EngineGroup {
    id: u32,
    wqs: Vec<WorkQueue>,
    engine: Mutex<EngineState>,
    memory: Arc<MemoryMap>,
    clock: Clock,
    pipeline_depth: u32,
    issue_cost_ns: u64,
    per_copy_cost_ns: u64,
    copies_done: AtomicU64,
    descriptors_fetched: AtomicU64,
    tracing: AtomicBool,
    executed_tags: Mutex<Vec<u64>>,
}

impl EngineGroup {
    fn new(id: u32, cfg: &EngineConfig, memory: Arc<MemoryMap>, clock: Clock) -> Self {
        Self {
            id,
            wqs: (0..cfg.wqs_per_group).map(|_| WorkQueue::new(cfg.wq_depth)).collect(),
            engine: Mutex::new(EngineState::default()),
            memory,
            clock,
            pipeline_depth: cfg.pipeline_depth.max(1),
            issue_cost_ns: cfg.synthetic_issue_cost_ns,
            per_copy_cost_ns: cfg.synthetic_per_copy_cost_ns,
            copies_done: AtomicU64::new(0),
            descriptors_fetched: AtomicU64::new(0),
            tracing: AtomicBool::new(false),
            executed_tags: Mutex::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn wq_count(&self) -> usize {
        self.wqs.len()
    }

    pub fn wq(&self, i: usize) -> Option<&WorkQueue> {
        self.wqs.get(i)
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn memory(&self) -> &Arc<MemoryMap> {
        &self.memory
    }

    pub fn copies_done(&self) -> u64 {
        self.copies_done.load(Ordering::Relaxed)
    }

    pub fn descriptors_fetched(&self) -> u64 {
        self.descriptors_fetched.load(Ordering::Relaxed)
    }

    /// Records the tag of every executed copy, in execution order (tests).
    pub fn trace_execution(&self) {
        self.executed_tags.lock().unwrap().clear();
        self.tracing.store(true, Ordering::Release);
    }

    pub fn executed_tags(&self) -> Vec<u64> {
        self.executed_tags.lock().unwrap().clone()
    }

    fn claim(&self, wq: usize) -> Result<(), CopyError> {
        let q = self.wqs.get(wq).ok_or(CopyError::NoSuchWq { group: self.id, wq })?;
        if q.owned.swap(true, Ordering::AcqRel) {
            return Err(CopyError::WqOwned { group: self.id, wq });
        }
        Ok(())
    }

    fn push(&self, wq: usize, d: Descriptor) -> Result<(), CopyError> {
        self.clock.burn(self.issue_cost_ns);
        self.wqs[wq].slots.push(d).map_err(|_| CopyError::WqFull(wq))
    }

    /// Runs the engine for one bounded step. Safe to call from any agent;
    /// concurrent callers simply skip when another one holds the engine.
    pub fn drive(&self, now: Nanos) -> Poll {
        let Ok(mut st) = self.engine.try_lock() else {
            return Poll::IDLE;
        };
        let mut progressed = false;
        let mut retired = 0;
        let mut now = now;
        loop {
            while let Some(front) = st.pipeline.front() {
                if front.ready_at > now || retired >= MAX_RETIRE_PER_POLL {
                    break;
                }
                let f = st.pipeline.pop_front().unwrap();
                self.retire(&mut st, f);
                retired += 1;
                progressed = true;
            }
            if retired >= MAX_RETIRE_PER_POLL {
                break;
            }
            let mut admitted = false;
            while (st.pipeline.len() as u32) < self.pipeline_depth {
                if st.staged.is_empty() && !self.fetch_next(&mut st) {
                    break;
                }
                let (desc, owner) = st.staged.pop_front().unwrap();
                st.pipeline.push_back(InFlight {
                    desc,
                    ready_at: now + self.per_copy_cost_ns,
                    owner,
                });
                admitted = true;
            }
            if !admitted || self.per_copy_cost_ns > 0 {
                break;
            }
            now = now.max(self.clock.now());
        }
        let wake_at = st.pipeline.front().map(|f| f.ready_at);
        Poll {
            progressed,
            wake_at,
        }
    }

    /// Pulls the next descriptor round-robin across work queues into the
    /// staging area. Returns false when every queue is empty.
    fn fetch_next(&self, st: &mut EngineState) -> bool {
        let n = self.wqs.len();
        for k in 0..n {
            let i = (st.next_wq + k) % n;
            if let Some(d) = self.wqs[i].slots.pop() {
                st.next_wq = (i + 1) % n;
                self.descriptors_fetched.fetch_add(1, Ordering::Relaxed);
                match d {
                    Descriptor::Copy { desc, completion } => {
                        st.staged.push_back((desc, Owner::Single(completion)));
                    }
                    Descriptor::Batch(b) => {
                        let descs = b.descs.lock().unwrap();
                        let len = descs.len();
                        if len == 0 {
                            drop(descs);
                            b.completion.complete(STATUS_DONE);
                            continue;
                        }
                        for (j, d) in descs.iter().enumerate() {
                            st.staged.push_back((
                                *d,
                                Owner::Batch {
                                    batch: b.clone(),
                                    last: j + 1 == len,
                                },
                            ));
                        }
                    }
                }
                return true;
            }
        }
        false
    }

    fn retire(&self, st: &mut EngineState, f: InFlight) {
        let status = match self.memory.copy(f.desc.dst, f.desc.src, f.desc.len as u64) {
            Ok(()) => STATUS_DONE,
            Err(MemoryError::UnknownRegion(_)) => STATUS_BAD_REGION,
            Err(MemoryError::OutOfBounds { .. }) => STATUS_BAD_RANGE,
        };
        self.copies_done.fetch_add(1, Ordering::Relaxed);
        if self.tracing.load(Ordering::Relaxed) {
            self.executed_tags.lock().unwrap().push(f.desc.tag);
        }
        st.batch_status = st.batch_status.max(status);
        match f.owner {
            Owner::Single(rec) => {
                rec.complete(st.batch_status);
                st.batch_status = 0;
            }
            Owner::Batch { batch, last } => {
                if last {
                    batch.completion.complete(st.batch_status);
                    st.batch_status = 0;
                }
            }
        }
    }

    /// Spins until `done()` holds, driving the engine meanwhile. On a virtual
    /// clock idle spins advance time to the engine's next retirement.
    pub fn wait_until(&self, done: impl Fn() -> bool) {
        while !done() {
            let now = self.clock.now();
            let p = self.drive(now);
            if !p.progressed {
                if self.clock.is_virtual() {
                    let next = match p.wake_at {
                        Some(t) if t > now => t,
                        _ => now + 100,
                    };
                    self.clock.advance_to(next);
                } else {
                    std::hint::spin_loop();
                }
            }
        }
    }

    /// Issues one descriptor and polls it to completion.
    pub fn sync_copy(&self, port: &SyncPort, dst: Addr, src: Addr, len: u64) -> Result<(), CopyError> {
        if len == 0 {
            return Err(CopyError::ZeroLength);
        }
        port.record.reset();
        self.push(
            port.wq,
            Descriptor::Copy {
                desc: CopyDescriptor {
                    dst,
                    src,
                    len: len as u32,
                    tag: u64::MAX,
                },
                completion: port.record.clone(),
            },
        )?;
        self.wait_until(|| port.record.status() != STATUS_PENDING);
        match port.record.status() {
            STATUS_DONE => Ok(()),
            s => Err(CopyError::Failed(s)),
        }
    }
}

/// Builds engine groups once per system.
#[derive(Debug, Default)]
pub struct CopyEngineSystem {
    groups: OnceLock<Vec<Arc<EngineGroup>>>,
}

impl CopyEngineSystem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn group_configure(
        &self,
        cfg: &EngineConfig,
        memory: Arc<MemoryMap>,
        clock: Clock,
    ) -> Result<Vec<Arc<EngineGroup>>, CopyError> {
        let groups = group_configure(cfg, memory, clock)?;
        self.groups
            .set(groups.clone())
            .map_err(|_| CopyError::AlreadyConfigured)?;
        Ok(groups)
    }

    pub fn groups(&self) -> &[Arc<EngineGroup>] {
        self.groups.get().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn group_configure(
    cfg: &EngineConfig,
    memory: Arc<MemoryMap>,
    clock: Clock,
) -> Result<Vec<Arc<EngineGroup>>, CopyError> {
    if cfg.groups == 0 {
        return Err(CopyError::NoGroups);
    }
    if cfg.wq_depth == 0 {
        return Err(CopyError::InvalidParam("wq_depth"));
    }
    if cfg.wqs_per_group == 0 {
        return Err(CopyError::InvalidParam("wqs_per_group"));
    }
    Ok((0..cfg.groups)
        .map(|g| Arc::new(EngineGroup::new(g, cfg, memory.clone(), clock.clone())))
        .collect())
}

/// The engine's polling loop as a runtime agent.
pub struct EngineAgent {
    name: String,
    group: Arc<EngineGroup>,
}

impl EngineAgent {
    pub fn new(group: Arc<EngineGroup>) -> Self {
        Self {
            name: format!("engine-{}", group.id),
            group,
        }
    }
}

impl Agent for EngineAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self, now: Nanos) -> Poll {
        self.group.drive(now)
    }
}

/// Owner handle for synchronous, non-batched copies on one work queue.
#[derive(Debug)]
pub struct SyncPort {
    group: Arc<EngineGroup>,
    wq: usize,
    record: Arc<CompletionRecord>,
    transfers: u64,
}

impl SyncPort {
    pub fn new(group: Arc<EngineGroup>, wq: usize) -> Result<Self, CopyError> {
        group.claim(wq)?;
        Ok(Self {
            group,
            wq,
            record: Arc::new(CompletionRecord::default()),
            transfers: 0,
        })
    }

    pub fn copy(&mut self, dst: Addr, src: Addr, len: u64) -> Result<(), CopyError> {
        self.transfers += 1;
        let group = self.group.clone();
        group.sync_copy(self, dst, src, len)
    }

    pub fn transfers(&self) -> u64 {
        self.transfers
    }
}

impl FetchPath for SyncPort {
    fn transfer(&mut self, dst: Addr, src: Addr, len: u64) -> Result<(), QueueError> {
        self.copy(dst, src, len)
            .map_err(|e| QueueError::Transfer(e.to_string()))
    }
}

/// A batch returned to its owner after the engine finished it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompletedBatch {
    pub status: u8,
    pub tags: Vec<u64>,
    pub issued_at: Nanos,
}

impl CompletedBatch {
    pub fn ok(&self) -> bool {
        self.status == STATUS_DONE
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OffloadStats {
    pub copies: u64,
    pub batches_issued: u64,
    pub waits: u64,
}

/// Per-agent asynchronous, batched offload context bound to one work queue.
#[derive(Debug)]
pub struct OffloadContext {
    group: Arc<EngineGroup>,
    wq: usize,
    batch_size: usize,
    num_desc: usize,
    /// `num_desc` in-flight slots plus one being filled.
    slots: Vec<Arc<BatchDescriptor>>,
    free: Vec<usize>,
    pending: Option<usize>,
    pending_len: usize,
    oldest_pending_append: Option<Nanos>,
    in_flight: VecDeque<(usize, Nanos)>,
    /// Batches reclaimed early to make room under a full budget, handed out
    /// by the next poll or wait.
    reclaimed: VecDeque<CompletedBatch>,
    stats: OffloadStats,
}

impl OffloadContext {
    pub fn init(
        group: Arc<EngineGroup>,
        wq: usize,
        batch_size: usize,
        num_desc: usize,
    ) -> Result<Self, CopyError> {
        if batch_size < 1 {
            return Err(CopyError::InvalidParam("batch_size"));
        }
        let depth = group
            .wq(wq)
            .ok_or(CopyError::NoSuchWq { group: group.id, wq })?
            .depth as usize;
        if num_desc < 1 || num_desc > depth {
            return Err(CopyError::InvalidParam("num_desc"));
        }
        group.claim(wq)?;
        let slots = (0..=num_desc)
            .map(|_| {
                Arc::new(BatchDescriptor {
                    descs: Mutex::new(Vec::with_capacity(batch_size)),
                    completion: CompletionRecord::default(),
                })
            })
            .collect();
        Ok(Self {
            group,
            wq,
            batch_size,
            num_desc,
            slots,
            free: (0..=num_desc).rev().collect(),
            pending: None,
            pending_len: 0,
            oldest_pending_append: None,
            in_flight: VecDeque::with_capacity(num_desc),
            reclaimed: VecDeque::new(),
            stats: OffloadStats::default(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_desc(&self) -> usize {
        self.num_desc
    }

    pub fn pending_len(&self) -> usize {
        self.pending_len
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len() + self.reclaimed.len()
    }

    pub fn stats(&self) -> OffloadStats {
        self.stats
    }

    pub fn group(&self) -> &Arc<EngineGroup> {
        &self.group
    }

    /// Appends a copy to the pending batch, issuing it once it reaches
    /// `batch_size`. Returns whether a batch was issued.
    pub fn batch_issue_async(&mut self, dst: Addr, src: Addr, len: u64, tag: u64) -> Result<bool, CopyError> {
        if len == 0 {
            return Err(CopyError::ZeroLength);
        }
        self.group.memory.check(dst, len)?;
        self.group.memory.check(src, len)?;
        let slot = match self.pending {
            Some(s) => s,
            None => {
                let s = self.free.pop().expect("one slot is always free for pending");
                self.slots[s].descs.lock().unwrap().clear();
                self.pending = Some(s);
                self.oldest_pending_append = Some(self.group.clock.now());
                s
            }
        };
        self.slots[slot].descs.lock().unwrap().push(CopyDescriptor {
            dst,
            src,
            len: len as u32,
            tag,
        });
        self.pending_len += 1;
        self.stats.copies += 1;
        if self.pending_len >= self.batch_size {
            self.batch_issue_pending()?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn batch_should_issue_pending(&self, s_timeout: Nanos) -> bool {
        match self.oldest_pending_append {
            Some(t) if self.pending_len > 0 => self.group.clock.now().saturating_sub(t) >= s_timeout,
            _ => false,
        }
    }

    /// Issues the pending batch, however short. Waits for the oldest
    /// in-flight batch first if the descriptor budget is exhausted (the
    /// completed batch is then held for the next poll).
    pub fn batch_issue_pending(&mut self) -> Result<(), CopyError> {
        let Some(slot) = self.pending else {
            return Ok(());
        };
        if self.in_flight.len() >= self.num_desc {
            let (oldest, _) = self.in_flight.front().copied().unwrap();
            let b = self.slots[oldest].clone();
            self.group.wait_until(|| b.status() != STATUS_PENDING);
            self.stats.waits += 1;
            let done = self.pop_front_completed();
            self.reclaimed.push_back(done);
        }
        let b = self.slots[slot].clone();
        b.completion.reset();
        self.group.push(self.wq, Descriptor::Batch(b))?;
        self.in_flight.push_back((slot, self.group.clock.now()));
        self.pending = None;
        self.pending_len = 0;
        self.oldest_pending_append = None;
        self.stats.batches_issued += 1;
        Ok(())
    }

    /// Earliest time at which either timeout rule fires.
    pub fn next_deadline(&self, s_timeout: Nanos, c_timeout: Nanos) -> Option<Nanos> {
        let issue = self
            .oldest_pending_append
            .filter(|_| self.pending_len > 0)
            .map(|t| t + s_timeout);
        let wait = self.in_flight.front().map(|&(_, t)| t + c_timeout);
        crate::exec::earliest(issue, wait)
    }

    pub fn batch_should_wait(&self, c_timeout: Nanos) -> bool {
        if self.in_flight.len() >= self.num_desc {
            return true;
        }
        match self.in_flight.front() {
            Some(&(_, t)) => self.group.clock.now().saturating_sub(t) >= c_timeout,
            None => false,
        }
    }

    /// Blocks until the oldest in-flight batch completes and returns it.
    pub fn batch_wait_oldest(&mut self) -> Result<CompletedBatch, CopyError> {
        if let Some(done) = self.reclaimed.pop_front() {
            return Ok(done);
        }
        let &(slot, _) = self.in_flight.front().ok_or(CopyError::NothingInFlight)?;
        let b = self.slots[slot].clone();
        self.group.wait_until(|| b.status() != STATUS_PENDING);
        self.stats.waits += 1;
        Ok(self.pop_front_completed())
    }

    /// Non-blocking: every completed batch at the front of the in-flight
    /// FIFO, stopping at the first incomplete one.
    pub fn poll_completions(&mut self) -> Vec<CompletedBatch> {
        let mut out: Vec<CompletedBatch> = self.reclaimed.drain(..).collect();
        while let Some(&(slot, _)) = self.in_flight.front() {
            if self.slots[slot].status() == STATUS_PENDING {
                break;
            }
            out.push(self.pop_front_completed());
        }
        out
    }

    fn pop_front_completed(&mut self) -> CompletedBatch {
        let (slot, issued_at) = self.in_flight.pop_front().unwrap();
        let b = &self.slots[slot];
        let tags = b.descs.lock().unwrap().iter().map(|d| d.tag).collect();
        let done = CompletedBatch {
            status: b.status(),
            tags,
            issued_at,
        };
        self.free.push(slot);
        done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Region;
    use proptest::prelude::*;

    struct Rig {
        clock: Clock,
        memory: Arc<MemoryMap>,
        groups: Vec<Arc<EngineGroup>>,
        src: Arc<Region>,
        dst: Arc<Region>,
    }

    fn rig(cfg: EngineConfig) -> Rig {
        let clock = Clock::virtual_at(0);
        let memory = MemoryMap::new();
        let src = memory.register(1 << 16);
        let dst = memory.register(1 << 16);
        let pattern: Vec<u8> = (0..1 << 16).map(|i: u32| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        src.write(0, &pattern).unwrap();
        let groups = group_configure(&cfg, memory.clone(), clock.clone()).unwrap();
        Rig {
            clock,
            memory,
            groups,
            src,
            dst,
        }
    }

    fn one_group() -> EngineConfig {
        EngineConfig {
            groups: 1,
            ..Default::default()
        }
    }

    fn bytes(r: &Region, off: u64, len: usize) -> Vec<u8> {
        let mut v = vec![0; len];
        r.read(off, &mut v).unwrap();
        v
    }

    #[test]
    fn configure_groups() {
        let r = rig(EngineConfig::default());
        assert_eq!(r.groups.len(), 4);
        assert_eq!(r.groups.iter().map(|g| g.wq_count()).sum::<usize>(), 8);
        assert!(r.groups.iter().all(|g| g.wq(0).unwrap().depth() == 32));
        assert_eq!(rig(one_group()).groups.len(), 1);

        let sys = CopyEngineSystem::new();
        sys.group_configure(&one_group(), r.memory.clone(), r.clock.clone()).unwrap();
        assert!(matches!(
            sys.group_configure(&one_group(), r.memory.clone(), r.clock.clone()),
            Err(CopyError::AlreadyConfigured)
        ));
        assert!(matches!(
            group_configure(&EngineConfig { groups: 0, ..Default::default() }, r.memory, r.clock),
            Err(CopyError::NoGroups)
        ));
    }

    #[test]
    fn ctx_init_validation() {
        let r = rig(one_group());
        let g = r.groups[0].clone();
        let ctx = OffloadContext::init(g.clone(), 1, 16, 32).unwrap();
        assert_eq!((ctx.batch_size(), ctx.num_desc()), (16, 32));
        assert_eq!(
            OffloadContext::init(g.clone(), 1, 1, 1).unwrap_err(),
            CopyError::WqOwned { group: 0, wq: 1 }
        );
        assert_eq!(
            OffloadContext::init(g.clone(), 0, 0, 1).unwrap_err(),
            CopyError::InvalidParam("batch_size")
        );
        assert_eq!(
            OffloadContext::init(g.clone(), 0, 1, 33).unwrap_err(),
            CopyError::InvalidParam("num_desc")
        );
        assert_eq!(
            OffloadContext::init(g.clone(), 0, 1, 0).unwrap_err(),
            CopyError::InvalidParam("num_desc")
        );
        assert!(OffloadContext::init(g, 0, 1, 1).is_ok());
    }

    #[test]
    fn batch_threshold_issues_at_batch_size() {
        let r = rig(one_group());
        let mut ctx = OffloadContext::init(r.groups[0].clone(), 1, 16, 32).unwrap();
        for i in 0..15 {
            assert!(!ctx.batch_issue_async(r.dst.addr(i * 8), r.src.addr(i * 8), 8, i).unwrap());
        }
        assert_eq!(ctx.pending_len(), 15);
        assert!(ctx.batch_issue_async(r.dst.addr(120), r.src.addr(120), 8, 15).unwrap());
        assert_eq!((ctx.pending_len(), ctx.in_flight()), (0, 1));
        let done = ctx.batch_wait_oldest().unwrap();
        assert!(done.ok());
        assert_eq!(done.tags, (0..16).collect::<Vec<_>>());
        assert_eq!(bytes(&r.dst, 0, 128), bytes(&r.src, 0, 128));

        let mut single = OffloadContext::init(r.groups[0].clone(), 0, 1, 4).unwrap();
        for i in 0..3 {
            assert!(single.batch_issue_async(r.dst.addr(0), r.src.addr(0), 1, i).unwrap());
        }
    }

    #[test]
    fn issue_rejects_bad_input() {
        let r = rig(one_group());
        let mut ctx = OffloadContext::init(r.groups[0].clone(), 1, 4, 4).unwrap();
        assert_eq!(
            ctx.batch_issue_async(r.dst.addr(0), r.src.addr(0), 0, 0),
            Err(CopyError::ZeroLength)
        );
        assert!(matches!(
            ctx.batch_issue_async(r.dst.addr((1 << 16) - 4), r.src.addr(0), 8, 0),
            Err(CopyError::Memory(MemoryError::OutOfBounds { .. }))
        ));
        assert_eq!(ctx.pending_len(), 0);
    }

    #[test]
    fn pending_timeout_rule() {
        let r = rig(one_group());
        let mut ctx = OffloadContext::init(r.groups[0].clone(), 1, 16, 32).unwrap();
        assert!(!ctx.batch_should_issue_pending(5_000));
        for i in 0..3 {
            ctx.batch_issue_async(r.dst.addr(i), r.src.addr(i), 1, i).unwrap();
        }
        r.clock.advance_to(4_999);
        assert!(!ctx.batch_should_issue_pending(5_000));
        assert_eq!(ctx.pending_len(), 3);
        r.clock.advance_to(5_000);
        assert!(ctx.batch_should_issue_pending(5_000));
        ctx.batch_issue_pending().unwrap();
        assert_eq!(ctx.in_flight(), 1);
        assert_eq!(ctx.batch_wait_oldest().unwrap().tags, vec![0, 1, 2]);
        // Issuing with nothing pending is a no-op.
        ctx.batch_issue_pending().unwrap();
        assert_eq!(ctx.stats().batches_issued, 1);
    }

    #[test]
    fn wait_rule_and_fifo() {
        let r = rig(EngineConfig {
            groups: 1,
            synthetic_per_copy_cost_ns: 1_000,
            ..Default::default()
        });
        let mut ctx = OffloadContext::init(r.groups[0].clone(), 1, 1, 2).unwrap();
        assert_eq!(ctx.batch_wait_oldest(), Err(CopyError::NothingInFlight));
        assert!(!ctx.batch_should_wait(10_000));
        ctx.batch_issue_async(r.dst.addr(0), r.src.addr(0), 4, 7).unwrap();
        assert!(!ctx.batch_should_wait(10_000));
        ctx.batch_issue_async(r.dst.addr(8), r.src.addr(8), 4, 8).unwrap();
        // Budget exhausted: wait regardless of age.
        assert!(ctx.batch_should_wait(u64::MAX));
        assert_eq!(ctx.batch_wait_oldest().unwrap().tags, vec![7]);
        assert_eq!(ctx.batch_wait_oldest().unwrap().tags, vec![8]);

        ctx.batch_issue_async(r.dst.addr(0), r.src.addr(0), 4, 9).unwrap();
        r.clock.advance_to(r.clock.now() + 10_000);
        assert!(ctx.batch_should_wait(10_000));
    }

    #[test]
    fn full_budget_issue_waits_for_oldest() {
        let r = rig(EngineConfig {
            groups: 1,
            synthetic_per_copy_cost_ns: 500,
            ..Default::default()
        });
        let mut ctx = OffloadContext::init(r.groups[0].clone(), 1, 1, 1).unwrap();
        ctx.batch_issue_async(r.dst.addr(0), r.src.addr(0), 4, 1).unwrap();
        ctx.batch_issue_async(r.dst.addr(8), r.src.addr(8), 4, 2).unwrap();
        let got: Vec<Vec<u64>> = std::iter::from_fn(|| ctx.batch_wait_oldest().ok().map(|b| b.tags)).collect();
        assert_eq!(got, vec![vec![1], vec![2]]);
        assert!(ctx.stats().waits >= 2);
    }

    #[test]
    fn poll_completions_returns_fifo_prefix() {
        let r = rig(EngineConfig {
            groups: 1,
            synthetic_per_copy_cost_ns: 1_000,
            ..Default::default()
        });
        let mut ctx = OffloadContext::init(r.groups[0].clone(), 1, 1, 8).unwrap();
        assert!(ctx.poll_completions().is_empty());
        for i in 0..3 {
            ctx.batch_issue_async(r.dst.addr(i), r.src.addr(i), 1, i).unwrap();
        }
        // Newer batches finish while the oldest is still pending.
        let (s1, _) = ctx.in_flight[1];
        let (s2, _) = ctx.in_flight[2];
        ctx.slots[s1].completion.complete(STATUS_DONE);
        ctx.slots[s2].completion.complete(STATUS_DONE);
        assert!(ctx.poll_completions().is_empty());
        r.groups[0].wait_until(|| r.groups[0].copies_done() == 3);
        let done = ctx.poll_completions();
        assert_eq!(done.iter().map(|b| b.tags[0]).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn engine_round_robins_between_work_queues() {
        let r = rig(EngineConfig {
            groups: 1,
            pipeline_depth: 1,
            ..Default::default()
        });
        let g = r.groups[0].clone();
        g.trace_execution();
        let mut a = OffloadContext::init(g.clone(), 0, 1, 8).unwrap();
        let mut b = OffloadContext::init(g.clone(), 1, 1, 8).unwrap();
        for t in [10, 11, 12] {
            a.batch_issue_async(r.dst.addr(t), r.src.addr(t), 1, t).unwrap();
        }
        for t in [20, 21] {
            b.batch_issue_async(r.dst.addr(t), r.src.addr(t), 1, t).unwrap();
        }
        g.wait_until(|| g.copies_done() == 5);
        assert_eq!(g.executed_tags(), vec![10, 20, 11, 21, 12]);
    }

    #[test]
    fn error_status_is_propagated() {
        let r = rig(one_group());
        let g = r.groups[0].clone();
        let mut ctx = OffloadContext::init(g.clone(), 1, 2, 4).unwrap();
        // Bypass issue-time validation to exercise the engine's error path.
        let slot = ctx.free.pop().unwrap();
        {
            let mut d = ctx.slots[slot].descs.lock().unwrap();
            d.clear();
            d.push(CopyDescriptor { dst: r.dst.addr(0), src: r.src.addr(0), len: 4, tag: 1 });
            d.push(CopyDescriptor { dst: r.dst.addr(1 << 16), src: r.src.addr(0), len: 4, tag: 2 });
        }
        ctx.pending = Some(slot);
        ctx.pending_len = 2;
        ctx.batch_issue_pending().unwrap();
        let done = ctx.batch_wait_oldest().unwrap();
        assert_eq!(done.status, STATUS_BAD_RANGE);
        assert!(!done.ok());
    }

    #[test]
    fn sync_copy_paths() {
        let r = rig(one_group());
        let g = r.groups[0].clone();
        let mut port = SyncPort::new(g.clone(), 0).unwrap();
        port.copy(r.dst.addr(4096), r.src.addr(0), 4096).unwrap();
        assert_eq!(bytes(&r.dst, 4096, 4096), bytes(&r.src, 0, 4096));
        port.copy(r.dst.addr(3), r.src.addr(9), 1).unwrap();
        assert_eq!(bytes(&r.dst, 3, 1), bytes(&r.src, 9, 1));
        assert_eq!(
            port.copy(r.dst.addr(1 << 16), r.src.addr(0), 8),
            Err(CopyError::Failed(STATUS_BAD_RANGE))
        );
        assert_eq!(port.transfers(), 3);
        assert!(SyncPort::new(g, 0).is_err());
    }

    /// Copies per second of virtual time for a closed issue/wait loop.
    fn offload_rate(batch_size: usize, num_desc: usize, issue_ns: u64, copy_ns: u64) -> f64 {
        let r = rig(EngineConfig {
            groups: 1,
            synthetic_issue_cost_ns: issue_ns,
            synthetic_per_copy_cost_ns: copy_ns,
            ..Default::default()
        });
        let g = r.groups[0].clone();
        let mut ctx = OffloadContext::init(g.clone(), 1, batch_size, num_desc).unwrap();
        let total = 4096u64;
        let mut done = 0;
        let t0 = r.clock.now();
        let mut i = 0;
        while done < total {
            if i < total {
                ctx.batch_issue_async(r.dst.addr(i * 8 % 60000), r.src.addr(0), 8, i).unwrap();
                i += 1;
            } else if ctx.pending_len() > 0 {
                ctx.batch_issue_pending().unwrap();
            }
            g.drive(r.clock.now());
            for b in ctx.poll_completions() {
                done += b.tags.len() as u64;
            }
            if ctx.batch_should_wait(u64::MAX) || (i == total && ctx.in_flight() > 0) {
                done += ctx.batch_wait_oldest().unwrap().tags.len() as u64;
            }
        }
        total as f64 / ((r.clock.now() - t0) as f64 * 1e-9)
    }

    #[test]
    fn deeper_budget_overlaps_copies() {
        let shallow = offload_rate(1, 1, 0, 2_000);
        let deep = offload_rate(1, 32, 0, 2_000);
        assert!(deep >= 2.0 * shallow, "shallow {shallow}, deep {deep}");
    }

    #[test]
    fn batching_amortizes_issue_cost() {
        let unbatched = offload_rate(1, 32, 2_000, 0);
        let batched = offload_rate(16, 32, 2_000, 0);
        assert!(batched >= 8.0 * unbatched, "bs1 {unbatched}, bs16 {batched}");
    }

    proptest! {
        #[test]
        fn completed_batches_match_source(
            copies in prop::collection::vec((0u64..60_000, 0u64..60_000, 1u64..512), 1..64),
            batch_size in 1usize..20,
            copy_ns in 0u64..3,
        ) {
            let r = rig(EngineConfig { groups: 1, synthetic_per_copy_cost_ns: copy_ns * 300, ..Default::default() });
            let g = r.groups[0].clone();
            let mut ctx = OffloadContext::init(g.clone(), 1, batch_size, 8).unwrap();
            // Disjoint destinations: each copy gets its own 512-byte lane.
            for (k, &(src, _, len)) in copies.iter().enumerate() {
                ctx.batch_issue_async(r.dst.addr(k as u64 * 512), r.src.addr(src.min(65536 - len)), len, k as u64).unwrap();
            }
            ctx.batch_issue_pending().unwrap();
            let mut seen = 0;
            while ctx.in_flight() > 0 {
                let b = ctx.batch_wait_oldest().unwrap();
                prop_assert!(b.ok());
                seen += b.tags.len();
            }
            prop_assert_eq!(seen, copies.len());
            for (k, &(src, _, len)) in copies.iter().enumerate() {
                let s = src.min(65536 - len);
                prop_assert_eq!(bytes(&r.dst, k as u64 * 512, len as usize), bytes(&r.src, s, len as usize));
            }
        }
    }
}
