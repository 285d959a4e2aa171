//! The emulated SSD: backing store, service units and request lifecycle.
//!
//! A service unit is one dispatcher plus `workers_per_unit` workers bound to
//! one copy-engine group. Queue pair `q` belongs to unit `q % n_units`. In
//! centralized mode a single dispatcher serves every queue pair and feeds all
//! workers, which is the shape of the original single-dispatcher emulator.
//!
//! Dispatcher: fetch from each owned SQ, decode, schedule the batch on the
//! timing model, hand records to worker local queues round-robin.
//! Worker: copy data from the backing store into the host buffer through its
//! offload context, then post the CQE once both the copy is done and the
//! target time has passed.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Nanos};
use crate::copy_engine::{
    group_configure, CompletedBatch, CopyError, EngineAgent, EngineConfig, EngineGroup, OffloadContext, SyncPort,
};
use crate::exec::{Agent, Poll};
use crate::memory::{Addr, MemoryMap};
use crate::queue::{
    status, DirectFetch, FetchBuffer, FetchPath, QueueError, QueuePair, SqConsumer, SubmissionEntry, NSID, OPC_READ,
};
use crate::store::{BackingStore, StoreError};
use crate::timing::{
    derive_params, local_model_partition, ModelScope, TimingError, TimingModel, TimingParams, UnitSpan, UpdateMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FetchPathKind {
    /// Synchronous copy through the unit's engine group.
    #[default]
    Engine,
    /// CPU copy with a fixed per-transfer interconnect latency.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrontendMode {
    #[default]
    Distributed,
    Centralized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FetchMode {
    #[default]
    Coalesced,
    PerEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub t_max_iops: f64,
    pub l_min_us: f64,
    pub n_instances: u32,
    pub unit_bytes: u32,
    pub update_mode: UpdateMode,
    pub scope: ModelScope,
    /// Synthetic work done while holding the timing-model guard.
    pub guard_hold_ns: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            t_max_iops: 200_000.0,
            l_min_us: 50.0,
            n_instances: 8,
            unit_bytes: 512,
            update_mode: UpdateMode::Aggregated,
            scope: ModelScope::Global,
            guard_hold_ns: 0,
        }
    }
}

impl TimingConfig {
    pub fn params(&self, block_bytes: u32) -> Result<TimingParams, TimingError> {
        let l_min = Duration::from_nanos((self.l_min_us * 1e3).round().max(0.0) as u64);
        derive_params(self.t_max_iops, l_min, self.n_instances, self.unit_bytes)?.with_block_bytes(block_bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub capacity_blocks: u64,
    pub block_bytes: u32,
    pub n_service_units: u32,
    pub workers_per_unit: u32,
    pub n_queue_pairs: u32,
    pub queue_depth: u32,
    pub timing: TimingConfig,
    /// `groups` and `wqs_per_group` are sized by the device: one group per
    /// unit, one work queue per worker plus one for fetching.
    pub engine: EngineConfig,
    pub max_copies_per_iteration: u32,
    pub copy_batch_size: usize,
    pub copy_num_desc: usize,
    pub fetch_path: FetchPathKind,
    pub direct_fetch_cost_ns: u64,
    pub frontend_mode: FrontendMode,
    pub fetch_mode: FetchMode,
    /// When false the worker skips the data copy (ingestion-only runs).
    pub backend_copy: bool,
    pub pattern_seed: u64,
    #[serde(skip)]
    pub inject_min_delay_bug: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            capacity_blocks: 1 << 17,
            block_bytes: 512,
            n_service_units: 4,
            workers_per_unit: 1,
            n_queue_pairs: 64,
            queue_depth: 1024,
            timing: TimingConfig::default(),
            engine: EngineConfig::default(),
            max_copies_per_iteration: 64,
            copy_batch_size: 16,
            copy_num_desc: 16,
            fetch_path: FetchPathKind::Engine,
            direct_fetch_cost_ns: 1_000,
            frontend_mode: FrontendMode::Distributed,
            fetch_mode: FetchMode::Coalesced,
            backend_copy: true,
            pattern_seed: 0x5eed,
            inject_min_delay_bug: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Copy(#[from] CopyError),
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: &str| Err(DeviceError::Invalid(m.to_string()));
        if self.capacity_blocks == 0 {
            return bad("capacity_blocks must be at least 1");
        }
        if self.n_service_units == 0 || self.workers_per_unit == 0 || self.n_queue_pairs == 0 {
            return bad("unit, worker and queue pair counts must be at least 1");
        }
        if self.n_queue_pairs > u16::MAX as u32 {
            return bad("too many queue pairs");
        }
        if self.frontend_mode == FrontendMode::Distributed && self.n_queue_pairs < self.n_service_units {
            return bad("distributed mode needs n_queue_pairs >= n_service_units");
        }
        if self.max_copies_per_iteration == 0 || self.copy_batch_size == 0 {
            return bad("max_copies_per_iteration and copy_batch_size must be at least 1");
        }
        if self.copy_num_desc == 0 || self.copy_num_desc > self.engine.wq_depth as usize {
            return bad("copy_num_desc must be in 1..=engine.wq_depth");
        }
        if self.block_bytes == 0 || self.block_bytes % 8 != 0 {
            return bad("block_bytes must be a positive multiple of 8");
        }
        self.timing.params(self.block_bytes)?;
        Ok(())
    }

    pub fn n_dispatchers(&self) -> u32 {
        match self.frontend_mode {
            FrontendMode::Distributed => self.n_service_units,
            FrontendMode::Centralized => 1,
        }
    }

    /// Unit owning queue pair `qid`.
    pub fn unit_of(&self, qid: u16) -> u16 {
        (qid as u32 % self.n_dispatchers()) as u16
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    #[default]
    Fetched,
    CopyIssued,
    CopyDone,
    Completed,
}

/// Lifecycle of one command inside the device. Times are clock nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub qid: u16,
    pub cid: u16,
    /// Dispatcher that fetched it.
    pub unit: u16,
    pub slba: u64,
    pub nlb: u16,
    pub data_ptr: u64,
    pub fetch_ns: Nanos,
    pub target_ps: u64,
    pub target_ns: Nanos,
    pub copy_done_ns: Nanos,
    pub posted_ns: Nanos,
    pub status: u16,
    pub state: RequestState,
}

#[derive(Debug, Default)]
pub struct DispatcherStats {
    pub fetched: AtomicU64,
    pub fetch_transfers: AtomicU64,
    pub busy_ns: AtomicU64,
    pub error_completions: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DispatcherSnapshot {
    pub unit: u16,
    pub fetched: u64,
    pub fetch_transfers: u64,
    pub busy_ns: u64,
}

impl DispatcherSnapshot {
    /// Requests per second this dispatcher could ingest on a dedicated core.
    pub fn capacity(&self) -> f64 {
        if self.busy_ns == 0 {
            return 0.0;
        }
        self.fetched as f64 / (self.busy_ns as f64 * 1e-9)
    }
}

#[derive(Debug, Default)]
struct WorkerShared {
    done: Mutex<Vec<RequestRecord>>,
    posted: AtomicU64,
    error_completions: AtomicU64,
    in_progress: AtomicU64,
    batches_issued: AtomicU64,
    copies: AtomicU64,
}

struct Dispatcher {
    name: String,
    unit: u16,
    clock: Clock,
    memory: Arc<MemoryMap>,
    consumers: Vec<SqConsumer>,
    next_qp: usize,
    fetch_buf: FetchBuffer,
    path: Box<dyn FetchPath + Send>,
    fetch_mode: FetchMode,
    timing: Arc<TimingModel>,
    workers: Vec<Arc<ArrayQueue<RequestRecord>>>,
    next_worker: usize,
    backlog: VecDeque<RequestRecord>,
    capacity_blocks: u64,
    block_bytes: u32,
    stats: Arc<DispatcherStats>,
    spans: Vec<UnitSpan>,
    records: Vec<RequestRecord>,
}

impl Dispatcher {
    /// Checks an entry; `Err` carries the completion status to post.
    fn decode(&self, e: &SubmissionEntry) -> Result<(), u16> {
        if e.opcode != OPC_READ {
            return Err(status::INVALID_OPCODE);
        }
        if e.nsid != NSID {
            return Err(status::INVALID_NAMESPACE);
        }
        if e.slba.checked_add(e.blocks()).is_none_or(|end| end > self.capacity_blocks) {
            return Err(status::LBA_OUT_OF_RANGE);
        }
        let len = e.blocks() * self.block_bytes as u64;
        if self.memory.check(Addr::from_ptr(e.data_ptr), len).is_err() {
            return Err(status::DATA_TRANSFER_ERROR);
        }
        Ok(())
    }

    fn deliver(&mut self, rec: RequestRecord) {
        if self.backlog.is_empty() {
            let w = self.next_worker;
            self.next_worker = (w + 1) % self.workers.len();
            if let Err(rec) = self.workers[w].push(rec) {
                self.backlog.push_back(rec);
            }
        } else {
            self.backlog.push_back(rec);
        }
    }

    /// Moves backlog into local queues. Returns whether anything moved.
    fn drain_backlog(&mut self) -> bool {
        let mut moved = false;
        let mut stalled = 0;
        while let Some(rec) = self.backlog.pop_front() {
            let w = self.next_worker;
            self.next_worker = (w + 1) % self.workers.len();
            match self.workers[w].push(rec) {
                Ok(()) => {
                    moved = true;
                    stalled = 0;
                }
                Err(rec) => {
                    self.backlog.push_front(rec);
                    stalled += 1;
                    if stalled == self.workers.len() {
                        break;
                    }
                }
            }
        }
        moved
    }

    /// Fetches and schedules everything pending on one SQ.
    fn service(&mut self, i: usize) -> u64 {
        let n = match self.consumers[i].pending() {
            Ok(0) => return 0,
            Ok(n) => n,
            Err(e) => {
                log::error!("{}: {e}", self.name);
                return 0;
            }
        };
        let consumer = &mut self.consumers[i];
        let fetched = match self.fetch_mode {
            FetchMode::Coalesced => consumer.fetch_coalesced(n, &self.fetch_buf, self.path.as_mut()),
            FetchMode::PerEntry => consumer.fetch_per_entry(n, &self.fetch_buf, self.path.as_mut()),
        };
        let segments = match fetched {
            Ok(s) => s,
            Err(e) => {
                log::error!("{}: fetch failed: {e}", self.name);
                return 0;
            }
        };
        self.stats
            .fetch_transfers
            .fetch_add(segments.len() as u64, Ordering::Relaxed);
        let fetch_ns = self.clock.now();
        let qp = consumer.qp().clone();
        let head = consumer.head();
        self.spans.clear();
        self.records.clear();
        for j in 0..n {
            let e = self.fetch_buf.entry(j);
            if let Err(code) = self.decode(&e) {
                qp.post_completion(e.cid, head, code);
                self.stats.error_completions.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            self.spans.push(UnitSpan {
                slba: e.slba,
                nlb: e.nlb,
            });
            self.records.push(RequestRecord {
                qid: qp.qid(),
                cid: e.cid,
                unit: self.unit,
                slba: e.slba,
                nlb: e.nlb,
                data_ptr: e.data_ptr,
                fetch_ns,
                ..Default::default()
            });
        }
        let scheduled = self.timing.schedule_batch(&self.spans, fetch_ns);
        let mut records = std::mem::take(&mut self.records);
        for (mut rec, s) in records.drain(..).zip(scheduled) {
            rec.target_ps = s.target_ps;
            rec.target_ns = s.target_ns();
            self.deliver(rec);
        }
        self.records = records;
        self.stats.fetched.fetch_add(n as u64, Ordering::Relaxed);
        n as u64
    }
}

impl Agent for Dispatcher {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self, _now: Nanos) -> Poll {
        let t0 = self.clock.now();
        let mut progressed = false;
        if !self.backlog.is_empty() {
            progressed = self.drain_backlog();
            if !self.backlog.is_empty() {
                return Poll::progressed(progressed);
            }
        }
        let nq = self.consumers.len();
        let mut fetched = 0;
        for k in 0..nq {
            fetched += self.service((self.next_qp + k) % nq);
        }
        self.next_qp = (self.next_qp + 1) % nq;
        if fetched > 0 {
            let busy = self.clock.now() - t0;
            self.stats.busy_ns.fetch_add(busy, Ordering::Relaxed);
        }
        Poll::progressed(progressed || fetched > 0)
    }
}

struct Worker {
    name: String,
    clock: Clock,
    queue: Arc<ArrayQueue<RequestRecord>>,
    ctx: Option<OffloadContext>,
    store: BackingStore,
    qps: Arc<Vec<Arc<QueuePair>>>,
    slab: Vec<RequestRecord>,
    free: Vec<u32>,
    ready: BinaryHeap<Reverse<(Nanos, u32)>>,
    max_copies: u32,
    s_timeout: Nanos,
    c_timeout: Nanos,
    shared: Arc<WorkerShared>,
    finished: Vec<RequestRecord>,
}

impl Worker {
    fn alloc(&mut self, rec: RequestRecord) -> u32 {
        match self.free.pop() {
            Some(s) => {
                self.slab[s as usize] = rec;
                s
            }
            None => {
                self.slab.push(rec);
                (self.slab.len() - 1) as u32
            }
        }
    }

    fn post(&mut self, slot: u32, code: u16) {
        let rec = &mut self.slab[slot as usize];
        let qp = &self.qps[rec.qid as usize];
        qp.post_completion(rec.cid, qp.sq_head(), code);
        rec.posted_ns = self.clock.now();
        rec.status = code;
        rec.state = RequestState::Completed;
        if code != status::SUCCESS {
            self.shared.error_completions.fetch_add(1, Ordering::Relaxed);
        }
        self.finished.push(*rec);
        self.free.push(slot);
    }

    fn copy_done(&mut self, slot: u32, now: Nanos) {
        let rec = &mut self.slab[slot as usize];
        rec.copy_done_ns = now;
        rec.state = RequestState::CopyDone;
        self.ready.push(Reverse((rec.target_ns, slot)));
    }

    fn finish_batch(&mut self, b: CompletedBatch) {
        let now = self.clock.now();
        for &tag in &b.tags {
            let slot = tag as u32;
            if b.ok() {
                self.copy_done(slot, now);
            } else {
                self.slab[slot as usize].copy_done_ns = now;
                self.post(slot, status::DATA_TRANSFER_ERROR);
            }
        }
    }

    fn issue(&mut self, rec: RequestRecord) -> bool {
        let now = self.clock.now();
        let slot = self.alloc(rec);
        let Some(ctx) = self.ctx.as_mut() else {
            self.copy_done(slot, now);
            return false;
        };
        let bb = self.store.block_bytes() as u64;
        let len = (rec.nlb as u64 + 1) * bb;
        self.slab[slot as usize].state = RequestState::CopyIssued;
        match ctx.batch_issue_async(Addr::from_ptr(rec.data_ptr), self.store.addr_of(rec.slba), len, slot as u64) {
            Ok(issued) => issued,
            Err(e) => {
                log::error!("{}: copy issue failed: {e}", self.name);
                self.post(slot, status::DATA_TRANSFER_ERROR);
                false
            }
        }
    }
}

impl Agent for Worker {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self, _now: Nanos) -> Poll {
        let mut progressed = false;
        let mut taken = 0;
        let mut issued_any = false;
        while taken < self.max_copies {
            let Some(rec) = self.queue.pop() else { break };
            taken += 1;
            issued_any |= self.issue(rec);
        }
        progressed |= taken > 0;
        let mut batches = Vec::new();
        if let Some(ctx) = self.ctx.as_mut() {
            // At least one batch leaves per iteration that took work.
            let must_issue = taken > 0 && !issued_any;
            if ctx.pending_len() > 0 && (must_issue || ctx.batch_should_issue_pending(self.s_timeout)) {
                if let Err(e) = ctx.batch_issue_pending() {
                    log::error!("{}: batch issue failed: {e}", self.name);
                }
                progressed = true;
            }
            if ctx.batch_should_wait(self.c_timeout) {
                if let Ok(b) = ctx.batch_wait_oldest() {
                    batches.push(b);
                }
            }
            batches.extend(ctx.poll_completions());
            let st = ctx.stats();
            self.shared.batches_issued.store(st.batches_issued, Ordering::Relaxed);
            self.shared.copies.store(st.copies, Ordering::Relaxed);
        }
        progressed |= !batches.is_empty();
        for b in batches {
            self.finish_batch(b);
        }
        let now = self.clock.now();
        while let Some(&Reverse((t, slot))) = self.ready.peek() {
            if t > now {
                break;
            }
            self.ready.pop();
            self.post(slot, status::SUCCESS);
        }
        if !self.finished.is_empty() {
            progressed = true;
            self.shared
                .posted
                .fetch_add(self.finished.len() as u64, Ordering::Relaxed);
            self.shared.done.lock().unwrap().append(&mut self.finished);
        }
        self.shared
            .in_progress
            .store((self.slab.len() - self.free.len()) as u64, Ordering::Relaxed);
        let mut wake = self.ready.peek().map(|r| r.0 .0);
        if let Some(ctx) = &self.ctx {
            wake = crate::exec::earliest(wake, ctx.next_deadline(self.s_timeout, self.c_timeout));
        }
        Poll::progressed(progressed).with_wake(wake)
    }
}

/// Aggregate device counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCounters {
    pub fetched: u64,
    pub fetch_transfers: u64,
    pub doorbell_writes: u64,
    pub batches_issued: u64,
    pub copies: u64,
    pub posted: u64,
    pub error_completions: u64,
    pub timing_acquisitions: u64,
    pub guard_busy_ns: u64,
    pub dispatcher_busy_ns: u64,
}

/// What `stop` hands back.
#[derive(Debug, Clone)]
pub struct DeviceReport {
    pub counters: DeviceCounters,
    pub dispatchers: Vec<DispatcherSnapshot>,
    pub records: Vec<RequestRecord>,
    pub in_flight: u64,
}

/// Handle to a running device. The agents returned by [`Device::start`]
/// must be placed in a runtime for anything to happen.
pub struct Device {
    config: DeviceConfig,
    store: BackingStore,
    qps: Arc<Vec<Arc<QueuePair>>>,
    timing: Vec<Arc<TimingModel>>,
    groups: Vec<Arc<EngineGroup>>,
    dispatchers: Vec<Arc<DispatcherStats>>,
    workers: Vec<Arc<WorkerShared>>,
    local_queues: Vec<Arc<ArrayQueue<RequestRecord>>>,
}

impl Device {
    pub fn start(
        config: &DeviceConfig,
        memory: Arc<MemoryMap>,
        clock: Clock,
    ) -> Result<(Device, Vec<Box<dyn Agent>>), DeviceError> {
        config.validate()?;
        let store = BackingStore::new(&memory, config.capacity_blocks, config.block_bytes, config.pattern_seed)?;
        let qps: Vec<Arc<QueuePair>> = (0..config.n_queue_pairs)
            .map(|q| QueuePair::create(&memory, q as u16, config.queue_depth))
            .collect::<Result<_, _>>()?;
        let qps = Arc::new(qps);

        let mut params = config.timing.params(config.block_bytes)?;
        let n_disp = config.n_dispatchers();
        let mut parts = match config.timing.scope {
            ModelScope::Global => vec![params.clone()],
            ModelScope::Local => local_model_partition(&params, n_disp),
        };
        if config.inject_min_delay_bug {
            params.inject_min_delay_bug();
            parts.iter_mut().for_each(TimingParams::inject_min_delay_bug);
        }
        let timing: Vec<Arc<TimingModel>> = parts
            .into_iter()
            .map(|p| {
                Arc::new(TimingModel::new(
                    p,
                    config.timing.update_mode,
                    clock.clone(),
                    config.timing.guard_hold_ns,
                ))
            })
            .collect();

        let engine_cfg = EngineConfig {
            groups: config.n_service_units,
            wqs_per_group: config.workers_per_unit as usize + 1,
            ..config.engine.clone()
        };
        let groups = group_configure(&engine_cfg, memory.clone(), clock.clone())?;

        let mut agents: Vec<Box<dyn Agent>> = Vec::new();
        let mut worker_queues: Vec<Vec<Arc<ArrayQueue<RequestRecord>>>> = vec![Vec::new(); n_disp as usize];
        let mut workers = Vec::new();
        let mut local_queues = Vec::new();
        let mut worker_agents: Vec<Box<dyn Agent>> = Vec::new();
        for u in 0..config.n_service_units {
            let d = (u % n_disp) as usize;
            let owned: u64 = qps
                .iter()
                .filter(|q| config.unit_of(q.qid()) as usize == d)
                .map(|q| q.depth() as u64)
                .sum();
            let cap = owned.clamp(64, 1 << 16) as usize;
            for w in 0..config.workers_per_unit {
                let queue = Arc::new(ArrayQueue::new(cap));
                let ctx = if config.backend_copy {
                    Some(OffloadContext::init(
                        groups[u as usize].clone(),
                        1 + w as usize,
                        config.copy_batch_size,
                        config.copy_num_desc,
                    )?)
                } else {
                    None
                };
                let shared = Arc::new(WorkerShared::default());
                worker_agents.push(Box::new(Worker {
                    name: format!("worker-{u}.{w}"),
                    clock: clock.clone(),
                    queue: queue.clone(),
                    ctx,
                    store: store.clone(),
                    qps: qps.clone(),
                    slab: Vec::new(),
                    free: Vec::new(),
                    ready: BinaryHeap::new(),
                    max_copies: config.max_copies_per_iteration,
                    s_timeout: config.engine.s_timeout_ns,
                    c_timeout: config.engine.c_timeout_ns,
                    shared: shared.clone(),
                    finished: Vec::new(),
                }));
                workers.push(shared);
                worker_queues[d].push(queue.clone());
                local_queues.push(queue);
            }
        }

        let mut dispatchers = Vec::new();
        for (d, queues) in worker_queues.into_iter().enumerate() {
            let consumers: Vec<SqConsumer> = qps
                .iter()
                .filter(|q| config.unit_of(q.qid()) as usize == d)
                .map(|q| q.sq_consumer().expect("fresh queue pair"))
                .collect();
            let path: Box<dyn FetchPath + Send> = match config.fetch_path {
                FetchPathKind::Engine => Box::new(SyncPort::new(groups[d].clone(), 0)?),
                FetchPathKind::Direct => Box::new(DirectFetch {
                    memory: memory.clone(),
                    clock: clock.clone(),
                    cost_ns: config.direct_fetch_cost_ns,
                }),
            };
            let stats = Arc::new(DispatcherStats::default());
            agents.push(Box::new(Dispatcher {
                name: format!("dispatcher-{d}"),
                unit: d as u16,
                clock: clock.clone(),
                memory: memory.clone(),
                consumers,
                next_qp: 0,
                fetch_buf: FetchBuffer::new(&memory, config.queue_depth),
                path,
                fetch_mode: config.fetch_mode,
                timing: timing[d % timing.len()].clone(),
                workers: queues,
                next_worker: 0,
                backlog: VecDeque::new(),
                capacity_blocks: config.capacity_blocks,
                block_bytes: config.block_bytes,
                stats: stats.clone(),
                spans: Vec::new(),
                records: Vec::new(),
            }));
            dispatchers.push(stats);
        }
        agents.extend(worker_agents);
        for g in &groups {
            agents.push(Box::new(EngineAgent::new(g.clone())));
        }

        Ok((
            Device {
                config: config.clone(),
                store,
                qps,
                timing,
                groups,
                dispatchers,
                workers,
                local_queues,
            },
            agents,
        ))
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn store(&self) -> &BackingStore {
        &self.store
    }

    pub fn queue_pairs(&self) -> &[Arc<QueuePair>] {
        &self.qps
    }

    pub fn timing_models(&self) -> &[Arc<TimingModel>] {
        &self.timing
    }

    pub fn engine_groups(&self) -> &[Arc<EngineGroup>] {
        &self.groups
    }

    /// Requests fetched or announced but not yet completed.
    pub fn in_flight(&self) -> u64 {
        let rings: u64 = self.qps.iter().map(|q| q.sq_pending() as u64).sum();
        let queued: u64 = self.local_queues.iter().map(|q| q.len() as u64).sum();
        let working: u64 = self
            .workers
            .iter()
            .map(|w| w.in_progress.load(Ordering::Relaxed))
            .sum();
        rings + queued + working
    }

    pub fn dispatcher_snapshots(&self) -> Vec<DispatcherSnapshot> {
        self.dispatchers
            .iter()
            .enumerate()
            .map(|(u, s)| DispatcherSnapshot {
                unit: u as u16,
                fetched: s.fetched.load(Ordering::Relaxed),
                fetch_transfers: s.fetch_transfers.load(Ordering::Relaxed),
                busy_ns: s.busy_ns.load(Ordering::Relaxed),
            })
            .collect()
    }

    pub fn counters(&self) -> DeviceCounters {
        let sum_d = |f: fn(&DispatcherStats) -> &AtomicU64| -> u64 {
            self.dispatchers.iter().map(|s| f(s).load(Ordering::Relaxed)).sum()
        };
        let sum_w = |f: fn(&WorkerShared) -> &AtomicU64| -> u64 {
            self.workers.iter().map(|s| f(s).load(Ordering::Relaxed)).sum()
        };
        DeviceCounters {
            fetched: sum_d(|s| &s.fetched),
            fetch_transfers: sum_d(|s| &s.fetch_transfers),
            doorbell_writes: self.qps.iter().map(|q| q.doorbell_writes()).sum(),
            batches_issued: sum_w(|s| &s.batches_issued),
            copies: sum_w(|s| &s.copies),
            posted: sum_w(|s| &s.posted),
            error_completions: sum_d(|s| &s.error_completions) + sum_w(|s| &s.error_completions),
            timing_acquisitions: self.timing.iter().map(|t| t.acquisitions()).sum(),
            guard_busy_ns: self.timing.iter().map(|t| t.guard_busy_ns()).sum(),
            dispatcher_busy_ns: sum_d(|s| &s.busy_ns),
        }
    }

    /// Collects counters and every completed record. Outstanding requests
    /// must already be drained by running the runtime; whatever is left is
    /// reported as `in_flight`.
    pub fn stop(self) -> DeviceReport {
        let mut records = Vec::new();
        for w in &self.workers {
            records.append(&mut w.done.lock().unwrap());
        }
        records.sort_by_key(|r| (r.posted_ns, r.qid, r.cid));
        DeviceReport {
            counters: self.counters(),
            dispatchers: self.dispatcher_snapshots(),
            in_flight: self.in_flight(),
            records,
        }
    }
}
