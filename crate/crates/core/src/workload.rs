//! Load generators: queue-parallel random reads, warp-coalesced reads and a
//! dependent-read beam search, all driving the device through its rings.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Nanos};
use crate::device::Device;
use crate::exec::{Agent, Poll};
use crate::memory::{MemoryMap, Region};
use crate::queue::{status, CompletionEntry, HostPort, QueuePair, SubmissionEntry};
use crate::store::{mix, pattern_word, verify_read};

pub const WARP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    #[default]
    QueueParallel,
    WarpCoalesced,
    BeamSearch,
}

impl WorkloadKind {
    pub fn label(&self) -> &'static str {
        match self {
            WorkloadKind::QueueParallel => "fio",
            WorkloadKind::WarpCoalesced => "warp",
            WorkloadKind::BeamSearch => "beam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LbaDistribution {
    #[default]
    Uniform,
    Zipf { theta: f64 },
    /// Uniform addresses, but only queue pairs owned by the first
    /// `active_units` service units receive requests.
    SkewToSubset { active_units: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamSpec {
    pub batch: usize,
    pub width: usize,
    pub degree: usize,
    pub n_nodes: u64,
    /// (width, iterations) pairs. Placeholder values: the per-width counts
    /// needed for a recall target are not published.
    pub iterations: Vec<(usize, u32)>,
    /// Stop after this many batches (0: run for the duration).
    pub batches: u64,
}

impl Default for BeamSpec {
    fn default() -> Self {
        Self {
            batch: 256,
            width: 4,
            degree: 16,
            n_nodes: 1 << 16,
            iterations: vec![(1, 32), (2, 18), (4, 10), (8, 6)],
            batches: 0,
        }
    }
}

impl BeamSpec {
    pub fn iterations_for(&self, width: usize) -> u32 {
        self.iterations
            .iter()
            .find(|(w, _)| *w == width)
            .map(|&(_, n)| n)
            .unwrap_or_else(|| {
                // Nearest tabulated width at or below.
                self.iterations
                    .iter()
                    .filter(|(w, _)| *w <= width)
                    .max_by_key(|(w, _)| *w)
                    .or(self.iterations.first())
                    .map(|&(_, n)| n)
                    .unwrap_or(10)
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Queue-parallel: ignored (one submitter per queue pair).
    /// Warp: logical threads, grouped into warps of 32.
    pub n_submitters: usize,
    /// Outstanding requests per queue pair.
    pub qdepth: usize,
    pub io_bytes: u32,
    pub n_queue_pairs: u32,
    pub lba_distribution: LbaDistribution,
    pub duration_s: f64,
    /// Per-submitter cap on requests (0: unlimited).
    pub ops_per_submitter: u64,
    /// Open-loop aggregate offered load (queue-parallel only).
    pub rate_iops: Option<f64>,
    pub verify: bool,
    pub seed: u64,
    /// Completions consumed per host poll (0: drain the CQ).
    pub cqe_poll_max: usize,
    pub beam: BeamSpec,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::WarpCoalesced,
            n_submitters: 8192,
            qdepth: 1024,
            io_bytes: 512,
            n_queue_pairs: 64,
            lba_distribution: LbaDistribution::Uniform,
            duration_s: 10.0,
            ops_per_submitter: 0,
            rate_iops: None,
            verify: true,
            seed: 1,
            cqe_poll_max: 0,
            beam: BeamSpec::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
}

/// One completion as the submitter saw it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct HostSample {
    pub qid: u16,
    pub cid: u16,
    pub submit_ns: Nanos,
    pub observed_ns: Nanos,
    pub status: u16,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStats {
    pub submitted: u64,
    pub completed: u64,
    pub error_status: u64,
    pub verify_failures: u64,
    /// Completions for a CID that had nothing outstanding.
    pub cid_violations: u64,
}

impl HostStats {
    fn add(&mut self, o: &HostStats) {
        self.submitted += o.submitted;
        self.completed += o.completed;
        self.error_status += o.error_status;
        self.verify_failures += o.verify_failures;
        self.cid_violations += o.cid_violations;
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Slot {
    busy: bool,
    submit_ns: Nanos,
    slba: u64,
    tag: u64,
}

/// Host side of one queue pair: CID allocation, per-CID buffers and
/// completion checking.
pub struct HostQueue {
    port: HostPort,
    clock: Clock,
    buf: Arc<Region>,
    io_bytes: u32,
    block_bytes: u32,
    nlb: u16,
    seed: u64,
    verify: bool,
    slots: Vec<Slot>,
    free: Vec<u16>,
    poll_max: usize,
    stats: HostStats,
    samples: Vec<HostSample>,
    cqes: Vec<CompletionEntry>,
    entries: Vec<SubmissionEntry>,
    data: Vec<u8>,
}

impl HostQueue {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        qp: &Arc<QueuePair>,
        memory: &MemoryMap,
        clock: Clock,
        max_outstanding: usize,
        io_bytes: u32,
        block_bytes: u32,
        seed: u64,
        verify: bool,
    ) -> Option<Self> {
        let port = qp.host_port()?;
        let cap = max_outstanding.clamp(1, qp.depth() as usize - 1);
        Some(Self {
            port,
            clock,
            buf: memory.register(cap * io_bytes as usize),
            io_bytes,
            block_bytes,
            nlb: (io_bytes / block_bytes - 1) as u16,
            seed,
            verify,
            slots: vec![Slot::default(); cap],
            free: (0..cap as u16).rev().collect(),
            poll_max: usize::MAX,
            stats: HostStats::default(),
            samples: Vec::new(),
            cqes: Vec::new(),
            entries: Vec::new(),
            data: vec![0; io_bytes as usize],
        })
    }

    pub fn qid(&self) -> u16 {
        self.port.qid()
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn outstanding(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    /// Requests that can be submitted right now.
    pub fn free_slots(&self) -> usize {
        self.free.len().min(self.port.sq_free() as usize)
    }

    pub fn stats(&self) -> HostStats {
        self.stats
    }

    /// Caps completions consumed per [`poll`](Self::poll) (0: no cap).
    pub fn set_poll_max(&mut self, n: usize) {
        self.poll_max = if n == 0 { usize::MAX } else { n };
    }

    pub fn io_blocks(&self) -> u64 {
        self.nlb as u64 + 1
    }

    /// Submits reads of `(slba, tag)` under one doorbell write. The caller
    /// must not exceed [`free_slots`](Self::free_slots).
    pub fn submit(&mut self, reads: &[(u64, u64)]) {
        if reads.is_empty() {
            return;
        }
        assert!(reads.len() <= self.free_slots(), "submit beyond free slots");
        self.entries.clear();
        let now = self.clock.now();
        for &(slba, tag) in reads {
            let cid = self.free.pop().unwrap();
            self.slots[cid as usize] = Slot {
                busy: true,
                submit_ns: now,
                slba,
                tag,
            };
            let ptr = self.buf.addr(cid as u64 * self.io_bytes as u64).to_ptr();
            self.entries.push(SubmissionEntry::read(cid, slba, self.nlb, ptr));
        }
        self.port
            .try_submit(&self.entries)
            .expect("free slots were checked");
        self.stats.submitted += reads.len() as u64;
    }

    /// Consumes completions. `on_done(tag, status, data)` gets the read
    /// buffer only when `want_data` is set.
    pub fn poll(&mut self, max: usize, want_data: bool, mut on_done: impl FnMut(u64, u16, &[u8])) -> usize {
        self.cqes.clear();
        let n = self.port.consume_into(max.min(self.poll_max), &mut self.cqes);
        if n == 0 {
            return 0;
        }
        let now = self.clock.now();
        for i in 0..n {
            let cqe = self.cqes[i];
            let cid = cqe.cid as usize;
            let Some(slot) = self.slots.get(cid).copied().filter(|s| s.busy) else {
                self.stats.cid_violations += 1;
                continue;
            };
            let code = cqe.status_code();
            let read_data = code == status::SUCCESS && (self.verify || want_data);
            if read_data {
                self.buf
                    .read(cid as u64 * self.io_bytes as u64, &mut self.data)
                    .expect("slot buffer in range");
                if self.verify && verify_read(&self.data, slot.slba, self.nlb, self.seed, self.block_bytes).is_err() {
                    self.stats.verify_failures += 1;
                }
            }
            if code != status::SUCCESS {
                self.stats.error_status += 1;
            }
            self.stats.completed += 1;
            self.samples.push(HostSample {
                qid: self.qid(),
                cid: cid as u16,
                submit_ns: slot.submit_ns,
                observed_ns: now,
                status: code,
            });
            self.slots[cid].busy = false;
            self.free.push(cid as u16);
            on_done(slot.tag, code, if read_data { &self.data } else { &[] });
        }
        n
    }
}

/// Results shared by all agents of one workload, merged at the end.
#[derive(Debug, Default)]
struct Shared {
    outstanding: AtomicU64,
    /// Agents that will not submit again.
    retired: AtomicU64,
    queries: AtomicU64,
    first_query_ns: AtomicU64,
    last_query_ns: AtomicU64,
    log: Mutex<SharedLog>,
}

#[derive(Debug, Default)]
struct SharedLog {
    samples: Vec<HostSample>,
    stats: HostStats,
    digest: u64,
}

impl Shared {
    fn flush(&self, hq: &mut HostQueue, prev: &mut HostStats) {
        let st = hq.stats;
        let delta = HostStats {
            submitted: st.submitted - prev.submitted,
            completed: st.completed - prev.completed,
            error_status: st.error_status - prev.error_status,
            verify_failures: st.verify_failures - prev.verify_failures,
            cid_violations: st.cid_violations - prev.cid_violations,
        };
        if delta == HostStats::default() && hq.samples.is_empty() {
            return;
        }
        *prev = st;
        let mut log = self.log.lock().unwrap();
        log.stats.add(&delta);
        log.samples.append(&mut hq.samples);
    }
}

#[derive(Debug, Clone, Default)]
pub struct WorkloadResult {
    pub samples: Vec<HostSample>,
    pub stats: HostStats,
    pub queries: u64,
    /// First batch start to last batch end (beam search).
    pub query_span_ns: Nanos,
    /// Order-sensitive hash of every beam-search visit.
    pub visit_digest: u64,
}

impl WorkloadResult {
    pub fn qps(&self) -> f64 {
        if self.query_span_ns == 0 {
            return 0.0;
        }
        self.queries as f64 / (self.query_span_ns as f64 * 1e-9)
    }
}

pub struct Workload {
    spec: WorkloadSpec,
    shared: Arc<Shared>,
    end_ns: Nanos,
    n_agents: u64,
}

impl Workload {
    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn end_ns(&self) -> Nanos {
        self.end_ns
    }

    pub fn outstanding(&self) -> u64 {
        self.shared.outstanding.load(Ordering::Acquire)
    }

    /// Every agent stopped submitting and nothing is outstanding.
    pub fn done(&self) -> bool {
        self.shared.retired.load(Ordering::Acquire) == self.n_agents && self.outstanding() == 0
    }

    pub fn finish(self) -> WorkloadResult {
        let log = std::mem::take(&mut *self.shared.log.lock().unwrap());
        let first = self.shared.first_query_ns.load(Ordering::Relaxed);
        let last = self.shared.last_query_ns.load(Ordering::Relaxed);
        WorkloadResult {
            samples: log.samples,
            stats: log.stats,
            queries: self.shared.queries.load(Ordering::Relaxed),
            query_span_ns: last.saturating_sub(first),
            visit_digest: log.digest,
        }
    }
}

struct LbaGen {
    rng: ChaCha8Rng,
    slots: u64,
    io_blocks: u64,
    zipf: Option<Zipf<f64>>,
}

impl LbaGen {
    fn new(dist: LbaDistribution, capacity: u64, io_blocks: u64, seed: u64) -> Self {
        let slots = (capacity / io_blocks).max(1);
        let zipf = match dist {
            LbaDistribution::Zipf { theta } => Some(Zipf::new(slots as f64, theta).expect("validated theta")),
            _ => None,
        };
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            slots,
            io_blocks,
            zipf,
        }
    }

    fn next(&mut self) -> u64 {
        let slot = match &self.zipf {
            // Scatter ranks so hot blocks are not adjacent.
            Some(z) => mix(z.sample(&mut self.rng) as u64) % self.slots,
            None => self.rng.random_range(0..self.slots),
        };
        slot * self.io_blocks
    }
}

impl WorkloadSpec {
    pub fn validate(&self, block_bytes: u32) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.to_string()));
        if self.io_bytes == 0 || self.io_bytes % block_bytes != 0 {
            return bad("io_bytes must be a positive multiple of block_bytes");
        }
        if self.io_bytes / block_bytes > 1 << 16 {
            return bad("io_bytes exceeds the maximum transfer");
        }
        if self.n_submitters == 0 || self.qdepth == 0 || self.n_queue_pairs == 0 {
            return bad("n_submitters, qdepth and n_queue_pairs must be at least 1");
        }
        if let LbaDistribution::Zipf { theta } = self.lba_distribution {
            if !(theta > 0.0) {
                return bad("zipf theta must be positive");
            }
        }
        if let LbaDistribution::SkewToSubset { active_units } = self.lba_distribution {
            if active_units == 0 {
                return bad("skew-to-subset needs at least one active unit");
            }
        }
        if self.rate_iops.is_some_and(|r| !(r > 0.0)) {
            return bad("rate_iops must be positive");
        }
        if self.kind == WorkloadKind::BeamSearch {
            let b = &self.beam;
            if b.batch == 0 || b.width == 0 || b.degree == 0 || b.n_nodes == 0 {
                return bad("beam batch, width, degree and n_nodes must be at least 1");
            }
            if b.degree > (block_bytes / 8) as usize {
                return bad("beam degree exceeds the words in one block");
            }
            if b.width as u64 > b.n_nodes {
                return bad("beam width exceeds n_nodes");
            }
        }
        Ok(())
    }

    /// Builds the workload's agents against a started device.
    pub fn build(
        &self,
        device: &Device,
        memory: &Arc<MemoryMap>,
        clock: &Clock,
    ) -> Result<(Workload, Vec<Box<dyn Agent>>), WorkloadError> {
        let cfg = device.config();
        self.validate(cfg.block_bytes)?;
        let start = clock.now();
        let end_ns = start + (self.duration_s * 1e9) as Nanos;
        let used = (self.n_queue_pairs as usize).min(device.queue_pairs().len());
        let qps: Vec<Arc<QueuePair>> = device.queue_pairs()[..used]
            .iter()
            .filter(|q| match self.lba_distribution {
                LbaDistribution::SkewToSubset { active_units } => (cfg.unit_of(q.qid()) as u32) < active_units,
                _ => true,
            })
            .cloned()
            .collect();
        if qps.is_empty() {
            return Err(WorkloadError::Invalid("no queue pairs selected".into()));
        }
        let shared = Arc::new(Shared::default());
        let io_blocks = (self.io_bytes / cfg.block_bytes) as u64;
        if self.kind == WorkloadKind::BeamSearch && self.beam.n_nodes > cfg.capacity_blocks {
            return Err(WorkloadError::Invalid("graph does not fit in the device".into()));
        }
        let host = |qp: &Arc<QueuePair>, cap: usize| {
            HostQueue::new(
                qp,
                memory,
                clock.clone(),
                cap,
                self.io_bytes,
                cfg.block_bytes,
                cfg.pattern_seed,
                self.verify,
            )
            .map(|mut hq| {
                hq.set_poll_max(self.cqe_poll_max);
                hq
            })
            .ok_or_else(|| WorkloadError::Invalid(format!("queue pair {} already has a host", qp.qid())))
        };
        let mut agents: Vec<Box<dyn Agent>> = Vec::new();
        match self.kind {
            WorkloadKind::QueueParallel => {
                let n = qps.len();
                let pacing = self.rate_iops.map(|r| (1e9 * n as f64 / r).max(1.0));
                for (i, qp) in qps.iter().enumerate() {
                    agents.push(Box::new(QueueParallel {
                        name: format!("fio-{}", qp.qid()),
                        hq: host(qp, self.qdepth)?,
                        lba: LbaGen::new(self.lba_distribution, cfg.capacity_blocks, io_blocks, mix(self.seed ^ i as u64)),
                        end_ns,
                        budget: if self.ops_per_submitter == 0 { u64::MAX } else { self.ops_per_submitter },
                        interval: pacing,
                        next_ns: pacing.map(|p| start as f64 + p * i as f64 / n as f64).unwrap_or(0.0),
                        shared: shared.clone(),
                        prev: HostStats::default(),
                        reads: Vec::new(),
                        retired: false,
                    }));
                }
            }
            WorkloadKind::WarpCoalesced => {
                let n_warps = self.n_submitters.div_ceil(WARP);
                for (i, qp) in qps.iter().enumerate() {
                    let warps = (i..n_warps).step_by(qps.len()).count();
                    if warps == 0 {
                        continue;
                    }
                    let cap = (warps * WARP).min(self.qdepth);
                    agents.push(Box::new(WarpAgent {
                        name: format!("warp-{}", qp.qid()),
                        hq: host(qp, cap)?,
                        lba: LbaGen::new(self.lba_distribution, cfg.capacity_blocks, io_blocks, mix(self.seed ^ i as u64)),
                        end_ns,
                        budget: if self.ops_per_submitter == 0 { u64::MAX } else { self.ops_per_submitter },
                        pending: vec![0; warps],
                        next_warp: 0,
                        shared: shared.clone(),
                        prev: HostStats::default(),
                        reads: Vec::with_capacity(WARP),
                        retired: false,
                    }));
                }
            }
            WorkloadKind::BeamSearch => {
                let b = &self.beam;
                let per_qp = (b.batch * b.width).div_ceil(qps.len()).max(1);
                let hqs = qps
                    .iter()
                    .map(|qp| host(qp, per_qp.min(self.qdepth)))
                    .collect::<Result<Vec<_>, _>>()?;
                agents.push(Box::new(BeamAgent::new(
                    self,
                    hqs,
                    cfg.pattern_seed,
                    end_ns,
                    shared.clone(),
                )));
            }
        }
        Ok((
            Workload {
                spec: self.clone(),
                shared,
                end_ns,
                n_agents: agents.len() as u64,
            },
            agents,
        ))
    }
}

struct QueueParallel {
    name: String,
    hq: HostQueue,
    lba: LbaGen,
    end_ns: Nanos,
    budget: u64,
    /// Open-loop submission interval for this submitter.
    interval: Option<f64>,
    next_ns: f64,
    shared: Arc<Shared>,
    prev: HostStats,
    reads: Vec<(u64, u64)>,
    retired: bool,
}

impl Agent for QueueParallel {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self, now: Nanos) -> Poll {
        let done = self.hq.poll(usize::MAX, false, |_, _, _| {});
        let mut submitted = 0;
        if now < self.end_ns {
            while self.budget > 0 && self.hq.free_slots() > 0 {
                if let Some(p) = self.interval {
                    if self.next_ns > self.hq.clock.now() as f64 {
                        break;
                    }
                    self.next_ns += p;
                }
                let slba = self.lba.next();
                self.reads.clear();
                self.reads.push((slba, 0));
                self.hq.submit(&self.reads);
                self.budget -= 1;
                submitted += 1;
            }
        }
        if now >= self.end_ns || self.budget == 0 {
            retire(&self.shared, &mut self.retired);
        }
        track(&self.shared, submitted, done);
        self.shared.flush(&mut self.hq, &mut self.prev);
        let wake = self
            .interval
            .filter(|_| now < self.end_ns && self.budget > 0)
            .map(|_| self.next_ns.ceil() as Nanos);
        Poll::progressed(done + submitted > 0).with_wake(wake)
    }
}

fn retire(shared: &Shared, retired: &mut bool) {
    if !*retired {
        *retired = true;
        shared.retired.fetch_add(1, Ordering::AcqRel);
    }
}

fn track(shared: &Shared, submitted: usize, done: usize) {
    if submitted > 0 {
        shared.outstanding.fetch_add(submitted as u64, Ordering::AcqRel);
    }
    if done > 0 {
        shared.outstanding.fetch_sub(done as u64, Ordering::AcqRel);
    }
}

/// All warps mapped to one queue pair. A warp issues its 32 reads under a
/// single doorbell and reissues only after all 32 completed.
struct WarpAgent {
    name: String,
    hq: HostQueue,
    lba: LbaGen,
    end_ns: Nanos,
    budget: u64,
    /// Outstanding reads per warp.
    pending: Vec<u32>,
    next_warp: usize,
    shared: Arc<Shared>,
    prev: HostStats,
    reads: Vec<(u64, u64)>,
    retired: bool,
}

impl Agent for WarpAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self, now: Nanos) -> Poll {
        let pending = &mut self.pending;
        let done = self.hq.poll(usize::MAX, false, |tag, _, _| pending[tag as usize] -= 1);
        let mut submitted = 0;
        if now < self.end_ns {
            let n = self.pending.len();
            for k in 0..n {
                if self.budget < WARP as u64 || self.hq.free_slots() < WARP {
                    break;
                }
                let w = (self.next_warp + k) % n;
                if self.pending[w] != 0 {
                    continue;
                }
                self.reads.clear();
                for _ in 0..WARP {
                    self.reads.push((self.lba.next(), w as u64));
                }
                self.hq.submit(&self.reads);
                self.pending[w] = WARP as u32;
                self.budget -= WARP as u64;
                submitted += WARP;
            }
            self.next_warp = (self.next_warp + 1) % n;
        }
        if now >= self.end_ns || self.budget < WARP as u64 {
            retire(&self.shared, &mut self.retired);
        }
        track(&self.shared, submitted, done);
        self.shared.flush(&mut self.hq, &mut self.prev);
        Poll::progressed(done + submitted > 0)
    }
}

/// Synthetic graph: node `i` lives in block `i`; its neighbors are the first
/// `degree` words of that block reduced mod `n_nodes`, so a node's
/// neighbors are only known after its block has been read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphSpec {
    pub n_nodes: u64,
    pub degree: usize,
    pub seed: u64,
}

impl GraphSpec {
    /// Neighbors straight from the pattern oracle.
    pub fn neighbors(&self, node: u64) -> Vec<u64> {
        (0..self.degree as u64)
            .map(|j| pattern_word(self.seed, node, j) % self.n_nodes)
            .collect()
    }

    /// Neighbors decoded from a block that was read through the device.
    pub fn neighbors_from_block(&self, block: &[u8]) -> Vec<u64> {
        block
            .chunks_exact(8)
            .take(self.degree)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) % self.n_nodes)
            .collect()
    }

    /// Deterministic pseudo-distance between a query and a node.
    pub fn score(&self, query: u64, node: u64) -> u64 {
        mix(mix(self.seed ^ query.wrapping_mul(0xA24B_AED4_963E_E407)) ^ node)
    }

    pub fn start_node(&self, query: u64, k: u64) -> u64 {
        mix(self.seed.rotate_left(17) ^ mix(query) ^ k) % self.n_nodes
    }
}

struct Query {
    id: u64,
    frontier: Vec<u64>,
    visited: HashSet<u64>,
    candidates: Vec<u64>,
}

struct BeamAgent {
    hqs: Vec<HostQueue>,
    prev: Vec<HostStats>,
    graph: GraphSpec,
    batch: usize,
    width: usize,
    iterations: u32,
    batches_left: u64,
    end_ns: Nanos,
    shared: Arc<Shared>,
    queries: Vec<Query>,
    next_query: u64,
    iter: u32,
    /// Reads not yet submitted this iteration: (node, query index).
    to_submit: Vec<(u64, usize)>,
    awaiting: usize,
    next_qp: usize,
    batch_started: bool,
    digest: u64,
    reads: Vec<(u64, u64)>,
    retired: bool,
}

impl BeamAgent {
    fn new(spec: &WorkloadSpec, hqs: Vec<HostQueue>, seed: u64, end_ns: Nanos, shared: Arc<Shared>) -> Self {
        let b = &spec.beam;
        let n = hqs.len();
        Self {
            hqs,
            prev: vec![HostStats::default(); n],
            graph: GraphSpec {
                n_nodes: b.n_nodes,
                degree: b.degree,
                seed,
            },
            batch: b.batch,
            width: b.width,
            iterations: b.iterations_for(b.width).max(1),
            batches_left: if b.batches == 0 { u64::MAX } else { b.batches },
            end_ns,
            shared,
            queries: Vec::new(),
            next_query: mix(spec.seed),
            iter: 0,
            to_submit: Vec::new(),
            awaiting: 0,
            next_qp: 0,
            batch_started: false,
            digest: 0,
            reads: Vec::new(),
            retired: false,
        }
    }

    fn start_batch(&mut self, now: Nanos) {
        self.queries.clear();
        for _ in 0..self.batch {
            let id = self.next_query;
            self.next_query = self.next_query.wrapping_add(1);
            let mut frontier = Vec::with_capacity(self.width);
            let mut k = 0;
            while frontier.len() < self.width {
                let n = self.graph.start_node(id, k);
                if !frontier.contains(&n) {
                    frontier.push(n);
                }
                k += 1;
            }
            self.queries.push(Query {
                id,
                visited: frontier.iter().copied().collect(),
                frontier,
                candidates: Vec::new(),
            });
        }
        if !self.batch_started {
            self.shared.first_query_ns.store(now, Ordering::Relaxed);
            self.batch_started = true;
        }
        self.iter = 0;
        self.queue_iteration();
    }

    fn queue_iteration(&mut self) {
        self.to_submit.clear();
        for (qi, q) in self.queries.iter().enumerate() {
            for &n in &q.frontier {
                self.to_submit.push((n, qi));
            }
        }
        self.awaiting = self.to_submit.len();
    }

    /// Picks the next frontier of every query from its candidates.
    fn advance(&mut self) {
        let g = self.graph;
        for q in &mut self.queries {
            q.candidates.sort_unstable();
            q.candidates.dedup();
            q.candidates.retain(|n| !q.visited.contains(n));
            q.candidates.sort_by_key(|&n| (g.score(q.id, n), n));
            q.candidates.truncate(self.width);
            let mut k = 1 << 20;
            while q.candidates.len() < self.width {
                let n = g.start_node(q.id, k);
                k += 1;
                if !q.visited.contains(&n) && !q.candidates.contains(&n) {
                    q.candidates.push(n);
                }
            }
            q.frontier = std::mem::take(&mut q.candidates);
            for &n in &q.frontier {
                q.visited.insert(n);
                self.digest = mix(self.digest ^ n ^ q.id.rotate_left(32));
            }
        }
    }

    fn submit_pending(&mut self) -> usize {
        let mut total = 0;
        let n = self.hqs.len();
        for k in 0..n {
            if self.to_submit.is_empty() {
                break;
            }
            let i = (self.next_qp + k) % n;
            let take = self.hqs[i].free_slots().min(self.to_submit.len()).min(self.batch * self.width / n + 1);
            if take == 0 {
                continue;
            }
            self.reads.clear();
            for (node, qi) in self.to_submit.drain(self.to_submit.len() - take..) {
                self.reads.push((node, qi as u64));
            }
            self.hqs[i].submit(&self.reads);
            total += take;
        }
        self.next_qp = (self.next_qp + 1) % n;
        total
    }
}

impl Agent for BeamAgent {
    fn name(&self) -> &str {
        "beam"
    }

    fn poll(&mut self, now: Nanos) -> Poll {
        let mut done = 0;
        let g = self.graph;
        for (i, hq) in self.hqs.iter_mut().enumerate() {
            let queries = &mut self.queries;
            done += hq.poll(usize::MAX, true, |tag, code, data| {
                if code == status::SUCCESS {
                    queries[tag as usize].candidates.extend(g.neighbors_from_block(data));
                }
            });
            self.shared.flush(hq, &mut self.prev[i]);
        }
        self.awaiting -= done;
        let mut progressed = done > 0;
        if self.awaiting == 0 && self.to_submit.is_empty() {
            if !self.queries.is_empty() {
                self.iter += 1;
                if self.iter >= self.iterations {
                    self.shared.queries.fetch_add(self.queries.len() as u64, Ordering::Relaxed);
                    self.shared.last_query_ns.store(self.hqs[0].clock.now(), Ordering::Relaxed);
                    self.queries.clear();
                    self.batches_left -= 1;
                    self.shared.log.lock().unwrap().digest = self.digest;
                } else {
                    self.advance();
                    self.queue_iteration();
                }
                progressed = true;
            }
            if self.queries.is_empty() && self.batches_left > 0 && now < self.end_ns {
                self.start_batch(now);
                progressed = true;
            }
        }
        let submitted = self.submit_pending();
        if self.queries.is_empty() && (self.batches_left == 0 || now >= self.end_ns) {
            retire(&self.shared, &mut self.retired);
        }
        track(&self.shared, submitted, done);
        Poll::progressed(progressed || submitted > 0)
    }
}
