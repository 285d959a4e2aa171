//! Polling runtime for emulator and workload agents.
//!
//! Dispatchers, workers, copy engines and submitters are all state machines
//! that make bounded progress per [`Agent::poll`]. The runtime steps them
//! round-robin on one thread, or spreads them over several OS threads. With
//! a virtual clock it always runs single-threaded and jumps time forward
//! whenever a full round makes no progress, which gives deterministic runs.

use crate::clock::{Clock, Nanos};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Poll {
    pub progressed: bool,
    /// Earliest time this agent expects new work of its own (a target
    /// completion, a copy finishing, a paced submission).
    pub wake_at: Option<Nanos>,
}

impl Poll {
    pub const IDLE: Poll = Poll {
        progressed: false,
        wake_at: None,
    };

    pub fn progressed(progressed: bool) -> Self {
        Self {
            progressed,
            wake_at: None,
        }
    }

    pub fn with_wake(mut self, at: Option<Nanos>) -> Self {
        self.wake_at = earliest(self.wake_at, at);
        self
    }

    pub fn merge(self, other: Poll) -> Poll {
        Poll {
            progressed: self.progressed || other.progressed,
            wake_at: earliest(self.wake_at, other.wake_at),
        }
    }
}

pub fn earliest(a: Option<Nanos>, b: Option<Nanos>) -> Option<Nanos> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

pub trait Agent: Send {
    fn name(&self) -> &str;
    fn poll(&mut self, now: Nanos) -> Poll;
}

/// Virtual time skipped when a round is idle and nobody asked for a wakeup.
const IDLE_QUANTUM_NS: Nanos = 1_000;

pub struct Runtime {
    clock: Clock,
    threads: usize,
    agents: Vec<Box<dyn Agent>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunStats {
    pub rounds: u64,
    pub idle_rounds: u64,
}

impl Runtime {
    pub fn new(clock: Clock, threads: usize) -> Self {
        Self {
            clock,
            threads: threads.max(1),
            agents: Vec::new(),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn spawn(&mut self, agent: Box<dyn Agent>) {
        self.agents.push(agent);
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn agent_names(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.name().to_string()).collect()
    }

    /// Steps every agent until `stop(now)` holds.
    pub fn run_until(&mut self, stop: &(dyn Fn(Nanos) -> bool + Sync)) -> RunStats {
        if self.clock.is_virtual() {
            self.run_virtual(stop)
        } else if self.threads == 1 || self.agents.len() <= 1 {
            run_real(&self.clock, &mut self.agents, stop, &Default::default())
        } else {
            self.run_threaded(stop)
        }
    }

    pub fn run_for(&mut self, ns: Nanos) -> RunStats {
        let end = self.clock.now() + ns;
        self.run_until(&move |now| now >= end)
    }

    fn run_virtual(&mut self, stop: &(dyn Fn(Nanos) -> bool + Sync)) -> RunStats {
        let mut stats = RunStats::default();
        loop {
            let now = self.clock.now();
            if stop(now) {
                return stats;
            }
            stats.rounds += 1;
            let mut round = Poll::IDLE;
            for agent in self.agents.iter_mut() {
                let now = self.clock.now();
                round = round.merge(agent.poll(now));
            }
            if !round.progressed {
                stats.idle_rounds += 1;
                let now = self.clock.now();
                let next = match round.wake_at {
                    Some(t) if t > now => t,
                    _ => now + IDLE_QUANTUM_NS,
                };
                self.clock.advance_to(next);
            }
        }
    }

    fn run_threaded(&mut self, stop: &(dyn Fn(Nanos) -> bool + Sync)) -> RunStats {
        let n = self.threads.min(self.agents.len());
        let mut groups: Vec<Vec<&mut Box<dyn Agent>>> = (0..n).map(|_| Vec::new()).collect();
        for (i, agent) in self.agents.iter_mut().enumerate() {
            groups[i % n].push(agent);
        }
        let halt = std::sync::atomic::AtomicBool::new(false);
        let clock = &self.clock;
        let halt_ref = &halt;
        std::thread::scope(|s| {
            let handles: Vec<_> = groups
                .into_iter()
                .map(|mut group| {
                    s.spawn(move || run_group(clock, &mut group, stop, halt_ref))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("agent thread panicked"))
                .fold(RunStats::default(), |acc, s| RunStats {
                    rounds: acc.rounds.max(s.rounds),
                    idle_rounds: acc.idle_rounds + s.idle_rounds,
                })
        })
    }
}

fn run_real(
    clock: &Clock,
    agents: &mut [Box<dyn Agent>],
    stop: &(dyn Fn(Nanos) -> bool + Sync),
    halt: &std::sync::atomic::AtomicBool,
) -> RunStats {
    let mut refs: Vec<&mut Box<dyn Agent>> = agents.iter_mut().collect();
    run_group(clock, &mut refs, stop, halt)
}

fn run_group(
    clock: &Clock,
    agents: &mut [&mut Box<dyn Agent>],
    stop: &(dyn Fn(Nanos) -> bool + Sync),
    halt: &std::sync::atomic::AtomicBool,
) -> RunStats {
    use std::sync::atomic::Ordering;
    let mut stats = RunStats::default();
    let mut idle_streak = 0u32;
    loop {
        if halt.load(Ordering::Relaxed) {
            return stats;
        }
        if stop(clock.now()) {
            halt.store(true, Ordering::Relaxed);
            return stats;
        }
        stats.rounds += 1;
        let mut progressed = false;
        for agent in agents.iter_mut() {
            progressed |= agent.poll(clock.now()).progressed;
        }
        if progressed {
            idle_streak = 0;
        } else {
            stats.idle_rounds += 1;
            idle_streak += 1;
            if idle_streak % 256 == 0 {
                // Oversubscribed hosts need the core back eventually.
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;

    struct Ticker {
        period: Nanos,
        next: Nanos,
        ticks: Arc<AtomicU64>,
    }

    impl Agent for Ticker {
        fn name(&self) -> &str {
            "ticker"
        }
        fn poll(&mut self, now: Nanos) -> Poll {
            if now >= self.next {
                self.ticks.fetch_add(1, Ordering::Relaxed);
                self.next += self.period;
                Poll::progressed(true).with_wake(Some(self.next))
            } else {
                Poll::IDLE.with_wake(Some(self.next))
            }
        }
    }

    #[test]
    fn virtual_runtime_jumps_to_wakeups() {
        let clock = Clock::virtual_at(0);
        let ticks = Arc::new(AtomicU64::new(0));
        let mut rt = Runtime::new(clock.clone(), 4);
        rt.spawn(Box::new(Ticker {
            period: 10_000,
            next: 0,
            ticks: ticks.clone(),
        }));
        let stats = rt.run_for(1_000_000);
        assert_eq!(ticks.load(Ordering::Relaxed), 100);
        // One busy and one idle round per tick, no quantum stepping.
        assert!(stats.rounds < 300, "{stats:?}");
    }

    #[test]
    fn threaded_runtime_stops_all_groups() {
        let clock = Clock::real();
        let ticks = Arc::new(AtomicU64::new(0));
        let mut rt = Runtime::new(clock, 3);
        for _ in 0..5 {
            rt.spawn(Box::new(Ticker {
                period: 1_000,
                next: 0,
                ticks: ticks.clone(),
            }));
        }
        let t = ticks.clone();
        rt.run_until(&move |_| t.load(Ordering::Relaxed) >= 50);
        assert!(ticks.load(Ordering::Relaxed) >= 50);
    }
}
