//! Deterministic simulated message-passing cluster with bit-level
//! communication accounting.
//!
//! A run executes one program per PE on its own thread. PEs interact
//! only through [`Comm`]: point-to-point FIFO messages plus tree-based
//! collectives built on them, so every collective's cost emerges from
//! the per-message ledger. Programs are pure message-passing state
//! machines, which makes outputs and ledgers bit-identical across runs
//! regardless of thread scheduling.

mod bits;

pub use bits::{BitReader, BitString, BitWriter};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::panic::panic_any;
use thiserror::Error;

/// Cluster shape and message cost model: sending an `m`-bit message
/// costs `alpha + beta * m` time units on both endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub pes: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Round message sizes up to whole bytes in the ledger.
    pub byte_granularity: bool,
}

impl ClusterConfig {
    pub fn new(pes: usize) -> Self {
        ClusterConfig {
            pes,
            alpha: 1.0,
            beta: 1.0,
            byte_granularity: false,
        }
    }

    pub fn with_costs(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_byte_granularity(mut self, on: bool) -> Self {
        self.byte_granularity = on;
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.pes == 0 {
            return Err(SimError::NoPes);
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(SimError::BadCosts {
                alpha: self.alpha,
                beta: self.beta,
            });
        }
        Ok(())
    }
}

/// Per-PE communication counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeCost {
    pub sent_bits: u64,
    pub recv_bits: u64,
    pub sent_msgs: u64,
    pub recv_msgs: u64,
    pub time: f64,
}

/// Full cost accounting of one run. `bottleneck_volume` is the maximum
/// over PEs of max(bits sent, bits received); `rounds` is the maximum
/// per-PE round count, where collectives charge their schedule depth
/// and each raw send or receive counts as one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub pe: Vec<PeCost>,
    pub bottleneck_volume: u64,
    pub rounds: u64,
}

impl CostLedger {
    fn assemble(costs: Vec<PeCost>, rounds: u64) -> Self {
        let bottleneck_volume = costs
            .iter()
            .map(|c| c.sent_bits.max(c.recv_bits))
            .max()
            .unwrap_or(0);
        CostLedger {
            pe: costs,
            bottleneck_volume,
            rounds,
        }
    }

    pub fn total_sent_bits(&self) -> u64 {
        self.pe.iter().map(|c| c.sent_bits).sum()
    }

    pub fn total_recv_bits(&self) -> u64 {
        self.pe.iter().map(|c| c.recv_bits).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ledger serializes")
    }
}

/// A PE that was blocked on a receive when deadlock was detected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedPe {
    pub pe: usize,
    pub awaiting: usize,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cluster needs at least one PE")]
    NoPes,
    #[error("invalid cost parameters alpha={alpha} beta={beta}")]
    BadCosts { alpha: f64, beta: f64 },
    #[error("{got} input slices for {pes} PEs")]
    InputCount { got: usize, pes: usize },
    #[error("deadlock: every live PE is blocked on a receive: {blocked:?}")]
    Deadlock { blocked: Vec<BlockedPe> },
    #[error("collective contract violation at PE {pe}: {detail}")]
    Contract { pe: usize, detail: String },
}

struct DeadlockNotice;

struct ContractNotice {
    pe: usize,
    detail: String,
}

struct Queue {
    q: Mutex<VecDeque<BitString>>,
    cv: Condvar,
}

struct RunState {
    alive: usize,
    blocked: usize,
    poisoned: bool,
    waiting: Vec<Option<usize>>,
    report: Vec<BlockedPe>,
}

struct Shared {
    p: usize,
    queues: Vec<Queue>,
    state: Mutex<RunState>,
}

impl Shared {
    fn new(p: usize) -> Self {
        Shared {
            p,
            queues: (0..p * p)
                .map(|_| Queue {
                    q: Mutex::new(VecDeque::new()),
                    cv: Condvar::new(),
                })
                .collect(),
            state: Mutex::new(RunState {
                alive: p,
                blocked: 0,
                poisoned: false,
                waiting: vec![None; p],
                report: Vec::new(),
            }),
        }
    }

    fn poison(state: &mut RunState) {
        state.poisoned = true;
        state.report = state
            .waiting
            .iter()
            .enumerate()
            .filter_map(|(pe, w)| w.map(|awaiting| BlockedPe { pe, awaiting }))
            .collect();
    }

    /// Wakes every receiver. Locking each queue first guarantees a
    /// receiver between its poison check and its wait cannot miss the
    /// notification.
    fn wake_all(&self) {
        for q in &self.queues {
            let _guard = q.q.lock();
            q.cv.notify_all();
        }
    }
}

struct AliveGuard<'a> {
    shared: &'a Shared,
}

impl Drop for AliveGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.shared.state.lock();
        st.alive -= 1;
        if !st.poisoned && st.alive > 0 && st.blocked == st.alive {
            Shared::poison(&mut st);
            drop(st);
            self.shared.wake_all();
        }
    }
}

/// Per-PE communicator handed to the program.
pub struct Comm<'a> {
    pe: usize,
    p: usize,
    shared: &'a Shared,
    alpha: f64,
    beta: f64,
    byte_granularity: bool,
    cost: PeCost,
    rounds: u64,
}

impl<'a> Comm<'a> {
    fn new(pe: usize, shared: &'a Shared, config: &ClusterConfig) -> Self {
        Comm {
            pe,
            p: shared.p,
            shared,
            alpha: config.alpha,
            beta: config.beta,
            byte_granularity: config.byte_granularity,
            cost: PeCost::default(),
            rounds: 0,
        }
    }

    pub fn pe(&self) -> usize {
        self.pe
    }

    pub fn pes(&self) -> usize {
        self.p
    }

    fn charged_bits(&self, bits: u64) -> u64 {
        if self.byte_granularity {
            bits.div_ceil(8) * 8
        } else {
            bits
        }
    }

    fn send_raw(&mut self, to: usize, msg: BitString) {
        assert!(to < self.p && to != self.pe, "invalid destination {to}");
        let bits = self.charged_bits(msg.bit_len());
        self.cost.sent_bits += bits;
        self.cost.sent_msgs += 1;
        self.cost.time += self.alpha + self.beta * bits as f64;
        let q = &self.shared.queues[self.pe * self.p + to];
        q.q.lock().push_back(msg);
        q.cv.notify_all();
        // Delivery un-blocks the destination immediately; waiting for
        // it to reschedule would let a transiently idle cluster look
        // deadlocked.
        let mut st = self.shared.state.lock();
        if st.waiting[to] == Some(self.pe) {
            st.waiting[to] = None;
            st.blocked -= 1;
        }
    }

    fn recv_raw(&mut self, from: usize) -> BitString {
        assert!(from < self.p && from != self.pe, "invalid source {from}");
        let q = &self.shared.queues[from * self.p + self.pe];
        let mut guard = q.q.lock();
        loop {
            if let Some(msg) = guard.pop_front() {
                drop(guard);
                let mut st = self.shared.state.lock();
                if st.waiting[self.pe].take().is_some() {
                    st.blocked -= 1;
                }
                drop(st);
                let bits = self.charged_bits(msg.bit_len());
                self.cost.recv_bits += bits;
                self.cost.recv_msgs += 1;
                self.cost.time += self.alpha + self.beta * bits as f64;
                return msg;
            }
            // Queue mutex held since the emptiness check, so a send
            // cannot slip between marking ourselves blocked and the
            // wait below.
            {
                let mut st = self.shared.state.lock();
                if st.poisoned {
                    panic_any(DeadlockNotice);
                }
                if st.waiting[self.pe].is_none() {
                    st.waiting[self.pe] = Some(from);
                    st.blocked += 1;
                }
                if st.blocked == st.alive {
                    Shared::poison(&mut st);
                    drop(st);
                    drop(guard);
                    self.shared.wake_all();
                    panic_any(DeadlockNotice);
                }
            }
            q.cv.wait(&mut guard);
            {
                let st = self.shared.state.lock();
                if st.poisoned {
                    panic_any(DeadlockNotice);
                }
            }
        }
    }

    fn contract_violation(&self, detail: String) -> ! {
        panic_any(ContractNotice {
            pe: self.pe,
            detail,
        })
    }

    /// Buffered point-to-point send; FIFO per ordered PE pair.
    pub fn send(&mut self, to: usize, msg: BitString) {
        self.rounds += 1;
        self.send_raw(to, msg);
    }

    /// Blocking receive of the next message from `from`.
    pub fn recv(&mut self, from: usize) -> BitString {
        self.rounds += 1;
        self.recv_raw(from)
    }

    fn vrank(&self, root: usize) -> usize {
        (self.pe + self.p - root) % self.p
    }

    fn pe_of_vrank(&self, vrank: usize, root: usize) -> usize {
        (vrank + root) % self.p
    }

    /// Binomial-tree broadcast; `payload` must be `Some` exactly at the
    /// root. Takes `ceil(log2 p)` rounds.
    pub fn broadcast_bits(&mut self, payload: Option<BitString>, root: usize) -> BitString {
        let depth = ceil_log2(self.p);
        self.rounds += depth as u64;
        let v = self.vrank(root);
        let mut have = if v == 0 {
            match payload {
                Some(b) => b,
                None => self.contract_violation("broadcast root has no payload".into()),
            }
        } else {
            BitString::empty()
        };
        for r in 0..depth {
            let dist = 1usize << r;
            if v >= dist && v < 2 * dist {
                have = self.recv_raw(self.pe_of_vrank(v - dist, root));
            } else if v < dist && v + dist < self.p {
                self.send_raw(self.pe_of_vrank(v + dist, root), have.clone());
            }
        }
        have
    }

    /// Broadcast of a fixed-width word vector.
    pub fn broadcast_words(&mut self, words: Option<Vec<u64>>, width: u32, root: usize) -> Vec<u64> {
        let payload = words.map(|w| pack_words(&w, width));
        let bits = self.broadcast_bits(payload, root);
        unpack_words(&bits, width)
    }

    /// Binomial-tree reduction of equal-width vectors to `root`. The
    /// combiner receives the entry index and must be associative.
    pub fn reduce_vec(
        &mut self,
        values: Vec<u64>,
        width: u32,
        root: usize,
        mut combine: impl FnMut(usize, u64, u64) -> u64,
    ) -> Option<Vec<u64>> {
        let depth = ceil_log2(self.p);
        self.rounds += depth as u64;
        let len = values.len();
        let mut acc = values;
        let v = self.vrank(root);
        for r in 0..depth {
            let dist = 1usize << r;
            if v & dist != 0 {
                self.send_raw(self.pe_of_vrank(v - dist, root), pack_words(&acc, width));
                return None;
            }
            if v + dist < self.p {
                let msg = self.recv_raw(self.pe_of_vrank(v + dist, root));
                let other = self.unpack_checked(&msg, width, len);
                for (i, (a, b)) in acc.iter_mut().zip(other).enumerate() {
                    *a = combine(i, *a, b);
                }
            }
        }
        Some(acc)
    }

    /// All-reduce: butterfly exchange for power-of-two clusters
    /// (`ceil(log2 p)` rounds), reduce-plus-broadcast otherwise.
    pub fn all_reduce_vec(
        &mut self,
        values: Vec<u64>,
        width: u32,
        mut combine: impl FnMut(usize, u64, u64) -> u64,
    ) -> Vec<u64> {
        if self.p.is_power_of_two() {
            let depth = ceil_log2(self.p);
            self.rounds += depth as u64;
            let len = values.len();
            let mut acc = values;
            for r in 0..depth {
                let partner = self.pe ^ (1usize << r);
                self.send_raw(partner, pack_words(&acc, width));
                let msg = self.recv_raw(partner);
                let other = self.unpack_checked(&msg, width, len);
                for (i, (a, b)) in acc.iter_mut().zip(other).enumerate() {
                    *a = if self.pe < partner {
                        combine(i, *a, b)
                    } else {
                        combine(i, b, *a)
                    };
                }
            }
            acc
        } else {
            let reduced = self.reduce_vec(values, width, 0, &mut combine);
            self.broadcast_words(reduced, width, 0)
        }
    }

    /// True at every PE iff the flag is true at any PE.
    pub fn gather_bool_or(&mut self, flag: bool) -> bool {
        self.all_reduce_vec(vec![flag as u64], 1, |_, a, b| a | b)[0] != 0
    }

    /// Sum of `count` over all PEs with smaller id, via a dissemination
    /// scan in `ceil(log2 p)` rounds.
    pub fn exclusive_prefix_sum(&mut self, count: u64) -> u64 {
        let depth = ceil_log2(self.p);
        self.rounds += depth as u64;
        let mut running = count;
        let mut prefix = 0u64;
        for r in 0..depth {
            let dist = 1usize << r;
            if self.pe + dist < self.p {
                self.send_raw(self.pe + dist, pack_words(&[running], 64));
            }
            if self.pe >= dist {
                let msg = self.recv_raw(self.pe - dist);
                let got = self.unpack_checked(&msg, 64, 1)[0];
                prefix += got;
                running += got;
            }
        }
        prefix
    }

    /// Direct-delivery personalized exchange: every PE sends slot `j`
    /// to PE `j` in `p - 1` rounds (XOR schedule for power-of-two
    /// clusters, ring schedule otherwise). Slot `pe` stays local.
    pub fn all_to_all(&mut self, msgs: Vec<BitString>) -> Vec<BitString> {
        if msgs.len() != self.p {
            self.contract_violation(format!(
                "all_to_all needs {} payload slots, got {}",
                self.p,
                msgs.len()
            ));
        }
        self.rounds += (self.p - 1) as u64;
        let mut out: Vec<Option<BitString>> = (0..self.p).map(|_| None).collect();
        let mut msgs: Vec<Option<BitString>> = msgs.into_iter().map(Some).collect();
        out[self.pe] = msgs[self.pe].take();
        if self.p.is_power_of_two() {
            for r in 1..self.p {
                let partner = self.pe ^ r;
                self.send_raw(partner, msgs[partner].take().unwrap());
                out[partner] = Some(self.recv_raw(partner));
            }
        } else {
            for r in 1..self.p {
                let to = (self.pe + r) % self.p;
                let from = (self.pe + self.p - r) % self.p;
                self.send_raw(to, msgs[to].take().unwrap());
                out[from] = Some(self.recv_raw(from));
            }
        }
        out.into_iter().map(|m| m.unwrap()).collect()
    }

    /// Binomial-tree gather; the root receives every PE's payload.
    pub fn gather_bits(&mut self, payload: BitString, root: usize) -> Option<Vec<BitString>> {
        let depth = ceil_log2(self.p);
        self.rounds += depth as u64;
        // Each chunk travels framed as (pe, bit length, bits).
        let mut chunks: Vec<(usize, BitString)> = vec![(self.pe, payload)];
        let v = self.vrank(root);
        for r in 0..depth {
            let dist = 1usize << r;
            if v & dist != 0 {
                let mut w = BitString::writer();
                for (pe, c) in &chunks {
                    w.push_bits(*pe as u64, 16);
                    w.push_bits(c.bit_len(), 48);
                    w.push_payload(c);
                }
                self.send_raw(self.pe_of_vrank(v - dist, root), w.finish());
                return None;
            }
            if v + dist < self.p {
                let msg = self.recv_raw(self.pe_of_vrank(v + dist, root));
                let mut r = msg.reader();
                while r.remaining() > 0 {
                    let pe = r.read_bits(16) as usize;
                    let len = r.read_bits(48);
                    let mut w = BitString::writer();
                    let mut left = len;
                    while left >= 64 {
                        w.push_u64(r.read_u64());
                        left -= 64;
                    }
                    if left > 0 {
                        w.push_bits(r.read_bits(left as u32), left as u32);
                    }
                    chunks.push((pe, w.finish()));
                }
            }
        }
        let mut out: Vec<Option<BitString>> = (0..self.p).map(|_| None).collect();
        for (pe, c) in chunks {
            out[pe] = Some(c);
        }
        Some(out.into_iter().map(|c| c.expect("chunk from every PE")).collect())
    }

    fn unpack_checked(&self, msg: &BitString, width: u32, len: usize) -> Vec<u64> {
        let expected = width as u64 * len as u64;
        if msg.bit_len() != expected {
            self.contract_violation(format!(
                "expected {len} entries of {width} bits ({expected} bits), received {}",
                msg.bit_len()
            ));
        }
        unpack_words(msg, width)
    }
}

fn pack_words(words: &[u64], width: u32) -> BitString {
    let mut w = BitString::writer();
    for &v in words {
        w.push_bits(v, width);
    }
    w.finish()
}

fn unpack_words(bits: &BitString, width: u32) -> Vec<u64> {
    assert!(width > 0);
    let len = bits.bit_len() / width as u64;
    assert_eq!(bits.bit_len(), len * width as u64, "ragged word vector");
    let mut r = bits.reader();
    (0..len).map(|_| r.read_bits(width)).collect()
}

/// Smallest number of tree levels covering `p` PEs.
pub fn ceil_log2(p: usize) -> u32 {
    p.next_power_of_two().trailing_zeros()
}

/// Runs one program per PE to completion and returns the per-PE
/// outputs plus the communication ledger. Results are bit-identical
/// for identical (config, program, inputs).
pub fn run<I, O, F>(
    config: &ClusterConfig,
    inputs: Vec<I>,
    program: F,
) -> Result<(Vec<O>, CostLedger), SimError>
where
    I: Send,
    O: Send,
    F: Fn(&mut Comm, I) -> O + Sync,
{
    config.validate()?;
    if inputs.len() != config.pes {
        return Err(SimError::InputCount {
            got: inputs.len(),
            pes: config.pes,
        });
    }
    let shared = Shared::new(config.pes);
    let mut slots: Vec<Option<(O, PeCost, u64)>> = (0..config.pes).map(|_| None).collect();
    let mut deadlock = false;
    let mut contract: Option<ContractNotice> = None;
    let mut other_panic: Option<Box<dyn std::any::Any + Send>> = None;

    std::thread::scope(|scope| {
        let shared = &shared;
        let program = &program;
        let handles: Vec<_> = inputs
            .into_iter()
            .enumerate()
            .map(|(pe, input)| {
                scope.spawn(move || {
                    let _alive = AliveGuard { shared };
                    let mut comm = Comm::new(pe, shared, config);
                    let out = program(&mut comm, input);
                    (out, comm.cost, comm.rounds)
                })
            })
            .collect();
        for (pe, handle) in handles.into_iter().enumerate() {
            match handle.join() {
                Ok(parts) => slots[pe] = Some(parts),
                Err(payload) => {
                    if payload.is::<DeadlockNotice>() {
                        deadlock = true;
                    } else {
                        match payload.downcast::<ContractNotice>() {
                            Ok(notice) => contract = Some(*notice),
                            Err(payload) => other_panic = Some(payload),
                        }
                    }
                }
            }
        }
    });

    if let Some(payload) = other_panic {
        std::panic::resume_unwind(payload);
    }
    if let Some(notice) = contract {
        return Err(SimError::Contract {
            pe: notice.pe,
            detail: notice.detail,
        });
    }
    if deadlock {
        let blocked = shared.state.lock().report.clone();
        return Err(SimError::Deadlock { blocked });
    }

    let mut outputs = Vec::with_capacity(config.pes);
    let mut costs = Vec::with_capacity(config.pes);
    let mut rounds = 0u64;
    for slot in slots {
        let (out, cost, r) = slot.expect("every PE completed");
        outputs.push(out);
        costs.push(cost);
        rounds = rounds.max(r);
    }
    Ok((outputs, CostLedger::assemble(costs, rounds)))
}
