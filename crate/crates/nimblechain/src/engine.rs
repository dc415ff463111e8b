//! Discrete-event scheduler, bounded-delay broadcast, Poisson mining and the
//! simulation loop tying nodes, workload and adversary together.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{Action, Adversary, AttackEvent};
use crate::asset::{AssetError, AssetView};
use crate::config::{ConfigError, Scenario, SimConfig};
use crate::metrics::log::{Detail, EventKind, EventRecord, EventSink};
use crate::node::{ChainOutcome, NodeParams, NodeState, Outbox};
use crate::types::{AccountId, Block, BlockHash, BlockStore, ProcessId, Transaction, TxId, TxKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("delay {delay} exceeds the delivery bound {max}")]
    DelayOutOfBounds { delay: f64, max: f64 },
    #[error("invariant breach (seed {seed}, event {event_index}, t={time:.3}): {detail}")]
    InvariantBreach { seed: u64, event_index: u64, time: f64, detail: String },
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error("{0} is not a correct process")]
    NotCorrect(ProcessId),
}

/// Independent random stream `stream` of a run seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Entry<E> {
    time: f64,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue ordered by (time, insertion sequence).
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    last: Option<(f64, u64)>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0, last: None }
    }
}

impl<E> EventQueue<E> {
    pub fn push(&mut self, time: f64, ev: E) -> u64 {
        debug_assert!(time.is_finite());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, ev });
        seq
    }

    pub fn pop(&mut self) -> Option<(f64, u64, E)> {
        let e = self.heap.pop()?;
        if let Some((t, s)) = self.last {
            assert!(
                t < e.time || (t == e.time && s < e.seq),
                "event queue went backwards: ({t}, {s}) then ({}, {})",
                e.time,
                e.seq
            );
        }
        self.last = Some((e.time, e.seq));
        Some((e.time, e.seq, e.ev))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
        self.last = None;
    }
}

/// Poisson block production: exponential gaps, winner proportional to power.
#[derive(Debug, Clone)]
pub struct MiningModel {
    cumulative: Vec<f64>,
    gap: Exp<f64>,
}

impl MiningModel {
    pub fn new(powers: &[f64], block_interval: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = powers
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        MiningModel { cumulative, gap: Exp::new(1.0 / block_interval).expect("positive interval") }
    }

    pub fn next_mining_winner<R: Rng>(&self, rng: &mut R) -> (ProcessId, f64) {
        let dt = self.gap.sample(rng);
        let total = *self.cumulative.last().expect("at least one process");
        let x = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= x).min(self.cumulative.len() - 1);
        (ProcessId(i as u32), dt)
    }
}

/// Per-recipient delays for one broadcast.
#[derive(Debug, Clone, PartialEq)]
pub enum Delays {
    /// Uniform in `[base_delay, D]`, drawn per recipient.
    Default,
    All(f64),
    /// Indexed by process; the sender's entry is ignored.
    PerRecipient(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Network {
    base: f64,
    max: f64,
    /// Bound that overrides must respect; `INFINITY` in the stress scenario.
    bound: f64,
    rng: ChaCha8Rng,
}

impl Network {
    pub fn new(cfg: &SimConfig, rng: ChaCha8Rng) -> Self {
        let stress = cfg.scenario == Scenario::DViolationStress;
        Network {
            base: cfg.base_delay,
            max: cfg.max_delay_in_run(),
            bound: if stress { f64::INFINITY } else { cfg.max_delay },
            rng,
        }
    }

    /// Delay for each of `n` processes; the sender gets 0.
    pub fn delays(&mut self, n: usize, sender: Option<ProcessId>, d: &Delays) -> Result<Vec<f64>, SimError> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let v = match d {
                Delays::Default => self.rng.random_range(self.base..=self.max),
                Delays::All(v) => *v,
                Delays::PerRecipient(v) => v[i],
            };
            if sender.is_some_and(|s| s.index() == i) {
                out.push(0.0);
                continue;
            }
            if !(v >= 0.0 && v <= self.bound) {
                return Err(SimError::DelayOutOfBounds { delay: v, max: self.bound });
            }
            out.push(v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Ev {
    DeliverTx { to: u32, tx: Arc<Transaction> },
    DeliverChain { to: u32, tip: Arc<Block> },
    MineWin(ProcessId),
    PromiseDue { node: u32, key: TxKey },
    WorkloadIssue,
    AttackStep(AttackEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub time: f64,
    pub event_index: u64,
    pub detail: String,
}

/// Static facts about a run needed to interpret its log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub powers: Vec<f64>,
    pub byzantine: Vec<bool>,
    pub reference_miner: u32,
    pub commit_depth: u32,
    pub ageing_threshold: u32,
    pub max_delay: f64,
    pub block_interval: f64,
    pub sample_period: f64,
    pub duration: f64,
    pub end_time: f64,
    pub genesis: BlockHash,
}

impl RunMeta {
    pub fn correct(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.byzantine.iter().enumerate().filter(|(_, b)| !**b).map(|(i, _)| ProcessId(i as u32))
    }

    pub fn is_correct(&self, p: ProcessId) -> bool {
        self.byzantine.get(p.index()).is_some_and(|b| !b)
    }

    pub fn correct_power(&self) -> f64 {
        self.correct().map(|p| self.powers[p.index()]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub meta: RunMeta,
    pub events_processed: u64,
    pub blocks_produced: usize,
    pub transactions: BTreeMap<TxKey, Arc<Transaction>>,
    pub violations: Vec<Violation>,
    pub final_tips: Vec<(ProcessId, BlockHash, u64)>,
}

const STREAM_MINING: u64 = 1;
const STREAM_NETWORK: u64 = 2;
const STREAM_WORKLOAD: u64 = 3;
const STREAM_ADVERSARY: u64 = 4;

/// One simulation run.
pub struct Simulation<'s> {
    cfg: SimConfig,
    meta: RunMeta,
    queue: EventQueue<Ev>,
    store: BlockStore,
    nodes: Vec<Option<NodeState>>,
    correct: Vec<u32>,
    adversary: Option<Adversary>,
    net: Network,
    mining: MiningModel,
    mining_rng: ChaCha8Rng,
    workload_rng: ChaCha8Rng,
    workload_gap: Option<Exp<f64>>,
    transactions: BTreeMap<TxKey, Arc<Transaction>>,
    committed_anywhere: FxHashMap<TxId, (u32, BlockHash)>,
    bound_checked: FxHashSet<TxKey>,
    violations: Vec<Violation>,
    fatal: bool,
    event_index: u64,
    now: f64,
    sink: &'s mut dyn EventSink,
}

impl<'s> Simulation<'s> {
    pub fn new(cfg: &SimConfig, sink: &'s mut dyn EventSink) -> Result<Self, SimError> {
        cfg.validate()?;
        let cfg = cfg.clone();
        let powers = cfg.mining_powers()?;
        let n = cfg.n_processes;
        let attacker = cfg.attacker();
        let byzantine: Vec<bool> = (0..n).map(|i| Some(i) == attacker).collect();
        let mut store = BlockStore::default();
        let genesis = store.insert(Block::genesis(cfg.seed));
        let params = NodeParams::from_config(&cfg);
        let assets = AssetView::genesis(n, cfg.genesis_balance);

        let nodes: Vec<Option<NodeState>> = (0..n)
            .map(|i| {
                (!byzantine[i])
                    .then(|| NodeState::new(ProcessId(i as u32), params, genesis.clone(), assets.clone()))
            })
            .collect();
        let correct: Vec<u32> = (0..n as u32).filter(|&i| !byzantine[i as usize]).collect();
        let meta = RunMeta {
            seed: cfg.seed,
            powers: powers.clone(),
            byzantine: byzantine.clone(),
            reference_miner: cfg.reference_miner,
            commit_depth: cfg.commit_depth,
            ageing_threshold: cfg.ageing_threshold,
            max_delay: cfg.max_delay,
            block_interval: cfg.block_interval,
            sample_period: cfg.sample_period,
            duration: cfg.duration,
            end_time: cfg.end_time(),
            genesis: genesis.hash,
        };
        let adversary = attacker.map(|a| {
            Adversary::new(&cfg, ProcessId(a as u32), genesis.clone(), powers.clone(), rng_stream(cfg.seed, STREAM_ADVERSARY))
        });
        let mut sim = Simulation {
            net: Network::new(&cfg, rng_stream(cfg.seed, STREAM_NETWORK)),
            mining: MiningModel::new(&powers, cfg.block_interval),
            mining_rng: rng_stream(cfg.seed, STREAM_MINING),
            workload_rng: rng_stream(cfg.seed, STREAM_WORKLOAD),
            workload_gap: (cfg.tx_rate > 0.0).then(|| Exp::new(cfg.tx_rate).expect("positive rate")),
            fatal: cfg.scenario != Scenario::DViolationStress,
            cfg,
            meta,
            queue: EventQueue::default(),
            store,
            nodes,
            correct,
            adversary,
            transactions: BTreeMap::new(),
            committed_anywhere: FxHashMap::default(),
            bound_checked: FxHashSet::default(),
            violations: Vec::new(),
            event_index: 0,
            now: 0.0,
            sink,
        };
        sim.setup();
        Ok(sim)
    }

    fn setup(&mut self) {
        for &i in &self.correct {
            self.sink.record(EventRecord::block(0.0, ProcessId(i), EventKind::BlockAccepted, self.meta.genesis, 0));
        }
        let (w, dt) = self.mining.next_mining_winner(&mut self.mining_rng);
        self.queue.push(dt, Ev::MineWin(w));
        if let Some(gap) = &self.workload_gap {
            let dt = gap.sample(&mut self.workload_rng);
            self.queue.push(dt, Ev::WorkloadIssue);
        }
        if let Some(adv) = &mut self.adversary {
            let actions = adv.start();
            self.apply_actions(actions).expect("initial attack schedule is valid");
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn node(&self, p: ProcessId) -> Option<&NodeState> {
        self.nodes.get(p.index()).and_then(Option::as_ref)
    }

    pub fn correct_nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.iter().flatten()
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    /// Issues a transfer from `issuer`'s account at the current time and
    /// broadcasts it with default delays.
    pub fn submit_transfer(
        &mut self,
        issuer: ProcessId,
        to: AccountId,
        amount: u64,
    ) -> Result<Arc<Transaction>, SimError> {
        let node = self.nodes.get_mut(issuer.index()).and_then(Option::as_mut).ok_or(SimError::NotCorrect(issuer))?;
        let tx = Arc::new(node.issue_transfer(to, amount, self.now)?);
        self.publish_tx(issuer, tx.clone(), &Delays::Default)?;
        Ok(tx)
    }

    /// Processes events up to and including time `until`.
    pub fn run_until(&mut self, until: f64) -> Result<(), SimError> {
        let until = until.min(self.cfg.end_time());
        while self.queue.peek_time().is_some_and(|t| t <= until) {
            let (t, _, ev) = self.queue.pop().expect("peeked");
            self.now = t;
            self.event_index += 1;
            self.handle(ev)?;
        }
        self.now = self.now.max(until);
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        self.run_until(self.cfg.end_time())
    }

    pub fn finish(self) -> RunReport {
        RunReport {
            final_tips: self
                .correct_nodes()
                .map(|n| (n.pid, n.tip().hash, n.tip().height))
                .collect(),
            meta: self.meta,
            events_processed: self.event_index,
            blocks_produced: self.store.len() - 1,
            transactions: self.transactions,
            violations: self.violations,
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::DeliverTx { to, tx } => {
                if let Some(node) = self.nodes[to as usize].as_mut() {
                    let mut out = Outbox::default();
                    node.on_receive_tx(&tx, self.now, &mut out);
                    self.drain(to, out)?;
                }
            }
            Ev::DeliverChain { to, tip } => {
                if let Some(node) = self.nodes[to as usize].as_mut() {
                    let mut out = Outbox::default();
                    let outcome = node.on_receive_chain(&tip, &self.store, self.now, &mut out);
                    self.drain(to, out)?;
                    if matches!(outcome, ChainOutcome::Accepted { .. }) {
                        self.after_chain_change()?;
                    }
                } else if let Some(adv) = self.adversary.as_mut() {
                    let actions = adv.on_chain(&tip, self.now);
                    self.apply_actions(actions)?;
                }
            }
            Ev::MineWin(w) => {
                let (next, dt) = self.mining.next_mining_winner(&mut self.mining_rng);
                self.queue.push(self.now + dt, Ev::MineWin(next));
                self.mine(w)?;
            }
            Ev::PromiseDue { node, key } => {
                if let Some(n) = self.nodes[node as usize].as_mut() {
                    let mut out = Outbox::default();
                    n.on_promise_due(key, self.now, &mut out);
                    self.drain(node, out)?;
                }
            }
            Ev::WorkloadIssue => self.issue_workload()?,
            Ev::AttackStep(step) => {
                if let Some(adv) = self.adversary.as_mut() {
                    let actions = adv.on_step(step, self.now, &mut self.store, self.cfg.duration);
                    self.apply_actions(actions)?;
                }
            }
        }
        Ok(())
    }

    fn mine(&mut self, w: ProcessId) -> Result<(), SimError> {
        if let Some(node) = self.nodes[w.index()].as_mut() {
            let block = node.build_block(self.now);
            let block = self.store.insert(block);
            let mut out = Outbox::default();
            node.adopt_own(block.clone(), self.now, &mut out);
            self.drain(w.0, out)?;
            self.broadcast_chain(w, block, &Delays::Default)?;
            self.after_chain_change()?;
        } else if let Some(adv) = self.adversary.as_mut() {
            let actions = adv.on_mine_win(self.now, &mut self.store, self.cfg.duration);
            self.apply_actions(actions)?;
        }
        Ok(())
    }

    fn issue_workload(&mut self) -> Result<(), SimError> {
        if let Some(gap) = &self.workload_gap {
            let dt = gap.sample(&mut self.workload_rng);
            if self.now + dt < self.cfg.duration {
                self.queue.push(self.now + dt, Ev::WorkloadIssue);
            }
        }
        if self.now >= self.cfg.duration || self.correct.is_empty() {
            return Ok(());
        }
        let rng = &mut self.workload_rng;
        let issuer = *self.correct.choose(rng).expect("non-empty");
        let transfer = rng.random::<f64>() < self.cfg.workload_mix;
        let n = self.cfg.n_processes as u32;
        let tx = if transfer && n > 1 {
            let mut to = rng.random_range(0..n - 1);
            if to >= issuer {
                to += 1;
            }
            let amount = rng.random_range(1..=self.cfg.max_transfer);
            let node = self.nodes[issuer as usize].as_mut().expect("correct issuer");
            match node.issue_transfer(AccountId(to), amount, self.now) {
                Ok(tx) => tx,
                // Not enough promised funds right now; issue nothing.
                Err(_) => return Ok(()),
            }
        } else {
            let tag = rng.random();
            self.nodes[issuer as usize].as_mut().expect("correct issuer").issue_contract(tag, self.now)
        };
        self.publish_tx(ProcessId(issuer), Arc::new(tx), &Delays::Default)
    }

    fn publish_tx(&mut self, sender: ProcessId, tx: Arc<Transaction>, delays: &Delays) -> Result<(), SimError> {
        self.sink.record(
            EventRecord::tx(self.now, sender, EventKind::Issue, tx.key()).with_detail(Detail::Tx(tx.tx_type())),
        );
        self.transactions.insert(tx.key(), tx.clone());
        let delays = self.net.delays(self.cfg.n_processes, Some(sender), delays)?;
        for (to, d) in delays.into_iter().enumerate() {
            self.queue.push(self.now + d, Ev::DeliverTx { to: to as u32, tx: tx.clone() });
        }
        Ok(())
    }

    fn broadcast_chain(&mut self, sender: ProcessId, tip: Arc<Block>, delays: &Delays) -> Result<(), SimError> {
        let delays = self.net.delays(self.cfg.n_processes, Some(sender), delays)?;
        for (to, d) in delays.into_iter().enumerate() {
            if to != sender.index() {
                self.queue.push(self.now + d, Ev::DeliverChain { to: to as u32, tip: tip.clone() });
            }
        }
        Ok(())
    }

    fn apply_actions(&mut self, actions: Vec<Action>) -> Result<(), SimError> {
        for a in actions {
            match a {
                Action::Record(r) => self.sink.record(r),
                Action::Issue { tx, delays } => {
                    let sender = tx.id.issuer;
                    self.publish_tx(sender, tx, &delays)?;
                }
                Action::Register(tx) => {
                    self.sink.record(
                        EventRecord::tx(self.now, tx.id.issuer, EventKind::Issue, tx.key())
                            .with_detail(Detail::Tx(tx.tx_type())),
                    );
                    self.transactions.insert(tx.key(), tx);
                }
                Action::Publish { sender, tip, delays } => self.broadcast_chain(sender, tip, &delays)?,
                Action::Schedule { at, step } => {
                    self.queue.push(at, Ev::AttackStep(step));
                }
            }
        }
        Ok(())
    }

    /// Lets a non-burst attacker know when its fragmentation has healed.
    fn after_chain_change(&mut self) -> Result<(), SimError> {
        let Some(h) = self.adversary.as_ref().and_then(Adversary::awaiting_heal) else {
            return Ok(());
        };
        if self.agreed_block_at(h).is_some() {
            let actions = self.adversary.as_mut().expect("checked").on_healed(self.now);
            self.apply_actions(actions)?;
        }
        Ok(())
    }

    /// The block every correct node holds at height `h`, if they agree.
    pub fn agreed_block_at(&self, h: u64) -> Option<BlockHash> {
        let mut agreed = None;
        for n in self.correct_nodes() {
            let b = n.chain().at(h)?.hash;
            if *agreed.get_or_insert(b) != b {
                return None;
            }
        }
        agreed
    }

    fn drain(&mut self, node: u32, out: Outbox) -> Result<(), SimError> {
        let Outbox { records, timers, aged, commits, violations } = out;
        for r in records {
            self.sink.record(r);
        }
        for (due, key) in timers {
            self.queue.push(due, Ev::PromiseDue { node, key });
        }
        for v in violations {
            self.violation(v)?;
        }
        for key in aged {
            if self.cfg.check_ageing_bound && self.bound_checked.insert(key) {
                self.check_ageing_bound(node, key)?;
            }
        }
        for (key, block) in commits {
            match self.committed_anywhere.get(&key.id) {
                None => {
                    self.committed_anywhere.insert(key.id, (key.tag, block));
                }
                Some(&(tag, b)) if tag == key.tag && b == block => {}
                Some(&(tag, _)) => {
                    let msg = format!("p{node} committed {key} but tag {tag} was committed elsewhere");
                    self.violation(msg)?;
                }
            }
        }
        Ok(())
    }

    /// When `p` ages `key` successfully, every correct node must hold the
    /// same variant with age at least AT-2.
    fn check_ageing_bound(&mut self, p: u32, key: TxKey) -> Result<(), SimError> {
        let floor = self.cfg.ageing_threshold - 2;
        let mut bad = None;
        for q in self.correct_nodes() {
            let preferred = q.ageing().preferred(key.id).map(|t| t.content_tag);
            let age = q.age(key.id, self.now);
            if preferred != Some(key.tag) || age.is_none_or(|a| a < floor) {
                bad = Some(format!(
                    "p{p} aged {key} while {} holds variant {preferred:?} at age {age:?}",
                    q.pid
                ));
                break;
            }
        }
        match bad {
            Some(msg) => self.violation(msg),
            None => Ok(()),
        }
    }

    fn violation(&mut self, detail: String) -> Result<(), SimError> {
        if self.fatal {
            return Err(SimError::InvariantBreach {
                seed: self.cfg.seed,
                event_index: self.event_index,
                time: self.now,
                detail,
            });
        }
        self.violations.push(Violation { time: self.now, event_index: self.event_index, detail });
        Ok(())
    }
}

/// Runs `cfg` to completion, streaming records into `sink`.
pub fn run(cfg: &SimConfig, sink: &mut dyn EventSink) -> Result<RunReport, SimError> {
    let mut sim = Simulation::new(cfg, sink)?;
    sim.run_to_end()?;
    Ok(sim.finish())
}

/// Runs `cfg` and returns the full in-memory log.
pub fn simulate(cfg: &SimConfig) -> Result<(crate::metrics::EventLog, RunReport), SimError> {
    let mut log = crate::metrics::EventLog::default();
    let report = run(cfg, &mut log)?;
    Ok((log, report))
}
