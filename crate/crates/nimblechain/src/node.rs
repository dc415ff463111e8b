//! Per-process protocol state: fast-path ageing, causal mempool, chain
//! validation with required replacement suffixes, and commit detection.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::asset::{AssetError, AssetView, Wallet};
use crate::config::{RrsVariant, SimConfig};
use crate::metrics::log::{Detail, DiscardReason, EventKind, EventRecord};
use crate::types::{AccountId, Block, BlockHash, BlockStore, Chain, ProcessId, Transaction, TxId, TxKey};

/// Protocol constants a node needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeParams {
    pub ageing_threshold: u32,
    pub max_delay: f64,
    pub commit_depth: u32,
    pub variant: RrsVariant,
    pub block_capacity: usize,
    pub hash_seed: u64,
    pub record_receives: bool,
}

impl NodeParams {
    pub fn from_config(c: &SimConfig) -> Self {
        NodeParams {
            ageing_threshold: c.ageing_threshold,
            max_delay: c.max_delay,
            commit_depth: c.commit_depth,
            variant: c.rrs_variant,
            block_capacity: c.block_capacity,
            hash_seed: c.seed,
            record_receives: c.record_receives,
        }
    }

    pub fn promise_delay(&self) -> f64 {
        self.ageing_threshold as f64 * self.max_delay
    }
}

/// Whole ageing steps in `elapsed`. The epsilon keeps exact multiples of D
/// from rounding down.
pub fn age_steps(elapsed: f64, max_delay: f64) -> u32 {
    let steps = (elapsed / max_delay + 1e-9).floor();
    if steps <= 0.0 {
        0
    } else {
        steps.min(u32::MAX as f64) as u32
    }
}

/// Required replacement suffix for a transaction of the given age.
pub fn rrs(variant: RrsVariant, ageing_threshold: u32, commit_depth: u32, age: Option<u32>) -> u32 {
    let Some(age) = age else { return 0 };
    match variant {
        RrsVariant::Simple => {
            if age + 2 >= ageing_threshold {
                commit_depth
            } else {
                0
            }
        }
        RrsVariant::Progressive => (age / 2).min(commit_depth),
    }
}

#[derive(Debug, Clone)]
struct Ageing {
    tx: Arc<Transaction>,
    received: f64,
}

#[derive(Debug, Clone)]
pub struct Aged {
    pub tx: Arc<Transaction>,
    pub frozen_age: u32,
    pub successfully_aged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    /// First member of its conflict set; the promise is due at `due`.
    Started { due: f64 },
    /// Same variant seen before.
    Duplicate,
    /// Conflicting variant arrived while the first was ageing; the first is
    /// frozen at `age`.
    Froze { age: u32 },
    /// Conflicting variant arrived after ageing had already stopped.
    Conflicting,
}

/// The ageing and aged maps. Only the first-received member of a conflict
/// set ever enters either map.
#[derive(Debug, Clone, Default)]
pub struct AgeingState {
    ageing: FxHashMap<TxId, Ageing>,
    aged: FxHashMap<TxId, Aged>,
}

impl AgeingState {
    pub fn clear(&mut self) {
        self.ageing.clear();
        self.aged.clear();
    }

    pub fn observe(&mut self, tx: &Arc<Transaction>, now: f64, p: &NodeParams) -> Observation {
        if let Some(a) = self.ageing.get(&tx.id) {
            if a.tx.content_tag == tx.content_tag {
                return Observation::Duplicate;
            }
            let age = age_steps(now - a.received, p.max_delay).min(p.ageing_threshold - 1);
            let a = self.ageing.remove(&tx.id).expect("present");
            self.aged.insert(tx.id, Aged { tx: a.tx, frozen_age: age, successfully_aged: false });
            return Observation::Froze { age };
        }
        if let Some(a) = self.aged.get(&tx.id) {
            return if a.tx.content_tag == tx.content_tag {
                Observation::Duplicate
            } else {
                Observation::Conflicting
            };
        }
        self.ageing.insert(tx.id, Ageing { tx: tx.clone(), received: now });
        Observation::Started { due: now + p.promise_delay() }
    }

    /// Age in units of D, `None` for never-aged ids. Capped at AT.
    pub fn age(&self, id: TxId, now: f64, p: &NodeParams) -> Option<u32> {
        if let Some(a) = self.aged.get(&id) {
            return Some(a.frozen_age);
        }
        self.ageing
            .get(&id)
            .map(|a| age_steps(now - a.received, p.max_delay).min(p.ageing_threshold))
    }

    pub fn rrs(&self, id: TxId, now: f64, p: &NodeParams) -> u32 {
        rrs(p.variant, p.ageing_threshold, p.commit_depth, self.age(id, now, p))
    }

    /// Handles a due promise timer. Returns the transaction if it was still
    /// ageing, i.e. it aged successfully.
    pub fn complete(&mut self, key: TxKey, p: &NodeParams) -> Option<Arc<Transaction>> {
        match self.ageing.get(&key.id) {
            Some(a) if a.tx.content_tag == key.tag => {}
            _ => return None,
        }
        let a = self.ageing.remove(&key.id).expect("present");
        let tx = a.tx.clone();
        self.aged.insert(
            key.id,
            Aged { tx: a.tx, frozen_age: p.ageing_threshold, successfully_aged: true },
        );
        Some(tx)
    }

    /// Stops ageing without a conflicting arrival (a conflicting variant committed).
    pub fn freeze(&mut self, id: TxId, now: f64, p: &NodeParams) {
        if let Some(a) = self.ageing.remove(&id) {
            let age = age_steps(now - a.received, p.max_delay).min(p.ageing_threshold - 1);
            self.aged.insert(id, Aged { tx: a.tx, frozen_age: age, successfully_aged: false });
        }
    }

    /// The one variant of `id` this node ages or has aged.
    pub fn preferred(&self, id: TxId) -> Option<&Arc<Transaction>> {
        self.ageing.get(&id).map(|a| &a.tx).or_else(|| self.aged.get(&id).map(|a| &a.tx))
    }

    pub fn is_ageing(&self, id: TxId) -> bool {
        self.ageing.contains_key(&id)
    }

    pub fn aged_entry(&self, id: TxId) -> Option<&Aged> {
        self.aged.get(&id)
    }
}

/// Ready queue (FIFO, all deps promised) plus the pending set.
#[derive(Debug, Clone, Default)]
pub struct Mempool {
    ready: BTreeMap<u64, Arc<Transaction>>,
    ready_pos: FxHashMap<TxId, u64>,
    pending: FxHashMap<TxId, Arc<Transaction>>,
    next: u64,
}

impl Mempool {
    pub fn ready(&self) -> impl Iterator<Item = &Arc<Transaction>> {
        self.ready.values()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn ready_len(&self) -> usize {
        self.ready.len()
    }

    pub fn contains(&self, id: TxId) -> bool {
        self.ready_pos.contains_key(&id) || self.pending.contains_key(&id)
    }

    pub fn is_pending(&self, id: TxId) -> bool {
        self.pending.contains_key(&id)
    }

    fn push_ready(&mut self, tx: Arc<Transaction>) {
        let pos = self.next;
        self.next += 1;
        self.ready_pos.insert(tx.id, pos);
        self.ready.insert(pos, tx);
    }

    fn remove(&mut self, id: TxId) -> Option<Arc<Transaction>> {
        if let Some(pos) = self.ready_pos.remove(&id) {
            return self.ready.remove(&pos);
        }
        self.pending.remove(&id)
    }
}

/// Side effects of a node callback, drained by the engine.
#[derive(Debug, Default)]
pub struct Outbox {
    pub records: Vec<EventRecord>,
    /// Promise timers to schedule: (due time, variant).
    pub timers: Vec<(f64, TxKey)>,
    /// Variants that aged successfully during this callback.
    pub aged: Vec<TxKey>,
    pub commits: Vec<(TxKey, BlockHash)>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Nothing new in the incoming chain.
    Stale,
    Malformed,
    /// A conflicting block's suffix is shorter than the required replacement suffix.
    ReplacementSuffix,
    MissingDependency,
    /// Not strictly more work than the local chain.
    NotHeavier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainOutcome {
    Accepted { fork_height: u64, new_tip: BlockHash },
    Rejected(RejectReason),
}

/// One correct process.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub pid: ProcessId,
    params: NodeParams,
    chain: Chain,
    /// Variant and height of every transaction on the local chain.
    on_chain: FxHashMap<TxId, (u32, u64)>,
    ageing: AgeingState,
    mempool: Mempool,
    promised: FxHashMap<TxId, (Arc<Transaction>, f64)>,
    promise_order: Vec<TxKey>,
    committed: FxHashMap<TxId, (Arc<Transaction>, f64, BlockHash)>,
    committed_height: u64,
    /// Aged successfully but waiting for dependencies.
    blocked: FxHashMap<TxId, Arc<Transaction>>,
    /// dep id -> (dep tag, waiting variant).
    waiters: FxHashMap<TxId, Vec<(u32, TxKey)>>,
    discarded: FxHashSet<TxKey>,
    assets: AssetView,
    wallet: Wallet,
}

impl NodeState {
    pub fn new(pid: ProcessId, params: NodeParams, genesis: Arc<Block>, assets: AssetView) -> Self {
        NodeState {
            pid,
            params,
            chain: Chain::new(genesis),
            on_chain: FxHashMap::default(),
            ageing: AgeingState::default(),
            mempool: Mempool::default(),
            promised: FxHashMap::default(),
            promise_order: Vec::new(),
            committed: FxHashMap::default(),
            committed_height: 0,
            blocked: FxHashMap::default(),
            waiters: FxHashMap::default(),
            discarded: FxHashSet::default(),
            assets,
            wallet: Wallet::new(pid),
        }
    }

    pub fn params(&self) -> &NodeParams {
        &self.params
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn tip(&self) -> &Arc<Block> {
        self.chain.tip()
    }

    pub fn ageing(&self) -> &AgeingState {
        &self.ageing
    }

    pub fn mempool(&self) -> &Mempool {
        &self.mempool
    }

    pub fn age(&self, id: TxId, now: f64) -> Option<u32> {
        self.ageing.age(id, now, &self.params)
    }

    pub fn rrs(&self, id: TxId, now: f64) -> u32 {
        self.ageing.rrs(id, now, &self.params)
    }

    pub fn promised(&self, id: TxId) -> Option<(&Arc<Transaction>, f64)> {
        self.promised.get(&id).map(|(t, at)| (t, *at))
    }

    pub fn is_promised(&self, key: TxKey) -> bool {
        self.promised.get(&key.id).is_some_and(|(t, _)| t.content_tag == key.tag)
    }

    /// Promised variants in local promise order.
    pub fn promise_order(&self) -> &[TxKey] {
        &self.promise_order
    }

    pub fn committed(&self, id: TxId) -> Option<(&Arc<Transaction>, f64, BlockHash)> {
        self.committed.get(&id).map(|(t, at, b)| (t, *at, *b))
    }

    pub fn committed_count(&self) -> usize {
        self.committed.len()
    }

    pub fn is_discarded(&self, key: TxKey) -> bool {
        self.discarded.contains(&key)
    }

    pub fn is_blocked(&self, id: TxId) -> bool {
        self.blocked.contains_key(&id)
    }

    pub fn assets(&self) -> &AssetView {
        &self.assets
    }

    /// Promised balance of `a` at this node.
    pub fn read(&self, a: AccountId) -> u64 {
        self.assets.read(a)
    }

    pub fn wallet(&self) -> &Wallet {
        &self.wallet
    }

    pub fn issue_transfer(&mut self, to: AccountId, amount: u64, now: f64) -> Result<Transaction, AssetError> {
        let from = self.wallet.account();
        self.wallet.transfer(self.pid, &self.assets, from, to, amount, now)
    }

    pub fn issue_contract(&mut self, tag: u32, now: f64) -> Transaction {
        self.wallet.contract(tag, now)
    }

    fn record(&self, out: &mut Outbox, now: f64, kind: EventKind, key: TxKey) {
        out.records.push(EventRecord::tx(now, self.pid, kind, key));
    }

    /// First-seen handling shared by broadcast and chain delivery.
    fn observe(&mut self, tx: &Arc<Transaction>, now: f64, out: &mut Outbox) -> Observation {
        let obs = self.ageing.observe(tx, now, &self.params);
        match obs {
            Observation::Started { due } => out.timers.push((due, tx.key())),
            Observation::Duplicate => return obs,
            Observation::Froze { .. } | Observation::Conflicting => {}
        }
        if self.params.record_receives {
            self.record(out, now, EventKind::Receive, tx.key());
        }
        obs
    }

    pub fn on_receive_tx(&mut self, tx: &Arc<Transaction>, now: f64, out: &mut Outbox) -> Observation {
        if !tx.well_formed() {
            out.violations.push(format!("{} dropped malformed {}", self.pid, tx.key()));
            return Observation::Duplicate;
        }
        let obs = self.observe(tx, now, out);
        if matches!(obs, Observation::Started { .. }) {
            self.stage(tx.clone(), now, out);
        }
        obs
    }

    fn dep_state(&self, dep: &TxKey) -> DepState {
        if self.discarded.contains(dep) {
            return DepState::Dead;
        }
        match self.promised.get(&dep.id) {
            Some((t, _)) if t.content_tag == dep.tag => DepState::Promised,
            Some(_) => DepState::Dead,
            None => DepState::Waiting,
        }
    }

    fn deps_state(&self, tx: &Transaction) -> DepState {
        let mut state = DepState::Promised;
        for d in &tx.deps {
            match self.dep_state(d) {
                DepState::Dead => return DepState::Dead,
                DepState::Waiting => state = DepState::Waiting,
                DepState::Promised => {}
            }
        }
        state
    }

    fn wait_on_deps(&mut self, tx: &Transaction) {
        for d in &tx.deps {
            if self.dep_state(d) == DepState::Waiting {
                self.waiters.entry(d.id).or_default().push((d.tag, tx.key()));
            }
        }
    }

    /// Puts `tx` in the mempool if it is this node's variant of its id and is
    /// neither on the local chain nor discarded.
    fn stage(&mut self, tx: Arc<Transaction>, now: f64, out: &mut Outbox) {
        let key = tx.key();
        if self.ageing.preferred(tx.id).map(|p| p.key()) != Some(key)
            || self.on_chain.contains_key(&tx.id)
            || self.committed.contains_key(&tx.id)
            || self.discarded.contains(&key)
            || self.mempool.contains(tx.id)
        {
            return;
        }
        match self.deps_state(&tx) {
            DepState::Dead => self.discard(key, DiscardReason::Dependent, now, out),
            DepState::Promised => self.mempool.push_ready(tx),
            DepState::Waiting => {
                self.wait_on_deps(&tx);
                self.mempool.pending.insert(tx.id, tx);
            }
        }
    }

    fn restage(&mut self, id: TxId, now: f64, out: &mut Outbox) {
        if let Some(p) = self.ageing.preferred(id).cloned() {
            self.stage(p, now, out);
        }
    }

    /// Promise timer. Returns true if the variant aged successfully.
    pub fn on_promise_due(&mut self, key: TxKey, now: f64, out: &mut Outbox) -> bool {
        let Some(tx) = self.ageing.complete(key, &self.params) else {
            return false;
        };
        out.aged.push(key);
        if self.promised.contains_key(&key.id) || self.discarded.contains(&key) {
            return true;
        }
        match self.deps_state(&tx) {
            DepState::Promised => self.promise(tx, now, out),
            DepState::Dead => self.discard(key, DiscardReason::Dependent, now, out),
            DepState::Waiting => {
                self.wait_on_deps(&tx);
                self.blocked.insert(key.id, tx);
            }
        }
        true
    }

    /// Records the promise of `tx` and cascades to everything waiting on it.
    pub fn promise(&mut self, tx: Arc<Transaction>, now: f64, out: &mut Outbox) {
        let mut work = vec![tx];
        while let Some(tx) = work.pop() {
            let key = tx.key();
            if let Some((p, _)) = self.promised.get(&key.id) {
                if p.content_tag != key.tag {
                    out.violations.push(format!(
                        "{} would promise {} after promising tag {}",
                        self.pid, key, p.content_tag
                    ));
                }
                continue;
            }
            if self.deps_state(&tx) != DepState::Promised {
                out.violations.push(format!("{} promised {} before its dependencies", self.pid, key));
            }
            self.blocked.remove(&key.id);
            self.assets.apply(&tx);
            self.wallet.on_promised(&tx);
            self.promise_order.push(key);
            self.promised.insert(key.id, (tx, now));
            self.record(out, now, EventKind::Promise, key);

            for (tag, w) in self.waiters.remove(&key.id).unwrap_or_default() {
                if tag != key.tag {
                    self.discard(w, DiscardReason::Dependent, now, out);
                    continue;
                }
                if let Some(b) = self.blocked.get(&w.id).filter(|b| b.content_tag == w.tag) {
                    if self.deps_state(b) == DepState::Promised {
                        work.push(b.clone());
                    }
                }
                let pending = self.mempool.pending.get(&w.id).filter(|p| p.content_tag == w.tag);
                if let Some(p) = pending {
                    if self.deps_state(p) == DepState::Promised {
                        let p = self.mempool.pending.remove(&w.id).expect("present");
                        self.mempool.push_ready(p);
                    }
                }
            }
        }
    }

    /// Permanently drops a variant and everything depending on it.
    fn discard(&mut self, key: TxKey, reason: DiscardReason, now: f64, out: &mut Outbox) {
        let mut work = vec![(key, reason)];
        while let Some((key, reason)) = work.pop() {
            if self.is_promised(key) || !self.discarded.insert(key) {
                continue;
            }
            if self.mempool.ready_pos.contains_key(&key.id) || self.mempool.pending.contains_key(&key.id) {
                let in_pool = self
                    .mempool
                    .ready_pos
                    .get(&key.id)
                    .and_then(|pos| self.mempool.ready.get(pos))
                    .or_else(|| self.mempool.pending.get(&key.id))
                    .is_some_and(|t| t.content_tag == key.tag);
                if in_pool {
                    self.mempool.remove(key.id);
                }
            }
            if self.blocked.get(&key.id).is_some_and(|b| b.content_tag == key.tag) {
                self.blocked.remove(&key.id);
            }
            out.records.push(
                EventRecord::tx(now, self.pid, EventKind::Discard, key).with_detail(Detail::Discard(reason)),
            );
            if let Some(ws) = self.waiters.get_mut(&key.id) {
                let (dead, live): (Vec<_>, Vec<_>) = ws.drain(..).partition(|(tag, _)| *tag == key.tag);
                *ws = live;
                work.extend(dead.into_iter().map(|(_, w)| (w, DiscardReason::Dependent)));
            }
        }
    }

    /// Validates and possibly adopts the chain ending at `tip`.
    pub fn on_receive_chain(
        &mut self,
        tip: &Arc<Block>,
        store: &BlockStore,
        now: f64,
        out: &mut Outbox,
    ) -> ChainOutcome {
        // Walk back to the fork point.
        let mut fresh = Vec::new();
        let mut cur = tip.clone();
        while !self.chain.contains(&cur) {
            let Some(parent) = cur.parent.and_then(|h| store.get(h)) else {
                return ChainOutcome::Rejected(RejectReason::Malformed);
            };
            if parent.height + 1 != cur.height {
                return ChainOutcome::Rejected(RejectReason::Malformed);
            }
            let parent = parent.clone();
            fresh.push(cur);
            cur = parent;
        }
        if fresh.is_empty() {
            return ChainOutcome::Rejected(RejectReason::Stale);
        }
        fresh.reverse();
        let fork = cur.height;
        let n = tip.height;

        // Validate block by block; `cut` is the first rejected block.
        let mut cut = fresh.len();
        let mut cut_reason = None;
        let mut placed: FxHashMap<TxId, u32> = FxHashMap::default();
        'blocks: for (i, b) in fresh.iter().enumerate() {
            for tx in &b.txs {
                let below_fork = self.on_chain.get(&tx.id).is_some_and(|&(_, h)| h <= fork);
                if !tx.well_formed() || below_fork || placed.contains_key(&tx.id) {
                    return ChainOutcome::Rejected(RejectReason::Malformed);
                }
                if let Some(u) = self.ageing.preferred(tx.id) {
                    if u.content_tag != tx.content_tag && self.rrs(tx.id, now) as u64 > n - b.height {
                        cut = i;
                        cut_reason = Some(RejectReason::ReplacementSuffix);
                        break 'blocks;
                    }
                }
                let deps_ok = tx.deps.iter().all(|d| {
                    placed.get(&d.id) == Some(&d.tag)
                        || self.on_chain.get(&d.id).is_some_and(|&(tag, h)| tag == d.tag && h <= fork)
                });
                if !deps_ok {
                    cut = i;
                    cut_reason = Some(RejectReason::MissingDependency);
                    break 'blocks;
                }
                placed.insert(tx.id, tx.content_tag);
            }
        }

        // Every transaction carried by the message is now known here.
        let mut touched = Vec::new();
        for b in &fresh {
            for tx in &b.txs {
                if tx.well_formed() && !matches!(self.observe(tx, now, out), Observation::Duplicate) {
                    touched.push(tx.id);
                }
            }
        }

        let adopt = cut > 0 && fresh[cut - 1].total_work > self.chain.total_work();
        let outcome = if adopt {
            fresh.truncate(cut);
            self.switch_to(fork, fresh, now, out, &mut touched);
            ChainOutcome::Accepted { fork_height: fork, new_tip: self.tip().hash }
        } else {
            ChainOutcome::Rejected(cut_reason.unwrap_or(RejectReason::NotHeavier))
        };
        for id in touched {
            self.restage(id, now, out);
        }
        if adopt {
            self.commit_scan(now, out);
        }
        outcome
    }

    fn switch_to(
        &mut self,
        fork: u64,
        blocks: Vec<Arc<Block>>,
        now: f64,
        out: &mut Outbox,
        touched: &mut Vec<TxId>,
    ) {
        if fork < self.chain.height() {
            let old_tip = self.tip().hash;
            if fork < self.committed_height {
                out.violations.push(format!(
                    "{} reorganised below committed height {} (fork at {})",
                    self.pid, self.committed_height, fork
                ));
                self.committed_height = fork;
            }
            for b in self.chain.truncate(fork) {
                for tx in &b.txs {
                    self.on_chain.remove(&tx.id);
                    touched.push(tx.id);
                }
            }
            out.records.push(EventRecord::block(now, self.pid, EventKind::ChainSwitch, old_tip, fork));
        }
        for b in blocks {
            self.append(b, now, out);
        }
    }

    fn append(&mut self, b: Arc<Block>, now: f64, out: &mut Outbox) {
        for tx in &b.txs {
            self.on_chain.insert(tx.id, (tx.content_tag, b.height));
            self.mempool.remove(tx.id);
        }
        out.records.push(EventRecord::block(now, self.pid, EventKind::BlockAccepted, b.hash, b.height));
        self.chain.push(b);
    }

    /// Commits every block with at least C successors.
    pub fn commit_scan(&mut self, now: f64, out: &mut Outbox) -> usize {
        let target = self.chain.height().saturating_sub(self.params.commit_depth as u64);
        let mut count = 0;
        while self.committed_height < target {
            let h = self.committed_height + 1;
            let block = self.chain.at(h).expect("height within chain").clone();
            for tx in &block.txs {
                let key = tx.key();
                if let Some((c, _, _)) = self.committed.get(&tx.id) {
                    if c.content_tag != key.tag {
                        out.violations.push(format!("{} committed two variants of {}", self.pid, tx.id));
                    }
                    continue;
                }
                match self.promised.get(&tx.id) {
                    None => self.promise(tx.clone(), now, out),
                    Some((p, _)) if p.content_tag != key.tag => out.violations.push(format!(
                        "{} commits {} after promising tag {}",
                        self.pid, key, p.content_tag
                    )),
                    Some(_) => {}
                }
                if tx.deps.iter().any(|d| !self.committed.get(&d.id).is_some_and(|c| c.0.content_tag == d.tag)) {
                    out.violations.push(format!("{} commits {} before its dependencies", self.pid, key));
                }
                self.committed.insert(tx.id, (tx.clone(), now, block.hash));
                self.record(out, now, EventKind::Commit, key);
                out.commits.push((key, block.hash));
                count += 1;
                if let Some(p) = self.ageing.preferred(tx.id) {
                    if p.content_tag != key.tag {
                        let loser = p.key();
                        self.ageing.freeze(tx.id, now, &self.params);
                        self.discard(loser, DiscardReason::Conflict, now, out);
                    }
                }
            }
            self.committed_height = h;
        }
        count
    }

    /// Assembles a block on the local tip from the ready queue.
    pub fn build_block(&self, now: f64) -> Block {
        let mut included: FxHashMap<TxId, u32> = FxHashMap::default();
        let mut txs = Vec::new();
        for tx in self.mempool.ready() {
            if txs.len() >= self.params.block_capacity {
                break;
            }
            if self.on_chain.contains_key(&tx.id) {
                continue;
            }
            let deps_placed = tx.deps.iter().all(|d| {
                included.get(&d.id) == Some(&d.tag)
                    || self.on_chain.get(&d.id).is_some_and(|&(tag, _)| tag == d.tag)
            });
            if deps_placed {
                included.insert(tx.id, tx.content_tag);
                txs.push(tx.clone());
            }
        }
        Block::child(self.tip(), self.pid, now, txs, self.params.hash_seed)
    }

    /// Appends a block this node just mined.
    pub fn adopt_own(&mut self, b: Arc<Block>, now: f64, out: &mut Outbox) {
        out.records.push(EventRecord::block(now, self.pid, EventKind::BlockProduced, b.hash, b.height));
        self.append(b, now, out);
        self.commit_scan(now, out);
    }

    /// Consistency checks over the whole node state; used by tests.
    pub fn check_invariants(&self, now: f64) -> Result<(), String> {
        for tx in self.mempool.ready() {
            if self.deps_state(tx) != DepState::Promised {
                return Err(format!("ready {} has unpromised deps", tx.key()));
            }
        }
        for tx in self.mempool.ready().chain(self.mempool.pending.values()) {
            if self.ageing.preferred(tx.id).map(|p| p.key()) != Some(tx.key()) {
                return Err(format!("mempool holds non-preferred {}", tx.key()));
            }
            if self.on_chain.contains_key(&tx.id) {
                return Err(format!("mempool holds on-chain {}", tx.key()));
            }
        }
        for (id, (c, at, _)) in &self.committed {
            match self.promised.get(id) {
                Some((p, pat)) if p.content_tag == c.content_tag && *pat <= *at => {}
                _ => return Err(format!("committed {} without earlier promise", c.key())),
            }
        }
        if !self.chain.conflict_free() {
            return Err("chain holds two variants of one id".into());
        }
        let depth = self.params.commit_depth as u64;
        for (id, (_, _, hash)) in &self.committed {
            let Some(&(_, h)) = self.on_chain.get(id) else {
                return Err(format!("committed {id} not on chain"));
            };
            if self.chain.at(h).map(|b| b.hash) != Some(*hash) || self.chain.height() < h + depth {
                return Err(format!("committed {id} not buried by C blocks"));
            }
        }
        let _ = now;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DepState {
    Promised,
    Waiting,
    Dead,
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::types::Payload;

    const D: f64 = 0.96;

    fn params(at: u32, variant: RrsVariant) -> NodeParams {
        NodeParams {
            ageing_threshold: at,
            max_delay: D,
            commit_depth: 12,
            variant,
            block_capacity: 200,
            hash_seed: 1,
            record_receives: true,
        }
    }

    fn tx(issuer: u32, seqno: u64, tag: u32, deps: &[TxKey]) -> Arc<Transaction> {
        Arc::new(Transaction {
            id: TxId::new(issuer, seqno),
            payload: Payload::Contract(tag),
            deps: deps.iter().copied().collect::<BTreeSet<_>>(),
            content_tag: tag,
            issue_time: 0.0,
        })
    }

    struct Fixture {
        store: BlockStore,
        genesis: Arc<Block>,
    }

    impl Fixture {
        fn new() -> Self {
            let mut store = BlockStore::default();
            let genesis = store.insert(Block::genesis(1));
            Fixture { store, genesis }
        }

        fn node(&self, p: NodeParams) -> NodeState {
            NodeState::new(ProcessId(0), p, self.genesis.clone(), AssetView::genesis(4, 1000))
        }

        fn extend(&mut self, parent: &Arc<Block>, miner: u32, t: f64, txs: Vec<Arc<Transaction>>) -> Arc<Block> {
            self.store.insert(Block::child(parent, ProcessId(miner), t, txs, 1))
        }

        fn grow(&mut self, parent: &Arc<Block>, miner: u32, k: usize, t0: f64) -> Arc<Block> {
            let mut b = parent.clone();
            for i in 0..k {
                b = self.extend(&b, miner, t0 + i as f64, vec![]);
            }
            b
        }
    }

    #[test]
    fn rrs_table() {
        assert_eq!(rrs(RrsVariant::Simple, 4, 12, Some(2)), 12);
        assert_eq!(rrs(RrsVariant::Simple, 4, 12, Some(1)), 0);
        assert_eq!(rrs(RrsVariant::Simple, 4, 12, None), 0);
        assert_eq!(rrs(RrsVariant::Progressive, 26, 12, None), 0);
        assert_eq!(rrs(RrsVariant::Progressive, 26, 12, Some(5)), 2);
        assert_eq!(rrs(RrsVariant::Progressive, 26, 12, Some(26)), 12);
        assert_eq!(rrs(RrsVariant::Progressive, 26, 12, Some(25)), 12);
        assert_eq!(rrs(RrsVariant::Progressive, 26, 12, Some(1)), 0);
    }

    #[test]
    fn ageing_lifecycle() {
        let p = params(4, RrsVariant::Simple);
        let mut a = AgeingState::default();
        let t = tx(1, 0, 0, &[]);
        assert_eq!(a.age(t.id, 5.0, &p), None);
        assert_eq!(a.observe(&t, 1.0, &p), Observation::Started { due: 1.0 + 4.0 * D });
        assert_eq!(a.age(t.id, 1.0 + 2.5 * D, &p), Some(2));
        assert_eq!(a.observe(&t, 2.0, &p), Observation::Duplicate);
        // Conflict 3·D after receipt freezes at 3.
        let t2 = tx(1, 0, 1, &[]);
        assert_eq!(a.observe(&t2, 1.0 + 3.0 * D, &p), Observation::Froze { age: 3 });
        assert_eq!(a.age(t.id, 100.0, &p), Some(3));
        assert!(a.complete(t.key(), &p).is_none());
        assert_eq!(a.preferred(t.id).unwrap().content_tag, 0);
        assert_eq!(a.observe(&t2, 200.0, &p), Observation::Conflicting);
        assert_eq!(a.observe(&tx(1, 0, 2, &[]), 200.0, &p), Observation::Conflicting);
        assert_eq!(a.preferred(t.id).unwrap().content_tag, 0);
    }

    #[test]
    fn frozen_age_never_reaches_threshold() {
        let p = params(4, RrsVariant::Simple);
        let mut a = AgeingState::default();
        let t = tx(1, 0, 0, &[]);
        a.observe(&t, 0.0, &p);
        // Conflict lands exactly at the due instant, before the timer fires.
        assert_eq!(a.observe(&tx(1, 0, 1, &[]), 4.0 * D, &p), Observation::Froze { age: 3 });
    }

    #[test]
    fn honest_tx_promised_at_due_time() {
        let f = Fixture::new();
        let p = params(26, RrsVariant::Progressive);
        let mut n = f.node(p);
        let mut out = Outbox::default();
        let t = tx(2, 0, 0, &[]);
        n.on_receive_tx(&t, 3.0, &mut out);
        assert_eq!(out.timers, vec![(3.0 + 26.0 * D, t.key())]);
        assert_eq!(n.mempool().ready_len(), 1);
        assert!(n.on_promise_due(t.key(), 3.0 + 26.0 * D, &mut out));
        assert_eq!(n.promised(t.id).unwrap().1, 3.0 + 26.0 * D);
        assert_eq!(n.age(t.id, 1e6), Some(26));
        // Duplicate delivery is a no-op.
        let before = out.records.len();
        n.on_receive_tx(&t, 50.0, &mut out);
        assert_eq!(out.records.len(), before);
        n.check_invariants(50.0).unwrap();
    }

    #[test]
    fn cancelled_timer_is_ignored() {
        let f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let t = tx(2, 0, 0, &[]);
        n.on_receive_tx(&t, 0.0, &mut out);
        n.on_receive_tx(&tx(2, 0, 1, &[]), D, &mut out);
        assert!(!n.on_promise_due(t.key(), 4.0 * D, &mut out));
        assert!(n.promised(t.id).is_none());
        // The rejected variant never reaches the mempool.
        assert_eq!(n.mempool().ready().map(|t| t.content_tag).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn dependency_gates_promise_and_ready() {
        let f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let d = tx(1, 0, 0, &[]);
        let t = tx(2, 0, 0, &[d.key()]);
        n.on_receive_tx(&t, 0.0, &mut out);
        assert!(n.mempool().is_pending(t.id));
        n.on_promise_due(t.key(), 4.0 * D, &mut out);
        assert!(n.is_blocked(t.id));
        n.on_receive_tx(&d, 5.0, &mut out);
        assert!(n.on_promise_due(d.key(), 5.0 + 4.0 * D, &mut out));
        let at = 5.0 + 4.0 * D;
        assert_eq!(n.promised(t.id).unwrap().1, at);
        assert_eq!(n.promise_order(), &[d.key(), t.key()]);
        let ready: Vec<_> = n.mempool().ready().map(|t| t.id).collect();
        assert_eq!(ready, vec![d.id, t.id]);
        n.check_invariants(at).unwrap();
    }

    #[test]
    fn dependency_chain_cascades() {
        let f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let a = tx(1, 0, 0, &[]);
        let b = tx(1, 1, 0, &[a.key()]);
        let c = tx(1, 2, 0, &[b.key()]);
        for t in [&c, &b] {
            n.on_receive_tx(t, 0.0, &mut out);
            n.on_promise_due(t.key(), 4.0 * D, &mut out);
        }
        assert!(n.promised(b.id).is_none());
        n.on_receive_tx(&a, 1.0, &mut out);
        n.on_promise_due(a.key(), 1.0 + 4.0 * D, &mut out);
        assert_eq!(n.promise_order(), &[a.key(), b.key(), c.key()]);
        let ready: Vec<_> = n.mempool().ready().map(|t| t.id).collect();
        assert_eq!(ready, vec![a.id, b.id, c.id]);
    }

    #[test]
    fn block_respects_dependency_order() {
        let mut f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        assert!(n.build_block(1.0).txs.is_empty());
        let d = tx(1, 0, 0, &[]);
        let t = tx(1, 1, 0, &[d.key()]);
        n.on_receive_tx(&d, 0.0, &mut out);
        n.on_promise_due(d.key(), 4.0 * D, &mut out);
        n.on_receive_tx(&t, 4.0, &mut out);
        let b = n.build_block(5.0);
        assert_eq!(b.txs.iter().map(|t| t.id).collect::<Vec<_>>(), vec![d.id, t.id]);

        // With d already buried, the next block carries t alone.
        let b1 = f.extend(&f.genesis.clone(), 3, 5.0, vec![d.clone()]);
        assert!(matches!(n.on_receive_chain(&b1, &f.store, 6.0, &mut out), ChainOutcome::Accepted { .. }));
        let b2 = n.build_block(7.0);
        assert_eq!(b2.txs.iter().map(|t| t.id).collect::<Vec<_>>(), vec![t.id]);
        assert_eq!(b2.height, 2);
        n.check_invariants(7.0).unwrap();
    }

    #[test]
    fn commit_needs_c_successors() {
        let mut f = Fixture::new();
        let mut n = f.node(params(26, RrsVariant::Progressive));
        let mut out = Outbox::default();
        let t = tx(1, 0, 0, &[]);
        let g = f.genesis.clone();
        let b1 = f.extend(&g, 1, 1.0, vec![t.clone()]);
        let tip = f.grow(&b1, 1, 11, 2.0);
        n.on_receive_chain(&tip, &f.store, 20.0, &mut out);
        assert_eq!(n.chain().height(), 12);
        assert!(n.committed(t.id).is_none());
        let tip = f.grow(&tip, 1, 1, 30.0);
        n.on_receive_chain(&tip, &f.store, 31.0, &mut out);
        let (_, at, hash) = n.committed(t.id).unwrap();
        assert_eq!((at, hash), (31.0, b1.hash));
        // Commit carried an immediate promise.
        assert_eq!(n.promised(t.id).unwrap().1, 31.0);
        n.check_invariants(31.0).unwrap();
    }

    #[test]
    fn short_conflicting_suffix_rejected_until_c() {
        let mut f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let t = tx(5, 0, 0, &[]);
        let t2 = tx(5, 0, 1, &[]);
        n.on_receive_tx(&t, 0.0, &mut out);
        // t' arrives in a chain after t has aged 2 steps: rrs(t) = C.
        let g = f.genesis.clone();
        let att = f.extend(&g, 0, 1.0, vec![t2.clone()]);
        let tip3 = f.grow(&att, 0, 3, 2.0);
        let now = 2.5 * D;
        assert_eq!(
            n.on_receive_chain(&tip3, &f.store, now, &mut out),
            ChainOutcome::Rejected(RejectReason::ReplacementSuffix)
        );
        assert_eq!(n.rrs(t.id, now), 12);
        assert_eq!(n.chain().height(), 0);
        // Suffix of exactly C is accepted; t' commits and t is discarded.
        let tip12 = f.grow(&tip3, 0, 9, 10.0);
        let now = 30.0;
        assert!(matches!(n.on_receive_chain(&tip12, &f.store, now, &mut out), ChainOutcome::Accepted { .. }));
        assert_eq!(n.committed(t2.id).unwrap().0.content_tag, 1);
        assert!(n.is_discarded(t.key()));
        assert_eq!(n.mempool().ready_len(), 0);
        n.check_invariants(now).unwrap();
    }

    #[test]
    fn progressive_suffix_of_one() {
        let mut f = Fixture::new();
        let mut n = f.node(params(26, RrsVariant::Progressive));
        let mut out = Outbox::default();
        let t = tx(5, 0, 0, &[]);
        n.on_receive_tx(&t, 0.0, &mut out);
        let g = f.genesis.clone();
        let att = f.extend(&g, 0, 1.0, vec![tx(5, 0, 1, &[])]);
        let now = 2.5 * D;
        assert_eq!(
            n.on_receive_chain(&att, &f.store, now, &mut out),
            ChainOutcome::Rejected(RejectReason::ReplacementSuffix)
        );
        // Rejected chain still froze t at age 2.
        assert_eq!(n.age(t.id, 100.0), Some(2));
        assert_eq!(n.rrs(t.id, 100.0), 1);
        let next = f.extend(&att, 3, 20.0, vec![]);
        assert!(matches!(n.on_receive_chain(&next, &f.store, 21.0, &mut out), ChainOutcome::Accepted { .. }));
        // t is back out of the mempool: its id is on chain.
        assert_eq!(n.mempool().ready_len(), 0);
        n.check_invariants(21.0).unwrap();
    }

    #[test]
    fn early_receipt_accepts_and_reorg_restores_variant() {
        let mut f = Fixture::new();
        let mut n = f.node(params(26, RrsVariant::Progressive));
        let mut out = Outbox::default();
        let t = tx(5, 0, 0, &[]);
        n.on_receive_tx(&t, 0.0, &mut out);
        let g = f.genesis.clone();
        let att = f.extend(&g, 0, 1.0, vec![tx(5, 0, 1, &[])]);
        assert!(matches!(n.on_receive_chain(&att, &f.store, 0.5, &mut out), ChainOutcome::Accepted { .. }));
        assert_eq!(n.mempool().ready_len(), 0);
        // A heavier honest fork evicts t' and puts t back in the mempool.
        let h1 = f.extend(&g, 2, 1.5, vec![]);
        let h2 = f.extend(&h1, 2, 2.0, vec![]);
        let outcome = n.on_receive_chain(&h2, &f.store, 2.5, &mut out);
        assert_eq!(outcome, ChainOutcome::Accepted { fork_height: 0, new_tip: h2.hash });
        assert_eq!(n.mempool().ready().map(|t| t.key()).collect::<Vec<_>>(), vec![t.key()]);
        n.check_invariants(2.5).unwrap();
    }

    #[test]
    fn missing_dependency_cuts_suffix() {
        let mut f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let d = tx(1, 0, 0, &[]);
        let t = tx(1, 1, 0, &[d.key()]);
        let g = f.genesis.clone();
        let b1 = f.extend(&g, 2, 1.0, vec![]);
        let b2 = f.extend(&b1, 2, 2.0, vec![t.clone()]);
        let outcome = n.on_receive_chain(&b2, &f.store, 3.0, &mut out);
        // The valid prefix is still heavier than genesis.
        assert_eq!(outcome, ChainOutcome::Accepted { fork_height: 0, new_tip: b1.hash });
        let b2 = f.extend(&g, 2, 2.0, vec![t.clone()]);
        assert_eq!(
            n.on_receive_chain(&b2, &f.store, 3.0, &mut out),
            ChainOutcome::Rejected(RejectReason::MissingDependency)
        );
    }

    #[test]
    fn equal_work_keeps_first() {
        let mut f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let g = f.genesis.clone();
        let a = f.extend(&g, 1, 1.0, vec![]);
        let b = f.extend(&g, 2, 1.0, vec![]);
        assert!(matches!(n.on_receive_chain(&a, &f.store, 1.5, &mut out), ChainOutcome::Accepted { .. }));
        assert_eq!(
            n.on_receive_chain(&b, &f.store, 1.6, &mut out),
            ChainOutcome::Rejected(RejectReason::NotHeavier)
        );
        assert_eq!(n.on_receive_chain(&a, &f.store, 1.7, &mut out), ChainOutcome::Rejected(RejectReason::Stale));
        assert_eq!(n.tip().hash, a.hash);
    }

    #[test]
    fn duplicate_in_chain_is_malformed() {
        let mut f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let t = tx(1, 0, 0, &[]);
        let g = f.genesis.clone();
        let b1 = f.extend(&g, 1, 1.0, vec![t.clone()]);
        let b2 = f.extend(&b1, 1, 2.0, vec![tx(1, 0, 1, &[])]);
        assert_eq!(
            n.on_receive_chain(&b2, &f.store, 3.0, &mut out),
            ChainOutcome::Rejected(RejectReason::Malformed)
        );
    }

    #[test]
    fn losing_dependency_discards_dependents() {
        let mut f = Fixture::new();
        let mut n = f.node(params(4, RrsVariant::Simple));
        let mut out = Outbox::default();
        let t1 = tx(0, 0, 0, &[]);
        let t1b = tx(0, 0, 1, &[]);
        let t2 = tx(3, 0, 0, &[t1.key()]);
        n.on_receive_tx(&t1, 0.0, &mut out);
        n.on_receive_tx(&t1b, 0.5, &mut out);
        n.on_receive_tx(&t2, 1.0, &mut out);
        n.on_promise_due(t2.key(), 1.0 + 4.0 * D, &mut out);
        assert!(n.is_blocked(t2.id));
        let g = f.genesis.clone();
        let b1 = f.extend(&g, 2, 10.0, vec![t1b.clone()]);
        let tip = f.grow(&b1, 2, 12, 11.0);
        n.on_receive_chain(&tip, &f.store, 40.0, &mut out);
        assert_eq!(n.committed(t1.id).unwrap().0.content_tag, 1);
        assert!(n.is_discarded(t1.key()));
        assert!(n.is_discarded(t2.key()));
        assert!(!n.is_blocked(t2.id));
        assert!(!n.mempool().contains(t2.id));
        let reasons: Vec<_> = out
            .records
            .iter()
            .filter(|r| r.kind == EventKind::Discard)
            .map(|r| (r.tx.unwrap(), r.detail))
            .collect();
        assert!(reasons.contains(&(t2.key(), Detail::Discard(DiscardReason::Dependent))));
        assert!(reasons.contains(&(t1.key(), Detail::Discard(DiscardReason::Conflict))));
        assert!(out.violations.is_empty());
        n.check_invariants(40.0).unwrap();
    }
}
