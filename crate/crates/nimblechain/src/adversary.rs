//! Byzantine process driving plain double spends and fragmentation attacks.
//!
//! Fragmentation: while an attempt is open the attacker keeps issuing
//! candidate transfers `t`, delivered late (D-ε) to an early group and almost
//! immediately (ε) to the rest. On its next mining win it picks the candidate
//! whose age splits the groups across an RRS step, puts the conflicting
//! variant `t'` in a block and releases it with the opposite delays. The early
//! group sees a young `t` and accepts; the late group sees an older `t` and
//! rejects until the malicious chain carries the required suffix.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RrsVariant, Scenario, SimConfig};
use crate::engine::Delays;
use crate::metrics::log::{AttackAction, Detail, EventKind, EventRecord};
use crate::types::{AccountId, Block, BlockStore, Payload, ProcessId, Transaction, TxId};

#[derive(Debug, Clone)]
pub enum AttackEvent {
    /// Open a fragmentation attempt.
    Open,
    /// Issue the next fragmentation candidate.
    Candidate,
    /// Issue the first half of a plain double spend.
    DoubleSpend,
    /// Issue the second half; `first` marks processes that got `t` early.
    SecondHalf { tx: Arc<Transaction>, first: Arc<Vec<bool>> },
}

/// What the engine should do on the attacker's behalf.
#[derive(Debug, Clone)]
pub enum Action {
    Record(EventRecord),
    /// Log and broadcast a transaction.
    Issue { tx: Arc<Transaction>, delays: Delays },
    /// Log a transaction that only travels inside a block.
    Register(Arc<Transaction>),
    Publish { sender: ProcessId, tip: Arc<Block>, delays: Delays },
    Schedule { at: f64, step: AttackEvent },
}

#[derive(Debug, Clone)]
struct Candidate {
    tx: Arc<Transaction>,
    issued: f64,
}

#[derive(Debug)]
pub struct Adversary {
    pid: ProcessId,
    scenario: Scenario,
    variant: RrsVariant,
    n: usize,
    powers: Vec<f64>,
    max_delay: f64,
    base_delay: f64,
    ageing_threshold: u32,
    hash_seed: u64,
    frag_ratio: f64,
    x_power: f64,
    burst: bool,
    gap: f64,
    ds_offset: Option<f64>,
    duration: f64,
    rng: ChaCha8Rng,
    /// Heaviest public chain seen; plain blocks and attack blocks extend it.
    public_tip: Arc<Block>,
    next_seqno: u64,
    open: bool,
    early: Arc<Vec<bool>>,
    candidates: VecDeque<Candidate>,
    awaiting_heal: Option<u64>,
    attacks: usize,
}

impl Adversary {
    pub fn new(cfg: &SimConfig, pid: ProcessId, genesis: Arc<Block>, powers: Vec<f64>, rng: ChaCha8Rng) -> Self {
        Adversary {
            pid,
            scenario: cfg.scenario,
            variant: cfg.rrs_variant,
            n: cfg.n_processes,
            powers,
            max_delay: cfg.max_delay,
            base_delay: cfg.base_delay,
            ageing_threshold: cfg.ageing_threshold,
            hash_seed: cfg.seed,
            frag_ratio: cfg.attack.frag_ratio,
            x_power: cfg.attack.x_power,
            burst: cfg.attack.burst,
            gap: cfg.inter_attack_gap(),
            ds_offset: cfg.attack.double_spend_offset,
            duration: cfg.duration,
            rng,
            public_tip: genesis,
            next_seqno: 0,
            open: false,
            early: Arc::new(Vec::new()),
            candidates: VecDeque::new(),
            awaiting_heal: None,
            attacks: 0,
        }
    }

    pub fn pid(&self) -> ProcessId {
        self.pid
    }

    /// Height of the last released attack block while it has not healed.
    pub fn awaiting_heal(&self) -> Option<u64> {
        self.awaiting_heal
    }

    pub fn attacks(&self) -> usize {
        self.attacks
    }

    fn eps(&self) -> f64 {
        self.max_delay / 96.0
    }

    /// Candidate age at release that puts the early group at an even age
    /// and the late group two steps further, straddling an RRS step.
    fn target_age(&self) -> f64 {
        match self.variant {
            RrsVariant::Progressive => 1.5 * self.max_delay,
            RrsVariant::Simple => (self.ageing_threshold as f64 - 1.5) * self.max_delay,
        }
    }

    fn schedule(at: f64, step: AttackEvent) -> Action {
        Action::Schedule { at, step }
    }

    fn record(&self, now: f64, action: AttackAction) -> EventRecord {
        EventRecord {
            time: now,
            node: self.pid,
            kind: EventKind::AttackStep,
            tx: None,
            block: None,
            height: None,
            detail: Detail::Attack(action),
        }
    }

    pub fn start(&mut self) -> Vec<Action> {
        match self.scenario {
            Scenario::Fragmentation if self.gap < self.duration => {
                vec![Self::schedule(self.gap, AttackEvent::Open)]
            }
            Scenario::DoubleSpend if self.gap < self.duration => {
                vec![Self::schedule(self.gap, AttackEvent::DoubleSpend)]
            }
            _ => Vec::new(),
        }
    }

    fn random_correct(&mut self) -> u32 {
        loop {
            let a = self.rng.random_range(0..self.n as u32);
            if a != self.pid.0 {
                return a;
            }
        }
    }

    /// Two conflicting transfers of one unit to different correct accounts.
    fn conflicting_pair(&mut self, now: f64) -> (Transaction, Transaction) {
        let id = TxId { issuer: self.pid, seqno: self.next_seqno };
        self.next_seqno += 1;
        let to = self.random_correct();
        let mut other = self.random_correct();
        if self.n > 2 {
            while other == to {
                other = self.random_correct();
            }
        }
        let make = |to: u32, tag: u32| Transaction {
            id,
            payload: Payload::Transfer { from: AccountId::of(self.pid), to: AccountId(to), amount: 1 },
            deps: BTreeSet::new(),
            content_tag: tag,
            issue_time: now,
        };
        (make(to, 0), make(other, 1))
    }

    /// Picks the early group: correct processes holding about `frag_ratio`
    /// of the correct power, largest miners first, ties in random order.
    fn partition(&mut self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.n).filter(|&i| i != self.pid.index()).collect();
        order.shuffle(&mut self.rng);
        order.sort_by(|&a, &b| self.powers[b].total_cmp(&self.powers[a]));
        let total: f64 = order.iter().map(|&i| self.powers[i]).sum();
        let target = self.frag_ratio * total;
        let mut early = vec![false; self.n];
        let mut acc = 0.0;
        for i in order {
            if acc + self.powers[i] <= target + 1e-12 {
                acc += self.powers[i];
                early[i] = true;
            }
        }
        early
    }

    pub fn on_step(&mut self, step: AttackEvent, now: f64, _store: &mut BlockStore, duration: f64) -> Vec<Action> {
        match step {
            AttackEvent::Open => {
                if now >= duration {
                    return Vec::new();
                }
                self.open = true;
                self.early = Arc::new(self.partition());
                self.candidates.clear();
                vec![Action::Record(self.record(now, AttackAction::Open)), Self::schedule(now, AttackEvent::Candidate)]
            }
            AttackEvent::Candidate => {
                if !self.open || now >= duration {
                    return Vec::new();
                }
                let (t, _) = self.conflicting_pair(now);
                let eps = self.eps();
                let delays = self
                    .early
                    .iter()
                    .map(|&e| if e { self.max_delay - eps } else { eps })
                    .collect();
                let tx = Arc::new(t);
                self.candidates.push_back(Candidate { tx: tx.clone(), issued: now });
                let horizon = self.target_age() + self.max_delay;
                while self.candidates.front().is_some_and(|c| now - c.issued > horizon) {
                    self.candidates.pop_front();
                }
                vec![
                    Action::Issue { tx, delays: Delays::PerRecipient(delays) },
                    Self::schedule(now + self.max_delay / 2.0, AttackEvent::Candidate),
                ]
            }
            AttackEvent::DoubleSpend => {
                if now >= duration {
                    return Vec::new();
                }
                self.attacks += 1;
                let (t, t2) = self.conflicting_pair(now);
                let mut order: Vec<usize> = (0..self.n).collect();
                order.shuffle(&mut self.rng);
                let mut first = vec![false; self.n];
                for &i in &order[..self.n / 2] {
                    first[i] = true;
                }
                let delays = self.split_delays(&first);
                let offset = match self.ds_offset {
                    Some(o) => o,
                    None => self.rng.random_range(0.0..=(self.ageing_threshold as f64 + 2.0) * self.max_delay),
                };
                let tx = Arc::new(t);
                let mut actions = vec![
                    Action::Record(EventRecord { tx: Some(tx.key()), ..self.record(now, AttackAction::DoubleSpend) }),
                    Action::Issue { tx, delays: Delays::PerRecipient(delays) },
                    Self::schedule(
                        now + offset,
                        AttackEvent::SecondHalf { tx: Arc::new(t2), first: Arc::new(first) },
                    ),
                ];
                if now + self.gap < duration {
                    actions.push(Self::schedule(now + self.gap, AttackEvent::DoubleSpend));
                }
                actions
            }
            AttackEvent::SecondHalf { tx, first } => {
                let inverted: Vec<bool> = first.iter().map(|f| !f).collect();
                let delays = self.split_delays(&inverted);
                vec![Action::Issue { tx, delays: Delays::PerRecipient(delays) }]
            }
        }
    }

    /// Fast delays (at most D/2) for `fast` processes, slow ones for the rest.
    fn split_delays(&mut self, fast: &[bool]) -> Vec<f64> {
        let half = self.max_delay / 2.0;
        let lo = self.base_delay.min(half);
        fast.iter()
            .map(|&f| {
                if f {
                    self.rng.random_range(lo..=half)
                } else {
                    self.rng.random_range(half..=self.max_delay)
                }
            })
            .collect()
    }

    pub fn on_chain(&mut self, tip: &Arc<Block>, _now: f64) -> Vec<Action> {
        if tip.total_work > self.public_tip.total_work {
            self.public_tip = tip.clone();
        }
        Vec::new()
    }

    pub fn on_mine_win(&mut self, now: f64, store: &mut BlockStore, duration: f64) -> Vec<Action> {
        let attack = self.scenario == Scenario::Fragmentation
            && self.open
            && now < duration
            && self.rng.random::<f64>() < self.x_power;
        if attack {
            if let Some(c) = self.pick_candidate(now) {
                return self.release(c, now, store);
            }
        }
        let block = store.insert(Block::child(&self.public_tip, self.pid, now, Vec::new(), self.hash_seed));
        self.public_tip = block.clone();
        vec![
            Action::Record(EventRecord::block(now, self.pid, EventKind::BlockProduced, block.hash, block.height)),
            Action::Publish { sender: self.pid, tip: block, delays: Delays::Default },
        ]
    }

    fn pick_candidate(&mut self, now: f64) -> Option<Candidate> {
        let target = self.target_age();
        let slack = self.max_delay / 2.0 - 2.0 * self.eps();
        let best = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (now - c.issued - target).abs()))
            .filter(|&(_, dist)| dist < slack)
            .min_by(|a, b| a.1.total_cmp(&b.1))?
            .0;
        self.candidates.remove(best)
    }

    fn release(&mut self, c: Candidate, now: f64, store: &mut BlockStore) -> Vec<Action> {
        self.attacks += 1;
        self.open = false;
        self.candidates.clear();
        let t = &c.tx;
        let Payload::Transfer { from, to, amount } = t.payload else { unreachable!("candidates are transfers") };
        let mut other = self.random_correct();
        while other == to.0 && self.n > 2 {
            other = self.random_correct();
        }
        let t2 = Arc::new(Transaction {
            payload: Payload::Transfer { from, to: AccountId(other), amount },
            content_tag: 1,
            issue_time: now,
            ..(**t).clone()
        });
        let block = store.insert(Block::child(&self.public_tip, self.pid, now, vec![t2.clone()], self.hash_seed));
        self.public_tip = block.clone();
        let eps = self.eps();
        let delays = self.early.iter().map(|&e| if e { eps } else { self.max_delay - eps }).collect();
        let mut actions = vec![
            Action::Register(t2.clone()),
            Action::Record(EventRecord::block(now, self.pid, EventKind::BlockProduced, block.hash, block.height)),
            Action::Record(EventRecord {
                tx: Some(t2.key()),
                block: Some(block.hash),
                height: Some(block.height),
                ..self.record(now, AttackAction::Release)
            }),
            Action::Publish { sender: self.pid, tip: block.clone(), delays: Delays::PerRecipient(delays) },
        ];
        if self.burst {
            actions.push(Self::schedule(now + self.gap, AttackEvent::Open));
        } else {
            self.awaiting_heal = Some(block.height);
        }
        actions
    }

    /// Called by the engine once all correct processes agree at the attacked height.
    pub fn on_healed(&mut self, now: f64) -> Vec<Action> {
        let Some(h) = self.awaiting_heal.take() else { return Vec::new() };
        let mut actions = vec![Action::Record(EventRecord { height: Some(h), ..self.record(now, AttackAction::Healed) })];
        if now + self.gap < self.duration {
            actions.push(Self::schedule(now + self.gap, AttackEvent::Open));
        }
        actions
    }
}
