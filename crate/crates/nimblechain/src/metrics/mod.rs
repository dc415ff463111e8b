//! Run analysis computed purely from the event log and run metadata.

pub mod log;

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

pub use log::{
    AttackAction, Detail, DiscardReason, EventKind, EventLog, EventRecord, EventSink, LogError, NullSink,
};

use crate::config::SimConfig;
use crate::engine::{RunMeta, RunReport};
use crate::types::{BlockHash, ProcessId, TxKey, TxType};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub miner: ProcessId,
    pub produced_at: f64,
    pub height: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Stats::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            p90: q(0.9),
            max: v[v.len() - 1],
        }
    }
}

/// Latencies of (transaction, correct node) pairs, for correct issuers only.
#[derive(Debug, Clone, Default)]
pub struct Latencies {
    pub promise: Vec<f64>,
    pub commit: Vec<f64>,
    /// Pairs with no promise (commit) record by the end of the run.
    pub promise_censored: usize,
    pub commit_censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentSample {
    pub time: f64,
    /// Power of the largest group of correct nodes sharing a tip, in units
    /// of total mining power.
    pub largest: f64,
    pub fragments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Healing {
    pub release_time: f64,
    pub height: u64,
    pub healed_at: Option<f64>,
    /// Correct main-chain blocks at or above `height` produced between
    /// release and healing.
    pub generations: Option<usize>,
}

/// Everything derivable from one run's log.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub blocks: FxHashMap<BlockHash, BlockInfo>,
    pub main_chain: Vec<BlockHash>,
    pub final_chains: BTreeMap<ProcessId, Vec<BlockHash>>,
    pub issued: BTreeMap<TxKey, (f64, ProcessId, TxType)>,
    pub promises: FxHashMap<(TxKey, ProcessId), f64>,
    pub commits: FxHashMap<(TxKey, ProcessId), f64>,
    pub discards: FxHashMap<(TxKey, ProcessId), (f64, DiscardReason)>,
    pub fragments: Vec<FragmentSample>,
    /// Time-average of the largest fragment's power over the whole run.
    pub avg_largest_fragment: f64,
    pub healings: Vec<Healing>,
}

impl Analysis {
    pub fn new(log: &EventLog, meta: &RunMeta) -> Self {
        let n = meta.byzantine.len();
        let mut blocks = FxHashMap::default();
        let mut issued = BTreeMap::new();
        let mut promises = FxHashMap::default();
        let mut commits = FxHashMap::default();
        let mut discards = FxHashMap::default();
        let mut chains: Vec<Vec<BlockHash>> = vec![Vec::new(); n];
        let mut tips: Vec<Option<BlockHash>> = vec![None; n];
        let mut groups: FxHashMap<BlockHash, f64> = FxHashMap::default();
        let mut pending: Vec<(f64, u64)> = Vec::new();
        let mut heal_times: Vec<(f64, u64, Option<f64>)> = Vec::new();

        let mut fragments = Vec::new();
        let mut next_sample = 0.0;
        let mut area = 0.0;
        let mut last_t = 0.0;
        let largest = |g: &FxHashMap<BlockHash, f64>| g.values().copied().fold(0.0, f64::max);
        let sample = |g: &FxHashMap<BlockHash, f64>, t: f64| FragmentSample {
            time: t,
            largest: largest(g),
            fragments: g.len(),
        };

        let mut i = 0;
        let recs = &log.records;
        while i < recs.len() {
            // Process every record sharing one timestamp before sampling.
            let t = recs[i].time;
            while next_sample < t && next_sample <= meta.end_time {
                fragments.push(sample(&groups, next_sample));
                next_sample += meta.sample_period;
            }
            area += largest(&groups) * (t - last_t);
            last_t = t;
            let mut chain_changed = false;
            while i < recs.len() && recs[i].time == t {
                let r = &recs[i];
                i += 1;
                match r.kind {
                    EventKind::Issue => {
                        let ty = match r.detail {
                            Detail::Tx(ty) => ty,
                            _ => TxType::Contract,
                        };
                        issued.insert(r.tx.expect("issue has tx"), (r.time, r.node, ty));
                    }
                    EventKind::Promise => {
                        promises.insert((r.tx.expect("tx"), r.node), r.time);
                    }
                    EventKind::Commit => {
                        commits.insert((r.tx.expect("tx"), r.node), r.time);
                    }
                    EventKind::Discard => {
                        let reason = match r.detail {
                            Detail::Discard(d) => d,
                            _ => DiscardReason::Conflict,
                        };
                        discards.insert((r.tx.expect("tx"), r.node), (r.time, reason));
                    }
                    EventKind::BlockProduced => {
                        let (hash, height) = (r.block.expect("block"), r.height.expect("height"));
                        blocks.insert(hash, BlockInfo { miner: r.node, produced_at: r.time, height });
                    }
                    EventKind::BlockAccepted => {
                        let (hash, height) = (r.block.expect("block"), r.height.expect("height"));
                        let p = r.node.index();
                        let chain = &mut chains[p];
                        chain.truncate(height as usize);
                        chain.push(hash);
                        let power = meta.powers[p];
                        if let Some(old) = tips[p].replace(hash) {
                            if let Some(g) = groups.get_mut(&old) {
                                *g -= power;
                                if *g <= 1e-12 {
                                    groups.remove(&old);
                                }
                            }
                        }
                        *groups.entry(hash).or_insert(0.0) += power;
                        chain_changed = true;
                    }
                    EventKind::AttackStep => {
                        if r.detail == Detail::Attack(AttackAction::Release) {
                            pending.push((r.time, r.height.expect("release height")));
                        }
                    }
                    EventKind::Receive | EventKind::ChainSwitch => {}
                }
            }
            if chain_changed && !pending.is_empty() {
                pending.retain(|&(rt, h)| {
                    let agreed = agreed_at(&chains, meta, h);
                    if agreed {
                        heal_times.push((rt, h, Some(t)));
                    }
                    !agreed
                });
            }
        }
        while next_sample <= meta.end_time {
            fragments.push(sample(&groups, next_sample));
            next_sample += meta.sample_period;
        }
        area += largest(&groups) * (meta.end_time - last_t).max(0.0);
        heal_times.extend(pending.into_iter().map(|(rt, h)| (rt, h, None)));
        heal_times.sort_by(|a, b| a.0.total_cmp(&b.0));

        let final_chains: BTreeMap<ProcessId, Vec<BlockHash>> =
            meta.correct().map(|p| (p, chains[p.index()].clone())).collect();
        let main_chain = pick_main_chain(&final_chains);
        let healings = heal_times
            .into_iter()
            .map(|(release_time, height, healed_at)| {
                let generations = healed_at.map(|end| {
                    main_chain
                        .iter()
                        .skip(height as usize)
                        .filter_map(|h| blocks.get(h))
                        .filter(|b| meta.is_correct(b.miner) && b.produced_at >= release_time && b.produced_at <= end)
                        .count()
                });
                Healing { release_time, height, healed_at, generations }
            })
            .collect();

        Analysis {
            blocks,
            main_chain,
            final_chains,
            issued,
            promises,
            commits,
            discards,
            fragments,
            avg_largest_fragment: if meta.end_time > 0.0 { area / meta.end_time } else { largest(&groups) },
            healings,
        }
    }

    /// Promise and commit latencies of transactions issued by correct
    /// processes, optionally restricted to one type.
    pub fn latencies(&self, meta: &RunMeta, ty: Option<TxType>) -> Latencies {
        let mut out = Latencies::default();
        for (&key, &(t0, issuer, t)) in &self.issued {
            if !meta.is_correct(issuer) || ty.is_some_and(|want| want != t) {
                continue;
            }
            for p in meta.correct() {
                match self.promises.get(&(key, p)) {
                    Some(&tp) => out.promise.push(tp - t0),
                    None => out.promise_censored += 1,
                }
                match self.commits.get(&(key, p)) {
                    Some(&tc) => out.commit.push(tc - t0),
                    None => out.commit_censored += 1,
                }
            }
        }
        out
    }

    pub fn blocks_produced(&self) -> usize {
        self.blocks.len()
    }

    /// Main-chain blocks over all produced blocks (every block has unit work).
    pub fn mpu(&self) -> f64 {
        if self.blocks.is_empty() {
            return 1.0;
        }
        self.main_chain.iter().filter(|h| self.blocks.contains_key(h)).count() as f64 / self.blocks.len() as f64
    }

    /// Main-chain blocks of `miner` over all produced blocks.
    pub fn fairness(&self, miner: ProcessId) -> f64 {
        if self.blocks.is_empty() {
            return 0.0;
        }
        let mine = self.main_chain.iter().filter(|h| self.blocks.get(h).is_some_and(|b| b.miner == miner)).count();
        mine as f64 / self.blocks.len() as f64
    }

    /// Correct power minus the time-averaged largest fragment, in units of
    /// total power.
    pub fn fragment_reduction(&self, meta: &RunMeta) -> f64 {
        meta.correct_power() - self.avg_largest_fragment
    }
}

fn agreed_at(chains: &[Vec<BlockHash>], meta: &RunMeta, h: u64) -> bool {
    let mut seen = None;
    for p in meta.correct() {
        let Some(&b) = chains[p.index()].get(h as usize) else { return false };
        if *seen.get_or_insert(b) != b {
            return false;
        }
    }
    true
}

/// Longest final chain; ties go to the most common tip, then the lowest hash.
pub fn pick_main_chain(chains: &BTreeMap<ProcessId, Vec<BlockHash>>) -> Vec<BlockHash> {
    let mut votes: BTreeMap<(usize, BlockHash), (usize, &Vec<BlockHash>)> = BTreeMap::new();
    for c in chains.values() {
        if let Some(&tip) = c.last() {
            votes.entry((c.len(), tip)).or_insert((0, c)).0 += 1;
        }
    }
    votes
        .into_iter()
        .max_by(|((la, ha), (va, _)), ((lb, hb), (vb, _))| la.cmp(lb).then(va.cmp(vb)).then(hb.cmp(ha)))
        .map(|(_, (_, c))| c.clone())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub config: SimConfig,
    pub events_processed: u64,
    pub blocks_produced: usize,
    pub main_chain_length: usize,
    pub transactions_issued: usize,
    pub promise_latency: Stats,
    pub commit_latency: Stats,
    pub transfer_promise_latency: Stats,
    pub transfer_commit_latency: Stats,
    pub promise_censored: usize,
    pub commit_censored: usize,
    pub mpu: f64,
    pub reference_miner: u32,
    pub fairness: f64,
    pub avg_largest_fragment: f64,
    pub fragment_reduction: f64,
    pub healings: Vec<Healing>,
    pub violations: usize,
}

impl Summary {
    pub fn new(cfg: &SimConfig, log: &EventLog, report: &RunReport) -> Self {
        let meta = &report.meta;
        let a = Analysis::new(log, meta);
        let all = a.latencies(meta, None);
        let transfers = a.latencies(meta, Some(TxType::Transfer));
        Summary {
            seed: meta.seed,
            config: cfg.clone(),
            events_processed: report.events_processed,
            blocks_produced: a.blocks_produced(),
            main_chain_length: a.main_chain.len().saturating_sub(1),
            transactions_issued: a.issued.len(),
            promise_latency: Stats::of(&all.promise),
            commit_latency: Stats::of(&all.commit),
            transfer_promise_latency: Stats::of(&transfers.promise),
            transfer_commit_latency: Stats::of(&transfers.commit),
            promise_censored: all.promise_censored,
            commit_censored: all.commit_censored,
            mpu: a.mpu(),
            reference_miner: meta.reference_miner,
            fairness: a.fairness(ProcessId(meta.reference_miner)),
            avg_largest_fragment: a.avg_largest_fragment,
            fragment_reduction: a.fragment_reduction(meta),
            healings: a.healings,
            violations: report.violations.len(),
        }
    }
}
