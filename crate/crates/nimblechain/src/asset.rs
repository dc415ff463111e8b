//! Promise-based asset transfer: balances read from the promised log and
//! transfer issuance with causal dependencies.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

pub use crate::types::AccountId;
use crate::types::{Payload, ProcessId, Transaction, TxId, TxKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssetError {
    #[error("insufficient funds in {account:?}: available {available}, requested {amount}")]
    InsufficientFunds { account: AccountId, available: u64, amount: u64 },
    #[error("{caller} does not own {account:?}")]
    NotOwner { caller: ProcessId, account: AccountId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replay {
    Applied,
    /// The transfer would overdraw its source at this point of the replay.
    Skipped,
    /// Not a transfer.
    Ignored,
}

/// Balances obtained by replaying promised transfers in local promise order.
#[derive(Debug, Clone, Serialize)]
pub struct AssetView {
    balances: BTreeMap<AccountId, u64>,
    genesis_total: u128,
    outgoing_history: BTreeMap<AccountId, Vec<TxId>>,
    promised_incoming: BTreeMap<AccountId, BTreeSet<TxId>>,
    skipped: Vec<TxKey>,
}

impl AssetView {
    /// One funded account per process plus the faucet.
    pub fn genesis(n_processes: usize, balance: u64) -> Self {
        let balances: BTreeMap<_, _> = (0..n_processes as u32)
            .map(AccountId)
            .chain([AccountId::FAUCET])
            .map(|a| (a, balance))
            .collect();
        let genesis_total = balances.values().map(|&b| b as u128).sum();
        AssetView {
            balances,
            genesis_total,
            outgoing_history: BTreeMap::new(),
            promised_incoming: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    /// Unknown accounts read as zero.
    pub fn read(&self, a: AccountId) -> u64 {
        self.balances.get(&a).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum()
    }

    pub fn genesis_total(&self) -> u128 {
        self.genesis_total
    }

    pub fn balances(&self) -> &BTreeMap<AccountId, u64> {
        &self.balances
    }

    pub fn outgoing_history(&self, a: AccountId) -> &[TxId] {
        self.outgoing_history.get(&a).map_or(&[], Vec::as_slice)
    }

    pub fn promised_incoming(&self, a: AccountId) -> Option<&BTreeSet<TxId>> {
        self.promised_incoming.get(&a)
    }

    pub fn skipped(&self) -> &[TxKey] {
        &self.skipped
    }

    /// Applies the next promised transaction.
    pub fn apply(&mut self, tx: &Transaction) -> Replay {
        let Payload::Transfer { from, to, amount } = tx.payload else {
            return Replay::Ignored;
        };
        let have = self.read(from);
        if have < amount || !self.balances.contains_key(&from) || !self.balances.contains_key(&to) {
            self.skipped.push(tx.key());
            return Replay::Skipped;
        }
        *self.balances.get_mut(&from).expect("checked above") -= amount;
        *self.balances.get_mut(&to).expect("checked above") += amount;
        self.outgoing_history.entry(from).or_default().push(tx.id);
        self.promised_incoming.entry(to).or_default().insert(tx.id);
        Replay::Applied
    }
}

/// Issuer-side bookkeeping of one process: sequence numbers and the
/// dependency set for its next transaction.
#[derive(Debug, Clone)]
pub struct Wallet {
    owner: ProcessId,
    next_seqno: u64,
    last_issued: Option<TxKey>,
    last_outgoing: Option<TxKey>,
    /// Incoming transfers promised here since the last outgoing one.
    fresh_incoming: BTreeSet<TxKey>,
    /// Own transfers issued but not yet promised locally.
    in_flight: BTreeMap<TxId, u64>,
}

impl Wallet {
    pub fn new(owner: ProcessId) -> Self {
        Wallet {
            owner,
            next_seqno: 0,
            last_issued: None,
            last_outgoing: None,
            fresh_incoming: BTreeSet::new(),
            in_flight: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> ProcessId {
        self.owner
    }

    pub fn account(&self) -> AccountId {
        AccountId::of(self.owner)
    }

    pub fn next_seqno(&self) -> u64 {
        self.next_seqno
    }

    /// Promised balance minus own transfers that are still ageing.
    pub fn available(&self, view: &AssetView) -> u64 {
        view.read(self.account()).saturating_sub(self.in_flight.values().sum())
    }

    /// Issues `from -> to` for `amount`. Dependencies cover the previous
    /// transaction of this issuer, the previous outgoing transfer, and every
    /// incoming transfer promised since then; earlier history is reachable
    /// transitively through those.
    pub fn transfer(
        &mut self,
        caller: ProcessId,
        view: &AssetView,
        from: AccountId,
        to: AccountId,
        amount: u64,
        now: f64,
    ) -> Result<Transaction, AssetError> {
        if caller != self.owner || from != self.account() {
            return Err(AssetError::NotOwner { caller, account: from });
        }
        let available = self.available(view);
        if available < amount {
            return Err(AssetError::InsufficientFunds { account: from, available, amount });
        }
        let mut deps: BTreeSet<TxKey> = std::mem::take(&mut self.fresh_incoming);
        deps.extend(self.last_issued);
        deps.extend(self.last_outgoing);
        let tx = self.make(Payload::Transfer { from, to, amount }, deps, now);
        self.last_outgoing = Some(tx.key());
        self.in_flight.insert(tx.id, amount);
        Ok(tx)
    }

    /// Issues an opaque contract call ordered after this issuer's previous transaction.
    pub fn contract(&mut self, tag: u32, now: f64) -> Transaction {
        let deps = self.last_issued.into_iter().collect();
        self.make(Payload::Contract(tag), deps, now)
    }

    fn make(&mut self, payload: Payload, deps: BTreeSet<TxKey>, now: f64) -> Transaction {
        let tx = Transaction {
            id: TxId { issuer: self.owner, seqno: self.next_seqno },
            payload,
            deps,
            content_tag: 0,
            issue_time: now,
        };
        self.next_seqno += 1;
        self.last_issued = Some(tx.key());
        tx
    }

    /// Hook run when the owner's node promises `tx`.
    pub fn on_promised(&mut self, tx: &Transaction) {
        if let Payload::Transfer { from, to, .. } = tx.payload {
            if from == self.account() && tx.id.issuer == self.owner {
                self.in_flight.remove(&tx.id);
            }
            if to == self.account() && from != self.account() {
                self.fresh_incoming.insert(tx.key());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(balance: u64) -> AssetView {
        AssetView::genesis(3, balance)
    }

    #[test]
    fn first_transfer_has_no_deps() {
        let mut v = view(100);
        let mut w = Wallet::new(ProcessId(0));
        let t = w.transfer(ProcessId(0), &v, AccountId(0), AccountId(1), 30, 0.0).unwrap();
        assert!(t.deps.is_empty());
        assert_eq!(w.available(&v), 70);
        assert_eq!(v.read(AccountId(0)), 100);
        assert_eq!(v.apply(&t), Replay::Applied);
        w.on_promised(&t);
        assert_eq!(v.read(AccountId(0)), 70);
        assert_eq!(v.read(AccountId(1)), 130);
        assert_eq!(w.available(&v), 70);
        assert_eq!(v.total(), v.genesis_total());
    }

    #[test]
    fn overdraw_rejected() {
        let v = view(100);
        let mut w = Wallet::new(ProcessId(0));
        let e = w.transfer(ProcessId(0), &v, AccountId(0), AccountId(1), 200, 0.0).unwrap_err();
        assert!(matches!(e, AssetError::InsufficientFunds { available: 100, amount: 200, .. }));
        // In-flight transfers count against the balance.
        w.transfer(ProcessId(0), &v, AccountId(0), AccountId(1), 60, 0.0).unwrap();
        assert!(w.transfer(ProcessId(0), &v, AccountId(0), AccountId(1), 60, 1.0).is_err());
    }

    #[test]
    fn only_owner_withdraws() {
        let v = view(100);
        let mut w = Wallet::new(ProcessId(0));
        let e = w.transfer(ProcessId(1), &v, AccountId(0), AccountId(1), 1, 0.0).unwrap_err();
        assert!(matches!(e, AssetError::NotOwner { .. }));
        let e = w.transfer(ProcessId(0), &v, AccountId(2), AccountId(1), 1, 0.0).unwrap_err();
        assert!(matches!(e, AssetError::NotOwner { .. }));
    }

    #[test]
    fn second_transfer_depends_on_first_and_incoming() {
        let mut v = view(100);
        let mut a = Wallet::new(ProcessId(0));
        let mut b = Wallet::new(ProcessId(1));
        let t1 = a.transfer(ProcessId(0), &v, AccountId(0), AccountId(2), 10, 0.0).unwrap();
        let inc = b.transfer(ProcessId(1), &v, AccountId(1), AccountId(0), 5, 0.0).unwrap();
        v.apply(&inc);
        a.on_promised(&inc);
        let c = a.contract(9, 1.0);
        assert_eq!(c.deps, BTreeSet::from([t1.key()]));
        let t2 = a.transfer(ProcessId(0), &v, AccountId(0), AccountId(2), 10, 2.0).unwrap();
        assert!(t2.deps.contains(&t1.key()));
        assert!(t2.deps.contains(&inc.key()));
        assert!(t2.deps.contains(&c.key()));
        assert_eq!(t2.id.seqno, 2);
        // Incoming already referenced is not repeated.
        let t3 = a.transfer(ProcessId(0), &v, AccountId(0), AccountId(2), 1, 3.0).unwrap();
        assert_eq!(t3.deps, BTreeSet::from([t2.key()]));
    }

    #[test]
    fn replay_skips_overdraws() {
        let mut v = view(10);
        let t = Transaction {
            id: TxId::new(0, 0),
            payload: Payload::Transfer { from: AccountId(0), to: AccountId(1), amount: 11 },
            deps: BTreeSet::new(),
            content_tag: 0,
            issue_time: 0.0,
        };
        assert_eq!(v.apply(&t), Replay::Skipped);
        assert_eq!(v.skipped(), &[t.key()]);
        assert_eq!(v.read(AccountId(0)), 10);
        assert_eq!(v.read(AccountId(42)), 0);
        assert_eq!(v.total(), 40);
    }
}
