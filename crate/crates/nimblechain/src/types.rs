//! Identifiers, transactions, blocks and chains shared by every other module.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

/// Index of a simulated process. Mining power and the byzantine flag live in
/// [`ProcessInfo`]; the id itself is the small integer carried in messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessInfo {
    pub id: ProcessId,
    pub mining_power: f64,
    pub byzantine: bool,
}

/// Account holding asset units. Every process owns exactly one account; the
/// faucet is a genesis-only account nobody can spend from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccountId(pub u32);

impl AccountId {
    pub const FAUCET: AccountId = AccountId(u32::MAX);

    pub fn of(owner: ProcessId) -> Self {
        AccountId(owner.0)
    }

    pub fn owner(self) -> Option<ProcessId> {
        (self != Self::FAUCET).then_some(ProcessId(self.0))
    }
}

/// The conflict key: two transactions with the same id but different content
/// are a double spend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId {
    pub issuer: ProcessId,
    pub seqno: u64,
}

impl TxId {
    pub fn new(issuer: u32, seqno: u64) -> Self {
        TxId { issuer: ProcessId(issuer), seqno }
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.issuer, self.seqno)
    }
}

/// Identity of one concrete variant: the id plus its content tag.
///
/// Dependencies name variants rather than bare ids, so a transaction that
/// depended on the losing side of a double spend can be told apart from one
/// that depended on the winner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxKey {
    pub id: TxId,
    pub tag: u32,
}

impl fmt::Display for TxKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.id, self.tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Payload {
    Transfer { from: AccountId, to: AccountId, amount: u64 },
    /// Opaque smart-contract call; only needs to commit.
    Contract(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxType {
    Transfer,
    Contract,
}

impl TxType {
    pub fn as_str(self) -> &'static str {
        match self {
            TxType::Transfer => "transfer",
            TxType::Contract => "contract",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub payload: Payload,
    pub deps: BTreeSet<TxKey>,
    pub content_tag: u32,
    pub issue_time: f64,
}

impl Transaction {
    pub fn key(&self) -> TxKey {
        TxKey { id: self.id, tag: self.content_tag }
    }

    pub fn tx_type(&self) -> TxType {
        match self.payload {
            Payload::Transfer { .. } => TxType::Transfer,
            Payload::Contract(_) => TxType::Contract,
        }
    }

    /// A transaction never lists itself (any variant of its id) as a dependency.
    pub fn well_formed(&self) -> bool {
        self.deps.iter().all(|d| d.id != self.id)
    }
}

/// Same id and same content tag means the same transaction.
impl PartialEq for Transaction {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Transaction {}

/// True iff `t` and `u` are distinct variants of the same id.
pub fn conflicts(t: &Transaction, u: &Transaction) -> bool {
    t.id == u.id && t.content_tag != u.content_tag
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockHash(pub u64);

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub hash: BlockHash,
    /// `None` only for genesis.
    pub parent: Option<BlockHash>,
    pub height: u64,
    pub txs: Vec<Arc<Transaction>>,
    /// `None` only for genesis.
    pub miner: Option<ProcessId>,
    pub work: f64,
    pub produced_at: f64,
    /// Work of the whole chain ending at this block.
    pub total_work: f64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

struct Fnv(u64);

impl Fnv {
    fn new(seed: u64) -> Self {
        let mut h = Fnv(FNV_OFFSET);
        h.word(seed);
        h
    }

    fn word(&mut self, w: u64) {
        for b in w.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }
}

impl Block {
    pub fn genesis(seed: u64) -> Self {
        let mut h = Fnv::new(seed);
        h.word(u64::MAX);
        Block {
            hash: BlockHash(h.0),
            parent: None,
            height: 0,
            txs: Vec::new(),
            miner: None,
            work: 0.0,
            produced_at: 0.0,
            total_work: 0.0,
        }
    }

    /// Builds a child of `parent` with unit work. The hash is a seeded
    /// deterministic digest of parent, miner, production time and tx list.
    pub fn child(
        parent: &Block,
        miner: ProcessId,
        produced_at: f64,
        txs: Vec<Arc<Transaction>>,
        seed: u64,
    ) -> Self {
        let mut h = Fnv::new(seed);
        h.word(parent.hash.0);
        h.word(miner.0 as u64);
        h.word(produced_at.to_bits());
        for t in &txs {
            h.word(t.id.issuer.0 as u64);
            h.word(t.id.seqno);
            h.word(t.content_tag as u64);
        }
        let work = 1.0;
        Block {
            hash: BlockHash(h.0),
            parent: Some(parent.hash),
            height: parent.height + 1,
            txs,
            miner: Some(miner),
            work,
            produced_at,
            total_work: parent.total_work + work,
        }
    }
}

/// Every block ever produced in a run, shared by all nodes. Blocks are
/// immutable once inserted, so broadcasting a chain only needs its tip.
#[derive(Debug, Default)]
pub struct BlockStore {
    blocks: FxHashMap<BlockHash, Arc<Block>>,
}

impl BlockStore {
    pub fn insert(&mut self, block: Block) -> Arc<Block> {
        let b = Arc::new(block);
        let prev = self.blocks.insert(b.hash, b.clone());
        debug_assert!(prev.is_none(), "block hash collision at {}", b.hash);
        b
    }

    pub fn get(&self, hash: BlockHash) -> Option<&Arc<Block>> {
        self.blocks.get(&hash)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Materialises the chain ending at `tip`.
    pub fn chain_to(&self, tip: BlockHash) -> Option<Chain> {
        let mut blocks = Vec::new();
        let mut cur = Some(tip);
        while let Some(h) = cur {
            let b = self.get(h)?;
            cur = b.parent;
            blocks.push(b.clone());
        }
        blocks.reverse();
        Some(Chain { blocks })
    }
}

/// Blocks from genesis to tip.
#[derive(Debug, Clone)]
pub struct Chain {
    blocks: Vec<Arc<Block>>,
}

impl Chain {
    pub fn new(genesis: Arc<Block>) -> Self {
        debug_assert_eq!(genesis.height, 0);
        Chain { blocks: vec![genesis] }
    }

    /// Builds a chain from an explicit block list, checking linkage and heights.
    pub fn from_blocks(blocks: Vec<Arc<Block>>) -> Option<Self> {
        let first = blocks.first()?;
        if first.height != 0 || first.parent.is_some() {
            return None;
        }
        let linked = blocks.windows(2).all(|w| {
            w[1].parent == Some(w[0].hash) && w[1].height == w[0].height + 1
        });
        linked.then_some(Chain { blocks })
    }

    pub fn blocks(&self) -> &[Arc<Block>] {
        &self.blocks
    }

    pub fn tip(&self) -> &Arc<Block> {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn total_work(&self) -> f64 {
        self.tip().total_work
    }

    pub fn at(&self, height: u64) -> Option<&Arc<Block>> {
        self.blocks.get(height as usize)
    }

    pub fn contains(&self, b: &Block) -> bool {
        self.at(b.height).is_some_and(|x| x.hash == b.hash)
    }

    pub(crate) fn truncate(&mut self, height: u64) -> Vec<Arc<Block>> {
        self.blocks.split_off(height as usize + 1)
    }

    pub(crate) fn push(&mut self, b: Arc<Block>) {
        debug_assert_eq!(b.parent, Some(self.tip().hash));
        self.blocks.push(b);
    }

    /// No id appears twice, so in particular no conflict set has two members.
    pub fn conflict_free(&self) -> bool {
        let mut seen = rustc_hash::FxHashSet::default();
        self.blocks.iter().flat_map(|b| b.txs.iter()).all(|t| seen.insert(t.id))
    }
}

/// True iff every block of `a` sits at the same position in `b`.
pub fn chain_prefix_of(a: &Chain, b: &Chain) -> bool {
    a.blocks.len() <= b.blocks.len()
        && a.blocks.iter().zip(&b.blocks).all(|(x, y)| x.hash == y.hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(issuer: u32, seqno: u64, tag: u32) -> Transaction {
        Transaction {
            id: TxId::new(issuer, seqno),
            payload: Payload::Contract(tag),
            deps: BTreeSet::new(),
            content_tag: tag,
            issue_time: 0.0,
        }
    }

    fn extend(store: &mut BlockStore, parent: &Arc<Block>, miner: u32, t: f64) -> Arc<Block> {
        store.insert(Block::child(parent, ProcessId(miner), t, vec![], 7))
    }

    #[test]
    fn conflict_relation() {
        let t = tx(3, 7, 0);
        assert!(!conflicts(&t, &t));
        assert!(conflicts(&t, &tx(3, 7, 1)));
        assert!(!conflicts(&t, &tx(3, 8, 0)));
        assert_eq!(t, tx(3, 7, 0));
    }

    #[test]
    fn self_dependency_is_malformed() {
        let mut t = tx(1, 2, 0);
        assert!(t.well_formed());
        t.deps.insert(TxKey { id: t.id, tag: 5 });
        assert!(!t.well_formed());
    }

    #[test]
    fn prefix_relation() {
        let mut store = BlockStore::default();
        let g = store.insert(Block::genesis(7));
        let a1 = extend(&mut store, &g, 0, 1.0);
        let a2 = extend(&mut store, &a1, 0, 2.0);
        let a3 = extend(&mut store, &a2, 0, 3.0);
        let b2 = extend(&mut store, &a1, 1, 2.5);
        let b3 = extend(&mut store, &b2, 1, 3.5);

        let genesis_only = Chain::new(g.clone());
        let a = store.chain_to(a3.hash).unwrap();
        let b = store.chain_to(b3.hash).unwrap();
        assert!(chain_prefix_of(&genesis_only, &a));
        assert!(chain_prefix_of(&a, &a));
        assert!(!chain_prefix_of(&a, &b));
        assert!(!chain_prefix_of(&b, &a));
        assert!(chain_prefix_of(&store.chain_to(a1.hash).unwrap(), &b));
        assert_eq!(a.total_work(), 3.0);
        assert_eq!(b.height(), 3);
    }

    #[test]
    fn linkage_is_checked() {
        let mut store = BlockStore::default();
        let g = store.insert(Block::genesis(1));
        let a1 = extend(&mut store, &g, 0, 1.0);
        let b1 = extend(&mut store, &g, 1, 1.0);
        let a2 = extend(&mut store, &a1, 0, 2.0);
        assert!(Chain::from_blocks(vec![g.clone(), a1.clone(), a2.clone()]).is_some());
        assert!(Chain::from_blocks(vec![g, b1, a2]).is_none());
    }

    #[test]
    fn hashes_depend_on_contents() {
        let g = Block::genesis(1);
        let x = Block::child(&g, ProcessId(0), 1.0, vec![], 1);
        let y = Block::child(&g, ProcessId(1), 1.0, vec![], 1);
        let z = Block::child(&g, ProcessId(0), 1.0, vec![Arc::new(tx(0, 0, 0))], 1);
        assert_ne!(x.hash, y.hash);
        assert_ne!(x.hash, z.hash);
        assert_eq!(x.hash, Block::child(&g, ProcessId(0), 1.0, vec![], 1).hash);
    }
}
