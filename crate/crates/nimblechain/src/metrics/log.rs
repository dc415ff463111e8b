//! Event records emitted by the simulation and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::types::{BlockHash, ProcessId, TxId, TxKey, TxType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Issue,
    Receive,
    Promise,
    Commit,
    Discard,
    BlockProduced,
    BlockAccepted,
    ChainSwitch,
    AttackStep,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Issue,
        EventKind::Receive,
        EventKind::Promise,
        EventKind::Commit,
        EventKind::Discard,
        EventKind::BlockProduced,
        EventKind::BlockAccepted,
        EventKind::ChainSwitch,
        EventKind::AttackStep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Issue => "Issue",
            EventKind::Receive => "Receive",
            EventKind::Promise => "Promise",
            EventKind::Commit => "Commit",
            EventKind::Discard => "Discard",
            EventKind::BlockProduced => "BlockProduced",
            EventKind::BlockAccepted => "BlockAccepted",
            EventKind::ChainSwitch => "ChainSwitch",
            EventKind::AttackStep => "AttackStep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscardReason {
    /// A conflicting variant committed or was promised first.
    Conflict,
    /// A dependency was discarded, so this can never be promised.
    Dependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackAction {
    /// Malicious chain released with engineered delays.
    Release,
    /// Attack attempt opened; candidate transactions start flowing.
    Open,
    /// Plain double spend issued.
    DoubleSpend,
    /// Every correct node holds the same block at the attacked height.
    Healed,
}

/// Extra qualifier carried in the trailing `detail` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Detail {
    #[default]
    None,
    Tx(TxType),
    Discard(DiscardReason),
    Attack(AttackAction),
}

impl Detail {
    pub fn as_str(self) -> &'static str {
        match self {
            Detail::None => "",
            Detail::Tx(t) => t.as_str(),
            Detail::Discard(DiscardReason::Conflict) => "conflict",
            Detail::Discard(DiscardReason::Dependent) => "dependent",
            Detail::Attack(AttackAction::Release) => "release",
            Detail::Attack(AttackAction::Open) => "open",
            Detail::Attack(AttackAction::DoubleSpend) => "double-spend",
            Detail::Attack(AttackAction::Healed) => "healed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "" => Detail::None,
            "transfer" => Detail::Tx(TxType::Transfer),
            "contract" => Detail::Tx(TxType::Contract),
            "conflict" => Detail::Discard(DiscardReason::Conflict),
            "dependent" => Detail::Discard(DiscardReason::Dependent),
            "release" => Detail::Attack(AttackAction::Release),
            "open" => Detail::Attack(AttackAction::Open),
            "double-spend" => Detail::Attack(AttackAction::DoubleSpend),
            "healed" => Detail::Attack(AttackAction::Healed),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub node: ProcessId,
    pub kind: EventKind,
    pub tx: Option<TxKey>,
    pub block: Option<BlockHash>,
    pub height: Option<u64>,
    pub detail: Detail,
}

impl EventRecord {
    pub fn tx(time: f64, node: ProcessId, kind: EventKind, tx: TxKey) -> Self {
        EventRecord { time, node, kind, tx: Some(tx), block: None, height: None, detail: Detail::None }
    }

    pub fn block(time: f64, node: ProcessId, kind: EventKind, block: BlockHash, height: u64) -> Self {
        EventRecord {
            time,
            node,
            kind,
            tx: None,
            block: Some(block),
            height: Some(height),
            detail: Detail::None,
        }
    }

    pub fn with_detail(mut self, detail: Detail) -> Self {
        self.detail = detail;
        self
    }
}

/// Receives records in emission order.
pub trait EventSink {
    fn record(&mut self, rec: EventRecord);
}

/// In-memory log; the usual sink.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

impl EventSink for EventLog {
    fn record(&mut self, rec: EventRecord) {
        self.records.push(rec);
    }
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _: EventRecord) {}
}

impl<F: FnMut(EventRecord)> EventSink for F {
    fn record(&mut self, rec: EventRecord) {
        self(rec)
    }
}

pub const CSV_HEADER: [&str; 9] =
    ["time", "node", "kind", "tx_issuer", "tx_seqno", "content_tag", "block_hash", "height", "detail"];

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
}

impl EventLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LogError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.records {
            w.write_record([
                format!("{}", r.time),
                r.node.0.to_string(),
                r.kind.as_str().to_string(),
                opt(r.tx.map(|t| t.id.issuer.0.to_string())),
                opt(r.tx.map(|t| t.id.seqno.to_string())),
                opt(r.tx.map(|t| t.tag.to_string())),
                opt(r.block.map(|b| b.to_string())),
                opt(r.height.map(|h| h.to_string())),
                r.detail.as_str().to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, LogError> {
        let mut rd = csv::Reader::from_reader(input);
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |reason: &str| LogError::Malformed { line, reason: reason.into() };
            let field = |i: usize| row.get(i).unwrap_or("");
            let num = |i: usize| -> Result<Option<u64>, LogError> {
                match field(i) {
                    "" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| bad("bad integer")),
                }
            };
            let time: f64 = field(0).parse().map_err(|_| bad("bad time"))?;
            let node = ProcessId(field(1).parse().map_err(|_| bad("bad node"))?);
            let kind = EventKind::parse(field(2)).ok_or_else(|| bad("unknown kind"))?;
            let tx = match (num(3)?, num(4)?, num(5)?) {
                (Some(i), Some(s), Some(t)) => Some(TxKey {
                    id: TxId::new(i as u32, s),
                    tag: t as u32,
                }),
                (None, None, None) => None,
                _ => return Err(bad("partial transaction id")),
            };
            let block = match field(6) {
                "" => None,
                s => Some(BlockHash(u64::from_str_radix(s, 16).map_err(|_| bad("bad hash"))?)),
            };
            let height = num(7)?;
            let detail = Detail::parse(field(8)).ok_or_else(|| bad("unknown detail"))?;
            records.push(EventRecord { time, node, kind, tx, block, height, detail });
        }
        Ok(EventLog { records })
    }
}
