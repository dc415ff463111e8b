//! Simulation parameters, validation and `key=value` overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mining shares of the thirteen largest pools; the rest of the hash power is
/// spread evenly over the remaining processes.
pub const TOP_POOL_POWERS: [f64; 13] = [
    0.240, 0.213, 0.132, 0.121, 0.057, 0.019, 0.018, 0.015, 0.014, 0.013, 0.011, 0.010, 0.010,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{value}` for {field}")]
    Parse { field: String, value: String },
    #[error("config file: {0}")]
    File(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RrsVariant {
    /// Required suffix jumps from 0 to C once the age reaches AT-2.
    Simple,
    /// Required suffix grows by one block every two ageing steps.
    Progressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Honest,
    DoubleSpend,
    Fragmentation,
    /// Delays may exceed D. Nothing is guaranteed; invariant breaches are
    /// recorded instead of aborting the run.
    DViolationStress,
}

impl Scenario {
    pub fn has_attacker(self) -> bool {
        matches!(self, Scenario::DoubleSpend | Scenario::Fragmentation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PowerProfile {
    /// [`TOP_POOL_POWERS`] followed by a uniform remainder.
    TopPools,
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub attacker: u32,
    /// Share of the attacker's own mining power spent on attack blocks.
    pub x_power: f64,
    /// Fraction of correct nodes that see the malicious chain while their
    /// required suffix for the honest variant is still zero.
    pub frag_ratio: f64,
    /// Launch the next attack without waiting for the previous one to heal.
    pub burst: bool,
    /// `None` means one block interval.
    pub inter_attack_gap: Option<f64>,
    /// Delay between the two halves of a plain double spend. `None` draws a
    /// fresh offset in `[0, (AT+2)·D]` for every attack.
    pub double_spend_offset: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            attacker: 0,
            x_power: 1.0,
            frag_ratio: 0.8,
            burst: false,
            inter_attack_gap: None,
            double_spend_offset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_processes: usize,
    pub powers: PowerProfile,
    /// Mean block interval B.
    pub block_interval: f64,
    /// Delivery bound D.
    pub max_delay: f64,
    pub base_delay: f64,
    /// Commit depth C.
    pub commit_depth: u32,
    /// Ageing threshold AT, in units of D.
    pub ageing_threshold: u32,
    pub rrs_variant: RrsVariant,
    pub tx_rate: f64,
    /// Fraction of workload transactions that are transfers.
    pub workload_mix: f64,
    /// Length of the issuing window.
    pub duration: f64,
    /// Extra time after `duration` with mining but no new transactions or attacks.
    pub drain: f64,
    pub seed: u64,
    pub scenario: Scenario,
    pub block_capacity: usize,
    pub genesis_balance: u64,
    pub max_transfer: u64,
    pub sample_period: f64,
    pub reference_miner: u32,
    pub attack: AttackConfig,
    /// Upper delay bound in the stress scenario, as a multiple of D.
    pub stress_delay_factor: f64,
    /// Check the age-divergence bound at every successful ageing.
    pub check_ageing_bound: bool,
    pub record_receives: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_processes: 100,
            powers: PowerProfile::TopPools,
            block_interval: 20.0,
            max_delay: 0.96,
            base_delay: 0.12,
            commit_depth: 12,
            ageing_threshold: 26,
            rrs_variant: RrsVariant::Progressive,
            tx_rate: 8.0,
            workload_mix: 0.44,
            duration: 1000.0,
            drain: 0.0,
            seed: 0,
            scenario: Scenario::Honest,
            block_capacity: 200,
            genesis_balance: 1_000_000,
            max_transfer: 100,
            sample_period: 1.0,
            reference_miner: 1,
            attack: AttackConfig::default(),
            stress_delay_factor: 3.0,
            check_ageing_bound: true,
            record_receives: true,
        }
    }
}

/// Every key accepted by [`SimConfig::set`]; single-letter aliases included.
pub const CONFIG_KEYS: &[&str] = &[
    "n_processes", "processes", "mining_powers", "block_interval", "B", "max_delay", "D",
    "base_delay", "commit_depth", "C", "ageing_threshold", "AT", "rrs_variant", "tx_rate",
    "workload_mix", "duration", "drain", "seed", "scenario", "block_capacity",
    "genesis_balance", "max_transfer", "sample_period", "reference_miner", "attacker",
    "x_power", "frag_ratio", "burst", "inter_attack_gap", "double_spend_offset",
    "stress_delay_factor", "check_ageing_bound", "record_receives",
];

fn parse<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError::Parse { field: field.into(), value: value.into() })
}

fn parse_optional(field: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    match value.trim() {
        "" | "none" | "None" | "auto" => Ok(None),
        v => parse(field, v).map(Some),
    }
}

impl SimConfig {
    pub fn max_delay_in_run(&self) -> f64 {
        match self.scenario {
            Scenario::DViolationStress => self.max_delay * self.stress_delay_factor,
            _ => self.max_delay,
        }
    }

    pub fn inter_attack_gap(&self) -> f64 {
        self.attack.inter_attack_gap.unwrap_or(self.block_interval)
    }

    pub fn end_time(&self) -> f64 {
        self.duration + self.drain
    }

    pub fn attacker(&self) -> Option<usize> {
        self.scenario.has_attacker().then_some(self.attack.attacker as usize)
    }

    /// Resolves the power profile to one share per process.
    pub fn mining_powers(&self) -> Result<Vec<f64>, ConfigError> {
        let n = self.n_processes;
        let powers = match &self.powers {
            PowerProfile::Uniform => vec![1.0 / n as f64; n],
            PowerProfile::TopPools => {
                if n <= TOP_POOL_POWERS.len() {
                    return Err(invalid(
                        "mining_powers",
                        format!("top-pool profile needs more than {} processes", TOP_POOL_POWERS.len()),
                    ));
                }
                let rest = 1.0 - TOP_POOL_POWERS.iter().sum::<f64>();
                let tail = n - TOP_POOL_POWERS.len();
                TOP_POOL_POWERS
                    .iter()
                    .copied()
                    .chain(std::iter::repeat_n(rest / tail as f64, tail))
                    .collect()
            }
            PowerProfile::Explicit(p) => p.clone(),
        };
        Ok(powers)
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_processes == 0 {
            return Err(invalid("n_processes", "at least one process required"));
        }
        let powers = self.mining_powers()?;
        if powers.len() != self.n_processes {
            return Err(invalid("mining_powers", "one share per process required"));
        }
        if powers.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("mining_powers", "shares must lie in [0, 1]"));
        }
        if (powers.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("mining_powers", "shares must sum to 1"));
        }
        if !(self.block_interval > 0.0) {
            return Err(invalid("block_interval", "must be positive"));
        }
        if !(self.base_delay > 0.0 && self.base_delay <= self.max_delay) {
            return Err(invalid("base_delay", "need 0 < base_delay <= max_delay"));
        }
        if !(self.max_delay / self.block_interval < 0.25) {
            return Err(invalid("max_delay", "D/B must stay below 0.25"));
        }
        if self.commit_depth == 0 {
            return Err(invalid("commit_depth", "must be at least 1"));
        }
        if self.ageing_threshold < 4 {
            return Err(invalid("AT", "AT ≥ 4 required"));
        }
        if self.rrs_variant == RrsVariant::Progressive
            && self.ageing_threshold != 2 * (self.commit_depth + 1)
        {
            return Err(invalid("AT", "the progressive variant requires AT = 2(C+1)"));
        }
        if !(self.tx_rate >= 0.0) {
            return Err(invalid("tx_rate", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.workload_mix) {
            return Err(invalid("workload_mix", "must lie in [0, 1]"));
        }
        if !(self.duration >= 0.0) || !(self.drain >= 0.0) {
            return Err(invalid("duration", "duration and drain must be non-negative"));
        }
        if self.block_capacity == 0 {
            return Err(invalid("block_capacity", "must be at least 1"));
        }
        if self.max_transfer == 0 {
            return Err(invalid("max_transfer", "must be at least 1"));
        }
        if !(self.sample_period > 0.0) {
            return Err(invalid("sample_period", "must be positive"));
        }
        if self.reference_miner as usize >= self.n_processes {
            return Err(invalid("reference_miner", "no such process"));
        }
        if self.scenario == Scenario::DViolationStress && !(self.stress_delay_factor >= 1.0) {
            return Err(invalid("stress_delay_factor", "must be at least 1"));
        }
        if self.scenario.has_attacker() {
            let a = &self.attack;
            if a.attacker as usize >= self.n_processes {
                return Err(invalid("attacker", "no such process"));
            }
            if self.n_processes < 2 {
                return Err(invalid("attacker", "an attack needs at least one correct process"));
            }
            if a.attacker == self.reference_miner {
                return Err(invalid("reference_miner", "must be a correct process"));
            }
            if !(a.frag_ratio > 0.0 && a.frag_ratio < 1.0) {
                return Err(invalid("frag_ratio", "must lie in (0, 1)"));
            }
            if !(0.0..=1.0).contains(&a.x_power) {
                return Err(invalid("x_power", "must lie in [0, 1]"));
            }
            if a.inter_attack_gap.is_some_and(|g| !(g > 0.0)) {
                return Err(invalid("inter_attack_gap", "must be positive"));
            }
            if a.double_spend_offset.is_some_and(|g| !(g >= 0.0)) {
                return Err(invalid("double_spend_offset", "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "n_processes" | "processes" => self.n_processes = parse(key, v)?,
            "mining_powers" => {
                self.powers = match v.to_ascii_lowercase().as_str() {
                    "top" | "top13" | "top_pools" | "toppools" => PowerProfile::TopPools,
                    "uniform" => PowerProfile::Uniform,
                    _ => PowerProfile::Explicit(
                        v.trim_matches(|c| c == '[' || c == ']')
                            .split(',')
                            .map(|s| parse::<f64>(key, s))
                            .collect::<Result<_, _>>()?,
                    ),
                }
            }
            "block_interval" | "B" => self.block_interval = parse(key, v)?,
            "max_delay" | "D" => self.max_delay = parse(key, v)?,
            "base_delay" => self.base_delay = parse(key, v)?,
            "commit_depth" | "C" => self.commit_depth = parse(key, v)?,
            "ageing_threshold" | "AT" => {
                // Negative or tiny values should surface the AT bound, not a parse error.
                let at: i64 = parse(key, v)?;
                if at < 4 {
                    return Err(invalid("AT", "AT ≥ 4 required"));
                }
                self.ageing_threshold = u32::try_from(at).map_err(|_| invalid("AT", "too large"))?;
            }
            "rrs_variant" => {
                self.rrs_variant = match v.to_ascii_lowercase().as_str() {
                    "simple" => RrsVariant::Simple,
                    "progressive" => RrsVariant::Progressive,
                    _ => return Err(ConfigError::Parse { field: key.into(), value: v.into() }),
                }
            }
            "tx_rate" => self.tx_rate = parse(key, v)?,
            "workload_mix" => self.workload_mix = parse(key, v)?,
            "duration" => self.duration = parse(key, v)?,
            "drain" => self.drain = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "scenario" => {
                self.scenario = match v.to_ascii_lowercase().replace('_', "-").as_str() {
                    "honest" => Scenario::Honest,
                    "double-spend" | "doublespend" => Scenario::DoubleSpend,
                    "fragmentation" => Scenario::Fragmentation,
                    "d-violation-stress" | "stress" => Scenario::DViolationStress,
                    _ => return Err(ConfigError::Parse { field: key.into(), value: v.into() }),
                }
            }
            "block_capacity" => self.block_capacity = parse(key, v)?,
            "genesis_balance" => self.genesis_balance = parse(key, v)?,
            "max_transfer" => self.max_transfer = parse(key, v)?,
            "sample_period" => self.sample_period = parse(key, v)?,
            "reference_miner" => self.reference_miner = parse(key, v)?,
            "attacker" => self.attack.attacker = parse(key, v)?,
            "x_power" => self.attack.x_power = parse(key, v)?,
            "frag_ratio" => self.attack.frag_ratio = parse(key, v)?,
            "burst" => self.attack.burst = parse(key, v)?,
            "inter_attack_gap" => self.attack.inter_attack_gap = parse_optional(key, v)?,
            "double_spend_offset" => self.attack.double_spend_offset = parse_optional(key, v)?,
            "stress_delay_factor" => self.stress_delay_factor = parse(key, v)?,
            "check_ageing_bound" => self.check_ageing_bound = parse(key, v)?,
            "record_receives" => self.record_receives = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` string.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse { field: "override".into(), value: kv.into() })?;
        self.set(k, v)
    }

    /// Applies every key of a TOML document. Section headers are allowed and
    /// ignored, so `[network]\nD = 0.96` is the same as a top-level `D = 0.96`.
    pub fn apply_toml(&mut self, text: &str) -> Result<(), ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::File(e.to_string()))?;
        self.apply_table(&table)
    }

    fn apply_table(&mut self, table: &toml::Table) -> Result<(), ConfigError> {
        for (k, v) in table {
            match v {
                toml::Value::Table(t) => self.apply_table(t)?,
                toml::Value::String(s) => self.set(k, s)?,
                toml::Value::Array(items) => {
                    let joined = items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
                    self.set(k, &joined)?
                }
                other => self.set(k, &other.to_string())?,
            }
        }
        Ok(())
    }
}
