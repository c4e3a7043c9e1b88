//! `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! loss_prob = 0.3
//! accounts = 1001=100000, 1002=5000
//! ```
//!
//! Unknown keys are rejected; missing keys take their defaults.

use thiserror::Error;

use crate::event::Tick;
use crate::site::{DEFAULT_ALLOWABLE_AMOUNT, DEFAULT_MAX_RETRIES, DEFAULT_QUERY_TIMEOUT};
use crate::smsc::{PhoneNumber, DEFAULT_VALIDITY_PERIOD};
use crate::wire;

pub const DEFAULT_SETTLE_TICKS: Tick = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {key}: {reason}")]
    Line {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub key: u64,
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub delay_min: Tick,
    pub delay_max: Tick,
    pub validity_period: Tick,
    pub allowable_amount: u64,
    pub max_retries: u32,
    pub query_timeout: Tick,
    pub settle_ticks: Tick,
    /// Initial balances, loaded identically into both ledgers.
    pub accounts: Vec<(u64, i64)>,
    pub objects: Vec<String>,
    pub site1_number: String,
    pub site2_number: String,
    pub key_person_number: String,
    pub dba_number: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            key: 1,
            loss_prob: 0.0,
            dup_prob: 0.0,
            delay_min: 1,
            delay_max: 1,
            validity_period: DEFAULT_VALIDITY_PERIOD,
            allowable_amount: DEFAULT_ALLOWABLE_AMOUNT,
            max_retries: DEFAULT_MAX_RETRIES,
            query_timeout: DEFAULT_QUERY_TIMEOUT,
            settle_ticks: DEFAULT_SETTLE_TICKS,
            accounts: vec![(1001, 100_000)],
            objects: vec!["PKG_BILLING".into()],
            site1_number: "79001".into(),
            site2_number: "79002".into(),
            key_person_number: "79100".into(),
            dba_number: "79200".into(),
        }
    }
}

impl WorldConfig {
    /// Field-level checks that do not need a built world.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, reason: String| Err(ConfigError::Invalid { field, reason });
        for (field, p) in [("loss_prob", self.loss_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(field, format!("{p} outside [0,1]"));
            }
        }
        if self.delay_min > self.delay_max {
            return invalid(
                "delay_min",
                format!("{} exceeds delay_max {}", self.delay_min, self.delay_max),
            );
        }
        if self.allowable_amount == 0 {
            return invalid("allowable_amount", "must be greater than zero".into());
        }
        let numbers = [
            ("site1_number", &self.site1_number),
            ("site2_number", &self.site2_number),
            ("key_person_number", &self.key_person_number),
            ("dba_number", &self.dba_number),
        ];
        for (i, (field, n)) in numbers.iter().enumerate() {
            if let Err(e) = PhoneNumber::new(n) {
                return invalid(field, e.to_string());
            }
            if numbers[..i].iter().any(|(_, m)| m == n) {
                return invalid(field, format!("duplicate phone number {n}"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (account, _) in &self.accounts {
            if !seen.insert(account) {
                return invalid("accounts", format!("account {account} listed twice"));
            }
        }
        for name in &self.objects {
            if name.is_empty() || wire::check_text("object", name).is_err() || name.contains(',') {
                return invalid("objects", format!("bad object name {name:?}"));
            }
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<WorldConfig, ConfigError> {
    let mut cfg = WorldConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Line {
                line,
                key: content.to_owned(),
                reason: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let err = |reason: String| ConfigError::Line {
            line,
            key: key.to_owned(),
            reason,
        };
        macro_rules! num {
            () => {
                value
                    .parse()
                    .map_err(|e| err(format!("cannot parse {value:?}: {e}")))?
            };
        }
        match key {
            "seed" => cfg.seed = num!(),
            "key" => cfg.key = num!(),
            "loss_prob" => cfg.loss_prob = probability(value).map_err(err)?,
            "dup_prob" => cfg.dup_prob = probability(value).map_err(err)?,
            "delay_min" => cfg.delay_min = num!(),
            "delay_max" => cfg.delay_max = num!(),
            "validity_period" => cfg.validity_period = num!(),
            "allowable_amount" => {
                cfg.allowable_amount = num!();
                if cfg.allowable_amount == 0 {
                    return Err(err("must be greater than zero".into()));
                }
            }
            "max_retries" => cfg.max_retries = num!(),
            "query_timeout" => cfg.query_timeout = num!(),
            "settle_ticks" => cfg.settle_ticks = num!(),
            "accounts" => cfg.accounts = parse_accounts(value).map_err(err)?,
            "objects" => {
                cfg.objects = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            "site1_number" => cfg.site1_number = phone(value).map_err(err)?,
            "site2_number" => cfg.site2_number = phone(value).map_err(err)?,
            "key_person_number" => cfg.key_person_number = phone(value).map_err(err)?,
            "dba_number" => cfg.dba_number = phone(value).map_err(err)?,
            _ => return Err(err("unknown key".into())),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn probability(value: &str) -> Result<f64, String> {
    let p: f64 = value
        .parse()
        .map_err(|e| format!("cannot parse {value:?}: {e}"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} outside [0,1]"))
    }
}

fn phone(value: &str) -> Result<String, String> {
    PhoneNumber::new(value)
        .map(|p| p.as_str().to_owned())
        .map_err(|e| e.to_string())
}

fn parse_accounts(value: &str) -> Result<Vec<(u64, i64)>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (acct, bal) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected account=balance, got {pair:?}"))?;
            let acct = acct
                .trim()
                .parse()
                .map_err(|e| format!("bad account {acct:?}: {e}"))?;
            let bal = bal
                .trim()
                .parse()
                .map_err(|e| format!("bad balance {bal:?}: {e}"))?;
            Ok((acct, bal))
        })
        .collect()
}
