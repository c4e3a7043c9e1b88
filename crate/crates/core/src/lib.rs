//! Standby SMS continuity channel for a two-site ledger.
//!
//! Two sites replicate account transactions over a synchronous database
//! link. When the link is down and the SMS channel is active, transactions
//! and queries are written to an outbox, encrypted, split into 160-character
//! frames and relayed through a simulated store-and-forward message centre.
//! Business-rule triggers and invalid database objects raise SMS alerts to
//! phones. Everything runs on one deterministic tick clock.
//!
//! - [`wire`]: message grammar, keystream cipher, CRC-16 and framing
//! - [`smsc`]: the message centre with loss, duplication, delay and expiry
//! - [`site`]: one site's ledger, outbox, gateway tables and listener
//! - [`harness`]: the two-site [`World`], scenarios and fuzz campaigns
//! - [`config`]: `key = value` run configuration

pub mod config;
pub mod event;
pub mod harness;
pub mod rng;
pub mod site;
pub mod smsc;
pub mod wire;

pub use config::{parse_config, ConfigError, WorldConfig};
pub use event::{EventLog, EventRecord, Tick};
pub use harness::{build_world, run_until, HarnessError, SiteId, World};
pub use site::{Control, QueryOutcome, QueryState, RecordStatus, RemoteOutcome, SiteError, SiteNode};
pub use smsc::{PhoneNumber, Smsc};
pub use wire::{LogicalMessage, MessageId, SecretKey, SmsSegment, WireError};
