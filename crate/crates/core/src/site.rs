//! One site: ledger, control flags, the `SMS_LISTENER_LOG` outbox, the
//! `OZEKIMESSAGEOUT` / `OZEKIMESSAGEIN` gateway tables and the programmed
//! listener that drains and fills them.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::event::{EventLog, Tick};
use crate::smsc::{PhoneNumber, ReportOutcome, Smsc, SmscError};
use crate::wire::{
    self, AlertCode, LogicalMessage, MessageId, ResultStatus, SecretKey, SmsSegment, WireError,
    MAX_COUNTER,
};

pub const DEFAULT_ALLOWABLE_AMOUNT: u64 = 10_000;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_QUERY_TIMEOUT: Tick = 50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SiteError {
    #[error("unknown account {0}")]
    UnknownAccount(u64),
    #[error("database link is down and the SMS channel is off")]
    LinkDown,
    #[error("unknown database object {0:?}")]
    UnknownObject(String),
    #[error("balance overflow on account {0}")]
    BalanceOverflow(u64),
    #[error("message id space exhausted")]
    IdsExhausted,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Smsc(#[from] SmscError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    accounts: BTreeMap<u64, i64>,
}

impl Ledger {
    pub fn new(accounts: impl IntoIterator<Item = (u64, i64)>) -> Self {
        Self {
            accounts: accounts.into_iter().collect(),
        }
    }

    pub fn balance(&self, account: u64) -> Result<i64, SiteError> {
        self.accounts
            .get(&account)
            .copied()
            .ok_or(SiteError::UnknownAccount(account))
    }

    fn apply(&mut self, account: u64, delta: i64) -> Result<i64, SiteError> {
        let bal = self
            .accounts
            .get_mut(&account)
            .ok_or(SiteError::UnknownAccount(account))?;
        *bal = bal
            .checked_add(delta)
            .ok_or(SiteError::BalanceOverflow(account))?;
        Ok(*bal)
    }

    pub fn accounts(&self) -> &BTreeMap<u64, i64> {
        &self.accounts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Link,
    Channel,
    Job,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ControlFlags {
    pub link_up: bool,
    pub sms_channel_on: bool,
    pub sms_job_on: bool,
}

impl Default for ControlFlags {
    fn default() -> Self {
        Self {
            link_up: true,
            sms_channel_on: false,
            sms_job_on: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordStatus {
    Pending,
    Sent,
    Delivered,
    Confirmed,
    Failed,
}

impl RecordStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordStatus::Pending => "PENDING",
            RecordStatus::Sent => "SENT",
            RecordStatus::Delivered => "DELIVERED",
            RecordStatus::Confirmed => "CONFIRMED",
            RecordStatus::Failed => "FAILED",
        }
    }

    /// The only legal single-step transitions.
    pub fn can_advance_to(self, next: RecordStatus) -> bool {
        use RecordStatus::*;
        matches!(
            (self, next),
            (Pending, Sent) | (Sent, Delivered) | (Delivered, Confirmed) | (Sent, Failed) | (Delivered, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RecordStatus::Confirmed | RecordStatus::Failed)
    }
}

/// One row of `SMS_LISTENER_LOG`.
#[derive(Debug, Clone)]
pub struct SmsLogRecord {
    pub id: MessageId,
    pub message: LogicalMessage,
    pub destination: PhoneNumber,
    pub status: RecordStatus,
    pub created_at: Tick,
    pub updated_at: Tick,
    pub retries: u32,
    pub history: Vec<RecordStatus>,
    segments: Vec<SmsSegment>,
    delivered: BTreeSet<u8>,
}

impl SmsLogRecord {
    pub fn segments(&self) -> &[SmsSegment] {
        &self.segments
    }
}

#[derive(Debug, Default, Clone)]
struct InGroup {
    segments: Vec<SmsSegment>,
    quarantined: bool,
}

/// `OZEKIMESSAGEOUT` and `OZEKIMESSAGEIN`.
#[derive(Debug, Default, Clone)]
pub struct GatewayTables {
    out_rows: Vec<SmsSegment>,
    in_rows: BTreeMap<MessageId, InGroup>,
}

impl GatewayTables {
    pub fn out_rows(&self) -> &[SmsSegment] {
        &self.out_rows
    }

    pub fn in_row_count(&self) -> usize {
        self.in_rows.values().map(|g| g.segments.len()).sum()
    }

    pub fn in_group(&self, id: MessageId) -> Option<&[SmsSegment]> {
        self.in_rows.get(&id).map(|g| g.segments.as_slice())
    }

    pub fn quarantined(&self) -> impl Iterator<Item = MessageId> + '_ {
        self.in_rows
            .iter()
            .filter(|(_, g)| g.quarantined)
            .map(|(id, _)| *id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BusinessRules {
    pub allowable_amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbObject {
    pub name: String,
    pub valid: bool,
    pub alerted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum AppliedReply {
    Result { status: ResultStatus, detail: String },
    Balance { account: u64, balance: Option<i64> },
}

/// Message ids already executed or answered, with the reply that was sent
/// so a duplicate gets the identical answer.
#[derive(Debug, Default, Clone)]
pub struct AppliedSet {
    replies: BTreeMap<MessageId, AppliedReply>,
}

impl AppliedSet {
    pub fn contains(&self, id: MessageId) -> bool {
        self.replies.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryState {
    Waiting,
    Fulfilled { balance: i64 },
    /// The peer answered with the error sentinel.
    UnknownAccount,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingQuery {
    pub id: MessageId,
    pub account: u64,
    pub state: QueryState,
    pub issued_at: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteOutcome {
    /// Applied over the database link; carries the peer's new balance.
    Applied { balance: i64 },
    Queued { id: MessageId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryOutcome {
    Balance(i64),
    Pending(MessageId),
}

#[derive(Debug, Clone)]
pub struct SiteConfig {
    pub name: String,
    pub tag: u8,
    pub gateway: PhoneNumber,
    pub peer_gateway: PhoneNumber,
    pub key_person: PhoneNumber,
    pub dba: PhoneNumber,
    pub key: SecretKey,
    pub rules: BusinessRules,
    pub max_retries: u32,
    pub query_timeout: Tick,
    pub accounts: Vec<(u64, i64)>,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SiteNode {
    config: SiteConfig,
    ledger: Ledger,
    flags: ControlFlags,
    log_table: BTreeMap<MessageId, SmsLogRecord>,
    gateway: GatewayTables,
    objects: BTreeMap<String, DbObject>,
    applied: AppliedSet,
    queries: BTreeMap<MessageId, PendingQuery>,
    next_counter: u32,
}

impl SiteNode {
    pub fn new(config: SiteConfig) -> Self {
        let objects = config
            .objects
            .iter()
            .map(|name| {
                (
                    name.clone(),
                    DbObject {
                        name: name.clone(),
                        valid: true,
                        alerted: false,
                    },
                )
            })
            .collect();
        Self {
            ledger: Ledger::new(config.accounts.iter().copied()),
            flags: ControlFlags::default(),
            log_table: BTreeMap::new(),
            gateway: GatewayTables::default(),
            objects,
            applied: AppliedSet::default(),
            queries: BTreeMap::new(),
            next_counter: 1,
            config,
        }
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &SiteConfig {
        &self.config
    }

    pub fn flags(&self) -> ControlFlags {
        self.flags
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn gateway(&self) -> &GatewayTables {
        &self.gateway
    }

    pub fn applied(&self) -> &AppliedSet {
        &self.applied
    }

    pub fn records(&self) -> impl Iterator<Item = &SmsLogRecord> {
        self.log_table.values()
    }

    pub fn record(&self, id: MessageId) -> Option<&SmsLogRecord> {
        self.log_table.get(&id)
    }

    pub fn query(&self, id: MessageId) -> Option<&PendingQuery> {
        self.queries.get(&id)
    }

    pub fn object(&self, name: &str) -> Option<&DbObject> {
        self.objects.get(name)
    }

    pub fn read_balance(&self, account: u64) -> Result<i64, SiteError> {
        self.ledger.balance(account)
    }

    pub fn set_control(&mut self, which: Control, on: bool, now: Tick, log: &mut EventLog) {
        let (flag, label) = match which {
            Control::Link => (&mut self.flags.link_up, "LINK"),
            Control::Channel => (&mut self.flags.sms_channel_on, "CHANNEL"),
            Control::Job => (&mut self.flags.sms_job_on, "JOB"),
        };
        *flag = on;
        log.push(now, &self.config.name, "control", json!({"which": label, "on": on}));
    }

    fn next_id(&mut self) -> Result<MessageId, SiteError> {
        if self.next_counter > MAX_COUNTER {
            return Err(SiteError::IdsExhausted);
        }
        let id = MessageId::new(self.config.tag, self.next_counter)?;
        self.next_counter += 1;
        Ok(id)
    }

    fn apply_logged(
        &mut self,
        account: u64,
        delta: i64,
        via: &str,
        msgid: Option<MessageId>,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<i64, SiteError> {
        let balance = self.ledger.apply(account, delta)?;
        log.push(
            now,
            &self.config.name,
            "ledger.apply",
            json!({
                "account": account,
                "delta": delta,
                "balance": balance,
                "via": via,
                "msgid": msgid.map(|m| m.to_string()),
            }),
        );
        Ok(balance)
    }

    /// Inserts a PENDING row into `SMS_LISTENER_LOG`. The message is packed
    /// once up front so that a row that cannot be framed is never stored.
    fn enqueue(
        &mut self,
        build: impl FnOnce(MessageId) -> LogicalMessage,
        destination: PhoneNumber,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<MessageId, SiteError> {
        let id = self.next_id()?;
        let message = build(id);
        wire::pack(&message, self.config.key, &self.config.gateway, &destination)?;
        log.push(
            now,
            &self.config.name,
            "SMS_LISTENER_LOG.insert",
            json!({
                "msgid": id.to_string(),
                "kind": message.tag(),
                "text": wire::encode_message(&message)?,
                "to": destination.as_str(),
                "status": RecordStatus::Pending.as_str(),
            }),
        );
        self.log_table.insert(
            id,
            SmsLogRecord {
                id,
                message,
                destination,
                status: RecordStatus::Pending,
                created_at: now,
                updated_at: now,
                retries: 0,
                history: vec![RecordStatus::Pending],
                segments: Vec::new(),
                delivered: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    fn enqueue_alert(&mut self, code: AlertCode, text: String, to: PhoneNumber, now: Tick, log: &mut EventLog) {
        if let Err(e) = self.enqueue(|id| LogicalMessage::Alert { id, code, text }, to, now, log) {
            log.push(
                now,
                &self.config.name,
                "alert.rejected",
                json!({"code": code.as_str(), "error": e.to_string()}),
            );
        }
    }

    fn advance(&mut self, id: MessageId, next: RecordStatus, now: Tick, log: &mut EventLog) -> bool {
        let Some(rec) = self.log_table.get_mut(&id) else {
            return false;
        };
        if !rec.status.can_advance_to(next) {
            return false;
        }
        rec.status = next;
        rec.updated_at = now;
        rec.history.push(next);
        log.push(
            now,
            &self.config.name,
            "SMS_LISTENER_LOG.status",
            json!({"msgid": id.to_string(), "status": next.as_str(), "retries": rec.retries}),
        );
        true
    }

    pub fn local_update(
        &mut self,
        account: u64,
        delta: i64,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<i64, SiteError> {
        let balance = self.apply_logged(account, delta, "local", None, now, log)?;
        let allowable = self.config.rules.allowable_amount;
        if delta.unsigned_abs() > allowable {
            let text = format!("ACCT {account} DELTA {delta} EXCEEDS {allowable}");
            let to = self.config.key_person.clone();
            self.enqueue_alert(AlertCode::Susp, text, to, now, log);
        }
        Ok(balance)
    }

    /// Applies `delta` at `peer` over the link, or reroutes it through the
    /// SMS channel when the link is down.
    pub fn remote_update(
        &mut self,
        peer: &mut SiteNode,
        account: u64,
        delta: i64,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<RemoteOutcome, SiteError> {
        if self.flags.link_up {
            let balance = peer.apply_logged(account, delta, "link", None, now, log)?;
            return Ok(RemoteOutcome::Applied { balance });
        }
        if !self.flags.sms_channel_on {
            log.push(
                now,
                &self.config.name,
                "remote_update.rejected",
                json!({"account": account, "delta": delta, "reason": "LINK_DOWN"}),
            );
            return Err(SiteError::LinkDown);
        }
        let peer_gateway = self.config.peer_gateway.clone();
        let id = self.enqueue(
            |id| LogicalMessage::Txn { id, account, delta },
            peer_gateway,
            now,
            log,
        )?;
        let to = self.config.key_person.clone();
        self.enqueue_alert(AlertCode::Link, format!("LINK DOWN TXN {id} SENT VIA SMS"), to, now, log);
        Ok(RemoteOutcome::Queued { id })
    }

    pub fn remote_query(
        &mut self,
        peer: &SiteNode,
        account: u64,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<QueryOutcome, SiteError> {
        if self.flags.link_up {
            let balance = peer.read_balance(account)?;
            log.push(
                now,
                &self.config.name,
                "remote_query.link",
                json!({"account": account, "balance": balance}),
            );
            return Ok(QueryOutcome::Balance(balance));
        }
        if !self.flags.sms_channel_on {
            log.push(
                now,
                &self.config.name,
                "remote_query.rejected",
                json!({"account": account, "reason": "LINK_DOWN"}),
            );
            return Err(SiteError::LinkDown);
        }
        let peer_gateway = self.config.peer_gateway.clone();
        let id = self.enqueue(|id| LogicalMessage::QueryReq { id, account }, peer_gateway, now, log)?;
        self.queries.insert(
            id,
            PendingQuery {
                id,
                account,
                state: QueryState::Waiting,
                issued_at: now,
            },
        );
        Ok(QueryOutcome::Pending(id))
    }

    pub fn invalidate_object(&mut self, name: &str, now: Tick, log: &mut EventLog) -> Result<(), SiteError> {
        let obj = self
            .objects
            .get_mut(name)
            .ok_or_else(|| SiteError::UnknownObject(name.to_owned()))?;
        if obj.valid {
            obj.valid = false;
            log.push(now, &self.config.name, "object.invalidate", json!({"name": name}));
        }
        Ok(())
    }

    /// Stores an incoming frame in `OZEKIMESSAGEIN`.
    pub fn receive_segment(&mut self, segment: SmsSegment, now: Tick, log: &mut EventLog) {
        log.push(
            now,
            &self.config.name,
            "OZEKIMESSAGEIN.insert",
            json!({"msgid": segment.msgid().to_string(), "frame": segment.render()}),
        );
        self.gateway
            .in_rows
            .entry(segment.msgid())
            .or_default()
            .segments
            .push(segment);
    }

    /// One pass of the programmed listener.
    pub fn poll(&mut self, now: Tick, smsc: &mut Smsc, log: &mut EventLog) {
        if self.flags.sms_job_on && self.flags.sms_channel_on {
            self.scan_objects(now, log);
            self.send_pending(now, smsc, log);
            self.consume_reports(now, smsc, log);
            self.process_inbound(now, log);
        }
        self.expire_queries(now, log);
    }

    fn scan_objects(&mut self, now: Tick, log: &mut EventLog) {
        let invalid: Vec<String> = self
            .objects
            .values()
            .filter(|o| !o.valid && !o.alerted)
            .map(|o| o.name.clone())
            .collect();
        for name in invalid {
            let to = self.config.dba.clone();
            self.enqueue_alert(AlertCode::Iobj, name.clone(), to, now, log);
            self.objects.get_mut(&name).expect("scanned").alerted = true;
        }
    }

    fn send_pending(&mut self, now: Tick, smsc: &mut Smsc, log: &mut EventLog) {
        let pending: Vec<MessageId> = self
            .log_table
            .values()
            .filter(|r| r.status == RecordStatus::Pending)
            .map(|r| r.id)
            .collect();
        for id in pending {
            let rec = &self.log_table[&id];
            let segments = match wire::pack(&rec.message, self.config.key, &self.config.gateway, &rec.destination) {
                Ok(s) => s,
                Err(e) => {
                    log.push(now, &self.config.name, "pack.failed", json!({"msgid": id.to_string(), "error": e.to_string()}));
                    continue;
                }
            };
            for seg in &segments {
                log.push(
                    now,
                    &self.config.name,
                    "OZEKIMESSAGEOUT.insert",
                    json!({"msgid": id.to_string(), "frame": seg.render()}),
                );
                self.gateway.out_rows.push(seg.clone());
                if let Err(e) = smsc.submit(seg.clone(), now, log) {
                    log.push(now, &self.config.name, "submit.failed", json!({"msgid": id.to_string(), "error": e.to_string()}));
                }
            }
            self.log_table.get_mut(&id).expect("pending id").segments = segments;
            self.advance(id, RecordStatus::Sent, now, log);
        }
    }

    fn consume_reports(&mut self, now: Tick, smsc: &mut Smsc, log: &mut EventLog) {
        let reports = match smsc.take_delivery_reports(&self.config.gateway) {
            Ok(r) => r,
            Err(_) => return,
        };
        for report in reports {
            log.push(
                now,
                &self.config.name,
                "delivery_report",
                json!({"msgid": report.msgid.to_string(), "seq": report.seq, "outcome": report.outcome.as_str(), "at": report.at}),
            );
            let max_retries = self.config.max_retries;
            let Some(rec) = self.log_table.get_mut(&report.msgid) else {
                continue;
            };
            if rec.status.is_terminal() {
                continue;
            }
            match report.outcome {
                ReportOutcome::Delivered => {
                    rec.delivered.insert(report.seq);
                    if rec.delivered.len() == rec.segments.len() {
                        self.advance(report.msgid, RecordStatus::Delivered, now, log);
                    }
                }
                ReportOutcome::Expired if rec.retries < max_retries => {
                    rec.retries += 1;
                    rec.updated_at = now;
                    let seg = rec.segments[usize::from(report.seq) - 1].clone();
                    log.push(
                        now,
                        &self.config.name,
                        "resubmit",
                        json!({"msgid": report.msgid.to_string(), "seq": report.seq, "retries": rec.retries}),
                    );
                    if let Err(e) = smsc.submit(seg, now, log) {
                        log.push(now, &self.config.name, "submit.failed", json!({"msgid": report.msgid.to_string(), "error": e.to_string()}));
                    }
                }
                ReportOutcome::Expired => {
                    self.advance(report.msgid, RecordStatus::Failed, now, log);
                }
            }
        }
    }

    fn process_inbound(&mut self, now: Tick, log: &mut EventLog) {
        let ready: Vec<MessageId> = self
            .gateway
            .in_rows
            .iter()
            .filter(|(_, g)| !g.quarantined)
            .map(|(id, _)| *id)
            .collect();
        for msgid in ready {
            let group = &self.gateway.in_rows[&msgid];
            let outcome = wire::unpack(&group.segments, self.config.key).and_then(|msg| {
                if msg.id() == msgid {
                    Ok(msg)
                } else {
                    Err(WireError::Inconsistent(format!("frame id {msgid} carries message {}", msg.id())))
                }
            });
            match outcome {
                Ok(msg) => {
                    let group = self.gateway.in_rows.remove(&msgid).expect("ready group");
                    log.push(
                        now,
                        &self.config.name,
                        "OZEKIMESSAGEIN.consume",
                        json!({"msgid": msgid.to_string(), "rows": group.segments.len(), "text": wire::encode_message(&msg).unwrap_or_default()}),
                    );
                    self.dispatch_incoming(msg, now, log);
                }
                Err(WireError::Incomplete { .. }) => {}
                Err(e) => {
                    self.gateway.in_rows.get_mut(&msgid).expect("ready group").quarantined = true;
                    log.push(
                        now,
                        &self.config.name,
                        "OZEKIMESSAGEIN.quarantine",
                        json!({"msgid": msgid.to_string(), "error": e.to_string()}),
                    );
                }
            }
        }
    }

    fn expire_queries(&mut self, now: Tick, log: &mut EventLog) {
        let timeout = self.config.query_timeout;
        for q in self.queries.values_mut() {
            if q.state == QueryState::Waiting && now.saturating_sub(q.issued_at) >= timeout {
                q.state = QueryState::TimedOut;
                log.push(
                    now,
                    &self.config.name,
                    "query.timed_out",
                    json!({"msgid": q.id.to_string(), "account": q.account}),
                );
            }
        }
    }

    fn send_reply(&mut self, in_reply_to: MessageId, reply: &AppliedReply, now: Tick, log: &mut EventLog) {
        let to = self.config.peer_gateway.clone();
        let result = match reply.clone() {
            AppliedReply::Result { status, detail } => self.enqueue(
                |id| LogicalMessage::Result { id, in_reply_to, status, detail },
                to,
                now,
                log,
            ),
            AppliedReply::Balance { account, balance } => self.enqueue(
                |id| LogicalMessage::QueryResp { id, in_reply_to, account, balance },
                to,
                now,
                log,
            ),
        };
        if let Err(e) = result {
            log.push(now, &self.config.name, "reply.failed", json!({"in_reply_to": in_reply_to.to_string(), "error": e.to_string()}));
        }
    }

    /// Executes one decoded incoming message.
    pub fn dispatch_incoming(&mut self, msg: LogicalMessage, now: Tick, log: &mut EventLog) {
        match msg {
            LogicalMessage::Txn { id, account, delta } => {
                if let Some(reply) = self.applied.replies.get(&id).cloned() {
                    log.push(now, &self.config.name, "dedupe", json!({"msgid": id.to_string(), "kind": "TXN"}));
                    self.send_reply(id, &reply, now, log);
                    return;
                }
                let reply = match self.apply_logged(account, delta, "sms", Some(id), now, log) {
                    Ok(_) => AppliedReply::Result {
                        status: ResultStatus::Ok,
                        detail: "APPLIED".into(),
                    },
                    Err(e) => AppliedReply::Result {
                        status: ResultStatus::Err,
                        detail: e.to_string().to_uppercase(),
                    },
                };
                self.applied.replies.insert(id, reply.clone());
                self.send_reply(id, &reply, now, log);
            }
            LogicalMessage::QueryReq { id, account } => {
                if let Some(reply) = self.applied.replies.get(&id).cloned() {
                    log.push(now, &self.config.name, "dedupe", json!({"msgid": id.to_string(), "kind": "QRY"}));
                    self.send_reply(id, &reply, now, log);
                    return;
                }
                let reply = AppliedReply::Balance {
                    account,
                    balance: self.ledger.balance(account).ok(),
                };
                self.applied.replies.insert(id, reply.clone());
                self.send_reply(id, &reply, now, log);
            }
            LogicalMessage::QueryResp { in_reply_to, balance, .. } => {
                let fulfilled = match self.queries.get_mut(&in_reply_to) {
                    Some(q) if q.state == QueryState::Waiting => {
                        q.state = match balance {
                            Some(balance) => QueryState::Fulfilled { balance },
                            None => QueryState::UnknownAccount,
                        };
                        true
                    }
                    _ => false,
                };
                if fulfilled {
                    log.push(
                        now,
                        &self.config.name,
                        "query.answered",
                        json!({"msgid": in_reply_to.to_string(), "balance": balance}),
                    );
                    self.confirm(in_reply_to, now, log);
                } else {
                    log.push(now, &self.config.name, "query.unmatched", json!({"in_reply_to": in_reply_to.to_string()}));
                }
            }
            LogicalMessage::Result { in_reply_to, status, .. } => match status {
                ResultStatus::Ok => self.confirm(in_reply_to, now, log),
                ResultStatus::Err => {
                    if !self.advance(in_reply_to, RecordStatus::Failed, now, log) {
                        log.push(now, &self.config.name, "result.ignored", json!({"in_reply_to": in_reply_to.to_string()}));
                    }
                }
            },
            LogicalMessage::Alert { id, .. } => {
                log.push(now, &self.config.name, "routing_anomaly", json!({"msgid": id.to_string(), "kind": "ALR"}));
            }
        }
    }

    /// An application-level reply implies every segment arrived, so a SENT
    /// record passes through DELIVERED first.
    fn confirm(&mut self, id: MessageId, now: Tick, log: &mut EventLog) {
        if self.log_table.get(&id).is_some_and(|r| r.status == RecordStatus::Sent) {
            self.advance(id, RecordStatus::Delivered, now, log);
        }
        if !self.advance(id, RecordStatus::Confirmed, now, log) {
            log.push(now, &self.config.name, "result.ignored", json!({"in_reply_to": id.to_string()}));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smsc::{EndpointKind, FaultModel};

    fn phone(s: &str) -> PhoneNumber {
        PhoneNumber::new(s).unwrap()
    }

    fn site(name: &str, tag: u8, own: &str, peer: &str) -> SiteNode {
        SiteNode::new(SiteConfig {
            name: name.into(),
            tag,
            gateway: phone(own),
            peer_gateway: phone(peer),
            key_person: phone("79100"),
            dba: phone("79200"),
            key: SecretKey(7),
            rules: BusinessRules { allowable_amount: 10_000 },
            max_retries: 3,
            query_timeout: 50,
            accounts: vec![(1001, 100_000)],
            objects: vec!["PKG_BILLING".into()],
        })
    }

    fn pair() -> (SiteNode, SiteNode) {
        (site("site1", 0x0A, "79001", "79002"), site("site2", 0x0B, "79002", "79001"))
    }

    fn smsc() -> Smsc {
        let mut s = Smsc::new(FaultModel::default(), 1000).unwrap();
        for (n, k) in [
            ("79001", EndpointKind::SiteGateway),
            ("79002", EndpointKind::SiteGateway),
            ("79100", EndpointKind::Phone),
            ("79200", EndpointKind::Phone),
        ] {
            s.register_endpoint(phone(n), k).unwrap();
        }
        s
    }

    fn activate(s: &mut SiteNode, log: &mut EventLog) {
        s.set_control(Control::Channel, true, 0, log);
        s.set_control(Control::Job, true, 0, log);
    }

    fn statuses(s: &SiteNode) -> Vec<RecordStatus> {
        s.records().map(|r| r.status).collect()
    }

    #[test]
    fn local_update_threshold() {
        let (mut s, _) = pair();
        let mut log = EventLog::new();
        assert_eq!(s.local_update(1001, 5_000, 0, &mut log).unwrap(), 105_000);
        assert_eq!(s.records().count(), 0);
        assert_eq!(s.local_update(1001, 15_000, 0, &mut log).unwrap(), 120_000);
        let recs: Vec<_> = s.records().collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].status, RecordStatus::Pending);
        assert_eq!(recs[0].destination, phone("79100"));
        assert!(matches!(recs[0].message, LogicalMessage::Alert { code: AlertCode::Susp, .. }));
        // exactly at the threshold is not a breach
        s.local_update(1001, -10_000, 0, &mut log).unwrap();
        assert_eq!(s.records().count(), 1);
        assert_eq!(s.local_update(9, 1, 0, &mut log), Err(SiteError::UnknownAccount(9)));
        assert_eq!(s.read_balance(1001).unwrap(), 110_000);
    }

    #[test]
    fn remote_update_modes() {
        let (mut a, mut b) = pair();
        let mut log = EventLog::new();
        assert_eq!(
            a.remote_update(&mut b, 1001, -25_000, 0, &mut log).unwrap(),
            RemoteOutcome::Applied { balance: 75_000 }
        );
        assert_eq!(b.read_balance(1001).unwrap(), 75_000);

        a.set_control(Control::Link, false, 0, &mut log);
        assert_eq!(a.remote_update(&mut b, 1001, -25_000, 0, &mut log), Err(SiteError::LinkDown));
        assert_eq!(b.read_balance(1001).unwrap(), 75_000);
        assert_eq!(a.records().count(), 0);

        a.set_control(Control::Channel, true, 0, &mut log);
        a.set_control(Control::Channel, true, 0, &mut log);
        assert!(a.flags().sms_channel_on);
        let out = a.remote_update(&mut b, 1001, -25_000, 0, &mut log).unwrap();
        let RemoteOutcome::Queued { id } = out else { panic!("expected queue") };
        assert_eq!(id.to_string(), "0A000001");
        let kinds: Vec<&str> = a.records().map(|r| r.message.tag()).collect();
        assert_eq!(kinds, vec!["TXN", "ALR"]);
        assert_eq!(b.read_balance(1001).unwrap(), 75_000);
    }

    #[test]
    fn job_off_leaves_rows_pending() {
        let (mut a, mut b) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        a.set_control(Control::Link, false, 0, &mut log);
        a.set_control(Control::Channel, true, 0, &mut log);
        a.remote_update(&mut b, 1001, 1, 0, &mut log).unwrap();
        a.local_update(1001, 50_000, 0, &mut log).unwrap();
        assert_eq!(a.records().count(), 3);
        for t in 1..5 {
            c.tick(t, &mut log).unwrap();
            a.poll(t, &mut c, &mut log);
        }
        assert!(statuses(&a).iter().all(|s| *s == RecordStatus::Pending));
        assert!(a.gateway().out_rows().is_empty());
    }

    #[test]
    fn poll_sends_pending_rows() {
        let (mut a, mut b) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        activate(&mut a, &mut log);
        a.set_control(Control::Link, false, 0, &mut log);
        let RemoteOutcome::Queued { id } = a.remote_update(&mut b, 1001, -25_000, 0, &mut log).unwrap() else {
            panic!()
        };
        a.poll(1, &mut c, &mut log);
        assert_eq!(a.record(id).unwrap().status, RecordStatus::Sent);
        let out = a.gateway().out_rows();
        assert!(!out.is_empty());
        // every row maps to one record, and counts match ceil(len/138)
        for rec in a.records() {
            let text = wire::encode_message(&rec.message).unwrap();
            let expect = (2 * text.len()).div_ceil(138).max(1);
            assert_eq!(out.iter().filter(|s| s.msgid() == rec.id).count(), expect);
        }
    }

    #[test]
    fn invalidate_then_scan() {
        let (mut a, _) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        a.invalidate_object("PKG_BILLING", 0, &mut log).unwrap();
        a.invalidate_object("PKG_BILLING", 0, &mut log).unwrap();
        assert!(!a.object("PKG_BILLING").unwrap().valid);
        assert!(!a.object("PKG_BILLING").unwrap().alerted);
        assert_eq!(a.records().count(), 0);
        assert_eq!(
            a.invalidate_object("NOPE", 0, &mut log),
            Err(SiteError::UnknownObject("NOPE".into()))
        );
        // disabled job also silences the scanner
        a.poll(1, &mut c, &mut log);
        assert_eq!(a.records().count(), 0);
        activate(&mut a, &mut log);
        a.poll(2, &mut c, &mut log);
        a.poll(3, &mut c, &mut log);
        let recs: Vec<_> = a.records().collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].destination, phone("79200"));
        assert!(a.object("PKG_BILLING").unwrap().alerted);
    }

    fn txn(counter: u32, account: u64, delta: i64) -> LogicalMessage {
        LogicalMessage::Txn {
            id: MessageId::new(0x0A, counter).unwrap(),
            account,
            delta,
        }
    }

    fn replies(s: &SiteNode) -> Vec<(ResultStatus, MessageId)> {
        s.records()
            .filter_map(|r| match r.message {
                LogicalMessage::Result { status, in_reply_to, .. } => Some((status, in_reply_to)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn dispatch_txn_once() {
        let (_, mut b) = pair();
        let mut log = EventLog::new();
        b.dispatch_incoming(txn(1, 1001, -25_000), 0, &mut log);
        assert_eq!(b.read_balance(1001).unwrap(), 75_000);
        b.dispatch_incoming(txn(1, 1001, -25_000), 1, &mut log);
        assert_eq!(b.read_balance(1001).unwrap(), 75_000);
        let id = MessageId::new(0x0A, 1).unwrap();
        assert_eq!(replies(&b), vec![(ResultStatus::Ok, id), (ResultStatus::Ok, id)]);
        assert!(b.applied().contains(id));
    }

    #[test]
    fn dispatch_txn_unknown_account() {
        let (_, mut b) = pair();
        let mut log = EventLog::new();
        b.dispatch_incoming(txn(4, 4242, 10), 0, &mut log);
        assert_eq!(b.read_balance(1001).unwrap(), 100_000);
        let id = MessageId::new(0x0A, 4).unwrap();
        assert_eq!(replies(&b), vec![(ResultStatus::Err, id)]);
        b.dispatch_incoming(txn(4, 4242, 10), 0, &mut log);
        assert_eq!(replies(&b)[1], (ResultStatus::Err, id));
    }

    #[test]
    fn dispatch_alert_is_anomaly() {
        let (_, mut b) = pair();
        let mut log = EventLog::new();
        b.dispatch_incoming(
            LogicalMessage::Alert {
                id: MessageId::new(0x0A, 1).unwrap(),
                code: AlertCode::Link,
                text: "X".into(),
            },
            0,
            &mut log,
        );
        assert_eq!(b.records().count(), 0);
        assert_eq!(log.records().last().unwrap().event, "routing_anomaly");
    }

    #[test]
    fn incomplete_inbound_group_waits() {
        let (a, mut b) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        activate(&mut b, &mut log);
        let long = LogicalMessage::Alert {
            id: MessageId::new(0x0A, 9).unwrap(),
            code: AlertCode::Susp,
            text: "X".repeat(80),
        };
        let segs = wire::pack(&long, a.config().key, &phone("79001"), &phone("79002")).unwrap();
        assert_eq!(segs.len(), 2);
        b.receive_segment(segs[0].clone(), 1, &mut log);
        b.poll(1, &mut c, &mut log);
        assert_eq!(b.gateway().in_row_count(), 1);
        assert_eq!(b.gateway().quarantined().count(), 0);
        b.receive_segment(segs[1].clone(), 2, &mut log);
        b.poll(2, &mut c, &mut log);
        assert_eq!(b.gateway().in_row_count(), 0);
    }

    #[test]
    fn corrupted_inbound_group_quarantined() {
        let (_, mut b) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        activate(&mut b, &mut log);
        let seg = &wire::pack(&txn(1, 1001, 5), SecretKey(7), &phone("79001"), &phone("79002")).unwrap()[0];
        let mut frame = seg.render();
        let last = frame.pop().unwrap();
        frame.push(if last == '0' { '1' } else { '0' });
        let bad = SmsSegment::parse(&frame, phone("79001"), phone("79002")).unwrap();
        b.receive_segment(bad, 1, &mut log);
        b.poll(1, &mut c, &mut log);
        b.poll(2, &mut c, &mut log);
        assert_eq!(b.gateway().quarantined().count(), 1);
        assert_eq!(b.read_balance(1001).unwrap(), 100_000);
        let quarantines = log.records().iter().filter(|r| r.event == "OZEKIMESSAGEIN.quarantine").count();
        assert_eq!(quarantines, 1);
    }

    #[test]
    fn wrong_key_is_quarantined() {
        let (_, mut b) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        activate(&mut b, &mut log);
        for seg in wire::pack(&txn(1, 1001, 5), SecretKey(8), &phone("79001"), &phone("79002")).unwrap() {
            b.receive_segment(seg, 1, &mut log);
        }
        b.poll(1, &mut c, &mut log);
        assert_eq!(b.gateway().quarantined().count(), 1);
        assert_eq!(b.read_balance(1001).unwrap(), 100_000);
    }

    #[test]
    fn remote_query_modes() {
        let (mut a, mut b) = pair();
        let mut log = EventLog::new();
        assert_eq!(a.remote_query(&b, 1001, 0, &mut log).unwrap(), QueryOutcome::Balance(100_000));
        assert_eq!(a.remote_query(&b, 5, 0, &mut log), Err(SiteError::UnknownAccount(5)));
        a.set_control(Control::Link, false, 0, &mut log);
        assert_eq!(a.remote_query(&b, 1001, 0, &mut log), Err(SiteError::LinkDown));
        a.set_control(Control::Channel, true, 0, &mut log);
        let QueryOutcome::Pending(id) = a.remote_query(&b, 1001, 3, &mut log).unwrap() else { panic!() };
        assert_eq!(a.query(id).unwrap().state, QueryState::Waiting);

        b.dispatch_incoming(LogicalMessage::QueryReq { id, account: 1001 }, 4, &mut log);
        b.dispatch_incoming(LogicalMessage::QueryReq { id, account: 1001 }, 4, &mut log);
        let answers: Vec<LogicalMessage> = b.records().map(|r| r.message.clone()).collect();
        assert_eq!(answers.len(), 2);
        let LogicalMessage::QueryResp { balance, in_reply_to, .. } = answers[0].clone() else { panic!() };
        assert_eq!((balance, in_reply_to), (Some(100_000), id));
        a.dispatch_incoming(answers[0].clone(), 5, &mut log);
        assert_eq!(a.query(id).unwrap().state, QueryState::Fulfilled { balance: 100_000 });
        // second answer does not overwrite the terminal state
        a.dispatch_incoming(answers[1].clone(), 6, &mut log);
        assert_eq!(a.query(id).unwrap().state, QueryState::Fulfilled { balance: 100_000 });
    }

    #[test]
    fn query_times_out() {
        let (mut a, b) = pair();
        let mut log = EventLog::new();
        let mut c = smsc();
        a.set_control(Control::Link, false, 0, &mut log);
        a.set_control(Control::Channel, true, 0, &mut log);
        let QueryOutcome::Pending(id) = a.remote_query(&b, 1001, 10, &mut log).unwrap() else { panic!() };
        c.tick(59, &mut log).unwrap();
        a.poll(59, &mut c, &mut log);
        assert_eq!(a.query(id).unwrap().state, QueryState::Waiting);
        c.tick(60, &mut log).unwrap();
        a.poll(60, &mut c, &mut log);
        assert_eq!(a.query(id).unwrap().state, QueryState::TimedOut);
    }

    #[test]
    fn unknown_account_query_answer_is_sentinel() {
        let (mut a, mut b) = pair();
        let mut log = EventLog::new();
        a.set_control(Control::Link, false, 0, &mut log);
        a.set_control(Control::Channel, true, 0, &mut log);
        let QueryOutcome::Pending(id) = a.remote_query(&b, 31337, 0, &mut log).unwrap() else { panic!() };
        b.dispatch_incoming(LogicalMessage::QueryReq { id, account: 31337 }, 1, &mut log);
        let resp = b.records().next().unwrap().message.clone();
        assert!(wire::encode_message(&resp).unwrap().ends_with("|ERR"));
        a.dispatch_incoming(resp, 2, &mut log);
        assert_eq!(a.query(id).unwrap().state, QueryState::UnknownAccount);
    }

    #[test]
    fn expired_segments_retried_then_failed() {
        let (mut a, mut b) = pair();
        let mut log = EventLog::new();
        let fault = FaultModel { loss_prob: 1.0, ..FaultModel::default() };
        let mut c = Smsc::new(fault, 3).unwrap();
        c.register_endpoint(phone("79001"), EndpointKind::SiteGateway).unwrap();
        c.register_endpoint(phone("79002"), EndpointKind::SiteGateway).unwrap();
        c.register_endpoint(phone("79100"), EndpointKind::Phone).unwrap();
        activate(&mut a, &mut log);
        a.set_control(Control::Link, false, 0, &mut log);
        let RemoteOutcome::Queued { id } = a.remote_update(&mut b, 1001, 1, 0, &mut log).unwrap() else { panic!() };
        for t in 1..40 {
            c.tick(t, &mut log).unwrap();
            a.poll(t, &mut c, &mut log);
        }
        let rec = a.record(id).unwrap();
        assert_eq!(rec.status, RecordStatus::Failed);
        assert_eq!(rec.retries, 3);
        assert_eq!(rec.history, vec![RecordStatus::Pending, RecordStatus::Sent, RecordStatus::Failed]);
    }

    #[test]
    fn status_transitions() {
        use RecordStatus::*;
        assert!(Pending.can_advance_to(Sent));
        assert!(!Pending.can_advance_to(Delivered));
        assert!(!Pending.can_advance_to(Failed));
        assert!(!Confirmed.can_advance_to(Failed));
        assert!(!Delivered.can_advance_to(Sent));
        assert!(Delivered.can_advance_to(Failed));
    }
}
