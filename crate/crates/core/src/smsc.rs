//! Store-and-forward short message centre.
//!
//! Segments are stored per submission and attempted once their delay has
//! elapsed and the recipient is reachable. A lost attempt is retried on the
//! next tick; only the validity period removes a segment undelivered. All
//! randomness comes from one seeded splitmix64 stream, drawn in
//! `(earliest_attempt, submission)` order, so runs replay exactly.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::event::{EventLog, Tick};
use crate::rng::SplitMix64;
use crate::wire::{MessageId, SmsSegment};

pub const DEFAULT_VALIDITY_PERIOD: Tick = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmscError {
    #[error("invalid phone number {0:?}: expected 5-15 decimal digits")]
    InvalidNumber(String),
    #[error("phone number {0} already registered")]
    DuplicateNumber(PhoneNumber),
    #[error("phone number {0} is not registered")]
    UnknownNumber(PhoneNumber),
    #[error("clock regression: tick {now} is not after {last}")]
    ClockRegression { now: Tick, last: Tick },
    #[error("invalid fault model: {0}")]
    InvalidFaultModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PhoneNumber(String);

impl PhoneNumber {
    pub fn new(digits: &str) -> Result<Self, SmscError> {
        if (5..=15).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Self(digits.to_owned()))
        } else {
            Err(SmscError::InvalidNumber(digits.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PhoneNumber {
    type Error = SmscError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(&s)
    }
}

impl From<PhoneNumber> for String {
    fn from(p: PhoneNumber) -> String {
        p.0
    }
}

impl fmt::Display for PhoneNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKind {
    SiteGateway,
    Phone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultModel {
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub delay_min: Tick,
    pub delay_max: Tick,
    pub seed: u64,
}

impl Default for FaultModel {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            dup_prob: 0.0,
            delay_min: 1,
            delay_max: 1,
            seed: 1,
        }
    }
}

impl FaultModel {
    pub fn validate(&self) -> Result<(), SmscError> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.loss_prob) {
            return Err(SmscError::InvalidFaultModel(format!(
                "loss_prob {} outside [0,1]",
                self.loss_prob
            )));
        }
        if !prob_ok(self.dup_prob) {
            return Err(SmscError::InvalidFaultModel(format!(
                "dup_prob {} outside [0,1]",
                self.dup_prob
            )));
        }
        if self.delay_min > self.delay_max {
            return Err(SmscError::InvalidFaultModel(format!(
                "delay_min {} > delay_max {}",
                self.delay_min, self.delay_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubmissionId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct InTransitRecord {
    pub segment: SmsSegment,
    pub submitted_at: Tick,
    pub earliest_attempt: Tick,
    pub attempts: u32,
    pub expired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportOutcome {
    Delivered,
    Expired,
}

impl ReportOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReportOutcome::Delivered => "DELIVERED",
            ReportOutcome::Expired => "EXPIRED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReport {
    pub msgid: MessageId,
    pub seq: u8,
    pub outcome: ReportOutcome,
    pub at: Tick,
}

#[derive(Debug)]
struct Endpoint {
    kind: EndpointKind,
    reachable: bool,
    inbox: Vec<SmsSegment>,
    reports: Vec<DeliveryReport>,
}

#[derive(Debug)]
pub struct Smsc {
    fault: FaultModel,
    validity_period: Tick,
    rng: SplitMix64,
    endpoints: BTreeMap<PhoneNumber, Endpoint>,
    store: BTreeMap<SubmissionId, InTransitRecord>,
    next_submission: u64,
    last_tick: Option<Tick>,
}

impl Smsc {
    pub fn new(fault: FaultModel, validity_period: Tick) -> Result<Self, SmscError> {
        fault.validate()?;
        Ok(Self {
            rng: SplitMix64::new(fault.seed),
            fault,
            validity_period,
            endpoints: BTreeMap::new(),
            store: BTreeMap::new(),
            next_submission: 0,
            last_tick: None,
        })
    }

    pub fn register_endpoint(
        &mut self,
        number: PhoneNumber,
        kind: EndpointKind,
    ) -> Result<(), SmscError> {
        if self.endpoints.contains_key(&number) {
            return Err(SmscError::DuplicateNumber(number));
        }
        self.endpoints.insert(
            number,
            Endpoint {
                kind,
                reachable: true,
                inbox: Vec::new(),
                reports: Vec::new(),
            },
        );
        Ok(())
    }

    fn endpoint(&self, number: &PhoneNumber) -> Result<&Endpoint, SmscError> {
        self.endpoints
            .get(number)
            .ok_or_else(|| SmscError::UnknownNumber(number.clone()))
    }

    fn endpoint_mut(&mut self, number: &PhoneNumber) -> Result<&mut Endpoint, SmscError> {
        self.endpoints
            .get_mut(number)
            .ok_or_else(|| SmscError::UnknownNumber(number.clone()))
    }

    pub fn kind(&self, number: &PhoneNumber) -> Result<EndpointKind, SmscError> {
        Ok(self.endpoint(number)?.kind)
    }

    pub fn is_reachable(&self, number: &PhoneNumber) -> Result<bool, SmscError> {
        Ok(self.endpoint(number)?.reachable)
    }

    /// Stores the segment regardless of recipient reachability. Routing
    /// uses the segment's own sender and recipient.
    pub fn submit(
        &mut self,
        segment: SmsSegment,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<SubmissionId, SmscError> {
        self.endpoint(segment.sender())?;
        self.endpoint(segment.recipient())?;
        let delay = self
            .rng
            .range_inclusive(self.fault.delay_min, self.fault.delay_max);
        let id = SubmissionId(self.next_submission);
        self.next_submission += 1;
        log.push(
            now,
            "smsc",
            "submit",
            json!({
                "submission": id.0,
                "from": segment.sender().as_str(),
                "to": segment.recipient().as_str(),
                "frame": segment.render(),
                "earliest_attempt": now + delay,
            }),
        );
        self.store.insert(
            id,
            InTransitRecord {
                segment,
                submitted_at: now,
                earliest_attempt: now + delay,
                attempts: 0,
                expired: false,
            },
        );
        Ok(id)
    }

    pub fn set_reachable(
        &mut self,
        number: &PhoneNumber,
        reachable: bool,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<(), SmscError> {
        let ep = self.endpoint_mut(number)?;
        if ep.reachable != reachable {
            ep.reachable = reachable;
            log.push(
                now,
                "smsc",
                "set_reachable",
                json!({"number": number.as_str(), "reachable": reachable}),
            );
        }
        Ok(())
    }

    /// Advances the centre to `now`, returning the deliveries made (a
    /// duplicated delivery appears twice).
    pub fn tick(
        &mut self,
        now: Tick,
        log: &mut EventLog,
    ) -> Result<Vec<(PhoneNumber, SmsSegment)>, SmscError> {
        if let Some(last) = self.last_tick {
            if now <= last {
                return Err(SmscError::ClockRegression { now, last });
            }
        }
        self.last_tick = Some(now);

        let mut order: Vec<(Tick, SubmissionId)> = self
            .store
            .iter()
            .map(|(id, r)| (r.earliest_attempt, *id))
            .collect();
        order.sort_unstable();

        let mut deliveries = Vec::new();
        for (_, id) in order {
            let record = self.store.get_mut(&id).expect("id taken from store");
            if now.saturating_sub(record.submitted_at) >= self.validity_period {
                record.expired = true;
                let record = self.store.remove(&id).expect("present");
                self.report(&record.segment, ReportOutcome::Expired, now);
                log.push(
                    now,
                    "smsc",
                    "expire",
                    json!({
                        "submission": id.0,
                        "msgid": record.segment.msgid().to_string(),
                        "seq": record.segment.seq(),
                        "attempts": record.attempts,
                    }),
                );
                continue;
            }
            if record.earliest_attempt > now {
                continue;
            }
            let reachable = self
                .endpoints
                .get(record.segment.recipient())
                .is_some_and(|ep| ep.reachable);
            if !reachable {
                continue;
            }
            if self.rng.chance(self.fault.loss_prob) {
                record.attempts += 1;
                record.earliest_attempt = now + 1;
                log.push(
                    now,
                    "smsc",
                    "loss",
                    json!({"submission": id.0, "attempts": record.attempts}),
                );
                continue;
            }
            let copies = if self.rng.chance(self.fault.dup_prob) { 2 } else { 1 };
            let mut record = self.store.remove(&id).expect("present");
            record.attempts += 1;
            let to = record.segment.recipient().clone();
            let ep = self.endpoints.get_mut(&to).expect("checked reachable");
            for _ in 0..copies {
                ep.inbox.push(record.segment.clone());
                deliveries.push((to.clone(), record.segment.clone()));
            }
            self.report(&record.segment, ReportOutcome::Delivered, now);
            log.push(
                now,
                "smsc",
                "deliver",
                json!({
                    "submission": id.0,
                    "to": to.as_str(),
                    "frame": record.segment.render(),
                    "copies": copies,
                }),
            );
        }
        Ok(deliveries)
    }

    fn report(&mut self, segment: &SmsSegment, outcome: ReportOutcome, at: Tick) {
        if let Some(ep) = self.endpoints.get_mut(segment.sender()) {
            ep.reports.push(DeliveryReport {
                msgid: segment.msgid(),
                seq: segment.seq(),
                outcome,
                at,
            });
        }
    }

    pub fn take_delivery_reports(
        &mut self,
        number: &PhoneNumber,
    ) -> Result<Vec<DeliveryReport>, SmscError> {
        Ok(std::mem::take(&mut self.endpoint_mut(number)?.reports))
    }

    pub fn inbox(&self, number: &PhoneNumber) -> Result<&[SmsSegment], SmscError> {
        Ok(&self.endpoint(number)?.inbox)
    }

    pub fn take_inbox(&mut self, number: &PhoneNumber) -> Result<Vec<SmsSegment>, SmscError> {
        Ok(std::mem::take(&mut self.endpoint_mut(number)?.inbox))
    }

    pub fn in_transit(&self) -> impl Iterator<Item = (&SubmissionId, &InTransitRecord)> {
        self.store.iter()
    }

    pub fn in_transit_count(&self) -> usize {
        self.store.len()
    }
}
