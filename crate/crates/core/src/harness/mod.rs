//! Two-site world on a single tick clock.
//!
//! Each [`World::tick`] advances the clock by one, runs the SMSC, moves
//! frames that reached a site gateway into that site's `OZEKIMESSAGEIN`,
//! then polls site 1 and site 2 in that order. Nothing else schedules
//! work, so a run is a pure function of its config and script.

pub mod fuzz;
pub mod scenario;

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, WorldConfig};
use crate::event::{EventLog, Tick};
use crate::site::{
    BusinessRules, Control, QueryOutcome, RemoteOutcome, SiteConfig, SiteError, SiteNode,
};
use crate::smsc::{EndpointKind, FaultModel, PhoneNumber, Smsc};
use crate::wire::{self, LogicalMessage, MessageId, SecretKey, SmsSegment, WireError};

pub use scenario::{run_scenario, run_twice, Scenario, ScenarioReport, ScenarioScript, StepOutcome};

pub const SITE1_TAG: u8 = 0x0A;
pub const SITE2_TAG: u8 = 0x0B;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("predicate not satisfied after {ticks} ticks")]
    Timeout { ticks: Tick },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteId {
    Site1,
    Site2,
}

pub struct World {
    site1: SiteNode,
    site2: SiteNode,
    smsc: Smsc,
    key_person: PhoneNumber,
    dba: PhoneNumber,
    clock: Tick,
    config: WorldConfig,
    log: EventLog,
    sink: Option<Box<dyn Write>>,
    sink_error: Option<io::Error>,
}

fn number(field: &'static str, s: &str) -> Result<PhoneNumber, ConfigError> {
    PhoneNumber::new(s).map_err(|e| ConfigError::Invalid {
        field,
        reason: e.to_string(),
    })
}

/// Two sites with gateways registered, both phones registered, link up,
/// SMS channel and job off.
pub fn build_world(config: WorldConfig) -> Result<World, HarnessError> {
    config.validate()?;
    let site1_no = number("site1_number", &config.site1_number)?;
    let site2_no = number("site2_number", &config.site2_number)?;
    let key_person = number("key_person_number", &config.key_person_number)?;
    let dba = number("dba_number", &config.dba_number)?;

    let fault = FaultModel {
        loss_prob: config.loss_prob,
        dup_prob: config.dup_prob,
        delay_min: config.delay_min,
        delay_max: config.delay_max,
        seed: config.seed,
    };
    let invalid = |e: crate::smsc::SmscError| ConfigError::Invalid {
        field: "smsc",
        reason: e.to_string(),
    };
    let mut smsc = Smsc::new(fault, config.validity_period).map_err(invalid)?;
    for (n, kind) in [
        (&site1_no, EndpointKind::SiteGateway),
        (&site2_no, EndpointKind::SiteGateway),
        (&key_person, EndpointKind::Phone),
        (&dba, EndpointKind::Phone),
    ] {
        smsc.register_endpoint(n.clone(), kind).map_err(invalid)?;
    }

    let site = |name: &str, tag, own: &PhoneNumber, peer: &PhoneNumber| {
        SiteNode::new(SiteConfig {
            name: name.into(),
            tag,
            gateway: own.clone(),
            peer_gateway: peer.clone(),
            key_person: key_person.clone(),
            dba: dba.clone(),
            key: SecretKey(config.key),
            rules: BusinessRules {
                allowable_amount: config.allowable_amount,
            },
            max_retries: config.max_retries,
            query_timeout: config.query_timeout,
            accounts: config.accounts.clone(),
            objects: config.objects.clone(),
        })
    };
    let site1 = site("site1", SITE1_TAG, &site1_no, &site2_no);
    let site2 = site("site2", SITE2_TAG, &site2_no, &site1_no);

    let mut log = EventLog::new();
    log.push(
        0,
        "harness",
        "world.build",
        json!({
            "seed": config.seed,
            "loss_prob": config.loss_prob,
            "dup_prob": config.dup_prob,
            "delay_min": config.delay_min,
            "delay_max": config.delay_max,
            "validity_period": config.validity_period,
            "site1": site1_no.as_str(),
            "site2": site2_no.as_str(),
            "key_person": key_person.as_str(),
            "dba": dba.as_str(),
        }),
    );
    Ok(World {
        site1,
        site2,
        smsc,
        key_person,
        dba,
        clock: 0,
        config,
        log,
        sink: None,
        sink_error: None,
    })
}

impl World {
    /// Streams the event log to `sink`, flushed after every tick.
    pub fn with_sink(mut self, sink: Box<dyn Write>) -> Self {
        self.sink = Some(sink);
        self.flush_log();
        self
    }

    pub fn clock(&self) -> Tick {
        self.clock
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn smsc(&self) -> &Smsc {
        &self.smsc
    }

    pub fn site(&self, id: SiteId) -> &SiteNode {
        match id {
            SiteId::Site1 => &self.site1,
            SiteId::Site2 => &self.site2,
        }
    }

    pub fn site_mut(&mut self, id: SiteId) -> &mut SiteNode {
        match id {
            SiteId::Site1 => &mut self.site1,
            SiteId::Site2 => &mut self.site2,
        }
    }

    pub fn key_person(&self) -> &PhoneNumber {
        &self.key_person
    }

    pub fn dba(&self) -> &PhoneNumber {
        &self.dba
    }

    pub fn set_control(&mut self, site: SiteId, which: Control, on: bool) {
        let now = self.clock;
        match site {
            SiteId::Site1 => self.site1.set_control(which, on, now, &mut self.log),
            SiteId::Site2 => self.site2.set_control(which, on, now, &mut self.log),
        }
        self.flush_log();
    }

    /// The database link is shared; both sites see the same state.
    pub fn set_link(&mut self, up: bool) {
        self.set_control(SiteId::Site1, Control::Link, up);
        self.set_control(SiteId::Site2, Control::Link, up);
    }

    /// Switches SMS channel and SMS job together on both sites.
    pub fn set_model(&mut self, on: bool) {
        for site in [SiteId::Site1, SiteId::Site2] {
            self.set_control(site, Control::Channel, on);
            self.set_control(site, Control::Job, on);
        }
    }

    pub fn local_update(&mut self, site: SiteId, account: u64, delta: i64) -> Result<i64, SiteError> {
        let now = self.clock;
        let r = match site {
            SiteId::Site1 => self.site1.local_update(account, delta, now, &mut self.log),
            SiteId::Site2 => self.site2.local_update(account, delta, now, &mut self.log),
        };
        self.flush_log();
        r
    }

    pub fn remote_update(&mut self, origin: SiteId, account: u64, delta: i64) -> Result<RemoteOutcome, SiteError> {
        let now = self.clock;
        let r = match origin {
            SiteId::Site1 => self.site1.remote_update(&mut self.site2, account, delta, now, &mut self.log),
            SiteId::Site2 => self.site2.remote_update(&mut self.site1, account, delta, now, &mut self.log),
        };
        self.flush_log();
        r
    }

    pub fn remote_query(&mut self, origin: SiteId, account: u64) -> Result<QueryOutcome, SiteError> {
        let now = self.clock;
        let r = match origin {
            SiteId::Site1 => self.site1.remote_query(&self.site2, account, now, &mut self.log),
            SiteId::Site2 => self.site2.remote_query(&self.site1, account, now, &mut self.log),
        };
        self.flush_log();
        r
    }

    pub fn invalidate_object(&mut self, site: SiteId, name: &str) -> Result<(), SiteError> {
        let now = self.clock;
        let r = match site {
            SiteId::Site1 => self.site1.invalidate_object(name, now, &mut self.log),
            SiteId::Site2 => self.site2.invalidate_object(name, now, &mut self.log),
        };
        self.flush_log();
        r
    }

    pub fn set_reachable(&mut self, number: &PhoneNumber, reachable: bool) -> Result<(), crate::smsc::SmscError> {
        let r = self.smsc.set_reachable(number, reachable, self.clock, &mut self.log);
        self.flush_log();
        r
    }

    /// SMSC, then site 1, then site 2.
    pub fn tick(&mut self) {
        self.clock += 1;
        let now = self.clock;
        self.smsc
            .tick(now, &mut self.log)
            .expect("world clock strictly increases");
        for id in [SiteId::Site1, SiteId::Site2] {
            let gateway = self.site(id).config().gateway.clone();
            let arrived = self.smsc.take_inbox(&gateway).expect("gateway registered");
            let site = match id {
                SiteId::Site1 => &mut self.site1,
                SiteId::Site2 => &mut self.site2,
            };
            for seg in arrived {
                site.receive_segment(seg, now, &mut self.log);
            }
        }
        self.site1.poll(now, &mut self.smsc, &mut self.log);
        self.site2.poll(now, &mut self.smsc, &mut self.log);
        self.flush_log();
    }

    pub fn flush_log(&mut self) {
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = self.log.flush_to(sink.as_mut()) {
                self.sink_error.get_or_insert(e);
            }
        }
    }

    pub fn take_sink_error(&mut self) -> Option<io::Error> {
        self.sink_error.take()
    }

    pub fn phone_inbox(&self, number: &PhoneNumber) -> &[SmsSegment] {
        self.smsc.inbox(number).unwrap_or(&[])
    }

    /// Groups a phone's inbox by message id and decrypts each group with the
    /// shared key.
    pub fn phone_messages(&self, number: &PhoneNumber) -> BTreeMap<MessageId, Result<LogicalMessage, WireError>> {
        let mut groups: BTreeMap<MessageId, Vec<&SmsSegment>> = BTreeMap::new();
        for seg in self.phone_inbox(number) {
            groups.entry(seg.msgid()).or_default().push(seg);
        }
        let key = SecretKey(self.config.key);
        groups
            .into_iter()
            .map(|(id, segs)| (id, wire::unpack(segs, key)))
            .collect()
    }
}

/// Ticks until `pred` holds. Returns the number of ticks used.
pub fn run_until<F>(world: &mut World, mut pred: F, max_ticks: Tick) -> Result<Tick, HarnessError>
where
    F: FnMut(&World) -> bool,
{
    let mut ticks = 0;
    while !pred(world) {
        if ticks == max_ticks {
            return Err(HarnessError::Timeout { ticks });
        }
        world.tick();
        ticks += 1;
    }
    Ok(ticks)
}
