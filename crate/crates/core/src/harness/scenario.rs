//! The four continuity scenarios as assertion-bearing scripts.
//!
//! Each step's outcome is appended to the world's event log as a
//! `harness`/`step` record, so a report serializes in the same line format
//! as the rest of the run.

use serde_json::json;

use super::{build_world, run_until, HarnessError, SiteId, World};
use crate::config::WorldConfig;
use crate::event::{EventRecord, Tick};
use crate::site::{QueryOutcome, QueryState, RecordStatus, RemoteOutcome, SiteError};
use crate::wire::{AlertCode, LogicalMessage, MessageId};
use crate::smsc::PhoneNumber;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Recover from a database-link disruption.
    LinkRecovery = 1,
    /// Alert the key person about a suspicious transaction.
    SuspiciousTransaction = 2,
    /// Alert the DBA about an invalid database object.
    InvalidObject = 3,
    /// Query the remote database.
    RemoteQuery = 4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::LinkRecovery,
        Scenario::SuspiciousTransaction,
        Scenario::InvalidObject,
        Scenario::RemoteQuery,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Scenario {
    type Error = u8;

    fn try_from(n: u8) -> Result<Self, u8> {
        match n {
            1 => Ok(Scenario::LinkRecovery),
            2 => Ok(Scenario::SuspiciousTransaction),
            3 => Ok(Scenario::InvalidObject),
            4 => Ok(Scenario::RemoteQuery),
            other => Err(other),
        }
    }
}

/// Inputs to the scripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioScript {
    pub account: u64,
    /// Remote modification used in scenario 1.
    pub delta: i64,
    /// Local modification used in scenario 2; must exceed the allowable
    /// amount for the scenario to pass.
    pub suspicious_delta: i64,
    pub object: String,
}

impl ScenarioScript {
    pub fn for_config(config: &WorldConfig) -> Self {
        Self {
            account: config.accounts.first().map_or(1001, |(a, _)| *a),
            delta: -25_000,
            suspicious_delta: i64::try_from(config.allowable_amount)
                .unwrap_or(i64::MAX - 1)
                .saturating_add(5_000),
            object: config
                .objects
                .first()
                .cloned()
                .unwrap_or_else(|| "PKG_BILLING".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: u8,
    pub steps: Vec<StepOutcome>,
    pub passed: bool,
    pub log: Vec<EventRecord>,
}

impl ScenarioReport {
    pub fn first_failure(&self) -> Option<&StepOutcome> {
        self.steps.iter().find(|s| !s.passed)
    }

    pub fn render_log(&self) -> String {
        self.log.iter().map(|r| r.to_line() + "\n").collect()
    }
}

struct Steps<'w> {
    world: &'w mut World,
    scenario: u8,
    steps: Vec<StepOutcome>,
}

impl Steps<'_> {
    /// Records a step. Returns whether it passed so scripts can stop early.
    fn record(&mut self, label: &str, passed: bool, detail: String) -> bool {
        let tick = self.world.clock();
        self.world.log_mut().push(
            tick,
            "harness",
            "step",
            json!({
                "scenario": self.scenario,
                "step": self.steps.len() + 1,
                "label": label,
                "passed": passed,
                "detail": detail,
            }),
        );
        self.steps.push(StepOutcome {
            label: label.to_owned(),
            passed,
            detail,
        });
        passed
    }
}

/// Runs one scenario against `world`, which should be freshly built.
pub fn run_scenario(scenario: Scenario, world: &mut World, script: &ScenarioScript) -> ScenarioReport {
    let n = scenario.number();
    let tick = world.clock();
    world
        .log_mut()
        .push(tick, "harness", "scenario_start", json!({"scenario": n}));
    let mut steps = Steps {
        world,
        scenario: n,
        steps: Vec::new(),
    };
    match scenario {
        Scenario::LinkRecovery => link_recovery(&mut steps, script),
        Scenario::SuspiciousTransaction => suspicious_transaction(&mut steps, script),
        Scenario::InvalidObject => invalid_object(&mut steps, script),
        Scenario::RemoteQuery => remote_query(&mut steps, script),
    }
    let Steps { world, steps, .. } = steps;
    let passed = !steps.is_empty() && steps.iter().all(|s| s.passed);
    let tick = world.clock();
    world
        .log_mut()
        .push(tick, "harness", "scenario_end", json!({"scenario": n, "passed": passed}));
    world.flush_log();
    ScenarioReport {
        scenario: n,
        steps,
        passed,
        log: world.log().records().to_vec(),
    }
}

/// Two independent runs from one config. `identical` means both passed and
/// the event logs match byte for byte.
pub fn run_twice(
    scenario: Scenario,
    config: &WorldConfig,
    script: &ScenarioScript,
) -> Result<(ScenarioReport, ScenarioReport, bool), HarnessError> {
    run_twice_with(scenario, config, script, |w| w)
}

/// As [`run_twice`], with a hook to decorate each world before it runs
/// (the CLI uses it to attach a log sink).
pub fn run_twice_with<F>(
    scenario: Scenario,
    config: &WorldConfig,
    script: &ScenarioScript,
    mut prepare: F,
) -> Result<(ScenarioReport, ScenarioReport, bool), HarnessError>
where
    F: FnMut(World) -> World,
{
    let mut first_world = prepare(build_world(config.clone())?);
    let first = run_scenario(scenario, &mut first_world, script);
    let mut second_world = prepare(build_world(config.clone())?);
    let second = run_scenario(scenario, &mut second_world, script);
    let identical = first.passed
        && second.passed
        && first_world.log().render() == second_world.log().render();
    Ok((first, second, identical))
}

fn alert_received(world: &World, phone: &PhoneNumber, id: MessageId, code: AlertCode) -> Option<String> {
    match world.phone_messages(phone).get(&id) {
        Some(Ok(LogicalMessage::Alert { code: c, text, .. })) if *c == code => Some(text.clone()),
        _ => None,
    }
}

fn settle(world: &World) -> Tick {
    world.config().settle_ticks
}

fn link_recovery(s: &mut Steps, script: &ScenarioScript) {
    let account = script.account;
    let delta = script.delta;
    let Ok(initial) = s.world.site(SiteId::Site2).read_balance(account) else {
        s.record("Step 1: link available, modify remote balance", false, format!("account {account} not configured"));
        return;
    };

    s.world.set_link(true);
    let r = s.world.remote_update(SiteId::Site1, account, delta);
    let ok = matches!(r, Ok(RemoteOutcome::Applied { .. }));
    if !s.record("Step 1: link available, modify remote balance", ok, format!("{r:?}")) {
        return;
    }

    let after_link = s.world.site(SiteId::Site2).read_balance(account);
    let expect = initial + delta;
    if !s.record(
        "Step 2: modification occurred",
        after_link == Ok(expect),
        format!("remote balance {after_link:?}, expected {expect}"),
    ) {
        return;
    }

    s.world.set_link(false);
    s.world.set_model(false);
    let rows_before = s.world.site(SiteId::Site1).records().count();
    let r = s.world.remote_update(SiteId::Site1, account, delta);
    s.world.tick();
    let after_off = s.world.site(SiteId::Site2).read_balance(account);
    let rows_after = s.world.site(SiteId::Site1).records().count();
    let ok = r == Err(SiteError::LinkDown) && after_off == Ok(expect) && rows_after == rows_before;
    if !s.record(
        "Step 3: link disrupted, model OFF, modification not submitted",
        ok,
        format!("{r:?}, remote balance {after_off:?}, new rows {}", rows_after - rows_before),
    ) {
        return;
    }

    s.world.set_model(true);
    let r = s.world.remote_update(SiteId::Site1, account, delta);
    let Ok(RemoteOutcome::Queued { id }) = r else {
        s.record("Step 4: link disrupted, model ON, modification submitted", false, format!("{r:?}"));
        return;
    };
    let link_alert = s
        .world
        .site(SiteId::Site1)
        .records()
        .find(|rec| matches!(rec.message, LogicalMessage::Alert { code: AlertCode::Link, .. }))
        .map(|rec| rec.id);
    let expect = expect + delta;
    let key_person = s.world.key_person().clone();
    let done = |w: &World| {
        w.site(SiteId::Site2).read_balance(account) == Ok(expect)
            && w.site(SiteId::Site1).record(id).map(|r| r.status) == Some(RecordStatus::Confirmed)
            && link_alert.is_some_and(|a| alert_received(w, &key_person, a, AlertCode::Link).is_some())
    };
    let max = settle(s.world);
    let r = run_until(s.world, done, max);
    let status = s.world.site(SiteId::Site1).record(id).map(|r| r.status);
    let balance = s.world.site(SiteId::Site2).read_balance(account);
    s.record(
        "Step 4: link disrupted, model ON, modification submitted",
        r.is_ok(),
        format!(
            "txn {id} status {status:?}, remote balance {balance:?} expected {expect}, link alert {}, settle {r:?}",
            link_alert.map_or_else(|| "none".to_owned(), |a| a.to_string())
        ),
    );
}

fn suspicious_transaction(s: &mut Steps, script: &ScenarioScript) {
    let account = script.account;
    let delta = script.suspicious_delta;
    s.world.set_model(true);
    let before = s.world.site(SiteId::Site1).read_balance(account);
    let r = s.world.local_update(SiteId::Site1, account, delta);
    let ok = matches!((&before, &r), (Ok(b), Ok(a)) if *a == b + delta);
    if !s.record(
        "Step 1: model ON, local modification exceeding allowable amount",
        ok,
        format!("before {before:?}, after {r:?}"),
    ) {
        return;
    }

    let susp: Vec<MessageId> = s
        .world
        .site(SiteId::Site1)
        .records()
        .filter(|rec| matches!(rec.message, LogicalMessage::Alert { code: AlertCode::Susp, .. }))
        .map(|rec| rec.id)
        .collect();
    if !s.record(
        "Step 2: modification occurred, alert row in SMS-log table",
        susp.len() == 1,
        format!("{} SUSP rows", susp.len()),
    ) {
        return;
    }
    let id = susp[0];

    let key_person = s.world.key_person().clone();
    let max = settle(s.world);
    let r = run_until(
        s.world,
        |w| alert_received(w, &key_person, id, AlertCode::Susp).is_some(),
        max,
    );
    let out = out_frames(s.world, id);
    let received = inbox_frames(s.world, &key_person, id);
    let text = alert_received(s.world, &key_person, id, AlertCode::Susp);
    s.record(
        "Step 3: alert in OZEKIMESSAGEOUT and received by key person",
        r.is_ok() && !out.is_empty() && out == received,
        format!("{} OZEKIMESSAGEOUT rows, key person got {text:?}, settle {r:?}", out.len()),
    );
}

fn out_frames(world: &World, id: MessageId) -> Vec<String> {
    world
        .site(SiteId::Site1)
        .gateway()
        .out_rows()
        .iter()
        .filter(|seg| seg.msgid() == id)
        .map(|seg| seg.render())
        .collect()
}

fn inbox_frames(world: &World, phone: &PhoneNumber, id: MessageId) -> Vec<String> {
    let mut frames: Vec<String> = world
        .phone_inbox(phone)
        .iter()
        .filter(|seg| seg.msgid() == id)
        .map(|seg| seg.render())
        .collect();
    frames.sort();
    frames.dedup();
    frames
}

fn invalid_object(s: &mut Steps, script: &ScenarioScript) {
    let name = script.object.as_str();
    s.world.set_model(true);
    let r = s.world.invalidate_object(SiteId::Site1, name);
    let invalid = s.world.site(SiteId::Site1).object(name).is_some_and(|o| !o.valid);
    if !s.record(
        "Step 1: model ON, database object made invalid",
        r.is_ok() && invalid,
        format!("{r:?}"),
    ) {
        return;
    }

    let iobj = |w: &World| -> Vec<MessageId> {
        w.site(SiteId::Site1)
            .records()
            .filter(|rec| matches!(&rec.message, LogicalMessage::Alert { code: AlertCode::Iobj, text, .. } if text == name))
            .map(|rec| rec.id)
            .collect()
    };
    let max = settle(s.world);
    let r = run_until(s.world, |w| !iobj(w).is_empty(), max);
    let rows = iobj(s.world);
    if !s.record(
        "Step 2: alert row in SMS-log table",
        r.is_ok() && rows.len() == 1,
        format!("{} IOBJ rows for {name}", rows.len()),
    ) {
        return;
    }
    let id = rows[0];

    let dba = s.world.dba().clone();
    let r = run_until(s.world, |w| alert_received(w, &dba, id, AlertCode::Iobj).is_some(), max);
    let out = out_frames(s.world, id);
    let received = inbox_frames(s.world, &dba, id);
    let text = alert_received(s.world, &dba, id, AlertCode::Iobj);
    let iobj_alerts = s
        .world
        .phone_messages(&dba)
        .values()
        .filter(|m| matches!(m, Ok(LogicalMessage::Alert { code: AlertCode::Iobj, .. })))
        .count();
    s.record(
        "Step 3: alert in OZEKIMESSAGEOUT and received by DBA",
        r.is_ok()
            && text.as_deref() == Some(name)
            && iobj_alerts == 1
            && rows.len() == iobj(s.world).len()
            && !out.is_empty()
            && out == received,
        format!("{} OZEKIMESSAGEOUT rows, DBA got {text:?}, settle {r:?}", out.len()),
    );
}

fn remote_query(s: &mut Steps, script: &ScenarioScript) {
    let account = script.account;
    s.world.set_link(true);
    let truth = s.world.site(SiteId::Site2).read_balance(account);
    let r = s.world.remote_query(SiteId::Site1, account);
    let ok = matches!((&r, &truth), (Ok(QueryOutcome::Balance(b)), Ok(t)) if b == t);
    if !s.record(
        "Step 1: link available, query remote balance",
        ok,
        format!("{r:?}, remote balance {truth:?}"),
    ) {
        return;
    }

    s.world.set_link(false);
    s.world.set_model(false);
    let r = s.world.remote_query(SiteId::Site1, account);
    if !s.record(
        "Step 2: link disrupted, model OFF, query not fetched",
        r == Err(SiteError::LinkDown),
        format!("{r:?}"),
    ) {
        return;
    }

    s.world.set_model(true);
    let r = s.world.remote_query(SiteId::Site1, account);
    let Ok(QueryOutcome::Pending(id)) = r else {
        s.record("Step 3: link disrupted, model ON, data retrieved", false, format!("{r:?}"));
        return;
    };
    let max = settle(s.world);
    let settled = run_until(
        s.world,
        |w| w.site(SiteId::Site1).query(id).is_some_and(|q| q.state != QueryState::Waiting),
        max,
    );
    let state = s.world.site(SiteId::Site1).query(id).map(|q| q.state);
    let truth = s.world.site(SiteId::Site2).read_balance(account);
    let ok = matches!((state, &truth), (Some(QueryState::Fulfilled { balance }), Ok(t)) if balance == *t);
    let shown = match state {
        Some(QueryState::TimedOut) => "TIMED_OUT".to_owned(),
        other => format!("{other:?}"),
    };
    s.record(
        "Step 3: link disrupted, model ON, data retrieved",
        ok,
        format!("query {id} {shown}, remote balance {truth:?}, settle {settled:?}"),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(n: u8, config: WorldConfig, script: Option<ScenarioScript>) -> ScenarioReport {
        let script = script.unwrap_or_else(|| ScenarioScript::for_config(&config));
        let mut w = build_world(config).unwrap();
        run_scenario(Scenario::try_from(n).unwrap(), &mut w, &script)
    }

    #[test]
    fn all_scenarios_pass_on_defaults() {
        for n in 1..=4 {
            let r = run(n, WorldConfig::default(), None);
            assert!(r.passed, "scenario {n}: {:?}", r.first_failure());
        }
        assert_eq!(run(1, WorldConfig::default(), None).steps.len(), 4);
    }

    #[test]
    fn zero_query_timeout_fails_step_three() {
        let cfg = WorldConfig {
            query_timeout: 0,
            ..WorldConfig::default()
        };
        let r = run(4, cfg, None);
        assert!(!r.passed);
        let failed = r.first_failure().unwrap();
        assert!(failed.label.starts_with("Step 3"));
        assert!(failed.detail.contains("TIMED_OUT"), "{}", failed.detail);
    }

    #[test]
    fn below_threshold_delta_fails_step_two() {
        let cfg = WorldConfig::default();
        let script = ScenarioScript {
            suspicious_delta: 5_000,
            ..ScenarioScript::for_config(&cfg)
        };
        let r = run(2, cfg, Some(script));
        assert!(!r.passed);
        assert!(r.first_failure().unwrap().label.starts_with("Step 2"));
    }

    #[test]
    fn scenario_numbers() {
        assert!(Scenario::try_from(0).is_err());
        assert!(Scenario::try_from(5).is_err());
        for s in Scenario::ALL {
            assert_eq!(Scenario::try_from(s.number()), Ok(s));
        }
    }

    #[test]
    fn run_twice_is_deterministic() {
        for s in Scenario::ALL {
            let cfg = WorldConfig::default();
            let (a, b, identical) = run_twice(s, &cfg, &ScenarioScript::for_config(&cfg)).unwrap();
            assert!(a.passed && b.passed && identical);
            assert_eq!(a.render_log(), b.render_log());
        }
    }

    #[test]
    fn lossy_channel_still_passes() {
        for seed in [3, 4] {
            let cfg = WorldConfig {
                seed,
                loss_prob: 0.3,
                dup_prob: 0.2,
                delay_max: 3,
                ..WorldConfig::default()
            };
            for s in Scenario::ALL {
                let (a, b, identical) = run_twice(s, &cfg, &ScenarioScript::for_config(&cfg)).unwrap();
                assert!(a.passed && b.passed, "{s:?} seed {seed}: {:?}", a.first_failure());
                assert!(identical);
            }
        }
    }
}
