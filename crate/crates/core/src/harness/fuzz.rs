//! Randomized transaction batches under injected faults, checked against
//! exactly-once and conservation invariants derived from the event log.

use std::collections::BTreeMap;

use super::{build_world, run_until, HarnessError, SiteId, World};
use crate::config::WorldConfig;
use crate::event::Tick;
use crate::rng::SplitMix64;
use crate::site::{RecordStatus, RemoteOutcome, SiteNode};
use crate::wire::{LogicalMessage, MessageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxnPlan {
    pub account: u64,
    pub delta: i64,
    /// Issue with the database link up instead of failing over.
    pub via_link: bool,
}

pub struct BatchOutcome {
    pub world: World,
    pub queued: Vec<MessageId>,
    pub ticks: Tick,
}

/// Issues every planned TXN from site 1 with the model active, one tick
/// apart, then ticks until every queued TXN row is terminal and the
/// channel is drained.
pub fn run_batch(config: WorldConfig, plans: &[TxnPlan]) -> Result<BatchOutcome, HarnessError> {
    let mut world = build_world(config)?;
    world.set_model(true);
    let mut queued = Vec::new();
    for plan in plans {
        world.set_link(plan.via_link);
        if let Ok(RemoteOutcome::Queued { id }) = world.remote_update(SiteId::Site1, plan.account, plan.delta) {
            queued.push(id);
        }
        world.tick();
    }
    world.set_link(false);
    let cfg = world.config().clone();
    let budget = cfg.validity_period * (Tick::from(cfg.max_retries) + 2) + cfg.settle_ticks;
    let ticks = run_until(&mut world, |w| settled(w, &queued), budget)?;
    Ok(BatchOutcome { world, queued, ticks })
}

fn settled(world: &World, queued: &[MessageId]) -> bool {
    let site1 = world.site(SiteId::Site1);
    queued
        .iter()
        .all(|id| site1.record(*id).is_some_and(|r| r.status.is_terminal()))
        && world.smsc().in_transit_count() == 0
        && [SiteId::Site1, SiteId::Site2].iter().all(|s| {
            world
                .site(*s)
                .records()
                .all(|r| r.status != RecordStatus::Pending)
        })
}

/// Count of `ledger.apply` events carrying each SMS message id, per component.
pub fn sms_applies(world: &World) -> BTreeMap<(String, String), usize> {
    let mut counts = BTreeMap::new();
    for r in world.log().records() {
        if r.event == "ledger.apply" {
            if let Some(id) = r.detail_str("msgid") {
                *counts.entry((r.component.clone(), id.to_owned())).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Replays every logged ledger mutation against the initial balances.
pub fn replay_balances(world: &World, component: &str) -> BTreeMap<u64, i64> {
    let mut balances: BTreeMap<u64, i64> = world.config().accounts.iter().copied().collect();
    for r in world.log().records() {
        if r.component == component && r.event == "ledger.apply" {
            let account = r.details.get("account").and_then(|v| v.as_u64());
            let delta = r.detail_i64("delta");
            if let (Some(a), Some(d)) = (account, delta) {
                *balances.entry(a).or_insert(0) += d;
            }
        }
    }
    balances
}

fn history_is_legal(history: &[RecordStatus]) -> bool {
    history.first() == Some(&RecordStatus::Pending)
        && history.windows(2).all(|w| w[0].can_advance_to(w[1]))
}

/// Every invariant violation found in a settled batch.
pub fn check_batch(outcome: &BatchOutcome, plans: &[TxnPlan]) -> Vec<String> {
    let world = &outcome.world;
    let mut failures = Vec::new();

    for ((component, id), n) in sms_applies(world) {
        if n > 1 {
            failures.push(format!("{component} applied {id} {n} times"));
        }
    }

    let mut expected: BTreeMap<u64, i64> = world.config().accounts.iter().copied().collect();
    for p in plans {
        if let Some(b) = expected.get_mut(&p.account) {
            *b += p.delta;
        }
    }
    let site2 = world.site(SiteId::Site2);
    if site2.ledger().accounts() != &expected {
        failures.push(format!(
            "site2 ledger {:?} != initial + distinct deltas {:?}",
            site2.ledger().accounts(),
            expected
        ));
    }

    for (id, node) in [("site1", world.site(SiteId::Site1)), ("site2", site2)] {
        let replayed = replay_balances(world, id);
        if &replayed != node.ledger().accounts() {
            failures.push(format!("{id} ledger diverges from replay of its applied deltas"));
        }
        check_records(node, &mut failures);
    }

    let site1 = world.site(SiteId::Site1);
    for id in &outcome.queued {
        match site1.record(*id).map(|r| r.status) {
            Some(RecordStatus::Confirmed) => {}
            other => failures.push(format!("TXN {id} ended {other:?}, not CONFIRMED")),
        }
    }
    let txn_rows = site1
        .records()
        .filter(|r| matches!(r.message, LogicalMessage::Txn { .. }))
        .count();
    let link_rows = site1
        .records()
        .filter(|r| matches!(r.message, LogicalMessage::Alert { .. }))
        .count();
    if txn_rows != outcome.queued.len() || link_rows != outcome.queued.len() {
        failures.push(format!(
            "{} failovers produced {txn_rows} TXN rows and {link_rows} alert rows",
            outcome.queued.len()
        ));
    }
    failures
}

fn check_records(node: &SiteNode, failures: &mut Vec<String>) {
    for r in node.records() {
        if !history_is_legal(&r.history) {
            failures.push(format!("{} record {} has illegal history {:?}", node.name(), r.id, r.history));
        }
        let expect = r
            .segments()
            .len();
        let rows = node.gateway().out_rows().iter().filter(|s| s.msgid() == r.id).count();
        if rows != expect {
            failures.push(format!("{} record {} has {rows} OZEKIMESSAGEOUT rows, expected {expect}", node.name(), r.id));
        }
    }
}

/// Random fault model and TXN batch for iteration `i` of a campaign.
pub fn random_case(base: &WorldConfig, rng: &mut SplitMix64) -> (WorldConfig, Vec<TxnPlan>) {
    let config = WorldConfig {
        seed: rng.next_u64(),
        key: rng.next_u64(),
        loss_prob: rng.range_inclusive(0, 50) as f64 / 100.0,
        dup_prob: rng.range_inclusive(0, 30) as f64 / 100.0,
        delay_min: 1,
        delay_max: rng.range_inclusive(1, 5),
        ..base.clone()
    };
    let accounts: Vec<u64> = config.accounts.iter().map(|(a, _)| *a).collect();
    let n = rng.range_inclusive(1, 30);
    let plans = (0..n)
        .filter(|_| !accounts.is_empty())
        .map(|_| {
            let magnitude = rng.range_inclusive(1, 50_000) as i64;
            TxnPlan {
                account: accounts[rng.range_inclusive(0, accounts.len() as u64 - 1) as usize],
                delta: if rng.chance(0.5) { -magnitude } else { magnitude },
                via_link: rng.chance(0.25),
            }
        })
        .collect();
    (config, plans)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub seed: u64,
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub delay_max: Tick,
    pub txns: usize,
    pub queued: usize,
    pub ticks: Tick,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FuzzSummary {
    pub iterations: Vec<IterationStats>,
}

impl FuzzSummary {
    pub fn passed(&self) -> bool {
        self.iterations.iter().all(|i| i.failures.is_empty())
    }

    pub fn failures(&self) -> impl Iterator<Item = String> + '_ {
        self.iterations.iter().flat_map(|i| {
            i.failures
                .iter()
                .map(move |f| format!("iteration {}: {f}", i.iteration))
        })
    }
}

/// `iterations` random cases drawn from a stream seeded by `base.seed`.
pub fn run_campaign(base: &WorldConfig, iterations: u64) -> FuzzSummary {
    let mut rng = SplitMix64::new(base.seed);
    let mut summary = FuzzSummary::default();
    for iteration in 0..iterations {
        let (config, plans) = random_case(base, &mut rng);
        let mut stats = IterationStats {
            iteration,
            seed: config.seed,
            loss_prob: config.loss_prob,
            dup_prob: config.dup_prob,
            delay_max: config.delay_max,
            txns: plans.len(),
            queued: 0,
            ticks: 0,
            failures: Vec::new(),
        };
        match run_batch(config, &plans) {
            Ok(outcome) => {
                stats.queued = outcome.queued.len();
                stats.ticks = outcome.ticks;
                stats.failures = check_batch(&outcome, &plans);
            }
            Err(e) => stats.failures.push(e.to_string()),
        }
        summary.iterations.push(stats);
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_free_batch_is_clean() {
        let plans: Vec<TxnPlan> = (0..10)
            .map(|i| TxnPlan {
                account: 1001,
                delta: 100 * (i + 1),
                via_link: i % 3 == 0,
            })
            .collect();
        let outcome = run_batch(WorldConfig::default(), &plans).unwrap();
        assert!(check_batch(&outcome, &plans).is_empty());
        assert_eq!(outcome.queued.len(), 6);
        assert_eq!(
            outcome.world.site(SiteId::Site2).read_balance(1001).unwrap(),
            100_000 + 5_500
        );
    }

    #[test]
    fn small_campaign_passes() {
        let summary = run_campaign(&WorldConfig::default(), 10);
        assert!(summary.passed(), "{:#?}", summary.failures().collect::<Vec<_>>());
        assert_eq!(summary.iterations.len(), 10);
        assert!(summary.iterations.iter().any(|i| i.queued > 0));
    }

    #[test]
    fn checker_catches_tampered_ledger() {
        let plans = [TxnPlan {
            account: 1001,
            delta: 7,
            via_link: false,
        }];
        let mut outcome = run_batch(WorldConfig::default(), &plans).unwrap();
        // an unlogged mutation breaks both the replay and the expected total
        let now = outcome.world.clock();
        let mut scratch = crate::event::EventLog::new();
        outcome
            .world
            .site_mut(SiteId::Site2)
            .local_update(1001, 1, now, &mut scratch)
            .unwrap();
        let failures = check_batch(&outcome, &plans);
        assert!(failures.iter().any(|f| f.contains("replay")));
        assert!(failures.iter().any(|f| f.contains("distinct deltas")));
    }
}
