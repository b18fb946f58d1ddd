//! The built-in scenarios.
//!
//! Times are logical milliseconds. The warehouse scenario runs on
//! time-of-day milliseconds so its trace reads as `14:23:18.310` and so on.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::admissibility::PremiseKind;
use crate::composed::LagPolicy;
use crate::error::{Error, Result};
use crate::kernel::Layer;
use crate::layers::{parse_int, Expect, Transition};
use crate::semantic::{Embedder, HashEmbedder, PrototypeLabel, PrototypeSet, SemanticOutput, Transformation};

use super::runtime::{Action, Job, Latency, Plan, ReadSpec, Route, Scenario};
use super::{Mode, ScenarioConfig, DEFAULT_LAKEHOUSE_PERIOD_MS, DEFAULT_REPLICA_LAG_MS};

pub const SCENARIOS: &[&str] = &[
    "warehouse",
    "checkout",
    "load_sweep",
    "failure_matrix",
    "failure_matrix/full",
    "failure_matrix/no_temporal",
    "failure_matrix/no_concurrency",
    "failure_matrix/no_transactional",
    "failure_matrix/no_semantic",
];

/// The lag key a sweep varies for each scenario.
pub fn primary_lag_key(scenario: &str) -> &'static str {
    match scenario {
        "checkout" => "lakehouse",
        _ => "replica",
    }
}

pub(crate) fn build(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    match config.scenario.as_str() {
        "warehouse" => Ok(warehouse(config, rng)),
        "checkout" => Ok(checkout(config, rng)),
        "load_sweep" => Ok(load_sweep(config, rng)),
        "failure_matrix" => Ok(failure_matrix(config, FailureVariant::Full, rng)),
        other => match other.strip_prefix("failure_matrix/") {
            Some(variant) => Ok(failure_matrix(config, variant.parse()?, rng)),
            None => Err(Error::UnknownScenario(other.to_string())),
        },
    }
}

fn sub(name: &str) -> String {
    name.to_string()
}

fn hot_state_policy(config: &ScenarioConfig) -> (&'static str, LagPolicy) {
    if let Some(ms) = config.lag("cache") {
        ("cache", LagPolicy::cache_ttl(ms))
    } else if let Some(ms) = config.lag("index") {
        ("index", LagPolicy::index_refresh(ms))
    } else if let Some(ms) = config.lag("batch") {
        ("batch", LagPolicy::batch_refresh(ms))
    } else {
        ("replica", LagPolicy::replica_lag(config.lag("replica").unwrap_or(DEFAULT_REPLICA_LAG_MS)))
    }
}

fn lakehouse_policy(config: &ScenarioConfig) -> LagPolicy {
    LagPolicy::batch_refresh(config.lag("lakehouse").unwrap_or(DEFAULT_LAKEHOUSE_PERIOD_MS))
}

fn non_negative(_: Option<&[u8]>, proposed: Option<&[u8]>) -> std::result::Result<(), String> {
    match proposed.map(parse_int) {
        Some(Some(n)) if n < 0 => Err(format!("inventory cannot go negative ({n})")),
        Some(None) => Err("inventory must be an integer".into()),
        _ => Ok(()),
    }
}

fn noise(s: &mut Scenario, rng: &mut ChaCha8Rng, count: std::ops::RangeInclusive<u32>, window: std::ops::Range<u64>) {
    let n = rng.gen_range(count);
    for k in 0..n {
        let t = rng.gen_range(window.clone());
        s.observe(t, "telemetry", &format!("sensor heartbeat {k}"));
    }
}

/// Warehouse timeline, as milliseconds since midnight (14:23:18.xxx).
pub mod warehouse_times {
    /// 14:23:18.000
    pub const SETUP: u64 = 51_798_000;
    pub const RETURN_RECEIVED: u64 = 51_798_200;
    pub const ORDER_PLACED: u64 = 51_798_250;
    pub const RESTOCK: u64 = 51_798_300;
    pub const CORRECTION: u64 = 51_798_310;
    pub const SHIPPING_READ: u64 = 51_798_350;
    pub const ESCALATION: u64 = 51_798_400;
}

fn warehouse(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Scenario {
    use warehouse_times::*;

    let (hot_name, hot_policy) = hot_state_policy(config);
    let route: Route = Box::new(move |layer, key: &[u8]| match layer {
        Layer::State if key.starts_with(b"inv:") => sub(hot_name),
        Layer::State => sub("oltp"),
        Layer::Episodic => sub("log"),
        Layer::Semantic => sub("lakehouse"),
    });
    let mut s = Scenario::new(config, route);
    s.subsystems = vec![
        (sub("oltp"), Layer::State, LagPolicy::immediate()),
        (sub(hot_name), Layer::State, hot_policy),
        (sub("log"), Layer::Episodic, LagPolicy::immediate()),
    ];
    s.validators.push((b"inv:".to_vec(), non_negative));

    s.setup(SETUP, &[("inv:SKU1", "2")]);
    noise(&mut s, rng, 2..=6, RETURN_RECEIVED..ESCALATION);
    s.observe(RETURN_RECEIVED, "dock", "return received: 1 unit SKU1, counted as available");
    s.observe(ORDER_PLACED, "storefront", "order O1 requires 2 units SKU1");
    s.at(ORDER_PLACED, Action::Peek { agent: "shipping".into(), reads: vec![ReadSpec::state("inv:SKU1")] });

    s.job(
        RESTOCK,
        Job::new("restock-return-SKU1", "restocking", vec![ReadSpec::episode("dock")], |obs| {
            match obs.episode("dock") {
                Some(ep) if ep.payload_text().starts_with("return received") => {
                    Plan::now().episode("return unit defective, SKU1: correct available inventory by -1")
                }
                _ => Plan::now().episode("no returns to inspect"),
            }
        }),
    );
    s.job(
        CORRECTION,
        Job::new(
            "apply-correction-SKU1",
            "inventory",
            vec![ReadSpec::episode("restocking"), ReadSpec::state("inv:SKU1")],
            |obs| {
                let units = obs.int("inv:SKU1").unwrap_or(0);
                let defective = obs.episode("restocking").is_some_and(|e| e.payload_text().contains("defective"));
                if defective {
                    let t = Transition::set(Expect::Equals(units.to_string().into_bytes()), (units - 1).to_string());
                    Plan::now().write("inv:SKU1", t)
                } else {
                    Plan::now().episode("inventory unchanged")
                }
            },
        ),
    );
    s.job(
        SHIPPING_READ,
        Job::new(
            "ship-O1",
            "shipping",
            vec![ReadSpec::episode("storefront"), ReadSpec::state("inv:SKU1")],
            |obs| {
                let required = obs
                    .episode("storefront")
                    .and_then(|e| e.payload_text().split_whitespace().nth(3).and_then(|n| n.parse::<i64>().ok()))
                    .unwrap_or(0);
                let units = obs.int("inv:SKU1").unwrap_or(0);
                if units >= required {
                    Plan::now()
                        .write("inv:SKU1", Transition::set(Expect::AtLeast(required), (units - required).to_string()))
                        .write("order:O1", Transition::set(Expect::Absent, "committed"))
                        .external(format!("ship O1: {required} units SKU1"))
                } else {
                    Plan::after(ESCALATION - SHIPPING_READ)
                        .write("escalation:O1", Transition::set(Expect::Absent, "split-shipment"))
                        .external("escalate O1 for split shipment approval")
                }
            },
        ),
    );
    s
}

pub fn default_prototypes() -> PrototypeSet {
    let label = |l: &str, p: &str| PrototypeLabel { label: l.into(), prototype: p.into() };
    PrototypeSet {
        labels: vec![
            label("direct-arrival-no-browse", "direct arrival on checkout url with no browse and a new payment method"),
            label("browse-then-buy", "browse catalog product page search results add to cart"),
            label("returning-customer", "returning customer saved address repeat purchase"),
        ],
    }
}

/// A versioned transformation labelling an account's clickstream with its
/// nearest behavior prototype.
fn behavior_patterns(prototypes: &PrototypeSet) -> Transformation {
    let embedder = HashEmbedder;
    let protos: Vec<_> = prototypes.labels.iter().map(|l| (l.label.clone(), embedder.embed(l.prototype.as_bytes()))).collect();
    let protos = Arc::new(protos);
    Transformation::new("behavior_patterns", 1, move |episodes| {
        let Some(first) = episodes.first() else { return Vec::new() };
        let account = first.source.strip_prefix("clickstream:").unwrap_or(&first.source);
        let summary = episodes.iter().map(|e| e.payload_text()).collect::<Vec<_>>().join(" ");
        let query = embedder.embed(summary.as_bytes());
        let mut best: Option<(&str, f64)> = None;
        for (label, proto) in protos.iter() {
            let score = query.cosine(proto);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((label, score));
            }
        }
        let Some((label, _)) = best else { return Vec::new() };
        vec![SemanticOutput { key: format!("behavior:{account}").into_bytes(), interpretation: label.as_bytes().to_vec() }]
    })
}

fn route_with_lakehouse(layer: Layer, key: &[u8]) -> String {
    match layer {
        Layer::State if key.starts_with(b"pair:y") => sub("replica"),
        Layer::State => sub("oltp"),
        Layer::Episodic => sub("log"),
        Layer::Semantic => sub("lakehouse"),
    }
}

fn review_policy(order_key: &'static str, behavior_key: &'static str, delay: u64) -> impl Fn(&super::Observation) -> Plan {
    move |obs| {
        let order = order_key.trim_start_matches("order:");
        if obs.text(behavior_key).as_deref() == Some("direct-arrival-no-browse") {
            Plan::after(delay)
                .write(order_key, Transition::set(Expect::Absent, "held-for-review"))
                .external(format!("hold {order} for review"))
        } else {
            Plan::after(delay)
                .write(order_key, Transition::set(Expect::Absent, "shipped"))
                .external(format!("ship {order}"))
        }
    }
}

fn checkout(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Scenario {
    let mut s = Scenario::new(config, Box::new(route_with_lakehouse));
    s.subsystems = vec![
        (sub("oltp"), Layer::State, LagPolicy::immediate()),
        (sub("log"), Layer::Episodic, LagPolicy::immediate()),
        (sub("lakehouse"), Layer::Semantic, lakehouse_policy(config)),
    ];
    let prototypes = config.prototypes.clone().unwrap_or_else(default_prototypes);
    s.transforms.push(behavior_patterns(&prototypes));
    s.prototypes = prototypes.labels.iter().map(|l| (l.label.clone(), l.prototype.clone())).collect();

    s.setup(0, &[("acct:42:status", "active")]);
    let n = rng.gen_range(3..=8);
    for k in 0..n {
        let t = rng.gen_range(90..130);
        let acct = rng.gen_range(100..200);
        s.observe(t, &format!("clickstream:acct:{acct}"), &format!("browse catalog product page {k}"));
    }
    s.observe(100, "clickstream:acct:42", "direct arrival on checkout url");
    s.observe(105, "clickstream:acct:42", "no product browse before checkout");
    s.observe(110, "clickstream:acct:42", "new payment method added at checkout");
    s.at(200, Action::Transform { id: "behavior_patterns".into(), version: 1, source: "clickstream:acct:42".into() });
    s.observe(290, "storefront", "purchase P1 acct:42 amount 1200");
    s.job(
        300,
        Job::new(
            "checkout-P1",
            "checkout",
            vec![ReadSpec::episode("storefront"), ReadSpec::semantic("behavior:acct:42")],
            review_policy("order:P1", "behavior:acct:42", 20),
        ),
    );
    s
}

/// One wave of `2 * C` agents arriving within less than one base latency.
fn load_wave(s: &mut Scenario, rng: &mut ChaCha8Rng, start: u64, wave: usize, agents: usize, base: u64) {
    for i in 0..agents {
        let key = format!("load:agent{i}");
        let jitter = if base > 0 { rng.gen_range(0..base) } else { 0 };
        let job = Job::new(&format!("load-w{wave}-a{i}"), &format!("agent{i}"), vec![ReadSpec::state(&key)], move |obs| {
            let n = obs.int(&key).unwrap_or(0);
            Plan::now().write(&key, Transition::set(Expect::Equals(n.to_string().into_bytes()), (n + 1).to_string()))
        })
        .with_latency(Latency::PerInFlight(base));
        s.job(start + jitter, job);
    }
}

fn load_base(config: &ScenarioConfig) -> u64 {
    (config.delta_ms - 1) / config.max_concurrent as u64
}

fn load_sweep(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Scenario {
    let mut s = Scenario::new(config, Box::new(route_with_lakehouse));
    s.subsystems = vec![(sub("oltp"), Layer::State, LagPolicy::immediate())];
    let agents = 2 * config.max_concurrent;
    let keys: Vec<(String, String)> = (0..agents).map(|i| (format!("load:agent{i}"), "0".to_string())).collect();
    let refs: Vec<(&str, &str)> = keys.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    s.setup(0, &refs);
    let base = load_base(config);
    let period = 4 * config.delta_ms.max(agents as u64 * base);
    for wave in 0..10 {
        load_wave(&mut s, rng, 1_000 + wave as u64 * period, wave, agents, base);
    }
    s
}

/// Degraded configurations of the failure matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureVariant {
    Full,
    /// Δ unbounded: coherent but stale.
    NoTemporal,
    /// Admission control off: decisions miss their window under load.
    NoConcurrency,
    /// Composed subsystems: fast but incoherent.
    NoTransactional,
    /// Agent-local interpretations: identical data, incompatible meaning.
    NoSemantic,
}

impl FailureVariant {
    pub const ALL: [FailureVariant; 5] = [
        FailureVariant::Full,
        FailureVariant::NoTemporal,
        FailureVariant::NoConcurrency,
        FailureVariant::NoTransactional,
        FailureVariant::NoSemantic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FailureVariant::Full => "full",
            FailureVariant::NoTemporal => "no_temporal",
            FailureVariant::NoConcurrency => "no_concurrency",
            FailureVariant::NoTransactional => "no_transactional",
            FailureVariant::NoSemantic => "no_semantic",
        }
    }

    pub fn scenario(&self) -> String {
        format!("failure_matrix/{}", self.name())
    }

    /// The violation code this configuration is expected to exhibit.
    pub fn symptom(&self) -> Option<&'static str> {
        match self {
            FailureVariant::Full => None,
            FailureVariant::NoTemporal => Some("InvalidOutcome"),
            FailureVariant::NoConcurrency => Some("StalePremise"),
            FailureVariant::NoTransactional => Some("MixedCut"),
            FailureVariant::NoSemantic => Some("ImplicitSemantics"),
        }
    }
}

impl FromStr for FailureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownScenario(format!("failure_matrix/{s}")))
    }
}

fn failure_matrix(config: &ScenarioConfig, variant: FailureVariant, rng: &mut ChaCha8Rng) -> Scenario {
    let mut s = Scenario::new(config, Box::new(route_with_lakehouse));
    s.mode = Mode::ContextLake;
    match variant {
        FailureVariant::NoTemporal => s.envelope.delta_ms = u64::MAX,
        FailureVariant::NoConcurrency => s.admission_control = false,
        FailureVariant::NoTransactional => s.mode = Mode::Composed,
        FailureVariant::Full | FailureVariant::NoSemantic => {}
    }
    s.subsystems = vec![
        (sub("oltp"), Layer::State, LagPolicy::immediate()),
        (sub("replica"), Layer::State, LagPolicy::replica_lag(config.lag("replica").unwrap_or(DEFAULT_REPLICA_LAG_MS))),
        (sub("log"), Layer::Episodic, LagPolicy::immediate()),
        (sub("lakehouse"), Layer::Semantic, lakehouse_policy(config)),
    ];
    let prototypes = config.prototypes.clone().unwrap_or_else(default_prototypes);
    s.transforms.push(behavior_patterns(&prototypes));

    s.setup(0, &[("limit:acct7", "500"), ("pair:x", "100"), ("pair:y", "0")]);

    // A: the planner defers past Δ while the limit changes underneath it.
    s.job(
        1_000,
        Job::new("plan-spend-acct7", "planner", vec![ReadSpec::state("limit:acct7")], |obs| {
            if obs.int("limit:acct7").unwrap_or(0) >= 400 {
                Plan::after(300)
                    .write("spend:acct7", Transition::set(Expect::Absent, "approved 400"))
                    .external("approve spend of 400 for acct7")
            } else {
                Plan::after(300).write("spend:acct7", Transition::set(Expect::Absent, "declined"))
            }
        }),
    );
    s.setup(1_100, &[("limit:acct7", "0")]);

    // B: a burst at twice the concurrency envelope.
    let agents = 2 * config.max_concurrent;
    let keys: Vec<(String, String)> = (0..agents).map(|i| (format!("load:agent{i}"), "0".to_string())).collect();
    let refs: Vec<(&str, &str)> = keys.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    s.setup(1_500, &refs);
    load_wave(&mut s, rng, 2_000, 0, agents, load_base(config));

    // C: an atomic two-key transfer read back by an auditor.
    noise(&mut s, rng, 1..=4, 4_900..5_100);
    s.setup(5_000, &[("pair:x", "40"), ("pair:y", "60")]);
    s.job(
        5_020,
        Job::new("audit-pair", "auditor", vec![ReadSpec::state("pair:x"), ReadSpec::state("pair:y")], |obs| {
            let total = obs.int("pair:x").unwrap_or(0) + obs.int("pair:y").unwrap_or(0);
            Plan::now().write("audit:pair", Transition::set(Expect::Any, total.to_string()))
        }),
    );

    // D: an interpretation of the same clickstream.
    s.observe(7_900, "clickstream:acct:9", "direct arrival on checkout url");
    s.observe(7_905, "clickstream:acct:9", "new payment method added at checkout");
    let behavior = if variant == FailureVariant::NoSemantic {
        s.setup(7_950, &[("note:behavior:acct:9", "regular customer")]);
        ReadSpec::state("note:behavior:acct:9").cited_as(PremiseKind::Semantic)
    } else {
        s.at(7_950, Action::Transform { id: "behavior_patterns".into(), version: 1, source: "clickstream:acct:9".into() });
        ReadSpec::semantic("behavior:acct:9")
    };
    let behavior_key = if variant == FailureVariant::NoSemantic { "note:behavior:acct:9" } else { "behavior:acct:9" };
    s.job(
        8_000,
        Job::new("review-order-A9", "reviewer", vec![behavior], review_policy("order:A9", behavior_key, 0)),
    );
    s
}
