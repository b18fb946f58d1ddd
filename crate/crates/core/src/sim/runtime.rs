use std::collections::BTreeSet;
use std::sync::Arc;

use crate::admissibility::{self, DecisionRecord, Effect, Gated, PremiseKind, PremiseRef};
use crate::composed::{ComposedView, LagPolicy};
use crate::envelope::{EnvelopeConfig, EnvelopeController, EnvelopeMetrics, Slot};
use crate::error::{Error, Result};
use crate::kernel::{episode_key, CutId, Layer, LogicalTime, SimClock, Transaction};
use crate::layers::{parse_int, ContextLake, Episode, SemanticRecord, Transition};
use crate::semantic::Transformation;
use crate::trace::{self, Trace, TraceEvent, TransformRef};

use super::schedule::Schedule;
use super::{scenarios, Mode, ScenarioConfig};

/// What an agent asks for when it retrieves context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadSpec {
    Key { layer: Layer, key: Vec<u8>, kind: PremiseKind },
    /// The newest episode from `source`.
    LatestEpisode { source: String },
}

impl ReadSpec {
    pub fn state(key: &str) -> Self {
        ReadSpec::Key { layer: Layer::State, key: key.as_bytes().to_vec(), kind: PremiseKind::Base }
    }

    pub fn semantic(key: &str) -> Self {
        ReadSpec::Key { layer: Layer::Semantic, key: key.as_bytes().to_vec(), kind: PremiseKind::Semantic }
    }

    pub fn episode(source: &str) -> Self {
        ReadSpec::LatestEpisode { source: source.to_string() }
    }

    /// Same read, cited under a different premise kind.
    pub fn cited_as(self, kind: PremiseKind) -> Self {
        match self {
            ReadSpec::Key { layer, key, .. } => ReadSpec::Key { layer, key, kind },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observed {
    pub layer: Layer,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    pub cut: CutId,
    pub subsystem: Option<String>,
    pub kind: PremiseKind,
    pub episode: Option<Episode>,
}

/// Everything one retrieval returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub retrieved_at: LogicalTime,
    pub items: Vec<Observed>,
}

impl Observation {
    fn item(&self, key: &str) -> Option<&Observed> {
        self.items.iter().find(|o| o.key == key.as_bytes())
    }

    pub fn value(&self, key: &str) -> Option<&[u8]> {
        self.item(key)?.value.as_deref()
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.value(key).and_then(parse_int)
    }

    /// The value as text; semantic records yield their interpretation.
    pub fn text(&self, key: &str) -> Option<String> {
        let item = self.item(key)?;
        let value = item.value.as_deref()?;
        if item.layer == Layer::Semantic {
            return SemanticRecord::decode(&item.key, value).ok().map(|r| r.interpretation_text());
        }
        Some(String::from_utf8_lossy(value).into_owned())
    }

    pub fn episode(&self, source: &str) -> Option<&Episode> {
        self.items.iter().filter_map(|o| o.episode.as_ref()).find(|e| e.source == source)
    }

    pub fn premises(&self) -> Vec<PremiseRef> {
        self.items
            .iter()
            .map(|o| PremiseRef {
                layer: o.layer,
                key: o.key.clone(),
                cut: o.cut,
                retrieved_at: self.retrieved_at,
                kind: o.kind,
            })
            .collect()
    }
}

/// An agent's intended effects, decided `delay_ms` after its retrieval completes.
#[derive(Debug, Clone, Default)]
pub struct Plan {
    pub delay_ms: u64,
    pub writes: Vec<(Vec<u8>, Transition)>,
    pub episodes: Vec<String>,
    pub external: Vec<String>,
    pub opaque: bool,
}

impl Plan {
    pub fn now() -> Self {
        Self::default()
    }

    pub fn after(delay_ms: u64) -> Self {
        Self { delay_ms, ..Self::default() }
    }

    pub fn write(mut self, key: &str, transition: Transition) -> Self {
        self.writes.push((key.as_bytes().to_vec(), transition));
        self
    }

    pub fn episode(mut self, payload: impl Into<String>) -> Self {
        self.episodes.push(payload.into());
        self
    }

    pub fn external(mut self, action: impl Into<String>) -> Self {
        self.external.push(action.into());
        self
    }

    fn effects(&self) -> Vec<Effect> {
        let writes = self.writes.iter().map(|(key, t)| Effect::Write {
            layer: Layer::State,
            key: key.clone(),
            value: t.new_value.clone(),
        });
        let episodes = self.episodes.iter().map(|p| Effect::Episode { payload: p.clone() });
        let external = self.external.iter().map(|a| Effect::External { action: a.clone() });
        writes.chain(episodes).chain(external).collect()
    }
}

pub type Policy = Box<dyn Fn(&Observation) -> Plan>;

/// Time between issuing a retrieval and having its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    Fixed(u64),
    /// `base` times the number of decisions in flight, this one included.
    PerInFlight(u64),
}

pub struct Job {
    pub decision_id: String,
    pub agent: String,
    pub reads: Vec<ReadSpec>,
    pub latency: Latency,
    pub policy: Policy,
    /// Re-retrieve before deciding when the plan defers by Δ or more.
    pub refresh_on_deferral: bool,
}

impl Job {
    pub fn new(decision_id: &str, agent: &str, reads: Vec<ReadSpec>, policy: impl Fn(&Observation) -> Plan + 'static) -> Self {
        Self {
            decision_id: decision_id.to_string(),
            agent: agent.to_string(),
            reads,
            latency: Latency::Fixed(0),
            policy: Box::new(policy),
            refresh_on_deferral: true,
        }
    }

    pub fn with_latency(mut self, latency: Latency) -> Self {
        self.latency = latency;
        self
    }
}

pub(crate) enum Action {
    /// Environment state writes, committed together.
    Setup(Vec<(Vec<u8>, Option<Vec<u8>>)>),
    Observe { source: String, payload: String },
    Transform { id: String, version: u32, source: String },
    Peek { agent: String, reads: Vec<ReadSpec> },
    Start(usize),
    Decide(usize),
}

pub(crate) type Route = Box<dyn Fn(Layer, &[u8]) -> String>;

/// A scenario ready to run.
pub(crate) struct Scenario {
    pub mode: Mode,
    pub envelope: EnvelopeConfig,
    pub admission_control: bool,
    pub actions: Vec<(LogicalTime, Action)>,
    pub jobs: Vec<Job>,
    pub subsystems: Vec<(String, Layer, LagPolicy)>,
    pub route: Route,
    pub transforms: Vec<Transformation>,
    pub prototypes: Vec<(String, String)>,
    pub validators: Vec<(Vec<u8>, fn(Option<&[u8]>, Option<&[u8]>) -> std::result::Result<(), String>)>,
}

impl Scenario {
    pub fn new(config: &ScenarioConfig, route: Route) -> Self {
        Self {
            mode: config.mode,
            envelope: config.envelope(),
            admission_control: config.admission_control(),
            actions: Vec::new(),
            jobs: Vec::new(),
            subsystems: Vec::new(),
            route,
            transforms: Vec::new(),
            prototypes: Vec::new(),
            validators: Vec::new(),
        }
    }

    pub fn at(&mut self, t: u64, action: Action) {
        self.actions.push((LogicalTime(t), action));
    }

    pub fn setup(&mut self, t: u64, writes: &[(&str, &str)]) {
        let writes = writes.iter().map(|(k, v)| (k.as_bytes().to_vec(), Some(v.as_bytes().to_vec()))).collect();
        self.at(t, Action::Setup(writes));
    }

    pub fn observe(&mut self, t: u64, source: &str, payload: &str) {
        self.at(t, Action::Observe { source: source.into(), payload: payload.into() });
    }

    pub fn job(&mut self, t: u64, job: Job) {
        self.jobs.push(job);
        self.at(t, Action::Start(self.jobs.len() - 1));
    }
}

/// A finished run.
pub struct Run {
    pub config: ScenarioConfig,
    pub trace: Trace,
    pub metrics: EnvelopeMetrics,
    /// Ground truth after the run.
    pub lake: Arc<ContextLake>,
}

#[derive(Default)]
struct JobState {
    slot: Option<Slot>,
    tx: Option<Transaction>,
    observation: Option<Observation>,
    plan: Option<Plan>,
}

struct Runtime {
    mode: Mode,
    lake: Arc<ContextLake>,
    view: ComposedView,
    envelope: EnvelopeController,
    schedule: Schedule<Action>,
    jobs: Vec<Job>,
    states: Vec<JobState>,
    route: Route,
    trace: Trace,
    emitted: CutId,
}

/// Runs a scenario to completion. Identical configs give identical traces.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Run> {
    config.validate()?;
    let clock = SimClock::default();
    let mut schedule = Schedule::new(config.seed, clock.clone());
    let scenario = scenarios::build(config, schedule.rng())?;

    let lake = Arc::new(ContextLake::new(Arc::new(clock)));
    for t in scenario.transforms {
        lake.register_transformation(t)?;
    }
    for (label, text) in scenario.prototypes {
        lake.registry().register_prototype(label, text);
    }
    for (prefix, validator) in scenario.validators {
        lake.register_state_validator(&prefix, validator);
    }
    let mut view = ComposedView::new(Arc::clone(&lake));
    for (name, layer, policy) in &scenario.subsystems {
        view.add_subsystem(name, *layer, *policy);
    }
    let envelope = if scenario.admission_control {
        EnvelopeController::new(scenario.envelope)
    } else {
        EnvelopeController::without_admission_control(scenario.envelope)
    };
    for (t, action) in scenario.actions {
        schedule.push(t, action);
    }
    let states = scenario.jobs.iter().map(|_| JobState::default()).collect();
    let mut rt = Runtime {
        mode: scenario.mode,
        lake,
        view,
        envelope,
        schedule,
        jobs: scenario.jobs,
        states,
        route: scenario.route,
        trace: Trace::default(),
        emitted: CutId(0),
    };
    while let Some(ev) = rt.schedule.step() {
        rt.execute(ev.time, ev.event)?;
    }
    rt.flush_commits(None);
    Ok(Run {
        config: config.clone(),
        trace: rt.trace,
        metrics: rt.envelope.snapshot_metrics(),
        lake: rt.lake,
    })
}

impl Runtime {
    fn execute(&mut self, now: LogicalTime, action: Action) -> Result<()> {
        match action {
            Action::Setup(writes) => {
                let kernel = self.lake.kernel();
                let mut tx = kernel.begin_tx();
                for (key, value) in writes {
                    match value {
                        Some(v) => kernel.tx_write(&mut tx, Layer::State, &key, v)?,
                        None => kernel.tx_delete(&mut tx, Layer::State, &key)?,
                    }
                }
                self.lake.commit_tx(&mut tx)?;
                self.flush_commits(None);
            }
            Action::Observe { source, payload } => {
                self.lake.append_episode(&source, now, payload.as_bytes())?;
                self.flush_commits(None);
            }
            Action::Transform { id, version, source } => {
                let latest = self.lake.kernel().begin_snapshot();
                let seqs: Vec<u64> =
                    self.lake.episodes(latest)?.into_iter().filter(|e| e.source == source).map(|e| e.seq).collect();
                if !seqs.is_empty() {
                    self.lake.run_transformation(&id, version, &seqs)?;
                    self.flush_commits(None);
                }
            }
            Action::Peek { agent, reads } => {
                let (tx, _) = self.retrieve(&agent, &reads, now)?;
                if let Some(mut tx) = tx {
                    self.lake.kernel().rollback(&mut tx)?;
                }
            }
            Action::Start(i) => self.start(i, now)?,
            Action::Decide(i) => {
                self.decide(i, now)?;
                let state = std::mem::take(&mut self.states[i]);
                drop(state.slot);
            }
        }
        Ok(())
    }

    fn start(&mut self, i: usize, now: LogicalTime) -> Result<()> {
        let slot = match self.envelope.acquire_slot(&self.jobs[i].agent) {
            Ok(slot) => slot,
            Err(Error::OverEnvelope { .. }) => return Ok(()),
            Err(e) => return Err(e),
        };
        let latency = match self.jobs[i].latency {
            Latency::Fixed(ms) => ms,
            Latency::PerInFlight(base) => base.saturating_mul(self.envelope.in_flight() as u64),
        };
        self.envelope.record_retrieval_latency(latency);
        let agent = self.jobs[i].agent.clone();
        let reads = self.jobs[i].reads.clone();
        let (tx, observation) = self.retrieve(&agent, &reads, now)?;
        let plan = (self.jobs[i].policy)(&observation);
        let decide_at = now.plus(latency).plus(plan.delay_ms);
        self.states[i] = JobState { slot: Some(slot), tx, observation: Some(observation), plan: Some(plan) };
        self.schedule.push(decide_at, Action::Decide(i));
        Ok(())
    }

    fn retrieve(&mut self, agent: &str, reads: &[ReadSpec], now: LogicalTime) -> Result<(Option<Transaction>, Observation)> {
        let mut items = Vec::with_capacity(reads.len());
        let tx = match self.mode {
            Mode::ContextLake => {
                let kernel = self.lake.kernel();
                let mut tx = kernel.begin_tx();
                let cut = tx.snapshot();
                for spec in reads {
                    match spec {
                        ReadSpec::Key { layer, key, kind } => {
                            let value = kernel.tx_read(&mut tx, *layer, key)?;
                            items.push(Observed {
                                layer: *layer,
                                key: key.clone(),
                                value,
                                cut,
                                subsystem: None,
                                kind: *kind,
                                episode: None,
                            });
                        }
                        ReadSpec::LatestEpisode { source } => {
                            let latest = self.lake.episodes(cut)?.into_iter().rfind(|e| &e.source == source);
                            if let Some(ep) = latest {
                                items.push(episode_observed(ep, cut, None));
                            }
                        }
                    }
                }
                Some(tx)
            }
            Mode::Composed => {
                for spec in reads {
                    match spec {
                        ReadSpec::Key { layer, key, kind } => {
                            let sub = (self.route)(*layer, key);
                            let read = self.view.composed_read_at(&sub, key, now)?;
                            items.push(Observed {
                                layer: *layer,
                                key: key.clone(),
                                value: read.value,
                                cut: read.cut,
                                subsystem: Some(sub),
                                kind: *kind,
                                episode: None,
                            });
                        }
                        ReadSpec::LatestEpisode { source } => {
                            let sub = (self.route)(Layer::Episodic, b"ep:");
                            let cut = self.view.visible_cut(&sub, now)?;
                            let latest = self.lake.episodes(cut)?.into_iter().rfind(|e| &e.source == source);
                            if let Some(ep) = latest {
                                items.push(episode_observed(ep, cut, Some(sub)));
                            }
                        }
                    }
                }
                None
            }
        };
        for o in &items {
            self.trace.push(TraceEvent::Retrieval(trace::Retrieval {
                time_ms: now.0,
                agent: agent.to_string(),
                subsystem: o.subsystem.clone(),
                layer: o.layer,
                key: o.key.clone(),
                cut: o.cut,
                value: o.value.clone(),
            }));
        }
        Ok((tx, Observation { retrieved_at: now, items }))
    }

    fn decide(&mut self, i: usize, now: LogicalTime) -> Result<()> {
        let mut state = std::mem::take(&mut self.states[i]);
        let mut plan = state.plan.take().expect("started job has a plan");
        let mut observation = state.observation.take().expect("started job has an observation");
        let mut tx = state.tx.take();
        self.states[i].slot = state.slot.take();

        let job = &self.jobs[i];
        if job.refresh_on_deferral && plan.delay_ms >= self.envelope.config().delta_ms {
            if let Some(mut stale) = tx.take() {
                self.lake.kernel().rollback(&mut stale)?;
            }
            let (agent, reads) = (job.agent.clone(), job.reads.clone());
            let (fresh_tx, fresh) = self.retrieve(&agent, &reads, now)?;
            plan = (self.jobs[i].policy)(&fresh);
            tx = fresh_tx;
            observation = fresh;
        }

        let job = &self.jobs[i];
        let record = DecisionRecord {
            decision_id: job.decision_id.clone(),
            agent_id: job.agent.clone(),
            premises: observation.premises(),
            opaque_context_declared: plan.opaque,
            decided_at: now,
            effects: plan.effects(),
            shared_effects: true,
        };
        match tx {
            Some(tx) => self.decide_gated(record, &plan, tx, now),
            None => self.decide_blind(record, &plan, now),
        }
    }

    fn decide_gated(&mut self, record: DecisionRecord, plan: &Plan, mut tx: Transaction, now: LogicalTime) -> Result<()> {
        let id = record.decision_id.clone();
        for (key, transition) in &plan.writes {
            if let Err(e) = self.lake.update_state(&mut tx, key, transition.clone()) {
                self.lake.kernel().rollback(&mut tx)?;
                self.trace.push(TraceEvent::Abort(trace::Abort {
                    time_ms: now.0,
                    tx_id: tx.id(),
                    decision_id: Some(id),
                    reason: e.to_string(),
                }));
                return Ok(());
            }
        }
        for payload in &plan.episodes {
            self.lake.stage_episode(&mut tx, &record.agent_id, now, payload.as_bytes())?;
        }
        self.push_decision(&record);
        let env = self.envelope.config();
        match admissibility::gate(&self.lake, &record, &env, tx)? {
            Gated::Rejected(verdict) => {
                self.push_verdict(&id, &verdict, now);
                self.envelope.record_decision(&record.premise_ages_ms(), Some(&verdict));
            }
            Gated::Admitted { token, verdict } => {
                self.push_verdict(&id, &verdict, now);
                self.envelope.record_decision(&record.premise_ages_ms(), Some(&verdict));
                let tx_id = token.tx_id();
                self.trace.push(TraceEvent::Prepare(trace::Prepare {
                    time_ms: now.0,
                    tx_id,
                    decision_id: Some(id.clone()),
                }));
                match self.lake.commit(token) {
                    Ok(_) => {
                        self.flush_commits(Some(&id));
                        self.push_external(&record, now);
                    }
                    Err(e) => self.trace.push(TraceEvent::Abort(trace::Abort {
                        time_ms: now.0,
                        tx_id,
                        decision_id: Some(id),
                        reason: e.to_string(),
                    })),
                }
            }
        }
        Ok(())
    }

    /// Composed mode: no gate and no staging; effects land as one autocommit.
    fn decide_blind(&mut self, record: DecisionRecord, plan: &Plan, now: LogicalTime) -> Result<()> {
        self.push_decision(&record);
        self.envelope.record_decision(&record.premise_ages_ms(), None);
        let kernel = self.lake.kernel();
        let mut tx = kernel.begin_tx();
        for (key, transition) in &plan.writes {
            match &transition.new_value {
                Some(v) => kernel.tx_write(&mut tx, Layer::State, key, v.clone())?,
                None => kernel.tx_delete(&mut tx, Layer::State, key)?,
            }
        }
        for payload in &plan.episodes {
            self.lake.stage_episode(&mut tx, &record.agent_id, now, payload.as_bytes())?;
        }
        for action in record.external_actions() {
            let payload = format!("{}: {}", record.decision_id, action);
            self.lake.stage_episode(&mut tx, &record.agent_id, now, payload.as_bytes())?;
        }
        self.lake.commit_tx(&mut tx)?;
        self.flush_commits(Some(&record.decision_id));
        self.push_external(&record, now);
        Ok(())
    }

    fn push_decision(&mut self, record: &DecisionRecord) {
        self.trace.push(TraceEvent::Decision(trace::Decision {
            time_ms: record.decided_at.0,
            latest_cut: self.lake.kernel().begin_snapshot(),
            delta_ms: self.envelope.config().delta_ms,
            record: record.clone(),
        }));
    }

    fn push_verdict(&mut self, id: &str, verdict: &admissibility::Verdict, now: LogicalTime) {
        self.trace.push(TraceEvent::Verdict(trace::VerdictEvent {
            time_ms: now.0,
            decision_id: id.to_string(),
            admitted: verdict.admitted,
            violations: verdict.violations.clone(),
        }));
    }

    fn push_external(&mut self, record: &DecisionRecord, now: LogicalTime) {
        for action in record.external_actions() {
            self.trace.push(TraceEvent::ExternalAction(trace::ExternalAction {
                time_ms: now.0,
                agent: record.agent_id.clone(),
                decision_id: record.decision_id.clone(),
                action: action.to_string(),
            }));
        }
    }

    /// Emits commit events for every cut committed since the last flush.
    fn flush_commits(&mut self, decision_id: Option<&str>) {
        let kernel = self.lake.kernel();
        let latest = kernel.begin_snapshot();
        while self.emitted < latest {
            self.emitted = CutId(self.emitted.0 + 1);
            let record = kernel.commit_record(self.emitted).expect("cut is committed");
            let transforms: BTreeSet<(String, u32)> = record
                .writes
                .iter()
                .filter(|w| w.layer == Layer::Semantic)
                .filter_map(|w| SemanticRecord::decode(&w.key, w.value.as_deref()?).ok())
                .map(|r| (r.transform_id, r.transform_version))
                .collect();
            let transforms = transforms.into_iter().map(|(id, version)| TransformRef { id, version }).collect();
            self.trace.push(TraceEvent::Commit(trace::Commit::from_record(
                &record,
                decision_id.map(str::to_string),
                transforms,
            )));
        }
    }
}

fn episode_observed(ep: Episode, cut: CutId, subsystem: Option<String>) -> Observed {
    Observed {
        layer: Layer::Episodic,
        key: episode_key(ep.seq),
        value: Some(Episode::encode_value(&ep.source, &ep.payload)),
        cut,
        subsystem,
        kind: PremiseKind::Base,
        episode: Some(ep),
    }
}
