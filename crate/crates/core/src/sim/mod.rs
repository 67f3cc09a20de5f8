//! Deterministic discrete-event simulation of a cluster.
//!
//! One seeded event heap orders message deliveries, timers, scripted actions
//! and client wake-ups by `(tick, sequence)`. Every log change is journaled
//! into the trace, which the verifier can audit inline or offline.

pub mod cluster;
pub mod scaling;
pub mod scenario;
pub mod soak;
pub mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commit::AbortReason;
use crate::log_store::{AppendMode, LogStore};
use crate::node::{Effects, Endpoint, Input, Msg, NodeConfig, TimerKind, TxnEnvelope, TxnKind, TxnResult, TxnTag, UserOp};
use crate::state::MTable;
use crate::types::{GranuleId, Key, LogId, Lsn, NodeId, TxnId, Value};
use crate::verifier::{self, Auditor, Verdict};

pub use cluster::{Bootstrap, Cluster, NodeStatus};
pub use scenario::{Action, ScenarioSpec};
pub use trace::{MetricsReport, Trace, TraceRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    /// Inclusive per-message delay range, in ticks.
    pub latency: (u64, u64),
    pub node: NodeConfig,
    pub backoff_base: u64,
    pub backoff_max: u64,
    pub max_attempts: u32,
    pub request_timeout: u64,
    pub tick_budget: u64,
    /// Per-log cap on commit-path appends per tick.
    pub throttle: Option<u32>,
    pub append_mode: AppendMode,
    /// Audit invariants at every trace cut while running.
    pub audit: bool,
    /// Record every non-heartbeat node step in the trace.
    pub record_steps: bool,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            seed: 0,
            latency: (1, 3),
            node: NodeConfig::default(),
            backoff_base: 2,
            backoff_max: 64,
            max_attempts: 8,
            request_timeout: 60,
            tick_budget: 20_000,
            throttle: None,
            append_mode: AppendMode::Conditional,
            audit: true,
            record_steps: true,
        }
    }
}

impl SimConfig {
    /// Defaults overridden by the scenario's settings.
    pub fn for_scenario(spec: &ScenarioSpec, seed: u64) -> SimConfig {
        let mut c = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let s = &spec.settings;
        if let Some(l) = s.latency {
            c.latency = l;
        }
        if let Some(h) = s.heartbeat {
            c.node.heartbeat = h;
        }
        if let Some(p) = s.recovery_policy {
            c.node.recovery_policy = p;
        }
        if let Some(w) = s.warmup {
            c.node.warmup = w;
        }
        if let Some(x) = s.centralized {
            c.node.centralized = x;
            c.audit &= !x;
        }
        if let Some(v) = s.vote_timeout {
            c.node.vote_timeout = v;
        }
        if let Some(v) = s.decision_timeout {
            c.node.decision_timeout = v;
        }
        c.throttle = s.throttle;
        if let Some(b) = s.tick_budget {
            c.tick_budget = b;
        }
        c
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    Deliver { from: Endpoint, to: Endpoint, msg: Msg },
    Timer { node: NodeId, inc: u32, kind: TimerKind },
    Action(usize),
    /// `req` set: request timeout check; unset: backoff or think time over.
    ClientWake { client: u32, req: Option<u64> },
}

#[derive(Debug)]
struct Event {
    at: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Event) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Event) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, o: &Event) -> Ordering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone)]
enum Job {
    User { granule: GranuleId, ops: Vec<UserOp> },
    Migrate { granules: Vec<GranuleId>, src: Option<NodeId>, dst: Option<NodeId> },
    AddNode { node: NodeId },
    Scan { node: NodeId },
}

impl Job {
    fn tag(&self) -> TxnTag {
        match self {
            Job::User { .. } => TxnTag::User,
            Job::Migrate { .. } => TxnTag::Migration,
            Job::AddNode { .. } => TxnTag::AddNode,
            Job::Scan { .. } => TxnTag::ScanGTable,
        }
    }
}

#[derive(Debug, Clone)]
struct LoadPlan {
    until: u64,
    ops: u32,
    think: (u64, u64),
    write_percent: u32,
}

#[derive(Debug, Clone)]
struct Client {
    job: Option<Job>,
    target: Option<NodeId>,
    attempts: u32,
    awaiting: Option<(u64, TxnId)>,
    load: Option<LoadPlan>,
    guess: BTreeMap<GranuleId, NodeId>,
    writes: u64,
    done: bool,
}

impl Client {
    fn new(job: Option<Job>, load: Option<LoadPlan>, guess: BTreeMap<GranuleId, NodeId>) -> Client {
        Client {
            job,
            target: None,
            attempts: 0,
            awaiting: None,
            load,
            guess,
            writes: 0,
            done: false,
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: Trace,
    pub metrics: MetricsReport,
    pub verdict: Verdict,
    pub cluster: Cluster,
    pub end_tick: u64,
}

pub struct Sim {
    cfg: SimConfig,
    spec: ScenarioSpec,
    pub cluster: Cluster,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Event>,
    deferred: BTreeMap<NodeId, Vec<EventKind>>,
    partition: Vec<BTreeSet<NodeId>>,
    clients: BTreeMap<u32, Client>,
    next_req: u64,
    next_txn: u64,
    /// Non-heartbeat deliveries queued or deferred.
    work_msgs: usize,
    actions_left: usize,
    trace: Trace,
    auditor: Option<Auditor>,
    initial_owners: BTreeMap<GranuleId, NodeId>,
}

impl Sim {
    pub fn new(cfg: SimConfig, spec: ScenarioSpec) -> Result<Sim, scenario::ScenarioError> {
        let store = LogStore::with_mode(cfg.append_mode);
        Sim::with_store(cfg, spec, store)
    }

    /// Runs over a caller-supplied store, which must hold no logs yet.
    pub fn with_store(cfg: SimConfig, spec: ScenarioSpec, store: LogStore) -> Result<Sim, scenario::ScenarioError> {
        let boot = spec.bootstrap()?;
        if !store.logs().is_empty() {
            return Err(scenario::ScenarioError::Invalid("log store is not empty".into()));
        }
        store.set_journal(true);
        let (cluster, boots) = Cluster::with_store(&boot, cfg.node.clone(), store);
        if let Some(t) = cfg.throttle {
            cluster.store.set_throttle(Some(t));
        }
        let mut sim = Sim {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            auditor: cfg.audit.then(|| Auditor::new(boot.layout.clone())),
            cfg,
            cluster,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            deferred: BTreeMap::new(),
            partition: Vec::new(),
            clients: BTreeMap::new(),
            next_req: 0,
            next_txn: 0,
            work_msgs: 0,
            actions_left: spec.actions.len(),
            trace: Trace::default(),
            initial_owners: boot.owners.clone(),
            spec,
        };
        sim.record(TraceRecord::Start {
            seed: sim.cfg.seed,
            scenario: sim.spec.name.clone(),
            layout: Some((*sim.cluster.layout).clone()),
        });
        sim.flush_logs();
        for (n, fx) in boots {
            sim.apply_effects(n, fx);
        }
        for (i, a) in sim.spec.actions.iter().enumerate() {
            let at = a.at;
            sim.seq += 1;
            sim.queue.push(Event {
                at,
                seq: sim.seq,
                kind: EventKind::Action(i),
            });
        }
        Ok(sim)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Runs to quiescence or the tick budget.
    pub fn run(mut self) -> SimOutput {
        while let Some(ev) = self.queue.pop() {
            if ev.at > self.cfg.tick_budget {
                self.now = self.cfg.tick_budget;
                break;
            }
            self.now = ev.at;
            self.cluster.store.set_now(self.now);
            self.dispatch(ev.kind);
            if self.quiescent() {
                break;
            }
        }
        self.finish()
    }

    fn finish(mut self) -> SimOutput {
        let quiescent = self.quiescent();
        let pending = if quiescent { Vec::new() } else { self.obligations() };
        self.record(TraceRecord::End {
            tick: self.now,
            quiescent,
            pending,
        });
        let metrics = MetricsReport::from_trace(&self.trace);
        let layout = (*self.cluster.layout).clone();
        let verdict = match self.auditor.take() {
            Some(a) => {
                let mut violations = a.violations.clone();
                violations.extend(verifier::check_serialization(&self.trace));
                violations.extend(verifier::check_user_data(&self.trace, &a.gt, &layout));
                let committed = self.trace.outcomes().filter(|(_, o)| o.decision.is_commit()).count() as u64;
                Verdict {
                    pass: violations.is_empty(),
                    quiescent,
                    cuts: a.cuts,
                    committed,
                    aborted: self.trace.outcomes().count() as u64 - committed,
                    violations,
                }
            }
            None => Verdict {
                pass: true,
                quiescent,
                ..Verdict::default()
            },
        };
        SimOutput {
            end_tick: self.now,
            trace: self.trace,
            metrics,
            verdict,
            cluster: self.cluster,
        }
    }

    fn quiescent(&self) -> bool {
        self.actions_left == 0
            && self.work_msgs == 0
            && self.clients.values().all(|c| c.done)
            && self.cluster.slots.values().all(|s| {
                s.status == NodeStatus::Crashed || s.node.is_retired() || (s.node.is_idle() && s.node.failover_jobs().next().is_none())
            })
    }

    fn obligations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.actions_left > 0 {
            out.push(format!("{} scripted actions not reached", self.actions_left));
        }
        if self.work_msgs > 0 {
            out.push(format!("{} messages in flight", self.work_msgs));
        }
        for (id, c) in &self.clients {
            if !c.done {
                out.push(format!("client {id} still working"));
            }
        }
        for (n, s) in &self.cluster.slots {
            if s.status != NodeStatus::Crashed && !s.node.is_retired() {
                if s.node.active_txns() > 0 {
                    out.push(format!("{n} has {} open transactions", s.node.active_txns()));
                }
                for f in s.node.failover_jobs() {
                    out.push(format!("{n} still failing over {f}"));
                }
            }
        }
        out
    }

    // ---- plumbing ---------------------------------------------------------

    fn record(&mut self, r: TraceRecord) {
        if let Some(a) = self.auditor.as_mut() {
            a.observe(&r);
        }
        self.trace.push(r);
    }

    fn push(&mut self, delay: u64, kind: EventKind) {
        if let EventKind::Deliver { msg, .. } = &kind {
            if !msg.is_heartbeat() {
                self.work_msgs += 1;
            }
        }
        self.seq += 1;
        self.queue.push(Event {
            at: self.now + delay,
            seq: self.seq,
            kind,
        });
    }

    fn latency(&mut self) -> u64 {
        let (lo, hi) = self.cfg.latency;
        if hi <= lo {
            lo
        } else {
            self.rng.gen_range(lo..=hi)
        }
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, msg: Msg) {
        let delay = if from == to { 0 } else { self.latency() };
        self.push(delay, EventKind::Deliver { from, to, msg });
    }

    /// Moves journaled appends and log creations/deletions into the trace.
    fn flush_logs(&mut self) {
        let changes = self.cluster.log_changes();
        let tick = self.now;
        for log in changes.created {
            self.record(TraceRecord::Create { tick, log });
        }
        for event in self.cluster.store.drain_journal() {
            self.record(TraceRecord::Append { tick, event });
        }
        for log in changes.deleted {
            self.record(TraceRecord::Delete { tick, log });
        }
    }

    fn apply_effects(&mut self, node: NodeId, fx: Effects) {
        self.flush_logs();
        let inc = self.cluster.node(node).map(|n| n.incarnation).unwrap_or(0);
        let tick = self.now;
        for o in fx.outcomes {
            self.record(TraceRecord::Outcome { tick, outcome: o });
        }
        for text in fx.notes {
            self.record(TraceRecord::Note { tick, node, text });
        }
        for (to, msg) in fx.sends {
            self.send(Endpoint::Node(node), to, msg);
        }
        for (delay, kind) in fx.timers {
            self.push(delay, EventKind::Timer { node, inc, kind });
        }
    }

    fn separated(&self, a: Endpoint, b: Endpoint) -> bool {
        let (Endpoint::Node(a), Endpoint::Node(b)) = (a, b) else {
            return false;
        };
        let group = |n: NodeId| self.partition.iter().position(|g| g.contains(&n));
        !self.partition.is_empty() && group(a) != group(b)
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::Deliver { from, to, msg } => {
                let work = !msg.is_heartbeat();
                match to {
                    Endpoint::Client(c) => {
                        if work {
                            self.work_msgs -= 1;
                        }
                        if let Msg::Reply { req, txn, result } = msg {
                            self.on_reply(c, req, txn, result);
                        }
                    }
                    Endpoint::Node(n) => match self.cluster.status(n) {
                        Some(NodeStatus::Paused) => {
                            self.deferred.entry(n).or_default().push(EventKind::Deliver { from, to, msg });
                        }
                        Some(NodeStatus::Up) => {
                            if work {
                                self.work_msgs -= 1;
                            }
                            if self.separated(from, to) {
                                return;
                            }
                            let what = self.cfg.record_steps.then(|| format!("{} from {}", msg.name(), ep(from)));
                            self.step(n, Input::Msg { from, msg }, what, work);
                        }
                        _ => {
                            if work {
                                self.work_msgs -= 1;
                            }
                        }
                    },
                }
            }
            EventKind::Timer { node, inc, kind } => match self.cluster.status(node) {
                Some(NodeStatus::Paused) => {
                    self.deferred.entry(node).or_default().push(EventKind::Timer { node, inc, kind });
                }
                Some(NodeStatus::Up) if self.cluster.node(node).map(|n| n.incarnation) == Some(inc) => {
                    let work = kind != TimerKind::HeartbeatTick;
                    let what = self.cfg.record_steps.then(|| format!("timer {kind:?}"));
                    self.step(node, Input::Timer(kind), what, work);
                }
                _ => {}
            },
            EventKind::Action(i) => {
                self.actions_left -= 1;
                let action = self.spec.actions[i].action.clone();
                self.run_action(action);
            }
            EventKind::ClientWake { client, req } => self.on_wake(client, req),
        }
    }

    fn step(&mut self, n: NodeId, input: Input, what: Option<String>, work: bool) {
        if let (Some(input), true) = (what, work) {
            self.record(TraceRecord::Step {
                tick: self.now,
                node: n,
                input,
            });
        }
        if let Some(fx) = self.cluster.deliver(self.now, n, input) {
            self.apply_effects(n, fx);
        }
    }

    fn fault(&mut self, node: Option<NodeId>, fault: &str) {
        self.record(TraceRecord::Fault {
            tick: self.now,
            node,
            fault: fault.into(),
        });
    }

    // ---- scripted actions -------------------------------------------------

    fn run_action(&mut self, action: Action) {
        match action {
            Action::AddNode { node } => {
                let n = NodeId(node);
                match self.cluster.spawn(n) {
                    Ok(fx) => {
                        self.fault(Some(n), "spawn");
                        self.apply_effects(n, fx);
                        self.spawn_client(Some(Job::AddNode { node: n }), None);
                    }
                    Err(e) => self.fault(Some(n), &format!("spawn refused: {e}")),
                }
            }
            Action::Migrate { granules, src, dst } => {
                let job = Job::Migrate {
                    granules: granules.into_iter().map(GranuleId).collect(),
                    src: Some(NodeId(src)),
                    dst: Some(NodeId(dst)),
                };
                self.spawn_client(Some(job), None);
            }
            Action::MigrateBatch { count, spacing } => {
                for i in 0..count {
                    let g = self.rng.gen_range(0..self.cluster.layout.len());
                    let g = self.cluster.layout.ranges()[g].0;
                    let job = Job::Migrate {
                        granules: vec![g],
                        src: None,
                        dst: None,
                    };
                    let id = self.add_client(Client::new(Some(job), None, self.initial_owners.clone()));
                    self.push(i as u64 * spacing, EventKind::ClientWake { client: id, req: None });
                }
            }
            Action::Crash { node } => {
                if self.cluster.crash(NodeId(node)) {
                    self.deferred.remove(&NodeId(node));
                    self.recount_work();
                    self.fault(Some(NodeId(node)), "crash");
                }
            }
            Action::Recover { node } => {
                if let Some(fx) = self.cluster.recover(NodeId(node)) {
                    self.fault(Some(NodeId(node)), "recover");
                    self.apply_effects(NodeId(node), fx);
                }
            }
            Action::Pause { node } => {
                if self.cluster.pause(NodeId(node)) {
                    self.fault(Some(NodeId(node)), "pause");
                }
            }
            Action::Resume { node } => {
                let n = NodeId(node);
                if self.cluster.resume(n) {
                    self.fault(Some(n), "resume");
                    for kind in self.deferred.remove(&n).unwrap_or_default() {
                        if let EventKind::Deliver { msg, .. } = &kind {
                            if !msg.is_heartbeat() {
                                self.work_msgs -= 1;
                            }
                        }
                        self.push(0, kind);
                    }
                }
            }
            Action::Partition { groups } => {
                self.partition = groups
                    .into_iter()
                    .map(|g| g.into_iter().map(NodeId).collect())
                    .collect();
                self.fault(None, "partition");
            }
            Action::Heal => {
                self.partition.clear();
                self.fault(None, "heal");
            }
            Action::User { node, reads, writes } => {
                let mut ops: Vec<UserOp> = reads.into_iter().map(UserOp::Read).collect();
                ops.extend(writes.into_iter().map(|(k, v)| UserOp::Write(k, v)));
                let key = ops.iter().map(|op| match op {
                    UserOp::Read(k) | UserOp::Write(k, _) => *k,
                });
                let granule = key
                    .clone()
                    .find_map(|k| self.cluster.layout.granule_of(k))
                    .unwrap_or(GranuleId(0));
                let mut guess = self.initial_owners.clone();
                guess.insert(granule, NodeId(node));
                self.spawn_client(Some(Job::User { granule, ops }), Some(guess));
            }
            Action::ClientLoad {
                clients,
                until,
                ops,
                think,
                write_percent,
            } => {
                for _ in 0..clients {
                    let plan = LoadPlan {
                        until,
                        ops,
                        think,
                        write_percent,
                    };
                    let id = self.add_client(Client::new(None, Some(plan), self.initial_owners.clone()));
                    let d = self.rng.gen_range(0..=think.1.max(1));
                    self.push(d, EventKind::ClientWake { client: id, req: None });
                }
            }
            Action::Scan { node } => self.spawn_client(Some(Job::Scan { node: NodeId(node) }), None),
        }
    }

    /// Crash drops deferred and in-flight deliveries to the node; recount so
    /// quiescence tracking stays exact.
    fn recount_work(&mut self) {
        let queued = self
            .queue
            .iter()
            .filter(|e| matches!(&e.kind, EventKind::Deliver { msg, .. } if !msg.is_heartbeat()))
            .count();
        let deferred = self
            .deferred
            .values()
            .flatten()
            .filter(|k| matches!(k, EventKind::Deliver { msg, .. } if !msg.is_heartbeat()))
            .count();
        self.work_msgs = queued + deferred;
    }

    fn add_client(&mut self, c: Client) -> u32 {
        let id = self.clients.len() as u32 + 1;
        self.clients.insert(id, c);
        id
    }

    fn spawn_client(&mut self, job: Option<Job>, guess: Option<BTreeMap<GranuleId, NodeId>>) {
        let guess = guess.unwrap_or_else(|| self.initial_owners.clone());
        let id = self.add_client(Client::new(job, None, guess));
        self.issue(id);
    }

    // ---- clients ----------------------------------------------------------

    fn members(&self) -> Vec<NodeId> {
        self.cluster
            .store
            .with_image(LogId::SysLog, Lsn::ZERO, |img| MTable::from_image(&img.tables))
            .map(|m| m.members().collect())
            .unwrap_or_default()
    }

    /// The unique settled owner of `g` as the page store shows it.
    fn visible_owner(&self, g: GranuleId) -> Option<NodeId> {
        if self.cluster.cfg.centralized {
            return self
                .cluster
                .store
                .with_image(LogId::SysLog, Lsn::ZERO, |img| img.tables.gtable.get(&g).map(|e| e.owner))
                .ok()
                .flatten();
        }
        let mut owners = Vec::new();
        for log in self.cluster.store.logs() {
            let LogId::NodeLog(n) = log else {
                continue;
            };
            let (own, doubt) = self
                .cluster
                .store
                .with_image(log, Lsn::ZERO, |img| {
                    (img.tables.gtable.get(&g).map(|e| e.owner) == Some(n), img.in_doubt_granules().contains(&g))
                })
                .unwrap_or((false, false));
            if doubt {
                return None;
            }
            if own {
                owners.push(n);
            }
        }
        (owners.len() == 1).then(|| owners[0])
    }

    fn mint(&mut self) -> TxnId {
        self.next_txn += 1;
        TxnId::external(self.next_txn)
    }

    fn new_load_job(&mut self, id: u32) -> Option<Job> {
        let c = &self.clients[&id];
        let plan = c.load.clone()?;
        if self.now >= plan.until {
            return None;
        }
        let idx = self.rng.gen_range(0..self.cluster.layout.len());
        let (g, range) = self.cluster.layout.ranges()[idx];
        let mut ops = Vec::new();
        let mut writes = c.writes;
        for _ in 0..plan.ops.max(1) {
            let k: Key = self.rng.gen_range(range.lo..range.hi);
            if self.rng.gen_range(0..100) < plan.write_percent {
                writes += 1;
                let v: Value = ((id as i64) << 32) | writes as i64;
                ops.push(UserOp::Write(k, v));
            } else {
                ops.push(UserOp::Read(k));
            }
        }
        self.clients.get_mut(&id).expect("client").writes = writes;
        Some(Job::User { granule: g, ops })
    }

    /// Sends the client's current job, or picks its next one.
    fn issue(&mut self, id: u32) {
        if self.clients[&id].job.is_none() {
            match self.new_load_job(id) {
                Some(j) => {
                    let c = self.clients.get_mut(&id).expect("client");
                    c.job = Some(j);
                    c.attempts = 0;
                    c.target = None;
                }
                None => {
                    self.clients.get_mut(&id).expect("client").done = true;
                    return;
                }
            }
        }
        let job = self.clients[&id].job.clone().expect("job");
        let (target, kind) = match job {
            Job::User { granule, ref ops } => {
                let c = &self.clients[&id];
                let t = c.target.or_else(|| c.guess.get(&granule).copied()).unwrap_or(NodeId(1));
                (Some(t), TxnKind::User { ops: ops.clone() })
            }
            Job::AddNode { node } => (
                Some(node),
                TxnKind::AddNode {
                    node,
                    address: format!("node-{}", node.0),
                },
            ),
            Job::Scan { node } => (Some(node), TxnKind::ScanGTable),
            Job::Migrate { granules, src, dst } => {
                let src = src.or_else(|| self.visible_owner(granules[0]));
                let members = self.members();
                let dst = match dst {
                    Some(d) if members.contains(&d) => Some(d),
                    _ => {
                        let choices: Vec<NodeId> = members.iter().copied().filter(|m| Some(*m) != src).collect();
                        (!choices.is_empty()).then(|| choices[self.rng.gen_range(0..choices.len())])
                    }
                };
                match (src, dst) {
                    (Some(s), Some(d)) if s == d => {
                        // Already where it was headed.
                        self.finish_job(id);
                        return;
                    }
                    (Some(s), Some(d)) => {
                        let c = self.clients.get_mut(&id).expect("client");
                        c.job = Some(Job::Migrate {
                            granules: granules.clone(),
                            src: Some(s),
                            dst: Some(d),
                        });
                        (Some(d), TxnKind::Migration { granules, src: s, dst: d })
                    }
                    _ => (None, TxnKind::ScanGTable),
                }
            }
        };
        let Some(target) = target else {
            // No settled owner right now: back off and look again.
            self.retry(id, None, "ownership in flux".into());
            return;
        };
        let txn = self.mint();
        self.next_req += 1;
        let req = self.next_req;
        let c = self.clients.get_mut(&id).expect("client");
        c.attempts += 1;
        c.target = Some(target);
        c.awaiting = Some((req, txn));
        let env = TxnEnvelope { id: txn, kind };
        self.send(Endpoint::Client(id), Endpoint::Node(target), Msg::Request { req, txn: env });
        self.push(self.cfg.request_timeout, EventKind::ClientWake { client: id, req: Some(req) });
    }

    fn finish_job(&mut self, id: u32) {
        let c = self.clients.get_mut(&id).expect("client");
        c.job = None;
        c.awaiting = None;
        c.target = None;
        c.attempts = 0;
        if c.load.is_some() {
            let (lo, hi) = c.load.as_ref().expect("load").think;
            let d = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
            self.push(d, EventKind::ClientWake { client: id, req: None });
        } else {
            c.done = true;
        }
    }

    /// Schedules another attempt with exponential backoff, or gives up.
    fn retry(&mut self, id: u32, redirect: Option<NodeId>, reason: String) {
        let max = self.cfg.max_attempts;
        let c = self.clients.get_mut(&id).expect("client");
        c.awaiting = None;
        if c.attempts >= max {
            let tag = c.job.as_ref().map(Job::tag).unwrap_or(TxnTag::User);
            self.record(TraceRecord::Failure {
                tick: self.now,
                client: id,
                tag,
                reason,
            });
            self.finish_job(id);
            return;
        }
        let delay = match redirect {
            Some(_) => 1,
            None => (self.cfg.backoff_base << c.attempts.min(16)).min(self.cfg.backoff_max),
        };
        self.push(delay, EventKind::ClientWake { client: id, req: None });
    }

    fn on_wake(&mut self, id: u32, req: Option<u64>) {
        let Some(c) = self.clients.get(&id) else {
            return;
        };
        if c.done {
            return;
        }
        match req {
            Some(r) => {
                if c.awaiting.map(|(q, _)| q) == Some(r) {
                    // Timed out: try another node for user work.
                    let members = self.members();
                    let c = self.clients.get_mut(&id).expect("client");
                    if let (Some(Job::User { .. }), Some(t)) = (&c.job, c.target) {
                        c.target = members.iter().copied().find(|m| *m > t).or(members.first().copied());
                    }
                    self.retry(id, None, "request timed out".into());
                }
            }
            None => {
                if c.awaiting.is_none() {
                    self.issue(id);
                }
            }
        }
    }

    fn on_reply(&mut self, id: u32, req: u64, txn: TxnId, result: TxnResult) {
        let Some(c) = self.clients.get(&id) else {
            return;
        };
        if c.awaiting != Some((req, txn)) {
            return;
        }
        let tag = c.job.as_ref().map(Job::tag).unwrap_or(TxnTag::User);
        let attempt = c.attempts;
        self.record(TraceRecord::Reply {
            tick: self.now,
            client: id,
            txn,
            tag,
            result: result.clone(),
            attempt,
        });
        let reason = match result {
            TxnResult::Committed { .. } => {
                self.finish_job(id);
                return;
            }
            TxnResult::Aborted(r) => r,
        };
        let job = self.clients[&id].job.clone();
        match (job, reason) {
            (Some(Job::User { granule, .. }), AbortReason::WrongNode(Some(o))) => {
                let c = self.clients.get_mut(&id).expect("client");
                c.guess.insert(granule, o);
                c.target = Some(o);
                self.retry(id, Some(o), format!("{reason}"));
            }
            (Some(Job::User { .. }), AbortReason::WrongNode(None)) => {
                let members = self.members();
                let c = self.clients.get_mut(&id).expect("client");
                let t = c.target.unwrap_or(NodeId(0));
                c.target = members.iter().copied().find(|m| *m > t).or(members.first().copied());
                self.retry(id, None, format!("{reason}"));
            }
            (Some(Job::Migrate { granules, dst, .. }), AbortReason::WrongNode(hint)) => {
                if hint.is_some() && hint == dst {
                    self.finish_job(id);
                    return;
                }
                let c = self.clients.get_mut(&id).expect("client");
                c.job = Some(Job::Migrate { granules, src: hint, dst });
                self.retry(id, None, format!("{reason}"));
            }
            (Some(Job::Migrate { granules, dst, .. }), _) => {
                let c = self.clients.get_mut(&id).expect("client");
                c.job = Some(Job::Migrate { granules, src: None, dst });
                self.retry(id, None, format!("{reason}"));
            }
            (Some(Job::AddNode { .. }), AbortReason::NodeAlreadyExist) | (_, AbortReason::NodeNotExist) => {
                self.finish_job(id);
            }
            _ => self.retry(id, None, format!("{reason}")),
        }
    }
}

fn ep(e: Endpoint) -> String {
    match e {
        Endpoint::Node(n) => n.to_string(),
        Endpoint::Client(c) => format!("client {c}"),
    }
}

/// Runs a scenario with its own settings and the given seed.
pub fn run_scenario(spec: &ScenarioSpec, seed: u64) -> Result<SimOutput, scenario::ScenarioError> {
    let cfg = SimConfig::for_scenario(spec, seed);
    Ok(Sim::new(cfg, spec.clone())?.run())
}

/// Final ownership as the page store shows it: granule to the nodes whose
/// own partition names them.
pub fn ownership_map(cluster: &Cluster) -> BTreeMap<GranuleId, Vec<NodeId>> {
    let mut out: BTreeMap<GranuleId, Vec<NodeId>> = cluster.layout.granules().map(|g| (g, Vec::new())).collect();
    for log in cluster.store.logs() {
        let LogId::NodeLog(n) = log else {
            continue;
        };
        let owned: Vec<GranuleId> = cluster
            .store
            .with_image(log, Lsn::ZERO, |img| {
                img.tables
                    .gtable
                    .iter()
                    .filter(|(_, e)| e.owner == n)
                    .map(|(g, _)| *g)
                    .collect()
            })
            .unwrap_or_default();
        for g in owned {
            out.entry(g).or_default().push(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::scenario::bundled;
    use super::*;

    fn spec(name: &str) -> ScenarioSpec {
        ScenarioSpec::from_json(bundled::get(name).unwrap()).unwrap()
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run_scenario(&spec("mixed"), 9).unwrap();
        let b = run_scenario(&spec("mixed"), 9).unwrap();
        assert_eq!(a.trace, b.trace);
        assert!(a.verdict.pass && a.verdict.quiescent, "{:?}", a.verdict.violations);
    }

    #[test]
    fn seeds_change_the_schedule() {
        let a = run_scenario(&spec("mixed"), 1).unwrap();
        let b = run_scenario(&spec("mixed"), 2).unwrap();
        assert_ne!(a.trace, b.trace);
    }

    #[test]
    fn refuses_a_used_store() {
        let store = LogStore::new();
        store.create_log(LogId::SysLog).unwrap();
        let s = spec("fig5_scaleout");
        let cfg = SimConfig::for_scenario(&s, 1);
        assert!(matches!(Sim::with_store(cfg, s, store), Err(scenario::ScenarioError::Invalid(_))));
    }

    #[test]
    fn throttle_spares_the_bootstrap() {
        let mut s = spec("fig5_scaleout");
        s.settings.throttle = Some(1);
        let out = run_scenario(&s, 1).unwrap();
        assert!(out.verdict.pass);
        assert!(out.trace.appends().any(|(_, e)| e.by.is_none()));
    }

    #[test]
    fn file_backed_run_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec("fig5_scaleout");
        let cfg = SimConfig::for_scenario(&s, 1);
        let store = LogStore::open_dir(dir.path()).unwrap();
        let disk = Sim::with_store(cfg, s.clone(), store).unwrap().run();
        let mem = run_scenario(&s, 1).unwrap();
        assert_eq!(disk.trace, mem.trace);
        let reopened = LogStore::open_dir(dir.path()).unwrap();
        assert_eq!(reopened.logs(), mem.cluster.store.logs());
    }

    #[test]
    fn scaleout_spreads_granules_to_new_nodes() {
        let out = run_scenario(&spec("scaleout_4_to_8"), 1).unwrap();
        assert!(out.verdict.pass, "{:?}", out.verdict.violations);
        let owners: std::collections::BTreeSet<NodeId> = ownership_map(&out.cluster).into_values().flatten().collect();
        assert!(owners.iter().any(|n| n.0 > 4), "{owners:?}");
    }
}
