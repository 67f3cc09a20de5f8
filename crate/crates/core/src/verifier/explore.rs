//! Exhaustive schedule exploration over small clusters.
//!
//! Every in-flight message, armed timer and (within budget) crash or
//! recovery is a possible next step. A depth-first search visits each
//! distinct cluster state once and audits every log append as it happens.
//! When a violation turns up, a breadth-first pass finds a shortest schedule
//! reaching one.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Auditor, Violation};
use crate::log_store::AppendMode;
use crate::node::{Effects, Endpoint, Input, Msg, NodeConfig, TimerKind, TxnEnvelope, TxnKind, TxnResult, UserOp};
use crate::sim::cluster::{Bootstrap, Cluster, NodeStatus};
use crate::sim::trace::{Trace, TraceRecord};
use crate::types::{GranuleId, LogId, NodeId, TxnId};

/// One scripted transaction: its request goes from a client to `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnSpec {
    pub to: NodeId,
    pub kind: TxnKind,
}

/// Which transactions the explorer races.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    /// Pairs of migrations competing for the same granule.
    #[default]
    Migrations,
    /// A recovery migration away from a live owner racing that owner's
    /// user write, issued from a cache the recovery makes stale.
    StaleWrite,
    Custom(Vec<TxnSpec>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub nodes: u32,
    pub granules: u32,
    pub txns: u32,
    pub workload: Workload,
    /// Crash-and-recover events allowed per schedule. Timers fire only when
    /// this is nonzero: without crashes no participant goes silent.
    pub crashes: u32,
    /// Longest schedule explored; deeper branches make the run inconclusive.
    pub depth: usize,
    pub max_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<Duration>,
    pub skip_guard: bool,
    pub no_cas: bool,
    /// Every finished schedule must commit exactly this many scripted txns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_commits: Option<usize>,
    /// Nodes whose logs exist at the start without being members.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spare_nodes: Vec<NodeId>,
    /// Run independent conflict classes one after another instead of
    /// interleaving them. Applies only without crashes.
    pub reduce: bool,
}

impl ExploreConfig {
    pub fn new(nodes: u32, granules: u32, txns: u32) -> ExploreConfig {
        ExploreConfig {
            nodes,
            granules,
            txns,
            workload: Workload::Migrations,
            crashes: 0,
            depth: 400,
            max_states: 20_000_000,
            time_limit: None,
            skip_guard: false,
            no_cas: false,
            expect_commits: None,
            spare_nodes: Vec::new(),
            reduce: true,
        }
    }

    pub fn bootstrap(&self) -> Bootstrap {
        let nodes: Vec<NodeId> = (1..=self.nodes).map(NodeId).collect();
        Bootstrap::round_robin(&nodes, self.granules, self.granules as u64 * 100)
    }

    /// The scripted transactions.
    pub fn txn_specs(&self) -> Vec<TxnSpec> {
        let n = self.nodes.max(1);
        let owner = |g: u32| (g - 1) % n + 1;
        match &self.workload {
            Workload::Custom(v) => v.clone(),
            Workload::StaleWrite => vec![
                TxnSpec {
                    to: NodeId(n.min(2)),
                    kind: TxnKind::RecoveryMigr {
                        granules: vec![GranuleId(1)],
                        src: NodeId(1),
                        dst: NodeId(n.min(2)),
                    },
                },
                TxnSpec {
                    to: NodeId(1),
                    kind: TxnKind::User {
                        ops: vec![UserOp::Write(5, 1)],
                    },
                },
            ],
            Workload::Migrations => (0..self.txns)
                .map(|i| {
                    let g = (i / 2) % self.granules.max(1) + 1;
                    let src = owner(g);
                    let step = if i % 2 == 0 { 1 } else { 2 };
                    let (src, dst) = if n == 2 && i % 2 == 1 {
                        (src % n + 1, src)
                    } else {
                        (src, (src - 1 + step) % n + 1)
                    };
                    TxnSpec {
                        to: NodeId(dst),
                        kind: TxnKind::Migration {
                            granules: vec![GranuleId(g)],
                            src: NodeId(src),
                            dst: NodeId(dst),
                        },
                    }
                })
                .collect(),
        }
    }

    /// Conflict class of each scripted txn. Migrations sharing a granule
    /// conflict; so does anything touching a log another node may append
    /// to, and every membership change conflicts with everything.
    pub fn classes(&self) -> Vec<usize> {
        let specs = self.txn_specs();
        let layout = self.bootstrap().layout;
        let mut parent: Vec<usize> = (0..specs.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        let touch = |t: &TxnSpec| -> (BTreeSet<GranuleId>, BTreeSet<NodeId>, bool, Option<NodeId>) {
            match &t.kind {
                TxnKind::Migration { granules, src, dst } => (granules.iter().copied().collect(), [*src, *dst].into(), false, None),
                TxnKind::RecoveryMigr { granules, src, dst } => {
                    (granules.iter().copied().collect(), [*src, *dst].into(), false, Some(*src))
                }
                TxnKind::User { ops } => {
                    let gs = ops
                        .iter()
                        .filter_map(|op| match op {
                            UserOp::Read(k) | UserOp::Write(k, _) => layout.granule_of(*k),
                        })
                        .collect();
                    (gs, [t.to].into(), false, None)
                }
                _ => (BTreeSet::new(), BTreeSet::new(), true, None),
            }
        };
        let info: Vec<_> = specs.iter().map(touch).collect();
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                let (gi, ni, wi, ri) = &info[i];
                let (gj, nj, wj, rj) = &info[j];
                let remote = ri.is_some_and(|s| nj.contains(&s)) || rj.is_some_and(|s| ni.contains(&s));
                if *wi || *wj || remote || !gi.is_disjoint(gj) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..specs.len()).map(|i| find(&mut parent, i)).collect()
    }

    fn node_config(&self) -> NodeConfig {
        NodeConfig {
            heartbeat: None,
            timeouts: self.crashes > 0,
            skip_guard: self.skip_guard,
            ..NodeConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreOutcome {
    Clean,
    Violation,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub outcome: ExploreOutcome,
    pub states: u64,
    pub transitions: u64,
    pub terminals: u64,
    pub max_depth: usize,
    /// Why the search stopped short, when it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<String>,
    /// Distinct violated invariants seen, with one example each.
    pub violations: Vec<Violation>,
    /// A shortest schedule reaching the first violation found.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone)]
struct Packet {
    from: Endpoint,
    to: Endpoint,
    msg: Msg,
}

impl Packet {
    fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.from.hash(&mut h);
        self.to.hash(&mut h);
        self.msg.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Deliver(usize),
    Fire(NodeId, u32, TimerKind),
    Crash(NodeId),
    Recover(NodeId),
}

#[derive(Clone)]
struct State {
    cluster: Cluster,
    net: Vec<Packet>,
    timers: BTreeSet<(NodeId, u32, TimerKind)>,
    crashes_left: u32,
    replies: BTreeMap<u32, TxnResult>,
    auditor: Auditor,
    /// A node appended to a log other than its own.
    foreign_append: bool,
}

impl State {
    fn initial(cfg: &ExploreConfig) -> State {
        let boot = cfg.bootstrap();
        let mode = if cfg.no_cas {
            AppendMode::Unconditional
        } else {
            AppendMode::Conditional
        };
        let store = crate::log_store::LogStore::with_mode(mode);
        store.set_journal(true);
        let (cluster, boots) = Cluster::with_store(&boot, cfg.node_config(), store);
        let mut s = State {
            cluster,
            net: Vec::new(),
            timers: BTreeSet::new(),
            crashes_left: cfg.crashes,
            replies: BTreeMap::new(),
            auditor: Auditor::new(boot.layout.clone()),
            foreign_append: false,
        };
        for n in &cfg.spare_nodes {
            let fx = s.cluster.spawn(*n).expect("spare node log");
            s.absorb(*n, fx);
        }
        s.flush();
        for (n, fx) in boots {
            s.absorb(n, fx);
        }
        for (i, t) in cfg.txn_specs().into_iter().enumerate() {
            let client = i as u32 + 1;
            s.net.push(Packet {
                from: Endpoint::Client(client),
                to: Endpoint::Node(t.to),
                msg: Msg::Request {
                    req: client as u64,
                    txn: TxnEnvelope {
                        id: TxnId::external(client as u64),
                        kind: t.kind,
                    },
                },
            });
        }
        s.flush();
        s
    }

    fn flush(&mut self) {
        let changes = self.cluster.log_changes();
        for log in changes.created {
            self.auditor.observe(&TraceRecord::Create { tick: 0, log });
        }
        for event in self.cluster.store.drain_journal() {
            if event.ok && event.by.is_some_and(|n| event.log != LogId::NodeLog(n)) {
                self.foreign_append = true;
            }
            self.auditor.observe(&TraceRecord::Append { tick: 0, event });
        }
        for log in changes.deleted {
            self.auditor.observe(&TraceRecord::Delete { tick: 0, log });
        }
    }

    fn absorb(&mut self, n: NodeId, fx: Effects) {
        let inc = self.cluster.node(n).map(|x| x.incarnation).unwrap_or(0);
        for (to, msg) in fx.sends {
            self.net.push(Packet {
                from: Endpoint::Node(n),
                to,
                msg,
            });
        }
        for (_, kind) in fx.timers {
            self.timers.insert((n, inc, kind));
        }
    }

    fn steps(&self) -> Vec<Step> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (i, p) in self.net.iter().enumerate() {
            if seen.insert(p.digest()) {
                out.push(Step::Deliver(i));
            }
        }
        for (n, inc, k) in &self.timers {
            if self.cluster.status(*n) == Some(NodeStatus::Up) {
                out.push(Step::Fire(*n, *inc, *k));
            }
        }
        for (n, slot) in &self.cluster.slots {
            match slot.status {
                NodeStatus::Up if self.crashes_left > 0 && !slot.node.is_retired() => out.push(Step::Crash(*n)),
                NodeStatus::Crashed => out.push(Step::Recover(*n)),
                _ => {}
            }
        }
        out
    }

    fn label(&self, step: Step) -> String {
        match step {
            Step::Deliver(i) => {
                let p = &self.net[i];
                format!("deliver {} {}->{} #{:06x}", p.msg.name(), ep(p.from), ep(p.to), p.digest() & 0xff_ffff)
            }
            Step::Fire(n, _, k) => format!("fire {k:?} at {n}"),
            Step::Crash(n) => format!("crash {n}"),
            Step::Recover(n) => format!("recover {n}"),
        }
    }

    fn apply(&mut self, step: Step) {
        match step {
            Step::Deliver(i) => {
                let p = self.net.swap_remove(i);
                match p.to {
                    Endpoint::Client(c) => {
                        if let Msg::Reply { result, .. } = p.msg {
                            self.replies.insert(c, result);
                        }
                    }
                    Endpoint::Node(n) => {
                        let input = Input::Msg { from: p.from, msg: p.msg };
                        if let Some(fx) = self.cluster.deliver(0, n, input) {
                            self.flush();
                            self.absorb(n, fx);
                        }
                    }
                }
            }
            Step::Fire(n, inc, k) => {
                self.timers.remove(&(n, inc, k));
                if self.cluster.node(n).map(|x| x.incarnation) == Some(inc) {
                    if let Some(fx) = self.cluster.deliver(0, n, Input::Timer(k)) {
                        self.flush();
                        self.absorb(n, fx);
                    }
                }
            }
            Step::Crash(n) => {
                self.cluster.crash(n);
                self.crashes_left -= 1;
                self.timers.retain(|(m, _, _)| *m != n);
            }
            Step::Recover(n) => {
                if let Some(fx) = self.cluster.recover(n) {
                    self.flush();
                    self.absorb(n, fx);
                }
            }
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.cluster.fingerprint(&mut h);
        let mut net: Vec<u64> = self.net.iter().map(Packet::digest).collect();
        net.sort_unstable();
        net.hash(&mut h);
        self.timers.hash(&mut h);
        self.crashes_left.hash(&mut h);
        self.replies.hash(&mut h);
        h.finish()
    }

    fn terminal_problem(&self, cfg: &ExploreConfig) -> Option<String> {
        let want = cfg.expect_commits?;
        let scripted = cfg.txn_specs().len();
        if self.replies.len() != scripted {
            return Some(format!("only {} of {scripted} transactions answered", self.replies.len()));
        }
        let commits = self.replies.values().filter(|r| r.is_committed()).count();
        (commits != want).then(|| format!("{commits} transactions committed, expected {want}"))
    }
}

/// Which conflict class each step belongs to, and whether the reduction
/// applies at all.
struct Reducer {
    class_of: BTreeMap<TxnId, usize>,
    active: bool,
}

impl Reducer {
    fn new(cfg: &ExploreConfig) -> Reducer {
        let classes = cfg.classes();
        let distinct: BTreeSet<usize> = classes.iter().copied().collect();
        Reducer {
            class_of: classes
                .into_iter()
                .enumerate()
                .map(|(i, c)| (TxnId::external(i as u64 + 1), c))
                .collect(),
            active: cfg.reduce && cfg.crashes == 0 && distinct.len() > 1,
        }
    }

    fn class(&self, s: &State, step: Step) -> Option<usize> {
        match step {
            Step::Deliver(i) => msg_txn(&s.net[i].msg).and_then(|t| self.class_of.get(&t).copied()),
            _ => None,
        }
    }

    /// Steps of the lowest class that has any, when every enabled step is
    /// classified; otherwise all of them.
    fn successors(&self, s: &State) -> Vec<Step> {
        let all = s.steps();
        if !self.active {
            return all;
        }
        let classes: Option<Vec<usize>> = all.iter().map(|st| self.class(s, *st)).collect();
        match classes.and_then(|c| c.iter().min().copied().map(|m| (c, m))) {
            Some((c, m)) => all.into_iter().zip(c).filter(|(_, k)| *k == m).map(|(st, _)| st).collect(),
            None => all,
        }
    }
}

fn msg_txn(m: &Msg) -> Option<TxnId> {
    match m {
        Msg::Request { txn, .. } => Some(txn.id),
        Msg::Reply { txn, .. }
        | Msg::GTableRead { txn, .. }
        | Msg::GTableReadResp { txn, .. }
        | Msg::VoteReq { txn, .. }
        | Msg::VoteResp { txn, .. }
        | Msg::Decision { txn, .. }
        | Msg::DecisionAck { txn }
        | Msg::ScanReq { txn }
        | Msg::ScanResp { txn, .. }
        | Msg::LocalVote { txn }
        | Msg::LogVote { txn, .. }
        | Msg::LogDecision { txn, .. }
        | Msg::UserCommit { txn } => Some(*txn),
        Msg::Heartbeat | Msg::HeartbeatAck | Msg::WarmupReq { .. } | Msg::WarmupResp { .. } | Msg::RunRecovery { .. } => None,
    }
}

fn ep(e: Endpoint) -> String {
    match e {
        Endpoint::Node(n) => n.to_string(),
        Endpoint::Client(c) => format!("C{c}"),
    }
}

struct Frame {
    state: State,
    steps: Vec<Step>,
    next: usize,
}

/// Runs the search.
pub fn explore(cfg: &ExploreConfig) -> ExploreReport {
    let started = Instant::now();
    let mut report = ExploreReport {
        outcome: ExploreOutcome::Clean,
        states: 0,
        transitions: 0,
        terminals: 0,
        max_depth: 0,
        cutoff: None,
        violations: Vec::new(),
        schedule: Vec::new(),
        elapsed_ms: 0,
    };
    let red = Reducer::new(cfg);
    let root = State::initial(cfg);
    let mut visited: HashMap<u64, usize> = HashMap::new();
    visited.insert(root.fingerprint(), 0);
    report.states = 1;
    let mut kinds = BTreeSet::new();
    let mut note = |report: &mut ExploreReport, v: &Violation| {
        if kinds.insert((v.invariant, v.detail.clone())) && report.violations.len() < 16 {
            report.violations.push(v.clone());
        }
    };
    for v in &root.auditor.violations {
        note(&mut report, v);
    }

    let steps = red.successors(&root);
    let mut stack = vec![Frame {
        state: root,
        steps,
        next: 0,
    }];
    while !stack.is_empty() {
        let depth = stack.len();
        let top = stack.last_mut().expect("non-empty");
        if top.steps.is_empty() && top.next == 0 {
            report.terminals += 1;
            top.next = 1;
            if let Some(p) = top.state.terminal_problem(cfg) {
                let v = Violation::new(super::Invariant::Exclusion, p).at(depth as u64 - 1);
                note(&mut report, &v);
            }
        }
        if top.next >= top.steps.len() {
            stack.pop();
            continue;
        }
        let step = top.steps[top.next];
        top.next += 1;
        let mut next = top.state.clone();
        let before = next.auditor.violations.len();
        next.apply(step);
        report.transitions += 1;
        if red.active && next.foreign_append {
            report.cutoff = Some("a node appended to another node's log; conflict classes are not independent".into());
            break;
        }
        for v in &next.auditor.violations[before..] {
            let v = v.clone().at(depth as u64);
            note(&mut report, &v);
        }
        if next.auditor.violations.len() > before {
            // Keep exploring siblings but not past a broken state.
            continue;
        }
        let fp = next.fingerprint();
        match visited.get(&fp) {
            Some(d) if *d <= depth => continue,
            _ => {}
        }
        visited.insert(fp, depth);
        report.states += 1;
        report.max_depth = report.max_depth.max(depth);
        let steps = red.successors(&next);
        if depth >= cfg.depth && !steps.is_empty() {
            report.cutoff.get_or_insert_with(|| format!("depth bound {} reached", cfg.depth));
            continue;
        }
        if report.states as usize >= cfg.max_states {
            report.cutoff = Some(format!("state bound {} reached", cfg.max_states));
            break;
        }
        if report.transitions % 4096 == 0 {
            if let Some(limit) = cfg.time_limit {
                if started.elapsed() > limit {
                    report.cutoff = Some(format!("time limit of {}s reached", limit.as_secs()));
                    break;
                }
            }
        }
        stack.push(Frame {
            state: next,
            steps,
            next: 0,
        });
    }

    report.outcome = if !report.violations.is_empty() {
        ExploreOutcome::Violation
    } else if report.cutoff.is_some() {
        ExploreOutcome::Inconclusive
    } else {
        ExploreOutcome::Clean
    };
    if report.outcome == ExploreOutcome::Violation {
        report.schedule = shortest_violation(cfg, report.max_depth + 1).unwrap_or_default();
        if let Some(v) = report.violations.first_mut() {
            v.schedule = report.schedule.clone();
        }
    }
    report.elapsed_ms = started.elapsed().as_millis() as u64;
    report
}

/// Breadth-first search for a shortest schedule ending in a violation.
pub fn shortest_violation(cfg: &ExploreConfig, max_depth: usize) -> Option<Vec<String>> {
    let red = Reducer::new(cfg);
    let root = State::initial(cfg);
    let mut visited = HashSet::new();
    visited.insert(root.fingerprint());
    let mut queue = VecDeque::new();
    queue.push_back((root, Vec::<String>::new()));
    while let Some((s, path)) = queue.pop_front() {
        let steps = red.successors(&s);
        if steps.is_empty() && s.terminal_problem(cfg).is_some() {
            return Some(path);
        }
        if path.len() >= max_depth {
            continue;
        }
        for step in steps {
            let mut next = s.clone();
            let label = next.label(step);
            let before = next.auditor.violations.len();
            next.apply(step);
            let mut p = path.clone();
            p.push(label);
            if next.auditor.violations.len() > before {
                return Some(p);
            }
            if visited.insert(next.fingerprint()) {
                queue.push_back((next, p));
            }
        }
    }
    None
}

/// Re-executes a schedule by its step labels, returning the trace of log
/// changes and the violations it reaches.
pub fn replay(cfg: &ExploreConfig, schedule: &[String]) -> Result<(Trace, Vec<Violation>), String> {
    let mut s = State::initial(cfg);
    let mut trace = Trace::default();
    trace.push(TraceRecord::Start {
        seed: 0,
        scenario: "explore".into(),
        layout: Some((*s.cluster.layout).clone()),
    });
    for (i, want) in schedule.iter().enumerate() {
        let step = s
            .steps()
            .into_iter()
            .find(|st| s.label(*st) == *want)
            .ok_or_else(|| format!("step {} ({want}) is not enabled", i + 1))?;
        let tick = i as u64 + 1;
        trace.push(TraceRecord::Note {
            tick,
            node: NodeId(0),
            text: want.clone(),
        });
        let store_before = s.cluster.store.snapshot();
        s.apply(step);
        let after = s.cluster.store.snapshot();
        for (log, batches) in &after.live {
            let old = store_before.live.get(log).map(Vec::len).unwrap_or(0);
            for (k, b) in batches.iter().enumerate().skip(old) {
                trace.push(TraceRecord::Append {
                    tick,
                    event: crate::log_store::AppendEvent {
                        by: None,
                        log: *log,
                        target: crate::types::Lsn(k as u64),
                        ok: true,
                        lsn: crate::types::Lsn(k as u64 + 1),
                        records: b.clone(),
                    },
                });
            }
        }
    }
    Ok((trace, s.auditor.violations.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_pairs_compete_for_one_granule() {
        let cfg = ExploreConfig::new(3, 6, 6);
        let specs = cfg.txn_specs();
        assert_eq!(specs.len(), 6);
        let TxnKind::Migration { granules, src, dst } = &specs[1].kind else {
            panic!("migration expected");
        };
        assert_eq!(granules, &vec![GranuleId(1)]);
        assert_eq!((*src, *dst), (NodeId(1), NodeId(3)));
    }

    #[test]
    fn two_node_pair_crosses() {
        let specs = ExploreConfig::new(2, 2, 2).txn_specs();
        let dirs: Vec<(NodeId, NodeId)> = specs
            .iter()
            .map(|s| match &s.kind {
                TxnKind::Migration { src, dst, .. } => (*src, *dst),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(dirs, vec![(NodeId(1), NodeId(2)), (NodeId(2), NodeId(1))]);
    }

    #[test]
    fn single_migration_is_clean() {
        let cfg = ExploreConfig::new(2, 2, 1);
        let r = explore(&cfg);
        assert_eq!(r.outcome, ExploreOutcome::Clean, "{r:?}");
        assert!(r.terminals >= 1);
    }
}
