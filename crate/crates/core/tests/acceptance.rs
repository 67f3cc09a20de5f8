//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use marlin_core::commit::{AbortReason, TxnDecision};
use marlin_core::log_store::LogStore;
use marlin_core::node::{TxnKind, TxnResult, TxnTag};
use marlin_core::sim::scaling::migration_throughput;
use marlin_core::sim::scenario::{bundled, ScenarioSpec};
use marlin_core::sim::soak::{run_soak, SoakConfig};
use marlin_core::sim::{ownership_map, run_scenario, SimOutput, TraceRecord};
use marlin_core::verifier::explore::{explore, ExploreConfig, ExploreOutcome, TxnSpec, Workload};
use marlin_core::verifier::{check_serialization, Invariant};
use marlin_core::{GranuleId, LogId, Lsn, NodeId};

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Check {
        Check {
            pass,
            detail: detail.into(),
        }
    }
}

fn scenario(name: &str, seed: u64) -> SimOutput {
    let spec = ScenarioSpec::from_json(bundled::get(name).expect("bundled scenario")).expect("valid scenario");
    run_scenario(&spec, seed).expect("scenario runs")
}

fn committed(out: &SimOutput, tag: TxnTag) -> Vec<(u64, &marlin_core::node::Outcome)> {
    out.trace
        .outcomes()
        .filter(|(_, o)| o.tag == tag && o.decision.is_commit())
        .collect()
}

fn model_check_parity() -> Check {
    let cfg = ExploreConfig::new(3, 6, 6);
    let t = Instant::now();
    let r = explore(&cfg);
    let elapsed = t.elapsed();
    let owner_faults = r
        .violations
        .iter()
        .filter(|v| matches!(v.invariant, Invariant::I2 | Invariant::I3 | Invariant::I4))
        .count();
    Check::new(
        r.outcome == ExploreOutcome::Clean && owner_faults == 0 && elapsed < Duration::from_secs(600),
        format!(
            "explore 3 6 6: {:?}, {} states, {} terminals, {} I2/I3/I4 violations, {:.1}s",
            r.outcome,
            r.states,
            r.terminals,
            owner_faults,
            elapsed.as_secs_f64()
        ),
    )
}

fn seeded_bugs() -> Check {
    let mut guard = ExploreConfig::new(2, 2, 2);
    guard.skip_guard = true;
    let g = explore(&guard);
    let mut cas = ExploreConfig::new(2, 2, 2);
    cas.no_cas = true;
    cas.workload = Workload::StaleWrite;
    let c = explore(&cas);
    let found = |r: &marlin_core::verifier::explore::ExploreReport| {
        r.outcome == ExploreOutcome::Violation && !r.violations.is_empty()
    };
    Check::new(
        found(&g) && found(&c),
        format!(
            "skip-guard: {:?} ({} violations), no-cas: {:?} ({} violations)",
            g.outcome,
            g.violations.len(),
            c.outcome,
            c.violations.len()
        ),
    )
}

fn cas_soak() -> Check {
    let cfg = SoakConfig {
        threads: 8,
        appends: 10_000,
        ..SoakConfig::default()
    };
    let rep = match run_soak(Arc::new(LogStore::new()), &cfg) {
        Ok(r) => r,
        Err(e) => return Check::new(false, format!("soak failed: {e}")),
    };
    let summary: Vec<String> = rep
        .logs
        .iter()
        .map(|l| format!("{} tail {} gaps {} double {}", l.log, l.tail, l.gaps, l.double_claims))
        .collect();
    Check::new(rep.pass(), format!("8 threads x 10000: {}", summary.join("; ")))
}

fn fig5() -> Check {
    let out = scenario("fig5_scaleout", 1);
    let mut errs = Vec::new();
    let add = committed(&out, TxnTag::AddNode);
    if add.len() != 1 || add[0].1.positions != vec![(LogId::SysLog, Lsn(3))] {
        errs.push(format!("add_node commits {:?}", add.iter().map(|(_, o)| &o.positions).collect::<Vec<_>>()));
    }
    let migr_at = committed(&out, TxnTag::Migration).first().map(|(t, _)| *t);
    let wrong = out.trace.outcomes().find(|(t, o)| {
        o.tag == TxnTag::User
            && o.coordinator == NodeId(2)
            && o.decision == TxnDecision::Abort(AbortReason::WrongNode(Some(NodeId(3))))
            && Some(*t) > migr_at
    });
    if wrong.is_none() {
        errs.push("no WrongNode(N3) abort on N2 after the migration".into());
    }
    let redirected = out.trace.records.iter().any(|r| match r {
        TraceRecord::Reply {
            txn, result, attempt, ..
        } => {
            *attempt > 1
                && matches!(result, TxnResult::Committed { .. })
                && out
                    .trace
                    .outcomes()
                    .any(|(_, o)| o.txn == *txn && o.coordinator == NodeId(3) && o.decision.is_commit())
        }
        _ => false,
    });
    if !redirected {
        errs.push("redirected txn did not commit on N3".into());
    }
    let want: BTreeMap<GranuleId, Vec<NodeId>> = [(1, 1), (2, 2), (3, 3), (4, 1)]
        .into_iter()
        .map(|(g, n)| (GranuleId(g), vec![NodeId(n)]))
        .collect();
    let got = ownership_map(&out.cluster);
    if got != want {
        errs.push(format!("ownership {got:?}"));
    }
    if !out.verdict.pass {
        errs.push(format!("{} audit violations", out.verdict.violations.len()));
    }
    finish("AddNode@SysLog 3, WrongNode(N3), redirect on N3, G1-N1 G2-N2 G3-N3 G4-N1", errs)
}

fn fig6() -> Check {
    let out = scenario("fig6_failover", 1);
    let mut errs = Vec::new();
    let rec = committed(&out, TxnTag::RecoveryMigr);
    let want = vec![(LogId::NodeLog(NodeId(2)), Lsn(3)), (LogId::NodeLog(NodeId(3)), Lsn(2))];
    if rec.len() != 1 || sorted(&rec[0].1.positions) != want {
        errs.push(format!("recovery commits {:?}", rec.iter().map(|(_, o)| &o.positions).collect::<Vec<_>>()));
    }
    let lsn_abort = out.trace.outcomes().any(|(_, o)| {
        o.tag == TxnTag::User && o.coordinator == NodeId(3) && o.decision == TxnDecision::Abort(AbortReason::LsnMismatch)
    });
    if !lsn_abort {
        errs.push("N3 user txn did not abort with LsnMismatch".into());
    }
    let invalidated = out.trace.records.iter().any(|r| {
        matches!(r, TraceRecord::Note { node, text, .. } if *node == NodeId(3) && text.contains("cache of GLog3 invalidated"))
    });
    if !invalidated {
        errs.push("N3 kept its cache".into());
    }
    let deleted = committed(&out, TxnTag::DeleteNode).len() == 1
        && out
            .trace
            .records
            .iter()
            .any(|r| matches!(r, TraceRecord::Delete { log, .. } if *log == LogId::NodeLog(NodeId(3))));
    let gone = ownership_map(&out.cluster).values().all(|o| !o.contains(&NodeId(3)));
    if !deleted || !gone {
        errs.push("DeleteNode did not remove N3".into());
    }
    if !out.verdict.pass || !out.verdict.quiescent {
        errs.push(format!("audit: pass {} quiescent {}", out.verdict.pass, out.verdict.quiescent));
    }
    finish("RecoveryMigr GLog2@3 GLog3@2, LsnMismatch + invalidation, N3 deleted, audit clean", errs)
}

fn sorted(p: &[(LogId, Lsn)]) -> Vec<(LogId, Lsn)> {
    let mut v = p.to_vec();
    v.sort();
    v
}

fn finish(what: &str, errs: Vec<String>) -> Check {
    if errs.is_empty() {
        Check::new(true, what)
    } else {
        Check::new(false, errs.join("; "))
    }
}

/// Runs criterion 6 and hands its traces' I0 results to criterion 7.
fn randomized() -> (Check, Check) {
    let spec = ScenarioSpec::from_json(bundled::get("mixed").expect("bundled")).expect("valid");
    let t = Instant::now();
    let (mut safety, mut order, mut inconclusive, mut crashes) = (Vec::new(), 0usize, 0usize, 0usize);
    let mut first_i0 = None;
    for seed in 1..=1000u64 {
        let out = run_scenario(&spec, seed).expect("mixed runs");
        safety.extend(out.verdict.violations.iter().filter(|v| v.invariant != Invariant::I0).map(|v| (seed, v.clone())));
        let i0 = check_serialization(&out.trace);
        if first_i0.is_none() && !i0.is_empty() {
            first_i0 = Some((seed, i0[0].clone()));
        }
        order += i0.len();
        if !out.verdict.quiescent {
            inconclusive += 1;
        }
        if out
            .trace
            .records
            .iter()
            .any(|r| matches!(r, TraceRecord::Fault { fault, .. } if fault.starts_with("crash")))
        {
            crashes += 1;
        }
    }
    let elapsed = t.elapsed();
    let c6 = Check::new(
        safety.is_empty() && inconclusive == 0 && crashes == 1000 && elapsed < Duration::from_secs(900),
        match safety.first() {
            Some((s, v)) => format!("{} violations, first at seed {s}: {v}", safety.len()),
            None => format!(
                "1000 seeds, 0 I1-I5/lost/duplicate violations, {inconclusive} unfinished, {crashes} with a crash, {:.1}s",
                elapsed.as_secs_f64()
            ),
        },
    );
    let c7 = Check::new(
        order == 0,
        match first_i0 {
            Some((s, v)) => format!("{order} I0 violations, first at seed {s}: {v}"),
            None => "check_serialization clean on all 1000 traces".into(),
        },
    );
    (c6, c7)
}

fn conflict_exclusion() -> Check {
    let g1 = vec![GranuleId(1)];
    let spec = |to: u32, kind: TxnKind| TxnSpec { to: NodeId(to), kind };
    let cases = [
        (
            "add/delete",
            3,
            2,
            vec![
                spec(1, TxnKind::AddNode { node: NodeId(4), address: "n4".into() }),
                spec(2, TxnKind::DeleteNode { node: NodeId(3) }),
            ],
            vec![NodeId(4)],
        ),
        (
            "dual migration",
            3,
            3,
            vec![
                spec(2, TxnKind::Migration { granules: g1.clone(), src: NodeId(1), dst: NodeId(2) }),
                spec(3, TxnKind::Migration { granules: g1.clone(), src: NodeId(1), dst: NodeId(3) }),
            ],
            vec![],
        ),
        (
            "dual recovery",
            3,
            3,
            vec![
                spec(2, TxnKind::RecoveryMigr { granules: g1.clone(), src: NodeId(1), dst: NodeId(2) }),
                spec(3, TxnKind::RecoveryMigr { granules: g1.clone(), src: NodeId(1), dst: NodeId(3) }),
            ],
            vec![],
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, nodes, granules, txns, spare) in cases {
        let mut cfg = ExploreConfig::new(nodes, granules, 2);
        cfg.workload = Workload::Custom(txns);
        cfg.spare_nodes = spare;
        cfg.expect_commits = Some(1);
        cfg.reduce = false;
        let r = explore(&cfg);
        pass &= r.outcome == ExploreOutcome::Clean && r.terminals > 0;
        parts.push(format!("{name} {:?} ({} schedules ended)", r.outcome, r.terminals));
    }
    Check::new(pass, parts.join(", "))
}

fn scaling() -> Check {
    let seeds = 1..=3u64;
    let mean = |nodes: u32, central: bool| {
        let rs: Vec<_> = seeds.clone().map(|s| migration_throughput(nodes, central, 16, s)).collect();
        let tp = rs.iter().map(|r| r.per_tick).sum::<f64>() / rs.len() as f64;
        let plateau = rs.iter().all(|r| r.peak_per_tick <= 1 && r.committed <= r.syslog_slots);
        let clean = rs.iter().all(|r| r.pass);
        (tp, plateau, clean)
    };
    let dist: Vec<_> = [2, 4, 8].into_iter().map(|n| mean(n, false)).collect();
    let cent: Vec<_> = [2, 4, 8].into_iter().map(|n| mean(n, true)).collect();
    let monotone = dist.windows(2).all(|w| w[1].0 > w[0].0);
    let plateau = cent.iter().all(|c| c.1);
    let clean = dist.iter().chain(&cent).all(|c| c.2);
    Check::new(
        monotone && plateau && clean,
        format!(
            "distributed {:.3} -> {:.3} -> {:.3} per tick; centralized {:.3} / {:.3} / {:.3}, at most 1 per SysLog slot: {plateau}",
            dist[0].0, dist[1].0, dist[2].0, cent[0].0, cent[1].0, cent[2].0
        ),
    )
}

fn main() -> ExitCode {
    let (c6, c7) = randomized();
    let results = [
        ("model-check parity", model_check_parity()),
        ("seeded-bug sensitivity", seeded_bugs()),
        ("CAS linearizability", cas_soak()),
        ("scale-out replay", fig5()),
        ("failover replay", fig6()),
        ("randomized safety", c6),
        ("serialization", c7),
        ("conflict exclusion", conflict_exclusion()),
        ("scaling analog", scaling()),
    ];
    let mut ok = true;
    for (i, (name, c)) in results.iter().enumerate() {
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
        ok &= c.pass;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
