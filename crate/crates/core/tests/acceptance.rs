//! One PASS/FAIL line per acceptance criterion. Every expected value here
//! is computed from the run's own trace, journal or a bare device rig, not
//! read back from the simulator's report where that can be avoided.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hasim::block::{parse_drbd_conf, Protocol, MIB};
use hasim::cluster::{Cluster, ClusterConfig, Injection, RunOutcome};
use hasim::scenario::{builtin, Scenario};
use hasim::{LinkSpec, LinkState, NodeId, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

/// Every run made by a criterion, kept for the determinism re-run.
enum Job {
    Scenario(Scenario),
    Config(ClusterConfig),
}

#[derive(Default)]
struct Runs {
    done: Vec<(String, Job, String)>,
}

impl Runs {
    fn scenario(&mut self, label: String, sc: Scenario) -> (hasim::scenario::RunReport, RunOutcome) {
        let (rep, out) = run(&sc);
        self.done.push((label, Job::Scenario(sc), out.trace.to_text()));
        (rep, out)
    }

    fn config(&mut self, label: String, cfg: ClusterConfig) -> RunOutcome {
        let out = Cluster::new(cfg.clone()).expect("valid config").run().expect("runs");
        self.done.push((label, Job::Config(cfg), out.trace.to_text()));
        out
    }
}

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_failover_sequences(runs: &mut Runs) -> Outcome {
    let mut notes = Vec::new();
    for name in ["failed-server-1", "failed-server-2"] {
        let sc = builtin(name);
        check(sc.expected.len() == 10, format!("{name} has {} expected steps", sc.expected.len()))?;
        let t = Instant::now();
        let (rep, _) = runs.scenario(name.into(), sc);
        let wall = t.elapsed();
        check(rep.verdict == "Matched", format!("{name} {}: {:?}", rep.verdict, rep.first_divergence))?;
        check(wall < Duration::from_secs(5), format!("{name} took {wall:?}"))?;
        notes.push(format!("{name} Matched in {} ms", wall.as_millis()));
    }
    Ok(notes.join(", "))
}

fn c2_seconds_scale_failover(runs: &mut Runs) -> Outcome {
    let mut notes = Vec::new();
    for (name, victim) in [("failed-server-1", "node1"), ("failed-server-2", "node2")] {
        let sc = builtin(name);
        check(sc.ha.deadtime == SimTime::from_secs(10), "deadtime is not 10 s")?;
        let (rep, out) = runs.scenario(name.into(), sc);
        let trace = &out.trace;
        let inject = trace.iter().find(|e| e.kind == "inject").ok_or("no injection")?.t;
        let dead = trace.iter().find(|e| e.kind == "dead" && e.detail == victim).ok_or("no detection")?.t;
        let fenced = trace.iter().find(|e| e.kind == "fence-ok" && e.detail == victim).ok_or("no fence")?.t;
        // Slowest guest that was on the victim, first running elsewhere.
        let moved = VMS_ALL
            .iter()
            .filter_map(|vm| {
                let was_there =
                    trace.iter().filter(|e| e.t < inject && e.kind == "running").any(|e| e.detail == format!("{vm} {victim}"));
                if !was_there {
                    return None;
                }
                trace
                    .iter()
                    .filter(|e| e.t >= inject && e.module == "vm" && e.kind == "running")
                    .find(|e| e.detail.starts_with(&format!("{vm} ")) && !e.detail.ends_with(victim))
                    .map(|e| e.t)
            })
            .max()
            .ok_or("no guest moved")?;
        let total = moved - inject;
        let (detect, fence, start) = (dead - inject, fenced - dead, moved - fenced);
        check((30_000..=32_000).contains(&total), format!("{name} failover {total} ms"))?;
        check(rep.failover_ms == Some(total), format!("{name} report says {:?}, trace says {total}", rep.failover_ms))?;
        check(
            (rep.detection_ms, rep.fence_ms, rep.start_ms) == (Some(detect), Some(fence), Some(start)),
            format!("{name} decomposition {:?}/{:?}/{:?}", rep.detection_ms, rep.fence_ms, rep.start_ms),
        )?;
        notes.push(format!("{name} {total} = {detect} + {fence} + {start}"));
    }
    Ok(notes.join(", "))
}

/// Blocks of the journal entries the durability oracle reports lost.
fn lost_blocks(out: &RunOutcome, seqs: &[u64]) -> BTreeSet<u32> {
    let want: BTreeSet<u64> = seqs.iter().copied().collect();
    out.journal.entries().iter().filter(|e| want.contains(&e.seq)).map(|e| e.block).collect()
}

fn sweep_point(base: &Scenario, protocol: Protocol, at: SimTime) -> Scenario {
    let mut sc = base.clone();
    sc.drbd.protocol = protocol;
    sc.timeline = vec![(at, Injection::PowerPull(NodeId::from("node1")))];
    sc
}

fn c3_data_loss_sweep(runs: &mut Runs) -> Outcome {
    let base = builtin("crash-during-commits");
    let interval = 100;
    let from = 30_000;
    let mut best = 0;
    let mut points = 0;
    for k in 0..interval / 10 {
        let at = SimTime(from + k * 10);
        let (_, a) = runs.scenario(format!("sweep A {at}"), sweep_point(&base, Protocol::A, at));
        let (_, c) = runs.scenario(format!("sweep C {at}"), sweep_point(&base, Protocol::C, at));
        points += 1;
        check(c.durability.lost_acked.is_empty(), format!("protocol C lost {:?} at {at}", c.durability.lost_acked))?;
        best = best.max(a.durability.lost_acked.len());

        // Acked losses must sit in the crashed primary's dirty set, and
        // every dirty block from the oldest loss onward must be lost too.
        let crash = a.crashes.iter().find(|c| c.node == "node1").ok_or("no crash recorded")?;
        let acked = lost_blocks(&a, &a.durability.lost_acked);
        let all: BTreeSet<u32> = acked.union(&lost_blocks(&a, &a.durability.lost_unacked)).copied().collect();
        if acked.is_empty() {
            continue;
        }
        check(acked.iter().all(|b| crash.dirty.contains(b)), format!("at {at} a lost block was clean"))?;
        let first = crash.dirty.iter().position(|b| all.contains(b)).expect("nonempty");
        check(
            crash.dirty[first..].iter().all(|b| all.contains(b)),
            format!("at {at} losses {:?} are not a suffix of dirty {:?}", all, crash.dirty),
        )?;
    }
    check(best >= 1, "protocol A never lost an acknowledged commit")?;
    Ok(format!("{points} points, protocol A lost up to {best} acked, protocol C none"))
}

fn c4_protocol_ordering(runs: &mut Runs) -> Outcome {
    let base = builtin("crash-during-commits");
    let at = base.timeline[0].0;
    let mut nonempty = 0;
    for seed in 0..200 {
        let lost = |runs: &mut Runs, p: Protocol| -> BTreeSet<u64> {
            let mut sc = sweep_point(&base, p, at);
            sc.seed = seed;
            let (_, out) = runs.scenario(format!("order {p:?} {seed}"), sc);
            out.durability.lost_acked.iter().copied().collect()
        };
        let (a, b, c) = (lost(runs, Protocol::A), lost(runs, Protocol::B), lost(runs, Protocol::C));
        check(c.is_subset(&b) && b.is_subset(&a), format!("seed {seed}: C {c:?} B {b:?} A {a:?}"))?;
        if !a.is_empty() {
            nonempty += 1;
        }
    }
    Ok(format!("200 seeds hold C <= B <= A ({nonempty} with protocol A losses)"))
}

fn c5_split_brain(runs: &mut Runs) -> Outcome {
    let sc = builtin("split-brain-2pri");
    let partition = sc.timeline.iter().find(|(_, i)| matches!(i, Injection::LinkPartition(..))).ok_or("no partition")?.0;
    let resolve = sc.timeline.iter().find(|(_, i)| matches!(i, Injection::ResolveSplitBrain(_))).ok_or("no resolve")?.0;
    let (_, out) = runs.scenario("split-brain-2pri".into(), sc);
    let trace = &out.trace;
    let sb = trace.iter().position(|e| e.kind == "split-brain").ok_or("no split brain")?;
    check(trace.entries()[sb].detail == "primaries=2", "split brain did not see two primaries")?;
    let standalone: BTreeSet<String> = trace
        .iter()
        .skip(sb)
        .take_while(|e| e.t < resolve.as_ms())
        .filter(|e| e.kind == "status" && e.detail.contains("cs:StandAlone"))
        .filter_map(|e| e.node.clone())
        .collect();
    check(standalone.len() == 2, format!("StandAlone on {standalone:?}"))?;
    let early = out.resyncs.iter().filter(|r| r.started < resolve).count();
    check(early == 0, format!("{early} resyncs began before resolution"))?;
    check(
        !trace.iter().any(|e| e.kind == "resync-start" && e.t < resolve.as_ms()),
        "trace shows a resync before resolution",
    )?;

    // Divergence from the journal: every write either side accepted from
    // the partition until the operator stepped in.
    let expected: BTreeSet<u32> = out
        .journal
        .entries()
        .iter()
        .filter(|e| !e.rejected && e.issued_at >= partition && e.issued_at < resolve)
        .map(|e| e.block)
        .collect();
    let r = out.resyncs.iter().find(|r| r.started >= resolve).ok_or("no resync after resolution")?;
    check(r.target == "node2", format!("resync went toward {}", r.target))?;
    let moved: BTreeSet<u32> = r.transferred.iter().copied().collect();
    check(moved.len() == r.transferred.len(), "a block was transferred twice")?;
    check(moved == expected, format!("transferred {} blocks, journal diverged on {}", moved.len(), expected.len()))?;
    Ok(format!("SplitBrain, both StandAlone, 0 blocks before resolve, {} transferred = divergent", moved.len()))
}

fn c6_resync_arithmetic(runs: &mut Runs) -> Outcome {
    let (mut cfg, _) = parse_drbd_conf(DRBD).map_err(|e| e.to_string())?;
    cfg.protocol = Protocol::C;
    let blocks = (100 * MIB / cfg.block_size) as u32;
    cfg.block_count = cfg.block_count.max(blocks);
    let tick = cfg.resync_tick.as_ms();
    let expect_ms = 100 * MIB * 1000 / cfg.sync_rate;
    let link = LinkSpec { latency: SimTime(1), bandwidth: 100_000_000 / 8, ..LinkSpec::new("a", "b") };
    let mut rig = Rig::new(cfg, link);
    let (a, b) = (rig.a.clone(), rig.b.clone());
    rig.promote(&a);
    rig.link(LinkState::Partitioned);
    rig.run_until(SimTime::from_secs(11));
    for blk in 0..blocks {
        rig.write(&a, blk, u64::from(blk) + 1);
    }
    rig.link(LinkState::Up);
    rig.run_until(SimTime::from_secs(60));
    let (start, done) = rig.resync_window().ok_or("resync never finished")?;
    let took = done.saturating_sub(start).as_ms();
    check(took.abs_diff(expect_ms) <= tick, format!("100 MiB took {took} ms, want {expect_ms} +- {tick}"))?;
    check(rig.dev.divergent_blocks().is_empty(), "replicas still differ")?;
    check(rig.dev.side(&b).is_some(), "peer missing")?;

    let (rep, _) = runs.scenario("failed-server-1".into(), builtin("failed-server-1"));
    let u = rep.resync_utilization.ok_or("failback had no resync")?;
    check(u >= 0.8, format!("failback resync used {:.1}% of the link", u * 100.0))?;
    Ok(format!("100 MiB in {took} ms, failback resync at {:.1}% link", u * 100.0))
}

/// A random timeline of one to three injections.
fn fuzz_config(i: u64) -> ClusterConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(i);
    let node = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { "node1" } else { "node2" };
    let mut inj = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let at = SimTime(rng.gen_range(20_000..150_000));
        let n = node(&mut rng);
        let text = match rng.gen_range(0..8) {
            0 => format!("power-pull {n}"),
            1 => format!("heartbeat-stop {n}"),
            2 => format!("clean-shutdown {n}"),
            3 => "link-partition node1 node2".to_string(),
            4 => "link-heal node1 node2".to_string(),
            5 => format!("disk-fault {n}"),
            6 => format!("power-on {n}"),
            _ => format!("resolve-split-brain {n}"),
        };
        inj.push((at, text.parse::<Injection>().expect("fuzz injection parses")));
    }
    inj.sort_by_key(|(t, _)| *t);
    let stonith = if rng.gen_bool(0.5) { POWER } else { SSH };
    canonical(stonith, i, inj, SimTime::from_secs(220))
}

fn c7_single_instance(runs: &mut Runs) -> Outcome {
    for name in builtin::scenario_names() {
        let (rep, out) = runs.scenario(format!("builtin {name}"), builtin(name));
        check(rep.violations.is_empty(), format!("{name}: {:?}", rep.violations))?;
        let bad = double_runs(&out.trace);
        check(bad.is_empty(), format!("{name}: {bad:?}"))?;
    }
    for i in 0..500 {
        let out = runs.config(format!("fuzz {i}"), fuzz_config(i));
        check(out.violations.is_empty(), format!("fuzz {i}: {:?}", out.violations))?;
        let bad = double_runs(&out.trace);
        check(bad.is_empty(), format!("fuzz {i}: {bad:?}"))?;
    }
    let (_, out) = runs.scenario("failed-server-2".into(), builtin("failed-server-2"));
    let fenced = position(&out.trace, "fence-ok", "node2").ok_or("node2 never fenced")?;
    for vm in ["vm3", "vm4"] {
        let start = out
            .trace
            .iter()
            .position(|e| e.module == "crm" && e.kind == "start" && e.detail == format!("{vm} node1"))
            .ok_or(format!("{vm} never started on node1"))?;
        check(fenced < start, format!("{vm} started on node1 before node2 was fenced"))?;
    }
    Ok(format!("{} builtins + 500 fuzz runs clean, fence precedes takeover", builtin::scenario_names().count()))
}

fn c8_contrast(runs: &mut Runs) -> Outcome {
    let (rep, out) = runs.scenario("literal-infinity".into(), builtin("literal-infinity"));
    let d = rep.first_divergence.clone().ok_or("literal-infinity matched")?;
    check(d.index == 7 && d.pattern == "stopped node2 vm1 vm2", format!("diverged at {} {:?}", d.index, d.pattern))?;
    for vm in ["vm1", "vm2"] {
        check(out.final_placement.get(vm).map(Vec::as_slice) == Some(&["node2".to_string()][..]), format!("{vm} failed back"))?;
    }
    let (rep, out) = runs.scenario("literal-quorum-stop".into(), builtin("literal-quorum-stop"));
    check(rep.verdict == "Matched", format!("quorum-stop {}", rep.verdict))?;
    let running: Vec<_> = out.final_placement.iter().filter(|(_, n)| !n.is_empty()).collect();
    check(running.is_empty(), format!("still running: {running:?}"))?;
    check(
        out.trace.iter().any(|e| e.kind == "stopped" && e.module == "vm" && e.detail.ends_with("node2")),
        "the survivor never stopped anything",
    )?;
    Ok("stickiness INFINITY diverges at failback step 8; quorum stop leaves nothing running".into())
}

fn c9_determinism(runs: &mut Runs) -> Outcome {
    let mut checked = 0;
    for (i, (label, job, trace)) in runs.done.iter().enumerate() {
        // Builtins in full; the large sweeps sampled.
        if !(label.starts_with("builtin") || i % 7 == 0) {
            continue;
        }
        let again = match job {
            Job::Scenario(sc) => run(sc).1.trace.to_text(),
            Job::Config(cfg) => Cluster::new(cfg.clone()).unwrap().run().unwrap().trace.to_text(),
        };
        check(&again == trace, format!("{label} trace changed on re-run"))?;
        checked += 1;
    }
    Ok(format!("{checked} of {} runs byte-identical on re-run", runs.done.len()))
}

fn main() -> ExitCode {
    type Criterion = fn(&mut Runs) -> Outcome;
    let criteria: [(&str, Criterion); 9] = [
        ("failover sequences match", c1_failover_sequences),
        ("seconds-scale failover", c2_seconds_scale_failover),
        ("protocol A loses the dirty suffix, C loses nothing", c3_data_loss_sweep),
        ("lost(C) <= lost(B) <= lost(A)", c4_protocol_ordering),
        ("split-brain safety", c5_split_brain),
        ("resync arithmetic", c6_resync_arithmetic),
        ("single-instance safety", c7_single_instance),
        ("config contrast runs", c8_contrast),
        ("determinism", c9_determinism),
    ];
    if let Some(i) = std::env::var("HASIM_DUMP_FUZZ").ok().and_then(|v| v.parse().ok()) {
        dump_fuzz(i);
        return ExitCode::SUCCESS;
    }
    let mut runs = Runs::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f(&mut runs);
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {}: PASS  {name}: {msg} ({secs:.1}s)", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {msg} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// `HASIM_DUMP_FUZZ=<i>` prints one fuzz case's trace instead of running
/// the criteria; `HASIM_DUMP_NET` adds network and write lines.
fn dump_fuzz(i: u64) {
    let mut cfg = fuzz_config(i);
    cfg.trace_network = std::env::var("HASIM_DUMP_NET").is_ok();
    println!("{:?}", cfg.injections);
    let out = Cluster::new(cfg).unwrap().run().unwrap();
    for e in out.trace.iter().filter(|e| !matches!(e.kind.as_str(), "monitor" | "rejected" | "io-failed")) {
        println!("{}", e.to_line());
    }
}
