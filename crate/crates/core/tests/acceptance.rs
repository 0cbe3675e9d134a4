//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use seclab::harness::examples::{
    check_naive_relation_fails, check_net, net_benign, net_stashing, temp_write_example,
};
use seclab::harness::runner::case_seeds;
use seclab::harness::*;
use seclab::memory::STATIC_BLOCK;
use seclab::target::Machine;
use seclab::traces::{remove_df, shared_prefixes, well_bracketed, Loc};
use seclab::{source, Event, Memory, Pointer, Register, Value};

const FUEL: u64 = 10_000;
const PROP_CASES: u32 = 1000;

type Outcome = Result<String, String>;

fn criterion(n: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let r = f();
    let secs = start.elapsed().as_secs_f64();
    match &r {
        Ok(d) => println!("PASS {n} {name}: {d} ({secs:.1}s)"),
        Err(d) => println!("FAIL {n} {name}: {d} ({secs:.1}s)"),
    }
    r.is_ok()
}

fn cfg() -> GenConfig {
    GenConfig {
        fuel: FUEL,
        ..GenConfig::default()
    }
}

/// Collects failures of per-seed checks as `seed: message`.
fn failures<T>(results: &[(u64, Verdict, T)]) -> Vec<String> {
    results
        .iter()
        .filter_map(|(s, v, _)| match v {
            Verdict::Fail(m) => Some(format!("seed {s}: {m}")),
            _ => None,
        })
        .collect()
}

fn summarize(fails: Vec<String>, ok: String) -> Outcome {
    if fails.is_empty() {
        Ok(ok)
    } else {
        Err(format!("{} failures, first: {}", fails.len(), fails[0]))
    }
}

fn enrichment() -> Outcome {
    let base = cfg();
    let res = par_map(&case_seeds(1_000, 500), |&s| {
        let (v, info) = check_enrichment(&gen_mach_program(&base.with_seed(s)), FUEL);
        (s, v, info)
    });
    let events: usize = res.iter().map(|r| r.2.df_events).sum();
    let done = res.iter().filter(|r| r.2.done).count();
    summarize(
        failures(&res),
        format!("500 programs, {events} data-flow events, {done} terminated"),
    )
}

fn backtranslation() -> Outcome {
    let base = cfg();
    let mut found = Vec::new();
    let mut next = 2_000;
    while found.len() < 200 && next < 2_000 + 5_000 {
        let batch = par_map(&case_seeds(next, 100), |&s| {
            let p = gen_mach_program(&base.with_seed(s));
            let (df, o) = Machine::new(&p).run(FUEL);
            let info = checks::RunInfo::of(&df, &o);
            if info.shared == 0 {
                return None;
            }
            Some((s, checks::backtranslation_verdict(&p, &df), info))
        });
        found.extend(batch.into_iter().flatten());
        next += 100;
    }
    found.truncate(200);
    if found.len() < 200 {
        return Err(format!("only {} runs with a shared block", found.len()));
    }
    let shared: usize = found.iter().map(|r| r.2.shared).sum();
    let events: usize = found.iter().map(|r| r.2.df_events).sum();
    summarize(
        failures(&found),
        format!("200 runs with sharing, {shared} shared blocks, {events} boundaries checked"),
    )
}

fn compiler() -> Outcome {
    let base = cfg();
    let res = par_map(&case_seeds(3_000, 500), |&s| {
        let (v, info) = check_compiler(&gen_source_program(&base.with_seed(s)), FUEL);
        (s, v, info)
    });
    let events: usize = res.iter().map(|r| r.2.source_events).sum();
    let truncated = res.iter().filter(|r| r.2.truncated).count();
    summarize(
        failures(&res),
        format!("500 programs, {events} events, {truncated} compared as prefixes"),
    )
}

fn recomposition() -> Outcome {
    let rep = rsp_test(&cfg().with_seed(4_000), 100);
    let fails: Vec<String> = rep
        .results
        .iter()
        .filter(|r| !r.verdict.is_pass())
        .map(|r| {
            format!(
                "seed {} at {}: {:?}",
                r.seed,
                r.stage.unwrap_or("?"),
                r.verdict
            )
        })
        .collect();
    let shared = rep.results.iter().filter(|r| r.shared > 0).count();
    let events: usize = rep.results.iter().map(|r| r.events).sum();
    summarize(
        fails,
        format!(
            "{} pipelines passed, {shared} with sharing, {events} interaction events",
            rep.passed
        ),
    )
}

fn naive_witness() -> Outcome {
    let rep = check_naive_relation_fails(&temp_write_example())?;
    if !rep.witnesses_turn_taking() {
        return Err(format!(
            "naive failures at {:?}, ticks holding 42 {:?}, violations {:?}, pc accepts {}, tt rejects {}",
            rep.naive_failures,
            rep.ticks_holding_42,
            rep.monitor.violations,
            rep.pc_accepts_private_mutation,
            rep.tt_rejects_private_mutation
        ));
    }
    Ok(format!(
        "naive relation fails at ticks {:?} of {}, turn-taking holds throughout",
        rep.naive_failures, rep.monitor.ticks
    ))
}

fn net() -> Outcome {
    let mut details = Vec::new();
    for (name, ctx, expect) in [
        ("benign", net_benign(), true),
        ("stashing", net_stashing(), false),
    ] {
        let rep = check_net(&ctx, 100_000);
        if let Some(s) = rep.pipeline.first_failure() {
            return Err(format!("{name}: stage {} failed: {:?}", s.name, s.verdict));
        }
        if rep.pipeline.traces.len() != 5 {
            return Err(format!(
                "{name}: pipeline produced {} traces",
                rep.pipeline.traces.len()
            ));
        }
        if rep.nowrite_t1 != expect || rep.nowrite_t_qed != expect {
            return Err(format!(
                "{name}: nowrite on t1 {}, on t_qed {}",
                rep.nowrite_t1, rep.nowrite_t_qed
            ));
        }
        let rens = &rep.pipeline.renamings;
        details.push(format!(
            "{name}: nowrite {expect} on t1 and t_qed, t1->t12 {}, t1->t_qed {}",
            rens["t1->t12"], rens["t1->t_qed"]
        ));
    }
    Ok(details.join("; "))
}

// Model sanity properties.

#[derive(Clone, Debug)]
enum MemOp {
    Alloc(usize, i64),
    Store(usize, usize, i64, i64),
}

fn mem_op() -> impl Strategy<Value = MemOp> {
    prop_oneof![
        (0..3usize, 1..6i64).prop_map(|(c, n)| MemOp::Alloc(c, n)),
        (0..3usize, 0..4usize, 0..6i64, -50..50i64)
            .prop_map(|(c, b, o, v)| MemOp::Store(c, b, o, v)),
    ]
}

fn fresh_memory() -> Memory {
    let mut m = Memory::new();
    for c in 0..3 {
        m.add_component(c, vec![Value::Int(0); 4]);
    }
    m
}

/// Applies `op`, returning the touched component. Stores target the
/// `b`-th existing block of the component, out-of-bounds offsets fail.
fn apply(m: &mut Memory, op: &MemOp) -> (usize, Result<Option<Pointer>, String>) {
    match *op {
        MemOp::Alloc(c, n) => (c, m.alloc(c, n).map(Some).map_err(|e| e.to_string())),
        MemOp::Store(c, b, o, v) => {
            let blocks: Vec<_> = m.block_ids().into_iter().filter(|l| l.0 == c).collect();
            let (_, id) = blocks[b % blocks.len()];
            (
                c,
                m.store(Pointer::data(c, id, o), Value::Int(v))
                    .map(|_| None)
                    .map_err(|e| e.to_string()),
            )
        }
    }
}

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: PROP_CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn memory_props() -> Result<(), String> {
    let mut runner = runner();
    runner
        .run(
            &(
                prop::collection::vec(mem_op(), 0..40),
                prop::collection::btree_set(0..3usize, 0..=3),
            ),
            |(ops, part)| {
                let (mut a, mut b) = (fresh_memory(), fresh_memory());
                for op in &ops {
                    let before = a.clone();
                    let (c, ra) = apply(&mut a, op);
                    let (_, rb) = apply(&mut b, op);
                    prop_assert_eq!(&ra, &rb);
                    prop_assert_eq!(&a, &b);
                    // Other components are untouched.
                    let others: BTreeSet<usize> = (0..3).filter(|x| *x != c).collect();
                    prop_assert_eq!(a.proj_part(&others), before.proj_part(&others));
                    if let Ok(Some(p)) = ra {
                        prop_assert!(!before.block_ids().contains(&(c, p.block)));
                        prop_assert!(before
                            .block_ids()
                            .iter()
                            .filter(|l| l.0 == c)
                            .all(|l| l.1 < p.block));
                        prop_assert!(p.block > STATIC_BLOCK);
                    }
                    if ra.is_err() {
                        prop_assert_eq!(&a, &before);
                    }
                }
                let rest: BTreeSet<usize> = (0..3).filter(|c| !part.contains(c)).collect();
                let (l, r) = (a.proj_part(&part), a.proj_part(&rest));
                prop_assert!(l.block_ids().is_disjoint(&r.block_ids()));
                prop_assert_eq!(l.union(&r), a.clone());
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

fn border_events_invalidate() -> Result<(), String> {
    let base = cfg();
    let mut runner = runner();
    runner
        .run(&any::<u64>(), |seed| {
            let (df, _) = Machine::new(&gen_mach_program(&base.with_seed(seed))).run(FUEL);
            for e in df.iter().filter(|e| e.is_border()) {
                let reg = e.reg();
                for r in Register::ALL.into_iter().filter(|r| *r != Register::Com) {
                    prop_assert_eq!(reg.get(r), Value::Error, "{:?} survives a {}", r, e.kind());
                }
                let v = e.to_interaction().unwrap().value();
                prop_assert_eq!(reg.get(Register::Com), v);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Independent nesting check: every return closes the latest open call.
fn nested(t: &[Event]) -> bool {
    let mut open: Vec<(usize, usize)> = Vec::new();
    t.iter().all(|e| match e {
        Event::Call { caller, callee, .. } => {
            open.push((*caller, *callee));
            true
        }
        Event::Ret { prev, next, .. } => open.pop() == Some((*next, *prev)),
    })
}

fn well_bracketing() -> Result<(), String> {
    let base = cfg();
    let mut runner = runner();
    runner
        .run(&any::<u64>(), |seed| {
            let c = base.with_seed(seed);
            let (df, _) = Machine::new(&gen_mach_program(&c)).run(FUEL);
            let t = remove_df(&df);
            prop_assert!(nested(&t) && well_bracketed(&t));
            let (ts, _) = source::run(&gen_source_program(&c), FUEL);
            prop_assert!(nested(&ts) && well_bracketed(&ts));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Blocks reachable from `roots` in `mem`, recomputed from scratch.
fn reachable(mem: &Memory, roots: &BTreeSet<Loc>) -> BTreeSet<Loc> {
    let mut seen = roots.clone();
    loop {
        let more: BTreeSet<Loc> = seen
            .iter()
            .filter_map(|(c, b)| mem.block(*c, *b))
            .flat_map(|cells| {
                cells
                    .iter()
                    .filter_map(|v| v.data_block())
                    .collect::<Vec<_>>()
            })
            .collect();
        if more.is_subset(&seen) {
            return seen;
        }
        seen.extend(more);
    }
}

fn shared_monotone() -> Result<(), String> {
    let base = cfg();
    let mut runner = runner();
    runner
        .run(&any::<u64>(), |seed| {
            let (df, _) = Machine::new(&gen_mach_program(&base.with_seed(seed))).run(FUEL);
            let t = remove_df(&df);
            let prefixes = shared_prefixes(&t);
            let mut prev = BTreeSet::new();
            for (e, cur) in t.iter().zip(&prefixes) {
                prop_assert!(prev.is_subset(cur));
                let mut roots = prev.clone();
                roots.extend(e.value().data_block());
                prop_assert_eq!(&reachable(e.mem(), &roots), cur);
                prev = cur.clone();
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

type Property = fn() -> Result<(), String>;

fn sanity() -> Outcome {
    let suites: [(&str, Property); 4] = [
        ("memory determinism and partition", memory_props),
        ("register invalidation at borders", border_events_invalidate),
        ("well-bracketing", well_bracketing),
        ("shared-block prefix monotonicity", shared_monotone),
    ];
    let mut fails = Vec::new();
    for (name, f) in suites {
        if let Err(e) = with_big_stack(f) {
            fails.push(format!("{name}: {e}"));
        }
    }
    if fails.is_empty() {
        Ok(format!("4 properties, {PROP_CASES} cases each"))
    } else {
        Err(fails.join("; "))
    }
}

fn main() -> ExitCode {
    // Only run under `cargo test`, not when listing tests.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let results = [
        criterion(1, "enrichment", enrichment),
        criterion(2, "back-translation", backtranslation),
        criterion(3, "compiler correctness", compiler),
        criterion(4, "recomposition and turn-taking monitor", recomposition),
        criterion(5, "naive relation witness", naive_witness),
        criterion(6, "network example end to end", net),
        criterion(7, "model sanity properties", sanity),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
