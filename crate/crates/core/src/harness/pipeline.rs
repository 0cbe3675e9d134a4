//! The end-to-end robust-safety pipeline for one source part and one
//! target context.
//!
//! Run 1 links the context with the compiled part. Its data-flow trace is
//! back-translated into a source context (plus a replaying program part),
//! which is compiled and run again. The recomposition of the compiled part
//! with the compiled source context is monitored against both base runs,
//! and finally the source context is linked with the original part.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::backtranslation::backtranslate;
use crate::compiler::compile;
use crate::memory::CompId;
use crate::program::{link, restrict};
use crate::relations::{trace_mismatch, Renaming};
use crate::source::{self, SourceProgram};
use crate::target::{self, MachProgram, Machine};
use crate::traces::{remove_df, Event};
use crate::Outcome;

use super::checks::{compare_runs, replay, replay_fuel, Verdict, COMPILED_FUEL_FACTOR};
use super::recomp::{run_monitor, MonitorOptions};

#[derive(Clone, Debug, Serialize)]
pub struct Stage {
    pub name: &'static str,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PipelineReport {
    pub stages: Vec<Stage>,
    pub events: usize,
    pub df_events: usize,
    pub shared: usize,
    pub borders_monitored: usize,
    /// The first run stopped for lack of fuel; later comparisons use prefixes.
    pub truncated: bool,
    /// Renaming relating each pair of traces, keyed `"a->b"`, composed from
    /// the renamings of every trace relative to t1.
    pub renamings: BTreeMap<String, String>,
    #[serde(skip)]
    pub traces: BTreeMap<&'static str, Vec<Event>>,
}

impl PipelineReport {
    pub fn ok(&self) -> bool {
        self.stages.iter().all(|s| !s.verdict.is_fail())
    }

    pub fn first_failure(&self) -> Option<&Stage> {
        self.stages.iter().find(|s| s.verdict.is_fail())
    }

    fn push(&mut self, name: &'static str, verdict: Verdict) -> bool {
        let ok = !verdict.is_fail();
        self.stages.push(Stage { name, verdict });
        ok
    }
}

/// Renaming from run 1 to the recomposed run: context blocks gain one.
pub fn ren_run1(context: &BTreeSet<CompId>) -> Renaming {
    Renaming::PerComp {
        shifts: context.iter().map(|c| (*c, 1)).collect(),
        default: 0,
    }
}

/// Renaming from run 2 to the recomposed run: part blocks lose one.
pub fn ren_run2(part: &BTreeSet<CompId>) -> Renaming {
    Renaming::PerComp {
        shifts: part.iter().map(|c| (*c, -1)).collect(),
        default: 0,
    }
}

fn verdict_of(r: Result<bool, String>) -> Verdict {
    match r {
        Ok(_) => Verdict::Pass,
        Err(m) => Verdict::Fail(m),
    }
}

pub fn rsp_pipeline(ps: &SourceProgram, ct: &MachProgram, fuel: u64) -> PipelineReport {
    let mut rep = PipelineReport::default();
    let part = ps.comp_ids();
    let context = ct.comp_ids();

    let wf: Vec<String> = source::well_formed_part(ps, false)
        .into_iter()
        .chain(target::well_formed_part(ct, false))
        .collect();
    if !rep.push(
        "well-formed",
        if wf.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail(wf.join("; "))
        },
    ) {
        return rep;
    }

    // Run 1.
    let cps = compile(ps);
    let p1 = match link(ct, &cps) {
        Ok(p) => p,
        Err(e) => {
            rep.push("link", Verdict::Fail(e.to_string()));
            return rep;
        }
    };
    let (df1, o1) = Machine::new(&p1).run(fuel);
    let t1 = remove_df(&df1);
    rep.truncated = o1 == Outcome::OutOfFuel;
    rep.df_events = df1.len();
    rep.events = t1.len();
    rep.shared = crate::traces::shared_blocks(&t1).len();

    // Back-translation and its source run.
    let bt = match backtranslate(&df1, &p1) {
        Ok(bt) => bt,
        Err(e) => {
            rep.push("back-translation", Verdict::Fail(e.to_string()));
            return rep;
        }
    };
    let wf = source::well_formed(&bt.program);
    if !wf.is_empty() {
        rep.push("back-translation", Verdict::Fail(wf.join("; ")));
        return rep;
    }
    let t_backtr = match replay(&bt, &p1, &df1, replay_fuel(df1.len())) {
        Err(e) => {
            rep.push(
                "back-translation",
                Verdict::Fail(format!("mimicking violated {e}")),
            );
            return rep;
        }
        Ok(r) if r.boundaries != df1.len() + 1 => {
            rep.push(
                "back-translation",
                Verdict::Fail(format!(
                    "{} boundaries for {} events",
                    r.boundaries,
                    df1.len()
                )),
            );
            return rep;
        }
        Ok(r) => (r.trace, r.outcome),
    };
    let (t_backtr, o_backtr) = t_backtr;
    let v = match trace_mismatch(&Renaming::Shift(1), &t1, &t_backtr) {
        Some(m) => Verdict::Fail(m),
        None => Verdict::Pass,
    };
    if !rep.push("back-translation", v) {
        return rep;
    }

    // Run 2: the compiled back-translation.
    let p2 = compile(&bt.program);
    let src_fuel = replay_fuel(df1.len());
    let (t2, o2) = Machine::new(&p2).run_interaction(src_fuel * COMPILED_FUEL_FACTOR);
    let v = verdict_of(compare_runs(
        &Renaming::Identity,
        &t_backtr,
        &o_backtr,
        &t2,
        &o2,
    ));
    if !rep.push("compiled back-translation", v) {
        return rep;
    }

    // Recomposition.
    let cs = restrict(&bt.program, &context);
    let p12 = match link(&cps, &compile(&cs)) {
        Ok(p) => p,
        Err(e) => {
            rep.push("recomposition", Verdict::Fail(e.to_string()));
            return rep;
        }
    };
    let (ren1, ren2) = (ren_run1(&context), ren_run2(&part));
    let opts = MonitorOptions {
        max_ticks: (fuel + src_fuel) * COMPILED_FUEL_FACTOR,
        check_naive: false,
    };
    let mon = match run_monitor(&p1, &p2, &p12, &part, ren1.clone(), ren2.clone(), &opts) {
        Ok(m) => m,
        Err(e) => {
            rep.push("recomposition", Verdict::Fail(e));
            return rep;
        }
    };
    rep.borders_monitored = mon.borders;
    let v = match mon.violations.first() {
        Some(v) => Verdict::Fail(format!("tick {}: {}", v.tick, v.what)),
        None => Verdict::Pass,
    };
    if !rep.push("recomposition", v) {
        return rep;
    }
    let (t12, o12) = Machine::new(&p12).run_interaction((fuel + src_fuel) * COMPILED_FUEL_FACTOR);
    let o1_for_cmp = if rep.truncated {
        Outcome::OutOfFuel
    } else {
        o1.clone()
    };
    let v = verdict_of(compare_runs(&ren1, &t1, &o1_for_cmp, &t12, &o12));
    if !rep.push("recomposed trace", v) {
        return rep;
    }
    let v = verdict_of(compare_runs(&ren2, &t2, &o2, &t12, &o12));
    if !rep.push("recomposed trace against run 2", v) {
        return rep;
    }

    // Back in the source.
    let whole = match link(&cs, ps) {
        Ok(p) => p,
        Err(e) => {
            rep.push("source run", Verdict::Fail(e.to_string()));
            return rep;
        }
    };
    if compile(&whole) != p12 {
        rep.push(
            "separate compilation",
            Verdict::Fail("compiling the linked source differs from linking".into()),
        );
        return rep;
    }
    let (t_qed, o_qed) = source::run(&whole, fuel + src_fuel);
    let v = verdict_of(compare_runs(
        &Renaming::Identity,
        &t12,
        &o12,
        &t_qed,
        &o_qed,
    ));
    if !rep.push("source run", v) {
        return rep;
    }
    let v = verdict_of(compare_runs(&ren1, &t1, &o1_for_cmp, &t_qed, &o_qed));
    if !rep.push("end to end", v) {
        return rep;
    }

    let runs = [
        ("t1", t1, o1_for_cmp, Renaming::Identity),
        ("t_backtr", t_backtr, o_backtr, Renaming::Shift(1)),
        ("t2", t2, o2, Renaming::Shift(1)),
        ("t12", t12, o12, ren1.clone()),
        ("t_qed", t_qed, o_qed, ren1),
    ];
    let mut failures = Vec::new();
    for (i, (na, ta, oa, ra)) in runs.iter().enumerate() {
        for (nb, tb, ob, rb) in &runs[i + 1..] {
            let ren = ra.inverse().then(rb);
            if let Err(m) = compare_runs(&ren, ta, oa, tb, ob) {
                failures.push(format!("{na} vs {nb} under {ren}: {m}"));
            }
            rep.renamings.insert(format!("{na}->{nb}"), ren.to_string());
        }
    }
    rep.push(
        "pairwise",
        if failures.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail(failures.join("; "))
        },
    );
    for (name, t, _, _) in runs {
        rep.traces.insert(name, t);
    }
    rep
}
