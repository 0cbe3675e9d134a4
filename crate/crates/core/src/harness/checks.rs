//! Single-program differential checks.

use serde::Serialize;

use crate::backtranslation::{backtranslate, check_mimicking_state, BackTranslation};
use crate::compiler::compile;
use crate::memory::STACK_BLOCK;
use crate::relations::{trace_mismatch, Renaming};
use crate::source::{self, Interp, SourceProgram, Step};
use crate::target::{MachProgram, Machine};
use crate::traces::{df_well_bracketed, remove_df, shared_blocks, DfEvent, Event};
use crate::Outcome;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", content = "detail", rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail(String),
    /// The case cannot exercise the property, e.g. nothing was shared.
    Skip(String),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail(_))
    }
}

/// Summary of one Mach run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunInfo {
    pub df_events: usize,
    pub events: usize,
    pub shared: usize,
    pub done: bool,
}

impl RunInfo {
    pub fn of(df: &[DfEvent], outcome: &Outcome) -> RunInfo {
        let t = remove_df(df);
        RunInfo {
            df_events: df.len(),
            events: t.len(),
            shared: shared_blocks(&t).len(),
            done: outcome.is_done(),
        }
    }
}

/// Stripping the data-flow events of an enriched run gives exactly the
/// interaction run, with the same outcome.
pub fn check_enrichment(p: &MachProgram, fuel: u64) -> (Verdict, RunInfo) {
    let m = Machine::new(p);
    let (df, o1) = m.run(fuel);
    let (t, o2) = m.run_interaction(fuel);
    let info = RunInfo::of(&df, &o1);
    if o1 != o2 {
        return (
            Verdict::Fail(format!("outcomes differ: {o1:?} vs {o2:?}")),
            info,
        );
    }
    let stripped = remove_df(&df);
    if stripped.len() != t.len() {
        return (
            Verdict::Fail(format!(
                "{} border events vs {} interaction events",
                stripped.len(),
                t.len()
            )),
            info,
        );
    }
    if let Some(i) = stripped.iter().zip(&t).position(|(a, b)| a != b) {
        return (Verdict::Fail(format!("event {i} differs")), info);
    }
    if !df_well_bracketed(&df) {
        return (Verdict::Fail("trace is not well bracketed".into()), info);
    }
    (Verdict::Pass, info)
}

/// Result of replaying a data-flow trace in the source.
#[derive(Clone, Debug)]
pub struct Replay {
    pub trace: Vec<Event>,
    pub outcome: Outcome,
    pub boundaries: usize,
}

/// Runs a back-translation, checking the mimicking invariant whenever a
/// dispatch is reached.
pub fn replay(
    bt: &BackTranslation,
    target: &MachProgram,
    df: &[DfEvent],
    fuel: u64,
) -> Result<Replay, String> {
    let interp = Interp::new(&bt.program);
    let mut s = interp.initial_state()?;
    let init = Machine::new(target).initial_memory();
    let main = target.intf.main_comp().ok_or("no main component")?;
    let mut trace = Vec::new();
    let mut boundaries = 0;
    for _ in 0..fuel {
        if bt.at_boundary(&s).is_some() {
            if boundaries > df.len() {
                return Err(format!(
                    "boundary {boundaries} after only {} events",
                    df.len()
                ));
            }
            check_mimicking_state(df, boundaries, &init, &s, main)
                .map_err(|v| format!("after {boundaries} events: {v:?}"))?;
            boundaries += 1;
        }
        match interp.step(&mut s) {
            Step::Silent => {}
            Step::Event(e) => trace.push(e),
            Step::Done(v) => {
                return Ok(Replay {
                    trace,
                    outcome: Outcome::Done(v),
                    boundaries,
                })
            }
            Step::Stuck(e) => {
                return Ok(Replay {
                    trace,
                    outcome: Outcome::Stuck(e),
                    boundaries,
                })
            }
        }
    }
    Ok(Replay {
        trace,
        outcome: Outcome::OutOfFuel,
        boundaries,
    })
}

/// Source steps allowed for replaying `n` data-flow events.
pub fn replay_fuel(n: usize) -> u64 {
    10_000 + 400 * n as u64
}

/// The back-translation of a run is well formed, mimics every event, and
/// produces a trace related to the original under a shift by one.
pub fn check_backtranslation(p: &MachProgram, fuel: u64) -> (Verdict, RunInfo) {
    let (df, o) = Machine::new(p).run(fuel);
    let info = RunInfo::of(&df, &o);
    (backtranslation_verdict(p, &df), info)
}

pub fn backtranslation_verdict(p: &MachProgram, df: &[DfEvent]) -> Verdict {
    let bt = match backtranslate(df, p) {
        Ok(bt) => bt,
        Err(e) => return Verdict::Fail(format!("back-translation failed: {e}")),
    };
    let wf = source::well_formed(&bt.program);
    if !wf.is_empty() {
        return Verdict::Fail(format!("ill-formed back-translation: {}", wf.join("; ")));
    }
    let r = match replay(&bt, p, df, replay_fuel(df.len())) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("mimicking violated {e}")),
    };
    if !r.outcome.is_done() {
        return Verdict::Fail(format!("replay ended with {:?}", r.outcome));
    }
    if r.boundaries != df.len() + 1 {
        return Verdict::Fail(format!(
            "{} boundaries for {} events",
            r.boundaries,
            df.len()
        ));
    }
    match trace_mismatch(&Renaming::Shift(1), &remove_df(df), &r.trace) {
        Some(m) => Verdict::Fail(format!("replayed trace unrelated: {m}")),
        None => Verdict::Pass,
    }
}

/// Outcome of comparing a source run with the run of its compilation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CompileInfo {
    pub source_events: usize,
    pub target_events: usize,
    pub source_done: bool,
    pub truncated: bool,
}

/// Target fuel per source step allowed to compiled code.
pub const COMPILED_FUEL_FACTOR: u64 = 50;

/// Compares two traces both ways under `ren`; when either run was cut short
/// only the common prefix counts.
pub fn compare_runs(
    ren: &Renaming,
    t1: &[Event],
    o1: &Outcome,
    t2: &[Event],
    o2: &Outcome,
) -> Result<bool, String> {
    let truncated = *o1 == Outcome::OutOfFuel || *o2 == Outcome::OutOfFuel;
    let n = if truncated {
        t1.len().min(t2.len())
    } else {
        t1.len().max(t2.len())
    };
    if !truncated && t1.len() != t2.len() {
        return Err(format!(
            "trace lengths differ: {} vs {}",
            t1.len(),
            t2.len()
        ));
    }
    let (a, b) = (&t1[..n.min(t1.len())], &t2[..n.min(t2.len())]);
    if let Some(m) = trace_mismatch(ren, a, b) {
        return Err(m);
    }
    if let Some(m) = trace_mismatch(&ren.inverse(), b, a) {
        return Err(format!("converse: {m}"));
    }
    Ok(truncated)
}

/// The compiled program's interaction trace is related to the source trace
/// under the identity renaming, in both directions, and the runtime block
/// never becomes shared.
pub fn check_compiler(p: &SourceProgram, fuel: u64) -> (Verdict, CompileInfo) {
    let (ts, os) = source::run(p, fuel);
    let compiled = compile(p);
    let (tc, oc) = Machine::new(&compiled).run_interaction(fuel * COMPILED_FUEL_FACTOR);
    let mut info = CompileInfo {
        source_events: ts.len(),
        target_events: tc.len(),
        source_done: os.is_done(),
        truncated: false,
    };
    if let Some(loc) = shared_blocks(&tc)
        .into_iter()
        .find(|(_, b)| *b == STACK_BLOCK)
    {
        return (
            Verdict::Fail(format!(
                "runtime block of component {} became shared",
                loc.0
            )),
            info,
        );
    }
    match compare_runs(&Renaming::Identity, &ts, &os, &tc, &oc) {
        Err(m) => return (Verdict::Fail(m), info),
        Ok(t) => info.truncated = t,
    }
    let verdict = match (&os, &oc) {
        (Outcome::Done(a), Outcome::Done(b)) if a != b => {
            Verdict::Fail(format!("results differ: {a} vs {b}"))
        }
        (Outcome::Done(_), Outcome::Done(_))
        | (_, Outcome::OutOfFuel)
        | (Outcome::OutOfFuel, _) => Verdict::Pass,
        (Outcome::Stuck(_), Outcome::Stuck(_)) => Verdict::Pass,
        (a, b) => Verdict::Fail(format!("outcomes differ: {a:?} vs {b:?}")),
    };
    (verdict, info)
}
