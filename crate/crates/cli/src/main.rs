//! `seclab`: run, compile, link and split programs, inspect traces, and drive
//! the property-testing harness.
//!
//! Exit codes: 0 success, 1 property violated, 2 usage or input error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use seclab::backtranslation::backtranslate;
use seclab::compiler::compile;
use seclab::harness::runner::Counterexample;
use seclab::harness::{check_recomposition, rsp_test, with_big_stack, GenConfig, Verdict};
use seclab::memory::CompId;
use seclab::relations::{trace_mismatch, Renaming};
use seclab::target::Machine;
use seclab::traces::{nowrite_violations, parse_trace, trace_to_json, AnyTrace, CallFilter};
use seclab::{
    asm, link, source, split, DfEvent, Event, Interface, MachProgram, Outcome, Pointer,
    SourceProgram,
};

#[derive(Parser)]
#[command(name = "seclab", version, about = "Secure-compilation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Asm,
}

#[derive(Args)]
struct FuelArg {
    /// Step budget.
    #[arg(long, env = "LAB_FUEL", default_value_t = 100_000)]
    fuel: u64,
}

#[derive(Args)]
struct TraceOut {
    /// Write the trace to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Leave memory snapshots out of the written trace.
    #[arg(long)]
    no_mem: bool,
}

#[derive(Args)]
struct MachIn {
    /// Input format of Mach programs; `.asm` files default to asm.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a whole source program.
    RunSource {
        program: PathBuf,
        #[command(flatten)]
        fuel: FuelArg,
        #[command(flatten)]
        out: TraceOut,
    },
    /// Run a whole Mach program.
    RunMach {
        program: PathBuf,
        #[command(flatten)]
        input: MachIn,
        #[command(flatten)]
        fuel: FuelArg,
        #[command(flatten)]
        out: TraceOut,
        /// Record the data-flow trace instead of the interaction trace.
        #[arg(long)]
        df: bool,
    },
    /// Compile a source program or part to Mach.
    Compile {
        program: PathBuf,
        /// Output format.
        #[arg(long, value_enum, default_value = "json")]
        emit: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Link two parts written in the same language.
    Link {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        input: MachIn,
        #[arg(long, value_enum, default_value = "json")]
        emit: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Split a program into the given components and the rest.
    Split {
        program: PathBuf,
        /// Comma-separated component names or ids.
        #[arg(long, value_delimiter = ',', required = true)]
        comps: Vec<String>,
        #[command(flatten)]
        input: MachIn,
        #[arg(long, value_enum, default_value = "json")]
        emit: Format,
        #[arg(long)]
        out_part: PathBuf,
        #[arg(long)]
        out_rest: PathBuf,
    },
    /// Drop the data-flow events of a trace.
    StripDf {
        trace: PathBuf,
        #[arg(long)]
        no_mem: bool,
    },
    /// Back-translate the data-flow trace of a Mach program's run into a
    /// whole source program.
    Backtranslate {
        program: PathBuf,
        /// Data-flow trace to use; the program is run when omitted.
        #[arg(long)]
        df_trace: Option<PathBuf>,
        #[command(flatten)]
        input: MachIn,
        #[command(flatten)]
        fuel: FuelArg,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check that two traces are related under a renaming.
    CheckTraceRel {
        /// `identity`, `shift:K`, `comp:C=K,...,default=K` or `table:FILE`.
        #[arg(long, default_value = "identity")]
        ren: String,
        a: PathBuf,
        b: PathBuf,
    },
    /// Evaluate a safety property on a trace.
    CheckSafety {
        #[command(subcommand)]
        prop: Safety,
    },
    /// Recompose P1 with C2 and monitor the run against P1 ∪ C1 and P2 ∪ C2.
    CheckRecomposition {
        p1: PathBuf,
        c1: PathBuf,
        p2: PathBuf,
        c2: PathBuf,
        #[command(flatten)]
        input: MachIn,
        #[command(flatten)]
        fuel: FuelArg,
    },
    /// Run the robust-safety pipeline on generated or recorded cases.
    RspTest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// JUnit-style XML report.
        #[arg(long)]
        junit: Option<PathBuf>,
        /// Replay counterexamples from a report or a single bundle.
        #[arg(long, conflicts_with_all = ["seed", "cases"])]
        replay: Option<PathBuf>,
        #[arg(long, default_value_t = GenConfig::default().comps)]
        comps: usize,
        #[arg(long, default_value_t = GenConfig::default().procs_per_comp)]
        procs: usize,
        #[command(flatten)]
        fuel: FuelArg,
    },
}

#[derive(Subcommand)]
enum Safety {
    /// No selected call may change the location before it returns.
    Nowrite {
        /// `COMP:BLOCK:OFFSET`, the component by name or id.
        #[arg(long)]
        loc: String,
        /// Only calls made by this component.
        #[arg(long)]
        caller: Option<String>,
        /// Only calls into this component.
        #[arg(long)]
        callee: Option<String>,
        /// Only calls to this procedure.
        #[arg(long)]
        proc: Option<String>,
        trace: PathBuf,
    },
}

enum Failure {
    Violated(String),
    Input(String),
}

type Res = Result<(), Failure>;

fn input<E: std::fmt::Display>(what: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{}: {e}", what.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(input(path))
}

fn write_out(path: Option<&Path>, text: &str) -> Res {
    match path {
        Some(p) => fs::write(p, text).map_err(input(p)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_source(path: &Path) -> Result<SourceProgram, Failure> {
    SourceProgram::from_json_str(&read(path)?).map_err(input(path))
}

fn load_mach(path: &Path, input_fmt: &MachIn) -> Result<MachProgram, Failure> {
    let text = read(path)?;
    let asm_input = input_fmt.format == Some(Format::Asm)
        || (input_fmt.format.is_none() && path.extension().is_some_and(|e| e == "asm"));
    if asm_input {
        asm::parse(&text).map_err(input(path))
    } else {
        MachProgram::from_json_str(&text).map_err(input(path))
    }
}

enum AnyProgram {
    Source(SourceProgram),
    Mach(MachProgram),
}

/// Source programs are JSON; Mach programs are asm or JSON.
fn load_any(path: &Path, fmt: &MachIn) -> Result<AnyProgram, Failure> {
    if fmt.format != Some(Format::Asm) && path.extension().is_none_or(|e| e != "asm") {
        if let Ok(p) = SourceProgram::from_json_str(&read(path)?) {
            return Ok(AnyProgram::Source(p));
        }
    }
    load_mach(path, fmt).map(AnyProgram::Mach)
}

fn emit_mach(p: &MachProgram, fmt: Format) -> String {
    match fmt {
        Format::Asm => asm::print(p),
        Format::Json => p.to_json_string(),
    }
}

fn names(intf: &Interface) -> BTreeMap<CompId, String> {
    intf.comps
        .iter()
        .map(|(c, i)| (*c, i.name.clone()))
        .collect()
}

fn outcome_json(o: &Outcome, events: usize) -> serde_json::Value {
    let mut v = serde_json::to_value(o).expect("outcome serializes");
    v["events"] = json!(events);
    v
}

fn finish_run<E: serde::Serialize>(
    comps: &BTreeMap<CompId, String>,
    t: &[E],
    o: &Outcome,
    out: &TraceOut,
) -> Res {
    if let Some(path) = &out.trace {
        fs::write(path, trace_to_json(comps, t, !out.no_mem)).map_err(input(path))?;
    }
    println!("{}", outcome_json(o, t.len()));
    match o {
        Outcome::Stuck(m) => Err(Failure::Violated(format!("program is stuck: {m}"))),
        Outcome::OutOfFuel => {
            eprintln!("ran out of fuel");
            Ok(())
        }
        Outcome::Done(_) => Ok(()),
    }
}

fn resolve_comp(comps: &BTreeMap<CompId, String>, s: &str) -> Result<CompId, Failure> {
    if let Ok(c) = s.parse() {
        return Ok(c);
    }
    comps
        .iter()
        .find(|(_, n)| *n == s)
        .map(|(c, _)| *c)
        .ok_or_else(|| Failure::Input(format!("unknown component {s}")))
}

fn load_trace(path: &Path) -> Result<(BTreeMap<CompId, String>, AnyTrace), Failure> {
    parse_trace(&read(path)?).map_err(input(path))
}

fn parse_renaming(s: &str) -> Result<Renaming, Failure> {
    if let Some(file) = s.strip_prefix("table:") {
        let path = Path::new(file);
        return Renaming::table_from_json(&read(path)?).map_err(input(path));
    }
    Renaming::parse(s).ok_or_else(|| Failure::Input(format!("bad renaming {s}")))
}

fn verdict_exit(v: &Verdict, report: serde_json::Value) -> Res {
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    match v {
        Verdict::Fail(m) => Err(Failure::Violated(m.clone())),
        Verdict::Skip(m) => {
            eprintln!("skipped: {m}");
            Ok(())
        }
        Verdict::Pass => Ok(()),
    }
}

fn replay(path: &Path, fuel: u64) -> Res {
    let v: serde_json::Value = serde_json::from_str(&read(path)?).map_err(input(path))?;
    let bundles: Vec<serde_json::Value> = match v.get("results") {
        Some(results) => results
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|r| r.get("counterexample").cloned())
            .collect(),
        None => vec![v],
    };
    let mut failed = 0;
    for (i, b) in bundles.iter().enumerate() {
        let cx: Counterexample = serde_json::from_value(b.clone()).map_err(input(path))?;
        let rep = cx
            .replay(fuel)
            .map_err(|e| Failure::Input(format!("bundle {i}: {e}")))?;
        if let Some(s) = rep.first_failure() {
            failed += 1;
            eprintln!("bundle {i}: {} failed: {:?}", s.name, s.verdict);
        }
        println!(
            "{}",
            serde_json::to_string(&rep).expect("report serializes")
        );
    }
    if failed > 0 {
        Err(Failure::Violated(format!(
            "{failed} of {} replayed cases fail",
            bundles.len()
        )))
    } else {
        Ok(())
    }
}

fn run(cmd: Cmd) -> Res {
    match cmd {
        Cmd::RunSource { program, fuel, out } => {
            let p = load_source(&program)?;
            let wf = source::well_formed(&p);
            if !wf.is_empty() {
                return Err(Failure::Input(wf.join("; ")));
            }
            let (t, o) = source::run(&p, fuel.fuel);
            finish_run(&names(&p.intf), &t, &o, &out)
        }
        Cmd::RunMach {
            program,
            input: fmt,
            fuel,
            out,
            df,
        } => {
            let p = load_mach(&program, &fmt)?;
            let wf = seclab::target::well_formed(&p);
            if !wf.is_empty() {
                return Err(Failure::Input(wf.join("; ")));
            }
            let m = Machine::new(&p);
            if df {
                let (t, o) = m.run(fuel.fuel);
                finish_run(&names(&p.intf), &t, &o, &out)
            } else {
                let (t, o) = m.run_interaction(fuel.fuel);
                finish_run(&names(&p.intf), &t, &o, &out)
            }
        }
        Cmd::Compile {
            program,
            emit,
            output,
        } => {
            let p = load_source(&program)?;
            write_out(output.as_deref(), &emit_mach(&compile(&p), emit))
        }
        Cmd::Link {
            a,
            b,
            input: fmt,
            emit,
            output,
        } => {
            let text = match (load_any(&a, &fmt)?, load_any(&b, &fmt)?) {
                (AnyProgram::Source(x), AnyProgram::Source(y)) => link(&x, &y)
                    .map_err(|e| Failure::Input(e.to_string()))?
                    .to_json_string(),
                (AnyProgram::Mach(x), AnyProgram::Mach(y)) => emit_mach(
                    &link(&x, &y).map_err(|e| Failure::Input(e.to_string()))?,
                    emit,
                ),
                _ => {
                    return Err(Failure::Input(
                        "cannot link a source part with a Mach part".into(),
                    ))
                }
            };
            write_out(output.as_deref(), &text)
        }
        Cmd::Split {
            program,
            comps,
            input: fmt,
            emit,
            out_part,
            out_rest,
        } => {
            let (part, rest) = match load_any(&program, &fmt)? {
                AnyProgram::Source(p) => {
                    let ids = comp_set(&names(&p.intf), &comps)?;
                    let (a, b) = split(&p, &ids);
                    (a.to_json_string(), b.to_json_string())
                }
                AnyProgram::Mach(p) => {
                    let ids = comp_set(&names(&p.intf), &comps)?;
                    let (a, b) = split(&p, &ids);
                    (emit_mach(&a, emit), emit_mach(&b, emit))
                }
            };
            write_out(Some(&out_part), &part)?;
            write_out(Some(&out_rest), &rest)
        }
        Cmd::StripDf { trace, no_mem } => {
            let (comps, t) = load_trace(&trace)?;
            println!("{}", trace_to_json(&comps, &t.interaction(), !no_mem));
            Ok(())
        }
        Cmd::Backtranslate {
            program,
            df_trace,
            input: fmt,
            fuel,
            output,
        } => {
            let p = load_mach(&program, &fmt)?;
            let df: Vec<DfEvent> = match df_trace {
                Some(path) => match load_trace(&path)?.1 {
                    AnyTrace::DataFlow(t) => t,
                    AnyTrace::Interaction(t) if t.is_empty() => Vec::new(),
                    AnyTrace::Interaction(_) => {
                        return Err(Failure::Input(format!(
                            "{}: not a data-flow trace",
                            path.display()
                        )))
                    }
                },
                None => Machine::new(&p).run(fuel.fuel).0,
            };
            let bt = backtranslate(&df, &p).map_err(|e| Failure::Input(e.to_string()))?;
            write_out(output.as_deref(), &bt.program.to_json_string())
        }
        Cmd::CheckTraceRel { ren, a, b } => {
            let ren = parse_renaming(&ren)?;
            let ta: Vec<Event> = load_trace(&a)?.1.interaction();
            let tb: Vec<Event> = load_trace(&b)?.1.interaction();
            match trace_mismatch(&ren, &ta, &tb) {
                None => {
                    println!(
                        "{}",
                        json!({ "related": true, "renaming": ren.to_string(), "events": ta.len() })
                    );
                    Ok(())
                }
                Some(m) => {
                    println!(
                        "{}",
                        json!({ "related": false, "renaming": ren.to_string(), "reason": m })
                    );
                    Err(Failure::Violated(m))
                }
            }
        }
        Cmd::CheckSafety {
            prop:
                Safety::Nowrite {
                    loc,
                    caller,
                    callee,
                    proc,
                    trace,
                },
        } => {
            let (comps, t) = load_trace(&trace)?;
            let t = t.interaction();
            let parts: Vec<&str> = loc.split(':').collect();
            let [c, b, o] = parts.as_slice() else {
                return Err(Failure::Input(format!(
                    "bad location {loc}, expected COMP:BLOCK:OFFSET"
                )));
            };
            let bad = |_| Failure::Input(format!("bad location {loc}"));
            // An empty trace names no components, and nothing needs resolving.
            let lookup = |s: &str| match resolve_comp(&comps, s) {
                Err(_) if t.is_empty() => Ok(0),
                r => r,
            };
            let ptr = Pointer::data(lookup(c)?, b.parse().map_err(bad)?, o.parse().map_err(bad)?);
            let opt = |s: Option<String>| s.map(|s| lookup(&s)).transpose();
            let filter = CallFilter {
                main: opt(caller)?,
                lib: opt(callee)?,
                proc,
            };
            let violations = nowrite_violations(&t, ptr, &filter);
            println!(
                "{}",
                json!({ "safe": violations.is_empty(), "violating_calls": violations })
            );
            if violations.is_empty() {
                Ok(())
            } else {
                Err(Failure::Violated(format!(
                    "{} call(s) changed {loc}",
                    violations.len()
                )))
            }
        }
        Cmd::CheckRecomposition {
            p1,
            c1,
            p2,
            c2,
            input: fmt,
            fuel,
        } => {
            let [p1, c1, p2, c2] = [&p1, &c1, &p2, &c2].map(|p| load_mach(p, &fmt));
            let (v, rep) =
                check_recomposition(&p1?, &c1?, &p2?, &c2?, fuel.fuel).map_err(Failure::Input)?;
            verdict_exit(&v, json!({ "verdict": v, "monitor": rep }))
        }
        Cmd::RspTest {
            replay: Some(path),
            fuel,
            ..
        } => replay(&path, fuel.fuel),
        Cmd::RspTest {
            seed,
            cases,
            report,
            junit,
            replay: None,
            comps,
            procs,
            fuel,
        } => {
            let cfg = GenConfig {
                seed,
                comps,
                procs_per_comp: procs,
                fuel: fuel.fuel,
                ..GenConfig::default()
            };
            let rep = rsp_test(&cfg, cases);
            if let Some(path) = &report {
                fs::write(
                    path,
                    serde_json::to_string_pretty(&rep).expect("report serializes"),
                )
                .map_err(input(path))?;
            }
            if let Some(path) = &junit {
                fs::write(path, rep.to_junit()).map_err(input(path))?;
            }
            for r in rep.results.iter().filter(|r| r.verdict.is_fail()) {
                eprintln!(
                    "seed {}: {} failed: {:?}",
                    r.seed,
                    r.stage.unwrap_or("?"),
                    r.verdict
                );
            }
            println!(
                "{}",
                json!({ "seed": seed, "cases": cases, "passed": rep.passed, "failed": rep.failed, "skipped": rep.skipped })
            );
            if rep.ok() {
                Ok(())
            } else {
                Err(Failure::Violated(format!(
                    "{} of {cases} cases failed",
                    rep.failed
                )))
            }
        }
    }
}

fn comp_set(comps: &BTreeMap<CompId, String>, sel: &[String]) -> Result<BTreeSet<CompId>, Failure> {
    sel.iter().map(|s| resolve_comp(comps, s)).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_big_stack(|| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violated(m)) => {
            eprintln!("violation: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
