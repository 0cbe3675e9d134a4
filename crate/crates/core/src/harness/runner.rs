//! Running many generated cases in parallel, and the reports they produce.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::asm;
use crate::SourceProgram;

use super::checks::Verdict;
use super::gen::{gen_split, GenConfig};
use super::pipeline::{rsp_pipeline, PipelineReport};

/// Stack for worker threads; deep expression trees recurse in the
/// interpreter's drop glue and in serialization.
pub const WORKER_STACK: usize = 256 << 20;

pub fn with_big_stack<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    std::thread::scope(|s| {
        std::thread::Builder::new()
            .stack_size(WORKER_STACK)
            .spawn_scoped(s, f)
            .expect("spawn worker")
            .join()
            .unwrap()
    })
}

pub fn worker_count() -> usize {
    std::thread::available_parallelism()
        .map(NonZeroUsize::get)
        .unwrap_or(1)
        .min(16)
}

/// Applies `f` to every item on a pool of worker threads, keeping order.
pub fn par_map<I: Sync, T: Send>(items: &[I], f: impl Fn(&I) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<T>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..worker_count().min(items.len().max(1)) {
            std::thread::Builder::new()
                .stack_size(WORKER_STACK)
                .spawn_scoped(s, || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(item) = items.get(i) else { break };
                    let r = f(item);
                    out.lock().unwrap()[i] = Some(r);
                })
                .expect("spawn worker");
        }
    });
    out.into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every case ran"))
        .collect()
}

/// Seeds of `n` cases starting from `base`.
pub fn case_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub seed: u64,
    pub stage: Option<&'static str>,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub events: usize,
    pub df_events: usize,
    pub shared: usize,
    pub truncated: bool,
    /// Inputs needed to replay a failing case.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Counterexample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Counterexample {
    pub source_part: serde_json::Value,
    pub target_context: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RspTestReport {
    pub seed: u64,
    pub config: GenConfig,
    pub cases: usize,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub results: Vec<CaseReport>,
}

impl Counterexample {
    /// Reruns the pipeline on the recorded inputs.
    pub fn replay(&self, fuel: u64) -> Result<PipelineReport, String> {
        let ps =
            SourceProgram::from_json_value(self.source_part.clone()).map_err(|e| e.to_string())?;
        let ct = asm::parse(&self.target_context).map_err(|e| e.to_string())?;
        Ok(rsp_pipeline(&ps, &ct, fuel))
    }
}

pub fn rsp_case(cfg: &GenConfig) -> CaseReport {
    let (_, ps, ct) = gen_split(cfg);
    let rep = rsp_pipeline(&ps, &ct, cfg.fuel);
    let failure = rep.first_failure();
    let verdict = failure.map(|s| s.verdict.clone()).unwrap_or(Verdict::Pass);
    CaseReport {
        seed: cfg.seed,
        stage: failure.map(|s| s.name),
        counterexample: verdict.is_fail().then(|| Counterexample {
            source_part: ps.to_json(),
            target_context: asm::print(&ct),
        }),
        verdict,
        events: rep.events,
        df_events: rep.df_events,
        shared: rep.shared,
        truncated: rep.truncated,
    }
}

/// Runs the pipeline on `cases` generated pairs.
pub fn rsp_test(cfg: &GenConfig, cases: usize) -> RspTestReport {
    let results = par_map(&case_seeds(cfg.seed, cases), |s| {
        rsp_case(&cfg.with_seed(*s))
    });
    let count = |p: fn(&Verdict) -> bool| results.iter().filter(|r| p(&r.verdict)).count();
    RspTestReport {
        seed: cfg.seed,
        config: cfg.clone(),
        cases,
        passed: count(Verdict::is_pass),
        failed: count(Verdict::is_fail),
        skipped: count(|v| matches!(v, Verdict::Skip(_))),
        results,
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl RspTestReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }

    pub fn to_junit(&self) -> String {
        let mut out = format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<testsuite name=\"rsp\" tests=\"{}\" failures=\"{}\" skipped=\"{}\">\n",
            self.cases, self.failed, self.skipped
        );
        for r in &self.results {
            out += &format!("  <testcase name=\"seed-{}\"", r.seed);
            match &r.verdict {
                Verdict::Pass => out += "/>\n",
                Verdict::Skip(m) => {
                    out += &format!("><skipped message=\"{}\"/></testcase>\n", xml_escape(m))
                }
                Verdict::Fail(m) => {
                    let stage = r.stage.unwrap_or("?");
                    out += &format!(
                        "><failure message=\"{}: {}\"/></testcase>\n",
                        stage,
                        xml_escape(m)
                    );
                }
            }
        }
        out + "</testsuite>\n"
    }
}
