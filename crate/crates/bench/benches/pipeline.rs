use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use seclab::backtranslation::backtranslate;
use seclab::compiler::compile;
use seclab::harness::examples::{
    check_naive_relation_fails, net_benign, net_main, temp_write_example,
};
use seclab::harness::{check_backtranslation, check_compiler, rsp_pipeline};
use seclab::source;
use seclab::target::Machine;
use seclab_bench::*;

fn machine(c: &mut Criterion) {
    let progs = mach_programs(20);
    let mut g = c.benchmark_group("machine");
    g.bench_function("interaction", |b| {
        b.iter(|| {
            progs
                .iter()
                .map(|p| Machine::new(p).run_interaction(FUEL).0.len())
                .sum::<usize>()
        })
    });
    g.bench_function("data-flow", |b| {
        b.iter(|| {
            progs
                .iter()
                .map(|p| Machine::new(p).run(FUEL).0.len())
                .sum::<usize>()
        })
    });
    g.finish();
}

fn source_and_compiler(c: &mut Criterion) {
    let progs = source_programs(20);
    let mut g = c.benchmark_group("source");
    g.bench_function("run", |b| {
        b.iter(|| {
            progs
                .iter()
                .map(|p| source::run(p, FUEL).0.len())
                .sum::<usize>()
        })
    });
    g.bench_function("compile", |b| {
        b.iter(|| progs.iter().map(|p| compile(p).procs.len()).sum::<usize>())
    });
    g.bench_function("differential", |b| {
        b.iter(|| {
            progs
                .iter()
                .filter(|p| check_compiler(p, FUEL).0.is_pass())
                .count()
        })
    });
    g.finish();
}

fn backtranslation(c: &mut Criterion) {
    let progs = linked(10);
    let runs: Vec<_> = progs.iter().map(|p| Machine::new(p).run(FUEL).0).collect();
    let mut g = c.benchmark_group("back-translation");
    g.bench_function("construct", |b| {
        b.iter(|| {
            progs
                .iter()
                .zip(&runs)
                .map(|(p, df)| backtranslate(df, p).unwrap().program.procs.len())
                .sum::<usize>()
        })
    });
    g.bench_function("check", |b| {
        b.iter(|| {
            progs
                .iter()
                .filter(|p| check_backtranslation(p, FUEL).0.is_pass())
                .count()
        })
    });
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let cases = splits(4);
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("generated", |b| {
        b.iter(|| {
            cases
                .iter()
                .filter(|(ps, ct)| rsp_pipeline(ps, ct, FUEL).ok())
                .count()
        })
    });
    g.bench_function("net", |b| {
        b.iter_batched(
            || (net_main(), net_benign()),
            |(ps, ct)| black_box(rsp_pipeline(&ps, &ct, 100_000)),
            BatchSize::SmallInput,
        )
    });
    g.bench_function("naive witness", |b| {
        let ex = temp_write_example();
        b.iter(|| {
            check_naive_relation_fails(&ex)
                .unwrap()
                .naive_failures
                .len()
        })
    });
    g.finish();
}

criterion_group!(
    benches,
    machine,
    source_and_compiler,
    backtranslation,
    pipeline
);
criterion_main!(benches);
