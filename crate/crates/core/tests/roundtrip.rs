use std::collections::BTreeMap;

use proptest::prelude::*;

use seclab::harness::{gen_mach_program, gen_source_program, GenConfig};
use seclab::relations::Renaming;
use seclab::target::Machine;
use seclab::traces::{parse_trace, remove_df, trace_to_json, AnyTrace};
use seclab::{asm, source, MachProgram, SourceProgram};

fn cfg(seed: u64) -> GenConfig {
    GenConfig::default().with_seed(seed)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn asm_round_trips(seed in any::<u64>()) {
        let p = gen_mach_program(&cfg(seed));
        let text = asm::print(&p);
        prop_assert_eq!(asm::parse(&text).unwrap(), p);
    }

    #[test]
    fn mach_json_round_trips(seed in any::<u64>()) {
        let p = gen_mach_program(&cfg(seed));
        prop_assert_eq!(MachProgram::from_json_str(&p.to_json_string()).unwrap(), p);
    }

    #[test]
    fn source_json_round_trips(seed in any::<u64>()) {
        let p = gen_source_program(&cfg(seed));
        prop_assert_eq!(SourceProgram::from_json_str(&p.to_json_string()).unwrap(), p);
    }

    #[test]
    fn traces_round_trip(seed in any::<u64>()) {
        let p = gen_mach_program(&cfg(seed));
        let (df, _) = Machine::new(&p).run(10_000);
        let names: BTreeMap<_, _> = p.intf.comps.iter().map(|(c, i)| (*c, i.name.clone())).collect();
        let (n, back) = parse_trace(&trace_to_json(&names, &df, true)).unwrap();
        prop_assert_eq!(&n, &names);
        match back {
            AnyTrace::DataFlow(t) if !df.is_empty() => prop_assert_eq!(t, df.clone()),
            AnyTrace::Interaction(t) if df.is_empty() => prop_assert!(t.is_empty()),
            _ => prop_assert!(false, "wrong alphabet"),
        }
        let t = remove_df(&df);
        let (_, back) = parse_trace(&trace_to_json(&names, &t, true)).unwrap();
        prop_assert_eq!(back.interaction(), t);
    }

    #[test]
    fn source_runs_are_deterministic(seed in any::<u64>()) {
        let p = gen_source_program(&cfg(seed));
        prop_assert_eq!(source::run(&p, 5_000), source::run(&p, 5_000));
    }
}

fn renaming() -> impl Strategy<Value = Renaming> {
    prop_oneof![
        Just(Renaming::Identity),
        (-3..4i64).prop_map(Renaming::Shift),
        (
            prop::collection::btree_map(0..4usize, -3..4i64, 0..3),
            -3..4i64
        )
            .prop_map(|(shifts, default)| Renaming::PerComp { shifts, default }),
        prop::collection::btree_map((0..4usize, 0..6i64), 0..6i64, 0..6).prop_map(Renaming::Table),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn inverse_undoes(r in renaming(), c in 0..4usize, b in 0..6i64) {
        if let Some(b2) = r.apply(c, b) {
            // Tables need not be injective, so only check shift-like renamings exactly.
            if !matches!(r, Renaming::Table(_)) {
                prop_assert_eq!(r.inverse().apply(c, b2), Some(b));
            }
        }
    }

    #[test]
    fn then_composes(r in renaming(), s in renaming(), c in 0..4usize, b in 0..6i64) {
        let direct = r.apply(c, b).and_then(|b1| s.apply(c, b1));
        let composed = r.then(&s).apply(c, b);
        if direct.is_some() || matches!(r, Renaming::Table(_)) || matches!(s, Renaming::Table(_)) {
            prop_assert_eq!(composed, direct);
        }
    }

    #[test]
    fn display_parses_back(r in renaming()) {
        if !matches!(r, Renaming::Table(_)) {
            let back = Renaming::parse(&r.to_string()).unwrap();
            for c in 0..4 {
                for b in 0..6 {
                    prop_assert_eq!(back.apply(c, b), r.apply(c, b));
                }
            }
        }
    }

    #[test]
    fn runtime_block_never_renamed(r in renaming(), c in 0..4usize) {
        prop_assert_eq!(r.apply(c, -1), None);
    }
}
