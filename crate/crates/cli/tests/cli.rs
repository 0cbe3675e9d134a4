use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const PROGRAMS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/programs");

fn program(name: &str) -> PathBuf {
    Path::new(PROGRAMS).join(name)
}

struct Dir(PathBuf);

impl Dir {
    fn new(name: &str) -> Dir {
        let d = std::env::temp_dir().join(format!("seclab-cli-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        Dir(d)
    }

    fn path(&self, f: &str) -> PathBuf {
        self.0.join(f)
    }
}

impl Drop for Dir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn seclab(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seclab"));
    c.env_remove("LAB_FUEL");
    for a in args {
        c.arg(a);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn events_in(path: &Path) -> usize {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["events"].as_array().unwrap().len()
}

#[test]
fn run_source_net() {
    let d = Dir::new("run-source");
    let t = d.path("t.json");
    let o = seclab(&[
        &"run-source",
        &program("net.src.json"),
        &"--fuel",
        &"100000",
        &"--trace",
        &t,
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(events_in(&t), 4);
    assert_eq!(stdout_json(&o)["outcome"], "done");
}

/// Compiles the network part and links it with a shipped context.
fn whole(d: &Dir, ctx: &str) -> PathBuf {
    let main = d.path("main.asm");
    assert_eq!(
        code(&seclab(&[
            &"compile",
            &program("net_main.src.json"),
            &"--emit",
            &"asm",
            &"-o",
            &main
        ])),
        0
    );
    let out = d.path(&format!("whole-{ctx}"));
    assert_eq!(
        code(&seclab(&[
            &"link",
            &program(ctx),
            &main,
            &"--emit",
            &"asm",
            &"-o",
            &out,
            &"--format",
            &"asm"
        ])),
        0
    );
    out
}

#[test]
fn backtranslation_pair_is_related_by_shift() {
    let d = Dir::new("bt");
    let w = whole(&d, "net_stashing.asm");
    let (t1, tbt, bt) = (d.path("t1.json"), d.path("tbt.json"), d.path("bt.src.json"));
    assert_eq!(
        code(&seclab(&[
            &"run-mach",
            &w,
            &"--format",
            &"asm",
            &"--trace",
            &t1
        ])),
        0
    );
    assert_eq!(
        code(&seclab(&[
            &"backtranslate",
            &w,
            &"--format",
            &"asm",
            &"-o",
            &bt
        ])),
        0
    );
    assert_eq!(code(&seclab(&[&"run-source", &bt, &"--trace", &tbt])), 0);
    let o = seclab(&[&"check-trace-rel", &"--ren", &"shift:1", &t1, &tbt]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["related"], true);
    let o = seclab(&[&"check-trace-rel", &"--ren", &"identity", &t1, &tbt]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout_json(&o)["related"], false);
}

#[test]
fn renaming_tables_from_files() {
    let d = Dir::new("table");
    let w = whole(&d, "net_benign.asm");
    let t = d.path("t.json");
    assert_eq!(
        code(&seclab(&[
            &"run-mach",
            &w,
            &"--format",
            &"asm",
            &"--trace",
            &t
        ])),
        0
    );
    let table = d.path("ren.json");
    fs::write(&table, "[[0,0,0],[1,0,0]]").unwrap();
    let ren = format!("table:{}", table.display());
    assert_eq!(
        code(&seclab(&[&"check-trace-rel", &"--ren", &ren, &t, &t])),
        0
    );
}

#[test]
fn nowrite_on_net_contexts() {
    let d = Dir::new("nowrite");
    for (ctx, expect) in [("net_benign.asm", 0), ("net_stashing.asm", 1)] {
        let w = whole(&d, ctx);
        let t = d.path("t.json");
        assert_eq!(code(&seclab(&[&"run-mach", &w, &"--trace", &t])), 0);
        let o = seclab(&[
            &"check-safety",
            &"nowrite",
            &"--loc",
            &"Main:0:7",
            &"--callee",
            &"Net",
            &t,
        ]);
        assert_eq!(code(&o), expect, "{ctx}");
        assert_eq!(stdout_json(&o)["safe"], expect == 0);
    }
}

#[test]
fn nowrite_on_empty_trace() {
    let d = Dir::new("empty");
    let t = d.path("t.json");
    fs::write(&t, r#"{"events":[]}"#).unwrap();
    assert_eq!(
        code(&seclab(&[
            &"check-safety",
            &"nowrite",
            &"--loc",
            &"Main:0:7",
            &t
        ])),
        0
    );
}

#[test]
fn strip_df_matches_interaction_run() {
    let d = Dir::new("strip");
    let w = whole(&d, "net_benign.asm");
    let (df, t) = (d.path("df.json"), d.path("t.json"));
    let o = seclab(&[&"run-mach", &w, &"--df", &"--trace", &df]);
    assert_eq!(code(&o), 0);
    assert!(stdout_json(&o)["events"].as_u64().unwrap() > 4);
    assert_eq!(code(&seclab(&[&"run-mach", &w, &"--trace", &t])), 0);
    let o = seclab(&[&"strip-df", &df]);
    assert_eq!(code(&o), 0);
    let stripped = d.path("s.json");
    fs::write(&stripped, &o.stdout).unwrap();
    assert_eq!(code(&seclab(&[&"check-trace-rel", &stripped, &t])), 0);
    assert_eq!(events_in(&stripped), 4);
}

#[test]
fn no_mem_drops_snapshots() {
    let d = Dir::new("nomem");
    let t = d.path("t.json");
    assert_eq!(
        code(&seclab(&[
            &"run-source",
            &program("net.src.json"),
            &"--trace",
            &t,
            &"--no-mem"
        ])),
        0
    );
    assert!(!fs::read_to_string(&t).unwrap().contains("\"mem\""));
}

#[test]
fn split_and_relink_round_trip() {
    let d = Dir::new("split");
    let (a, b, back) = (d.path("a.json"), d.path("b.json"), d.path("back.json"));
    let o = seclab(&[
        &"split",
        &program("net.src.json"),
        &"--comps",
        &"Net",
        &"--out-part",
        &a,
        &"--out-rest",
        &b,
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&seclab(&[&"link", &b, &a, &"-o", &back])), 0);
    let t = d.path("t.json");
    assert_eq!(code(&seclab(&[&"run-source", &back, &"--trace", &t])), 0);
    assert_eq!(events_in(&t), 4);
}

#[test]
fn recomposition_with_compiled_backtranslation() {
    let d = Dir::new("recomp");
    let w = whole(&d, "net_benign.asm");
    let bt = d.path("bt.src.json");
    assert_eq!(code(&seclab(&[&"backtranslate", &w, &"-o", &bt])), 0);
    let cbt = d.path("cbt.asm");
    assert_eq!(
        code(&seclab(&[&"compile", &bt, &"--emit", &"asm", &"-o", &cbt])),
        0
    );
    let (p1, c1) = (d.path("p1.asm"), d.path("c1.asm"));
    let (p2, c2) = (d.path("p2.asm"), d.path("c2.asm"));
    for (src, part, rest) in [(&w, &p1, &c1), (&cbt, &p2, &c2)] {
        let o = seclab(&[
            &"split",
            src,
            &"--comps",
            &"Main",
            &"--emit",
            &"asm",
            &"--out-part",
            part,
            &"--out-rest",
            rest,
        ]);
        assert_eq!(code(&o), 0);
    }
    let o = seclab(&[&"check-recomposition", &p1, &c1, &p2, &c2]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["verdict"]["verdict"], "pass");
}

#[test]
fn rsp_test_reports() {
    let d = Dir::new("rsp");
    let (json, xml) = (d.path("out.json"), d.path("out.xml"));
    let o = seclab(&[
        &"rsp-test",
        &"--seed",
        &"7",
        &"--cases",
        &"4",
        &"--report",
        &json,
        &"--junit",
        &xml,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["passed"], 4);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rep["results"].as_array().unwrap().len(), 4);
    assert!(fs::read_to_string(&xml)
        .unwrap()
        .contains("<testsuite name=\"rsp\" tests=\"4\" failures=\"0\""));

    // Same seed, same report.
    let again = d.path("again.json");
    assert_eq!(
        code(&seclab(&[
            &"rsp-test",
            &"--seed",
            &"7",
            &"--cases",
            &"4",
            &"--report",
            &again
        ])),
        0
    );
    assert_eq!(fs::read(&json).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn rsp_replay_of_a_bundle() {
    let d = Dir::new("replay");
    let bundle = serde_json::json!({
        "source_part": serde_json::from_str::<serde_json::Value>(&fs::read_to_string(program("net_main.src.json")).unwrap()).unwrap(),
        "target_context": fs::read_to_string(program("net_stashing.asm")).unwrap(),
    });
    let f = d.path("bundle.json");
    fs::write(&f, bundle.to_string()).unwrap();
    let o = seclab(&[&"rsp-test", &"--replay", &f]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_and_input_errors_exit_2() {
    assert_eq!(code(&seclab(&[&"no-such-command"])), 2);
    assert_eq!(code(&seclab(&[&"run-source", &"/nonexistent.json"])), 2);
    assert_eq!(
        code(&seclab(&[
            &"check-trace-rel",
            &"--ren",
            &"sideways",
            &"a",
            &"b"
        ])),
        2
    );
    let d = Dir::new("bad");
    let f = d.path("bad.asm");
    fs::write(&f, "component Main zero\n").unwrap();
    assert_eq!(code(&seclab(&[&"run-mach", &f])), 2);
}

#[test]
fn fuel_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_seclab"))
        .env("LAB_FUEL", "3")
        .args(["run-source".as_ref(), program("net.src.json").as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["outcome"], "outoffuel");
}
