use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_regprompt");
const MOCK: &str = env!("CARGO_BIN_EXE_regprompt-mock-segmenter");

const SMALL_CONFIG: &str = r#"{
  "phantom": {"dims": [64, 64, 8], "spacing": [2.0, 2.0, 6.0]},
  "registration": {"pyramid_levels": 2, "affine_max_iters": 50, "ffd_max_iters": 30}
}"#;

fn regprompt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One small phantom case shared by the tests; generated once per test binary.
fn case() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
        let cfg = dir.path().join("cfg.json");
        let out = dir.path().join("case");
        let o = regprompt(&[
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "phantom",
            "--out-dir",
            s(&out),
            "--references",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    })
    .path()
}

fn cfg() -> PathBuf {
    case().join("cfg.json")
}

fn lib() -> PathBuf {
    case().join("case/library.json")
}

fn new_image() -> PathBuf {
    case().join("case/new.nii")
}

fn segment(out: &Path, extra: &[&str]) -> Output {
    let (cfg, lib, new) = (cfg(), lib(), new_image());
    let mut args = vec![
        "--config",
        s(&cfg),
        "segment",
        "--new",
        s(&new),
        "--library",
        s(&lib),
        "--out-dir",
        s(out),
    ];
    args.extend_from_slice(extra);
    regprompt(&args)
}

#[test]
fn help_texts_match_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("REGPROMPT_UPDATE_GOLDEN").is_some();
    for sub in [
        "",
        "phantom",
        "preprocess",
        "register",
        "segment",
        "evaluate",
        "protocol-check",
    ] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let o = regprompt(&args);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8(o.stdout).unwrap();
        let name = if sub.is_empty() { "regprompt" } else { sub };
        let path = golden.join(format!("{name}.txt"));
        if update {
            fs::write(&path, &text).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(
            text, want,
            "help for `{name}` drifted; rerun with REGPROMPT_UPDATE_GOLDEN=1"
        );
    }
}

#[test]
fn phantom_segment_evaluate_pipeline() {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("seg");
    let o = segment(&out, &["--strategy", "i-align", "--segmenter", "toy"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["femur", "tibia", "femoral_cartilage", "tibial_cartilage"] {
        assert!(out.join(format!("{name}.nii")).exists(), "{name}");
    }
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["strategy"], "i-align");
    assert_eq!(prov["references"].as_array().unwrap().len(), 3);
    assert!(
        prov["references"][0]["inverse"]["fraction_within_tolerance"]
            .as_f64()
            .unwrap()
            >= 0.99
    );

    let report = work.path().join("report.json");
    let csv = work.path().join("report.csv");
    let gt = case().join("case/gt");
    let o = regprompt(&[
        "evaluate",
        "--pred",
        s(&out),
        "--gt",
        s(&gt),
        "--out",
        s(&report),
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["strategy"], "i-align");
    assert!(r["structures"]["femur"]["dice"].as_f64().unwrap() > 0.8);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let work = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = ["1", "3"]
        .iter()
        .map(|t| {
            let out = work.path().join(format!("t{t}"));
            let (cfg, lib, new) = (cfg(), lib(), new_image());
            let o = regprompt(&[
                "--config",
                s(&cfg),
                "--threads",
                t,
                "segment",
                "--new",
                s(&new),
                "--library",
                s(&lib),
                "--strategy",
                "p-align",
                "--out-dir",
                s(&out),
            ]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            out
        })
        .collect();
    let mut names: Vec<_> = fs::read_dir(&runs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in names {
        assert_eq!(
            fs::read(runs[0].join(&n)).unwrap(),
            fs::read(runs[1].join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let work = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&segment(&work.path().join("o"), &["--strategy", "vote-harder"])),
        2
    );
    assert_eq!(code(&segment(&work.path().join("o"), &["--segmenter", "sam"])), 2);
    assert_eq!(code(&regprompt(&["segment"])), 2);
}

#[test]
fn missing_backend_is_a_backend_error() {
    let work = tempfile::tempdir().unwrap();
    let o = segment(&work.path().join("o"), &["--segmenter", "exec:/definitely/not/here"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn unreadable_input_is_a_data_error() {
    let work = tempfile::tempdir().unwrap();
    let (cfg, lib) = (cfg(), lib());
    let missing = work.path().join("nope.nii");
    let out = work.path().join("o");
    let o = regprompt(&[
        "--config",
        s(&cfg),
        "segment",
        "--new",
        s(&missing),
        "--library",
        s(&lib),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn structure_without_candidates_exits_five() {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("o");
    let o = segment(&out, &["--strategy", "no-reg", "--structures", "femur,spleen"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(out.join("femur.nii").exists());
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["failures"][0]["structure"], "spleen");
}

#[test]
fn zero_mask_backend_completes_with_empty_structures() {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("o");
    let backend = format!("exec:{MOCK} --mode zeros");
    let o = segment(&out, &["--strategy", "no-reg", "--segmenter", &backend]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    for (_, rec) in prov["structures"].as_object().unwrap() {
        assert_eq!(rec["voxels"], 0);
        assert_eq!(rec["votes"], 3);
    }
}

#[test]
fn exec_backend_matches_builtin_toy() {
    let work = tempfile::tempdir().unwrap();
    let a = work.path().join("a");
    let b = work.path().join("b");
    let backend = format!("exec:{MOCK}");
    assert_eq!(code(&segment(&a, &["--strategy", "no-reg"])), 0);
    assert_eq!(
        code(&segment(&b, &["--strategy", "no-reg", "--segmenter", &backend])),
        0
    );
    for name in ["femur", "tibia", "femoral_cartilage", "tibial_cartilage"] {
        let f = format!("{name}.nii");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{name}");
    }
}

#[test]
fn broken_backend_replies_drop_candidates() {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("o");
    let backend = format!("exec:{MOCK} --mode wrong-dims");
    let o = segment(&out, &["--strategy", "no-reg", "--segmenter", &backend]);
    assert_eq!(code(&o), 5);
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    let cands = prov["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 12);
    for c in cands {
        assert_eq!(c["reason"], "backend");
        assert!(c["detail"].as_str().unwrap().contains("expected"), "{c}");
    }
}

#[test]
fn atlas_strategy_needs_no_segmenter() {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("o");
    let o = segment(
        &out,
        &["--strategy", "atlas", "--segmenter", "exec:/definitely/not/here"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("tibia.nii").exists());
}

#[test]
fn protocol_check_against_mock_backends() {
    let ok = regprompt(&["protocol-check", "--segmenter", &format!("exec:{MOCK}")]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 10);
    assert!(text.contains("10/10 fixtures passed"));

    let bad = regprompt(&["protocol-check", "--segmenter", &format!("exec:{MOCK} --mode wrong-id")]);
    assert_eq!(code(&bad), 4);
    let text = String::from_utf8(bad.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("FAIL")).count(), 8);

    let crash = regprompt(&[
        "protocol-check",
        "--timeout",
        "5",
        "--segmenter",
        &format!("exec:{MOCK} --mode crash --after 3"),
    ]);
    assert_eq!(code(&crash), 4);

    assert_eq!(code(&regprompt(&["protocol-check", "--segmenter", "toy"])), 2);
}

#[test]
fn json_logs_are_one_object_per_line() {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("o");
    let (cfg, lib, new) = (cfg(), lib(), new_image());
    let o = regprompt(&[
        "--log",
        "json",
        "--config",
        s(&cfg),
        "segment",
        "--new",
        s(&new),
        "--library",
        s(&lib),
        "--strategy",
        "no-reg",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let err = stderr(&o);
    assert!(err.lines().count() >= 4);
    for line in err.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{line}: {e}"));
        assert!(v["level"].is_string() && v["message"].is_string());
    }
}

#[test]
fn preprocess_and_register_commands() {
    let work = tempfile::tempdir().unwrap();
    let cropped = work.path().join("cropped.nii");
    let new = new_image();
    let o = regprompt(&[
        "preprocess",
        "--input",
        s(&new),
        "--output",
        s(&cropped),
        "--dims",
        "48,48,8",
        "--clip",
        "0,1000",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        code(&regprompt(&[
            "preprocess",
            "--input",
            s(&new),
            "--output",
            s(&cropped),
            "--clip",
            "5,1"
        ])),
        2
    );

    let t = work.path().join("t.json");
    let inv = work.path().join("inv.raw");
    let warped = work.path().join("warped.nii");
    let reference = case().join("case/ref-0.nii");
    let cfg = cfg();
    let o = regprompt(&[
        "--config",
        s(&cfg),
        "register",
        "--fixed",
        s(&reference),
        "--moving",
        s(&new),
        "--transform",
        s(&t),
        "--resampled",
        s(&warped),
        "--inverse",
        s(&inv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["final_cost"].as_f64().unwrap().is_finite());
    assert!(summary["inverse"]["fraction_within_tolerance"].as_f64().unwrap() >= 0.99);
    assert!(t.exists() && warped.exists() && inv.exists());
}

#[test]
fn same_seed_same_phantom() {
    let work = tempfile::tempdir().unwrap();
    let cfg = cfg();
    let dirs: Vec<PathBuf> = (0..2).map(|i| work.path().join(format!("p{i}"))).collect();
    for d in &dirs {
        let o = regprompt(&[
            "--config",
            s(&cfg),
            "--seed",
            "9",
            "phantom",
            "--out-dir",
            s(d),
            "--references",
            "1",
        ]);
        assert_eq!(code(&o), 0);
    }
    for f in ["new.nii", "ref-0.nii", "library.json", "gt/femur.nii", "case.json"] {
        assert_eq!(
            fs::read(dirs[0].join(f)).unwrap(),
            fs::read(dirs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}
