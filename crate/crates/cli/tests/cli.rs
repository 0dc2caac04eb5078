use std::path::Path;
use std::process::{Command, Output};

use korn_core::fixtures::sample_centered;
use korn_core::{io, Point, RigidMotion, Segment, SegmentSet};

fn korn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_korn")).args(args).output().expect("binary runs")
}

fn two_piece(path: &Path) {
    let a = RigidMotion::new(0.2, [1.0, 0.0]);
    let b = RigidMotion::new(-0.3, [0.0, 1.0]);
    let crack = Segment::new(Point::new(0.1, -1.0), Point::new(0.1, 1.0)).unwrap();
    let u = sample_centered(
        &|p| if p.x < 0.1 { a.eval(p) } else { b.eval(p) },
        SegmentSet::from_segments(vec![crack]),
        64,
        Point::ORIGIN,
        1.0,
    )
    .unwrap();
    io::write_field(path, &u).unwrap();
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn decompose_two_piece_field_with_svg() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("two_piece.field");
    two_piece(&field);
    let out = dir.path().join("r.json");
    let svg = dir.path().join("out.svg");
    let o = korn(&[
        "decompose",
        "--input",
        field.to_str().unwrap(),
        "--theta",
        "0.25",
        "--p",
        "1.5",
        "--svg",
        svg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out);
    assert_eq!(r["schema"], "korn-report/1");
    assert_eq!(r["result"]["pieces"], 2);
    assert_eq!(r["result"]["motions"].as_array().unwrap().len(), 2);
    let s = std::fs::read_to_string(&svg).unwrap();
    for id in ["covering", "z", "exceptional", "pieces", "jumps"] {
        assert!(s.contains(&format!("<g id=\"{id}\"")), "missing layer {id}");
    }
    assert!(s.contains("stroke=\"red\""));
}

#[test]
fn reports_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("forest.kdf");
    let o = korn(&["sample", "--fixture", "forest", "--seed", "4", "--n", "64", "--out", field.to_str().unwrap()]);
    assert!(o.status.success());
    let run = || korn(&["decompose", "--input", field.to_str().unwrap()]).stdout;
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let o = korn(&["decompose", "--input", "/no/such/dir/field.kdf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/dir/field.kdf"));
}

#[test]
fn malformed_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.kdf");
    std::fs::write(&p, b"KDF1garbage").unwrap();
    assert_eq!(korn(&["poincare", "--input", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn non_dyadic_theta_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("f.kdf");
    two_piece(&field);
    let o = korn(&["decompose", "--input", field.to_str().unwrap(), "--theta", "0.3"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn linf_guard_failure_exits_4_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("f.kdf");
    korn(&["sample", "--fixture", "forest", "--seed", "1", "--n", "64", "--out", field.to_str().unwrap()]);
    let out = dir.path().join("r.json");
    let o = korn(&["decompose", "--input", field.to_str().unwrap(), "--linf-guard", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let r = json(&out);
    assert_eq!(r["passed"], false);
    assert!(r["ledger"]["entries"].is_object());
}

#[test]
fn poincare_on_ramp_gives_strips() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("ramp.kdf");
    assert!(korn(&["sample", "--fixture", "ramp", "--n", "128", "--out", field.to_str().unwrap()]).status.success());
    let out = dir.path().join("r.json");
    let o = korn(&["poincare", "--input", field.to_str().unwrap(), "--rho", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let r = json(&out);
    let c = &r["result"]["components"][0];
    assert!(c["residual_sup"].as_f64().unwrap() <= 1.0);
    assert_eq!(c["added_perimeter"].as_f64().unwrap(), 1.0);
    assert_eq!(r["result"]["pieces"], 2);
}

#[test]
fn kornpoincare_on_rigid_field_reports_empty_set() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("rigid.kdf");
    assert!(korn(&["sample", "--fixture", "rigid", "--n", "32", "--out", field.to_str().unwrap()]).status.success());
    let o = korn(&["kornpoincare", "--input", field.to_str().unwrap()]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["result"]["e_empty"], true);
}

#[test]
fn verify_quick_corpus_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.json");
    let o = korn(&["verify", "--corpus", "quick", "--n", "64", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out);
    assert_eq!(r["passed"], true);
    assert!(r["ledger"]["entries"]["korn_p"]["samples"].as_array().unwrap().len() >= 5);
}

#[test]
fn unknown_corpus_is_a_config_error() {
    assert_eq!(korn(&["verify", "--corpus", "nope", "--n", "64"]).status.code(), Some(3));
}
