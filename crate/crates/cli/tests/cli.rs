//! Exit codes, error messages and the smaller subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_featsplat");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(["--threads", "1", "--out"]).arg(out).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = run(dir, &["synth", "--n-gaussians", "30", "--prototypes", "3", "--dim", "4", "--views", "3", "--size", "24"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_and_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(t.path(), &["--help"])), 0);
    assert_eq!(code(&run(t.path(), &["synth", "--no-such-flag"])), 1);
    assert_eq!(code(&run(t.path(), &["--threads", "0", "synth"])), 1);
    assert_eq!(code(&run(t.path(), &["sample", "--field", "x", "-k", "3", "--strategy", "bogus"])), 1);
}

#[test]
fn missing_input_is_an_io_failure() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["sample", "--field", "/nonexistent/field.gsf", "-k", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/field.gsf"));
}

#[test]
fn malformed_inputs_are_validation_failures() {
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.gsf");
    fs::write(&bad, b"FSGF\x01\x00\x00\x00junk").unwrap();
    let o = run(&t.path().join("o"), &["sample", "--field", bad.to_str().unwrap(), "-k", "3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.gsf"), "{}", stderr(&o));

    let wrong = t.path().join("wrong.gsf");
    fs::write(&wrong, b"NOPE\x01\x00\x00\x00").unwrap();
    let o = run(&t.path().join("o"), &["sample", "--field", wrong.to_str().unwrap(), "-k", "3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));

    let s = t.path().join("s");
    synth(&s);
    let o = run(&t.path().join("o"), &["sample", "--field", s.join("field.gsf").to_str().unwrap(), "-k", "0"]);
    assert_eq!(code(&o), 1);
    // a budget above N selects everything
    let o = run(&t.path().join("o"), &["sample", "--field", s.join("field.gsf").to_str().unwrap(), "-k", "31"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(t.path().join("o/indices.txt")).unwrap().lines().count(), 31);
    let o = run(&t.path().join("o"), &["train-ae"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_subset_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["verify", "--only", "7,8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(t.path().join("verify.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 4);
    assert!(text.contains("0 failed"));
}

#[test]
fn render_eval_sample_export() {
    let t = tempfile::tempdir().unwrap();
    let s = t.path().join("s");
    synth(&s);
    let f = |n: &str| s.join(n).to_str().unwrap().to_string();

    let r = t.path().join("r");
    let o = run(&r, &["render", "--field", &f("field.gsf"), "--cameras", &f("cameras.cam"), "--gt-features", &f("features.fmt"), "--gt-rgb", &f("rgb.fmt")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["psnr"], "exact");
    assert_eq!(eval["per_view"].as_array().unwrap().len(), 3);
    for name in ["features.fmt", "rgb.fmt", "alpha.fmt", "depth.fmt", "eval.txt", "run_config.toml"] {
        assert!(r.join(name).exists(), "{name}");
    }

    let e = t.path().join("e");
    let o = run(&e, &["eval", "--features", r.join("features.fmt").to_str().unwrap(), "--gt-features", &f("features.fmt"), "--alpha", r.join("alpha.fmt").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("all"));

    let ae = t.path().join("ae");
    let o = run(&ae, &["train-ae", "--fixture", "--encoder-dims", "64,4", "--decoder-dims", "4,64", "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(ae.join("loss.txt")).unwrap().lines().count(), 3);

    let x = t.path().join("x");
    let o = run(&x, &["export-tokens", "--field", &f("field.gsf"), "--checkpoint", ae.join("ae.fsae").to_str().unwrap(), "--strategy", "fps", "-k", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let set = featsplat::sample::load_tokens(&x.join("tokens.tok")).unwrap();
    assert_eq!((set.len(), set.dim), (5, 64));
    assert_eq!(set.strategy, Some(featsplat::sample::Strategy::Fps));

    let sm = t.path().join("sm");
    for _ in 0..2 {
        let o = run(&sm, &["--seed", "4", "sample", "--field", &f("field.gsf"), "--strategy", "density", "-k", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let idx = fs::read_to_string(sm.join("indices.txt")).unwrap();
    assert!(idx.starts_with("# strategy=density seed=4 count=7"));
    assert_eq!(idx.lines().count(), 8);
    let cfg = fs::read_to_string(sm.join("run_config.toml")).unwrap();
    assert!(cfg.contains("command = \"sample\"") && cfg.contains("strategy = \"density\"") && cfg.contains("seed = 4"));
}

#[test]
fn lift_rejects_mismatched_views() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    synth(&a);
    let o = run(&b, &["synth", "--n-gaussians", "30", "--prototypes", "3", "--dim", "4", "--views", "2", "--size", "24"]);
    assert_eq!(code(&o), 0);
    let o = run(
        &t.path().join("o"),
        &["lift", "--field", a.join("field.gsf").to_str().unwrap(), "--maps", b.join("features.fmt").to_str().unwrap(), "--cameras", a.join("cameras.cam").to_str().unwrap()],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("2 feature maps for 3 cameras"), "{}", stderr(&o));
}
