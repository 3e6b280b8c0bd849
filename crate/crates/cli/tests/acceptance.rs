//! Acceptance suite. Drives the featsplat binary end to end and prints one
//! PASS/FAIL line per criterion, then the CLI-level examples.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use featsplat::scene::load_field;

const BIN: &str = env!("CARGO_BIN_EXE_featsplat");

struct Outcome {
    lines: Vec<String>,
    failed: Vec<String>,
}

impl Outcome {
    fn record(&mut self, id: &str, passed: bool, detail: String) {
        let line = format!("[{}] {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        println!("{line}");
        if !passed {
            self.failed.push(line.clone());
        }
        self.lines.push(line);
    }
}

fn featsplat(out: &Path, args: &[&str]) -> (i32, Duration) {
    let start = Instant::now();
    let o = Command::new(BIN)
        .args(["--threads", "1", "--precision", "f64", "--seed", "0", "--out"])
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs");
    if !o.status.success() {
        eprintln!("featsplat {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    }
    (o.status.code().unwrap_or(-1), start.elapsed())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth → lift em → sample entropy → train-ae → export-tokens.
fn pipeline(root: &Path) -> (bool, Duration) {
    let s = root.join("synth");
    let em = root.join("em");
    let samp = root.join("sample");
    let ae = root.join("ae");
    let tok = root.join("tokens");
    let steps: Vec<(PathBuf, Vec<String>)> = vec![
        (s.clone(), vec!["synth".into(), "--n-gaussians".into(), "200".into(), "--views".into(), "8".into()]),
        (
            em.clone(),
            ["lift", "--mode", "em", "--field", p(&s.join("field.gsf")), "--maps", p(&s.join("features.fmt")), "--cameras", p(&s.join("cameras.cam"))]
                .map(String::from)
                .to_vec(),
        ),
        (
            samp.clone(),
            ["sample", "--strategy", "entropy", "-k", "100", "--field", p(&em.join("lifted.gsf"))].map(String::from).to_vec(),
        ),
        (ae.clone(), vec!["train-ae".into(), "--fixture".into()]),
        (
            tok,
            ["export-tokens", "--field", p(&em.join("lifted.gsf")), "--checkpoint", p(&ae.join("ae.fsae")), "--indices", p(&samp.join("indices.txt"))]
                .map(String::from)
                .to_vec(),
        ),
    ];
    let mut total = Duration::ZERO;
    for (out, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, t) = featsplat(out, &args);
        total += t;
        if code != 0 {
            return (false, total);
        }
    }
    (true, total)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut m = BTreeMap::new();
    for dir in fs::read_dir(root).unwrap() {
        for f in fs::read_dir(dir.unwrap().path()).unwrap() {
            let f = f.unwrap().path();
            m.insert(f.clone(), fs::read(&f).unwrap());
        }
    }
    m
}

fn max_feature_diff(a: &Path, b: &Path) -> f64 {
    let (a, b) = (load_field(a).unwrap(), load_field(b).unwrap());
    a.gaussians
        .iter()
        .zip(&b.gaussians)
        .flat_map(|(x, y)| x.feature.iter().zip(&y.feature).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut out = Outcome { lines: vec![], failed: vec![] };

    // criteria 1-9 come from the verify report
    let vdir = root.join("verify");
    let (vcode, vtime) = featsplat(&vdir, &["verify"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(vdir.join("verify.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    for criterion in 1..=9 {
        let group: Vec<&serde_json::Value> = checks
            .iter()
            .filter(|c| c["id"].as_str().unwrap().trim_end_matches(char::is_alphabetic) == criterion.to_string())
            .collect();
        let passed = !group.is_empty() && group.iter().all(|c| c["passed"].as_bool().unwrap());
        let detail = group
            .iter()
            .map(|c| format!("{} {} ({:.2} s)", c["id"].as_str().unwrap(), c["detail"].as_str().unwrap(), c["seconds"].as_f64().unwrap()))
            .collect::<Vec<_>>()
            .join(" | ");
        out.record(&format!("criterion {criterion}"), passed, detail);
    }

    // criterion 10: verify + pipeline, then a bit-identical rerun
    let pipe = root.join("pipeline");
    let (ok, ptime) = pipeline(&pipe);
    let first = snapshot(&pipe);
    let (ok2, _) = pipeline(&pipe);
    let second = snapshot(&pipe);
    let differing: Vec<_> = first.iter().filter(|(k, v)| second.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    let total = vtime + ptime;
    out.record(
        "criterion 10",
        vcode == 0 && ok && ok2 && differing.is_empty() && first.len() == second.len() && total < Duration::from_secs(120),
        format!(
            "verify exit {vcode} in {:.1} s, pipeline {} in {:.1} s, total {:.1} s (limit 120 s); rerun compared {} files, {} differ {:?}",
            vtime.as_secs_f64(),
            if ok { "ok" } else { "failed" },
            ptime.as_secs_f64(),
            total.as_secs_f64(),
            first.len(),
            differing.len(),
            differing
        ),
    );

    // CLI examples
    out.record(
        "cli pipeline under 60 s",
        ok && ptime < Duration::from_secs(60),
        format!("synth -> lift -> sample -> train-ae -> export-tokens took {:.1} s", ptime.as_secs_f64()),
    );

    let small = root.join("small");
    featsplat(&small, &["synth", "--n-gaussians", "40", "--prototypes", "4", "--dim", "8", "--views", "6", "--size", "32"]);
    let (field, maps, cams) = (small.join("field.gsf"), small.join("features.fmt"), small.join("cameras.cam"));
    let inputs = ["--field", p(&field), "--maps", p(&maps), "--cameras", p(&cams)];
    let (c_gd, _) = featsplat(&root.join("gd"), &[&["lift", "--mode", "gd"][..], &inputs].concat());
    let (c_em, _) = featsplat(&root.join("em"), &[&["lift", "--mode", "em"][..], &inputs].concat());
    let diff = if c_gd == 0 && c_em == 0 {
        max_feature_diff(&root.join("gd/lifted.gsf"), &root.join("em/lifted.gsf"))
    } else {
        f64::INFINITY
    };
    out.record("cli lift gd vs em", diff < 1e-4, format!("max-abs feature difference {diff:.3e} (tol 1e-4)"));

    let synth = pipe.join("synth");
    let (c_eval, _) = featsplat(
        &root.join("eval"),
        &["eval", "--features", p(&synth.join("features.fmt")), "--gt-features", p(&synth.join("features.fmt")), "--rgb", p(&synth.join("rgb.fmt")), "--gt-rgb", p(&synth.join("rgb.fmt"))],
    );
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("eval/eval.json")).unwrap_or_default()).unwrap_or_default();
    out.record(
        "cli eval self-comparison",
        c_eval == 0 && eval["psnr"] == "exact" && eval["feature_mse"] == 0.0,
        format!("psnr {} feature_mse {}", eval["psnr"], eval["feature_mse"]),
    );

    println!("{} lines, {} failed", out.lines.len(), out.failed.len());
    assert!(out.failed.is_empty(), "failed:\n{}", out.failed.join("\n"));
}
