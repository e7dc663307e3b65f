mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use deltamerge::tensorio::{read_checkpoint, write_checkpoint, Checkpoint, Dtype, Tensor};
use serde_json::{json, Value};

fn deltamerge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltamerge"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, values: &[(&str, &[f32])]) {
    let d: Dense = values.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
    write_dense(&d, Dtype::F32, &dir.join(name));
}

fn write_json(dir: &Path, name: &str, v: &Value) {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// The four-position example: base zero, two models with a tie at the last position.
fn worked_fixture(dir: &Path) {
    write(dir, "base.st", &[("w", &[0.0; 4])]);
    write(dir, "m1.st", &[("w", &[2.0, -1.0, 0.5, 3.0])]);
    write(dir, "m2.st", &[("w", &[1.0, 1.0, -2.0, -3.0])]);
}

#[test]
fn help_and_version_exit_zero_usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(deltamerge(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(deltamerge(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(deltamerge(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(deltamerge(dir.path(), &["merge", "--recipe", "r.json"]).status.code(), Some(1));
    assert_eq!(deltamerge(dir.path(), &["--threads", "0", "inspect", "x"]).status.code(), Some(1));
}

#[test]
fn io_and_format_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(deltamerge(dir.path(), &["inspect", "missing.st"]).status.code(), Some(2));
    std::fs::write(dir.path().join("junk.st"), b"\xff\xff\xff\xff\xff\xff\xff\xffnot a header").unwrap();
    let out = deltamerge(dir.path(), &["inspect", "junk.st"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn inspect_lists_tensors_in_order_with_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Checkpoint::new();
    c.insert("z", Tensor::from_f32(Dtype::F16, vec![2, 3], &[1.0; 6]).unwrap()).unwrap();
    c.insert("a", Tensor::from_f32(Dtype::F32, vec![4], &[0.5; 4]).unwrap()).unwrap();
    let fp = write_checkpoint(&c, dir.path().join("c.st")).unwrap();
    let out = deltamerge(dir.path(), &["inspect", "c.st"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name\tdtype\tshape\tbegin\tend\tbytes");
    assert_eq!(lines[1], "a\tF32\t[4]\t0\t16\t16");
    assert_eq!(lines[2], "z\tF16\t[2,3]\t16\t28\t12");
    assert_eq!(lines[3], "# total\t2 tensors\t10 params\t28 bytes");
    assert_eq!(lines[4], format!("# fingerprint\t{fp}"));

    let doc: Value = serde_json::from_slice(&deltamerge(dir.path(), &["--format", "doc", "inspect", "c.st"]).stdout).unwrap();
    assert_eq!(doc["tensors"][1]["shape"], json!([2, 3]));
    assert_eq!(doc["fingerprint"], json!(fp.to_string()));
}

#[test]
fn diff_reports_norms() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "b.st", &[("w", &[1.0, 1.0, 7.0])]);
    write(dir.path(), "t.st", &[("w", &[4.0, 5.0, 7.0])]);
    let out = deltamerge(dir.path(), &["--format", "doc", "diff", "b.st", "t.st"]);
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["total"]["l2"], json!(5.0));
    assert_eq!(doc["total"]["max_abs"], json!(4.0));
    assert_eq!(doc["total"]["nonzero"], json!(2));
}

#[test]
fn merge_writes_output_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    worked_fixture(dir.path());
    write_json(
        dir.path(),
        "r.json",
        &json!({"algorithm": "ties", "base": "base.st", "models": ["m1.st", "m2.st"], "densities": [0.5, 0.5]}),
    );
    let out = deltamerge(dir.path(), &["merge", "--recipe", "r.json", "--out", "out.st"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let merged = read_checkpoint(dir.path().join("out.st")).unwrap();
    assert_eq!(merged.get("w").unwrap().to_f32(), [2.0, 0.0, -2.0, 0.0]);
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out.st.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["output"]["fingerprint"], json!(merged.fingerprint().to_string()));
    assert_eq!(manifest["recipe"]["densities"], json!([0.5, 0.5]));
    assert_eq!(manifest["models"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_scale_reproduces_the_base() {
    let dir = tempfile::tempdir().unwrap();
    worked_fixture(dir.path());
    write(dir.path(), "base.st", &[("w", &[0.25, -1.0, 3.0, 0.0])]);
    write_json(
        dir.path(),
        "r.json",
        &json!({"algorithm": "ties", "base": "base.st", "models": ["m1.st", "m2.st"], "densities": [1.0, 1.0], "scale": 0.0}),
    );
    assert_eq!(deltamerge(dir.path(), &["merge", "--recipe", "r.json", "--out", "o.st"]).status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("o.st")).unwrap(), std::fs::read(dir.path().join("base.st")).unwrap());
}

#[test]
fn invalid_recipes_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    worked_fixture(dir.path());
    write(dir.path(), "m3.st", &[("w", &[1.0; 4])]);
    let bad = [
        json!({"algorithm": "ties_sv", "base": "base.st", "models": ["m1.st", "m2.st", "m3.st"],
               "densities": [1.0, 1.0, 1.0], "slack": 0.1, "protected_model": 0}),
        json!({"algorithm": "ties", "base": "base.st", "models": ["m1.st", "m2.st"], "densities": [1.5, 1.0]}),
        json!({"algorithm": "ties", "base": "base.st", "models": ["m1.st", "m2.st"], "densities": [1.0, 1.0], "surprise": 1}),
        json!({"algorithm": "task_arithmetic", "base": "base.st", "models": ["m1.st"], "drop_p": 0.5}),
    ];
    for (i, recipe) in bad.iter().enumerate() {
        write_json(dir.path(), "r.json", recipe);
        let out = deltamerge(dir.path(), &["merge", "--recipe", "r.json", "--out", "o.st"]);
        assert_eq!(out.status.code(), Some(1), "recipe {i}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!dir.path().join("o.st").exists());
    }
}

#[test]
fn analyze_and_series_reports() {
    let dir = tempfile::tempdir().unwrap();
    worked_fixture(dir.path());
    let args = ["analyze", "--protected", "m2.st", "--other", "m1.st", "--base", "base.st", "--k-protected", "1"];
    let out = deltamerge(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    // conflicts at positions 1, 2 and 3: equal magnitudes at 1 and 3, m2 wins 2
    assert!(text.lines().any(|l| l == "# total\t4\t4\t4\t3\t0\t1\t2\t0"), "{text}");

    let out = deltamerge(
        dir.path(),
        &["series", "--base", "base.st", "--protected", "m2.st", "--checkpoints", "m1.st,m2.st", "--tags", "early,late", "--k-protected", "1"],
    );
    assert_eq!(out.status.code(), Some(0));
    let rows: Vec<String> = stdout(&out).lines().skip(1).map(|l| l.split('\t').next().unwrap().to_string()).collect();
    assert_eq!(rows, ["early", "late"]);

    let mismatched = ["series", "--base", "base.st", "--protected", "m2.st", "--checkpoints", "m1.st,m2.st", "--tags", "one"];
    assert_eq!(deltamerge(dir.path(), &mismatched).status.code(), Some(1));
    let empty = ["series", "--base", "base.st", "--protected", "m2.st", "--checkpoints", ""];
    assert_eq!(deltamerge(dir.path(), &empty).status.code(), Some(1));
}

#[test]
fn sweep_with_constant_hook_picks_index_zero() {
    let dir = tempfile::tempdir().unwrap();
    worked_fixture(dir.path());
    write_json(
        dir.path(),
        "sweep.json",
        &json!({
            "recipe_template": {"algorithm": "ties", "base": "base.st", "models": ["m1.st", "m2.st"]},
            "grid": {"k1": [0.2, 0.6], "k2": [0.5]},
            "eval_command": "echo 3",
            "workdir": "cands",
        }),
    );
    let out = deltamerge(dir.path(), &["--format", "doc", "sweep", "--spec", "sweep.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["best"]["index"], json!(0));
    assert_eq!(doc["best_recipe"]["densities"], json!([0.2, 0.5]));
    assert!(dir.path().join("cands/candidate-0000.safetensors").exists());
    assert!(!dir.path().join("cands/candidate-0001.safetensors").exists());
}

#[test]
fn synth_is_reproducible_and_writes_series() {
    let dir = tempfile::tempdir().unwrap();
    write_json(
        dir.path(),
        "spec.json",
        &json!({"seed": 7, "tensors": [{"name": "w", "shape": [16, 4], "dtype": "BF16"}, {"name": "b", "shape": [4]}]}),
    );
    for out in ["one.st", "two.st"] {
        assert_eq!(deltamerge(dir.path(), &["synth", "--spec", "spec.json", "--out", out]).status.code(), Some(0));
    }
    assert_eq!(std::fs::read(dir.path().join("one.st")).unwrap(), std::fs::read(dir.path().join("two.st")).unwrap());

    let out = deltamerge(dir.path(), &["synth", "--spec", "spec.json", "--out", "series", "--series-steps", "3", "--growth", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["base", "step-01", "step-02", "step-03"] {
        assert!(dir.path().join(format!("series/{name}.safetensors")).exists(), "{name}");
    }
    let base = read_checkpoint(dir.path().join("series/base.safetensors")).unwrap();
    assert_eq!(base.to_bytes(), read_checkpoint(dir.path().join("one.st")).unwrap().to_bytes());
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let layout = random_layout(&mut r, 20_000);
    for name in ["base.st", "m1.st", "m2.st"] {
        write_dense(&random_dense(&mut r, &layout), Dtype::F16, &dir.path().join(name));
    }
    write_json(
        dir.path(),
        "r.json",
        &json!({"algorithm": "ties_sv", "base": "base.st", "models": ["m1.st", "m2.st"], "densities": [0.4, 0.6],
                "slack": 0.3, "protected_model": 1, "trim_granularity": "global"}),
    );
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = format!("o{threads}.st");
        assert_eq!(deltamerge(dir.path(), &["--threads", threads, "merge", "--recipe", "r.json", "--out", &out]).status.code(), Some(0));
        outputs.push(std::fs::read(dir.path().join(out)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
