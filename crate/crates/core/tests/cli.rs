use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CHAIN: &str = r#"{
    "genes": ["g0", "g1", "g2", "g3", "g4", "g5"],
    "modules": [
        {"name": "m1", "genes": ["g0", "g1"]},
        {"name": "m2", "genes": ["g2", "g3"]},
        {"name": "m3", "genes": ["g4", "g5"]}
    ],
    "metabolites": [
        {"name": "A", "in_modules": ["m1"], "out_modules": ["m2"]},
        {"name": "B", "in_modules": ["m2"], "out_modules": ["m3"]}
    ]
}"#;

// small and quick; only the plumbing is under test here
const SMALL: &str = r#"{
    "model": {"d_r": 8, "d_z": 4, "d_d": 4, "hidden": 8},
    "train": {"steps": 4, "batch_size": 4, "context_len": 3, "target_len": 5},
    "eval": {"contexts": 4, "mask_group": 2},
    "solver": {"method": "euler", "steps_per_unit": 1},
    "scfea": {"steps": 20}
}"#;

fn snodep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snodep"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = snodep(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, kind: &str, seed: &str) {
    ok(&[
        "generate", "--kind", kind, "--dims", "6", "--timesteps", "8", "--cells", "12", "--seed", seed, "--out",
        p(dir),
    ]);
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    generate(&a, "poisson", "7");
    generate(&b, "poisson", "7");
    generate(&c, "poisson", "8");
    for f in ["data.csv", "ground_truth.csv", "spec.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
    let header = fs::read_to_string(a.join("data.csv")).unwrap();
    assert!(header.starts_with("time,sample_id,g0,g1,g2,g3,g4,g5\n"));
}

#[test]
fn validation_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    generate(tmp.path(), "poisson", "1");
    let data = tmp.path().join("data.csv");
    let o = snodep(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    let missing = tmp.path().join("nope.csv");
    let o = snodep(&["train", "--data", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));

    let o = snodep(&["generate", "--kind", "binomial", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_once_only() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "poisson", "2");
    let cfg = tmp.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let norm_dir = tmp.path().join("norm");
    ok(&[
        "preprocess", "--data", p(&tmp.path().join("data.csv")), "--config", p(&cfg), "--out", p(&norm_dir),
    ]);
    let norm = norm_dir.join("normalized.csv");
    assert!(norm.exists());
    let o = snodep(&["preprocess", "--data", p(&norm), "--out", p(&tmp.path().join("again"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "poisson", "3");
    let cfg = tmp.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data.csv");
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--seed", "5", "--out", p(&run)]);
    for f in ["checkpoint.txt", "run.json", "loss.csv", "metrics.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);

    let ev = tmp.path().join("eval");
    ok(&["evaluate", "--model", p(&run), "--data", p(&data), "--config", p(&cfg), "--out", p(&ev)]);
    assert!(ev.join("metrics.csv").exists());

    // same seed, same bytes
    let again = tmp.path().join("again");
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--seed", "5", "--out", p(&again)]);
    assert_eq!(
        fs::read(run.join("checkpoint.txt")).unwrap(),
        fs::read(again.join("checkpoint.txt")).unwrap()
    );
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "gaussian", "4");
    let cfg = tmp.path().join("wild.json");
    fs::write(
        &cfg,
        r#"{
            "model": {"d_r": 8, "d_z": 4, "d_d": 4, "hidden": 8},
            "train": {"steps": 200, "batch_size": 4, "lr": 1e300, "context_len": 3, "target_len": 5},
            "solver": {"method": "euler", "steps_per_unit": 1}
        }"#,
    )
    .unwrap();
    let o = snodep(&[
        "train", "--data", p(&tmp.path().join("data.csv")), "--config", p(&cfg), "--out", p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn compare_has_mean_row_for_several_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "poisson", "6");
    let cfg = tmp.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("cmp");
    ok(&[
        "compare", "--models", "nodep,snodep", "--seeds", "2", "--data", p(&tmp.path().join("data.csv")),
        "--config", p(&cfg), "--out", p(&out),
    ]);
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "seed,nodep,snodep,nodep_minus_snodep");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
}

#[test]
fn flux_and_knockout_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "poisson", "9");
    let cfg = tmp.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let pathway = tmp.path().join("chain.json");
    fs::write(&pathway, CHAIN).unwrap();
    let data = tmp.path().join("data.csv");

    let fl = tmp.path().join("flux");
    ok(&["estimate-flux", "--data", p(&data), "--pathway", p(&pathway), "--config", p(&cfg), "--out", p(&fl)]);
    let flux = fs::read_to_string(fl.join("flux.csv")).unwrap();
    assert!(flux.starts_with("time,sample_id,m1,m2,m3\n"));
    let balance = fs::read_to_string(fl.join("balance.csv")).unwrap();
    assert!(balance.starts_with("time,sample_id,A,B\n"));

    let ko = tmp.path().join("ko");
    ok(&[
        "knockout", "--data", p(&data), "--pathway", p(&pathway), "--k", "4", "--configurations", "5", "--config",
        p(&cfg), "--out", p(&ko),
    ]);
    for s in 0..5 {
        let f = fs::read_to_string(ko.join(format!("config_{s}/flux.csv"))).unwrap();
        let header = f.lines().next().unwrap();
        assert!(header.starts_with("time,sample_id,m1,m2,m3,"), "{header}");
        assert_eq!(header.matches(",ko:").count(), 6, "{header}");
    }
    let split = fs::read_to_string(ko.join("split.csv")).unwrap();
    assert_eq!(split.lines().filter(|l| l.contains(",test,")).count(), 1);
    assert_eq!(split.lines().filter(|l| l.contains(",train,")).count(), 4);
}
