use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ranksemi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ranksemi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ranksemi(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "n_labelled=20",
    "--set",
    "n_unlabelled=30",
    "--set",
    "n_val=6",
    "--set",
    "n_test=10",
];

fn gen_small(dir: &Path, seed: &str) {
    let mut args = vec!["generate", "--seed", seed, "--out", p(dir)];
    args.extend(SMALL);
    ok(&args);
}

#[test]
fn generate_writes_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_small(&a, "3");
    gen_small(&b, "3");
    for f in ["labelled.jsonl", "unlabelled.jsonl", "val.jsonl", "test.jsonl", "noise.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
    }
    let noise = fs::read_to_string(a.join("noise.csv")).unwrap();
    assert_eq!(noise.lines().filter(|l| l.ends_with(",1")).count(), 3);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ranksemi(&["generate"]).status.code(), Some(2));
    assert_eq!(ranksemi(&["nonsense"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = ranksemi(&["generate", "--out", p(tmp.path()), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("valid keys"));
}

#[test]
fn train_eval_audit_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "1");
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "# small run\nepochs = 3\nalpha = 0.99\nhidden = 6\n").unwrap();

    let run = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--set", "method=ours"]);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("epoch,lr,lambda,labelled_term,unlabelled_term,total,mean_epsilon"));

    // An override equal to the file value reproduces the run exactly.
    let again = tmp.path().join("again");
    ok(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&again), "--set", "method=ours", "--set",
        "alpha=0.99",
    ]);
    assert_eq!(
        fs::read(run.join("model.ckpt")).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );

    let bad = ranksemi(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&again), "--set", "kay=8"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lp_iterations"));

    let eval = tmp.path().join("eval");
    let ckpt = run.join("model.ckpt");
    let test = data.join("test.jsonl");
    ok(&["eval", "--checkpoint", p(&ckpt), "--test", p(&test), "--out", p(&eval), "--cmc-ranks", "5"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("summary.json")).unwrap()).unwrap();
    let map = summary["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(summary["cmc"].as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(eval.join("per_image_ap.csv")).unwrap().lines().count(), 11);

    let missing = tmp.path().join("missing.ckpt");
    let out = ranksemi(&["eval", "--checkpoint", p(&missing), "--test", p(&test), "--out", p(&eval)]);
    assert_eq!(out.status.code(), Some(1));

    let audit = tmp.path().join("audit");
    ok(&["audit", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&audit)]);
    for f in ["ranks.csv", "pl.csv", "mt.csv", "lp.csv", "histograms.csv", "ew.csv", "summary.json"] {
        assert!(audit.join(f).exists(), "{f}");
    }
    let ew = fs::read_to_string(audit.join("ew.csv")).unwrap();
    assert_eq!(ew.lines().count(), 31);
    let hist = fs::read_to_string(audit.join("histograms.csv")).unwrap();
    assert!(hist.lines().any(|l| l == "RankS,0,0"), "{hist}");
}

#[test]
fn ablate_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let res = Command::new(env!("CARGO_BIN_EXE_ranksemi"))
        .args([
            "ablate",
            "--out",
            p(&out),
            "--seeds",
            "0,1",
            "--fractions",
            "1.0,0.5",
            "--variants",
            "supervised,ours,ours@MT",
            "--set",
            "epochs=1",
            "--set",
            "hidden=4",
            "--synth-set",
            "n_labelled=10",
            "--synth-set",
            "n_unlabelled=10",
            "--synth-set",
            "n_val=4",
            "--synth-set",
            "n_test=4",
        ])
        .env("RANKSEMI_THREADS", "2")
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.contains("ours@MT,ours,MT,0.5,2,"));

    let bad = ranksemi(&["ablate", "--out", p(&out), "--variants", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
}
