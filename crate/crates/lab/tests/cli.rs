use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decode_lab::files::read_json;
use decode_lab::manifest::{RunManifest, MANIFEST_FILE};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decode-lab"))
        .args(args)
        .env("DECODE_LAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = lab(args);
    assert_eq!(code(&out), 0, "{args:?}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    p
}

/// Small cohort plus a tiny model config shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    run_config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let gen = write_json(&root, "gen.json", serde_json::json!({"n_patients": 60, "seed": 5}));
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&gen), "--out", s(&data)]);
    let run_config = write_json(
        &root,
        "run.json",
        serde_json::json!({
            "model": {"d_model": 8, "n_heads": 2, "n_encoder_layers": 2, "n_decoder_layers": 2,
                      "d_ff": 16, "max_seq_len": 64, "dropout_prob": 0.0},
            "train": {"batch_size": 2, "max_steps": 6, "warmup_steps": 2, "lr": 0.001},
            "report": {"n_boot": 20}
        }),
    );
    Fixture {
        _dir: dir,
        root,
        data,
        run_config,
    }
}

fn manifest(dir: &Path) -> RunManifest {
    read_json(&dir.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_checksummed() {
    let f = fixture();
    let again = f.root.join("again");
    let gen = f.root.join("gen.json");
    ok(&["gen-data", "--config", s(&gen), "--out", s(&again)]);
    let (a, b) = (manifest(&f.data), manifest(&again));
    let sums = |m: &RunManifest| m.outputs.iter().map(|o| o.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(sums(&a), sums(&b));
    assert_eq!(a.outputs.len(), 3);
    for o in &a.outputs {
        assert_eq!(decode_lab::files::sha256_file(&o.path).unwrap(), o.sha256);
    }
    let other = f.root.join("other");
    ok(&["gen-data", "--config", s(&gen), "--seed", "6", "--out", s(&other)]);
    assert_ne!(sums(&a)[0], sums(&manifest(&other))[0]);
}

#[test]
fn gen_data_bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&lab(&["gen-data", "--config", "/no/such/file.json", "--out", s(&out)])), 2);
    let bad = write_json(dir.path(), "bad.json", serde_json::json!({"n_patients": 10, "p_chronic": 3.0}));
    let res = lab(&["gen-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("p_chronic"));
    assert_eq!(code(&lab(&["gen-data", "--out", s(&out)])), 2);
    assert_eq!(code(&lab(&["no-such-subcommand"])), 2);
}

#[test]
fn pipeline_end_to_end() {
    let f = fixture();
    let cohort = f.data.join("cohort.jsonl");
    let labels = f.data.join("labels.jsonl");
    let cfg = s(&f.run_config);

    let pre = f.root.join("pre");
    ok(&["pretrain", "--config", cfg, "--cohort", s(&cohort), "--scheme", "span", "--seed", "3", "--out", s(&pre)]);
    let trace = std::fs::read_to_string(pre.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss\n"));
    assert_eq!(trace.lines().count(), 7);
    let ck = pre.join("checkpoint.dckp");

    // Same seed: byte-identical trace and checkpoint.
    let pre2 = f.root.join("pre2");
    ok(&["pretrain", "--config", cfg, "--cohort", s(&cohort), "--scheme", "span", "--seed", "3", "--out", s(&pre2)]);
    assert_eq!(std::fs::read(pre.join("trace.csv")).unwrap(), std::fs::read(pre2.join("trace.csv")).unwrap());
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(pre2.join("checkpoint.dckp")).unwrap());

    let daop = f.root.join("daop");
    ok(&["evaluate-daop", "--config", cfg, "--checkpoint", s(&ck), "--cohort", s(&cohort), "--pairs", "last", "--out", s(&daop)]);
    let report: serde_json::Value = read_json(&daop.join("report.json")).unwrap();
    assert_eq!(report["task"], "daop");
    let preds = std::fs::read_to_string(daop.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 60);
    assert!(std::fs::read_to_string(daop.join("report.csv")).unwrap().starts_with("task,metric,value,ci_low,ci_high,stratum,n\n"));

    let copy = f.root.join("copy");
    ok(&["baseline", "--kind", "copy", "--config", cfg, "--cohort", s(&cohort), "--pairs", "last", "--out", s(&copy)]);
    let copy_report: serde_json::Value = read_json(&copy.join("report.json")).unwrap();
    let keys = |r: &serde_json::Value| {
        r["metrics"].as_array().unwrap().iter().map(|m| m["stratum"].as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(keys(&copy_report).first(), keys(&report).first());

    // Fine-tune from the checkpoint and from scratch, with validation.
    let ft = f.root.join("ft");
    ok(&["finetune", "--config", cfg, "--checkpoint", s(&ck), "--cohort", s(&cohort), "--labels", s(&labels),
         "--val-cohort", s(&cohort), "--val-labels", s(&labels), "--out", s(&ft)]);
    assert!(ft.join("validation.csv").exists());
    let ft_rand = f.root.join("ft_rand");
    ok(&["finetune", "--config", cfg, "--cohort", s(&cohort), "--labels", s(&labels), "--out", s(&ft_rand)]);

    let task = f.root.join("task");
    ok(&["evaluate-task", "--config", cfg, "--checkpoint", s(&ft.join("checkpoint.dckp")), "--cohort", s(&cohort),
         "--labels", s(&labels), "--history", "last-k", "--k", "3", "--out", s(&task)]);
    let scores = std::fs::read_to_string(task.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 61);
    let from_scores = f.root.join("from_scores");
    ok(&["evaluate-task", "--scores", s(&task.join("scores.csv")), "--config", cfg, "--out", s(&from_scores)]);
    assert_eq!(
        std::fs::read(task.join("report.json")).unwrap(),
        std::fs::read(from_scores.join("report.json")).unwrap()
    );

    let lr = f.root.join("lr");
    ok(&["baseline", "--kind", "logreg", "--config", cfg, "--cohort", s(&cohort), "--labels", s(&labels), "--out", s(&lr)]);
    let lr_report: serde_json::Value = read_json(&lr.join("report.json")).unwrap();
    let task_report: serde_json::Value = read_json(&task.join("report.json")).unwrap();
    assert_eq!(keys(&lr_report), keys(&task_report));

    let att = f.root.join("att");
    ok(&["attention-export", "--config", cfg, "--checkpoint", s(&ck), "--cohort", s(&cohort), "--patient", "P000003", "--out", s(&att)]);
    let export: serde_json::Value = read_json(&att.join("attention.json")).unwrap();
    let records = export["records"].as_object().unwrap();
    assert_eq!(records.len(), 2 * (2 + 2 * 2));
    for r in records.values() {
        for row in r["weights"].as_array().unwrap() {
            let sum: f64 = row.as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(records["encoder_self/0/0"]["key_tokens"][1], "SEX_M");

    // Each run wrote exactly one manifest naming its inputs.
    for d in [&pre, &daop, &copy, &ft, &task, &lr, &att] {
        let m = manifest(d);
        assert!(!m.inputs.is_empty());
        assert!(!m.outputs.is_empty());
    }
    assert_eq!(manifest(&pre).seed, Some(3));
}

#[test]
fn exit_codes_follow_the_contract() {
    let f = fixture();
    let cohort = f.data.join("cohort.jsonl");
    let cfg = s(&f.run_config);
    let out = f.root.join("x");

    let missing = lab(&["evaluate-daop", "--checkpoint", "/no/ck.dckp", "--cohort", s(&cohort), "--out", s(&out)]);
    assert_eq!(code(&missing), 2);

    let single = f.root.join("single.csv");
    std::fs::write(&single, "patient_id,score,label\na,0.2,0\nb,0.9,0\n").unwrap();
    let res = lab(&["evaluate-task", "--scores", s(&single), "--out", s(&out)]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("undefined"));

    // A checkpoint used under a run config with a different architecture.
    let pre = f.root.join("pre");
    ok(&["pretrain", "--config", cfg, "--cohort", s(&cohort), "--out", s(&pre)]);
    let other = write_json(&f.root, "other.json", serde_json::json!({"model": {"d_model": 16, "n_heads": 2}}));
    let res = lab(&["evaluate-daop", "--config", s(&other), "--checkpoint", s(&pre.join("checkpoint.dckp")),
                    "--cohort", s(&cohort), "--out", s(&out)]);
    assert_eq!(code(&res), 4, "{}", String::from_utf8_lossy(&res.stderr));

    let truncated = f.root.join("trunc.dckp");
    let bytes = std::fs::read(pre.join("checkpoint.dckp")).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let res = lab(&["evaluate-daop", "--checkpoint", s(&truncated), "--cohort", s(&cohort), "--out", s(&out)]);
    assert_eq!(code(&res), 2);

    let res = lab(&["attention-export", "--checkpoint", s(&pre.join("checkpoint.dckp")), "--cohort", s(&cohort),
                    "--patient", "nobody", "--out", s(&out)]);
    assert_eq!(code(&res), 2);

    let res = lab(&["pretrain", "--cohort", s(&cohort), "--scheme", "shuffle", "--out", s(&out)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let small = ["gradcheck", "--layers", "1", "--heads", "2", "--d-model", "8", "--batch", "2", "--samples", "8"];
    let out = ok(&small);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    let mut faulty = small.to_vec();
    faulty.extend(["--fault", "layer-norm"]);
    assert_eq!(code(&lab(&faulty)), 4);
}
