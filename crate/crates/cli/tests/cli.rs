use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpmld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpmld"))
        .args(args)
        .env_remove("DPMLD_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dpmld(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dpmld(args).status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn small_data(dir: &Path) -> String {
    let d = s(&dir.join("data"));
    ok(&["gen-data", "--out", &d, "--n", "60", "--seed", "2", "--timesteps", "32"]);
    d
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["gen-data", "--out", &s(&a), "--n", "10", "--seed", "4"]);
    assert!(stdout.starts_with("wrote 10 samples"), "{stdout}");
    ok(&["gen-data", "--out", &s(&b), "--n", "10", "--seed", "4"]);
    let lines = fs::read_to_string(a.join("samples.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
    assert_eq!(lines, fs::read_to_string(b.join("samples.jsonl")).unwrap());
    assert_eq!(
        fs::read(a.join("manifest.txt")).unwrap(),
        fs::read(b.join("manifest.txt")).unwrap()
    );
}

#[test]
fn seed_comes_from_the_environment_when_unset() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let p = dir.path().join(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_dpmld"));
        c.args(["gen-data", "--n", "5", "--out", &s(&p)]).env_remove("DPMLD_SEED");
        if let Some(v) = env {
            c.env("DPMLD_SEED", v);
        }
        if let Some(v) = flag {
            c.args(["--seed", v]);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(p.join("samples.jsonl")).unwrap()
    };
    let env7 = run("e", Some("7"), None);
    assert_eq!(env7, run("f", None, Some("7")));
    assert_ne!(env7, run("g", None, None));
    assert_eq!(run("h", Some("7"), Some("0")), run("i", None, None));
}

#[test]
fn csv_datasets_train_like_line_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let (j, c) = (dir.path().join("j"), dir.path().join("c"));
    let base = ["--n", "40", "--seed", "3", "--timesteps", "32"];
    ok(&[&["gen-data", "--out", &s(&j)][..], &base].concat());
    ok(&[&["gen-data", "--out", &s(&c), "--format", "csv"][..], &base].concat());
    for (data, out) in [(&j, "rj"), (&c, "rc")] {
        let out = s(&dir.path().join(out));
        ok(&["train", "--data", &s(data), "--out", &out, "--epochs", "1", "--seed", "1"]);
    }
    assert_eq!(
        fs::read(dir.path().join("rj/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("rc/metrics.jsonl")).unwrap()
    );
}

#[test]
fn zero_epochs_leave_empty_metrics_and_full_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--out", &s(&run), "--epochs", "0"]);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
    let alloc = fs::read_to_string(run.join("allocation.csv")).unwrap();
    // default head: 16 features per block
    assert_eq!(alloc.lines().count(), 1 + 48);
    for line in alloc.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
        let (w, ep, b) = (cols[0], cols[1], cols[2]);
        assert!((w - 0.5).abs() < 1e-12);
        assert!((b * ep - 1.0).abs() < 1e-12);
        assert!((w + (1.0 - w) * ep.exp() - 1f64.exp()).abs() < 1e-12);
    }
    let audit = fs::read_to_string(run.join("audit.txt")).unwrap();
    assert!(audit.contains("violations=0"), "{audit}");
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("epochs=0\n") && config.contains("epsilon=1\n"), "{config}");
}

#[test]
fn metrics_records_follow_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--out", &s(&run), "--epochs", "2", "--batch-size", "8"]);
    let text = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["schema"], "dpmld-metrics/1");
        assert_eq!(r["epoch"], i);
        for key in ["train_acc", "test_acc", "train_loss", "test_loss", "macro_f1"] {
            let v = r[key].as_f64().unwrap();
            assert!(v.is_finite() && v >= 0.0, "{key}={v}");
        }
        assert_eq!(r["mean_w"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn config_file_values_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, format!("# run settings\ndata={data}\nepochs=1\nlr_p=0.02\nd_feat=8\n")).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", &s(&cfg), "--out", &s(&run), "--lr-p", "0.05"]);
    let snap = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snap.contains("epochs=1\n"));
    assert!(snap.contains("lr_p=0.05\n"));
    assert!(snap.contains("d_feat=8\n"));
    assert_eq!(fs::read_to_string(run.join("allocation.csv")).unwrap().lines().count(), 1 + 24);
}

#[test]
fn uniform_and_non_private_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let u = dir.path().join("u");
    ok(&["train", "--data", &data, "--out", &s(&u), "--epochs", "1", "--uniform-mu", "0.3"]);
    let audit = fs::read_to_string(u.join("audit.txt")).unwrap();
    assert!(audit.contains("scheme=uniform mu=0.3"), "{audit}");
    let np = dir.path().join("np");
    ok(&["train", "--data", &data, "--out", &s(&np), "--epochs", "1", "--non-private"]);
    assert!(fs::read_to_string(np.join("audit.txt")).unwrap().contains("claimed_eps=inf"));
    let both = ["train", "--data", &data, "--out", &s(&np), "--non-private", "--uniform-mu", "0.3"];
    assert_eq!(code(&both), 2);
}

#[test]
fn allocate_prints_budget_split() {
    let out = ok(&["allocate", "--epsilon", "1", "--w", "0.5,0.1"]);
    assert!(out.contains("2.71828183"), "{out}");
    let rows: Vec<Vec<&str>> = out.lines().skip(2).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], ["0.500000000", "1.48988013", "0.671194939", "2.71828183"]);
    assert_eq!(rows[1][3], "2.71828183");
}

#[test]
fn audit_reports_tight_budget() {
    for (eps, expect) in [("1", 1.0), ("0.1", 0.1)] {
        let out = ok(&["audit", "--epsilon", eps]);
        let field = |k: &str| {
            out.lines()
                .find_map(|l| l.strip_prefix(k))
                .unwrap_or_else(|| panic!("{k} missing"))
                .to_string()
        };
        let max: f64 = field("max_measured=").parse().unwrap();
        assert!((max - expect).abs() < 1e-9);
        assert_eq!(field("violations="), "0");
        assert_eq!(field("entries="), (9 * 441).to_string());
        assert!(field("max_at=").starts_with("(1, 0)") || field("max_at=").starts_with("(0, 1)"));
    }
}

#[test]
fn audit_with_monte_carlo_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("audit.txt");
    let args = ["audit", "--pairs", "worst", "--w", "0.5", "--mc-draws", "100000", "--out", &s(&out)];
    let stdout = ok(&args);
    assert!(stdout.contains("mc_disagreements=0"), "{stdout}");
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("f1,")).skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().filter(|r| !r.ends_with(",,,,")).count(), 1);
}

#[test]
fn extended_pairs_need_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.txt");
    fs::write(&pairs, "# wide\n2,-1\n1,0\n").unwrap();
    assert_eq!(code(&["audit", "--pairs", &s(&pairs)]), 3);
    let out = ok(&["audit", "--pairs", &s(&pairs), "--w", "0.5", "--extended"]);
    assert!(out.contains("extended_pairs=1"));
    assert!(out.contains("violations=0"));
}

#[test]
fn report_splits_allocation_by_block() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--out", &s(&run), "--epochs", "1"]);
    let out = ok(&["report", "--run", &s(&run)]);
    let alloc = fs::read_to_string(run.join("allocation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = alloc.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for block in ["eeg", "om", "cm"] {
        let text = fs::read_to_string(run.join(format!("report_{block}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().skip(1).collect();
        let src: Vec<&Vec<&str>> = rows.iter().filter(|r| r[1] == block).collect();
        assert_eq!(lines.len(), src.len());
        for (line, r) in lines.iter().zip(&src) {
            assert_eq!(*line, format!("{},{},{},{}", r[2], r[3], r[5], r[6]));
        }
        let mean_w = src.iter().map(|r| r[3].parse::<f64>().unwrap()).sum::<f64>() / src.len() as f64;
        let printed = out.lines().find(|l| l.starts_with(block)).unwrap();
        let got: f64 = printed.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((got - mean_w).abs() < 5e-5, "{printed}");
    }
}

#[test]
fn benchmark_table_on_a_tiny_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let csv = dir.path().join("bench.csv");
    let args = [
        "benchmark", "--data", &data, "--epsilons", "1", "--mus", "0.2,0.6", "--seeds", "2",
        "--epochs", "1", "--out", &s(&csv),
    ];
    let out = ok(&args);
    let table = fs::read_to_string(&csv).unwrap();
    assert!(out.starts_with(&table));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "scheme,epsilon,mu,seeds,acc_mean,acc_sd,f1_mean,f1_sd");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("non-private,inf,"));
    assert!(rows[2].starts_with("element-wise,1,,2,"));
    assert!(rows[3].starts_with("uniform,1,0.2,2,") || rows[3].starts_with("uniform,1,0.6,2,"));
    assert!(out.contains("check element-wise >= uniform at epsilon 1"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = s(&dir.path().join("r"));
    assert_eq!(code(&["train", "--data", "/nonexistent", "--out", &out]), 3);
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--epsilon=-1"]), 2);
    assert_eq!(code(&["train", "--out", &out]), 2);
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--momentum", "1.5"]), 2);
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "epochs=1\nunknown_key=3\n").unwrap();
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--config", &s(&bad)]), 2);
    fs::write(&bad, "epochs=many\n").unwrap();
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--config", &s(&bad)]), 2);
    assert_eq!(code(&["report", "--run", "/nonexistent"]), 3);
    assert_eq!(code(&["allocate", "--epsilon", "0"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["--help"]), 0);
    // a file where the run directory should go
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    assert_eq!(code(&["train", "--data", &data, "--out", &s(&blocker.join("x")), "--epochs", "0"]), 3);
}

#[test]
fn audit_against_a_smaller_claim_exits_four() {
    let out = dpmld(&["audit", "--epsilon", "1", "--claim", "0.5", "--pairs", "worst", "--w", "0.5"]);
    assert_eq!(out.status.code(), Some(4));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("claimed_eps=0.5") && stdout.contains("violations=2"), "{stdout}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("audit violation"));
}
