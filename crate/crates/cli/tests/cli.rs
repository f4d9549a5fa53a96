use std::path::Path;
use std::process::{Command, Output};

fn ldaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldaf")).args(args).env_remove("LDAF_THREADS").output().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).to_string();
    text.lines().last().unwrap_or_default().to_string()
}

const SMALL: &[&str] = &[
    "--set",
    "dataset.m=300",
    "--set",
    "dataset.dim=3",
    "--set",
    "model.n_nodes=3",
    "--set",
    "prior.steps=10",
    "--set",
    "posterior.alternations=1",
    "--set",
    "posterior.n_points=64",
    "--set",
    "certify.n_points=256",
    "--set",
    "bench.n_data=5",
    "--set",
    "bench.mc_reference_points=20000",
    "--set",
    "bench.point_counts=[64, 128]",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let model = dir.path().join("model");
    let (data_s, model_s) = (path(&data), path(&model));

    let out = ldaf(&with_small(&["gen-data", "--out", data_s]));
    assert!(out.status.success(), "{}", stderr_line(&out));
    let csv = std::fs::read_to_string(&data).unwrap();
    assert!(csv.starts_with("label,f1,f2,f3\n"));
    assert!(!csv.contains('\r'));

    let out = ldaf(&with_small(&["train-prior", "--data", data_s, "--out-model", model_s]));
    assert!(out.status.success(), "{}", stderr_line(&out));
    assert!(String::from_utf8_lossy(&out.stderr).contains("splits: train="));
    let log = std::fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,error\n"));
    assert_eq!(log.lines().count(), 11);

    let out = ldaf(&with_small(&["train-posterior", "--data", data_s, "--model", model_s]));
    assert!(out.status.success(), "{}", stderr_line(&out));
    let trace = std::fs::read_to_string(model.join("bound_trace.csv")).unwrap();
    assert!(trace.starts_with("alternation,lambda,surrogate_risk,kl,bound\n"));

    let out = ldaf(&with_small(&["certify", "--data", data_s, "--model", model_s, "--epsilon", "0.1", "0.2"]));
    assert!(out.status.success(), "{}", stderr_line(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("deterministic test error"));
    assert!(table.contains("certificate (eps=0.1)"));
    for eps in ["0.1", "0.2"] {
        let text = std::fs::read_to_string(model.join(format!("certificate_eps{eps}.txt"))).unwrap();
        let cert = ldaf_core::pacbayes::Certificate::parse(&text).unwrap();
        assert!(cert.verify().unwrap() <= 1e-12);
        assert_eq!(cert.epsilon.to_string(), eps);
    }

    let out = ldaf(&with_small(&["evaluate", "--data", data_s, "--model", model_s, "--mode", "deterministic"]));
    assert!(out.status.success(), "{}", stderr_line(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("deterministic"));

    let bench = dir.path().join("bench.csv");
    let out = ldaf(&with_small(&["bench-integration", "--data", data_s, "--model", model_s, "--out", path(&bench)]));
    assert!(out.status.success(), "{}", stderr_line(&out));
    let csv = std::fs::read_to_string(&bench).unwrap();
    assert!(csv.starts_with("method,n_points,datum_id,abs_error\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 5);
}

#[test]
fn failures_print_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 6] = [
        (&["evaluate", "--model", "/nonexistent/model"], "error[missing-file]"),
        (&["no-such-command"], "error[usage]"),
        (&["certify", "--epsilon", "abc", "--model", "m"], "error[usage]"),
        (&["gen-data", "--out", "x.bin", "--set", "model.depth=2"], "error[config]"),
        (&["gen-data", "--out", "x.bin", "--set", "certify.epsilon=[0]"], "error[config]"),
        (&["gen-data", "--out", "x.bin", "--threads", "0"], "error[argument]"),
    ];
    for (args, prefix) in cases {
        let out = Command::new(env!("CARGO_BIN_EXE_ldaf")).args(args).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(prefix), "{err}");
    }

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"LDAF\x02\x00\x00\x00").unwrap();
    let model = dir.path().join("m");
    let out = ldaf(&["train-prior", "--data", path(&bad), "--out-model", path(&model)]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[format]"));
}

#[test]
fn thread_count_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ldaf"))
        .args(["gen-data", "--out", "x.bin"])
        .env("LDAF_THREADS", "0")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(stderr_line(&out).starts_with("error[argument]"));
    let out = Command::new(env!("CARGO_BIN_EXE_ldaf"))
        .args(["gen-data", "--out", "x.bin"])
        .env("LDAF_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[dataset]\nm = 50\ndim = 2\nc = 2\n").unwrap();
    let out_path = dir.path().join("d.csv");
    let out = ldaf(&["gen-data", "--config", path(&cfg), "--set", "dataset.m=70", "--out", path(&out_path)]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(csv.lines().count(), 71);
    assert!(csv.starts_with("label,f1,f2\n"));
}
