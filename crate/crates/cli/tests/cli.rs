use std::path::PathBuf;
use std::process::{Command, Output};

fn dsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsm")).args(args).output().unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn scratch(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("dsm-cli-{}-{name}", std::process::id()))
}

#[test]
fn check_flags_fixture_with_exit_status() {
    let out = dsm(&["check", &fixture("early_transfer.trace")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("VIOLATION slice 5"));
}

#[test]
fn sim_trace_round_trips_through_check() {
    let trace = scratch("run.trace");
    let t = trace.to_str().unwrap();
    let out = dsm(&["sim", "--mix", "lock", "--seed", "9", "--trace", t, "--check", "--oracle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("no violations") && text.contains("oracle image matches"), "{text}");
    let out = dsm(&["check", t]);
    assert!(out.status.success());
    std::fs::remove_file(trace).unwrap();
}

#[test]
fn bench_writes_csv_and_checks() {
    let csv = scratch("bench.csv");
    let out = dsm(&[
        "bench",
        "--gas-size",
        "1M",
        "--page-sizes",
        "4K,16K",
        "--out",
        csv.to_str().unwrap(),
        "--check",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2 * 4 * 4 + 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("PASS latency-cache-invariance"));
    std::fs::remove_file(csv).unwrap();
}

#[test]
fn config_file_then_flags() {
    let cfg = scratch("gas.conf");
    std::fs::write(&cfg, "gas_size = 512K\nservers = 1\nslice = 50us\n").unwrap();
    let c = cfg.to_str().unwrap();
    let out = dsm(&["bench", "--config", c, "--page-sizes", "4K", "--cache-sizes", "64K"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("read_latency,4096,65536,sim,"));
    let out = dsm(&["bench", "--config", c, "--page-sizes", "4K", "--cache-sizes", "3K"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_file(cfg).unwrap();
}

#[test]
fn serve_rejects_compute_id() {
    let out = dsm(&["serve", "--node", "c0", "--hosts", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
}
