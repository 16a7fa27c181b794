use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nslab");

fn nslab(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("NETSPECTRE_LAB_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run nslab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// A quiet network so a short run calibrates and decides every bit.
fn quiet_config(dir: &Path) -> String {
    let p = dir.join("lab.conf");
    fs::write(&p, "[latency]\nbase_ns = 10000\nsigma_ns = 200\n").unwrap();
    p.to_str().unwrap().to_string()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn leak(conf: &str, out: &Path, seed: &str) -> Output {
    nslab(&[
        "--config", conf, "--seed", seed, "leak", "--bits", "8", "--n", "2000",
        "--out", out.to_str().unwrap(),
    ])
}

#[test]
fn same_seed_gives_identical_files() {
    let t = tempfile::tempdir().unwrap();
    let conf = quiet_config(t.path());
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    assert_eq!(code(&leak(&conf, &a, "7")), 0);
    assert_eq!(code(&leak(&conf, &b, "7")), 0);
    assert_eq!(code(&leak(&conf, &c, "8")), 0);
    let (fa, fb) = (dir_contents(&a), dir_contents(&b));
    assert!(fa.iter().any(|(n, _)| n == "summary.json"));
    assert!(fa.iter().any(|(n, _)| n == "bits.csv"));
    assert!(fa.iter().any(|(n, _)| n == "bit_007_hist.csv"));
    assert_eq!(fa, fb);
    assert_ne!(fa, dir_contents(&c));
}

#[test]
fn leak_recovers_default_secret_byte() {
    let t = tempfile::tempdir().unwrap();
    let conf = quiet_config(t.path());
    let out = t.path().join("o");
    let o = leak(&conf, &out, "1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["bytes_hex"], "4e");
    assert_eq!(s["error_rate"], 0.0);
    assert_eq!(s["requests"]["LEAK_CACHE"], 8 * 2000 * 11);
}

#[test]
fn seed_from_environment_matches_flag() {
    let t = tempfile::tempdir().unwrap();
    let conf = quiet_config(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&leak(&conf, &a, "42")), 0);
    let o = Command::new(BIN)
        .args(["--config", &conf, "leak", "--bits", "8", "--n", "2000", "--out"])
        .arg(&b)
        .env("NETSPECTRE_LAB_SEED", "42")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    let out = out.to_str().unwrap();
    let bad = t.path().join("bad.conf");
    fs::write(&bad, "[victim]\nsecrt_hex = 00\n").unwrap();
    let o = nslab(&["--config", bad.to_str().unwrap(), "leak", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("secrt_hex"));

    let range = t.path().join("range.conf");
    fs::write(&range, "[victim]\naslr_space_bits = 8\nvalid_aslr_offset = 0x100\n").unwrap();
    assert_eq!(code(&nslab(&["--config", range.to_str().unwrap(), "config"])), 2);

    assert_eq!(code(&nslab(&["leak", "--out", out, "--preset", "moon"])), 2);
    assert_eq!(code(&nslab(&["leak", "--out", out, "--n", "0"])), 2);
    assert_eq!(code(&nslab(&["--config", "/nonexistent/lab.conf", "config"])), 2);
}

#[test]
fn unreachable_target_exits_3() {
    // Bind then drop to find a port nobody is listening on.
    let port = std::net::UdpSocket::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let t = tempfile::tempdir().unwrap();
    let target = format!("127.0.0.1:{port}");
    let o = nslab(&["leak", "--target", &target, "--out", t.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn indistinguishable_calibration_exits_4() {
    let t = tempfile::tempdir().unwrap();
    let o = nslab(&[
        "leak", "--preset", "cloud", "--n", "1000", "--bits", "1", "--out",
        t.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibration"));
}

#[test]
fn config_round_trips_through_render() {
    let t = tempfile::tempdir().unwrap();
    let conf = t.path().join("c.conf");
    fs::write(&conf, "[victim]\nsecret_value = 7\n[latency]\npreset = cloud\n").unwrap();
    let o = nslab(&["--config", conf.to_str().unwrap(), "config"]);
    assert_eq!(code(&o), 0);
    let rendered = t.path().join("r.conf");
    fs::write(&rendered, &o.stdout).unwrap();
    let o2 = nslab(&["--config", rendered.to_str().unwrap(), "config"]);
    assert_eq!(o.stdout, o2.stdout);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("secret_value = 7"));
    assert!(text.contains("preset = cloud"));
}

#[test]
fn aslr_and_value_commands() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("a");
    let o = nslab(&[
        "aslr", "--preset", "noiseless", "--space-bits", "12", "--valid-offset", "0xabc",
        "--n", "4", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("offset 0xabc in 12 rounds"));
    assert!(out.join("aslr_rounds.csv").exists());

    let out = t.path().join("v");
    let o = nslab(&[
        "value", "--preset", "noiseless", "--bits", "10", "--secret-value", "777", "--n", "10",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("value 777 in 10 rounds"));
}

#[test]
fn figures_write_csv_and_summary() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().to_str().unwrap();
    assert_eq!(code(&nslab(&["figures", "fig6", "--out", out])), 0);
    let csv = fs::read_to_string(t.path().join("fig6_powerdown.csv")).unwrap();
    assert!(csv.starts_with("idle_ns,measured_penalty_cycles,model_penalty_cycles"));
    assert!(csv.contains("\n750000,183,183\n"));
    assert!(t.path().join("fig6_summary.json").exists());
    assert_eq!(code(&nslab(&["figures", "fig4", "--n", "100", "--out", out])), 0);
    assert_eq!(code(&nslab(&["figures", "fig9", "--out", out])), 2);
}
