//! Server and clients as separate processes over loopback TCP.

use std::net::TcpListener;
use std::process::{Command, Stdio};

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn multi_process_run_with_dropout() {
    let bin = env!("CARGO_BIN_EXE_chronos");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cohort.toml");
    std::fs::write(
        &config,
        "n = 4\nt = 2\ndim = 64\nround_timeout_ms = 400\nidle_timeout_ms = 5000\nseed = 9\n",
    )
    .unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let json = dir.path().join("server.jsonl");
    let server = Command::new(bin)
        .args(["server", "--listen", &addr, "--config"])
        .arg(&config)
        .args(["--rounds", "6", "--epoch-len", "3", "--mode", "chronos", "--json"])
        .arg(&json)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let clients: Vec<_> = (1..=4)
        .map(|i| {
            let dropout = if i == 4 { "permanent:2-6" } else { "none" };
            Command::new(bin)
                .args(["client", "--id", &format!("{i:016x}"), "--server", &addr, "--config"])
                .arg(&config)
                .args(["--dropout", dropout, "--state"])
                .arg(dir.path().join(format!("dev{i}")))
                .stdout(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let out = server.wait_with_output().unwrap();
    let table = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{table}");
    for c in clients {
        assert!(c.wait_with_output().unwrap().status.success());
    }
    let lines = std::fs::read_to_string(&json).unwrap();
    let rounds: Vec<serde_json::Value> = lines
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v["type"] == "round")
        .collect();
    assert_eq!(rounds.len(), 6, "{table}");
    assert_eq!(rounds[0]["outcome"], "COMPLETE");
    for r in &rounds[1..] {
        assert_eq!(r["outcome"], "RECOVERED(1)", "{table}");
        assert_eq!(r["field_mismatches"], 0);
    }
}
