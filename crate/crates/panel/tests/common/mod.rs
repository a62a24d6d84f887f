#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use serde_json::Value;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pump")
}

pub fn fixture_config() -> PathBuf {
    fixture_dir().join("session.yaml")
}

/// The fixture config as a JSON request body.
pub fn fixture_body() -> Value {
    let text = std::fs::read_to_string(fixture_config()).unwrap();
    serde_yaml::from_str(&text).unwrap()
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fmea-panel"))
}

pub fn run_cli(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().expect("spawn fmea-panel")
}

/// Runs the fixture config to finalization into `data_dir`; returns the session directory.
pub fn run_fixture(data_dir: &Path) -> PathBuf {
    let out = run_cli(&[
        "run",
        "--config",
        fixture_config().to_str().unwrap(),
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--session",
        "fixture",
    ]);
    assert!(out.status.success(), "run failed: {}", String::from_utf8_lossy(&out.stderr));
    data_dir.join("fixture")
}

pub struct Server {
    pub base: String,
    pub client: reqwest::blocking::Client,
    _dir: tempfile::TempDir,
}

impl Server {
    pub fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::start_in(dir)
    }

    pub fn start_in(dir: tempfile::TempDir) -> Self {
        let addr: SocketAddr = fmea_panel::service::spawn("127.0.0.1:0", dir.path(), &fixture_dir()).unwrap();
        let client = reqwest::blocking::Client::builder().timeout(Duration::from_secs(60)).build().unwrap();
        let base = format!("http://{addr}");
        for _ in 0..100 {
            if client.get(format!("{base}/health")).send().is_ok() {
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Self { base, client, _dir: dir }
    }

    pub fn data_dir(&self) -> &Path {
        self._dir.path()
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub fn get(&self, path: &str) -> reqwest::blocking::Response {
        self.client.get(self.url(path)).send().unwrap()
    }

    pub fn post(&self, path: &str, body: &Value) -> reqwest::blocking::Response {
        self.client.post(self.url(path)).json(body).send().unwrap()
    }

    pub fn post_empty(&self, path: &str) -> reqwest::blocking::Response {
        self.client.post(self.url(path)).send().unwrap()
    }

    pub fn create(&self, body: &Value) -> String {
        let resp = self.post("/sessions", body);
        assert_eq!(resp.status().as_u16(), 201);
        let v: Value = resp.json().unwrap();
        v["session_id"].as_str().unwrap().to_string()
    }

    pub fn advance(&self, id: &str) -> Value {
        let resp = self.post_empty(&format!("/sessions/{id}/advance"));
        assert_eq!(resp.status().as_u16(), 200, "advance failed");
        resp.json().unwrap()
    }

    pub fn banks(&self, id: &str, kind: &str) -> Vec<Value> {
        let v: Value = self.get(&format!("/sessions/{id}/banks?kind={kind}")).json().unwrap();
        v["records"].as_array().unwrap().clone()
    }
}
