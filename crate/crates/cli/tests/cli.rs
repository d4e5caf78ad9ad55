use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn owr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owr")).args(args).env("OWR_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = owr(args);
    assert!(out.status.success(), "owr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn small_plan(dir: &Path) {
    ok(&[
        "synth", "--out-dir", dir.to_str().unwrap(), "--train-per-class", "40", "--test-per-class", "15",
        "--capacity", "80", "--seeds", "2", "--dim", "8",
    ]);
}

#[test]
fn module_commands_chain() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    small_plan(dir);

    ok(&["exemplar", "select", "--in", &p(dir, "train_0.owr"), "--capacity", "40", "--out", &p(dir, "buf.owr")]);
    let sidecar = json_file(&dir.join("buf.json"));
    assert_eq!(sidecar["capacity"], 40);
    assert_eq!(sidecar["per_class_quota"]["1"], 10);

    ok(&["classify", "fit", "--buffer", &p(dir, "buf.owr"), "--kind", "ncm", "--temperature", "2", "--out", &p(dir, "m.owr")]);
    ok(&["classify", "predict", "--model", &p(dir, "m.owr"), "--in", &p(dir, "test_0.owr"), "--out", &p(dir, "pred.json")]);
    let report: Value = serde_json::from_str(&ok(&[
        "metrics", "report", "--truth", &p(dir, "test_0.owr"), "--pred", &p(dir, "pred.json"), "--known-classes", "1,2,3,4",
        "--kind", "acc",
    ]))
    .unwrap();
    assert!(report["acc"].as_f64().unwrap() > 0.95);

    let cal: Value = serde_json::from_str(&ok(&[
        "osr", "calibrate", "--buffer", &p(dir, "buf.owr"), "--grid-decades", "-2:6", "--kind", "ncm", "--temperature", "2",
    ]))
    .unwrap();
    assert_eq!(cal["curve"].as_array().unwrap().len(), 9);
    let alpha = cal["alpha"].as_f64().unwrap().to_string();

    ok(&[
        "osr", "predict", "--model", &p(dir, "m.owr"), "--in", &p(dir, "train_1.owr"), "--alpha", &alpha, "--out-known",
        &p(dir, "acc.owr"), "--out-rejected", &p(dir, "rej.owr"), "--decisions", &p(dir, "dec.json"),
    ]);
    let dec = json_file(&dir.join("dec.json"));
    let rejected = dec.as_object().unwrap().values().filter(|v| *v == 0).count();
    assert!(rejected >= 70, "{rejected} of 80 novel rows rejected");

    let est: Value = serde_json::from_str(&ok(&[
        "discover", "estimate", "--buffer", &p(dir, "buf.owr"), "--rejected", &p(dir, "rej.owr"), "--kmax", "100",
    ]))
    .unwrap();
    assert_eq!(est["k"], 6);

    ok(&["discover", "run", "--buffer", &p(dir, "buf.owr"), "--rejected", &p(dir, "rej.owr"), "--out", &p(dir, "part.json")]);
    let part = json_file(&dir.join("part.json"));
    assert_eq!(part["novel"].as_array().unwrap().len(), 2);
    assert_eq!(part["centroids"], "part.centroids.owr");
    ok(&["discover", "run", "--buffer", &p(dir, "buf.owr"), "--rejected", &p(dir, "rej.owr"), "--k", "7", "--out", &p(dir, "p7.json")]);
    assert_eq!(json_file(&dir.join("p7.json"))["k"], 7);

    ok(&["annotate", "oracle", "--zhat", &p(dir, "part.json"), "--truth", &p(dir, "train_1.owr"), "--out", &p(dir, "z.owr")]);
    let inspect: Value = serde_json::from_str(&ok(&["ingest", "inspect", &p(dir, "z.owr")])).unwrap();
    let counts = inspect["class_counts"].as_object().unwrap();
    assert_eq!(counts.keys().collect::<Vec<_>>(), ["5", "6"]);
    let report: Value = serde_json::from_str(&ok(&[
        "metrics", "report", "--truth", &p(dir, "z.owr"), "--pred", &p(dir, "train_1.owr"), "--known-classes", "1,2,3,4",
        "--kind", "acc",
    ]))
    .unwrap();
    assert_eq!(report["acc"], 1.0);

    // Novel-only truth has no known population to score.
    let out = owr(&[
        "metrics", "report", "--truth", &p(dir, "train_1.owr"), "--pred", &p(dir, "dec.json"), "--known-classes", "1,2,3,4",
        "--kind", "hca",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("HCA needs both"));
}

#[test]
fn gen_blobs_and_inspect() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "b.owr");
    ok(&[
        "ingest", "gen-blobs", "--classes", "3", "--dim", "4", "--per-class", "5", "--sep", "10", "--sigma", "1", "--seed",
        "7", "--out", &out, "--dtype", "f32",
    ]);
    let v: Value = serde_json::from_str(&ok(&["ingest", "inspect", &out])).unwrap();
    assert_eq!(v["header"]["count"], 15);
    assert_eq!(v["header"]["dtype"], "f32");
    assert_eq!(v["header"]["metadata"]["separation_ratio"], 10.0);
    assert_eq!(v["class_counts"]["2"], 5);
}

#[test]
fn run_and_sweep_write_outputs() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    small_plan(dir);
    let stdout = ok(&["run", "--plan", &p(dir, "plan.json"), "--seeds", "2", "--out-dir", &p(dir, "out")]);
    assert!(stdout.contains("report:"));
    let report = json_file(&dir.join("out/report.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["aggregate"].as_array().unwrap().len(), 4);
    let again = tempfile::tempdir().unwrap();
    ok(&["run", "--plan", &p(dir, "plan.json"), "--seeds", "2", "--out-dir", again.path().to_str().unwrap()]);
    assert_eq!(std::fs::read(dir.join("out/report.json")).unwrap(), std::fs::read(again.path().join("report.json")).unwrap());

    ok(&["run", "--plan", &p(dir, "plan.json"), "--seeds", "1", "--variant", "il-e", "--out-dir", &p(dir, "ile")]);
    let ile = json_file(&dir.join("ile/report.json"));
    assert_eq!(ile["variant"], "il_e");
    assert_eq!(ile["runs"][0]["phases"][0]["hna"], 0.0);

    ok(&[
        "sweep", "--plan", &p(dir, "plan.json"), "--axis", "alpha", "--values", "1e-10,1000", "--seeds", "1", "--out",
        &p(dir, "s.csv"),
    ]);
    let csv = std::fs::read_to_string(dir.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("axis,value,seed"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = owr(&["run", "--plan", "/nonexistent/plan.json", "--out-dir", "/tmp/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("plan"));
    let out = owr(&["sweep", "--plan", "p.json", "--axis", "gamma", "--values", "1"]);
    assert!(!out.status.success());
    let out = owr(&["osr", "calibrate", "--buffer", "b.owr", "--grid-decades", "3:1"]);
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_owr")).args(["ingest", "inspect", "x"]).env("OWR_THREADS", "many").output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("OWR_THREADS"));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(port: u16, method: &str, path: &str, body: &str) -> Option<(u16, Value)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).ok()?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).ok()?;
    let status = resp.split_whitespace().nth(1)?.parse().ok()?;
    let json = resp.split("\r\n\r\n").nth(1).and_then(|b| serde_json::from_str(b).ok()).unwrap_or(Value::Null);
    Some((status, json))
}

#[test]
fn serve_exposes_session() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let zhat = p(dir, "z.owr");
    ok(&[
        "ingest", "gen-blobs", "--classes", "2", "--dim", "3", "--per-class", "4", "--sep", "10", "--sigma", "1", "--out",
        &zhat,
    ]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_owr"))
            .args(["annotate", "serve", "--partition", &zhat, "--port", &port.to_string(), "--out-dir", &p(dir, "out")])
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(20);
    let snap = loop {
        if let Some(r) = http(port, "GET", "/api/v1/sessions/s1", "") {
            break r;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(snap.0, 200);
    assert_eq!(snap.1["progress"]["unlabeled_clusters"], serde_json::json!([1, 2]));
    for c in [1, 2] {
        let (s, _) = http(port, "POST", "/api/v1/sessions/s1/edits", &format!(r#"{{"op":"label","cluster":{c},"class_id":{}}}"#, c + 10)).unwrap();
        assert_eq!(s, 200);
    }
    let (s, v) = http(port, "POST", "/api/v1/sessions/s1/commit", "").unwrap();
    assert_eq!(s, 200, "{v}");
    assert!(Path::new(v["archive_path"].as_str().unwrap()).exists());
}
