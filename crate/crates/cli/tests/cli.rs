//! End-to-end runs of the `skillroute` binary on small simulated worlds.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_skillroute");

/// Three agents, bundles vary only the terminal mode, small query sets.
const SMALL: &str = r#"
seed = 3

[world]
agents = 3

[data]
train_queries = 40
validation_queries = 30
test_queries = 30
designated_modes = ["answer"]
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(self.path("config.toml"))
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> Value {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        read_json(&self.path(out).join("report.json"))
    }

    /// simulate → learn, returning the learned handbook path.
    fn learned(&self) -> PathBuf {
        self.ok("sim", &["simulate"]);
        let bundles = self.path("sim/bundles.jsonl");
        self.ok("learn", &["learn", "--bundles", bundles.to_str().unwrap()]);
        self.path("learn/handbook.json")
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn exit_code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

// ── simulate ────────────────────────────────────────────────────────────

#[test]
fn one_query_three_agents_gives_three_trajectories() {
    let sb = Sandbox::new(SMALL);
    let r = sb.ok("o", &["simulate", "--queries", "1"]);
    assert_eq!(r["command"], "simulate");
    assert_eq!(r["report"]["queries"], 1);
    assert_eq!(r["report"]["trajectories"], 3);
    let log = fs::read_to_string(sb.path("o/trajectories.jsonl")).unwrap();
    let ids: std::collections::BTreeSet<String> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["trajectory"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 3, "{ids:?}");
}

#[test]
fn same_seed_same_bytes() {
    let sb = Sandbox::new(SMALL);
    sb.ok("a", &["simulate"]);
    sb.ok("b", &["simulate"]);
    for f in ["bundles.jsonl", "trajectories.jsonl", "world.json", "queries.json", "handbook.json", "report.json"] {
        let (a, b) = (fs::read(sb.path("a").join(f)).unwrap(), fs::read(sb.path("b").join(f)).unwrap());
        assert_eq!(a, b, "{f} differs between runs");
    }
    sb.ok("c", &["--seed", "4", "simulate"]);
    assert_ne!(fs::read(sb.path("a/bundles.jsonl")).unwrap(), fs::read(sb.path("c/bundles.jsonl")).unwrap());
}

// ── learn / refine / select ─────────────────────────────────────────────

#[test]
fn learn_bumps_version_and_adds_skills() {
    let sb = Sandbox::new(SMALL);
    let h = sb.learned();
    let r = read_json(&sb.path("learn/report.json"));
    assert_eq!(r["input_handbook_version"], 1);
    assert_eq!(r["output_handbook_version"], 2);
    let hb = read_json(&h);
    assert_eq!(hb["version"], 2);
    assert!(!hb["skills"].as_array().unwrap().is_empty());
    assert!(!hb["profiles"].as_array().unwrap().is_empty());

    let bundles = sb.path("sim/bundles.jsonl");
    let r = sb.ok("refine", &["--handbook", h.to_str().unwrap(), "refine", "--bundles", bundles.to_str().unwrap()]);
    assert_eq!(r["input_handbook_version"], 2);
    assert!(sb.path("refine/handbook.json").exists());
}

#[test]
fn select_sweep_writes_one_report_per_lambda() {
    let sb = Sandbox::new(SMALL);
    let h = sb.learned();
    let r = sb.ok(
        "sel",
        &["--handbook", h.to_str().unwrap(), "--lambda", "0", "--lambda", "0.5", "--lambda", "2", "select"],
    );
    for l in ["0", "0.5", "2"] {
        for ext in ["json", "csv"] {
            assert!(sb.path("sel").join(format!("select_lambda_{l}.{ext}")).exists());
        }
        assert!(sb.path("sel").join(format!("handbook_lambda_{l}.json")).exists());
    }
    let sweep = r["report"]["sweep"].as_array().unwrap();
    assert_eq!(sweep.len(), 3);
    let costs: Vec<f64> = sweep.iter().map(|s| s["winner_cost"].as_f64().unwrap()).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "winner costs {costs:?}");
}

// ── route / eval ────────────────────────────────────────────────────────

#[test]
fn dry_run_contacts_no_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let port = listener.local_addr().unwrap().port();
    let mut endpoints = String::new();
    for a in ["agent0", "agent1", "agent2"] {
        endpoints += &format!(
            "\n[[gateway.endpoints]]\nagent_id = \"{a}\"\nbase_url = \"http://127.0.0.1:{port}/{a}\"\ntimeout_ms = 200\nreference_cost = 1.0\nmodes = [\"search\", \"code\", \"answer\"]\n"
        );
    }
    let sb = Sandbox::new(&format!("{SMALL}\n[gateway]\n{endpoints}"));
    let h = sb.learned();
    let r = sb.ok("dry", &["--handbook", h.to_str().unwrap(), "--dry-run", "route", "--split", "test"]);
    assert_eq!(r["report"]["dry_run"], true);
    assert_eq!(r["report"]["queries"], 30);
    let decisions = fs::read_to_string(sb.path("dry/decisions.jsonl")).unwrap();
    assert!(decisions.lines().count() >= 30);
    assert!(!sb.path("dry/trajectories.jsonl").exists());
    assert!(listener.accept().is_err(), "dry run opened a connection");
}

#[test]
fn eval_reports_entropy_per_strategy() {
    let sb = Sandbox::new(SMALL);
    let h = sb.learned();
    let hs = h.to_str().unwrap();
    sb.ok("learned", &["--handbook", hs, "route", "--strategy", "handbook"]);
    sb.ok("fixed", &["--handbook", hs, "route", "--strategy", "best-overall"]);
    let learned = sb.path("learned/trajectories.jsonl");
    let fixed = sb.path("fixed/trajectories.jsonl");
    let r = sb.ok(
        "eval",
        &[
            "eval",
            "--trajectories",
            &format!("learned={}", learned.display()),
            "--trajectories",
            &format!("fixed={}", fixed.display()),
        ],
    );
    assert_eq!(r["input_handbook_version"], 2);
    let methods = r["report"]["methods"].as_array().unwrap();
    let entropy = |m: &str| methods.iter().find(|x| x["method"] == m).unwrap()["entropy_bits"].as_f64().unwrap();
    assert_eq!(entropy("fixed"), 0.0);
    assert!(entropy("learned") > 0.0);
    let csv = fs::read_to_string(sb.path("eval/pareto.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

// ── Failures ────────────────────────────────────────────────────────────

#[test]
fn bad_config_exits_2() {
    let sb = Sandbox::new("seed = 1\nunknown_key = true\n");
    let o = sb.run("o", &["simulate"]);
    assert_eq!(exit_code(&o), 2);
    assert_eq!(stderr_json(&o)["error"], "config");

    let sb = Sandbox::new(SMALL);
    let o = sb.run("o", &["--lambda-c", "-1", "simulate"]);
    assert_eq!(exit_code(&o), 2);
}

#[test]
fn missing_data_exits_3() {
    let sb = Sandbox::new(SMALL);
    let o = sb.run("o", &["learn", "--bundles", "/nonexistent/bundles.jsonl"]);
    assert_eq!(exit_code(&o), 3);
    assert_eq!(stderr_json(&o)["error"], "data");

    fs::write(sb.path("broken.json"), "{ not json").unwrap();
    let o = sb.run("o", &["--handbook", sb.path("broken.json").to_str().unwrap(), "route"]);
    assert_eq!(exit_code(&o), 3);
}

#[test]
fn unroutable_handbook_exits_4() {
    let sb = Sandbox::new(SMALL);
    let h = sb.learned();
    let mut hb = read_json(&h);
    for m in hb["modes"].as_array_mut().unwrap() {
        m["allowed_agents"] = Value::Array(vec![]);
    }
    hb["profiles"] = Value::Array(vec![]);
    let p = sb.path("empty_agents.json");
    fs::write(&p, serde_json::to_string(&hb).unwrap()).unwrap();
    let o = sb.run("o", &["--handbook", p.to_str().unwrap(), "route"]);
    assert_eq!(exit_code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stderr_json(&o)["error"], "environment");
}
