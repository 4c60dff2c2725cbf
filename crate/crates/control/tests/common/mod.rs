#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod fixture;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use evodw::api::Background;
use evodw::{load_config, run_cli};
use serde_json::{json, Value};

/// Writes `evodw.json` into `dir` with a logical clock and an ephemeral
/// port; `extra` keys override.
pub fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({"data_dir": "data", "http_port": 0, "clock": "logical"});
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("evodw.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// One call, renderable as an HTTP request or a CLI invocation.
#[derive(Debug, Clone)]
pub enum Op {
    Schema(Value),
    Source(Value),
    Sources,
    Mapping(Value),
    Ingest(String, String),
    Tick,
    Level(u32),
    Records(u32, String),
    Changes(Option<String>),
    Propose(String),
    Options(String),
    Preview(String),
    Apply { change: String, pc: String, params: Vec<(String, String)> },
    Reject(String),
    CreateCube(Value),
    Materialize(String),
    Query(String, Value),
    Export,
    History,
}

pub struct Http {
    pub method: &'static str,
    pub path: String,
    pub body: Vec<u8>,
}

impl Op {
    pub fn http(&self) -> Http {
        let get = |path: String| Http { method: "GET", path, body: Vec::new() };
        let post = |path: String, body: Vec<u8>| Http { method: "POST", path, body };
        let doc = |v: &Value| v.to_string().into_bytes();
        match self {
            Op::Schema(v) => post("/schemas".into(), doc(v)),
            Op::Source(v) => post("/sources".into(), doc(v)),
            Op::Sources => get("/sources".into()),
            Op::Mapping(v) => post("/mappings".into(), doc(v)),
            Op::Ingest(s, b) => post(format!("/sources/{s}/batches"), b.clone().into_bytes()),
            Op::Tick => post("/elt/tick".into(), Vec::new()),
            Op::Level(n) => get(format!("/levels/{n}/datasets")),
            Op::Records(n, d) => get(format!("/levels/{n}/datasets/{d}/records")),
            Op::Changes(None) => get("/changes".into()),
            Op::Changes(Some(s)) => get(format!("/changes?status={s}")),
            Op::Propose(c) => post(format!("/changes/{c}/propose"), Vec::new()),
            Op::Options(c) => get(format!("/changes/{c}/options")),
            Op::Preview(p) => get(format!("/options/{p}/preview")),
            Op::Apply { change, pc, params } => {
                let p: serde_json::Map<String, Value> =
                    params.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
                post(format!("/changes/{change}/options/{pc}/apply"), doc(&json!({"parameters": p})))
            }
            Op::Reject(p) => post(format!("/options/{p}/reject"), Vec::new()),
            Op::CreateCube(v) => post("/cubes".into(), doc(v)),
            Op::Materialize(c) => post(format!("/cubes/{c}/materialize"), Vec::new()),
            Op::Query(c, q) => post(format!("/cubes/{c}/query"), doc(q)),
            Op::Export => get("/metadata/export".into()),
            Op::History => get("/history".into()),
        }
    }

    /// Arguments after the global flags, and what to feed on stdin.
    pub fn cli(&self) -> (Vec<String>, Vec<u8>) {
        let args = |a: &[&str]| a.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let doc = |v: &Value| v.to_string().into_bytes();
        match self {
            Op::Schema(v) => (args(&["schema", "put", "--file", "-"]), doc(v)),
            Op::Source(v) => (args(&["source", "add", "--file", "-"]), doc(v)),
            Op::Sources => (args(&["source", "list"]), Vec::new()),
            Op::Mapping(v) => (args(&["mapping", "put", "--file", "-"]), doc(v)),
            Op::Ingest(s, b) => (args(&["ingest", s]), b.clone().into_bytes()),
            Op::Tick => (args(&["tick"]), Vec::new()),
            Op::Level(n) => (args(&["level", "datasets", &n.to_string()]), Vec::new()),
            Op::Records(n, d) => (args(&["level", "records", &n.to_string(), d]), Vec::new()),
            Op::Changes(None) => (args(&["changes", "list"]), Vec::new()),
            Op::Changes(Some(s)) => (args(&["changes", "list", "--status", s]), Vec::new()),
            Op::Propose(c) => (args(&["changes", "propose", c]), Vec::new()),
            Op::Options(c) => (args(&["options", "list", "--change", c]), Vec::new()),
            Op::Preview(p) => (args(&["options", "preview", p]), Vec::new()),
            Op::Apply { change, pc, params } => {
                let mut a = args(&["apply", "--change", change, "--option", pc]);
                for (k, v) in params {
                    a.push("--param".into());
                    a.push(format!("{k}={v}"));
                }
                (a, Vec::new())
            }
            Op::Reject(p) => (args(&["reject", "--option", p]), Vec::new()),
            Op::CreateCube(v) => (args(&["cube", "create", "--file", "-"]), doc(v)),
            Op::Materialize(c) => (args(&["cube", "materialize", c]), Vec::new()),
            Op::Query(c, q) => (args(&["query", c, "--file", "-"]), doc(q)),
            Op::Export => (args(&["export"]), Vec::new()),
            Op::History => (args(&["history"]), Vec::new()),
        }
    }
}

/// Outcome of one call: success flag, HTTP status (or CLI exit code) and
/// the JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub ok: bool,
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }

    pub fn expect(self) -> Reply {
        assert!(self.ok, "call failed: {} {}", self.status, self.body);
        self
    }
}

pub trait Driver {
    fn run(&mut self, op: &Op) -> Reply;
}

pub struct HttpDriver {
    pub server: Background,
    client: reqwest::blocking::Client,
}

impl HttpDriver {
    pub fn start(config: &Path) -> HttpDriver {
        let cfg = load_config(config).unwrap();
        let engine = Arc::new(cfg.open().unwrap());
        HttpDriver { server: Background::start(engine, 0).unwrap(), client: reqwest::blocking::Client::new() }
    }

    pub fn send(&self, method: &str, path: &str, body: Vec<u8>) -> Reply {
        let url = self.server.url(path);
        let req = match method {
            "GET" => self.client.get(url),
            _ => self.client.post(url).body(body),
        };
        let resp = req.send().unwrap();
        let status = resp.status().as_u16();
        Reply { ok: resp.status().is_success(), status, body: resp.text().unwrap() }
    }
}

impl Driver for HttpDriver {
    fn run(&mut self, op: &Op) -> Reply {
        let h = op.http();
        self.send(h.method, &h.path, h.body)
    }
}

pub struct CliDriver {
    pub config: PathBuf,
}

impl CliDriver {
    pub fn call(&self, args: &[String], stdin: &[u8]) -> evodw::CliOutput {
        let mut argv = vec!["evodw".to_string(), "--config".into(), self.config.display().to_string()];
        argv.extend(args.iter().cloned());
        run_cli(argv, &mut &stdin[..])
    }
}

impl Driver for CliDriver {
    fn run(&mut self, op: &Op) -> Reply {
        let (args, stdin) = op.cli();
        let out = self.call(&args, &stdin);
        Reply { ok: out.code == 0, status: out.code as u16, body: out.stdout.strip_suffix('\n').unwrap_or(&out.stdout).to_string() }
    }
}

pub fn v<T: serde::Serialize>(x: T) -> Value {
    serde_json::to_value(x).unwrap()
}

/// Schema, source, mappings, two batches, four ticks, cube, cuboids.
pub fn populate(d: &mut dyn Driver) {
    use fixture::*;
    for op in [
        Op::Schema(v(raw_schema())),
        Op::Source(v(source())),
        Op::Mapping(v(cleanse())),
        Op::Mapping(v(integrate())),
        Op::Mapping(v(load_star())),
        Op::Ingest("shop".into(), BATCH_1.into()),
        Op::Ingest("shop".into(), BATCH_2.into()),
        Op::Tick,
        Op::Tick,
        Op::Tick,
        Op::Tick,
        Op::CreateCube(v(cube())),
        Op::Materialize("sales_cube".into()),
    ] {
        d.run(&op).expect();
    }
}

pub fn answers(d: &mut dyn Driver) -> Vec<String> {
    fixture::queries()
        .into_iter()
        .map(|q| d.run(&Op::Query(q.cube_id.clone(), v(&q))).expect().body)
        .collect()
}

/// What the additive-evolution scenario observed.
pub struct Additive {
    pub before: Vec<String>,
    pub after: Vec<String>,
    pub detected: Value,
    pub cleansed: Value,
    pub integrated: Value,
    pub later: Value,
    pub history: Value,
    pub export: String,
}

/// Populates, records five answers, lets the source grow a `channel`
/// column, applies PROPAGATE_ADD, re-ticks and records again; finally a row
/// carrying a channel value flows through.
pub fn additive_scenario(d: &mut dyn Driver) -> Additive {
    populate(d);
    let before = answers(d);
    let header = format!("{},channel\n", fixture::HEADER);
    let ingested = d.run(&Op::Ingest("shop".into(), header)).expect().json();
    assert_eq!(ingested["changes"].as_array().unwrap().len(), 1, "{ingested}");
    let detected = d.run(&Op::Changes(Some("PENDING".into()))).expect().json();
    let change = detected[0]["change_id"].as_str().unwrap().to_string();
    let opts = d.run(&Op::Propose(change.clone())).expect().json();
    let pc = opts
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["option_kind"] == "PROPAGATE_ADD")
        .expect("PROPAGATE_ADD offered")["pc_id"]
        .as_str()
        .unwrap()
        .to_string();
    d.run(&Op::Preview(pc.clone())).expect();
    d.run(&Op::Apply { change, pc, params: Vec::new() }).expect();
    for _ in 0..4 {
        d.run(&Op::Tick).expect();
    }
    let after = answers(d);
    let cleansed = d.run(&Op::Records(1, "orders".into())).expect().json();
    let integrated = d.run(&Op::Records(2, "orders_int".into())).expect().json();
    let row = format!("{},channel\n8,west,fig,fruit,6,1,web\n", fixture::HEADER);
    d.run(&Op::Ingest("shop".into(), row)).expect();
    for _ in 0..4 {
        d.run(&Op::Tick).expect();
    }
    let later = d.run(&Op::Records(2, "orders_int".into())).expect().json();
    let history = d.run(&Op::History).expect().json();
    let export = d.run(&Op::Export).expect().body;
    Additive { before, after, detected, cleansed, integrated, later, history, export }
}
