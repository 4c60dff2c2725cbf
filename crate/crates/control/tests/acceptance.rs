//! Runs the acceptance criteria in order and prints one PASS/FAIL line for
//! each. Exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::fixture::{self, oracle};
use common::*;
use evodw_core::adaptation::OptionKind;
use evodw_core::cube::{cuboid_sets, materialize, CubeAttr, CubeDefinition};
use evodw_core::engine::FaultInjection;
use evodw_core::highway::RecordSet;
use evodw_core::metastore::{ChangeStatus, ChangeType, FieldDef, SECTIONS};
use evodw_core::ValueType;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

const INSTANCES: u64 = 120;
const QUERIES_PER_INSTANCE: u64 = 5;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cube_oracle() -> Outcome {
    let t = Instant::now();
    let mut queries = 0;
    for seed in 0..INSTANCES {
        let inst = oracle::random_instance(seed);
        for q in 0..QUERIES_PER_INSTANCE {
            let spec = oracle::random_query(seed * 1000 + q, &inst);
            let want = oracle::brute_force(&inst, &spec);
            let got = oracle::engine_answer(&inst, &spec).map_err(|e| format!("seed {seed}/{q}: {e}"))?;
            oracle::compare(&got, &want).map_err(|e| format!("seed {seed}/{q}: {e}"))?;
            queries += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{INSTANCES} instances, {queries} queries, {secs:.1}s"))
}

fn cuboid_independence() -> Outcome {
    let mut paths = 0;
    for seed in 0..INSTANCES {
        let inst = oracle::random_instance(seed);
        for q in 0..QUERIES_PER_INSTANCE {
            let spec = oracle::random_query(seed * 1000 + q, &inst);
            paths += oracle::all_paths_agree(&inst, &spec).map_err(|e| format!("seed {seed}/{q}: {e}"))?;
        }
    }
    for n in 0..=4usize {
        let names = oracle::attr_names(n);
        let def = CubeDefinition {
            cube_id: "c".into(),
            fact_dataset: "f".into(),
            attrs: names
                .iter()
                .map(|a| CubeAttr { attribute: a.clone(), dimension: a.clone(), position: None })
                .collect(),
            measures: Vec::new(),
            max_attrs: Some(n),
            cuboids: Vec::new(),
        };
        let base = RecordSet::empty(names.iter().map(|a| FieldDef::new(a, ValueType::Text, true)).collect());
        let built = materialize(&def, &base, n).map_err(|e| e.to_string())?.len();
        ensure(cuboid_sets(&def, n).len() == 1 << n && built == 1 << n, format!("n={n}: {built} cuboids"))?;
    }
    Ok(format!("{paths} covering paths agree; lattice sizes 1,2,4,8,16"))
}

/// (type, attribute, new attribute, old type, new type) of each change.
type Sig = (ChangeType, Option<String>, Option<String>, Option<ValueType>, Option<ValueType>);

fn signatures(e: &evodw_core::engine::Engine) -> Vec<Sig> {
    e.changes(None)
        .into_iter()
        .map(|c| (c.change_type, c.payload.attribute, c.payload.new_attribute, c.payload.old_type, c.payload.new_type))
        .collect()
}

fn detection_suite() -> Outcome {
    use ChangeType::*;
    use ValueType::*;
    let s = |x: &str| Some(x.to_string());
    let h = fixture::HEADER;
    let cases: Vec<(&str, String, Vec<Sig>)> = vec![
        ("added", format!("{h},channel\n8,west,fig,fruit,6,1,web\n"), vec![(AttributeAdded, s("channel"), None, None, Some(Text))]),
        (
            "removed",
            "order_id,region,product,amount,qty\n9,west,fig,1.5,1\n".into(),
            vec![(AttributeRemoved, s("category"), None, Some(Text), None)],
        ),
        (
            "type changed",
            format!("{h}\n11,west,fig,fruit,6,2.5\n"),
            vec![(AttributeTypeChanged, s("qty"), None, Some(Integer), Some(Decimal))],
        ),
        (
            "rename",
            "order_id,region,product,category,amount,quantity\n13,west,fig,fruit,1,3\n".into(),
            vec![
                (AttributeRemoved, s("qty"), None, Some(Integer), None),
                (AttributeAdded, s("quantity"), None, None, Some(Integer)),
                (RenameCandidate, s("qty"), s("quantity"), Some(Integer), Some(Integer)),
            ],
        ),
    ];
    for (name, batch, want) in cases {
        let dir = tempfile::tempdir().unwrap();
        let e = fixture::populated(dir.path(), FaultInjection::None);
        e.ingest("shop", batch.as_bytes()).map_err(|e| e.to_string())?;
        let got = signatures(&e);
        ensure(got == want, format!("{name}: got {got:?}, want {want:?}"))?;
    }

    let dir = tempfile::tempdir().unwrap();
    let e = fixture::open(dir.path(), FaultInjection::None);
    let mut empty = fixture::raw_schema();
    empty.fields.clear();
    e.put_schema(empty).map_err(|e| e.to_string())?;
    e.register_source(fixture::source()).map_err(|e| e.to_string())?;
    e.ingest("shop", fixture::BATCH_1.as_bytes()).map_err(|e| e.to_string())?;
    let got = signatures(&e);
    ensure(got == vec![(DatasetAdded, None, None, None, None)], format!("dataset added: {got:?}"))?;
    let fields = e.changes(None)[0].payload.fields.clone().unwrap_or_default();
    ensure(fields.len() == 6, format!("dataset added carries {} fields", fields.len()))?;

    let dir = tempfile::tempdir().unwrap();
    let e = fixture::populated(dir.path(), FaultInjection::None);
    for i in 0..3 {
        ensure(e.changes(None).is_empty(), format!("dataset removed early, after {i} empty pulls"))?;
        e.ingest("shop", b"").map_err(|e| e.to_string())?;
    }
    let got = signatures(&e);
    ensure(got == vec![(DatasetRemoved, None, None, None, None)], format!("dataset removed: {got:?}"))?;
    Ok("6 change types, rename yields removed + added + candidate".into())
}

fn additive_evolution() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut d = HttpDriver::start(&write_config(dir.path(), json!({})));
    let a = additive_scenario(&mut d);
    ensure(a.detected.as_array().map(Vec::len) == Some(1), format!("detected {}", a.detected))?;
    ensure(a.detected[0]["change_type"] == "ATTRIBUTE_ADDED", "not ATTRIBUTE_ADDED")?;
    for (i, (b, x)) in a.before.iter().zip(&a.after).enumerate() {
        ensure(b == x, format!("answer {i} changed: {b} vs {x}"))?;
    }
    ensure(a.before.len() == 5, "five answers")?;
    for (level, rows) in [("cleansed", &a.cleansed), ("integrated", &a.integrated)] {
        let rows = rows.as_array().unwrap();
        ensure(rows.len() == 7, format!("{level}: {} rows", rows.len()))?;
        ensure(
            rows.iter().all(|r| r.get("channel") == Some(&Value::Null)),
            format!("{level}: channel not null everywhere"),
        )?;
    }
    let later = a.later.as_array().unwrap();
    ensure(later.iter().filter(|r| r["channel"] == "web").count() == 1, "new channel value not visible")?;
    let applied = a.history.as_array().unwrap().iter().filter(|p| p["status"] == "APPLIED").count();
    ensure(applied == 1, format!("{applied} applied entries"))?;
    Ok("5 answers bit-identical; channel null on 7 pre-change rows at levels 1 and 2".into())
}

fn strip(rows: Vec<Value>, from: &str, to: &str) -> Vec<Value> {
    rows.into_iter()
        .map(|r| {
            let obj = r.as_object().unwrap();
            Value::Object(obj.iter().map(|(k, v)| (if k == from { to.to_string() } else { k.clone() }, v.clone())).collect())
        })
        .collect()
}

fn rename_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let e = fixture::populated(dir.path(), FaultInjection::None);
    let before: Vec<Vec<Value>> = [(1, "orders"), (2, "orders_int")]
        .iter()
        .map(|(l, d)| e.records(*l, d).unwrap())
        .collect();
    e.ingest("shop", b"order_id,region,product,category,amount,quantity\n13,west,fig,fruit,1,0\n")
        .map_err(|e| e.to_string())?;
    let cand = e
        .changes(Some(ChangeStatus::Pending))
        .into_iter()
        .find(|c| c.change_type == ChangeType::RenameCandidate)
        .ok_or("no rename candidate")?;
    let opts = e.propose(&cand.change_id, "dev").map_err(|e| e.to_string())?;
    let confirm = opts.iter().find(|o| o.option_kind == OptionKind::RenameConfirm).ok_or("no RENAME_CONFIRM")?;
    let mut params = BTreeMap::new();
    params.insert("confirm".to_string(), "true".to_string());
    e.apply(Some(&cand.change_id), &confirm.pc_id, params, "dev").map_err(|e| e.to_string())?;
    for _ in 0..4 {
        let r = e.tick().map_err(|e| e.to_string())?;
        ensure(r.errors.is_empty(), format!("{:?}", r.errors))?;
    }
    for ((l, d), want) in [(1, "orders"), (2, "orders_int")].iter().zip(before) {
        let got = strip(e.records(*l, d).unwrap(), "quantity", "qty");
        ensure(got == want, format!("{d} differs beyond the renamed column"))?;
    }
    ensure(e.validate().is_empty(), format!("{:?}", e.validate()))?;
    Ok("levels 1 and 2 equal pre-change output modulo qty -> quantity".into())
}

fn latency_law() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut d = HttpDriver::start(&write_config(dir.path(), json!({})));
    for op in [
        Op::Schema(v(fixture::raw_schema())),
        Op::Source(v(fixture::source())),
        Op::Mapping(v(fixture::cleanse())),
        Op::Mapping(v(fixture::integrate())),
        Op::Mapping(v(fixture::load_star())),
        Op::Ingest("shop".into(), fixture::BATCH_1.into()),
    ] {
        d.run(&op).expect();
    }
    for _ in 0..8 {
        d.run(&Op::Tick).expect();
    }
    let mut periods = Vec::new();
    let mut counts = Vec::new();
    for n in 1..=3 {
        let ds = d.run(&Op::Level(n)).expect().json();
        let ds = ds.as_array().unwrap();
        ensure(!ds.is_empty(), format!("level {n} empty"))?;
        counts.push(ds.iter().map(|x| x["refresh_count"].as_u64().unwrap()).max().unwrap());
    }
    let cfg = evodw::load_config(&dir.path().join("evodw.json")).map_err(|e| e.to_string())?;
    periods.extend(cfg.levels[1..].iter().map(|l| l.tick_period));
    let want: Vec<u64> = periods.iter().map(|p| 8 / p).collect();
    ensure(periods == vec![1, 2, 4], format!("periods {periods:?}"))?;
    ensure(counts == want && counts == vec![8, 4, 2], format!("counts {counts:?}"))?;
    Ok(format!("periods {periods:?}, counts {counts:?}"))
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

fn digest(root: &Path) -> Vec<(PathBuf, String)> {
    files(root)
        .into_iter()
        .map(|p| {
            let hash = Sha256::digest(std::fs::read(&p).unwrap());
            let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
            (p.strip_prefix(root).unwrap().to_path_buf(), hex)
        })
        .collect()
}

fn apply_atomicity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let e = fixture::populated(dir.path(), FaultInjection::AbortMidApply);
    e.ingest("shop", format!("{},channel\n8,west,fig,fruit,6,1,web\n", fixture::HEADER).as_bytes())
        .map_err(|e| e.to_string())?;
    let change = e.changes(Some(ChangeStatus::Pending)).pop().ok_or("no change")?;
    let opts = e.propose(&change.change_id, "dev").map_err(|e| e.to_string())?;
    let pc = opts.iter().find(|o| o.option_kind == OptionKind::PropagateAdd).ok_or("no PROPAGATE_ADD")?;
    let export = e.export();
    let hashes = digest(dir.path());
    let err = e.apply(Some(&change.change_id), &pc.pc_id, BTreeMap::new(), "dev").err().ok_or("apply succeeded")?;
    ensure(err.code() == "APPLY_FAILED", format!("error {}", err.code()))?;
    ensure(e.export() == export, "export changed")?;
    ensure(digest(dir.path()) == hashes, "data files changed")?;
    ensure(e.validate().is_empty(), format!("violations {:?}", e.validate()))?;
    drop(e);
    let reopened = fixture::open(dir.path(), FaultInjection::None);
    ensure(reopened.export() == export, "reopened store differs")?;
    Ok(format!("export and {} file hashes unchanged, 0 violations", hashes.len()))
}

fn round_trip(e: &evodw_core::engine::Engine) -> Result<(), String> {
    let first = e.export();
    let doc: Value = serde_json::from_str(&first).map_err(|e| e.to_string())?;
    let keys: Vec<&str> = doc.as_object().unwrap().keys().map(String::as_str).collect();
    ensure(keys == SECTIONS, format!("sections {keys:?}"))?;
    e.import(&first).map_err(|e| e.to_string())?;
    ensure(e.export() == first, "export after import differs")
}

fn metadata_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    round_trip(&fixture::open(dir.path(), FaultInjection::None)).map_err(|e| format!("empty: {e}"))?;
    let dir = tempfile::tempdir().unwrap();
    let e = fixture::populated(dir.path(), FaultInjection::None);
    e.ingest("shop", format!("{},channel\n", fixture::HEADER).as_bytes()).map_err(|e| e.to_string())?;
    let change = e.changes(None).pop().ok_or("no change")?;
    e.propose(&change.change_id, "dev").map_err(|e| e.to_string())?;
    round_trip(&e).map_err(|e| format!("populated: {e}"))?;
    Ok("byte-identical on empty and populated stores, six sections".into())
}

fn api_cli_parity() -> Outcome {
    let http_dir = tempfile::tempdir().unwrap();
    let mut http = HttpDriver::start(&write_config(http_dir.path(), json!({})));
    let a = additive_scenario(&mut http);
    let cli_dir = tempfile::tempdir().unwrap();
    let mut cli = CliDriver { config: write_config(cli_dir.path(), json!({})) };
    let b = additive_scenario(&mut cli);
    ensure(a.export == b.export, "exports differ")?;
    ensure(a.before == b.before && a.after == b.after && a.later == b.later, "responses differ")?;
    Ok(format!("exports byte-identical ({} bytes)", a.export.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("cube oracle equivalence", cube_oracle),
        ("cuboid-choice independence", cuboid_independence),
        ("change-detection suite", detection_suite),
        ("additive evolution end to end", additive_evolution),
        ("rename round-trip", rename_round_trip),
        ("latency law", latency_law),
        ("apply atomicity under fault injection", apply_atomicity),
        ("metadata round-trip", metadata_round_trip),
        ("API/CLI parity", api_cli_parity),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
