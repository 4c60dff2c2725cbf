mod common;

use common::*;
use evodw_core::adaptation::OptionKind;
use evodw_core::engine::FaultInjection;
use evodw_core::metastore::{ChangeOrigin, ChangeStatus, ChangeType, ProposalStatus};
use serde_json::json;

#[test]
fn highway_fills_and_cube_answers() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    let st = e.snapshot();
    assert_eq!(st.meta.refresh_count("orders"), 4);
    assert_eq!(st.meta.refresh_count("orders_int"), 2);
    assert_eq!(st.meta.refresh_count("sales"), 1);
    assert_eq!(e.records(1, "orders").unwrap().len(), 7);
    let apex = e.query(&queries()[0]).unwrap();
    assert_eq!(apex.rows.len(), 1);
    let total: f64 = [10.5, 4.25, 7.0, 12.0, 3.5, 9.75, 2.0].iter().sum();
    assert_eq!(apex.rows[0]["sum_amount"], json!(total));
    assert_eq!(apex.rows[0]["count_qty"], json!(7));
    assert!(e.validate().is_empty(), "{:?}", e.validate());
}

#[test]
fn added_column_propagates_without_disturbing_answers() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    let before = answers(&e);
    let out = e
        .ingest("shop", format!("{HEADER},channel\n8,west,fig,fruit,6,1,web\n").as_bytes())
        .unwrap();
    assert_eq!(out.changes.len(), 1);
    let change = e.changes(Some(ChangeStatus::Pending)).pop().unwrap();
    assert_eq!(change.change_type, ChangeType::AttributeAdded);
    let opts = e.propose(&change.change_id, "dev").unwrap();
    assert_eq!(opts.len(), 3);
    let add = opts.iter().find(|p| p.option_kind == OptionKind::PropagateAdd).unwrap();
    let report = e.preview(&add.pc_id).unwrap();
    assert!(report.blockers.is_empty(), "{:?}", report.blockers);
    e.apply(Some(&change.change_id), &add.pc_id, Default::default(), "dev").unwrap();
    assert_eq!(e.history().len(), 3);
    for _ in 0..4 {
        assert!(e.tick().unwrap().errors.is_empty());
    }
    let rows = e.records(1, "orders").unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows[..7].iter().all(|r| r["channel"].is_null()));
    assert_eq!(rows[7]["channel"], json!("web"));
    let after = answers(&e);
    assert_eq!(before.len(), 5);
    assert_ne!(before, after, "new row should change totals");
    assert!(e.validate().is_empty(), "{:?}", e.validate());
}

#[test]
fn fault_injection_leaves_everything_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::AbortMidApply);
    e.ingest("shop", format!("{HEADER},channel\n8,west,fig,fruit,6,1,web\n").as_bytes()).unwrap();
    let change = e.changes(Some(ChangeStatus::Pending)).pop().unwrap();
    let opts = e.propose(&change.change_id, "dev").unwrap();
    let before = e.export();
    let err = e
        .apply(Some(&change.change_id), &opts[0].pc_id, Default::default(), "dev")
        .unwrap_err();
    assert_eq!(err.code(), "APPLY_FAILED");
    assert_eq!(e.export(), before);
    assert_eq!(std::fs::read_to_string(e.layout().metastore()).unwrap(), before);
}

#[test]
fn removed_column_breaks_mapping_and_maps_with_default() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    e.ingest("shop", b"order_id,region,product,amount,qty\n9,west,fig,1.5,1\n").unwrap();
    let change = e.changes(Some(ChangeStatus::Pending)).pop().unwrap();
    assert_eq!(change.change_type, ChangeType::AttributeRemoved);
    let opts = e.propose(&change.change_id, "dev").unwrap();
    let map = opts.iter().find(|p| p.option_kind == OptionKind::MapWithDefault).unwrap();
    let err = e.apply(Some(&change.change_id), &map.pc_id, Default::default(), "dev").unwrap_err();
    assert_eq!(err.code(), "MISSING_PARAMETER");
    e.apply(Some(&change.change_id), &map.pc_id, params(&[("default", "misc")]), "dev").unwrap();
    for _ in 0..4 {
        let r = e.tick().unwrap();
        assert!(r.errors.is_empty(), "{:?}", r.errors);
    }
    let rows = e.records(1, "orders").unwrap();
    assert_eq!(rows.len(), 8, "{rows:?}");
}

#[test]
fn reject_all_returns_change_to_pending() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    e.ingest("shop", format!("{HEADER},channel\n8,west,fig,fruit,6,1,web\n").as_bytes()).unwrap();
    let change = e.changes(Some(ChangeStatus::Pending)).pop().unwrap();
    let opts = e.propose(&change.change_id, "dev").unwrap();
    for p in &opts {
        let r = e.reject(&p.pc_id, "dev").unwrap();
        assert_eq!(r.status, ProposalStatus::Rejected);
    }
    assert_eq!(e.changes(Some(ChangeStatus::Pending)).len(), 1);
    assert_eq!(e.history().len(), 3);
}

#[test]
fn upstream_type_drift_is_reported_by_elt() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    e.ingest("shop", format!("{HEADER}\n10,west,fig,fruit,6,many\n").as_bytes()).unwrap();
    let wrapper: Vec<_> = e.changes(None);
    assert!(wrapper.iter().any(|c| c.change_type == ChangeType::AttributeTypeChanged));
    assert!(e.tick().unwrap().errors.is_empty());
    assert_eq!(e.snapshot().meta.store("orders").unwrap().quarantined, 1);
    let elt: Vec<_> = e.changes(None).into_iter().filter(|c| c.origin == ChangeOrigin::Elt).collect();
    assert!(elt.is_empty(), "wrapper already reported the drift: {elt:?}");
}

#[test]
fn reopen_restores_state() {
    let dir = tempfile::tempdir().unwrap();
    let (export, answers_before) = {
        let e = populated(dir.path(), FaultInjection::None);
        (e.export(), answers(&e))
    };
    let e = open(dir.path(), FaultInjection::None);
    assert_eq!(e.export(), export);
    assert_eq!(answers(&e), answers_before);
}

fn strip(rows: Vec<serde_json::Value>, from: &str, to: &str) -> Vec<serde_json::Value> {
    rows.into_iter()
        .map(|mut r| {
            let obj = r.as_object_mut().unwrap();
            if let Some(v) = obj.shift_remove(from) {
                obj.insert(to.to_string(), v);
            }
            r
        })
        .collect()
}

#[test]
fn confirmed_rename_keeps_output_modulo_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    let before = e.records(1, "orders").unwrap();
    e.ingest("shop", b"order_id,region,product,category,amount,quantity\n13,west,fig,fruit,1,0\n").unwrap();
    let changes = e.changes(Some(ChangeStatus::Pending));
    let kinds: Vec<ChangeType> = changes.iter().map(|c| c.change_type).collect();
    assert_eq!(
        kinds,
        vec![ChangeType::AttributeRemoved, ChangeType::AttributeAdded, ChangeType::RenameCandidate]
    );
    let cand = &changes[2];
    let opts = e.propose(&cand.change_id, "dev").unwrap();
    assert_eq!(opts.len(), 1);
    e.apply(Some(&cand.change_id), &opts[0].pc_id, params(&[("confirm", "true")]), "dev").unwrap();
    assert!(e.changes(Some(ChangeStatus::Pending)).is_empty(), "{:?}", e.changes(None));
    for _ in 0..4 {
        let r = e.tick().unwrap();
        assert!(r.errors.is_empty(), "{:?}", r.errors);
    }
    let after = e.records(1, "orders").unwrap();
    assert_eq!(strip(after, "quantity", "qty"), before);
    assert!(e.validate().is_empty(), "{:?}", e.validate());
}

#[test]
fn widened_type_flows_through() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    e.ingest("shop", format!("{HEADER}\n11,west,fig,fruit,6,2.5\n").as_bytes()).unwrap();
    let change = e.changes(Some(ChangeStatus::Pending)).pop().unwrap();
    assert_eq!(change.change_type, ChangeType::AttributeTypeChanged);
    let opts = e.propose(&change.change_id, "dev").unwrap();
    let widen = opts.iter().find(|p| p.option_kind == OptionKind::TypeWiden).unwrap();
    e.apply(Some(&change.change_id), &widen.pc_id, Default::default(), "dev").unwrap();
    for _ in 0..4 {
        let r = e.tick().unwrap();
        assert!(r.errors.is_empty(), "{:?}", r.errors);
    }
    let rows = e.records(1, "orders").unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(e.snapshot().meta.store("orders").unwrap().quarantined, 0);
    assert!(e.validate().is_empty(), "{:?}", e.validate());
}

#[test]
fn new_dimension_extends_the_cube() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    e.ingest("shop", format!("{HEADER},store\n12,west,fig,fruit,6,1,downtown\n").as_bytes()).unwrap();
    let change = e.changes(Some(ChangeStatus::Pending)).pop().unwrap();
    let opts = e.propose(&change.change_id, "dev").unwrap();
    let nd = opts.iter().find(|p| p.option_kind == OptionKind::NewDimension).unwrap();
    e.apply(
        Some(&change.change_id),
        &nd.pc_id,
        params(&[("dimension", "store"), ("natural_key", "store")]),
        "dev",
    )
    .unwrap();
    assert!(e.validate().is_empty(), "{:?}", e.validate());
    let q: evodw_core::cube::QuerySpec =
        serde_json::from_value(json!({"cube_id": "sales_cube", "group_by": ["store"]})).unwrap();
    let pre = e.query(&q).unwrap();
    assert_eq!(pre.rows.len(), 1, "{:?}", pre.rows);
    for _ in 0..4 {
        let r = e.tick().unwrap();
        assert!(r.errors.is_empty(), "{:?}", r.errors);
    }
    let post = e.query(&q).unwrap();
    assert_eq!(post.rows.len(), 2, "{:?}", post.rows);
}

#[test]
fn dataset_lifecycle_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let e = open(dir.path(), FaultInjection::None);
    let mut empty = raw_schema();
    empty.fields.clear();
    e.put_schema(empty).unwrap();
    e.register_source(source()).unwrap();
    e.ingest("shop", BATCH_1.as_bytes()).unwrap();
    let added = e.changes(None);
    assert_eq!(added.len(), 1);
    assert_eq!(added[0].change_type, ChangeType::DatasetAdded);
    assert_eq!(added[0].payload.fields.as_ref().unwrap().len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    for i in 0..3 {
        assert!(e.changes(None).is_empty(), "after {i} empty pulls");
        e.ingest("shop", b"").unwrap();
    }
    let removed = e.changes(None);
    assert_eq!(removed.len(), 1);
    assert_eq!(removed[0].change_type, ChangeType::DatasetRemoved);
}

#[test]
fn unparseable_batches_are_kept() {
    let dir = tempfile::tempdir().unwrap();
    let e = populated(dir.path(), FaultInjection::None);
    let out = e.ingest("shop", &[0xff, 0xfe, 0x00]).unwrap();
    assert_eq!(out.error.unwrap().code(), "PARSE_ERROR");
    assert!(!out.batch.parseable);
    let path = e.layout().batch("raw_orders", &out.batch.batch_id);
    assert_eq!(std::fs::read(path).unwrap(), vec![0xff, 0xfe, 0x00]);
    assert!(e.snapshot().meta.highway.batches.iter().any(|b| b.batch_id == out.batch.batch_id));
}
