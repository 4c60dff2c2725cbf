#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use evodw_core::cube::{CubeDefinition, QuerySpec};
use evodw_core::engine::{default_levels, ClockMode, Engine, EngineOptions, FaultInjection};
use evodw_core::metastore::{DatasetSchema, MappingDefinition, SourceDescriptor};
use serde_json::json;

pub const HEADER: &str = "order_id,region,product,category,amount,qty";

pub const BATCH_1: &str = "order_id,region,product,category,amount,qty
1,north,apple,fruit,10.5,2
2,south,pear,fruit,4.25,1
3,north,kale,veg,7,3
4,east,apple,fruit,12,5
";

pub const BATCH_2: &str = "order_id,region,product,category,amount,qty
5,south,kale,veg,3.5,1
6,east,pear,fruit,9.75,4
7,north,leek,veg,2,2
";

pub fn open(dir: &Path, fault: FaultInjection) -> Engine {
    let mut opts = EngineOptions::new(dir, default_levels());
    opts.clock = ClockMode::Logical;
    opts.fault_injection = fault;
    Engine::open(opts).unwrap()
}

pub fn raw_schema() -> DatasetSchema {
    serde_json::from_value(json!({
        "dataset_id": "raw_orders", "level": 0, "version": 1, "kind": "SEMISTRUCTURED",
        "fields": [
            {"name": "order_id", "value_type": "INTEGER", "nullable": false},
            {"name": "region", "value_type": "TEXT", "nullable": false},
            {"name": "product", "value_type": "TEXT", "nullable": false},
            {"name": "category", "value_type": "TEXT", "nullable": false},
            {"name": "amount", "value_type": "DECIMAL", "nullable": false},
            {"name": "qty", "value_type": "INTEGER", "nullable": false}
        ]
    }))
    .unwrap()
}

pub fn source() -> SourceDescriptor {
    serde_json::from_value(json!({"source_id": "shop", "format": "DELIMITED", "level0_dataset": "raw_orders"})).unwrap()
}

pub fn cleanse() -> MappingDefinition {
    serde_json::from_value(json!({
        "mapping_id": "cleanse", "target_dataset": "orders", "source_datasets": ["raw_orders"], "version": 1,
        "steps": [{"op": "FILTER", "predicate": "qty > 0"}]
    }))
    .unwrap()
}

pub fn integrate() -> MappingDefinition {
    serde_json::from_value(json!({
        "mapping_id": "integrate", "target_dataset": "orders_int", "source_datasets": ["orders"], "version": 1,
        "steps": [{"op": "FILTER", "predicate": "amount >= 0"}]
    }))
    .unwrap()
}

pub fn load_star() -> MappingDefinition {
    serde_json::from_value(json!({
        "mapping_id": "load", "target_dataset": "sales", "source_datasets": ["orders_int"], "version": 1,
        "steps": [{"op": "LOAD_STAR", "star": {
            "fact": "sales",
            "measures": ["amount", "qty"],
            "dimensions": [
                {"name": "region", "natural_key": ["region"], "attributes": ["region"]},
                {"name": "product", "natural_key": ["product"], "attributes": ["product", "category"],
                 "hierarchy": ["product", "category"]}
            ]
        }}]
    }))
    .unwrap()
}

pub fn cube() -> CubeDefinition {
    serde_json::from_value(json!({
        "cube_id": "sales_cube", "fact_dataset": "sales",
        "attrs": [
            {"attribute": "region", "dimension": "region"},
            {"attribute": "product", "dimension": "product", "position": 0},
            {"attribute": "category", "dimension": "product", "position": 1}
        ],
        "measures": [
            {"field": "amount", "func": "SUM"},
            {"field": "qty", "func": "COUNT"},
            {"field": "amount", "func": "AVG"},
            {"field": "qty", "func": "MAX"}
        ]
    }))
    .unwrap()
}

pub fn queries() -> Vec<QuerySpec> {
    [
        json!({"cube_id": "sales_cube", "group_by": [], "measures": []}),
        json!({"cube_id": "sales_cube", "group_by": ["region"]}),
        json!({"cube_id": "sales_cube", "group_by": ["category"], "measures": ["sum_amount"]}),
        json!({"cube_id": "sales_cube", "group_by": ["region", "category"],
               "filters": [{"attr": "region", "op": "!=", "value": "east"}]}),
        json!({"cube_id": "sales_cube", "group_by": ["product"],
               "filters": [{"attr": "category", "op": "=", "value": "fruit"}]}),
    ]
    .into_iter()
    .map(|q| serde_json::from_value(q).unwrap())
    .collect()
}

/// Registers everything, ingests two batches and ticks until the star and
/// cube are built.
pub fn populated(dir: &Path, fault: FaultInjection) -> Engine {
    let e = open(dir, fault);
    e.put_schema(raw_schema()).unwrap();
    e.register_source(source()).unwrap();
    e.put_mapping(cleanse()).unwrap();
    e.put_mapping(integrate()).unwrap();
    e.put_mapping(load_star()).unwrap();
    e.ingest("shop", BATCH_1.as_bytes()).unwrap();
    e.ingest("shop", BATCH_2.as_bytes()).unwrap();
    for _ in 0..4 {
        let r = e.tick().unwrap();
        assert!(r.errors.is_empty(), "{:?}", r.errors);
    }
    e.create_cube(cube()).unwrap();
    e.materialize("sales_cube").unwrap();
    e
}

pub fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn answers(e: &Engine) -> Vec<String> {
    queries().iter().map(|q| serde_json::to_string(&e.query(q).unwrap().rows).unwrap()).collect()
}
