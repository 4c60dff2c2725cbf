//! Random star/cube instances and a brute-force aggregation oracle that
//! works on the flat pre-star records only.

#![allow(dead_code)]

use std::collections::BTreeMap;

use evodw_core::cube::{
    answer, build_cuboid, flat_base, materialize, CubeAttr, CubeDefinition, CubeMeasure, FilterOp,
    QueryFilter, QuerySpec,
};
use evodw_core::highway::{build_star, AggFn, DimensionSpec, RecordSet, StarSpec};
use evodw_core::metastore::FieldDef;
use evodw_core::{Value, ValueType};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub const FUNCS: [AggFn; 5] = [AggFn::Sum, AggFn::Count, AggFn::Min, AggFn::Max, AggFn::Avg];
pub const MEASURE_FIELDS: [&str; 2] = ["m_int", "m_dec"];

pub struct Instance {
    pub flat: RecordSet,
    pub def: CubeDefinition,
    pub base: RecordSet,
    pub cuboids: Vec<(Vec<String>, RecordSet)>,
}

pub fn attr_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i}")).collect()
}

/// Up to 5 single-attribute dimensions of cardinality at most 3 (plus an
/// occasional null), up to 1000 fact rows, an INTEGER and a DECIMAL measure.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = rng.gen_range(0..=5usize);
    let rows = rng.gen_range(0..=1000usize);
    let names = attr_names(n);
    let domains: Vec<Vec<&str>> = (0..n)
        .map(|_| {
            let card = rng.gen_range(1..=3);
            ["a", "b", "c"][..card].to_vec()
        })
        .collect();
    let mut fields: Vec<FieldDef> = names.iter().map(|a| FieldDef::new(a, ValueType::Text, true)).collect();
    fields.push(FieldDef::new("m_int", ValueType::Integer, true));
    fields.push(FieldDef::new("m_dec", ValueType::Decimal, true));
    let mut data = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row: Vec<Value> = domains
            .iter()
            .map(|d| {
                if rng.gen_bool(0.05) {
                    Value::Null
                } else {
                    Value::Text(d.choose(&mut rng).unwrap().to_string())
                }
            })
            .collect();
        row.push(if rng.gen_bool(0.05) { Value::Null } else { Value::Int(rng.gen_range(-50..=50)) });
        row.push(if rng.gen_bool(0.05) {
            Value::Null
        } else {
            Value::Dec(rng.gen_range(-100_000..=100_000) as f64 / 100.0)
        });
        data.push(row);
    }
    let flat = RecordSet { fields, rows: data };
    let star = StarSpec {
        fact: "f".into(),
        measures: MEASURE_FIELDS.iter().map(|s| s.to_string()).collect(),
        dimensions: names
            .iter()
            .map(|a| DimensionSpec {
                name: format!("D{a}"),
                natural_key: vec![a.clone()],
                attributes: vec![a.clone()],
                hierarchy: Vec::new(),
            })
            .collect(),
    };
    let tables = build_star(&star, &flat).unwrap();
    let def = CubeDefinition {
        cube_id: "c".into(),
        fact_dataset: "f".into(),
        attrs: names
            .iter()
            .map(|a| CubeAttr { attribute: a.clone(), dimension: format!("D{a}"), position: None })
            .collect(),
        measures: MEASURE_FIELDS
            .iter()
            .flat_map(|f| FUNCS.iter().map(move |func| CubeMeasure { field: f.to_string(), func: *func, out: None }))
            .collect(),
        max_attrs: Some(n),
        cuboids: Vec::new(),
    };
    let dims: BTreeMap<String, RecordSet> = tables.dimensions.into_iter().collect();
    let base = flat_base(&def, &tables.fact, &dims).unwrap();
    let cuboids = materialize(&def, &base, n).unwrap();
    Instance { flat, def, base, cuboids }
}

pub fn random_query(seed: u64, inst: &Instance) -> QuerySpec {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let names = inst.def.attr_names();
    let group_by: Vec<String> = names.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
    let mut filters = Vec::new();
    if !names.is_empty() {
        for _ in 0..rng.gen_range(0..=2) {
            let attr = names.choose(&mut rng).unwrap().clone();
            let op = if rng.gen_bool(0.5) { FilterOp::Eq } else { FilterOp::Ne };
            let value = serde_json::json!(["a", "b", "c", "d"].choose(&mut rng).unwrap());
            filters.push(QueryFilter { attr, op, value });
        }
    }
    let measures: Vec<String> = inst
        .def
        .measures
        .iter()
        .map(|m| m.out_name())
        .filter(|_| rng.gen_bool(0.4))
        .collect();
    QuerySpec { cube_id: "c".into(), group_by, filters, measures }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Int(i64),
    Dec(f64),
    Text(String),
}

fn cell(v: &Value) -> Cell {
    match v {
        Value::Null => Cell::Null,
        Value::Int(i) => Cell::Int(*i),
        Value::Dec(d) => Cell::Dec(*d),
        Value::Text(s) => Cell::Text(s.clone()),
        other => panic!("unexpected value {other:?}"),
    }
}

/// Group key (attribute values, `None` for null) to measure results, in the
/// query's measure order.
pub type Answer = BTreeMap<Vec<Option<String>>, Vec<Cell>>;

/// Filters, groups and aggregates the flat records directly.
pub fn brute_force(inst: &Instance, spec: &QuerySpec) -> Answer {
    let idx = |n: &str| inst.flat.index_of(n).unwrap();
    let selected: Vec<&CubeMeasure> = if spec.measures.is_empty() {
        inst.def.measures.iter().collect()
    } else {
        spec.measures.iter().map(|m| inst.def.measures.iter().find(|d| d.out_name() == *m).unwrap()).collect()
    };
    let text = |v: &Value| match v {
        Value::Text(s) => Some(s.clone()),
        _ => None,
    };
    let mut groups: BTreeMap<Vec<Option<String>>, Vec<&Vec<Value>>> = BTreeMap::new();
    'rows: for row in &inst.flat.rows {
        for f in &spec.filters {
            let Some(v) = text(&row[idx(&f.attr)]) else { continue 'rows };
            let lit = f.value.as_str().unwrap();
            let keep = match f.op {
                FilterOp::Eq => v == lit,
                FilterOp::Ne => v != lit,
                _ => unreachable!(),
            };
            if !keep {
                continue 'rows;
            }
        }
        let key = spec.group_by.iter().map(|g| text(&row[idx(g)])).collect();
        groups.entry(key).or_default().push(row);
    }
    if groups.is_empty() && spec.group_by.is_empty() {
        groups.insert(Vec::new(), Vec::new());
    }
    groups
        .into_iter()
        .map(|(k, rows)| {
            let out = selected
                .iter()
                .map(|m| {
                    let i = idx(&m.field);
                    let vals: Vec<&Value> = rows.iter().map(|r| &r[i]).filter(|v| !v.is_null()).collect();
                    let ints: Option<Vec<i64>> = vals
                        .iter()
                        .map(|v| if let Value::Int(x) = v { Some(*x) } else { None })
                        .collect();
                    let floats: Vec<f64> = vals.iter().map(|v| v.as_f64().unwrap()).collect();
                    match m.func {
                        AggFn::Count => Cell::Int(vals.len() as i64),
                        _ if vals.is_empty() => Cell::Null,
                        AggFn::Sum => match &ints {
                            Some(xs) => Cell::Int(xs.iter().sum()),
                            None => Cell::Dec(floats.iter().sum()),
                        },
                        AggFn::Min => match &ints {
                            Some(xs) => Cell::Int(*xs.iter().min().unwrap()),
                            None => Cell::Dec(floats.iter().cloned().fold(f64::INFINITY, f64::min)),
                        },
                        AggFn::Max => match &ints {
                            Some(xs) => Cell::Int(*xs.iter().max().unwrap()),
                            None => Cell::Dec(floats.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
                        },
                        AggFn::Avg => Cell::Dec(floats.iter().sum::<f64>() / floats.len() as f64),
                    }
                })
                .collect();
            (k, out)
        })
        .collect()
}

/// Converts an engine answer to the oracle's shape and checks its row order
/// (group values ascending, nulls last).
pub fn to_answer(spec: &QuerySpec, rs: &RecordSet) -> Result<Answer, String> {
    let g = spec.group_by.len();
    let keys: Vec<Vec<Option<String>>> = rs
        .rows
        .iter()
        .map(|r| {
            r[..g]
                .iter()
                .map(|v| match v {
                    Value::Text(s) => Some(s.clone()),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let order = |k: &Vec<Option<String>>| -> Vec<(bool, String)> {
        k.iter().map(|v| (v.is_none(), v.clone().unwrap_or_default())).collect()
    };
    if keys.windows(2).any(|w| order(&w[0]) >= order(&w[1])) {
        return Err(format!("rows out of order: {keys:?}"));
    }
    Ok(keys.into_iter().zip(&rs.rows).map(|(k, r)| (k, r[g..].iter().map(cell).collect())).collect())
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Exact for integers, relative error 1e-9 for decimals.
pub fn compare(got: &Answer, want: &Answer) -> Result<(), String> {
    if got.len() != want.len() || got.keys().ne(want.keys()) {
        return Err(format!("groups differ: {:?} vs {:?}", got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>()));
    }
    for (k, w) in want {
        let g = &got[k];
        for (x, y) in g.iter().zip(w) {
            let ok = match (x, y) {
                (Cell::Dec(a), Cell::Dec(b)) => close(*a, *b),
                (a, b) => a == b,
            };
            if !ok {
                return Err(format!("group {k:?}: got {g:?}, want {w:?}"));
            }
        }
    }
    Ok(())
}

/// Answer through the cheapest path the engine would take: the smallest
/// covering materialized cuboid.
pub fn engine_answer(inst: &Instance, spec: &QuerySpec) -> Result<Answer, String> {
    let need = spec.needed_attrs();
    let (_, cuboid) = inst
        .cuboids
        .iter()
        .filter(|(attrs, _)| need.iter().all(|a| attrs.contains(a)))
        .min_by_key(|(attrs, rs)| (rs.len(), attrs.len()))
        .ok_or("no covering cuboid")?;
    let rs = answer(&inst.def, spec, cuboid).map_err(|e| e.to_string())?;
    to_answer(spec, &rs)
}

/// Answers through every covering cuboid plus one built on the fly from the
/// base; all must agree with the first.
pub fn all_paths_agree(inst: &Instance, spec: &QuerySpec) -> Result<usize, String> {
    let need = spec.needed_attrs();
    let mut paths: Vec<RecordSet> = inst
        .cuboids
        .iter()
        .filter(|(attrs, _)| need.iter().all(|a| attrs.contains(a)))
        .map(|(_, rs)| rs.clone())
        .collect();
    let need: Vec<String> = need.into_iter().collect();
    paths.push(build_cuboid(&inst.def, &inst.base, &need).map_err(|e| e.to_string())?);
    let mut first: Option<Answer> = None;
    for rs in &paths {
        let a = to_answer(spec, &answer(&inst.def, spec, rs).map_err(|e| e.to_string())?)?;
        match &first {
            None => first = Some(a),
            Some(f) => compare(&a, f)?,
        }
    }
    Ok(paths.len())
}
