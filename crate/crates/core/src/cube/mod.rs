//! Cube engine: cuboid lattice materialization over a star schema, covering
//! cuboid selection, re-aggregating query answers and hierarchy navigation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::highway::step::Acc;
use crate::highway::{AggFn, RecordSet, StarSpec};
use crate::metastore::FieldDef;
use crate::value::{json_to_value, Value, ValueType};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeAttr {
    pub attribute: String,
    pub dimension: String,
    /// Index in the dimension hierarchy, finest first; `None` when the
    /// attribute is not part of a hierarchy.
    #[serde(default)]
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeMeasure {
    pub field: String,
    pub func: AggFn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

impl CubeMeasure {
    pub fn out_name(&self) -> String {
        self.out.clone().unwrap_or_else(|| format!("{}_{}", self.func.name(), self.field))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeDefinition {
    pub cube_id: String,
    pub fact_dataset: String,
    pub attrs: Vec<CubeAttr>,
    pub measures: Vec<CubeMeasure>,
    #[serde(default)]
    pub max_attrs: Option<usize>,
    /// Extra attribute sets to materialize regardless of `max_attrs`.
    #[serde(default)]
    pub cuboids: Vec<Vec<String>>,
}

impl CubeDefinition {
    pub fn attr(&self, name: &str) -> Option<&CubeAttr> {
        self.attrs.iter().find(|a| a.attribute == name)
    }

    pub fn attr_names(&self) -> Vec<String> {
        self.attrs.iter().map(|a| a.attribute.clone()).collect()
    }

    pub fn dimensions(&self) -> BTreeSet<String> {
        self.attrs.iter().map(|a| a.dimension.clone()).collect()
    }
}

/// Catalog entry for one materialized cuboid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuboidMeta {
    pub cube_id: String,
    pub attrs: Vec<String>,
    pub row_count: u64,
    pub built_at: String,
    pub valid: bool,
}

/// File stem of a cuboid: sorted attributes joined by `+`, or `apex`.
pub fn cuboid_label(attrs: &[String]) -> String {
    if attrs.is_empty() {
        "apex".to_string()
    } else {
        let mut sorted = attrs.to_vec();
        sorted.sort();
        sorted.join("+")
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidCube(msg.into())
}

/// Checks a definition against the star it reads and fills in hierarchy
/// positions from the star's dimension hierarchies.
pub fn validate_definition(
    def: &CubeDefinition,
    star: &StarSpec,
    fact_fields: &[FieldDef],
) -> Result<CubeDefinition> {
    if def.cube_id.is_empty() {
        return Err(invalid("cube_id is empty"));
    }
    if def.measures.is_empty() {
        return Err(invalid("a cube needs at least one measure"));
    }
    let mut out = def.clone();
    let mut names = BTreeSet::new();
    for a in &mut out.attrs {
        if !names.insert(a.attribute.clone()) {
            return Err(invalid(format!("attribute {:?} listed twice", a.attribute)));
        }
        let dim = star
            .dimension(&a.dimension)
            .ok_or_else(|| invalid(format!("unknown dimension {:?}", a.dimension)))?;
        if !dim.attributes.contains(&a.attribute) {
            return Err(invalid(format!(
                "{:?} is not an attribute of dimension {:?}",
                a.attribute, a.dimension
            )));
        }
        a.position = dim.hierarchy.iter().position(|h| *h == a.attribute);
    }
    let mut outs = BTreeSet::new();
    for m in &out.measures {
        let f = fact_fields
            .iter()
            .find(|f| f.name == m.field)
            .ok_or_else(|| invalid(format!("unknown measure field {:?}", m.field)))?;
        if !f.value_type.is_numeric() || !star.measures.contains(&m.field) {
            return Err(invalid(format!("{:?} is not a numeric fact measure", m.field)));
        }
        let name = m.out_name();
        if names.contains(&name) || !outs.insert(name.clone()) {
            return Err(invalid(format!("measure output {name:?} collides")));
        }
    }
    for c in &mut out.cuboids {
        for a in c.iter() {
            if !names.contains(a) {
                return Err(invalid(format!("cuboid attribute {a:?} is not a cube attribute")));
            }
        }
        c.sort();
        c.dedup();
    }
    Ok(out)
}

/// Flattens the star: one row per fact row with every cube attribute looked
/// up through its dimension's surrogate key, followed by the measure fields.
pub fn flat_base(
    def: &CubeDefinition,
    fact: &RecordSet,
    dims: &BTreeMap<String, RecordSet>,
) -> Result<RecordSet> {
    let mut fields = Vec::new();
    let mut lookups: Vec<(usize, HashMap<i64, usize>, &RecordSet, usize)> = Vec::new();
    let mut indexes: BTreeMap<&str, (usize, HashMap<i64, usize>)> = BTreeMap::new();
    for a in &def.attrs {
        let table = dims
            .get(&a.dimension)
            .ok_or_else(|| invalid(format!("dimension table {:?} missing", a.dimension)))?;
        let key_col = format!("{}_key", a.dimension);
        let (fact_key, index) = match indexes.get(a.dimension.as_str()) {
            Some(x) => x.clone(),
            None => {
                let fk = fact
                    .index_of(&key_col)
                    .ok_or_else(|| invalid(format!("fact lacks {key_col:?}")))?;
                let dk = table
                    .index_of(&key_col)
                    .ok_or_else(|| invalid(format!("dimension lacks {key_col:?}")))?;
                let index: HashMap<i64, usize> = table
                    .rows
                    .iter()
                    .enumerate()
                    .filter_map(|(n, r)| match r[dk] {
                        Value::Int(k) => Some((k, n)),
                        _ => None,
                    })
                    .collect();
                indexes.insert(&a.dimension, (fk, index.clone()));
                (fk, index)
            }
        };
        let col = table
            .index_of(&a.attribute)
            .ok_or_else(|| invalid(format!("dimension lacks attribute {:?}", a.attribute)))?;
        let mut f = table.fields[col].clone();
        f.nullable = true;
        fields.push(f);
        lookups.push((fact_key, index, table, col));
    }
    let mut measure_cols = Vec::new();
    for m in &def.measures {
        if measure_cols.iter().any(|(n, _): &(String, usize)| *n == m.field) {
            continue;
        }
        let i = fact
            .index_of(&m.field)
            .ok_or_else(|| invalid(format!("fact lacks measure {:?}", m.field)))?;
        fields.push(fact.fields[i].clone());
        measure_cols.push((m.field.clone(), i));
    }
    let rows = fact
        .rows
        .iter()
        .map(|row| {
            let mut out = Vec::with_capacity(fields.len());
            for (fk, index, table, col) in &lookups {
                let v = match &row[*fk] {
                    Value::Int(k) => index.get(k).map(|&n| table.rows[n][*col].clone()),
                    _ => None,
                };
                out.push(v.unwrap_or(Value::Null));
            }
            out.extend(measure_cols.iter().map(|(_, i)| row[*i].clone()));
            out
        })
        .collect();
    Ok(RecordSet { fields, rows })
}

/// Attribute sets the policy materializes: apex, every set of at most
/// `max_attrs` attributes, the full set, and the explicit list.
pub fn cuboid_sets(def: &CubeDefinition, default_max: usize) -> Vec<Vec<String>> {
    let mut names = def.attr_names();
    names.sort();
    let max = def.max_attrs.unwrap_or(default_max);
    let mut sets: BTreeSet<Vec<String>> = BTreeSet::new();
    let n = names.len();
    if n < usize::BITS as usize {
        for mask in 0u64..(1u64 << n) {
            if (mask.count_ones() as usize) <= max {
                sets.insert(
                    (0..n).filter(|i| mask & (1 << i) != 0).map(|i| names[i].clone()).collect(),
                );
            }
        }
    }
    sets.insert(Vec::new());
    sets.insert(names.clone());
    for c in &def.cuboids {
        let mut c = c.clone();
        c.sort();
        sets.insert(c);
    }
    let mut out: Vec<Vec<String>> = sets.into_iter().collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

fn measure_columns(def: &CubeDefinition, base: &RecordSet) -> Vec<FieldDef> {
    let mut out = Vec::new();
    for m in &def.measures {
        let input = base
            .fields
            .iter()
            .find(|f| f.name == m.field)
            .map(|f| f.value_type)
            .unwrap_or(ValueType::Decimal);
        let name = m.out_name();
        match m.func {
            AggFn::Avg => {
                out.push(FieldDef::new(format!("{name}__sum"), input, true));
                out.push(FieldDef::new(format!("{name}__cnt"), ValueType::Integer, false));
            }
            AggFn::Count => out.push(FieldDef::new(name, ValueType::Integer, false)),
            _ => out.push(FieldDef::new(name, input, true)),
        }
    }
    out
}

fn sort_rows(rows: &mut [Vec<Value>], width: usize) {
    rows.sort_by(|a, b| a[..width].cmp(&b[..width]));
}

/// Groups the flat base by `attrs` and pre-aggregates every cube measure.
pub fn build_cuboid(def: &CubeDefinition, base: &RecordSet, attrs: &[String]) -> Result<RecordSet> {
    let mut attrs = attrs.to_vec();
    attrs.sort();
    let ai: Vec<usize> = attrs
        .iter()
        .map(|a| base.index_of(a).ok_or_else(|| invalid(format!("unknown attribute {a:?}"))))
        .collect::<Result<_>>()?;
    let mi: Vec<usize> = def
        .measures
        .iter()
        .map(|m| base.index_of(&m.field).ok_or_else(|| invalid(format!("unknown measure {:?}", m.field))))
        .collect::<Result<_>>()?;
    let mut groups: HashMap<Vec<Value>, Vec<Acc>> = HashMap::new();
    for row in &base.rows {
        let key: Vec<Value> = ai.iter().map(|&i| row[i].clone()).collect();
        let accs = groups
            .entry(key)
            .or_insert_with(|| def.measures.iter().map(|m| Acc::new(m.func)).collect());
        for (acc, &i) in accs.iter_mut().zip(&mi) {
            acc.update(&row[i]);
        }
    }
    let mut fields: Vec<FieldDef> = ai.iter().map(|&i| base.fields[i].clone()).collect();
    fields.extend(measure_columns(def, base));
    let mut rows: Vec<Vec<Value>> = groups
        .into_iter()
        .map(|(mut key, accs)| {
            for acc in accs {
                match acc {
                    Acc::Avg(s, c) => {
                        key.push(s);
                        key.push(Value::Int(c));
                    }
                    other => key.push(other.finish()),
                }
            }
            key
        })
        .collect();
    sort_rows(&mut rows, attrs.len());
    Ok(RecordSet { fields, rows })
}

/// Builds every cuboid of the policy in parallel. Output order follows
/// [`cuboid_sets`].
pub fn materialize(
    def: &CubeDefinition,
    base: &RecordSet,
    default_max: usize,
) -> Result<Vec<(Vec<String>, RecordSet)>> {
    cuboid_sets(def, default_max)
        .into_par_iter()
        .map(|attrs| build_cuboid(def, base, &attrs).map(|c| (attrs, c)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl FilterOp {
    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            FilterOp::Eq => ord == Equal,
            FilterOp::Ne => ord != Equal,
            FilterOp::Lt => ord == Less,
            FilterOp::Le => ord != Greater,
            FilterOp::Gt => ord == Greater,
            FilterOp::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFilter {
    pub attr: String,
    pub op: FilterOp,
    pub value: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuerySpec {
    #[serde(default)]
    pub cube_id: String,
    #[serde(default)]
    pub group_by: Vec<String>,
    #[serde(default)]
    pub filters: Vec<QueryFilter>,
    /// Measure output names; empty selects all.
    #[serde(default)]
    pub measures: Vec<String>,
}

impl QuerySpec {
    /// Attributes a covering cuboid must contain.
    pub fn needed_attrs(&self) -> BTreeSet<String> {
        self.group_by.iter().chain(self.filters.iter().map(|f| &f.attr)).cloned().collect()
    }
}

/// Cuboid answering `spec`: among valid covering cuboids the one with fewest
/// rows, then fewest attributes, then the smallest attribute list. `None`
/// means the base must be used.
pub fn choose_cuboid(spec: &QuerySpec, cuboids: &[CuboidMeta]) -> Option<Vec<String>> {
    let need = spec.needed_attrs();
    cuboids
        .iter()
        .filter(|c| c.valid && c.cube_id == spec.cube_id)
        .filter(|c| need.iter().all(|a| c.attrs.contains(a)))
        .min_by(|a, b| {
            a.row_count
                .cmp(&b.row_count)
                .then(a.attrs.len().cmp(&b.attrs.len()))
                .then_with(|| a.attrs.cmp(&b.attrs))
        })
        .map(|c| c.attrs.clone())
}

fn filter_literal(attr: &FieldDef, json: &serde_json::Value) -> Result<Value> {
    let v = json_to_value(json);
    let ok = match (attr.value_type, &v) {
        (_, Value::Null) => false,
        (t, Value::Int(_) | Value::Dec(_)) => t.is_numeric(),
        (ValueType::Boolean, Value::Bool(_)) => true,
        (ValueType::Text, Value::Text(_) | Value::Timestamp(_)) => true,
        (ValueType::Timestamp, Value::Timestamp(_)) => true,
        _ => false,
    };
    if !ok {
        return Err(Error::InvalidFilter(format!(
            "literal {json} does not match {} attribute {:?}",
            attr.value_type, attr.name
        )));
    }
    Ok(match (attr.value_type, v) {
        (ValueType::Text, Value::Timestamp(s)) => Value::Text(s),
        (_, v) => v,
    })
}

/// Checks group-by, filter and measure references of a query.
pub fn validate_query(def: &CubeDefinition, spec: &QuerySpec) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in &spec.group_by {
        if def.attr(g).is_none() {
            return Err(Error::InvalidQuery(format!("{g:?} is not a cube attribute")));
        }
        if !seen.insert(g) {
            return Err(Error::InvalidQuery(format!("{g:?} grouped twice")));
        }
    }
    for f in &spec.filters {
        if def.attr(&f.attr).is_none() {
            return Err(Error::InvalidFilter(format!("{:?} is not a cube attribute", f.attr)));
        }
        if f.value.is_null() || f.value.is_array() || f.value.is_object() {
            return Err(Error::InvalidFilter(format!("filter on {:?} needs a scalar literal", f.attr)));
        }
    }
    for m in &spec.measures {
        if !def.measures.iter().any(|d| d.out_name() == *m) {
            return Err(Error::InvalidQuery(format!("unknown measure {m:?}")));
        }
    }
    Ok(())
}

/// Answers `spec` by filtering and re-aggregating a covering cuboid (or a
/// cuboid built on the fly from the base). Rows are ordered by the group-by
/// values with nulls last.
pub fn answer(def: &CubeDefinition, spec: &QuerySpec, cuboid: &RecordSet) -> Result<RecordSet> {
    validate_query(def, spec)?;
    let col = |name: &str| {
        cuboid
            .index_of(name)
            .ok_or_else(|| Error::InvalidQuery(format!("cuboid does not cover {name:?}")))
    };
    let mut filters = Vec::new();
    for f in &spec.filters {
        let i = col(&f.attr)?;
        filters.push((i, f.op, filter_literal(&cuboid.fields[i], &f.value)?));
    }
    let gi: Vec<usize> = spec.group_by.iter().map(|g| col(g)).collect::<Result<_>>()?;
    let selected: Vec<&crate::cube::CubeMeasure> = if spec.measures.is_empty() {
        def.measures.iter().collect()
    } else {
        spec.measures
            .iter()
            .map(|m| def.measures.iter().find(|d| d.out_name() == *m).expect("validated"))
            .collect()
    };
    // (function, primary column, count column for AVG)
    let mut plan = Vec::new();
    for m in &selected {
        let name = m.out_name();
        match m.func {
            AggFn::Avg => plan.push((m.func, col(&format!("{name}__sum"))?, Some(col(&format!("{name}__cnt"))?))),
            f => plan.push((f, col(&name)?, None)),
        }
    }
    let mut groups: HashMap<Vec<Value>, Vec<(Value, i64)>> = HashMap::new();
    'rows: for row in &cuboid.rows {
        for (i, op, lit) in &filters {
            let v = &row[*i];
            if v.is_null() || !op.holds(v.cmp(lit)) {
                continue 'rows;
            }
        }
        let key: Vec<Value> = gi.iter().map(|&i| row[i].clone()).collect();
        let accs = groups
            .entry(key)
            .or_insert_with(|| plan.iter().map(|_| (Value::Null, 0)).collect());
        for ((func, c, cnt), (acc, n)) in plan.iter().zip(accs.iter_mut()) {
            let v = &row[*c];
            match func {
                AggFn::Sum | AggFn::Count => *acc = Acc::add_sum(acc, v),
                AggFn::Min => {
                    if !v.is_null() && (acc.is_null() || v < acc) {
                        *acc = v.clone()
                    }
                }
                AggFn::Max => {
                    if !v.is_null() && (acc.is_null() || v > acc) {
                        *acc = v.clone()
                    }
                }
                AggFn::Avg => {
                    *acc = Acc::add_sum(acc, v);
                    if let Value::Int(k) = row[cnt.expect("avg has a count column")] {
                        *n += k;
                    }
                }
            }
        }
    }
    if groups.is_empty() && spec.group_by.is_empty() {
        groups.insert(Vec::new(), plan.iter().map(|_| (Value::Null, 0)).collect());
    }
    let mut fields: Vec<FieldDef> = gi.iter().map(|&i| cuboid.fields[i].clone()).collect();
    for (m, (func, c, _)) in selected.iter().zip(&plan) {
        let ty = match func {
            AggFn::Avg => ValueType::Decimal,
            AggFn::Count => ValueType::Integer,
            _ => cuboid.fields[*c].value_type,
        };
        fields.push(FieldDef::new(m.out_name(), ty, *func != AggFn::Count));
    }
    let mut rows: Vec<Vec<Value>> = groups
        .into_iter()
        .map(|(mut key, accs)| {
            for ((func, _, _), (acc, n)) in plan.iter().zip(accs) {
                key.push(match func {
                    AggFn::Count if acc.is_null() => Value::Int(0),
                    AggFn::Avg if n == 0 => Value::Null,
                    AggFn::Avg => Value::Dec(acc.as_f64().unwrap_or(0.0) / n as f64),
                    _ => acc,
                });
            }
            key
        })
        .collect();
    sort_rows(&mut rows, gi.len());
    Ok(RecordSet { fields, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    RollUp,
    DrillDown,
}

/// Moves `attr` one step along its hierarchy. Rolling up from the coarsest
/// level drops the attribute from the grouping.
pub fn navigate(def: &CubeDefinition, spec: &QuerySpec, direction: Direction, attr: &str) -> Result<QuerySpec> {
    validate_query(def, spec)?;
    let slot = spec
        .group_by
        .iter()
        .position(|g| g == attr)
        .ok_or_else(|| Error::InvalidQuery(format!("{attr:?} is not grouped")))?;
    let a = def.attr(attr).expect("validated");
    let pos = a
        .position
        .ok_or_else(|| Error::InvalidQuery(format!("{attr:?} is not part of a hierarchy")))?;
    let mut levels: Vec<&CubeAttr> = def
        .attrs
        .iter()
        .filter(|x| x.dimension == a.dimension && x.position.is_some())
        .collect();
    levels.sort_by_key(|x| x.position);
    let here = levels.iter().position(|x| x.position == Some(pos)).expect("present");
    let next = match direction {
        Direction::RollUp => levels.get(here + 1),
        Direction::DrillDown => match here.checked_sub(1) {
            Some(i) => levels.get(i),
            None => return Err(Error::NoFiner(format!("{attr:?} is the finest level"))),
        },
    };
    let mut out = spec.clone();
    match next {
        Some(n) if !spec.group_by.contains(&n.attribute) => out.group_by[slot] = n.attribute.clone(),
        _ => {
            out.group_by.remove(slot);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::highway::DimensionSpec;

    fn def(attrs: &[(&str, &str, Option<usize>)], measures: &[(&str, AggFn)]) -> CubeDefinition {
        CubeDefinition {
            cube_id: "c".into(),
            fact_dataset: "f".into(),
            attrs: attrs
                .iter()
                .map(|(a, d, p)| CubeAttr { attribute: a.to_string(), dimension: d.to_string(), position: *p })
                .collect(),
            measures: measures
                .iter()
                .map(|(f, func)| CubeMeasure { field: f.to_string(), func: *func, out: None })
                .collect(),
            max_attrs: None,
            cuboids: Vec::new(),
        }
    }

    fn base(rows: &[(&str, i64)]) -> RecordSet {
        RecordSet {
            fields: vec![FieldDef::new("d1", ValueType::Text, true), FieldDef::new("m", ValueType::Integer, false)],
            rows: rows.iter().map(|(d, m)| vec![Value::Text(d.to_string()), Value::Int(*m)]).collect(),
        }
    }

    fn meta(attrs: &[&str], rows: u64) -> CuboidMeta {
        CuboidMeta {
            cube_id: "c".into(),
            attrs: attrs.iter().map(|s| s.to_string()).collect(),
            row_count: rows,
            built_at: String::new(),
            valid: true,
        }
    }

    #[test]
    fn lattice_counts() {
        let d = def(&[("a", "x", None), ("b", "x", None), ("c", "x", None)], &[("m", AggFn::Sum)]);
        assert_eq!(cuboid_sets(&d, 3).len(), 8);
        assert_eq!(cuboid_sets(&d, 1).len(), 5);
        assert_eq!(cuboid_sets(&d, 0).len(), 2);
    }

    #[test]
    fn sum_by_dimension_and_grand_avg() {
        let d = def(&[("d1", "x", None)], &[("m", AggFn::Sum), ("m", AggFn::Avg), ("m", AggFn::Count)]);
        let b = base(&[("x", 2), ("x", 3), ("y", 5)]);
        let by_d1 = build_cuboid(&d, &b, &["d1".into()]).unwrap();
        let spec = QuerySpec { cube_id: "c".into(), group_by: vec!["d1".into()], measures: vec!["sum_m".into()], ..Default::default() };
        let r = answer(&d, &spec, &by_d1).unwrap();
        assert_eq!(r.rows, vec![vec![Value::Text("x".into()), Value::Int(5)], vec![Value::Text("y".into()), Value::Int(5)]]);

        let total = QuerySpec { cube_id: "c".into(), measures: vec!["avg_m".into()], ..Default::default() };
        let r = answer(&d, &total, &by_d1).unwrap();
        let Value::Dec(avg) = r.rows[0][0] else { panic!() };
        assert!((avg - 10.0 / 3.0).abs() < 1e-12);

        let filtered = QuerySpec {
            cube_id: "c".into(),
            filters: vec![QueryFilter { attr: "d1".into(), op: FilterOp::Eq, value: "x".into() }],
            measures: vec!["count_m".into()],
            ..Default::default()
        };
        assert_eq!(answer(&d, &filtered, &by_d1).unwrap().rows, vec![vec![Value::Int(2)]]);
    }

    #[test]
    fn filter_type_mismatch() {
        let d = def(&[("d1", "x", None)], &[("m", AggFn::Sum)]);
        let c = build_cuboid(&d, &base(&[("x", 1)]), &["d1".into()]).unwrap();
        let bad = QuerySpec {
            cube_id: "c".into(),
            filters: vec![QueryFilter { attr: "d1".into(), op: FilterOp::Lt, value: 3.into() }],
            ..Default::default()
        };
        assert_eq!(answer(&d, &bad, &c).unwrap_err().code(), "INVALID_FILTER");
        let unknown = QuerySpec {
            cube_id: "c".into(),
            filters: vec![QueryFilter { attr: "zz".into(), op: FilterOp::Eq, value: 3.into() }],
            ..Default::default()
        };
        assert_eq!(answer(&d, &unknown, &c).unwrap_err().code(), "INVALID_FILTER");
    }

    #[test]
    fn choice_rules() {
        let spec = QuerySpec { cube_id: "c".into(), group_by: vec!["d1".into()], ..Default::default() };
        let cs = vec![meta(&["d1"], 10), meta(&["d1", "d2"], 40)];
        assert_eq!(choose_cuboid(&spec, &cs), Some(vec!["d1".to_string()]));
        assert_eq!(choose_cuboid(&spec, &[meta(&["d2"], 1)]), None);
        let tie = vec![meta(&["d1", "d2"], 10), meta(&["d1"], 10)];
        assert_eq!(choose_cuboid(&spec, &tie), Some(vec!["d1".to_string()]));
        let mut stale = meta(&["d1"], 1);
        stale.valid = false;
        assert_eq!(choose_cuboid(&spec, &[stale]), None);
    }

    #[test]
    fn navigation_along_hierarchy() {
        let d = def(
            &[("day", "time", Some(0)), ("month", "time", Some(1)), ("year", "time", Some(2))],
            &[("m", AggFn::Sum)],
        );
        let q = |g: &str| QuerySpec { cube_id: "c".into(), group_by: vec![g.into()], ..Default::default() };
        assert_eq!(navigate(&d, &q("month"), Direction::RollUp, "month").unwrap().group_by, vec!["year"]);
        assert_eq!(navigate(&d, &q("day"), Direction::DrillDown, "day").unwrap_err().code(), "NO_FINER");
        assert!(navigate(&d, &q("year"), Direction::RollUp, "year").unwrap().group_by.is_empty());
        assert_eq!(navigate(&d, &q("year"), Direction::DrillDown, "year").unwrap().group_by, vec!["month"]);
    }

    #[test]
    fn definition_positions_come_from_star() {
        let star = StarSpec {
            fact: "f".into(),
            measures: vec!["m".into()],
            dimensions: vec![DimensionSpec {
                name: "time".into(),
                natural_key: vec!["day".into()],
                attributes: vec!["day".into(), "month".into()],
                hierarchy: vec!["day".into(), "month".into()],
            }],
        };
        let fact = vec![FieldDef::new("time_key", ValueType::Integer, false), FieldDef::new("m", ValueType::Integer, false)];
        let d = def(&[("month", "time", None)], &[("m", AggFn::Sum)]);
        assert_eq!(validate_definition(&d, &star, &fact).unwrap().attrs[0].position, Some(1));
        let bad = def(&[("city", "time", None)], &[("m", AggFn::Sum)]);
        assert_eq!(validate_definition(&bad, &star, &fact).unwrap_err().code(), "INVALID_CUBE");
    }
}
