//! ELT transform steps: their static output schemas and their execution
//! over record sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::expr::{self, RowView};
use super::star::{build_star, StarSpec, StarTables};
use super::RecordSet;
use crate::error::{Error, Result};
use crate::metastore::FieldDef;
use crate::value::{Value, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggFn {
    Sum,
    Count,
    Min,
    Max,
    Avg,
}

impl AggFn {
    pub fn name(self) -> &'static str {
        match self {
            AggFn::Sum => "sum",
            AggFn::Count => "count",
            AggFn::Min => "min",
            AggFn::Max => "max",
            AggFn::Avg => "avg",
        }
    }

    /// Output type of the aggregate over an input of type `input`.
    pub fn output_type(self, input: ValueType) -> Result<ValueType> {
        match self {
            AggFn::Count => Ok(ValueType::Integer),
            AggFn::Sum if input.is_numeric() => Ok(input),
            AggFn::Avg if input.is_numeric() => Ok(ValueType::Decimal),
            AggFn::Min | AggFn::Max => Ok(input),
            _ => Err(Error::Type(format!("{} needs a numeric input, found {input}", self.name()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JoinKind {
    Inner,
    Left,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinKey {
    pub left: String,
    pub right: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggMeasure {
    pub field: String,
    pub func: AggFn,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransformStep {
    Project {
        fields: Vec<String>,
    },
    Rename {
        renames: BTreeMap<String, String>,
    },
    Filter {
        predicate: String,
    },
    Derive {
        field: String,
        expr: String,
        value_type: ValueType,
        /// Declares the output nullable even when the expression never
        /// yields null.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        nullable: bool,
    },
    Extract {
        source: String,
        pattern: String,
        group: usize,
        field: String,
    },
    Join {
        dataset: String,
        on: Vec<JoinKey>,
        kind: JoinKind,
    },
    Union {
        dataset: String,
    },
    Aggregate {
        group_by: Vec<String>,
        measures: Vec<AggMeasure>,
    },
    LoadStar {
        star: StarSpec,
    },
}

impl TransformStep {
    pub fn op_name(&self) -> &'static str {
        match self {
            TransformStep::Project { .. } => "PROJECT",
            TransformStep::Rename { .. } => "RENAME",
            TransformStep::Filter { .. } => "FILTER",
            TransformStep::Derive { .. } => "DERIVE",
            TransformStep::Extract { .. } => "EXTRACT",
            TransformStep::Join { .. } => "JOIN",
            TransformStep::Union { .. } => "UNION",
            TransformStep::Aggregate { .. } => "AGGREGATE",
            TransformStep::LoadStar { .. } => "LOAD_STAR",
        }
    }

    /// Other datasets this step reads besides the pipeline input.
    pub fn side_input(&self) -> Option<&str> {
        match self {
            TransformStep::Join { dataset, .. } | TransformStep::Union { dataset } => Some(dataset),
            _ => None,
        }
    }
}

/// Static shape produced by a step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepShape {
    Rows(Vec<FieldDef>),
    Star { fact: Vec<FieldDef>, dimensions: Vec<(String, Vec<FieldDef>)> },
}

fn find<'a>(fields: &'a [FieldDef], name: &str) -> Result<&'a FieldDef> {
    fields
        .iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::SchemaMismatch(format!("unknown field {name:?}")))
}

fn ensure_fresh(fields: &[FieldDef], name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::SchemaMismatch("empty output field name".into()));
    }
    if fields.iter().any(|f| f.name == name) {
        return Err(Error::SchemaMismatch(format!("output field {name:?} already exists")));
    }
    Ok(())
}

pub(crate) fn compile_extract(pattern: &str, group: usize) -> Result<Regex> {
    let re = Regex::new(pattern).map_err(|e| Error::SchemaMismatch(format!("invalid regex: {e}")))?;
    if group >= re.captures_len() {
        return Err(Error::SchemaMismatch(format!(
            "capture group {group} out of range for {pattern:?}"
        )));
    }
    Ok(re)
}

fn key_type(a: ValueType, b: ValueType) -> Option<ValueType> {
    if a == b {
        Some(a)
    } else if a.is_numeric() && b.is_numeric() {
        Some(ValueType::Decimal)
    } else {
        None
    }
}

/// Output fields of a join: left fields, then right fields except right keys
/// that share their left partner's name.
fn join_fields(
    left: &[FieldDef],
    right: &[FieldDef],
    on: &[JoinKey],
    kind: JoinKind,
) -> Result<(Vec<FieldDef>, Vec<usize>)> {
    if on.is_empty() {
        return Err(Error::SchemaMismatch("join needs at least one key pair".into()));
    }
    for k in on {
        let l = find(left, &k.left)?;
        let r = find(right, &k.right)?;
        if key_type(l.value_type, r.value_type).is_none() {
            return Err(Error::SchemaMismatch(format!(
                "join key types differ: {} {} vs {} {}",
                k.left, l.value_type, k.right, r.value_type
            )));
        }
    }
    let mut out = left.to_vec();
    let mut kept = Vec::new();
    for (i, f) in right.iter().enumerate() {
        let merged_key = on.iter().any(|k| k.right == f.name && k.left == f.name);
        if merged_key {
            continue;
        }
        if out.iter().any(|o| o.name == f.name) {
            return Err(Error::SchemaMismatch(format!("join output field {:?} collides", f.name)));
        }
        let mut f = f.clone();
        if kind == JoinKind::Left {
            f.nullable = true;
        }
        out.push(f);
        kept.push(i);
    }
    Ok((out, kept))
}

/// Derives the output shape of `step` from its input fields.
pub fn step_shape(
    step: &TransformStep,
    input: &[FieldDef],
    side: &dyn Fn(&str) -> Option<Vec<FieldDef>>,
) -> Result<StepShape> {
    let rows = match step {
        TransformStep::Project { fields } => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(fields.len());
            for name in fields {
                if !seen.insert(name) {
                    return Err(Error::SchemaMismatch(format!("field {name:?} projected twice")));
                }
                out.push(find(input, name)?.clone());
            }
            out
        }
        TransformStep::Rename { renames } => {
            for old in renames.keys() {
                find(input, old)?;
            }
            let mut out: Vec<FieldDef> = input
                .iter()
                .map(|f| match renames.get(&f.name) {
                    Some(new) => FieldDef { name: new.clone(), ..f.clone() },
                    None => f.clone(),
                })
                .collect();
            let mut seen = BTreeSet::new();
            for f in &out {
                if f.name.is_empty() || !seen.insert(f.name.clone()) {
                    return Err(Error::SchemaMismatch(format!("rename produces duplicate {:?}", f.name)));
                }
            }
            out.shrink_to_fit();
            out
        }
        TransformStep::Filter { predicate } => {
            let e = expr::parse(predicate)?;
            let t = expr::infer_type(&e, input)?;
            if !matches!(t.value_type, None | Some(ValueType::Boolean)) {
                return Err(Error::Type("filter predicate must be boolean".into()));
            }
            input.to_vec()
        }
        TransformStep::Derive { field, expr: src, value_type, nullable } => {
            ensure_fresh(input, field)?;
            let e = expr::parse(src)?;
            let t = expr::infer_type(&e, input)?;
            if let Some(ty) = t.value_type {
                if !ty.widens_to(*value_type) {
                    return Err(Error::Type(format!(
                        "derived {field:?} declared {value_type} but expression is {ty}"
                    )));
                }
            }
            let mut out = input.to_vec();
            out.push(FieldDef::new(field.clone(), *value_type, t.nullable || *nullable));
            out
        }
        TransformStep::Extract { source, pattern, group, field } => {
            let src = find(input, source)?;
            if !matches!(src.value_type, ValueType::Text | ValueType::Timestamp) {
                return Err(Error::SchemaMismatch(format!("extract source {source:?} is not text")));
            }
            ensure_fresh(input, field)?;
            compile_extract(pattern, *group)?;
            let mut out = input.to_vec();
            out.push(FieldDef::new(field.clone(), ValueType::Text, true));
            out
        }
        TransformStep::Join { dataset, on, kind } => {
            let right = side(dataset)
                .ok_or_else(|| Error::SchemaMismatch(format!("join dataset {dataset:?} is not a mapping source")))?;
            join_fields(input, &right, on, *kind)?.0
        }
        TransformStep::Union { dataset } => {
            let other = side(dataset)
                .ok_or_else(|| Error::SchemaMismatch(format!("union dataset {dataset:?} is not a mapping source")))?;
            let same = other.len() == input.len()
                && other
                    .iter()
                    .zip(input)
                    .all(|(a, b)| a.name == b.name && a.value_type == b.value_type);
            if !same {
                return Err(Error::SchemaMismatch(format!("union with {dataset:?} needs identical schemas")));
            }
            input
                .iter()
                .zip(&other)
                .map(|(a, b)| FieldDef { nullable: a.nullable || b.nullable, ..a.clone() })
                .collect()
        }
        TransformStep::Aggregate { group_by, measures } => {
            if group_by.is_empty() && measures.is_empty() {
                return Err(Error::SchemaMismatch("aggregate without groups or measures".into()));
            }
            let mut out: Vec<FieldDef> = Vec::new();
            for g in group_by {
                let f = find(input, g)?.clone();
                ensure_fresh(&out, &f.name)?;
                out.push(f);
            }
            for m in measures {
                let f = find(input, &m.field)?;
                let ty = m.func.output_type(f.value_type)?;
                ensure_fresh(&out, &m.out)?;
                let nullable = m.func != AggFn::Count && f.nullable;
                out.push(FieldDef::new(m.out.clone(), ty, nullable));
            }
            out
        }
        TransformStep::LoadStar { star } => {
            let (fact, dimensions) = star.shapes(input)?;
            return Ok(StepShape::Star { fact, dimensions });
        }
    };
    Ok(StepShape::Rows(rows))
}

/// Records removed from a run because a per-record evaluation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Quarantined {
    pub record: serde_json::Value,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub enum StepOutput {
    Rows(RecordSet),
    Star(StarTables),
}

fn quarantine(fields: &[FieldDef], row: &[Value], err: &Error) -> Quarantined {
    Quarantined { record: super::row_to_json(fields, row), reason: err.to_string() }
}

fn hash_key(row: &[Value], idx: &[usize], types: &[ValueType]) -> Option<Vec<Value>> {
    let mut key = Vec::with_capacity(idx.len());
    for (&i, &ty) in idx.iter().zip(types) {
        let v = &row[i];
        if v.is_null() {
            return None;
        }
        key.push(v.widen_to(ty).unwrap_or_else(|_| v.clone()));
    }
    Some(key)
}

/// Executes one step. `side` resolves JOIN/UNION datasets to their current
/// contents. Per-record failures are quarantined instead of failing the run.
pub fn run_step(
    step: &TransformStep,
    input: RecordSet,
    side: &dyn Fn(&str) -> Option<RecordSet>,
    quarantined: &mut Vec<Quarantined>,
) -> Result<StepOutput> {
    let side_fields = |name: &str| side(name).map(|r| r.fields);
    let shape = step_shape(step, &input.fields, &side_fields)?;
    let out_fields = match &shape {
        StepShape::Rows(f) => f.clone(),
        StepShape::Star { .. } => Vec::new(),
    };
    let rows = match step {
        TransformStep::Project { fields } => {
            let idx: Vec<usize> = fields
                .iter()
                .map(|n| input.index_of(n).expect("checked by shape"))
                .collect();
            input
                .rows
                .into_iter()
                .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                .collect()
        }
        TransformStep::Rename { .. } => input.rows,
        TransformStep::Filter { predicate } => {
            let e = expr::parse(predicate)?;
            let mut kept = Vec::with_capacity(input.rows.len());
            for row in input.rows {
                match expr::eval_predicate(&e, &RowView { fields: &input.fields, row: &row }) {
                    Ok(true) => kept.push(row),
                    Ok(false) => {}
                    Err(err) => quarantined.push(quarantine(&input.fields, &row, &err)),
                }
            }
            kept
        }
        TransformStep::Derive { expr: src, value_type, .. } => {
            let e = expr::parse(src)?;
            let nullable = out_fields.last().map(|f| f.nullable).unwrap_or(true);
            let mut out = Vec::with_capacity(input.rows.len());
            for mut row in input.rows {
                let v = expr::eval(&e, &RowView { fields: &input.fields, row: &row })
                    .and_then(|v| v.widen_to(*value_type));
                match v {
                    Ok(v) if v.is_null() && !nullable => quarantined.push(quarantine(
                        &input.fields,
                        &row,
                        &Error::Type("derived value is null".into()),
                    )),
                    Ok(v) => {
                        row.push(v);
                        out.push(row);
                    }
                    Err(err) => quarantined.push(quarantine(&input.fields, &row, &err)),
                }
            }
            out
        }
        TransformStep::Extract { source, pattern, group, .. } => {
            let re = compile_extract(pattern, *group)?;
            let i = input.index_of(source).expect("checked by shape");
            input
                .rows
                .into_iter()
                .map(|mut row| {
                    let v = match &row[i] {
                        Value::Text(t) | Value::Timestamp(t) => re
                            .captures(t)
                            .and_then(|c| c.get(*group))
                            .map(|m| Value::Text(m.as_str().to_string()))
                            .unwrap_or(Value::Null),
                        _ => Value::Null,
                    };
                    row.push(v);
                    row
                })
                .collect()
        }
        TransformStep::Join { dataset, on, kind } => {
            let right = side(dataset).expect("checked by shape");
            let (_, kept) = join_fields(&input.fields, &right.fields, on, *kind)?;
            let li: Vec<usize> = on.iter().map(|k| input.index_of(&k.left).unwrap()).collect();
            let ri: Vec<usize> = on.iter().map(|k| right.index_of(&k.right).unwrap()).collect();
            let types: Vec<ValueType> = li
                .iter()
                .zip(&ri)
                .map(|(&l, &r)| {
                    key_type(input.fields[l].value_type, right.fields[r].value_type).unwrap()
                })
                .collect();
            let mut index: HashMap<Vec<Value>, Vec<usize>> = HashMap::new();
            for (n, row) in right.rows.iter().enumerate() {
                if let Some(k) = hash_key(row, &ri, &types) {
                    index.entry(k).or_default().push(n);
                }
            }
            let mut out = Vec::new();
            for row in input.rows {
                let matches = hash_key(&row, &li, &types).and_then(|k| index.get(&k));
                match matches {
                    Some(ms) => {
                        for &m in ms {
                            let mut r = row.clone();
                            r.extend(kept.iter().map(|&i| right.rows[m][i].clone()));
                            out.push(r);
                        }
                    }
                    None if *kind == JoinKind::Left => {
                        let mut r = row;
                        r.extend(kept.iter().map(|_| Value::Null));
                        out.push(r);
                    }
                    None => {}
                }
            }
            out
        }
        TransformStep::Union { dataset } => {
            let other = side(dataset).expect("checked by shape");
            let mut rows = input.rows;
            rows.extend(other.rows);
            rows
        }
        TransformStep::Aggregate { group_by, measures } => {
            aggregate_rows(&input, group_by, measures, &out_fields)
        }
        TransformStep::LoadStar { star } => {
            return build_star(star, &input).map(StepOutput::Star);
        }
    };
    Ok(StepOutput::Rows(RecordSet { fields: out_fields, rows }))
}

/// Running state of one aggregate.
#[derive(Debug, Clone)]
pub(crate) enum Acc {
    Sum(Value),
    Count(i64),
    Min(Value),
    Max(Value),
    Avg(Value, i64),
}

impl Acc {
    pub(crate) fn new(func: AggFn) -> Acc {
        match func {
            AggFn::Sum => Acc::Sum(Value::Null),
            AggFn::Count => Acc::Count(0),
            AggFn::Min => Acc::Min(Value::Null),
            AggFn::Max => Acc::Max(Value::Null),
            AggFn::Avg => Acc::Avg(Value::Null, 0),
        }
    }

    pub(crate) fn add_sum(acc: &Value, v: &Value) -> Value {
        match (acc, v) {
            (_, Value::Null) => acc.clone(),
            (Value::Null, v) => v.clone(),
            (Value::Int(a), Value::Int(b)) => match a.checked_add(*b) {
                Some(s) => Value::Int(s),
                None => Value::Dec(*a as f64 + *b as f64),
            },
            (a, b) => Value::Dec(a.as_f64().unwrap_or(0.0) + b.as_f64().unwrap_or(0.0)),
        }
    }

    pub(crate) fn update(&mut self, v: &Value) {
        match self {
            Acc::Sum(s) => *s = Acc::add_sum(s, v),
            Acc::Count(c) => {
                if !v.is_null() {
                    *c += 1
                }
            }
            Acc::Min(m) => {
                if !v.is_null() && (m.is_null() || v < m) {
                    *m = v.clone()
                }
            }
            Acc::Max(m) => {
                if !v.is_null() && (m.is_null() || v > m) {
                    *m = v.clone()
                }
            }
            Acc::Avg(s, c) => {
                if !v.is_null() {
                    *s = Acc::add_sum(s, v);
                    *c += 1;
                }
            }
        }
    }

    pub(crate) fn finish(&self) -> Value {
        match self {
            Acc::Sum(s) | Acc::Min(s) | Acc::Max(s) => s.clone(),
            Acc::Count(c) => Value::Int(*c),
            Acc::Avg(_, 0) => Value::Null,
            Acc::Avg(s, c) => Value::Dec(s.as_f64().unwrap_or(0.0) / *c as f64),
        }
    }
}

fn aggregate_rows(
    input: &RecordSet,
    group_by: &[String],
    measures: &[AggMeasure],
    out_fields: &[FieldDef],
) -> Vec<Vec<Value>> {
    let gi: Vec<usize> = group_by.iter().map(|g| input.index_of(g).unwrap()).collect();
    let mi: Vec<usize> = measures.iter().map(|m| input.index_of(&m.field).unwrap()).collect();
    let mut order: Vec<Vec<Value>> = Vec::new();
    let mut groups: HashMap<Vec<Value>, Vec<Acc>> = HashMap::new();
    for row in &input.rows {
        let key: Vec<Value> = gi.iter().map(|&i| row[i].clone()).collect();
        let accs = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            measures.iter().map(|m| Acc::new(m.func)).collect()
        });
        for (acc, &i) in accs.iter_mut().zip(&mi) {
            acc.update(&row[i]);
        }
    }
    if input.rows.is_empty() && group_by.is_empty() {
        // a global aggregate over no rows still yields one row
        order.push(Vec::new());
        groups.insert(Vec::new(), measures.iter().map(|m| Acc::new(m.func)).collect());
    }
    let measure_types: Vec<ValueType> =
        out_fields[group_by.len()..].iter().map(|f| f.value_type).collect();
    order
        .into_iter()
        .map(|key| {
            let accs = &groups[&key];
            let mut row = key;
            for (acc, ty) in accs.iter().zip(&measure_types) {
                let v = acc.finish();
                row.push(v.widen_to(*ty).unwrap_or(v));
            }
            row
        })
        .collect()
}
