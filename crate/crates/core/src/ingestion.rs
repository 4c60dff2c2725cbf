//! Source wrappers: batch parsing, schema inference, structural change
//! detection, and typing of raw level-0 records against their registered
//! schema.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::metastore::{
    ChangeOrigin, ChangePayload, ChangeStatus, ChangeType, DatasetSchema, FieldDef,
    SourceChangeRecord, SourceFormat,
};
use crate::value::{classify_text, coerce_observed, json_to_value, parse_text_as, Value, ValueType};

/// One cell as observed in a source batch, before typing.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    /// Delimited text; the empty string is null.
    Text(String),
    /// A JSON record member.
    Json(Value),
}

impl Cell {
    pub fn observed_type(&self) -> Option<ValueType> {
        match self {
            Cell::Text(s) => classify_text(s),
            Cell::Json(v) => v.value_type(),
        }
    }

    pub fn coerce(&self, ty: ValueType) -> Result<Value> {
        match self {
            Cell::Text(s) if s.is_empty() => Ok(Value::Null),
            Cell::Text(s) => parse_text_as(s, ty)
                .ok_or_else(|| Error::Type(format!("{s:?} is not a valid {ty}"))),
            Cell::Json(v) => coerce_observed(v, ty),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Cell::Text(s) if s.is_empty() => serde_json::Value::Null,
            Cell::Text(s) => serde_json::Value::String(s.clone()),
            Cell::Json(v) => v.to_json(),
        }
    }
}

/// A parsed batch: column names in first-appearance order and rows aligned
/// to them (`None` = member absent from that record).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedBatch {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<Cell>>>,
}

impl ParsedBatch {
    pub fn record_count(&self) -> usize {
        self.rows.len()
    }

    fn row_json(&self, row: &[Option<Cell>]) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (c, cell) in self.columns.iter().zip(row) {
            if let Some(cell) = cell {
                obj.insert(c.clone(), cell.to_json());
            }
        }
        serde_json::Value::Object(obj)
    }
}

/// Parses a payload according to the source format. RAW_TEXT payloads are
/// returned as one `line` column per non-empty line.
pub fn parse_batch(format: SourceFormat, delimiter: Option<char>, bytes: &[u8]) -> Result<ParsedBatch> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(format!("payload is not UTF-8: {e}")))?;
    match format {
        SourceFormat::Delimited => parse_delimited(text, delimiter.unwrap_or(',')),
        SourceFormat::JsonRecords => parse_json_records(text),
        SourceFormat::RawText => Ok(ParsedBatch {
            columns: vec!["line".into()],
            rows: text
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| vec![Some(Cell::Text(l.to_string()))])
                .collect(),
        }),
    }
}

fn parse_delimited(text: &str, delimiter: char) -> Result<ParsedBatch> {
    if text.trim().is_empty() {
        return Ok(ParsedBatch::default());
    }
    if !delimiter.is_ascii() {
        return Err(Error::Parse(format!("delimiter {delimiter:?} is not a single byte")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let columns: Vec<String> = headers.iter().map(str::to_string).collect();
    let mut seen = BTreeSet::new();
    for c in &columns {
        if c.is_empty() || !seen.insert(c.as_str()) {
            return Err(Error::Parse(format!("bad or duplicate header {c:?}")));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        rows.push(rec.iter().map(|s| Some(Cell::Text(s.to_string()))).collect());
    }
    Ok(ParsedBatch { columns, rows })
}

fn parse_json_records(text: &str) -> Result<ParsedBatch> {
    let mut columns: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut objects = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        let serde_json::Value::Object(obj) = value else {
            return Err(Error::Parse(format!("line {} is not a JSON object", n + 1)));
        };
        for k in obj.keys() {
            if !index.contains_key(k) {
                index.insert(k.clone(), columns.len());
                columns.push(k.clone());
            }
        }
        objects.push(obj);
    }
    let rows = objects
        .into_iter()
        .map(|obj| {
            let mut row = vec![None; columns.len()];
            for (k, v) in obj {
                row[index[&k]] = Some(Cell::Json(json_to_value(&v)));
            }
            row
        })
        .collect();
    Ok(ParsedBatch { columns, rows })
}

/// Inferred column: `value_type` is `None` when every observed value was null.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferredField {
    pub name: String,
    pub value_type: Option<ValueType>,
    pub nullable: bool,
}

/// Scans every record and folds each column's observed types through the
/// lattice. Absent members count as null.
pub fn infer_observed(batch: &ParsedBatch) -> Vec<InferredField> {
    let mut out: Vec<InferredField> = batch
        .columns
        .iter()
        .map(|c| InferredField { name: c.clone(), value_type: None, nullable: false })
        .collect();
    for row in &batch.rows {
        for (f, cell) in out.iter_mut().zip(row) {
            match cell.as_ref().and_then(Cell::observed_type) {
                Some(t) => f.value_type = ValueType::lub_opt(f.value_type, Some(t)),
                None => f.nullable = true,
            }
        }
    }
    out
}

/// Field list inferred from a batch. All-null columns are reported as
/// nullable TEXT.
pub fn infer_schema(format: SourceFormat, batch: &ParsedBatch) -> Result<Vec<FieldDef>> {
    if format == SourceFormat::RawText {
        return Err(Error::Unparseable("raw text batches carry no record structure".into()));
    }
    Ok(infer_observed(batch)
        .into_iter()
        .map(|f| FieldDef::new(f.name, f.value_type.unwrap_or(ValueType::Text), f.nullable))
        .collect())
}

/// Aligns an inferred field list with the registered schema before
/// comparison: a column whose observed values all fit the registered type
/// keeps the registered type.
pub fn reconcile(inferred: &[InferredField], registered: &DatasetSchema) -> Vec<FieldDef> {
    inferred
        .iter()
        .map(|f| {
            let ty = match (registered.field_or_alias(&f.name), f.value_type) {
                (Some(r), None) => r.value_type,
                (Some(r), Some(t)) if t.widens_to(r.value_type) => r.value_type,
                (_, Some(t)) => t,
                (None, None) => ValueType::Text,
            };
            FieldDef::new(f.name.clone(), ty, f.nullable)
        })
        .collect()
}

/// Structural diff of an inferred field list against a registered schema.
///
/// Emits, in order: removed fields, added fields, retyped fields, then one
/// rename candidate per (removed, added) pair with equal types.
pub fn detect_changes(
    source_id: &str,
    inferred: &[FieldDef],
    registered: &DatasetSchema,
    detected_at: &str,
) -> Vec<SourceChangeRecord> {
    let draft = |change_type, payload| SourceChangeRecord {
        change_id: String::new(),
        source_id: source_id.to_string(),
        change_type,
        payload,
        detected_at: detected_at.to_string(),
        origin: ChangeOrigin::Wrapper,
        status: ChangeStatus::Pending,
    };
    let dataset = Some(registered.dataset_id.clone());
    let removed: Vec<&FieldDef> = registered
        .fields
        .iter()
        .filter(|r| !inferred.iter().any(|i| i.name == r.name || r.aliases.contains(&i.name)))
        .collect();
    let added: Vec<&FieldDef> = inferred
        .iter()
        .filter(|i| registered.field_or_alias(&i.name).is_none())
        .collect();
    let mut out = Vec::new();
    for r in &removed {
        out.push(draft(
            ChangeType::AttributeRemoved,
            ChangePayload {
                dataset_id: dataset.clone(),
                attribute: Some(r.name.clone()),
                old_type: Some(r.value_type),
                ..Default::default()
            },
        ));
    }
    for a in &added {
        out.push(draft(
            ChangeType::AttributeAdded,
            ChangePayload {
                dataset_id: dataset.clone(),
                attribute: Some(a.name.clone()),
                new_type: Some(a.value_type),
                ..Default::default()
            },
        ));
    }
    for i in inferred {
        if let Some(r) = registered.field_or_alias(&i.name) {
            if r.value_type != i.value_type {
                out.push(draft(
                    ChangeType::AttributeTypeChanged,
                    ChangePayload {
                        dataset_id: dataset.clone(),
                        attribute: Some(r.name.clone()),
                        old_type: Some(r.value_type),
                        new_type: Some(i.value_type),
                        ..Default::default()
                    },
                ));
            }
        }
    }
    for r in &removed {
        for a in &added {
            if r.value_type == a.value_type {
                out.push(draft(
                    ChangeType::RenameCandidate,
                    ChangePayload {
                        dataset_id: dataset.clone(),
                        attribute: Some(r.name.clone()),
                        new_attribute: Some(a.name.clone()),
                        old_type: Some(r.value_type),
                        new_type: Some(a.value_type),
                        ..Default::default()
                    },
                ));
            }
        }
    }
    out
}

/// Why a raw record could not be typed against its schema.
#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    /// Value does not fit the declared type; carries the observed type.
    TypeMismatch { declared: ValueType, observed: ValueType },
    /// A non-nullable member is absent from the record.
    Missing,
    /// A non-nullable member holds null.
    NullValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
    pub record: serde_json::Value,
}

/// Types raw records against the registered level-0 schema. Members the
/// schema does not declare are ignored; offending records are returned as
/// violations and excluded from the output rows.
pub fn conform(batch: &ParsedBatch, schema: &DatasetSchema) -> (Vec<Vec<Value>>, Vec<Violation>) {
    let positions: Vec<Option<usize>> = schema
        .fields
        .iter()
        .map(|f| {
            std::iter::once(&f.name)
                .chain(&f.aliases)
                .find_map(|n| batch.columns.iter().position(|c| c == n))
        })
        .collect();
    let mut rows = Vec::with_capacity(batch.rows.len());
    let mut violations = Vec::new();
    'rows: for raw in &batch.rows {
        let mut row = Vec::with_capacity(schema.fields.len());
        for (f, pos) in schema.fields.iter().zip(&positions) {
            let cell = pos.and_then(|p| raw[p].as_ref());
            let violation = |kind| Violation { field: f.name.clone(), kind, record: batch.row_json(raw) };
            let value = match cell {
                None if !f.nullable => {
                    violations.push(violation(ViolationKind::Missing));
                    continue 'rows;
                }
                None => Value::Null,
                Some(cell) => match cell.coerce(f.value_type) {
                    Ok(v) => v,
                    Err(_) => {
                        let observed = cell
                            .observed_type()
                            .map(|t| t.lub(f.value_type))
                            .unwrap_or(ValueType::Text);
                        violations.push(violation(ViolationKind::TypeMismatch {
                            declared: f.value_type,
                            observed,
                        }));
                        continue 'rows;
                    }
                },
            };
            if value.is_null() && !f.nullable {
                violations.push(violation(ViolationKind::NullValue));
                continue 'rows;
            }
            row.push(value);
        }
        rows.push(row);
    }
    (rows, violations)
}
