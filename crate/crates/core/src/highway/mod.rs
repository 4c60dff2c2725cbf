//! The data highway: record sets, mapping plans and execution, and the
//! refresh schedule. Orchestration against storage lives in [`crate::engine`].

pub mod expr;
pub mod star;
pub mod step;

use std::collections::BTreeMap;

pub use star::{build_star, dimension_dataset_id, DimensionSpec, StarSpec, StarTables};
pub use step::{run_step, step_shape, AggFn, AggMeasure, JoinKey, JoinKind, Quarantined, StepOutput, StepShape, TransformStep};

use crate::error::{Error, Result};
use crate::metastore::{FieldDef, MappingDefinition};
use crate::value::Value;

/// A materialized dataset: positional rows under an ordered field list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordSet {
    pub fields: Vec<FieldDef>,
    pub rows: Vec<Vec<Value>>,
}

impl RecordSet {
    pub fn empty(fields: Vec<FieldDef>) -> Self {
        RecordSet { fields, rows: Vec::new() }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field_names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Newline-delimited JSON, one object per row, keys in field order.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&row_to_json(&self.fields, row).to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(fields: Vec<FieldDef>, text: &str) -> Result<RecordSet> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            let row = fields
                .iter()
                .map(|f| {
                    let cell = obj.get(&f.name).unwrap_or(&serde_json::Value::Null);
                    Value::from_json_typed(cell, f.value_type)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(RecordSet { fields, rows })
    }

    pub fn to_json_rows(&self) -> Vec<serde_json::Value> {
        self.rows.iter().map(|r| row_to_json(&self.fields, r)).collect()
    }
}

pub fn row_to_json(fields: &[FieldDef], row: &[Value]) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    for (f, v) in fields.iter().zip(row) {
        obj.insert(f.name.clone(), v.to_json());
    }
    serde_json::Value::Object(obj)
}

/// True when a level with `period` refreshes at `tick`.
pub fn is_due(period: u64, tick: u64) -> bool {
    period > 0 && tick % period == 0
}

/// Static outcome of a mapping: the target's fields and, for star loads,
/// the dimension datasets it also writes.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingPlan {
    pub output: Vec<FieldDef>,
    pub dimensions: Vec<(String, Vec<FieldDef>)>,
    pub star: Option<StarSpec>,
}

fn invalid(m: &MappingDefinition, i: usize, step: &TransformStep, e: Error) -> Error {
    Error::MappingInvalid(format!("{} step {} ({}): {}", m.mapping_id, i + 1, step.op_name(), e))
}

/// Checks a mapping against its inputs' fields and derives its output.
pub fn plan_mapping(
    m: &MappingDefinition,
    schema_of: &dyn Fn(&str) -> Option<Vec<FieldDef>>,
) -> Result<MappingPlan> {
    let primary = m
        .source_datasets
        .first()
        .ok_or_else(|| Error::MappingInvalid(format!("{} has no source dataset", m.mapping_id)))?;
    for s in &m.source_datasets {
        if schema_of(s).is_none() {
            return Err(Error::MappingInvalid(format!(
                "{} references unknown dataset {s:?}",
                m.mapping_id
            )));
        }
    }
    let side = |name: &str| {
        if m.source_datasets.iter().any(|s| s == name) {
            schema_of(name)
        } else {
            None
        }
    };
    let mut fields = schema_of(primary).expect("checked above");
    for (i, step) in m.steps.iter().enumerate() {
        match step_shape(step, &fields, &side).map_err(|e| invalid(m, i, step, e))? {
            StepShape::Rows(next) => fields = next,
            StepShape::Star { fact, dimensions } => {
                if i + 1 != m.steps.len() {
                    return Err(invalid(
                        m,
                        i,
                        step,
                        Error::SchemaMismatch("LOAD_STAR must be the last step".into()),
                    ));
                }
                let TransformStep::LoadStar { star } = step else { unreachable!() };
                if star.fact != m.target_dataset {
                    return Err(invalid(
                        m,
                        i,
                        step,
                        Error::SchemaMismatch(format!(
                            "star fact {:?} differs from target {:?}",
                            star.fact, m.target_dataset
                        )),
                    ));
                }
                let dimensions = dimensions
                    .into_iter()
                    .map(|(d, f)| (dimension_dataset_id(&m.target_dataset, &d), f))
                    .collect();
                return Ok(MappingPlan { output: fact, dimensions, star: Some(star.clone()) });
            }
        }
    }
    if fields.is_empty() {
        return Err(Error::MappingInvalid(format!("{} produces no fields", m.mapping_id)));
    }
    Ok(MappingPlan { output: fields, dimensions: Vec::new(), star: None })
}

#[derive(Debug, Clone)]
pub struct MappingOutput {
    pub main: RecordSet,
    /// (dataset id, table) for star dimensions.
    pub dimensions: Vec<(String, RecordSet)>,
    pub quarantined: Vec<Quarantined>,
}

/// Runs a mapping's steps in order over the current contents of its sources.
pub fn run_mapping(m: &MappingDefinition, inputs: &BTreeMap<String, RecordSet>) -> Result<MappingOutput> {
    let schema_of = |name: &str| inputs.get(name).map(|r| r.fields.clone());
    plan_mapping(m, &schema_of)?;
    let side = |name: &str| inputs.get(name).cloned();
    let mut current = inputs[&m.source_datasets[0]].clone();
    let mut quarantined = Vec::new();
    for (i, step) in m.steps.iter().enumerate() {
        match run_step(step, current, &side, &mut quarantined).map_err(|e| invalid(m, i, step, e))? {
            StepOutput::Rows(r) => current = r,
            StepOutput::Star(star) => {
                let dimensions = star
                    .dimensions
                    .into_iter()
                    .map(|(d, r)| (dimension_dataset_id(&m.target_dataset, &d), r))
                    .collect();
                return Ok(MappingOutput { main: star.fact, dimensions, quarantined });
            }
        }
    }
    Ok(MappingOutput { main: current, dimensions: Vec::new(), quarantined })
}
