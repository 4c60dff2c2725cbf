//! Star schema loading: dimension deduplication with dense surrogate keys
//! and a fact table of foreign keys plus measures.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::RecordSet;
use crate::error::{Error, Result};
use crate::metastore::FieldDef;
use crate::value::{Value, ValueType};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub natural_key: Vec<String>,
    pub attributes: Vec<String>,
    /// Attribute names ordered finest to coarsest.
    #[serde(default)]
    pub hierarchy: Vec<String>,
}

impl DimensionSpec {
    pub fn key_column(&self) -> String {
        format!("{}_key", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarSpec {
    pub fact: String,
    pub measures: Vec<String>,
    pub dimensions: Vec<DimensionSpec>,
}

/// Dataset id under which a dimension table of `fact` is stored.
pub fn dimension_dataset_id(fact: &str, dimension: &str) -> String {
    format!("{fact}__{dimension}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarTables {
    pub fact: RecordSet,
    /// (dimension name, table) in declaration order.
    pub dimensions: Vec<(String, RecordSet)>,
}

impl StarSpec {
    pub fn dimension(&self, name: &str) -> Option<&DimensionSpec> {
        self.dimensions.iter().find(|d| d.name == name)
    }

    pub fn validate(&self, input: &[FieldDef]) -> Result<()> {
        let lookup = |n: &str| {
            input
                .iter()
                .find(|f| f.name == n)
                .ok_or_else(|| Error::SchemaMismatch(format!("star references unknown field {n:?}")))
        };
        let mut measure_set = BTreeSet::new();
        for m in &self.measures {
            let f = lookup(m)?;
            if !f.value_type.is_numeric() {
                return Err(Error::SchemaMismatch(format!("measure {m:?} is not numeric")));
            }
            if !measure_set.insert(m.as_str()) {
                return Err(Error::SchemaMismatch(format!("measure {m:?} listed twice")));
            }
        }
        let mut names = BTreeSet::new();
        let mut key_columns = BTreeSet::new();
        for d in &self.dimensions {
            if d.name.is_empty() || !names.insert(d.name.as_str()) {
                return Err(Error::SchemaMismatch(format!("bad or duplicate dimension {:?}", d.name)));
            }
            if d.natural_key.is_empty() {
                return Err(Error::SchemaMismatch(format!("dimension {:?} has no natural key", d.name)));
            }
            key_columns.insert(d.key_column());
            let attrs: BTreeSet<&str> = d.attributes.iter().map(String::as_str).collect();
            if attrs.len() != d.attributes.len() {
                return Err(Error::SchemaMismatch(format!("dimension {:?} repeats an attribute", d.name)));
            }
            for a in &d.attributes {
                lookup(a)?;
                if measure_set.contains(a.as_str()) {
                    return Err(Error::SchemaMismatch(format!(
                        "{a:?} is both a measure and a dimension attribute"
                    )));
                }
                if *a == d.key_column() {
                    return Err(Error::SchemaMismatch(format!("attribute {a:?} shadows the surrogate key")));
                }
            }
            for k in d.natural_key.iter().chain(&d.hierarchy) {
                if !attrs.contains(k.as_str()) {
                    return Err(Error::SchemaMismatch(format!(
                        "{k:?} of dimension {:?} is not one of its attributes",
                        d.name
                    )));
                }
            }
        }
        for m in &self.measures {
            if key_columns.contains(m) {
                return Err(Error::SchemaMismatch(format!("measure {m:?} shadows a surrogate key")));
            }
        }
        Ok(())
    }

    /// Fact fields and per-dimension table fields.
    pub fn shapes(&self, input: &[FieldDef]) -> Result<(Vec<FieldDef>, Vec<(String, Vec<FieldDef>)>)> {
        self.validate(input)?;
        let field = |n: &str| input.iter().find(|f| f.name == n).cloned().expect("validated");
        let mut fact: Vec<FieldDef> = self
            .dimensions
            .iter()
            .map(|d| FieldDef::new(d.key_column(), ValueType::Integer, false))
            .collect();
        fact.extend(self.measures.iter().map(|m| field(m)));
        let dims = self
            .dimensions
            .iter()
            .map(|d| {
                let mut fields = vec![FieldDef::new(d.key_column(), ValueType::Integer, false)];
                fields.extend(d.attributes.iter().map(|a| field(a)));
                (d.name.clone(), fields)
            })
            .collect();
        Ok((fact, dims))
    }
}

/// Builds the star. Surrogate keys are dense from 1 in first-occurrence
/// order of the natural key; the first-seen attribute values win.
pub fn build_star(spec: &StarSpec, input: &RecordSet) -> Result<StarTables> {
    let (fact_fields, dim_fields) = spec.shapes(&input.fields)?;
    let idx = |n: &str| input.index_of(n).expect("validated");
    let mut fact_rows: Vec<Vec<Value>> = vec![Vec::with_capacity(fact_fields.len()); input.rows.len()];
    let mut dims = Vec::with_capacity(spec.dimensions.len());
    for (d, (name, fields)) in spec.dimensions.iter().zip(dim_fields) {
        let key_idx: Vec<usize> = d.natural_key.iter().map(|k| idx(k)).collect();
        let attr_idx: Vec<usize> = d.attributes.iter().map(|a| idx(a)).collect();
        let mut keys: HashMap<Vec<Value>, i64> = HashMap::new();
        let mut rows = Vec::new();
        for (row, fact_row) in input.rows.iter().zip(fact_rows.iter_mut()) {
            let nk: Vec<Value> = key_idx.iter().map(|&i| row[i].clone()).collect();
            let next = keys.len() as i64 + 1;
            let sk = *keys.entry(nk).or_insert_with(|| {
                let mut dim_row = vec![Value::Int(next)];
                dim_row.extend(attr_idx.iter().map(|&i| row[i].clone()));
                rows.push(dim_row);
                next
            });
            fact_row.push(Value::Int(sk));
        }
        dims.push((name, RecordSet { fields, rows }));
    }
    let measure_idx: Vec<usize> = spec.measures.iter().map(|m| idx(m)).collect();
    for (row, fact_row) in input.rows.iter().zip(fact_rows.iter_mut()) {
        fact_row.extend(measure_idx.iter().map(|&i| row[i].clone()));
    }
    Ok(StarTables { fact: RecordSet { fields: fact_fields, rows: fact_rows }, dimensions: dims })
}
