//! Adaptation options for source changes: which options a change gets,
//! what each one would do to the highway (impact preview), and the
//! rewritten metadata an apply commits.

mod kind;
mod plan;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use kind::{default_option_kinds, OptionKind};
pub use plan::{plan_option, Plan, PlanMode};

use crate::error::{Error, Result};
use crate::highway::TransformStep;
use crate::metastore::{
    ChangeStatus, ChangeType, FieldDef, Metastore, PotentialChange, SourceChangeRecord,
};
use crate::value::ValueType;

/// A parameter the developer supplies when applying an option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredParameter {
    pub name: String,
    pub value_type: ValueType,
    pub description: String,
    pub optional: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeltaKind {
    Added,
    Removed,
    Retyped,
    Renamed,
    Nullability,
    DatasetAdded,
    DatasetRetired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDelta {
    pub change: DeltaKind,
    pub field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaImpact {
    pub dataset_id: String,
    pub level: u32,
    pub deltas: Vec<FieldDelta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepChange {
    Inserted,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDelta {
    /// Position in the rewritten step list (or the old one for removals).
    pub index: usize,
    pub change: StepChange,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<TransformStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<TransformStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingImpact {
    pub mapping_id: String,
    pub retired: bool,
    pub deltas: Vec<StepDelta>,
}

/// What applying one option would change. `blockers` lists reasons the
/// option cannot be applied in the current highway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub pc_id: String,
    pub option_kind: OptionKind,
    pub schemas: Vec<SchemaImpact>,
    pub mappings: Vec<MappingImpact>,
    pub cubes: Vec<String>,
    pub required_parameters: Vec<RequiredParameter>,
    pub blockers: Vec<String>,
}

/// What an option acts on: the level-0 dataset and the attribute detail,
/// taken from the source change or from developer-supplied parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    pub change_type: ChangeType,
    pub dataset: String,
    pub attribute: Option<String>,
    pub new_attribute: Option<String>,
    pub old_type: Option<ValueType>,
    pub new_type: Option<ValueType>,
    pub fields: Option<Vec<FieldDef>>,
}

impl Subject {
    pub fn attribute(&self) -> Result<&str> {
        self.attribute
            .as_deref()
            .ok_or_else(|| Error::ApplyFailed("the change names no attribute".into()))
    }
}

/// Option kinds generated for a change: its rule's kinds that are
/// compatible with the change type.
pub fn options_for(meta: &Metastore, change: &SourceChangeRecord) -> Result<Vec<OptionKind>> {
    match change.status {
        ChangeStatus::Resolved => return Err(Error::AlreadyResolved(change.change_id.clone())),
        ChangeStatus::InReview => return Err(Error::AlreadyProposed(change.change_id.clone())),
        ChangeStatus::Pending => {}
    }
    let kinds: Vec<OptionKind> = meta
        .rules_for(change.change_type)
        .option_kinds
        .into_iter()
        .filter(|k| k.compatible_with(change.change_type))
        .collect();
    Ok(kinds)
}

fn param<'a>(params: &'a BTreeMap<String, String>, name: &str) -> Result<&'a str> {
    params
        .get(name)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::MissingParameter(name.to_string()))
}

fn parse_type(params: &BTreeMap<String, String>, name: &str) -> Result<ValueType> {
    param(params, name)?
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("{name} must be a value type")))
}

/// The subject of a developer-initiated option (no source change), read
/// from its parameters: `dataset`, `field`, and per kind `value_type` or
/// `new_field`.
pub fn subject_from_parameters(
    meta: &Metastore,
    kind: OptionKind,
    params: &BTreeMap<String, String>,
) -> Result<Subject> {
    let dataset = param(params, "dataset")?.to_string();
    let schema = meta
        .current_schema(&dataset)
        .ok_or_else(|| Error::UnknownDataset(dataset.clone()))?;
    if schema.level != 0 {
        return Err(Error::InvalidParameter(format!(
            "{dataset:?} is not a level-0 dataset; changes enter the highway at level 0"
        )));
    }
    let mut s = Subject {
        change_type: ChangeType::AttributeAdded,
        dataset,
        attribute: None,
        new_attribute: None,
        old_type: None,
        new_type: None,
        fields: None,
    };
    if kind == OptionKind::Ignore {
        return Ok(s);
    }
    let field = param(params, "field")?.to_string();
    let existing = schema.field(&field).map(|f| f.value_type);
    match kind {
        OptionKind::PropagateAdd | OptionKind::NewDimension => {
            s.new_type = Some(parse_type(params, "value_type")?);
        }
        OptionKind::MapWithDefault | OptionKind::DropTarget => {
            s.change_type = ChangeType::AttributeRemoved;
            s.old_type = Some(existing.ok_or_else(|| Error::InvalidParameter(format!("no field {field:?}")))?);
        }
        OptionKind::RenameConfirm => {
            s.change_type = ChangeType::RenameCandidate;
            let ty = existing.ok_or_else(|| Error::InvalidParameter(format!("no field {field:?}")))?;
            s.old_type = Some(ty);
            s.new_type = Some(ty);
            s.new_attribute = Some(param(params, "new_field")?.to_string());
        }
        OptionKind::TypeWiden => {
            s.change_type = ChangeType::AttributeTypeChanged;
            s.old_type = Some(existing.ok_or_else(|| Error::InvalidParameter(format!("no field {field:?}")))?);
            s.new_type = Some(parse_type(params, "value_type")?);
        }
        OptionKind::Ignore => unreachable!(),
    }
    s.attribute = Some(field);
    Ok(s)
}

/// Subject of a stored proposal.
pub fn subject_of(meta: &Metastore, pc: &PotentialChange) -> Result<Subject> {
    let Some(change_id) = &pc.change_id else {
        return subject_from_parameters(meta, pc.option_kind, &pc.parameters);
    };
    let change = meta
        .change(change_id)
        .ok_or_else(|| Error::NotFound(format!("change {change_id:?}")))?;
    let dataset = match &change.payload.dataset_id {
        Some(d) => d.clone(),
        None => meta
            .source(&change.source_id)
            .map(|s| s.level0_dataset.clone())
            .ok_or_else(|| Error::UnknownSource(change.source_id.clone()))?,
    };
    Ok(Subject {
        change_type: change.change_type,
        dataset,
        attribute: change.payload.attribute.clone(),
        new_attribute: change.payload.new_attribute.clone(),
        old_type: change.payload.old_type,
        new_type: change.payload.new_type,
        fields: change.payload.fields.clone(),
    })
}

/// Parameters the developer must (or may) supply for `kind`.
pub fn required_parameters(kind: OptionKind, subject: &Subject) -> Vec<RequiredParameter> {
    let p = |name: &str, value_type, description: &str, optional| RequiredParameter {
        name: name.into(),
        value_type,
        description: description.into(),
        optional,
    };
    match kind {
        OptionKind::MapWithDefault => vec![p(
            "default",
            subject.old_type.unwrap_or(ValueType::Text),
            "value substituted for the removed attribute",
            false,
        )],
        OptionKind::RenameConfirm => {
            vec![p("confirm", ValueType::Boolean, "confirms the rename pairing is correct", false)]
        }
        OptionKind::TypeWiden => vec![p(
            "conversion",
            ValueType::Text,
            "expression over the attribute converting new values back to the old type",
            true,
        )],
        OptionKind::NewDimension => vec![
            p("dimension", ValueType::Text, "name of the new dimension", false),
            p("natural_key", ValueType::Text, "attribute identifying dimension members", false),
        ],
        OptionKind::PropagateAdd | OptionKind::DropTarget | OptionKind::Ignore => Vec::new(),
    }
}

/// Checks that every non-optional parameter is present and non-empty.
pub fn check_parameters(kind: OptionKind, subject: &Subject, params: &BTreeMap<String, String>) -> Result<()> {
    for r in required_parameters(kind, subject) {
        if !r.optional {
            match (r.value_type, params.get(&r.name)) {
                (ValueType::Text, Some(_)) if r.name == "default" => {}
                (_, Some(v)) if !v.is_empty() => {}
                _ => return Err(Error::MissingParameter(r.name)),
            }
        }
    }
    Ok(())
}
