use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::OptionKind;
use crate::highway::TransformStep;
use crate::value::ValueType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub value_type: ValueType,
    pub nullable: bool,
    /// Earlier names of a level-0 field, accepted when reading raw batches
    /// written before a confirmed rename.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl FieldDef {
    pub fn new(name: impl Into<String>, value_type: ValueType, nullable: bool) -> Self {
        FieldDef { name: name.into(), value_type, nullable, aliases: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetKind {
    Structured,
    Semistructured,
    Raw,
}

/// One version of a dataset layout at one highway level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub dataset_id: String,
    pub level: u32,
    pub fields: Vec<FieldDef>,
    pub version: u32,
    pub kind: DatasetKind,
}

impl DatasetSchema {
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Field known under `name` or under one of its earlier names.
    pub fn field_or_alias(&self, name: &str) -> Option<&FieldDef> {
        self.field(name)
            .or_else(|| self.fields.iter().find(|f| f.aliases.iter().any(|a| a == name)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighwayLevelDef {
    pub level: u32,
    pub tick_period: u64,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingDefinition {
    pub mapping_id: String,
    pub target_dataset: String,
    pub source_datasets: Vec<String>,
    pub steps: Vec<TransformStep>,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChangeType {
    AttributeAdded,
    AttributeRemoved,
    AttributeTypeChanged,
    RenameCandidate,
    DatasetAdded,
    DatasetRemoved,
}

impl ChangeType {
    pub const ALL: [ChangeType; 6] = [
        ChangeType::AttributeAdded,
        ChangeType::AttributeRemoved,
        ChangeType::AttributeTypeChanged,
        ChangeType::RenameCandidate,
        ChangeType::DatasetAdded,
        ChangeType::DatasetRemoved,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChangeOrigin {
    Wrapper,
    Elt,
}

/// Lifecycle of a detected change. `InReview` means proposals exist and
/// none has been applied yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChangeStatus {
    Pending,
    InReview,
    Resolved,
}

/// Type-specific detail of a change. Only the members relevant to the
/// change type are present.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_type: Option<ValueType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_type: Option<ValueType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Vec<FieldDef>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceChangeRecord {
    pub change_id: String,
    pub source_id: String,
    pub change_type: ChangeType,
    pub payload: ChangePayload,
    pub detected_at: String,
    pub origin: ChangeOrigin,
    pub status: ChangeStatus,
}

impl SourceChangeRecord {
    /// Identity used to avoid recording the same pending change twice.
    pub fn same_change(&self, other: &SourceChangeRecord) -> bool {
        self.source_id == other.source_id
            && self.change_type == other.change_type
            && self.payload == other.payload
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationRule {
    pub rule_id: String,
    pub change_type: ChangeType,
    pub option_kinds: Vec<OptionKind>,
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProposalStatus {
    Proposed,
    Chosen,
    Applied,
    Rejected,
}

impl ProposalStatus {
    pub fn can_move_to(self, next: ProposalStatus) -> bool {
        matches!(
            (self, next),
            (ProposalStatus::Proposed, ProposalStatus::Chosen)
                | (ProposalStatus::Chosen, ProposalStatus::Applied)
                | (ProposalStatus::Proposed, ProposalStatus::Rejected)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ProposalStatus::Applied | ProposalStatus::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub status: ProposalStatus,
    pub at: String,
    pub actor: String,
}

/// One adaptation option, generated for a source change or initiated by a
/// developer (`change_id` = `None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotentialChange {
    pub pc_id: String,
    pub change_id: Option<String>,
    pub option_kind: OptionKind,
    pub parameters: BTreeMap<String, String>,
    pub status: ProposalStatus,
    pub status_history: Vec<StatusEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceFormat {
    Delimited,
    JsonRecords,
    RawText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub format: SourceFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<char>,
    pub level0_dataset: String,
    #[serde(default = "default_latency")]
    pub latency_class: u64,
    /// Consecutive pulls that returned no records.
    #[serde(default)]
    pub empty_pulls: u32,
}

fn default_latency() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawBatch {
    pub batch_id: String,
    pub source_id: String,
    pub arrived_at: String,
    pub byte_length: u64,
    pub record_count: u64,
    #[serde(default)]
    pub parseable: bool,
}

/// Refresh state of one materialized dataset (level 1 and above).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    pub dataset_id: String,
    pub level: u32,
    pub refresh_count: u64,
    pub record_count: u64,
    pub quarantined: u64,
}
