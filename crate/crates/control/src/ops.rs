//! One request type for both faces of the shell: HTTP handlers and CLI
//! subcommands each build a [`Request`] and print what [`execute`] returns.

use std::collections::BTreeMap;

use evodw_core::adaptation::OptionKind;
use evodw_core::cube::{CubeDefinition, Direction, QuerySpec};
use evodw_core::engine::Engine;
use evodw_core::metastore::{AdaptationRule, ChangeStatus, DatasetSchema, MappingDefinition, SourceDescriptor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;

pub const DEFAULT_ACTOR: &str = "developer";

/// Path segment naming a developer-initiated proposal's (absent) change.
pub const NO_CHANGE: &str = "NONE";

#[derive(Debug, Clone)]
pub enum Request {
    PutSchema(DatasetSchema),
    GetSchema { dataset_id: String, version: Option<u32> },
    RegisterSource(SourceDescriptor),
    ListSources,
    PutMapping(MappingDefinition),
    ListMappings,
    PutRule(AdaptationRule),
    Ingest { source_id: String, body: Vec<u8> },
    Tick,
    LevelDatasets(u32),
    Records { level: u32, dataset_id: String },
    Changes(Option<ChangeStatus>),
    Propose { change_id: String, actor: String },
    Options(String),
    Preview(String),
    Initiate(Initiation),
    Apply { change_id: Option<String>, pc_id: String, body: ApplyBody },
    Reject { pc_id: String, actor: String },
    CreateCube(CubeDefinition),
    Materialize(String),
    Query(QuerySpec),
    Navigate(Navigation),
    Export,
    Import(String),
    History,
    Validate,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplyBody {
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
    #[serde(default = "default_actor")]
    pub actor: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initiation {
    pub option_kind: OptionKind,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
    #[serde(default = "default_actor")]
    pub actor: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Navigation {
    pub query: QuerySpec,
    pub direction: Direction,
    pub attr: String,
}

/// Optional `{"actor": ...}` body of propose and reject.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorBody {
    #[serde(default = "default_actor")]
    pub actor: String,
}

fn default_actor() -> String {
    DEFAULT_ACTOR.to_string()
}

/// Parses a JSON body. An empty body reads as `{}`.
pub fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let text = std::str::from_utf8(bytes).map_err(ApiError::malformed)?;
    let text = if text.trim().is_empty() { "{}" } else { text };
    serde_json::from_str(text).map_err(ApiError::malformed)
}

pub fn parse_status(s: &str) -> Result<ChangeStatus, ApiError> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| ApiError::invalid(format!("unknown status {s:?}")))
}

pub fn parse_level(s: &str) -> Result<u32, ApiError> {
    s.parse().map_err(|_| ApiError::invalid(format!("level must be a non-negative integer, got {s:?}")))
}

pub fn change_ref(segment: &str) -> Option<String> {
    (segment != NO_CHANGE).then(|| segment.to_string())
}

/// Sets the cube id of a query body from the path unless the body names one.
pub fn query_for(cube_id: &str, mut spec: QuerySpec) -> Result<QuerySpec, ApiError> {
    if spec.cube_id.is_empty() {
        spec.cube_id = cube_id.to_string();
    } else if spec.cube_id != cube_id {
        return Err(ApiError::invalid(format!("query names cube {:?} but was sent to {cube_id:?}", spec.cube_id)));
    }
    Ok(spec)
}

fn to_text<T: Serialize>(v: &T) -> Result<String, ApiError> {
    serde_json::to_string(v).map_err(|e| ApiError::new("IO_ERROR", e.to_string()))
}

/// Runs a request and returns the JSON response text.
pub fn execute(engine: &Engine, req: Request) -> Result<String, ApiError> {
    let out = match req {
        Request::PutSchema(s) => {
            let id = s.dataset_id.clone();
            let version = engine.put_schema(s)?;
            to_text(&json!({"dataset_id": id, "version": version}))
        }
        Request::GetSchema { dataset_id, version } => to_text(&engine.get_schema(&dataset_id, version)?),
        Request::RegisterSource(d) => to_text(&engine.register_source(d)?),
        Request::ListSources => to_text(&engine.sources()),
        Request::PutMapping(m) => {
            let id = m.mapping_id.clone();
            let version = engine.put_mapping(m)?;
            to_text(&json!({"mapping_id": id, "version": version}))
        }
        Request::ListMappings => to_text(&engine.mappings()),
        Request::PutRule(r) => to_text(&engine.register_rule(r)?),
        Request::Ingest { source_id, body } => {
            let outcome = engine.ingest(&source_id, &body)?;
            if let Some(e) = outcome.error {
                let mut err = ApiError::from(e);
                err.message = format!("{} (kept as batch {})", err.message, outcome.batch.batch_id);
                return Err(err);
            }
            to_text(&outcome)
        }
        Request::Tick => to_text(&engine.tick()?),
        Request::LevelDatasets(n) => to_text(&engine.level_datasets(n)?),
        Request::Records { level, dataset_id } => to_text(&engine.records(level, &dataset_id)?),
        Request::Changes(status) => to_text(&engine.changes(status)),
        Request::Propose { change_id, actor } => to_text(&engine.propose(&change_id, &actor)?),
        Request::Options(change_id) => to_text(&engine.options_of(&change_id)?),
        Request::Preview(pc_id) => to_text(&engine.preview(&pc_id)?),
        Request::Initiate(i) => to_text(&engine.initiate(i.option_kind, i.parameters, &i.actor)?),
        Request::Apply { change_id, pc_id, body } => {
            to_text(&engine.apply(change_id.as_deref(), &pc_id, body.parameters, &body.actor)?)
        }
        Request::Reject { pc_id, actor } => to_text(&engine.reject(&pc_id, &actor)?),
        Request::CreateCube(def) => to_text(&engine.create_cube(def)?),
        Request::Materialize(id) => to_text(&engine.materialize(&id)?),
        Request::Query(spec) => to_text(&engine.query(&spec)?),
        Request::Navigate(n) => to_text(&engine.navigate(&n.query, n.direction, &n.attr)?),
        Request::Export => Ok(engine.export()),
        Request::Import(text) => to_text(&json!({"records": engine.import(&text)?})),
        Request::History => to_text(&engine.history()),
        Request::Validate => to_text(&json!({"violations": engine.validate()})),
    };
    out
}
