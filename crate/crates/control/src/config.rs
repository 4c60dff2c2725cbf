//! Service configuration, read from a JSON file.

use std::path::{Path, PathBuf};

use evodw_core::engine::{default_levels, ClockMode, Engine, EngineOptions, FaultInjection};
use evodw_core::metastore::{check_levels, HighwayLevelDef};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::ApiError;

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub http_port: u16,
    pub levels: Vec<HighwayLevelDef>,
    pub max_attrs: usize,
    pub fault_injection: FaultInjection,
    pub clock: ClockMode,
}

const KEYS: [&str; 6] = ["data_dir", "http_port", "levels", "max_attrs", "fault_injection", "clock"];

/// Reads and validates a config file. A relative `data_dir` is taken
/// relative to the file's directory.
pub fn load_config(path: &Path) -> Result<EngineConfig, ApiError> {
    let text = std::fs::read_to_string(path).map_err(|e| ApiError::config("path", format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

pub fn parse_config(text: &str, base: &Path) -> Result<EngineConfig, ApiError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ApiError::config("document", e))?;
    let Value::Object(obj) = doc else {
        return Err(ApiError::config("document", "expected a JSON object"));
    };
    if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(ApiError::config(k, "unknown key"));
    }
    let data_dir = match obj.get("data_dir") {
        Some(Value::String(s)) if !s.is_empty() => base.join(s),
        Some(_) => return Err(ApiError::config("data_dir", "expected a non-empty path")),
        None => return Err(ApiError::config("data_dir", "required")),
    };
    let http_port = field::<u16>(&obj, "http_port")?.unwrap_or(DEFAULT_PORT);
    let levels = match field::<Vec<LevelEntry>>(&obj, "levels")? {
        None => default_levels(),
        Some(entries) => entries
            .into_iter()
            .map(|l| HighwayLevelDef { level: l.level, tick_period: l.tick_period, description: l.description })
            .collect(),
    };
    check_levels(&levels).map_err(|e| ApiError::config("levels", e))?;
    Ok(EngineConfig {
        data_dir,
        http_port,
        levels,
        max_attrs: field(&obj, "max_attrs")?.unwrap_or(2),
        fault_injection: field(&obj, "fault_injection")?.unwrap_or_default(),
        clock: field(&obj, "clock")?.unwrap_or_default(),
    })
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelEntry {
    level: u32,
    tick_period: u64,
    #[serde(default)]
    description: String,
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<Option<T>, ApiError> {
    obj.get(key)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| ApiError::config(key, e)))
        .transpose()
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> EngineConfig {
        EngineConfig {
            data_dir: data_dir.into(),
            http_port: DEFAULT_PORT,
            levels: default_levels(),
            max_attrs: 2,
            fault_injection: FaultInjection::None,
            clock: ClockMode::System,
        }
    }

    pub fn engine_options(&self) -> EngineOptions {
        let mut o = EngineOptions::new(&self.data_dir, self.levels.clone());
        o.max_attrs = self.max_attrs;
        o.fault_injection = self.fault_injection;
        o.clock = self.clock;
        o
    }

    /// Opens the engine after checking that the data directory accepts
    /// writes.
    pub fn open(&self) -> Result<Engine, ApiError> {
        let unwritable = |e: std::io::Error| {
            ApiError::new("DATA_DIR_UNWRITABLE", format!("{}: {e}", self.data_dir.display()))
        };
        std::fs::create_dir_all(&self.data_dir).map_err(unwritable)?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"").map_err(unwritable)?;
        std::fs::remove_file(&probe).map_err(unwritable)?;
        Engine::open(self.engine_options()).map_err(ApiError::from)
    }
}
