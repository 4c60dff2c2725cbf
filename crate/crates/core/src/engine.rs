//! The warehouse engine: one data directory, its metastore and the data it
//! describes. Every mutation runs under a single writer lock against a copy
//! of the state; readers keep the last committed snapshot until the copy is
//! persisted and swapped in.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::adaptation::{
    options_for, plan_option, subject_from_parameters, ImpactReport, OptionKind, Plan, PlanMode,
};
use crate::cube::{
    answer, build_cuboid, choose_cuboid, cuboid_label, cuboid_sets, flat_base, navigate,
    validate_query, CubeDefinition, CuboidMeta, Direction, QuerySpec,
};
use crate::error::{Error, Result};
use crate::highway::{expr, is_due, row_to_json, run_mapping, MappingOutput, RecordSet, TransformStep};
use crate::ingestion::{
    conform, detect_changes, infer_observed, infer_schema, parse_batch, reconcile, ParsedBatch,
    ViolationKind,
};
use crate::metastore::{
    next_id, plain_fields, AdaptationRule, ChangeOrigin, ChangePayload, ChangeStatus, ChangeType,
    DatasetKind, DatasetSchema, FieldDef, HighwayLevelDef, MappingDefinition, Metastore,
    PotentialChange, ProposalStatus, RawBatch, SourceChangeRecord, SourceDescriptor, SourceFormat,
};
use crate::storage::{read_optional, FileTxn, Layout};
use crate::value::Value;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultInjection {
    #[default]
    None,
    /// Abort every apply after the metadata write, before data migration.
    AbortMidApply,
}

/// Where timestamps come from. `Logical` counts seconds from the epoch, one
/// per stamp, so runs are reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    System,
    Logical,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub data_dir: PathBuf,
    pub levels: Vec<HighwayLevelDef>,
    pub max_attrs: usize,
    pub fault_injection: FaultInjection,
    pub clock: ClockMode,
    /// Consecutive empty pulls after which a dataset is reported removed.
    pub miss_threshold: u32,
}

impl EngineOptions {
    pub fn new(data_dir: impl Into<PathBuf>, levels: Vec<HighwayLevelDef>) -> Self {
        EngineOptions {
            data_dir: data_dir.into(),
            levels,
            max_attrs: 2,
            fault_injection: FaultInjection::None,
            clock: ClockMode::System,
            miss_threshold: 3,
        }
    }
}

/// Raw, cleansed, integrated and star levels; the derived ones refresh
/// every 1, 2 and 4 ticks.
pub fn default_levels() -> Vec<HighwayLevelDef> {
    [(0, 1, "raw"), (1, 1, "cleansed"), (2, 2, "integrated"), (3, 4, "star")]
        .into_iter()
        .map(|(level, tick_period, d)| HighwayLevelDef { level, tick_period, description: d.into() })
        .collect()
}

/// A committed view: metadata plus the loaded datasets and cuboids.
#[derive(Debug, Clone, Default)]
pub struct State {
    pub meta: Metastore,
    pub data: BTreeMap<String, Arc<RecordSet>>,
    pub cuboids: BTreeMap<(String, String), Arc<RecordSet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub batch: RawBatch,
    /// Change records created by this batch.
    pub changes: Vec<String>,
    #[serde(skip)]
    pub error: Option<Error>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshError {
    pub dataset: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub refreshed: Vec<String>,
    pub errors: Vec<RefreshError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub level: u32,
    pub version: u32,
    pub kind: DatasetKind,
    pub fields: Vec<FieldDef>,
    pub refresh_count: u64,
    pub record_count: u64,
    pub quarantined: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub cube_id: String,
    /// Label of the cuboid used, or `base`.
    pub cuboid: String,
    pub rows: Vec<serde_json::Value>,
}

pub struct Engine {
    opts: EngineOptions,
    layout: Layout,
    state: RwLock<Arc<State>>,
    writer: Mutex<()>,
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

impl Engine {
    /// Opens (or initializes) a data directory. A stored metastore keeps its
    /// own level configuration.
    pub fn open(opts: EngineOptions) -> Result<Engine> {
        std::fs::create_dir_all(&opts.data_dir)?;
        let layout = Layout::new(&opts.data_dir);
        let meta = match read_optional(&layout.metastore())? {
            Some(bytes) => Metastore::parse_document(std::str::from_utf8(&bytes).map_err(io)?)?,
            None => Metastore::new(opts.levels.clone())?,
        };
        let state = load_state(&layout, meta)?;
        Ok(Engine { opts, layout, state: RwLock::new(Arc::new(state)), writer: Mutex::new(()) })
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn snapshot(&self) -> Arc<State> {
        self.state.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn stamp(&self, meta: &mut Metastore) -> String {
        match self.opts.clock {
            ClockMode::Logical => {
                meta.highway.clock += 1;
                chrono::DateTime::from_timestamp(meta.highway.clock as i64, 0)
                    .expect("clock in range")
                    .format("%Y-%m-%dT%H:%M:%SZ")
                    .to_string()
            }
            ClockMode::System => chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string(),
        }
    }

    /// Runs `f` on a copy of the state, persists the metastore and swaps the
    /// copy in; on any error the touched files are restored.
    fn mutate<T>(&self, f: impl FnOnce(&mut State, &mut FileTxn) -> Result<T>) -> Result<T> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut st = (*self.snapshot()).clone();
        let mut files = FileTxn::new();
        let out = f(&mut st, &mut files).and_then(|v| {
            st.meta.normalize();
            files.write(&self.layout.metastore(), st.meta.export().as_bytes())?;
            Ok(v)
        });
        match out {
            Ok(v) => {
                files.commit();
                *self.state.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(st);
                Ok(v)
            }
            Err(e) => {
                files.rollback()?;
                Err(e)
            }
        }
    }

    // ---- metadata -----------------------------------------------------------

    pub fn export(&self) -> String {
        self.snapshot().meta.export()
    }

    /// Replaces the metastore with a document and reloads the data it names.
    pub fn import(&self, text: &str) -> Result<usize> {
        let (meta, count) = Metastore::import(text)?;
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let st = load_state(&self.layout, meta)?;
        crate::storage::write_atomic(&self.layout.metastore(), st.meta.export().as_bytes())?;
        *self.state.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(st);
        Ok(count)
    }

    pub fn validate(&self) -> Vec<String> {
        self.snapshot().meta.validate()
    }

    /// Registers a level-0 dataset schema. Higher levels are derived from
    /// mappings.
    pub fn put_schema(&self, schema: DatasetSchema) -> Result<u32> {
        if schema.level != 0 {
            return Err(Error::InvalidSchema(
                "only level-0 schemas are registered directly; higher levels come from mappings".into(),
            ));
        }
        self.mutate(|st, _| st.meta.put_schema(schema))
    }

    pub fn get_schema(&self, dataset_id: &str, version: Option<u32>) -> Result<DatasetSchema> {
        self.snapshot().meta.get_schema(dataset_id, version)
    }

    pub fn register_source(&self, d: SourceDescriptor) -> Result<SourceDescriptor> {
        self.mutate(|st, _| {
            let id = st.meta.register_source(d)?;
            Ok(st.meta.source(&id).cloned().expect("just registered"))
        })
    }

    pub fn sources(&self) -> Vec<SourceDescriptor> {
        self.snapshot().meta.highway.sources.clone()
    }

    pub fn put_mapping(&self, m: MappingDefinition) -> Result<u32> {
        self.mutate(|st, _| st.meta.put_mapping(m))
    }

    pub fn mappings(&self) -> Vec<MappingDefinition> {
        self.snapshot().meta.current_mappings().into_iter().cloned().collect()
    }

    pub fn register_rule(&self, rule: AdaptationRule) -> Result<AdaptationRule> {
        self.mutate(|st, _| {
            st.meta.register_rule(rule.clone())?;
            Ok(rule)
        })
    }

    // ---- ingestion ------------------------------------------------------------

    /// Stores a batch verbatim and runs change detection on it. A payload
    /// that does not parse is kept (flagged unparseable) and reported in
    /// `error`.
    pub fn ingest(&self, source_id: &str, bytes: &[u8]) -> Result<IngestOutcome> {
        self.mutate(|st, files| {
            let src = st
                .meta
                .source(source_id)
                .cloned()
                .ok_or_else(|| Error::UnknownSource(source_id.to_string()))?;
            let at = self.stamp(&mut st.meta);
            let batch_id = next_id("b", st.meta.highway.batches.iter().map(|b| b.batch_id.as_str()));
            files.write(&self.layout.batch(&src.level0_dataset, &batch_id), bytes)?;
            let parsed = parse_batch(src.format, src.delimiter, bytes);
            let record_count = match (&parsed, src.format) {
                (_, SourceFormat::RawText) | (Err(_), _) => 0,
                (Ok(p), _) => p.record_count() as u64,
            };
            let batch = RawBatch {
                batch_id,
                source_id: src.source_id.clone(),
                arrived_at: at.clone(),
                byte_length: bytes.len() as u64,
                record_count,
                parseable: parsed.is_ok(),
            };
            st.meta.highway.batches.push(batch.clone());
            let mut changes = Vec::new();
            let (error, empty) = match parsed {
                Err(e) => (Some(e), false),
                Ok(p) if src.format == SourceFormat::RawText => (None, p.rows.is_empty()),
                Ok(p) => {
                    self.observe(&mut st.meta, &src, &p, &at, &mut changes)?;
                    (None, p.rows.is_empty())
                }
            };
            if error.is_none() {
                let pulls = {
                    let s = st.meta.highway.sources.iter_mut().find(|s| s.source_id == src.source_id).unwrap();
                    s.empty_pulls = if empty { s.empty_pulls + 1 } else { 0 };
                    s.empty_pulls
                };
                let known = st.meta.current_schema(&src.level0_dataset).is_some_and(|s| !s.fields.is_empty());
                if empty && known && pulls == self.opts.miss_threshold {
                    let rec = change_record(
                        &src.source_id,
                        ChangeType::DatasetRemoved,
                        ChangePayload { dataset_id: Some(src.level0_dataset.clone()), ..Default::default() },
                        &at,
                        ChangeOrigin::Wrapper,
                    );
                    changes.extend(st.meta.record_change_once(rec)?);
                }
            }
            Ok(IngestOutcome { batch, changes, error })
        })
    }

    fn observe(
        &self,
        meta: &mut Metastore,
        src: &SourceDescriptor,
        p: &ParsedBatch,
        at: &str,
        changes: &mut Vec<String>,
    ) -> Result<()> {
        let Some(schema) = meta.current_schema(&src.level0_dataset).cloned() else {
            return Ok(());
        };
        if p.columns.is_empty() {
            return Ok(());
        }
        if schema.fields.is_empty() {
            if p.record_count() > 0 {
                let fields = infer_schema(src.format, p)?;
                let rec = change_record(
                    &src.source_id,
                    ChangeType::DatasetAdded,
                    ChangePayload { dataset_id: Some(schema.dataset_id.clone()), fields: Some(fields), ..Default::default() },
                    at,
                    ChangeOrigin::Wrapper,
                );
                changes.extend(meta.record_change_once(rec)?);
            }
            return Ok(());
        }
        let inferred = reconcile(&infer_observed(p), &schema);
        for rec in detect_changes(&src.source_id, &inferred, &schema, at) {
            changes.extend(meta.record_change_once(rec)?);
        }
        Ok(())
    }

    // ---- highway ----------------------------------------------------------------

    /// Advances the highway clock by one tick and refreshes every dataset
    /// whose level is due, level by level.
    pub fn tick(&self) -> Result<TickReport> {
        self.mutate(|st, files| {
            st.meta.highway.tick += 1;
            let tick = st.meta.highway.tick;
            let at = self.stamp(&mut st.meta);
            let mut report = TickReport { tick, ..Default::default() };
            let levels: Vec<HighwayLevelDef> = st.meta.highway.levels.clone();
            for lvl in levels.iter().filter(|l| l.level > 0 && is_due(l.tick_period, tick)) {
                let mut due: Vec<MappingDefinition> = st
                    .meta
                    .current_mappings()
                    .into_iter()
                    .filter(|m| st.meta.current_schema(&m.target_dataset).is_some_and(|s| s.level == lvl.level))
                    .cloned()
                    .collect();
                due.sort_by(|a, b| a.target_dataset.cmp(&b.target_dataset));
                for m in due {
                    match self.refresh(st, files, &m, &at) {
                        Ok(out) => report.refreshed.extend(out),
                        Err(e) => report.errors.push(RefreshError {
                            dataset: m.target_dataset.clone(),
                            code: e.code().into(),
                            message: e.message(),
                        }),
                    }
                }
            }
            let refreshed: BTreeSet<&String> = report.refreshed.iter().collect();
            let cubes: Vec<CubeDefinition> = st.meta.cubes.definitions.clone();
            for def in cubes {
                let touched = refreshed.contains(&def.fact_dataset)
                    || def.dimensions().iter().any(|d| {
                        refreshed.contains(&crate::highway::dimension_dataset_id(&def.fact_dataset, d))
                    });
                if touched && !st.meta.cuboids_of(&def.cube_id).is_empty() {
                    if let Err(e) = self.rebuild_cube(st, files, &def.cube_id, None, &at) {
                        report.errors.push(RefreshError {
                            dataset: def.fact_dataset.clone(),
                            code: e.code().into(),
                            message: e.message(),
                        });
                    }
                }
            }
            Ok(report)
        })
    }

    /// Typed contents of a level-0 dataset: every parseable batch of the
    /// sources feeding it, in arrival order. Also returns the rejected
    /// records with the source that delivered them.
    fn read_level0(
        &self,
        meta: &Metastore,
        dataset_id: &str,
    ) -> Result<(RecordSet, Vec<(String, crate::ingestion::Violation)>)> {
        let schema = meta
            .current_schema(dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))?;
        let mut out = RecordSet::empty(plain_fields(&schema.fields));
        let mut violations = Vec::new();
        for b in meta.highway.batches.iter().filter(|b| b.parseable) {
            let Some(src) = meta.source(&b.source_id).filter(|s| s.level0_dataset == dataset_id) else {
                continue;
            };
            let Some(bytes) = read_optional(&self.layout.batch(dataset_id, &b.batch_id))? else {
                continue;
            };
            let Ok(parsed) = parse_batch(src.format, src.delimiter, &bytes) else {
                continue;
            };
            let (rows, bad) = conform(&parsed, schema);
            out.rows.extend(rows);
            violations.extend(bad.into_iter().map(|v| (src.source_id.clone(), v)));
        }
        Ok((out, violations))
    }

    fn refresh(&self, st: &mut State, files: &mut FileTxn, m: &MappingDefinition, at: &str) -> Result<Vec<String>> {
        if let Err(e) = st.meta.plan(m) {
            for (ds, field) in missing_references(&st.meta, m) {
                for source_id in st.meta.upstream_sources(&ds) {
                    let old_type = st.meta.get_schema(&ds, None).ok().and_then(|s| {
                        st.meta
                            .highway
                            .datasets
                            .iter()
                            .filter(|d| d.dataset_id == s.dataset_id)
                            .rev()
                            .find_map(|d| d.field(&field).map(|f| f.value_type))
                    });
                    let rec = change_record(
                        &source_id,
                        ChangeType::AttributeRemoved,
                        ChangePayload {
                            dataset_id: Some(ds.clone()),
                            attribute: Some(field.clone()),
                            old_type,
                            ..Default::default()
                        },
                        at,
                        ChangeOrigin::Elt,
                    );
                    st.meta.record_change_once(rec)?;
                }
            }
            return Err(match e {
                Error::MappingInvalid(_) => e,
                other => Error::MappingInvalid(other.message()),
            });
        }
        st.meta.derive_mapping(&m.mapping_id)?;
        let mut inputs = BTreeMap::new();
        let mut rejected = Vec::new();
        for s in &m.source_datasets {
            let schema = st.meta.current_schema(s).ok_or_else(|| Error::UnknownDataset(s.clone()))?;
            if schema.level == 0 {
                let (rs, bad) = self.read_level0(&st.meta, s)?;
                for (source_id, v) in bad {
                    if let ViolationKind::TypeMismatch { declared, observed } = v.kind {
                        let rec = change_record(
                            &source_id,
                            ChangeType::AttributeTypeChanged,
                            ChangePayload {
                                dataset_id: Some(s.clone()),
                                attribute: Some(v.field.clone()),
                                old_type: Some(declared),
                                new_type: Some(observed),
                                ..Default::default()
                            },
                            at,
                            ChangeOrigin::Elt,
                        );
                        st.meta.record_change_once(rec)?;
                    }
                    let reason = match &v.kind {
                        ViolationKind::TypeMismatch { declared, observed } => {
                            format!("{}: declared {declared}, observed {observed}", v.field)
                        }
                        ViolationKind::Missing => format!("{}: missing", v.field),
                        ViolationKind::NullValue => format!("{}: null in a non-nullable field", v.field),
                    };
                    rejected.push(serde_json::json!({ "record": v.record, "reason": reason }));
                }
                inputs.insert(s.clone(), rs);
            } else {
                if st.meta.refresh_count(s) == 0 {
                    return Err(Error::UpstreamNotRefreshed(format!("{s:?} has not been refreshed")));
                }
                let rs = st.data.get(s).map(|r| (**r).clone()).unwrap_or_else(|| RecordSet::empty(plain_fields(&schema.fields)));
                inputs.insert(s.clone(), rs);
            }
        }
        let MappingOutput { main, dimensions, quarantined } = run_mapping(m, &inputs)?;
        rejected.extend(quarantined.into_iter().map(|q| serde_json::json!({ "record": q.record, "reason": q.reason })));
        let level = st.meta.current_schema(&m.target_dataset).map(|s| s.level).unwrap_or(1);
        let mut refreshed = vec![m.target_dataset.clone()];
        let n = self.store_output(st, files, &m.target_dataset, level, main, rejected.len() as u64)?;
        if !rejected.is_empty() {
            let mut text = String::new();
            for r in &rejected {
                text.push_str(&r.to_string());
                text.push('\n');
            }
            files.write(&self.layout.quarantine_file(&m.target_dataset, n), text.as_bytes())?;
        }
        for (ds, rs) in dimensions {
            self.store_output(st, files, &ds, level, rs, 0)?;
            refreshed.push(ds);
        }
        Ok(refreshed)
    }

    fn store_output(
        &self,
        st: &mut State,
        files: &mut FileTxn,
        dataset_id: &str,
        level: u32,
        rs: RecordSet,
        quarantined: u64,
    ) -> Result<u64> {
        let store = st.meta.store_mut(dataset_id, level);
        store.refresh_count += 1;
        store.record_count = rs.len() as u64;
        store.quarantined = quarantined;
        let n = store.refresh_count;
        files.write(&self.layout.level_file(level, dataset_id, n), rs.to_ndjson().as_bytes())?;
        st.data.insert(dataset_id.to_string(), Arc::new(rs));
        Ok(n)
    }

    pub fn level_datasets(&self, level: u32) -> Result<Vec<DatasetInfo>> {
        let st = self.snapshot();
        if st.meta.level(level).is_none() {
            return Err(Error::NotFound(format!("level {level}")));
        }
        Ok(st
            .meta
            .live_datasets(Some(level))
            .into_iter()
            .map(|s| {
                let store = st.meta.store(&s.dataset_id);
                let batches = (level == 0).then(|| {
                    st.meta
                        .highway
                        .batches
                        .iter()
                        .filter(|b| st.meta.source(&b.source_id).is_some_and(|src| src.level0_dataset == s.dataset_id))
                        .count() as u64
                });
                DatasetInfo {
                    dataset_id: s.dataset_id.clone(),
                    level: s.level,
                    version: s.version,
                    kind: s.kind,
                    fields: s.fields.clone(),
                    refresh_count: store.map(|x| x.refresh_count).unwrap_or(0),
                    record_count: store.map(|x| x.record_count).unwrap_or(0),
                    quarantined: store.map(|x| x.quarantined).unwrap_or(0),
                    batches,
                }
            })
            .collect())
    }

    /// Current contents of a dataset as JSON objects. Level 0 is typed
    /// against its schema on read.
    pub fn records(&self, level: u32, dataset_id: &str) -> Result<Vec<serde_json::Value>> {
        let st = self.snapshot();
        let schema = st
            .meta
            .current_schema(dataset_id)
            .filter(|s| s.level == level)
            .ok_or_else(|| Error::UnknownDataset(format!("{dataset_id:?} at level {level}")))?;
        if level == 0 {
            let (rs, _) = self.read_level0(&st.meta, dataset_id)?;
            return Ok(rs.to_json_rows());
        }
        Ok(match st.data.get(dataset_id) {
            Some(rs) => rs.to_json_rows(),
            None => {
                let _ = schema;
                Vec::new()
            }
        })
    }

    pub fn dataset(&self, dataset_id: &str) -> Option<Arc<RecordSet>> {
        self.snapshot().data.get(dataset_id).cloned()
    }

    // ---- adaptation -------------------------------------------------------------

    pub fn changes(&self, status: Option<ChangeStatus>) -> Vec<SourceChangeRecord> {
        self.snapshot().meta.changes(status).into_iter().cloned().collect()
    }

    /// Generates the potential changes for a pending change.
    pub fn propose(&self, change_id: &str, actor: &str) -> Result<Vec<PotentialChange>> {
        self.mutate(|st, _| {
            let change = st
                .meta
                .change(change_id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("change {change_id:?}")))?;
            let kinds = options_for(&st.meta, &change)?;
            if kinds.is_empty() {
                return Err(Error::IncompatibleOption(format!("no option applies to {change_id}")));
            }
            let at = self.stamp(&mut st.meta);
            let mut ids = Vec::new();
            for k in kinds {
                ids.push(st.meta.add_proposal(Some(change_id.to_string()), k, BTreeMap::new(), &at, actor));
            }
            st.meta.set_change_status(change_id, ChangeStatus::InReview)?;
            Ok(ids.iter().filter_map(|id| st.meta.proposal(id).cloned()).collect())
        })
    }

    pub fn options_of(&self, change_id: &str) -> Result<Vec<PotentialChange>> {
        let st = self.snapshot();
        st.meta.change(change_id).ok_or_else(|| Error::NotFound(format!("change {change_id:?}")))?;
        Ok(st.meta.proposals_for(change_id).into_iter().cloned().collect())
    }

    pub fn proposal(&self, pc_id: &str) -> Result<PotentialChange> {
        self.snapshot()
            .meta
            .proposal(pc_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("potential change {pc_id:?}")))
    }

    /// Impact of applying an open proposal, computed on the current
    /// snapshot without touching it.
    pub fn preview(&self, pc_id: &str) -> Result<ImpactReport> {
        let st = self.snapshot();
        let pc = st.meta.proposal(pc_id).ok_or_else(|| Error::NotFound(format!("potential change {pc_id:?}")))?;
        if pc.status.is_terminal() {
            return Err(Error::IllegalTransition(format!("{pc_id} is {:?}", pc.status)));
        }
        Ok(plan_option(&st.meta, pc, PlanMode::Preview)?.report)
    }

    /// A developer-initiated proposal, not tied to a detected change.
    pub fn initiate(&self, kind: OptionKind, parameters: BTreeMap<String, String>, actor: &str) -> Result<PotentialChange> {
        self.mutate(|st, _| {
            subject_from_parameters(&st.meta, kind, &parameters)?;
            let at = self.stamp(&mut st.meta);
            let id = st.meta.add_proposal(None, kind, parameters, &at, actor);
            Ok(st.meta.proposal(&id).cloned().expect("just added"))
        })
    }

    /// Applies a proposal: rewrites the metadata, migrates stored data and
    /// rebuilds affected cuboids, all or nothing. `change_id` of `None`
    /// addresses a developer-initiated proposal.
    pub fn apply(
        &self,
        change_id: Option<&str>,
        pc_id: &str,
        parameters: BTreeMap<String, String>,
        actor: &str,
    ) -> Result<PotentialChange> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let cur = self.snapshot();
        let mut meta = cur.meta.clone();
        let pc = meta
            .proposal(pc_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("potential change {pc_id:?}")))?;
        if pc.change_id.as_deref() != change_id {
            return Err(Error::NotFound(format!(
                "potential change {pc_id:?} does not belong to {}",
                change_id.unwrap_or("a developer request")
            )));
        }
        if !matches!(pc.status, ProposalStatus::Proposed | ProposalStatus::Chosen) {
            return Err(Error::IllegalTransition(format!("{pc_id} is {:?}", pc.status)));
        }
        {
            let p = meta.potential_changes.iter_mut().find(|p| p.pc_id == pc_id).unwrap();
            p.parameters.extend(parameters);
        }
        let pc = meta.proposal(pc_id).cloned().unwrap();
        let at = self.stamp(&mut meta);
        let plan = plan_option(&meta, &pc, PlanMode::Apply)?;
        let Plan { meta: mut new, renames, fill_one, seeded, cube_rebuild, deleted_cubes, resolve_with_ignore, .. } = plan;
        new.highway.clock = meta.highway.clock;
        if pc.status == ProposalStatus::Proposed {
            new.transition_change(pc_id, ProposalStatus::Chosen, actor, &at)?;
        }
        let applied = new.transition_change(pc_id, ProposalStatus::Applied, actor, &at)?;
        if let Some(cid) = &pc.change_id {
            let siblings: Vec<String> = new
                .proposals_for(cid)
                .into_iter()
                .filter(|p| p.pc_id != pc_id && p.status == ProposalStatus::Proposed)
                .map(|p| p.pc_id.clone())
                .collect();
            for s in siblings {
                new.transition_change(&s, ProposalStatus::Rejected, "system", &at)?;
            }
            new.set_change_status(cid, ChangeStatus::Resolved)?;
        }
        for cid in &resolve_with_ignore {
            settle_with_ignore(&mut new, cid, &at)?;
        }
        new.normalize();
        let violations = new.validate();
        if !violations.is_empty() {
            return Err(Error::ApplyFailed(violations.join("; ")));
        }

        let mut st = State { meta: new, data: cur.data.clone(), cuboids: cur.cuboids.clone() };
        let mut files = FileTxn::new();
        let result = (|| -> Result<()> {
            files.write(&self.layout.metastore(), st.meta.export().as_bytes())?;
            if self.opts.fault_injection == FaultInjection::AbortMidApply {
                return Err(Error::ApplyFailed("fault injected after the metadata write".into()));
            }
            self.migrate(&cur, &mut st, &mut files, &renames, &fill_one, &seeded)?;
            for cube_id in &deleted_cubes {
                for cm in cur.meta.cuboids_of(cube_id) {
                    let label = cuboid_label(&cm.attrs);
                    files.remove(&self.layout.cuboid(cube_id, &label))?;
                    st.cuboids.remove(&(cube_id.clone(), label));
                }
            }
            for (cube_id, affected) in &cube_rebuild {
                if st.meta.cube(cube_id).is_some() && !cur.meta.cuboids_of(cube_id).is_empty() {
                    self.rebuild_cube(&mut st, &mut files, cube_id, affected.as_ref(), &at)?;
                }
            }
            files.write(&self.layout.metastore(), st.meta.export().as_bytes())?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                files.commit();
                *self.state.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(st);
                Ok(applied)
            }
            Err(e) => {
                files.rollback()?;
                Err(match e {
                    Error::ApplyFailed(_) => e,
                    other => Error::ApplyFailed(other.message()),
                })
            }
        }
    }

    /// Rewrites stored datasets whose schema changed to the new field list.
    fn migrate(
        &self,
        cur: &State,
        st: &mut State,
        files: &mut FileTxn,
        renames: &BTreeMap<String, BTreeMap<String, String>>,
        fill_one: &BTreeMap<String, BTreeSet<String>>,
        seeded: &BTreeSet<String>,
    ) -> Result<()> {
        let ids: Vec<String> = st.data.keys().cloned().collect();
        for id in ids {
            let Some(schema) = st.meta.current_schema(&id).cloned() else {
                st.data.remove(&id);
                continue;
            };
            let fields = plain_fields(&schema.fields);
            let old = st.data[&id].clone();
            if old.fields == fields {
                continue;
            }
            let rs = migrate_rows(&old, &fields, renames.get(&id), fill_one.get(&id));
            let n = st.meta.refresh_count(&id);
            files.write(&self.layout.level_file(schema.level, &id, n), rs.to_ndjson().as_bytes())?;
            st.data.insert(id, Arc::new(rs));
        }
        for dim in seeded {
            if cur.data.contains_key(dim) {
                continue;
            }
            let Some(schema) = st.meta.current_schema(dim).cloned() else { continue };
            let fields = plain_fields(&schema.fields);
            let row: Vec<Value> = (0..fields.len()).map(|i| if i == 0 { Value::Int(1) } else { Value::Null }).collect();
            let rs = RecordSet { fields, rows: vec![row] };
            let fact = st
                .meta
                .current_mappings()
                .into_iter()
                .find(|m| crate::metastore::produced_dimensions(m).contains(dim))
                .map(|m| m.target_dataset.clone());
            let n = fact.map(|f| st.meta.refresh_count(&f)).unwrap_or(0);
            if n == 0 {
                continue;
            }
            let store = st.meta.store_mut(dim, schema.level);
            store.refresh_count = n;
            store.record_count = 1;
            store.quarantined = 0;
            files.write(&self.layout.level_file(schema.level, dim, n), rs.to_ndjson().as_bytes())?;
            st.data.insert(dim.clone(), Arc::new(rs));
        }
        Ok(())
    }

    /// Rejects an open proposal. When every option of its change is
    /// rejected the change returns to PENDING.
    pub fn reject(&self, pc_id: &str, actor: &str) -> Result<PotentialChange> {
        self.mutate(|st, _| {
            let at = self.stamp(&mut st.meta);
            let pc = st.meta.transition_change(pc_id, ProposalStatus::Rejected, actor, &at)?;
            if let Some(cid) = &pc.change_id {
                let all = st.meta.proposals_for(cid).iter().all(|p| p.status == ProposalStatus::Rejected);
                if all {
                    st.meta.set_change_status(cid, ChangeStatus::Pending)?;
                }
            }
            Ok(pc)
        })
    }

    /// Decided proposals (applied or rejected), by id.
    pub fn history(&self) -> Vec<PotentialChange> {
        self.snapshot()
            .meta
            .potential_changes
            .iter()
            .filter(|p| matches!(p.status, ProposalStatus::Applied | ProposalStatus::Rejected))
            .cloned()
            .collect()
    }

    // ---- cubes ------------------------------------------------------------------

    pub fn create_cube(&self, def: CubeDefinition) -> Result<CubeDefinition> {
        self.mutate(|st, files| {
            for cm in st.meta.cuboids_of(&def.cube_id) {
                let label = cuboid_label(&cm.attrs);
                files.remove(&self.layout.cuboid(&def.cube_id, &label))?;
                st.cuboids.remove(&(def.cube_id.clone(), label));
            }
            st.meta.put_cube(def)
        })
    }

    pub fn cube(&self, cube_id: &str) -> Result<CubeDefinition> {
        self.snapshot().meta.cube(cube_id).cloned().ok_or_else(|| Error::UnknownCube(cube_id.to_string()))
    }

    /// Builds every cuboid of the cube's policy from the current star.
    pub fn materialize(&self, cube_id: &str) -> Result<Vec<CuboidMeta>> {
        self.mutate(|st, files| {
            if st.meta.cube(cube_id).is_none() {
                return Err(Error::UnknownCube(cube_id.to_string()));
            }
            let at = self.stamp(&mut st.meta);
            self.rebuild_cube(st, files, cube_id, None, &at)?;
            Ok(st.meta.cuboids_of(cube_id))
        })
    }

    /// Rebuilds a cube's cuboids. With `affected`, valid cuboids that do not
    /// involve those attributes are kept; the apex and the full cuboid are
    /// always rebuilt.
    fn rebuild_cube(
        &self,
        st: &mut State,
        files: &mut FileTxn,
        cube_id: &str,
        affected: Option<&BTreeSet<String>>,
        at: &str,
    ) -> Result<()> {
        let def = st.meta.cube(cube_id).cloned().ok_or_else(|| Error::UnknownCube(cube_id.to_string()))?;
        let base = base_of(st, &def)?;
        let sets = cuboid_sets(&def, self.opts.max_attrs);
        let existing = st.meta.cuboids_of(cube_id);
        let full_len = def.attrs.len();
        let mut metas = Vec::new();
        for attrs in &sets {
            let label = cuboid_label(attrs);
            let key = (cube_id.to_string(), label.clone());
            let keep = affected.is_some_and(|aff| {
                !attrs.is_empty()
                    && attrs.len() != full_len
                    && !attrs.iter().any(|a| aff.contains(a))
                    && st.cuboids.contains_key(&key)
            });
            if let (true, Some(old)) = (keep, existing.iter().find(|c| c.valid && &c.attrs == attrs)) {
                metas.push(old.clone());
                continue;
            }
            let rs = build_cuboid(&def, &base, attrs)?;
            files.write(&self.layout.cuboid(cube_id, &label), rs.to_ndjson().as_bytes())?;
            metas.push(CuboidMeta {
                cube_id: cube_id.to_string(),
                attrs: attrs.clone(),
                row_count: rs.len() as u64,
                built_at: at.to_string(),
                valid: true,
            });
            st.cuboids.insert(key, Arc::new(rs));
        }
        for old in &existing {
            if !sets.contains(&old.attrs) {
                let label = cuboid_label(&old.attrs);
                files.remove(&self.layout.cuboid(cube_id, &label))?;
                st.cuboids.remove(&(cube_id.to_string(), label));
            }
        }
        st.meta.set_cuboids(cube_id, metas);
        Ok(())
    }

    /// Answers a query from the cheapest valid covering cuboid, or from the
    /// star itself when none covers it.
    pub fn query(&self, spec: &QuerySpec) -> Result<QueryAnswer> {
        let st = self.snapshot();
        let def = st.meta.cube(&spec.cube_id).ok_or_else(|| Error::UnknownCube(spec.cube_id.clone()))?;
        validate_query(def, spec)?;
        let loaded: Vec<CuboidMeta> = st
            .meta
            .cuboids_of(&spec.cube_id)
            .into_iter()
            .filter(|c| c.valid && st.cuboids.contains_key(&(c.cube_id.clone(), cuboid_label(&c.attrs))))
            .collect();
        let (label, rs) = match choose_cuboid(spec, &loaded) {
            Some(attrs) => {
                let label = cuboid_label(&attrs);
                let rs = st.cuboids[&(spec.cube_id.clone(), label.clone())].clone();
                (label, rs)
            }
            None => {
                let base = base_of(&st, def)?;
                let need: Vec<String> = spec.needed_attrs().into_iter().collect();
                ("base".to_string(), Arc::new(build_cuboid(def, &base, &need)?))
            }
        };
        let out = answer(def, spec, &rs)?;
        Ok(QueryAnswer {
            cube_id: spec.cube_id.clone(),
            cuboid: label,
            rows: out.rows.iter().map(|r| row_to_json(&out.fields, r)).collect(),
        })
    }

    pub fn navigate(&self, spec: &QuerySpec, direction: Direction, attr: &str) -> Result<QuerySpec> {
        let st = self.snapshot();
        let def = st.meta.cube(&spec.cube_id).ok_or_else(|| Error::UnknownCube(spec.cube_id.clone()))?;
        navigate(def, spec, direction, attr)
    }

    /// The flattened star a cube is computed from.
    pub fn cube_base(&self, cube_id: &str) -> Result<RecordSet> {
        let st = self.snapshot();
        let def = st.meta.cube(cube_id).ok_or_else(|| Error::UnknownCube(cube_id.to_string()))?;
        base_of(&st, def)
    }
}

fn change_record(
    source_id: &str,
    change_type: ChangeType,
    payload: ChangePayload,
    at: &str,
    origin: ChangeOrigin,
) -> SourceChangeRecord {
    SourceChangeRecord {
        change_id: String::new(),
        source_id: source_id.to_string(),
        change_type,
        payload,
        detected_at: at.to_string(),
        origin,
        status: ChangeStatus::Pending,
    }
}

/// Resolves an open change with an applied IGNORE decided by the system.
fn settle_with_ignore(meta: &mut Metastore, change_id: &str, at: &str) -> Result<()> {
    let Some(change) = meta.change(change_id) else { return Ok(()) };
    if change.status == ChangeStatus::Resolved {
        return Ok(());
    }
    let open: Vec<(String, ProposalStatus)> = meta
        .proposals_for(change_id)
        .into_iter()
        .filter(|p| !p.status.is_terminal())
        .map(|p| (p.pc_id.clone(), p.status))
        .collect();
    if open.iter().any(|(_, s)| *s == ProposalStatus::Chosen) {
        return Ok(());
    }
    for (id, _) in open {
        meta.transition_change(&id, ProposalStatus::Rejected, "system", at)?;
    }
    let id = meta.add_proposal(Some(change_id.to_string()), OptionKind::Ignore, BTreeMap::new(), at, "system");
    meta.transition_change(&id, ProposalStatus::Chosen, "system", at)?;
    meta.transition_change(&id, ProposalStatus::Applied, "system", at)?;
    meta.set_change_status(change_id, ChangeStatus::Resolved)
}

fn migrate_rows(
    old: &RecordSet,
    fields: &[FieldDef],
    renames: Option<&BTreeMap<String, String>>,
    fill_one: Option<&BTreeSet<String>>,
) -> RecordSet {
    let sources: Vec<Option<usize>> = fields
        .iter()
        .map(|f| {
            let from = renames.and_then(|r| r.get(&f.name)).unwrap_or(&f.name);
            old.index_of(from)
        })
        .collect();
    let rows = old
        .rows
        .iter()
        .map(|row| {
            fields
                .iter()
                .zip(&sources)
                .map(|(f, src)| match src {
                    Some(i) => row[*i].widen_to(f.value_type).unwrap_or_else(|_| row[*i].cast_to(f.value_type)),
                    None if fill_one.is_some_and(|s| s.contains(&f.name)) => Value::Int(1),
                    None => Value::Null,
                })
                .collect()
        })
        .collect();
    RecordSet { fields: fields.to_vec(), rows }
}

fn base_of(st: &State, def: &CubeDefinition) -> Result<RecordSet> {
    let fields_of = |id: &str| st.meta.current_schema(id).map(|s| plain_fields(&s.fields)).unwrap_or_default();
    let fact = st
        .data
        .get(&def.fact_dataset)
        .map(|r| (**r).clone())
        .unwrap_or_else(|| RecordSet::empty(fields_of(&def.fact_dataset)));
    let mut dims = BTreeMap::new();
    for d in def.dimensions() {
        let id = crate::highway::dimension_dataset_id(&def.fact_dataset, &d);
        let rs = st.data.get(&id).map(|r| (**r).clone()).unwrap_or_else(|| RecordSet::empty(fields_of(&id)));
        dims.insert(d, rs);
    }
    flat_base(def, &fact, &dims)
}

/// Loads the datasets and valid cuboids a metastore describes.
fn load_state(layout: &Layout, meta: Metastore) -> Result<State> {
    let mut st = State { meta, ..Default::default() };
    for store in st.meta.highway.stores.clone() {
        if store.refresh_count == 0 {
            continue;
        }
        let Some(schema) = st.meta.current_schema(&store.dataset_id) else { continue };
        let fields = plain_fields(&schema.fields);
        let path = layout.level_file(schema.level, &store.dataset_id, store.refresh_count);
        let rs = match read_optional(&path)? {
            Some(bytes) => RecordSet::from_ndjson(fields, std::str::from_utf8(&bytes).map_err(io)?)?,
            None => RecordSet::empty(fields),
        };
        st.data.insert(store.dataset_id.clone(), Arc::new(rs));
    }
    for cm in st.meta.cubes.cuboids.clone().into_iter().filter(|c| c.valid) {
        let Some(def) = st.meta.cube(&cm.cube_id).cloned() else { continue };
        let Ok(base) = base_of(&st, &def) else { continue };
        let fields = build_cuboid(&def, &RecordSet::empty(base.fields), &cm.attrs)?.fields;
        let label = cuboid_label(&cm.attrs);
        if let Some(bytes) = read_optional(&layout.cuboid(&cm.cube_id, &label))? {
            let rs = RecordSet::from_ndjson(fields, std::str::from_utf8(&bytes).map_err(io)?)?;
            st.cuboids.insert((cm.cube_id.clone(), label), Arc::new(rs));
        }
    }
    Ok(st)
}

/// Fields a mapping references that its sources no longer provide, as
/// (dataset, field) pairs.
fn missing_references(meta: &Metastore, m: &MappingDefinition) -> Vec<(String, String)> {
    let Some(primary) = m.source_datasets.first() else { return Vec::new() };
    let have = |d: &str| -> BTreeSet<String> {
        meta.current_schema(d).map(|s| s.fields.iter().map(|f| f.name.clone()).collect()).unwrap_or_default()
    };
    let source = have(primary);
    let mut avail = source.clone();
    let mut out = BTreeSet::new();
    let mut need = |avail: &BTreeSet<String>, name: &str| {
        if !avail.contains(name) && !source.contains(name) {
            out.insert((primary.clone(), name.to_string()));
        }
    };
    let expr_fields = |src: &str| expr::parse(src).map(|e| e.fields()).unwrap_or_default();
    let mut side_missing = Vec::new();
    for step in &m.steps {
        match step {
            TransformStep::Project { fields } => {
                for f in fields {
                    need(&avail, f);
                }
                avail = fields.iter().cloned().collect();
            }
            TransformStep::Rename { renames } => {
                for (from, to) in renames {
                    need(&avail, from);
                    avail.remove(from);
                    avail.insert(to.clone());
                }
            }
            TransformStep::Filter { predicate } => {
                for f in expr_fields(predicate) {
                    need(&avail, &f);
                }
            }
            TransformStep::Derive { field, expr, .. } => {
                for f in expr_fields(expr) {
                    need(&avail, &f);
                }
                avail.insert(field.clone());
            }
            TransformStep::Extract { source, field, .. } => {
                need(&avail, source);
                avail.insert(field.clone());
            }
            TransformStep::Join { dataset, on, .. } => {
                let side = have(dataset);
                for k in on {
                    need(&avail, &k.left);
                    if !side.contains(&k.right) {
                        side_missing.push((dataset.clone(), k.right.clone()));
                    }
                }
                avail.extend(side);
            }
            TransformStep::Union { .. } => {}
            TransformStep::Aggregate { group_by, measures } => {
                for g in group_by {
                    need(&avail, g);
                }
                for a in measures {
                    need(&avail, &a.field);
                }
                avail = group_by.iter().cloned().chain(measures.iter().map(|a| a.out.clone())).collect();
            }
            TransformStep::LoadStar { star } => {
                for f in &star.measures {
                    need(&avail, f);
                }
                for d in &star.dimensions {
                    for a in d.attributes.iter().chain(&d.natural_key) {
                        need(&avail, a);
                    }
                }
            }
        }
    }
    out.extend(side_missing);
    out.into_iter().collect()
}
