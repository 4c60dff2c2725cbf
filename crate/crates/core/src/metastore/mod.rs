//! The metastore: every metadata type of the warehouse in one versioned,
//! serializable document, plus the integrity rules binding them together.

mod types;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use types::*;

use crate::adaptation::{default_option_kinds, OptionKind};
use crate::cube::{validate_definition, CubeDefinition, CuboidMeta};
use crate::error::{Error, Result};
use crate::highway::{plan_mapping, MappingPlan, StarSpec, TransformStep};

/// Data highway metadata: levels, dataset schemas (all versions), sources,
/// raw batches and refresh state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighwaySection {
    pub levels: Vec<HighwayLevelDef>,
    pub datasets: Vec<DatasetSchema>,
    pub sources: Vec<SourceDescriptor>,
    pub batches: Vec<RawBatch>,
    pub stores: Vec<StoreState>,
    pub retired_datasets: Vec<String>,
    pub retired_mappings: Vec<String>,
    pub tick: u64,
    pub clock: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeSection {
    pub definitions: Vec<CubeDefinition>,
    pub cuboids: Vec<CuboidMeta>,
}

/// The six metadata sections. Serializes to the export document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metastore {
    pub highway: HighwaySection,
    pub cubes: CubeSection,
    pub mappings: Vec<MappingDefinition>,
    pub source_changes: Vec<SourceChangeRecord>,
    pub adaptation_rules: Vec<AdaptationRule>,
    pub potential_changes: Vec<PotentialChange>,
}

pub const SECTIONS: [&str; 6] =
    ["highway", "cubes", "mappings", "source_changes", "adaptation_rules", "potential_changes"];

/// Next id of the form `<prefix>-NNNNNN`, one past the largest in use.
pub fn next_id<'a>(prefix: &str, existing: impl Iterator<Item = &'a str>) -> String {
    let max = existing
        .filter_map(|id| id.strip_prefix(prefix)?.strip_prefix('-')?.parse::<u64>().ok())
        .max()
        .unwrap_or(0);
    format!("{prefix}-{:06}", max + 1)
}

/// Levels must start at 0, be contiguous, and have non-decreasing periods
/// of at least 1.
pub fn check_levels(levels: &[HighwayLevelDef]) -> std::result::Result<(), String> {
    if levels.is_empty() {
        return Err("at least one level is required".into());
    }
    for (i, l) in levels.iter().enumerate() {
        if l.level as usize != i {
            return Err(format!("levels must start at 0 and be contiguous; found {} at position {i}", l.level));
        }
        if l.tick_period < 1 {
            return Err(format!("tick_period of level {} must be at least 1", l.level));
        }
        if i > 0 && l.tick_period < levels[i - 1].tick_period {
            return Err(format!(
                "tick_period of level {} is below that of level {}",
                l.level,
                l.level - 1
            ));
        }
    }
    Ok(())
}

fn check_fields(fields: &[FieldDef]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for f in fields {
        if f.name.is_empty() {
            return Err(Error::InvalidSchema("field name is empty".into()));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(Error::DuplicateField(f.name.clone()));
        }
    }
    Ok(())
}

impl Metastore {
    pub fn new(levels: Vec<HighwayLevelDef>) -> Result<Metastore> {
        check_levels(&levels).map_err(Error::InvalidSchema)?;
        Ok(Metastore { highway: HighwaySection { levels, ..Default::default() }, ..Default::default() })
    }

    pub fn top_level(&self) -> u32 {
        self.highway.levels.last().map(|l| l.level).unwrap_or(0)
    }

    pub fn level(&self, n: u32) -> Option<&HighwayLevelDef> {
        self.highway.levels.iter().find(|l| l.level == n)
    }

    // ---- schemas -----------------------------------------------------------

    pub fn is_retired(&self, dataset_id: &str) -> bool {
        self.highway.retired_datasets.iter().any(|d| d == dataset_id)
    }

    fn latest(&self, dataset_id: &str) -> Option<&DatasetSchema> {
        self.highway
            .datasets
            .iter()
            .filter(|s| s.dataset_id == dataset_id)
            .max_by_key(|s| s.version)
    }

    /// Latest version of a live (not retired) dataset.
    pub fn current_schema(&self, dataset_id: &str) -> Option<&DatasetSchema> {
        if self.is_retired(dataset_id) {
            return None;
        }
        self.latest(dataset_id)
    }

    pub fn get_schema(&self, dataset_id: &str, version: Option<u32>) -> Result<DatasetSchema> {
        let found = match version {
            None => self.latest(dataset_id),
            Some(v) => self
                .highway
                .datasets
                .iter()
                .find(|s| s.dataset_id == dataset_id && s.version == v),
        };
        found.cloned().ok_or_else(|| match version {
            Some(v) => Error::NotFound(format!("dataset {dataset_id:?} version {v}")),
            None => Error::NotFound(format!("dataset {dataset_id:?}")),
        })
    }

    /// Live datasets, optionally restricted to one level, in id order.
    pub fn live_datasets(&self, level: Option<u32>) -> Vec<&DatasetSchema> {
        let ids: BTreeSet<&str> = self.highway.datasets.iter().map(|s| s.dataset_id.as_str()).collect();
        ids.into_iter()
            .filter_map(|id| self.current_schema(id))
            .filter(|s| level.is_none_or(|l| s.level == l))
            .collect()
    }

    /// Stores a new schema version. New datasets start at version 1; updates
    /// must supply exactly current + 1.
    pub fn put_schema(&mut self, schema: DatasetSchema) -> Result<u32> {
        if schema.dataset_id.is_empty() {
            return Err(Error::InvalidSchema("dataset_id is empty".into()));
        }
        check_fields(&schema.fields)?;
        if self.level(schema.level).is_none() {
            return Err(Error::InvalidSchema(format!("level {} is not configured", schema.level)));
        }
        if schema.level == 0 && schema.kind == DatasetKind::Structured {
            return Err(Error::InvalidSchema("level-0 datasets are RAW or SEMISTRUCTURED".into()));
        }
        if schema.level > 0 && schema.level == self.top_level() && schema.kind != DatasetKind::Structured {
            return Err(Error::InvalidSchema("top-level datasets are STRUCTURED".into()));
        }
        let expected = match self.latest(&schema.dataset_id) {
            Some(cur) => {
                if cur.level != schema.level {
                    return Err(Error::InvalidSchema(format!(
                        "dataset {:?} lives at level {}",
                        schema.dataset_id, cur.level
                    )));
                }
                cur.version + 1
            }
            None => 1,
        };
        if schema.version != expected {
            return Err(Error::VersionConflict(format!(
                "{:?} expects version {expected}, got {}",
                schema.dataset_id, schema.version
            )));
        }
        let version = schema.version;
        self.highway.retired_datasets.retain(|d| *d != schema.dataset_id);
        self.highway.datasets.push(schema);
        self.normalize();
        Ok(version)
    }

    /// Stores `fields` as the next version of a dataset when they differ from
    /// the current ones. Returns whether a version was added.
    pub fn update_fields(&mut self, dataset_id: &str, level: u32, fields: Vec<FieldDef>, kind: DatasetKind) -> Result<bool> {
        let version = match self.current_schema(dataset_id) {
            Some(cur) if cur.fields == fields && cur.kind == kind => return Ok(false),
            _ => self.latest(dataset_id).map(|s| s.version + 1).unwrap_or(1),
        };
        self.put_schema(DatasetSchema { dataset_id: dataset_id.to_string(), level, fields, version, kind })?;
        Ok(true)
    }

    // ---- sources and batches ---------------------------------------------

    pub fn source(&self, source_id: &str) -> Option<&SourceDescriptor> {
        self.highway.sources.iter().find(|s| s.source_id == source_id)
    }

    pub fn register_source(&mut self, mut d: SourceDescriptor) -> Result<String> {
        if d.source_id.is_empty() {
            return Err(Error::InvalidParameter("source_id is empty".into()));
        }
        if self.source(&d.source_id).is_some() {
            return Err(Error::DuplicateSource(d.source_id));
        }
        match self.current_schema(&d.level0_dataset) {
            Some(s) if s.level == 0 => {}
            _ => return Err(Error::UnknownDataset(format!("{:?} is not a level-0 dataset", d.level0_dataset))),
        }
        match (d.format, d.delimiter) {
            (SourceFormat::Delimited, None) => d.delimiter = Some(','),
            (SourceFormat::Delimited, Some(c)) if !c.is_ascii() || c == '"' || c == '\n' => {
                return Err(Error::InvalidParameter(format!("unusable delimiter {c:?}")));
            }
            (SourceFormat::Delimited, Some(_)) => {}
            (_, Some(_)) => return Err(Error::InvalidParameter("delimiter applies to DELIMITED sources only".into())),
            (_, None) => {}
        }
        if d.latency_class < 1 {
            return Err(Error::InvalidParameter("latency_class must be at least 1".into()));
        }
        let id = d.source_id.clone();
        self.highway.sources.push(d);
        self.normalize();
        Ok(id)
    }

    /// Sources whose level-0 dataset feeds `dataset_id`, directly or through
    /// mappings.
    pub fn upstream_sources(&self, dataset_id: &str) -> Vec<String> {
        let mut roots = BTreeSet::new();
        let mut stack = vec![dataset_id.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(d) = stack.pop() {
            if !seen.insert(d.clone()) {
                continue;
            }
            match self.mapping_producing(&d) {
                Some(m) => stack.extend(m.source_datasets.iter().cloned()),
                None => {
                    roots.insert(d);
                }
            }
        }
        self.highway
            .sources
            .iter()
            .filter(|s| roots.contains(&s.level0_dataset))
            .map(|s| s.source_id.clone())
            .collect()
    }

    pub fn store(&self, dataset_id: &str) -> Option<&StoreState> {
        self.highway.stores.iter().find(|s| s.dataset_id == dataset_id)
    }

    pub fn store_mut(&mut self, dataset_id: &str, level: u32) -> &mut StoreState {
        if let Some(i) = self.highway.stores.iter().position(|s| s.dataset_id == dataset_id) {
            return &mut self.highway.stores[i];
        }
        self.highway.stores.push(StoreState {
            dataset_id: dataset_id.to_string(),
            level,
            refresh_count: 0,
            record_count: 0,
            quarantined: 0,
        });
        self.highway.stores.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
        let i = self.highway.stores.iter().position(|s| s.dataset_id == dataset_id).unwrap();
        &mut self.highway.stores[i]
    }

    pub fn refresh_count(&self, dataset_id: &str) -> u64 {
        self.store(dataset_id).map(|s| s.refresh_count).unwrap_or(0)
    }

    // ---- source changes --------------------------------------------------

    pub fn change(&self, change_id: &str) -> Option<&SourceChangeRecord> {
        self.source_changes.iter().find(|c| c.change_id == change_id)
    }

    fn change_mut(&mut self, change_id: &str) -> Result<&mut SourceChangeRecord> {
        self.source_changes
            .iter_mut()
            .find(|c| c.change_id == change_id)
            .ok_or_else(|| Error::NotFound(format!("change {change_id:?}")))
    }

    pub fn changes(&self, status: Option<ChangeStatus>) -> Vec<&SourceChangeRecord> {
        self.source_changes.iter().filter(|c| status.is_none_or(|s| c.status == s)).collect()
    }

    /// Stores a change as PENDING and returns its id.
    pub fn record_change(&mut self, mut record: SourceChangeRecord) -> Result<String> {
        if self.source(&record.source_id).is_none() {
            return Err(Error::UnknownSource(record.source_id));
        }
        record.change_id = next_id("chg", self.source_changes.iter().map(|c| c.change_id.as_str()));
        record.status = ChangeStatus::Pending;
        let id = record.change_id.clone();
        self.source_changes.push(record);
        Ok(id)
    }

    /// Records a change unless the same change is already open.
    pub fn record_change_once(&mut self, record: SourceChangeRecord) -> Result<Option<String>> {
        let open = self
            .source_changes
            .iter()
            .any(|c| c.status != ChangeStatus::Resolved && c.same_change(&record));
        if open {
            return Ok(None);
        }
        self.record_change(record).map(Some)
    }

    pub fn set_change_status(&mut self, change_id: &str, status: ChangeStatus) -> Result<()> {
        self.change_mut(change_id)?.status = status;
        Ok(())
    }

    // ---- rules -------------------------------------------------------------

    pub fn register_rule(&mut self, rule: AdaptationRule) -> Result<()> {
        if rule.rule_id.is_empty() {
            return Err(Error::InvalidParameter("rule_id is empty".into()));
        }
        if rule.option_kinds.is_empty() {
            return Err(Error::InvalidParameter("option_kinds is empty".into()));
        }
        if let Some(k) = rule.option_kinds.iter().find(|k| !k.compatible_with(rule.change_type)) {
            return Err(Error::IncompatibleOption(format!("{k} cannot answer {:?}", rule.change_type)));
        }
        if rule.enabled {
            if let Some(other) = self
                .adaptation_rules
                .iter()
                .find(|r| r.enabled && r.change_type == rule.change_type && r.rule_id != rule.rule_id)
            {
                return Err(Error::RuleConflict(format!(
                    "rule {:?} is already enabled for this change type",
                    other.rule_id
                )));
            }
        }
        self.adaptation_rules.retain(|r| r.rule_id != rule.rule_id);
        self.adaptation_rules.push(rule);
        self.normalize();
        Ok(())
    }

    /// The enabled rule for `change_type`, or the built-in default.
    pub fn rules_for(&self, change_type: ChangeType) -> AdaptationRule {
        self.adaptation_rules
            .iter()
            .find(|r| r.enabled && r.change_type == change_type)
            .cloned()
            .unwrap_or_else(|| AdaptationRule {
                rule_id: "default".into(),
                change_type,
                option_kinds: default_option_kinds(change_type),
                enabled: true,
            })
    }

    // ---- potential changes -------------------------------------------------

    pub fn proposal(&self, pc_id: &str) -> Option<&PotentialChange> {
        self.potential_changes.iter().find(|p| p.pc_id == pc_id)
    }

    pub fn proposals_for(&self, change_id: &str) -> Vec<&PotentialChange> {
        self.potential_changes
            .iter()
            .filter(|p| p.change_id.as_deref() == Some(change_id))
            .collect()
    }

    /// Stores a new PROPOSED potential change and returns its id.
    pub fn add_proposal(
        &mut self,
        change_id: Option<String>,
        option_kind: OptionKind,
        parameters: BTreeMap<String, String>,
        at: &str,
        actor: &str,
    ) -> String {
        let pc_id = next_id("pc", self.potential_changes.iter().map(|p| p.pc_id.as_str()));
        self.potential_changes.push(PotentialChange {
            pc_id: pc_id.clone(),
            change_id,
            option_kind,
            parameters,
            status: ProposalStatus::Proposed,
            status_history: vec![StatusEntry { status: ProposalStatus::Proposed, at: at.into(), actor: actor.into() }],
        });
        pc_id
    }

    /// Moves a proposal along its lifecycle and appends to its history.
    pub fn transition_change(
        &mut self,
        pc_id: &str,
        status: ProposalStatus,
        actor: &str,
        at: &str,
    ) -> Result<PotentialChange> {
        let pc = self.proposal(pc_id).ok_or_else(|| Error::NotFound(format!("potential change {pc_id:?}")))?;
        if !pc.status.can_move_to(status) {
            return Err(Error::IllegalTransition(format!("{pc_id}: {:?} -> {:?}", pc.status, status)));
        }
        if status == ProposalStatus::Chosen {
            if let Some(change_id) = &pc.change_id {
                if let Some(other) = self
                    .proposals_for(change_id)
                    .into_iter()
                    .find(|p| p.pc_id != pc_id && p.status == ProposalStatus::Chosen)
                {
                    return Err(Error::IllegalTransition(format!(
                        "{} is already chosen for {change_id}",
                        other.pc_id
                    )));
                }
            }
        }
        let pc = self.potential_changes.iter_mut().find(|p| p.pc_id == pc_id).unwrap();
        pc.status = status;
        pc.status_history.push(StatusEntry { status, at: at.into(), actor: actor.into() });
        Ok(pc.clone())
    }

    // ---- mappings ------------------------------------------------------------

    pub fn is_mapping_retired(&self, mapping_id: &str) -> bool {
        self.highway.retired_mappings.iter().any(|m| m == mapping_id)
    }

    pub fn current_mapping(&self, mapping_id: &str) -> Option<&MappingDefinition> {
        if self.is_mapping_retired(mapping_id) {
            return None;
        }
        self.mappings
            .iter()
            .filter(|m| m.mapping_id == mapping_id)
            .max_by_key(|m| m.version)
    }

    /// Latest version of every live mapping, in id order.
    pub fn current_mappings(&self) -> Vec<&MappingDefinition> {
        let ids: BTreeSet<&str> = self.mappings.iter().map(|m| m.mapping_id.as_str()).collect();
        ids.into_iter().filter_map(|id| self.current_mapping(id)).collect()
    }

    /// The live mapping writing `dataset_id`, either as its target or as one
    /// of its star dimension tables.
    pub fn mapping_producing(&self, dataset_id: &str) -> Option<&MappingDefinition> {
        self.current_mappings().into_iter().find(|m| {
            m.target_dataset == dataset_id || produced_dimensions(m).iter().any(|d| d == dataset_id)
        })
    }

    pub fn mappings_reading(&self, dataset_id: &str) -> Vec<&MappingDefinition> {
        self.current_mappings()
            .into_iter()
            .filter(|m| m.source_datasets.iter().any(|s| s == dataset_id))
            .collect()
    }

    /// Star spec loaded into `fact`, if any.
    pub fn star_for(&self, fact: &str) -> Option<&StarSpec> {
        let m = self.mapping_producing(fact)?;
        match m.steps.last() {
            Some(TransformStep::LoadStar { star }) if m.target_dataset == fact => Some(star),
            _ => None,
        }
    }

    fn fields_of(&self, dataset_id: &str) -> Option<Vec<FieldDef>> {
        self.current_schema(dataset_id).map(|s| plain_fields(&s.fields))
    }

    pub fn plan(&self, m: &MappingDefinition) -> Result<MappingPlan> {
        plan_mapping(m, &|d| self.fields_of(d))
    }

    /// Level a mapping's target lives at, from its sources.
    fn target_level(&self, m: &MappingDefinition) -> Result<u32> {
        let mut levels = BTreeSet::new();
        for s in &m.source_datasets {
            let schema = self
                .current_schema(s)
                .ok_or_else(|| Error::UnknownDataset(format!("{s:?} (source of {})", m.mapping_id)))?;
            levels.insert(schema.level);
        }
        if levels.len() != 1 {
            return Err(Error::MappingInvalid(format!(
                "{}: all sources must sit on the same level",
                m.mapping_id
            )));
        }
        let level = levels.into_iter().next().unwrap() + 1;
        if self.level(level).is_none() {
            return Err(Error::MappingInvalid(format!("{}: level {level} is not configured", m.mapping_id)));
        }
        Ok(level)
    }

    fn write_plan(&mut self, m: &MappingDefinition, level: u32, plan: &MappingPlan) -> Result<BTreeSet<String>> {
        let mut changed = BTreeSet::new();
        if self.update_fields(&m.target_dataset, level, plan.output.clone(), DatasetKind::Structured)? {
            changed.insert(m.target_dataset.clone());
        }
        for (ds, fields) in &plan.dimensions {
            if self.update_fields(ds, level, fields.clone(), DatasetKind::Structured)? {
                changed.insert(ds.clone());
            }
        }
        Ok(changed)
    }

    /// Stores a mapping version, derives its target (and star dimension)
    /// schemas and re-derives everything downstream.
    pub fn put_mapping(&mut self, m: MappingDefinition) -> Result<u32> {
        let before = self.clone();
        let out = self.put_mapping_inner(m);
        if out.is_err() {
            *self = before;
        }
        out
    }

    fn put_mapping_inner(&mut self, m: MappingDefinition) -> Result<u32> {
        if m.mapping_id.is_empty() || m.target_dataset.is_empty() {
            return Err(Error::MappingInvalid("mapping_id and target_dataset are required".into()));
        }
        let expected = self
            .mappings
            .iter()
            .filter(|x| x.mapping_id == m.mapping_id)
            .map(|x| x.version + 1)
            .max()
            .unwrap_or(1);
        if m.version != expected {
            return Err(Error::VersionConflict(format!(
                "mapping {:?} expects version {expected}, got {}",
                m.mapping_id, m.version
            )));
        }
        let level = self.target_level(&m)?;
        let dims = produced_dimensions(&m);
        for out in std::iter::once(&m.target_dataset).chain(&dims) {
            if let Some(other) = self.mapping_producing(out) {
                if other.mapping_id != m.mapping_id {
                    return Err(Error::MappingInvalid(format!(
                        "{out:?} is already produced by {}",
                        other.mapping_id
                    )));
                }
            }
            if let Some(s) = self.current_schema(out) {
                if s.level != level {
                    return Err(Error::MappingInvalid(format!("{out:?} lives at level {}", s.level)));
                }
            }
        }
        let plan = self.plan(&m)?;
        self.highway.retired_mappings.retain(|x| *x != m.mapping_id);
        let version = m.version;
        self.mappings.push(m.clone());
        let changed = self.write_plan(&m, level, &plan)?;
        self.rederive(changed)?;
        self.normalize();
        Ok(version)
    }

    /// Re-plans every mapping downstream of `changed`, in level order, and
    /// stores new target versions where the derived fields differ. Returns
    /// every dataset whose schema changed, including `changed`.
    pub fn rederive(&mut self, changed: BTreeSet<String>) -> Result<BTreeSet<String>> {
        let mut changed = changed;
        let mut ordered: Vec<(u32, MappingDefinition)> = Vec::new();
        for m in self.current_mappings() {
            let level = self.current_schema(&m.target_dataset).map(|s| s.level).unwrap_or(u32::MAX);
            ordered.push((level, m.clone()));
        }
        ordered.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.mapping_id.cmp(&b.1.mapping_id)));
        for (_, m) in ordered {
            if !m.source_datasets.iter().any(|s| changed.contains(s)) {
                continue;
            }
            let level = self.target_level(&m)?;
            let plan = self.plan(&m)?;
            changed.extend(self.write_plan(&m, level, &plan)?);
        }
        Ok(changed)
    }

    /// Re-plans one mapping and stores its derived target schemas. Returns
    /// the datasets whose schema changed.
    pub fn derive_mapping(&mut self, mapping_id: &str) -> Result<BTreeSet<String>> {
        let m = self
            .current_mapping(mapping_id)
            .ok_or_else(|| Error::NotFound(format!("mapping {mapping_id:?}")))?
            .clone();
        let level = self.target_level(&m)?;
        let plan = self.plan(&m)?;
        self.write_plan(&m, level, &plan)
    }

    /// Replaces a mapping's steps with a new version, without re-deriving.
    pub fn bump_mapping(&mut self, mapping_id: &str, steps: Vec<TransformStep>) -> Result<()> {
        let cur = self
            .current_mapping(mapping_id)
            .ok_or_else(|| Error::NotFound(format!("mapping {mapping_id:?}")))?
            .clone();
        if cur.steps == steps {
            return Ok(());
        }
        self.mappings.push(MappingDefinition { steps, version: cur.version + 1, ..cur });
        self.normalize();
        Ok(())
    }

    // ---- cubes -----------------------------------------------------------------

    pub fn cube(&self, cube_id: &str) -> Option<&CubeDefinition> {
        self.cubes.definitions.iter().find(|c| c.cube_id == cube_id)
    }

    pub fn cuboids_of(&self, cube_id: &str) -> Vec<CuboidMeta> {
        self.cubes.cuboids.iter().filter(|c| c.cube_id == cube_id).cloned().collect()
    }

    /// Validates a cube against its star and stores it.
    pub fn put_cube(&mut self, def: CubeDefinition) -> Result<CubeDefinition> {
        let schema = self
            .current_schema(&def.fact_dataset)
            .ok_or_else(|| Error::InvalidCube(format!("unknown fact dataset {:?}", def.fact_dataset)))?;
        if schema.level != self.top_level() {
            return Err(Error::InvalidCube(format!("{:?} is not at the top level", def.fact_dataset)));
        }
        let star = self
            .star_for(&def.fact_dataset)
            .ok_or_else(|| Error::InvalidCube(format!("{:?} is not loaded as a star", def.fact_dataset)))?;
        let def = validate_definition(&def, star, &schema.fields)?;
        self.cubes.definitions.retain(|c| c.cube_id != def.cube_id);
        self.cubes.cuboids.retain(|c| c.cube_id != def.cube_id);
        self.cubes.definitions.push(def.clone());
        self.normalize();
        Ok(def)
    }

    pub fn set_cuboids(&mut self, cube_id: &str, cuboids: Vec<CuboidMeta>) {
        self.cubes.cuboids.retain(|c| c.cube_id != cube_id);
        self.cubes.cuboids.extend(cuboids);
        self.normalize();
    }

    // ---- document ------------------------------------------------------------

    /// Sorts every section by id then version.
    pub fn normalize(&mut self) {
        let h = &mut self.highway;
        h.levels.sort_by_key(|l| l.level);
        h.datasets.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id).then(a.version.cmp(&b.version)));
        h.sources.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        h.batches.sort_by(|a, b| a.batch_id.cmp(&b.batch_id));
        h.stores.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
        h.retired_datasets.sort();
        h.retired_datasets.dedup();
        h.retired_mappings.sort();
        h.retired_mappings.dedup();
        self.cubes.definitions.sort_by(|a, b| a.cube_id.cmp(&b.cube_id));
        self.cubes
            .cuboids
            .sort_by(|a, b| a.cube_id.cmp(&b.cube_id).then_with(|| a.attrs.cmp(&b.attrs)));
        self.mappings
            .sort_by(|a, b| a.mapping_id.cmp(&b.mapping_id).then(a.version.cmp(&b.version)));
        self.source_changes.sort_by(|a, b| a.change_id.cmp(&b.change_id));
        self.adaptation_rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
        self.potential_changes.sort_by(|a, b| a.pc_id.cmp(&b.pc_id));
    }

    /// The metadata document: pretty-printed JSON with the six sections.
    pub fn export(&self) -> String {
        let mut doc = self.clone();
        doc.normalize();
        let mut text = serde_json::to_string_pretty(&doc).expect("metadata serializes");
        text.push('\n');
        text
    }

    /// Number of records held across all sections.
    pub fn record_count(&self) -> usize {
        let h = &self.highway;
        h.levels.len()
            + h.datasets.len()
            + h.sources.len()
            + h.batches.len()
            + h.stores.len()
            + self.cubes.definitions.len()
            + self.cubes.cuboids.len()
            + self.mappings.len()
            + self.source_changes.len()
            + self.adaptation_rules.len()
            + self.potential_changes.len()
    }

    /// Parses and validates a document. Returns the store and its record count.
    pub fn import(text: &str) -> Result<(Metastore, usize)> {
        let store = Metastore::parse_document(text)?;
        let violations = store.validate();
        if !violations.is_empty() {
            return Err(Error::IntegrityViolation(violations.join("; ")));
        }
        let count = store.record_count();
        Ok((store, count))
    }

    /// Parses a document and checks its shape, without the integrity pass.
    pub fn parse_document(text: &str) -> Result<Metastore> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedDocument(e.to_string()))?;
        let keys: Vec<&str> = match &value {
            serde_json::Value::Object(o) => o.keys().map(String::as_str).collect(),
            _ => return Err(Error::MalformedDocument("document is not an object".into())),
        };
        let mut sorted_keys = keys.clone();
        sorted_keys.sort();
        let mut expected = SECTIONS.to_vec();
        expected.sort();
        if sorted_keys != expected {
            return Err(Error::MalformedDocument(format!("top-level keys must be exactly {SECTIONS:?}")));
        }
        let mut store: Metastore =
            serde_json::from_value(value).map_err(|e| Error::MalformedDocument(e.to_string()))?;
        store.normalize();
        Ok(store)
    }

    /// Full integrity pass. Returns one message per violation.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = check_levels(&self.highway.levels) {
            v.push(format!("levels: {e}"));
        }
        let mut by_id: BTreeMap<&str, Vec<&DatasetSchema>> = BTreeMap::new();
        for s in &self.highway.datasets {
            by_id.entry(&s.dataset_id).or_default().push(s);
        }
        for (id, versions) in &by_id {
            for (i, s) in versions.iter().enumerate() {
                if s.version as usize != i + 1 {
                    v.push(format!("dataset {id}: versions are not 1..n"));
                }
                if s.level != versions[0].level {
                    v.push(format!("dataset {id}: level changes across versions"));
                }
                if let Err(e) = check_fields(&s.fields) {
                    v.push(format!("dataset {id} v{}: {e}", s.version));
                }
            }
            let cur = versions.last().unwrap();
            if self.level(cur.level).is_none() {
                v.push(format!("dataset {id}: level {} is not configured", cur.level));
            }
            if cur.level == 0 && cur.kind == DatasetKind::Structured {
                v.push(format!("dataset {id}: level-0 dataset is STRUCTURED"));
            }
        }
        for r in &self.highway.retired_datasets {
            if !by_id.contains_key(r.as_str()) {
                v.push(format!("retired dataset {r} does not exist"));
            }
        }
        for s in &self.highway.sources {
            match self.current_schema(&s.level0_dataset) {
                Some(d) if d.level == 0 => {}
                _ => v.push(format!("source {}: level-0 dataset {} missing", s.source_id, s.level0_dataset)),
            }
        }
        for b in &self.highway.batches {
            if self.source(&b.source_id).is_none() {
                v.push(format!("batch {}: unknown source {}", b.batch_id, b.source_id));
            }
        }
        for st in &self.highway.stores {
            if !by_id.contains_key(st.dataset_id.as_str()) {
                v.push(format!("store {}: unknown dataset", st.dataset_id));
            }
        }
        for m in self.current_mappings() {
            let level = match self.target_level(m) {
                Ok(l) => l,
                Err(e) => {
                    v.push(format!("mapping {}: {e}", m.mapping_id));
                    continue;
                }
            };
            let plan = match self.plan(m) {
                Ok(p) => p,
                Err(e) => {
                    v.push(format!("mapping {}: {e}", m.mapping_id));
                    continue;
                }
            };
            let outputs = std::iter::once((m.target_dataset.clone(), plan.output)).chain(plan.dimensions);
            for (ds, fields) in outputs {
                match self.current_schema(&ds) {
                    Some(s) if s.fields == fields && s.level == level => {}
                    Some(_) => v.push(format!("mapping {}: {ds} schema differs from derived", m.mapping_id)),
                    None => v.push(format!("mapping {}: target {ds} missing", m.mapping_id)),
                }
            }
        }
        for c in &self.cubes.definitions {
            let fact = self.current_schema(&c.fact_dataset);
            match (fact, self.star_for(&c.fact_dataset)) {
                (Some(f), Some(star)) => {
                    if let Err(e) = validate_definition(c, star, &f.fields) {
                        v.push(format!("cube {}: {e}", c.cube_id));
                    }
                }
                _ => v.push(format!("cube {}: fact {} is not a live star", c.cube_id, c.fact_dataset)),
            }
        }
        for cb in &self.cubes.cuboids {
            match self.cube(&cb.cube_id) {
                Some(c) => {
                    if cb.attrs.iter().any(|a| c.attr(a).is_none()) {
                        v.push(format!("cuboid {}/{:?}: attribute outside cube", cb.cube_id, cb.attrs));
                    }
                }
                None => v.push(format!("cuboid of unknown cube {}", cb.cube_id)),
            }
        }
        for c in &self.source_changes {
            if self.source(&c.source_id).is_none() {
                v.push(format!("change {}: unknown source {}", c.change_id, c.source_id));
            }
            if c.status == ChangeStatus::Resolved {
                let settled = self
                    .proposals_for(&c.change_id)
                    .iter()
                    .any(|p| matches!(p.status, ProposalStatus::Applied | ProposalStatus::Rejected));
                if !settled {
                    v.push(format!("change {}: RESOLVED without a settled proposal", c.change_id));
                }
            }
        }
        let mut enabled = BTreeSet::new();
        for r in &self.adaptation_rules {
            if r.enabled && !enabled.insert(r.change_type) {
                v.push(format!("rule {}: second enabled rule for {:?}", r.rule_id, r.change_type));
            }
            if r.option_kinds.is_empty() {
                v.push(format!("rule {}: no option kinds", r.rule_id));
            }
        }
        for p in &self.potential_changes {
            if let Some(c) = &p.change_id {
                if self.change(c).is_none() {
                    v.push(format!("proposal {}: unknown change {c}", p.pc_id));
                }
            }
            match p.status_history.last() {
                Some(last) if last.status == p.status => {}
                _ => v.push(format!("proposal {}: history does not end in its status", p.pc_id)),
            }
            let legal = p.status_history.first().map(|e| e.status) == Some(ProposalStatus::Proposed)
                && p.status_history.windows(2).all(|w| w[0].status.can_move_to(w[1].status));
            if !legal {
                v.push(format!("proposal {}: history has an illegal transition", p.pc_id));
            }
            if !p.option_kind.compatible_with(self.subject_type(p)) && p.change_id.is_some() {
                v.push(format!("proposal {}: option kind incompatible with change", p.pc_id));
            }
        }
        v
    }

    fn subject_type(&self, p: &PotentialChange) -> ChangeType {
        p.change_id
            .as_deref()
            .and_then(|c| self.change(c))
            .map(|c| c.change_type)
            .unwrap_or(ChangeType::AttributeAdded)
    }
}

/// Fields without their raw-read aliases, as seen by mappings.
pub fn plain_fields(fields: &[FieldDef]) -> Vec<FieldDef> {
    fields.iter().map(|f| FieldDef { aliases: Vec::new(), ..f.clone() }).collect()
}

/// Dimension datasets written by a star-loading mapping.
pub fn produced_dimensions(m: &MappingDefinition) -> Vec<String> {
    match m.steps.last() {
        Some(TransformStep::LoadStar { star }) => star
            .dimensions
            .iter()
            .map(|d| crate::highway::dimension_dataset_id(&m.target_dataset, &d.name))
            .collect(),
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::ValueType;

    fn levels() -> Vec<HighwayLevelDef> {
        (0..3).map(|l| HighwayLevelDef { level: l, tick_period: 1 << l, description: String::new() }).collect()
    }

    fn schema(id: &str, level: u32, version: u32, fields: &[(&str, ValueType)]) -> DatasetSchema {
        DatasetSchema {
            dataset_id: id.into(),
            level,
            fields: fields.iter().map(|(n, t)| FieldDef::new(*n, *t, false)).collect(),
            version,
            kind: if level == 0 { DatasetKind::Semistructured } else { DatasetKind::Structured },
        }
    }

    fn change(source: &str) -> SourceChangeRecord {
        SourceChangeRecord {
            change_id: String::new(),
            source_id: source.into(),
            change_type: ChangeType::AttributeAdded,
            payload: ChangePayload {
                dataset_id: Some("raw".into()),
                attribute: Some("c".into()),
                new_type: Some(ValueType::Decimal),
                ..Default::default()
            },
            detected_at: "2024-01-01T00:00:00Z".into(),
            origin: ChangeOrigin::Wrapper,
            status: ChangeStatus::Pending,
        }
    }

    fn with_source() -> Metastore {
        let mut m = Metastore::new(levels()).unwrap();
        m.put_schema(schema("raw", 0, 1, &[("a", ValueType::Integer)])).unwrap();
        m.register_source(SourceDescriptor {
            source_id: "s1".into(),
            format: SourceFormat::Delimited,
            delimiter: Some(','),
            level0_dataset: "raw".into(),
            latency_class: 1,
            empty_pulls: 0,
        })
        .unwrap();
        m
    }

    #[test]
    fn schema_versions() {
        let mut m = Metastore::new(levels()).unwrap();
        assert_eq!(m.put_schema(schema("d1", 1, 1, &[("a", ValueType::Integer)])).unwrap(), 1);
        let v2 = schema("d1", 1, 2, &[("a", ValueType::Integer), ("b", ValueType::Text)]);
        assert_eq!(m.put_schema(v2.clone()).unwrap(), 2);
        assert_eq!(m.get_schema("d1", Some(1)).unwrap().fields.len(), 1);
        assert_eq!(m.put_schema(v2).unwrap_err().code(), "VERSION_CONFLICT");
        assert_eq!(m.get_schema("d1", None).unwrap().version, 2);
        assert_eq!(m.get_schema("missing", None).unwrap_err().code(), "NOT_FOUND");
        let dup = schema("d2", 1, 1, &[("a", ValueType::Integer), ("a", ValueType::Text)]);
        assert_eq!(m.put_schema(dup).unwrap_err().code(), "DUPLICATE_FIELD");
    }

    #[test]
    fn changes_need_registered_sources() {
        let mut m = with_source();
        let id = m.record_change(change("s1")).unwrap();
        assert_eq!(id, "chg-000001");
        assert_eq!(m.changes(Some(ChangeStatus::Pending)).len(), 1);
        let mut elt = change("s1");
        elt.origin = ChangeOrigin::Elt;
        let id2 = m.record_change(elt).unwrap();
        assert_eq!(m.change(&id2).unwrap().origin, ChangeOrigin::Elt);
        assert_eq!(m.record_change(change("nope")).unwrap_err().code(), "UNKNOWN_SOURCE");
        assert_eq!(m.record_change_once(change("s1")).unwrap(), None);
    }

    #[test]
    fn rules_default_and_override() {
        let mut m = Metastore::new(levels()).unwrap();
        assert_eq!(
            m.rules_for(ChangeType::AttributeAdded).option_kinds,
            vec![OptionKind::PropagateAdd, OptionKind::Ignore, OptionKind::NewDimension]
        );
        let rule = |id: &str| AdaptationRule {
            rule_id: id.into(),
            change_type: ChangeType::AttributeAdded,
            option_kinds: vec![OptionKind::Ignore],
            enabled: true,
        };
        m.register_rule(rule("r1")).unwrap();
        assert_eq!(m.rules_for(ChangeType::AttributeAdded).option_kinds, vec![OptionKind::Ignore]);
        assert_eq!(m.register_rule(rule("r2")).unwrap_err().code(), "RULE_CONFLICT");
    }

    #[test]
    fn proposal_lifecycle() {
        let mut m = with_source();
        let c = m.record_change(change("s1")).unwrap();
        let pc = m.add_proposal(Some(c.clone()), OptionKind::Ignore, BTreeMap::new(), "t0", "system");
        let chosen = m.transition_change(&pc, ProposalStatus::Chosen, "dev", "t1").unwrap();
        assert_eq!(chosen.status_history.len(), 2);
        m.transition_change(&pc, ProposalStatus::Applied, "dev", "t2").unwrap();
        let again = m.transition_change(&pc, ProposalStatus::Applied, "dev", "t3").unwrap_err();
        assert_eq!(again.code(), "ILLEGAL_TRANSITION");
        let pc2 = m.add_proposal(Some(c), OptionKind::PropagateAdd, BTreeMap::new(), "t0", "system");
        m.transition_change(&pc2, ProposalStatus::Rejected, "dev", "t1").unwrap();
        let back = m.transition_change(&pc2, ProposalStatus::Chosen, "dev", "t2").unwrap_err();
        assert_eq!(back.code(), "ILLEGAL_TRANSITION");
        assert_eq!(m.transition_change("pc-999999", ProposalStatus::Chosen, "d", "t").unwrap_err().code(), "NOT_FOUND");
    }

    #[test]
    fn export_import_round_trip() {
        let empty = Metastore::default();
        let doc = empty.export();
        let value: serde_json::Value = serde_json::from_str(&doc).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, SECTIONS.to_vec());
        let m = with_source();
        let doc = m.export();
        let (back, count) = Metastore::import(&doc).unwrap();
        assert_eq!(count, m.record_count());
        assert_eq!(back.export(), doc);
        assert_eq!(Metastore::import(&doc[..doc.len() / 2]).unwrap_err().code(), "MALFORMED_DOCUMENT");
    }

    #[test]
    fn import_rejects_dangling_mapping() {
        let mut m = with_source();
        m.mappings.push(MappingDefinition {
            mapping_id: "m1".into(),
            target_dataset: "t".into(),
            source_datasets: vec!["ghost".into()],
            steps: vec![],
            version: 1,
        });
        assert_eq!(Metastore::import(&m.export()).unwrap_err().code(), "INTEGRITY_VIOLATION");
    }

    #[test]
    fn mapping_derives_target_schema() {
        let mut m = with_source();
        let mapping = MappingDefinition {
            mapping_id: "m1".into(),
            target_dataset: "clean".into(),
            source_datasets: vec!["raw".into()],
            steps: vec![TransformStep::Derive {
                field: "b".into(),
                expr: "a * 2".into(),
                value_type: ValueType::Integer,
                nullable: false,
            }],
            version: 1,
        };
        m.put_mapping(mapping.clone()).unwrap();
        let clean = m.current_schema("clean").unwrap();
        assert_eq!(clean.level, 1);
        assert_eq!(clean.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert!(m.validate().is_empty());
        assert_eq!(m.put_mapping(mapping).unwrap_err().code(), "VERSION_CONFLICT");
    }
}
