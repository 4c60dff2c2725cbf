//! Planning one option: the rewritten metastore, the data migration hints
//! and the impact report.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    check_parameters, required_parameters, subject_of, DeltaKind, FieldDelta, ImpactReport, MappingImpact,
    OptionKind, SchemaImpact, StepChange, StepDelta, Subject,
};
use crate::cube::validate_definition;
use crate::error::{Error, Result};
use crate::highway::expr::{self, Expr};
use crate::highway::{dimension_dataset_id, step_shape, DimensionSpec, StepShape, TransformStep};
use crate::metastore::{
    plain_fields, produced_dimensions, ChangeStatus, ChangeType, FieldDef, MappingDefinition, Metastore,
    PotentialChange,
};
use crate::value::{parse_text_as, Value, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    /// Missing parameters get placeholders; blockers are reported.
    Preview,
    /// Parameters are checked strictly; blockers fail the plan.
    Apply,
}

/// The outcome of planning one option.
#[derive(Debug, Clone)]
pub struct Plan {
    pub meta: Metastore,
    pub report: ImpactReport,
    /// Per dataset: new field name to the old field holding its values.
    pub renames: BTreeMap<String, BTreeMap<String, String>>,
    /// Per dataset: new fields whose existing rows get the value 1.
    pub fill_one: BTreeMap<String, BTreeSet<String>>,
    /// Dimension datasets created with one unknown member (key 1).
    pub seeded: BTreeSet<String>,
    /// Cubes to rebuild. `None` rebuilds every cuboid, otherwise only those
    /// touching one of the listed attributes.
    pub cube_rebuild: BTreeMap<String, Option<BTreeSet<String>>>,
    pub deleted_cubes: BTreeSet<String>,
    /// Open sibling changes this option settles.
    pub resolve_with_ignore: Vec<String>,
}

struct Planner {
    old: Metastore,
    meta: Metastore,
    kind: OptionKind,
    mode: PlanMode,
    params: BTreeMap<String, String>,
    subject: Subject,
    source_id: Option<String>,
    blockers: Vec<String>,
    renames: BTreeMap<String, BTreeMap<String, String>>,
    fill_one: BTreeMap<String, BTreeSet<String>>,
    seeded: BTreeSet<String>,
    cube_rebuild: BTreeMap<String, Option<BTreeSet<String>>>,
    deleted_cubes: BTreeSet<String>,
    resolve_with_ignore: Vec<String>,
}

/// Plans `pc` against `meta`.
pub fn plan_option(meta: &Metastore, pc: &PotentialChange, mode: PlanMode) -> Result<Plan> {
    let subject = subject_of(meta, pc)?;
    if pc.change_id.is_some() && !pc.option_kind.compatible_with(subject.change_type) {
        return Err(Error::IncompatibleOption(format!(
            "{} cannot answer {:?}",
            pc.option_kind, subject.change_type
        )));
    }
    if mode == PlanMode::Apply {
        check_parameters(pc.option_kind, &subject, &pc.parameters)?;
    }
    let source_id = pc
        .change_id
        .as_deref()
        .and_then(|c| meta.change(c))
        .map(|c| c.source_id.clone());
    let mut p = Planner {
        old: meta.clone(),
        meta: meta.clone(),
        kind: pc.option_kind,
        mode,
        params: pc.parameters.clone(),
        subject,
        source_id,
        blockers: Vec::new(),
        renames: BTreeMap::new(),
        fill_one: BTreeMap::new(),
        seeded: BTreeSet::new(),
        cube_rebuild: BTreeMap::new(),
        deleted_cubes: BTreeSet::new(),
        resolve_with_ignore: Vec::new(),
    };
    p.run()?;
    p.finish();
    let report = p.report(&pc.pc_id);
    if mode == PlanMode::Apply && !report.blockers.is_empty() {
        return Err(Error::ApplyFailed(report.blockers.join("; ")));
    }
    Ok(Plan {
        meta: p.meta,
        report,
        renames: p.renames,
        fill_one: p.fill_one,
        seeded: p.seeded,
        cube_rebuild: p.cube_rebuild,
        deleted_cubes: p.deleted_cubes,
        resolve_with_ignore: p.resolve_with_ignore,
    })
}

fn fields_of(meta: &Metastore, ds: &str) -> Option<Vec<FieldDef>> {
    meta.current_schema(ds).map(|s| plain_fields(&s.fields))
}

/// Live mappings ordered by target level, then id.
fn ordered(meta: &Metastore) -> Vec<MappingDefinition> {
    let mut out: Vec<(u32, MappingDefinition)> = meta
        .current_mappings()
        .into_iter()
        .map(|m| {
            let level = meta.current_schema(&m.target_dataset).map(|s| s.level).unwrap_or(u32::MAX);
            (level, m.clone())
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.mapping_id.cmp(&b.1.mapping_id)));
    out.into_iter().map(|(_, m)| m).collect()
}

/// Shape after `step` given `fields`, resolving side inputs among the
/// mapping's sources.
fn shape(meta: &Metastore, m: &MappingDefinition, step: &TransformStep, fields: &[FieldDef]) -> Result<Vec<FieldDef>> {
    let side = |d: &str| {
        if m.source_datasets.iter().any(|s| s == d) {
            fields_of(meta, d)
        } else {
            None
        }
    };
    Ok(match step_shape(step, fields, &side)? {
        StepShape::Rows(f) => f,
        StepShape::Star { fact, .. } => fact,
    })
}

fn literal(value: &Value) -> String {
    match value {
        Value::Timestamp(t) => format!("cast({}, \"TIMESTAMP\")", Expr::Lit(Value::Text(t.clone()))),
        v => Expr::Lit(v.clone()).to_string(),
    }
}

fn placeholder(ty: ValueType) -> &'static str {
    match ty {
        ValueType::Boolean => "false",
        ValueType::Integer | ValueType::Decimal => "0",
        ValueType::Text => "",
        ValueType::Timestamp => "1970-01-01T00:00:00Z",
    }
}

fn rename_expr(src: &str, map: &BTreeMap<String, String>) -> Result<String> {
    let e = expr::parse(src)?;
    if e.fields().iter().all(|f| !map.contains_key(f)) {
        return Ok(src.to_string());
    }
    Ok(e.rename_fields(&|f| map.get(f).cloned()).to_string())
}

fn map_name(map: &BTreeMap<String, String>, n: &mut String) {
    if let Some(x) = map.get(n.as_str()) {
        *n = x.clone();
    }
}

impl Planner {
    fn block(&mut self, msg: impl Into<String>) {
        self.blockers.push(msg.into());
    }

    /// A parameter value; in preview, absent ones get `fallback`.
    fn param(&self, name: &str, fallback: &str) -> Option<String> {
        match self.params.get(name) {
            Some(v) => Some(v.clone()),
            None if self.mode == PlanMode::Preview => Some(fallback.to_string()),
            None => None,
        }
    }

    fn invalid(&self, msg: String) -> Result<()> {
        match self.mode {
            PlanMode::Apply => Err(Error::InvalidParameter(msg)),
            PlanMode::Preview => Ok(()),
        }
    }

    fn edit_level0(&mut self, f: impl FnOnce(&mut Vec<FieldDef>) -> std::result::Result<(), String>) -> Result<bool> {
        let ds = self.subject.dataset.clone();
        let schema = self
            .meta
            .current_schema(&ds)
            .cloned()
            .ok_or_else(|| Error::UnknownDataset(ds.clone()))?;
        let mut fields = schema.fields.clone();
        if let Err(msg) = f(&mut fields) {
            self.block(msg);
            return Ok(false);
        }
        match self.meta.update_fields(&ds, schema.level, fields, schema.kind) {
            Ok(_) => Ok(true),
            Err(e) => {
                self.block(format!("{ds}: {e}"));
                Ok(false)
            }
        }
    }

    /// Stores rewritten steps and re-derives the mapping's targets.
    fn commit(&mut self, m: &MappingDefinition, steps: Vec<TransformStep>) -> bool {
        if let Err(e) = self.meta.bump_mapping(&m.mapping_id, steps) {
            self.block(format!("{}: {e}", m.mapping_id));
            return false;
        }
        if let Err(e) = self.meta.derive_mapping(&m.mapping_id) {
            self.block(e.to_string());
            return false;
        }
        true
    }

    fn run(&mut self) -> Result<()> {
        let ct = self.subject.change_type;
        match (self.kind, ct) {
            (OptionKind::Ignore, _) => Ok(()),
            (OptionKind::PropagateAdd, ChangeType::DatasetAdded) => self.dataset_added(),
            (OptionKind::NewDimension, ChangeType::DatasetAdded) => {
                self.block("NEW_DIMENSION needs a single attribute, not a whole dataset");
                Ok(())
            }
            (OptionKind::PropagateAdd, _) => self.add_field(None),
            (OptionKind::NewDimension, _) => {
                let field = self.subject.attribute()?.to_string();
                let dim = self.param("dimension", &field).unwrap_or_default();
                let key = self.param("natural_key", &field).unwrap_or_default();
                if key != field {
                    self.invalid(format!("natural_key must be the added attribute {field:?}"))?;
                }
                if dim.is_empty() {
                    self.invalid("dimension is empty".into())?;
                }
                self.add_field(Some(dim))
            }
            (OptionKind::MapWithDefault, ChangeType::DatasetRemoved) => {
                self.block("a removed dataset has no attribute to default");
                Ok(())
            }
            (OptionKind::MapWithDefault, _) => self.map_with_default(),
            (OptionKind::DropTarget, ChangeType::DatasetRemoved) => self.drop_dataset(),
            (OptionKind::DropTarget, _) => self.drop_field(),
            (OptionKind::RenameConfirm, _) => self.rename(),
            (OptionKind::TypeWiden, _) => self.widen(),
        }
    }

    // ---- additions -----------------------------------------------------------

    fn dataset_added(&mut self) -> Result<()> {
        let Some(fields) = self.subject.fields.clone() else {
            self.block("the change carries no fields");
            return Ok(());
        };
        self.edit_level0(|cur| {
            if !cur.is_empty() {
                return Err("the dataset already has fields".into());
            }
            *cur = fields;
            Ok(())
        })?;
        Ok(())
    }

    fn add_field(&mut self, dimension: Option<String>) -> Result<()> {
        let field = self.subject.attribute()?.to_string();
        let Some(ty) = self.subject.new_type else {
            self.block("the change carries no type for the new attribute");
            return Ok(());
        };
        let f2 = field.clone();
        if !self.edit_level0(|cur| {
            if cur.iter().any(|x| x.name == f2 || x.aliases.contains(&f2)) {
                return Err(format!("{f2:?} already exists"));
            }
            cur.push(FieldDef::new(f2, ty, true));
            Ok(())
        })? {
            return Ok(());
        }
        let mut carried: BTreeMap<String, Vec<String>> = [(self.subject.dataset.clone(), vec![field])].into();
        let mut star_reached = false;
        for m in ordered(&self.meta) {
            if !m.source_datasets.iter().any(|s| carried.contains_key(s)) {
                continue;
            }
            let primary = m.source_datasets[0].clone();
            let mut carry = carried.get(&primary).cloned().unwrap_or_default();
            let mut fields = fields_of(&self.meta, &primary).unwrap_or_default();
            let mut steps = Vec::new();
            let mut new_dims: Vec<(String, String)> = Vec::new();
            for step in &m.steps {
                let mut step = step.clone();
                let mut prefix = None;
                match &mut step {
                    TransformStep::Project { fields: names } => {
                        for c in &carry {
                            if !names.contains(c) {
                                names.push(c.clone());
                            }
                        }
                    }
                    TransformStep::Rename { renames } => {
                        for c in carry.iter_mut() {
                            map_name(renames, c);
                        }
                    }
                    TransformStep::Derive { field, .. } | TransformStep::Extract { field, .. }
                        if carry.contains(field) =>
                    {
                        self.block(format!("{}: derived {field:?} collides with the new attribute", m.mapping_id));
                        return Ok(());
                    }
                    TransformStep::Join { dataset, .. } => {
                        for c in carried.get(dataset.as_str()).cloned().unwrap_or_default() {
                            if carry.contains(&c) {
                                self.block(format!("{}: both join inputs carry {c:?}", m.mapping_id));
                                return Ok(());
                            }
                            carry.push(c);
                        }
                    }
                    TransformStep::Union { dataset } => match carried.get(dataset.as_str()) {
                        None if !carry.is_empty() => {
                            let keep = fields
                                .iter()
                                .map(|f| f.name.clone())
                                .filter(|n| !carry.contains(n))
                                .collect();
                            prefix = Some(TransformStep::Project { fields: keep });
                            carry.clear();
                        }
                        Some(side) if *side != carry => {
                            self.block(format!(
                                "{}: union with {dataset:?} would not line up with the new attribute",
                                m.mapping_id
                            ));
                            return Ok(());
                        }
                        _ => {}
                    },
                    TransformStep::Aggregate { group_by, .. } => {
                        if dimension.is_some() {
                            for c in &carry {
                                if !group_by.contains(c) {
                                    group_by.push(c.clone());
                                }
                            }
                        } else {
                            carry.clear();
                        }
                    }
                    TransformStep::LoadStar { star } => {
                        if let Some(dim) = &dimension {
                            for c in &carry {
                                if star.dimension(dim).is_some() {
                                    self.block(format!("dimension {dim:?} already exists in {}", star.fact));
                                    return Ok(());
                                }
                                star.dimensions.push(DimensionSpec {
                                    name: dim.clone(),
                                    natural_key: vec![c.clone()],
                                    attributes: vec![c.clone()],
                                    hierarchy: vec![c.clone()],
                                });
                                new_dims.push((dim.clone(), c.clone()));
                                star_reached = true;
                            }
                        }
                        carry.clear();
                    }
                    _ => {}
                }
                for s in prefix.into_iter().chain(std::iter::once(step)) {
                    match shape(&self.meta, &m, &s, &fields) {
                        Ok(f) => fields = f,
                        Err(e) => {
                            self.block(format!("{}: {e}", m.mapping_id));
                            return Ok(());
                        }
                    }
                    steps.push(s);
                }
            }
            if !self.commit(&m, steps) {
                return Ok(());
            }
            for (dim, attr) in new_dims {
                let key = format!("{dim}_key");
                self.fill_one.entry(m.target_dataset.clone()).or_default().insert(key);
                self.seeded.insert(dimension_dataset_id(&m.target_dataset, &dim));
                for cube in self.meta.cubes.definitions.iter_mut().filter(|c| c.fact_dataset == m.target_dataset) {
                    cube.attrs.push(crate::cube::CubeAttr {
                        attribute: attr.clone(),
                        dimension: dim.clone(),
                        position: Some(0),
                    });
                    if let Some(set) = self.cube_rebuild.entry(cube.cube_id.clone()).or_insert_with(|| Some(BTreeSet::new())) {
                        set.insert(attr.clone());
                    }
                }
            }
            if !carry.is_empty() {
                carried.insert(m.target_dataset.clone(), carry);
            }
        }
        if dimension.is_some() && !star_reached {
            self.block("no star schema downstream receives the new attribute");
        }
        Ok(())
    }

    // ---- removals ------------------------------------------------------------

    fn map_with_default(&mut self) -> Result<()> {
        let field = self.subject.attribute()?.to_string();
        let ds = self.subject.dataset.clone();
        let Some(old) = self.meta.current_schema(&ds).and_then(|s| s.field(&field)).cloned() else {
            self.block(format!("{ds} has no field {field:?}"));
            return Ok(());
        };
        let raw = self.param("default", placeholder(old.value_type)).unwrap_or_default();
        let value = match parse_text_as(&raw, old.value_type) {
            Some(v) => v,
            None => {
                self.invalid(format!("default {raw:?} is not a {}", old.value_type))?;
                parse_text_as(placeholder(old.value_type), old.value_type).expect("placeholder parses")
            }
        };
        let original: Vec<String> =
            self.meta.current_schema(&ds).map(|s| s.fields.iter().map(|f| f.name.clone()).collect()).unwrap_or_default();
        let f2 = field.clone();
        if !self.edit_level0(|cur| {
            cur.retain(|f| f.name != f2);
            Ok(())
        })? {
            return Ok(());
        }
        for m in self.meta.mappings_reading(&ds).into_iter().cloned().collect::<Vec<_>>() {
            if m.source_datasets[0] != ds {
                self.block(format!("{} joins {ds} as a side input", m.mapping_id));
                continue;
            }
            let mut steps = vec![
                TransformStep::Derive {
                    field: field.clone(),
                    expr: literal(&value),
                    value_type: old.value_type,
                    nullable: old.nullable,
                },
                TransformStep::Project { fields: original.clone() },
            ];
            steps.extend(m.steps.iter().cloned());
            self.commit(&m, steps);
        }
        Ok(())
    }

    fn drop_field(&mut self) -> Result<()> {
        let field = self.subject.attribute()?.to_string();
        let ds = self.subject.dataset.clone();
        if self.meta.current_schema(&ds).and_then(|s| s.field(&field)).is_none() {
            self.block(format!("{ds} has no field {field:?}"));
            return Ok(());
        }
        let f2 = field.clone();
        if !self.edit_level0(|cur| {
            cur.retain(|f| f.name != f2);
            Ok(())
        })? {
            return Ok(());
        }
        let mut gone: BTreeMap<String, BTreeSet<String>> = [(ds, BTreeSet::from([field]))].into();
        // fact -> (removed measures, removed dimension attributes)
        let mut star_loss: BTreeMap<String, (BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
        for m in ordered(&self.meta) {
            if !m.source_datasets.iter().any(|s| gone.contains_key(s)) {
                continue;
            }
            let mut g = gone.get(&m.source_datasets[0]).cloned().unwrap_or_default();
            let mut steps = Vec::new();
            for step in &m.steps {
                let mut step = step.clone();
                let mut keep = true;
                let blocked = match &mut step {
                    TransformStep::Project { fields } => {
                        fields.retain(|f| !g.contains(f));
                        fields.is_empty().then(|| "projection would be empty".to_string())
                    }
                    TransformStep::Rename { renames } => {
                        for (k, v) in renames.clone() {
                            if g.contains(&k) {
                                renames.remove(&k);
                                g.insert(v);
                            }
                        }
                        keep = !renames.is_empty();
                        None
                    }
                    TransformStep::Filter { predicate } => {
                        let refs = expr::parse(predicate)?.fields();
                        refs.iter().find(|f| g.contains(*f)).map(|f| format!("filter reads {f:?}"))
                    }
                    TransformStep::Derive { field, expr: src, .. } => {
                        if expr::parse(src)?.fields().iter().any(|f| g.contains(f)) {
                            keep = false;
                            g.insert(field.clone());
                        }
                        None
                    }
                    TransformStep::Extract { source, field, .. } => {
                        if g.contains(source) {
                            keep = false;
                            g.insert(field.clone());
                        }
                        None
                    }
                    TransformStep::Join { dataset, on, .. } => {
                        let side = gone.get(dataset.as_str()).cloned().unwrap_or_default();
                        let hit = on.iter().find(|k| g.contains(&k.left) || side.contains(&k.right));
                        let msg = hit.map(|k| format!("join key {:?}={:?} is dropped", k.left, k.right));
                        g.extend(side);
                        msg
                    }
                    TransformStep::Union { dataset } => {
                        let side = gone.get(dataset.as_str()).cloned().unwrap_or_default();
                        (side != g).then(|| format!("union with {dataset:?} would no longer line up"))
                    }
                    TransformStep::Aggregate { group_by, measures } => {
                        if let Some(f) = group_by.iter().find(|f| g.contains(*f)) {
                            Some(format!("aggregate groups by {f:?}"))
                        } else {
                            let removed: BTreeSet<String> =
                                measures.iter().filter(|a| g.contains(&a.field)).map(|a| a.out.clone()).collect();
                            measures.retain(|a| !removed.contains(&a.out));
                            g = removed;
                            None
                        }
                    }
                    TransformStep::LoadStar { star } => {
                        let removed: BTreeSet<String> = star.measures.iter().filter(|f| g.contains(*f)).cloned().collect();
                        star.measures.retain(|f| !removed.contains(f));
                        let mut attrs = BTreeSet::new();
                        let mut msg = None;
                        for d in &mut star.dimensions {
                            if let Some(k) = d.natural_key.iter().find(|k| g.contains(*k)) {
                                msg = Some(format!("{k:?} is the natural key of dimension {:?}", d.name));
                            }
                            for a in d.attributes.iter().filter(|a| g.contains(*a)) {
                                attrs.insert(a.clone());
                            }
                            d.attributes.retain(|a| !g.contains(a));
                            d.hierarchy.retain(|a| !g.contains(a));
                        }
                        star_loss.insert(m.target_dataset.clone(), (removed.clone(), attrs));
                        g = removed;
                        msg
                    }
                };
                if let Some(msg) = blocked {
                    self.block(format!("{}: {msg}", m.mapping_id));
                    return Ok(());
                }
                if keep {
                    steps.push(step);
                }
            }
            if !self.commit(&m, steps) {
                return Ok(());
            }
            gone.insert(m.target_dataset.clone(), g);
        }
        for (fact, (measures, attrs)) in star_loss {
            for cube in self.meta.cubes.definitions.iter_mut().filter(|c| c.fact_dataset == fact) {
                let before_measures = cube.measures.len();
                cube.measures.retain(|x| !measures.contains(&x.field));
                let lost: BTreeSet<String> =
                    cube.attrs.iter().filter(|a| attrs.contains(&a.attribute)).map(|a| a.attribute.clone()).collect();
                cube.attrs.retain(|a| !lost.contains(&a.attribute));
                cube.cuboids.retain(|c| c.iter().all(|a| !lost.contains(a)));
                if cube.measures.is_empty() {
                    self.blockers.push(format!("cube {} would keep no measure", cube.cube_id));
                } else if cube.measures.len() != before_measures {
                    self.cube_rebuild.insert(cube.cube_id.clone(), None);
                } else if !lost.is_empty() {
                    self.cube_rebuild.insert(cube.cube_id.clone(), Some(lost));
                }
            }
        }
        Ok(())
    }

    fn drop_dataset(&mut self) -> Result<()> {
        let mut frontier = BTreeSet::from([self.subject.dataset.clone()]);
        let mut mappings = Vec::new();
        for m in ordered(&self.meta) {
            let hit = m.source_datasets.iter().filter(|s| frontier.contains(*s)).count();
            if hit == 0 {
                continue;
            }
            if hit != m.source_datasets.len() {
                self.block(format!("{} also reads datasets that stay", m.mapping_id));
                return Ok(());
            }
            mappings.push(m.mapping_id.clone());
            frontier.insert(m.target_dataset.clone());
            frontier.extend(produced_dimensions(&m));
        }
        frontier.remove(&self.subject.dataset);
        let h = &mut self.meta.highway;
        h.retired_datasets.extend(frontier.iter().cloned());
        h.retired_mappings.extend(mappings);
        let doomed: Vec<String> = self
            .meta
            .cubes
            .definitions
            .iter()
            .filter(|c| frontier.contains(&c.fact_dataset))
            .map(|c| c.cube_id.clone())
            .collect();
        self.meta.cubes.definitions.retain(|c| !doomed.contains(&c.cube_id));
        self.meta.cubes.cuboids.retain(|c| !doomed.contains(&c.cube_id));
        self.deleted_cubes.extend(doomed);
        self.meta.normalize();
        Ok(())
    }

    // ---- renames and types ---------------------------------------------------

    fn rename(&mut self) -> Result<()> {
        let from = self.subject.attribute()?.to_string();
        let Some(to) = self.subject.new_attribute.clone() else {
            self.block("the change names no new attribute");
            return Ok(());
        };
        let confirm = self.param("confirm", "true").unwrap_or_default();
        if confirm != "true" {
            self.invalid(format!("confirm must be \"true\", got {confirm:?}"))?;
        }
        let ds = self.subject.dataset.clone();
        let (f1, t1) = (from.clone(), to.clone());
        if !self.edit_level0(|cur| {
            if cur.iter().any(|f| f.name == t1) {
                return Err(format!("{t1:?} already exists"));
            }
            let f = cur.iter_mut().find(|f| f.name == f1).ok_or_else(|| format!("no field {f1:?}"))?;
            f.name = t1.clone();
            f.aliases.retain(|a| *a != t1);
            f.aliases.push(f1.clone());
            Ok(())
        })? {
            return Ok(());
        }
        self.renames.insert(ds.clone(), [(to.clone(), from.clone())].into());
        let mut ren: BTreeMap<String, BTreeMap<String, String>> = [(ds, [(from.clone(), to.clone())].into())].into();
        // fact -> renames of its dimension attributes and measures
        let mut star_ren: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for m in ordered(&self.meta) {
            if !m.source_datasets.iter().any(|s| ren.contains_key(s)) {
                continue;
            }
            let mut r = ren.get(&m.source_datasets[0]).cloned().unwrap_or_default();
            let mut steps = Vec::new();
            let mut dim_ren: Vec<(String, BTreeMap<String, String>)> = Vec::new();
            for step in &m.steps {
                let mut step = step.clone();
                match &mut step {
                    TransformStep::Project { fields } => fields.iter_mut().for_each(|f| map_name(&r, f)),
                    TransformStep::Rename { renames } => {
                        let mut next = BTreeMap::new();
                        for (k, v) in std::mem::take(renames) {
                            match r.remove(&k) {
                                Some(nk) => next.insert(nk, v),
                                None => next.insert(k, v),
                            };
                        }
                        *renames = next;
                    }
                    TransformStep::Filter { predicate } => *predicate = rename_expr(predicate, &r)?,
                    TransformStep::Derive { expr: src, .. } => *src = rename_expr(src, &r)?,
                    TransformStep::Extract { source, .. } => map_name(&r, source),
                    TransformStep::Join { dataset, on, .. } => {
                        let side = ren.get(dataset.as_str()).cloned().unwrap_or_default();
                        for k in on.iter_mut() {
                            map_name(&r, &mut k.left);
                            map_name(&side, &mut k.right);
                        }
                        r.extend(side);
                    }
                    TransformStep::Union { dataset } => {
                        let side = ren.get(dataset.as_str()).cloned().unwrap_or_default();
                        if side != r {
                            self.block(format!("{}: union with {dataset:?} would no longer line up", m.mapping_id));
                            return Ok(());
                        }
                    }
                    TransformStep::Aggregate { group_by, measures } => {
                        let kept: BTreeMap<String, String> =
                            r.iter().filter(|(k, _)| group_by.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
                        group_by.iter_mut().for_each(|f| map_name(&r, f));
                        measures.iter_mut().for_each(|a| map_name(&r, &mut a.field));
                        r = kept;
                    }
                    TransformStep::LoadStar { star } => {
                        let mut sr = BTreeMap::new();
                        for f in star.measures.iter_mut() {
                            if let Some(n) = r.get(f.as_str()) {
                                sr.insert(f.clone(), n.clone());
                                *f = n.clone();
                            }
                        }
                        let fact_ren = sr.clone();
                        for d in star.dimensions.iter_mut() {
                            let mut dr = BTreeMap::new();
                            for a in d.attributes.iter_mut() {
                                if let Some(n) = r.get(a.as_str()) {
                                    dr.insert(n.clone(), a.clone());
                                    sr.insert(a.clone(), n.clone());
                                    *a = n.clone();
                                }
                            }
                            d.natural_key.iter_mut().for_each(|f| map_name(&r, f));
                            d.hierarchy.iter_mut().for_each(|f| map_name(&r, f));
                            if !dr.is_empty() {
                                dim_ren.push((dimension_dataset_id(&m.target_dataset, &d.name), dr));
                            }
                        }
                        star_ren.insert(m.target_dataset.clone(), sr);
                        r = fact_ren;
                    }
                }
                steps.push(step);
            }
            if !self.commit(&m, steps) {
                return Ok(());
            }
            for (d, dr) in dim_ren {
                self.renames.insert(d, dr);
            }
            if !r.is_empty() {
                self.renames
                    .insert(m.target_dataset.clone(), r.iter().map(|(k, v)| (v.clone(), k.clone())).collect());
                ren.insert(m.target_dataset.clone(), r);
            }
        }
        for (fact, sr) in star_ren {
            for cube in self.meta.cubes.definitions.iter_mut().filter(|c| c.fact_dataset == fact) {
                let mut touched = BTreeSet::new();
                for a in cube.attrs.iter_mut() {
                    if let Some(n) = sr.get(&a.attribute) {
                        a.attribute = n.clone();
                        touched.insert(n.clone());
                    }
                }
                for x in cube.measures.iter_mut() {
                    if let Some(n) = sr.get(&x.field) {
                        x.out.get_or_insert_with(|| format!("{}_{}", x.func.name(), x.field));
                        x.field = n.clone();
                    }
                }
                for c in cube.cuboids.iter_mut() {
                    c.iter_mut().for_each(|a| map_name(&sr, a));
                    c.sort();
                }
                if !touched.is_empty() {
                    self.cube_rebuild.insert(cube.cube_id.clone(), Some(touched));
                }
            }
        }
        if let Some(source) = self.source_id.clone() {
            let ds = self.subject.dataset.clone();
            let siblings: Vec<String> = self
                .meta
                .source_changes
                .iter()
                .filter(|c| c.source_id == source && c.status != ChangeStatus::Resolved)
                .filter(|c| c.payload.dataset_id.as_deref().is_none_or(|d| d == ds))
                .filter(|c| {
                    (c.change_type == ChangeType::AttributeRemoved && c.payload.attribute.as_deref() == Some(&from))
                        || (c.change_type == ChangeType::AttributeAdded
                            && c.payload.attribute.as_deref() == Some(&to))
                })
                .map(|c| c.change_id.clone())
                .collect();
            self.resolve_with_ignore = siblings;
        }
        Ok(())
    }

    fn widen(&mut self) -> Result<()> {
        let field = self.subject.attribute()?.to_string();
        let ds = self.subject.dataset.clone();
        let Some(old) = self.meta.current_schema(&ds).and_then(|s| s.field(&field)).cloned() else {
            self.block(format!("{ds} has no field {field:?}"));
            return Ok(());
        };
        let Some(observed) = self.subject.new_type else {
            self.block("the change carries no new type");
            return Ok(());
        };
        let target = old.value_type.lub(observed);
        let conversion = self.params.get("conversion").filter(|c| !c.trim().is_empty()).cloned();
        let conversion = match conversion.map(|c| expr::parse(&c).map(|e| (c, e))) {
            None => None,
            Some(Ok(x)) => Some(x),
            Some(Err(e)) => {
                self.invalid(format!("conversion: {e}"))?;
                None
            }
        };
        let original: Vec<String> =
            self.meta.current_schema(&ds).map(|s| s.fields.iter().map(|f| f.name.clone()).collect()).unwrap_or_default();
        let f2 = field.clone();
        if !self.edit_level0(|cur| {
            if let Some(f) = cur.iter_mut().find(|f| f.name == f2) {
                f.value_type = target;
            }
            Ok(())
        })? {
            return Ok(());
        }
        if let Some((_, e)) = conversion {
            let raw = format!("{field}__raw");
            let body = e
                .rename_fields(&|n| (n == field).then(|| raw.clone()))
                .to_string();
            for m in self.meta.mappings_reading(&ds).into_iter().cloned().collect::<Vec<_>>() {
                if m.source_datasets[0] != ds {
                    self.block(format!("{} joins {ds} as a side input", m.mapping_id));
                    continue;
                }
                let mut steps = vec![
                    TransformStep::Rename { renames: [(field.clone(), raw.clone())].into() },
                    TransformStep::Derive {
                        field: field.clone(),
                        expr: body.clone(),
                        value_type: old.value_type,
                        nullable: old.nullable,
                    },
                    TransformStep::Project { fields: original.clone() },
                ];
                steps.extend(m.steps.iter().cloned());
                self.commit(&m, steps);
            }
        }
        Ok(())
    }

    // ---- finishing -----------------------------------------------------------

    fn finish(&mut self) {
        if self.blockers.is_empty() {
            let changed = BTreeSet::from([self.subject.dataset.clone()]);
            if let Err(e) = self.meta.rederive(changed) {
                self.block(e.to_string());
            }
        }
        let mut validated = Vec::new();
        for def in &self.meta.cubes.definitions {
            let fact = self.meta.current_schema(&def.fact_dataset);
            match (fact, self.meta.star_for(&def.fact_dataset)) {
                (Some(f), Some(star)) => match validate_definition(def, star, &f.fields) {
                    Ok(d) => validated.push(d),
                    Err(e) => {
                        self.blockers.push(format!("cube {}: {e}", def.cube_id));
                        validated.push(def.clone());
                    }
                },
                _ => {
                    self.blockers.push(format!("cube {} loses its star", def.cube_id));
                    validated.push(def.clone());
                }
            }
        }
        self.meta.cubes.definitions = validated;
        let defs = self.meta.cubes.definitions.clone();
        self.meta.cubes.cuboids.retain(|cb| {
            defs.iter()
                .find(|d| d.cube_id == cb.cube_id)
                .is_some_and(|d| cb.attrs.iter().all(|a| d.attr(a).is_some()))
        });
        for (id, touched) in &self.cube_rebuild {
            if let Some(set) = touched {
                self.meta
                    .cubes
                    .cuboids
                    .retain(|cb| cb.cube_id != *id || !cb.attrs.iter().any(|a| set.contains(a)));
            } else {
                self.meta.cubes.cuboids.retain(|cb| cb.cube_id != *id);
            }
        }
        self.meta.normalize();
        if self.blockers.is_empty() {
            for v in self.meta.validate() {
                self.blockers.push(v);
            }
        }
    }

    fn report(&self, pc_id: &str) -> ImpactReport {
        let mut schemas = Vec::new();
        let ids: BTreeSet<String> = self
            .old
            .live_datasets(None)
            .into_iter()
            .chain(self.meta.live_datasets(None))
            .map(|s| s.dataset_id.clone())
            .collect();
        for id in ids {
            let (before, after) = (self.old.current_schema(&id), self.meta.current_schema(&id));
            let (level, deltas) = match (before, after) {
                (None, Some(a)) => (a.level, vec![FieldDelta { change: DeltaKind::DatasetAdded, field: id.clone(), detail: None }]),
                (Some(b), None) => (b.level, vec![FieldDelta { change: DeltaKind::DatasetRetired, field: id.clone(), detail: None }]),
                (Some(b), Some(a)) if b.fields != a.fields => {
                    (a.level, field_deltas(&b.fields, &a.fields, self.renames.get(&id)))
                }
                _ => continue,
            };
            schemas.push(SchemaImpact { dataset_id: id, level, deltas });
        }
        let mut mappings = Vec::new();
        for m in self.old.current_mappings() {
            match self.meta.current_mapping(&m.mapping_id) {
                None => mappings.push(MappingImpact { mapping_id: m.mapping_id.clone(), retired: true, deltas: Vec::new() }),
                Some(n) if n.steps != m.steps => mappings.push(MappingImpact {
                    mapping_id: m.mapping_id.clone(),
                    retired: false,
                    deltas: step_deltas(&m.steps, &n.steps),
                }),
                _ => {}
            }
        }
        let mut cubes: BTreeSet<String> = self.deleted_cubes.clone();
        cubes.extend(self.cube_rebuild.keys().cloned());
        for d in &self.meta.cubes.definitions {
            if self.old.cube(&d.cube_id) != Some(d) {
                cubes.insert(d.cube_id.clone());
            }
        }
        ImpactReport {
            pc_id: pc_id.to_string(),
            option_kind: self.kind,
            schemas,
            mappings,
            cubes: cubes.into_iter().collect(),
            required_parameters: required_parameters(self.kind, &self.subject),
            blockers: self.blockers.clone(),
        }
    }
}

fn field_deltas(before: &[FieldDef], after: &[FieldDef], renames: Option<&BTreeMap<String, String>>) -> Vec<FieldDelta> {
    let mut out = Vec::new();
    let mut consumed = BTreeSet::new();
    for a in after {
        let old_name = renames.and_then(|r| r.get(&a.name)).cloned().unwrap_or_else(|| a.name.clone());
        match before.iter().find(|b| b.name == old_name) {
            None => out.push(FieldDelta { change: DeltaKind::Added, field: a.name.clone(), detail: Some(a.value_type.to_string()) }),
            Some(b) => {
                consumed.insert(b.name.clone());
                if b.name != a.name {
                    out.push(FieldDelta {
                        change: DeltaKind::Renamed,
                        field: a.name.clone(),
                        detail: Some(format!("{} -> {}", b.name, a.name)),
                    });
                }
                if b.value_type != a.value_type {
                    out.push(FieldDelta {
                        change: DeltaKind::Retyped,
                        field: a.name.clone(),
                        detail: Some(format!("{} -> {}", b.value_type, a.value_type)),
                    });
                }
                if b.nullable != a.nullable {
                    out.push(FieldDelta {
                        change: DeltaKind::Nullability,
                        field: a.name.clone(),
                        detail: Some(format!("{} -> {}", b.nullable, a.nullable)),
                    });
                }
            }
        }
    }
    for b in before {
        if !consumed.contains(&b.name) {
            out.push(FieldDelta { change: DeltaKind::Removed, field: b.name.clone(), detail: None });
        }
    }
    out
}

/// Step-level diff via a longest common subsequence. An adjacent removal and
/// insertion of the same operation are reported as one modification.
pub fn step_deltas(old: &[TransformStep], new: &[TransformStep]) -> Vec<StepDelta> {
    let (n, m) = (old.len(), new.len());
    let mut t = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            t[i][j] = if old[i] == new[j] { t[i + 1][j + 1] + 1 } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    let mut raw: Vec<StepDelta> = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && old[i] == new[j] {
            i += 1;
            j += 1;
        } else if i < n && (j == m || t[i + 1][j] >= t[i][j + 1]) {
            raw.push(StepDelta {
                index: i,
                change: StepChange::Removed,
                op: old[i].op_name().into(),
                before: Some(old[i].clone()),
                after: None,
            });
            i += 1;
        } else {
            raw.push(StepDelta {
                index: j,
                change: StepChange::Inserted,
                op: new[j].op_name().into(),
                before: None,
                after: Some(new[j].clone()),
            });
            j += 1;
        }
    }
    let mut out: Vec<StepDelta> = Vec::new();
    let mut it = raw.into_iter().peekable();
    while let Some(d) = it.next() {
        let pairs = d.change == StepChange::Removed
            && it.peek().is_some_and(|n| n.change == StepChange::Inserted && n.op == d.op);
        if pairs {
            let ins = it.next().expect("peeked");
            out.push(StepDelta {
                index: ins.index,
                change: StepChange::Modified,
                op: d.op,
                before: d.before,
                after: ins.after,
            });
        } else {
            out.push(d);
        }
    }
    out
}
