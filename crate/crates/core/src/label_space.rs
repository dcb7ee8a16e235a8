//! Merged label space over several partially labeled datasets.
//!
//! Every source class maps to exactly one hybrid class. Classes that mean the
//! same thing in different datasets (COCO `person`, WIDER Pedestrian
//! `pedestrian`) are joined by explicit merge groups. The [`ConflictMatrix`]
//! records which dataset pairs may not share background negatives.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_SPACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DatasetId(String);

impl DatasetId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidDatasetId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DatasetId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<DatasetId> for String {
    fn from(value: DatasetId) -> Self {
        value.0
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A class as declared by one source dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceClass {
    pub dataset: DatasetId,
    pub name: String,
    pub original_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridClass {
    pub index: usize,
    pub canonical_name: String,
    pub sources: Vec<SourceClass>,
}

impl HybridClass {
    pub fn is_merged(&self) -> bool {
        self.sources.len() > 1
    }

    pub fn has_source(&self, dataset: &DatasetId) -> bool {
        self.sources.iter().any(|s| &s.dataset == dataset)
    }
}

/// Reference to a source class by `(dataset, name)`, as written in merge configs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub dataset: DatasetId,
    pub name: String,
}

impl SourceRef {
    pub fn new(dataset: &str, name: &str) -> Result<Self> {
        Ok(Self { dataset: DatasetId::new(dataset)?, name: name.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeGroup {
    pub members: Vec<SourceRef>,
    /// Overrides the lexicographically first member name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_name: Option<String>,
}

impl MergeGroup {
    pub fn new(members: Vec<SourceRef>) -> Self {
        Self { members, canonical_name: None }
    }
}

/// Ordered class list of one source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceList {
    pub dataset: DatasetId,
    pub classes: Vec<String>,
}

impl SourceList {
    pub fn new(dataset: &str, classes: &[&str]) -> Result<Self> {
        Ok(Self {
            dataset: DatasetId::new(dataset)?,
            classes: classes.iter().map(|c| c.to_string()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct HybridLabelSpace {
    classes: Vec<HybridClass>,
    datasets: Vec<DatasetId>,
    lookup: HashMap<(DatasetId, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceRepr {
    version: u32,
    datasets: Vec<DatasetId>,
    classes: Vec<HybridClass>,
}

impl From<LabelSpaceRepr> for HybridLabelSpace {
    fn from(repr: LabelSpaceRepr) -> Self {
        Self::from_parts(repr.datasets, repr.classes)
    }
}

impl From<HybridLabelSpace> for LabelSpaceRepr {
    fn from(space: HybridLabelSpace) -> Self {
        Self { version: LABEL_SPACE_VERSION, datasets: space.datasets, classes: space.classes }
    }
}

impl HybridLabelSpace {
    fn from_parts(datasets: Vec<DatasetId>, classes: Vec<HybridClass>) -> Self {
        let lookup = classes
            .iter()
            .flat_map(|c| c.sources.iter().map(move |s| ((s.dataset.clone(), s.name.clone()), c.index)))
            .collect();
        Self { classes, datasets, lookup }
    }

    /// Builds the hybrid space. Hybrid indices follow first appearance when
    /// walking datasets in the given order and each dataset's classes in order.
    pub fn build(sources: &[SourceList], merges: &[MergeGroup]) -> Result<Self> {
        let mut datasets: Vec<DatasetId> = Vec::with_capacity(sources.len());
        let mut declared: HashMap<(DatasetId, String), usize> = HashMap::new();
        for list in sources {
            if datasets.contains(&list.dataset) {
                return Err(Error::DuplicateDataset(list.dataset.to_string()));
            }
            datasets.push(list.dataset.clone());
            for (idx, name) in list.classes.iter().enumerate() {
                if declared.insert((list.dataset.clone(), name.clone()), idx).is_some() {
                    return Err(Error::DuplicateClass {
                        dataset: list.dataset.to_string(),
                        name: name.clone(),
                    });
                }
            }
        }

        let mut group_of: HashMap<(DatasetId, String), usize> = HashMap::new();
        for (g, group) in merges.iter().enumerate() {
            if group.members.len() < 2 {
                return Err(Error::TrivialMergeGroup);
            }
            let mut seen_datasets = BTreeSet::new();
            for m in &group.members {
                let key = (m.dataset.clone(), m.name.clone());
                if !declared.contains_key(&key) {
                    return Err(Error::UnknownSourceClass {
                        dataset: m.dataset.to_string(),
                        name: m.name.clone(),
                    });
                }
                if !seen_datasets.insert(m.dataset.clone()) {
                    return Err(Error::WithinDatasetMerge(m.dataset.to_string()));
                }
                if group_of.insert(key, g).is_some() {
                    return Err(Error::OverlappingMergeGroups {
                        dataset: m.dataset.to_string(),
                        name: m.name.clone(),
                    });
                }
            }
        }

        let mut classes: Vec<HybridClass> = Vec::new();
        let mut group_index: HashMap<usize, usize> = HashMap::new();
        for list in sources {
            for (idx, name) in list.classes.iter().enumerate() {
                let source =
                    SourceClass { dataset: list.dataset.clone(), name: name.clone(), original_index: idx };
                match group_of.get(&(list.dataset.clone(), name.clone())) {
                    Some(&g) => {
                        if let Some(&ci) = group_index.get(&g) {
                            classes[ci].sources.push(source);
                        } else {
                            let canonical = merges[g].canonical_name.clone().unwrap_or_else(|| {
                                merges[g].members.iter().map(|m| m.name.as_str()).min().unwrap().to_string()
                            });
                            group_index.insert(g, classes.len());
                            classes.push(HybridClass {
                                index: classes.len(),
                                canonical_name: canonical,
                                sources: vec![source],
                            });
                        }
                    }
                    None => classes.push(HybridClass {
                        index: classes.len(),
                        canonical_name: name.clone(),
                        sources: vec![source],
                    }),
                }
            }
        }
        Ok(Self::from_parts(datasets, classes))
    }

    pub fn classes(&self) -> &[HybridClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn datasets(&self) -> &[DatasetId] {
        &self.datasets
    }

    pub fn has_dataset(&self, dataset: &DatasetId) -> bool {
        self.datasets.contains(dataset)
    }

    pub fn class(&self, index: usize) -> Result<&HybridClass> {
        self.classes.get(index).ok_or(Error::UnknownClass(index))
    }

    pub fn num_merged_groups(&self) -> usize {
        self.classes.iter().filter(|c| c.is_merged()).count()
    }

    pub fn map_label(&self, dataset: &DatasetId, name: &str) -> Result<usize> {
        self.lookup.get(&(dataset.clone(), name.to_string())).copied().ok_or_else(|| {
            Error::UnknownSourceClass { dataset: dataset.to_string(), name: name.to_string() }
        })
    }

    /// Whether background negatives from `dataset` may supervise `class`.
    pub fn class_sources_active_for(
        &self,
        conflicts: &ConflictMatrix,
        class: usize,
        dataset: &DatasetId,
    ) -> Result<bool> {
        if !self.has_dataset(dataset) {
            return Err(Error::UnknownDataset(dataset.to_string()));
        }
        let class = self.class(class)?;
        for s in &class.sources {
            if &s.dataset == dataset || !conflicts.is_conflicting(dataset, &s.dataset)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Per-class activity table for background anchors of `dataset`.
    pub fn active_classes_for(&self, conflicts: &ConflictMatrix, dataset: &DatasetId) -> Result<Vec<bool>> {
        (0..self.classes.len()).map(|c| self.class_sources_active_for(conflicts, c, dataset)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictPolicy {
    #[default]
    AllConflicting,
    AllCompatible,
}

/// Symmetric, irreflexive avoidance relation between datasets.
///
/// Pairs listed as conflicting or compatible override `default_policy`;
/// undeclared pairs fall back to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictMatrix {
    datasets: Vec<DatasetId>,
    #[serde(default)]
    conflicts: BTreeSet<(DatasetId, DatasetId)>,
    #[serde(default)]
    compatible: BTreeSet<(DatasetId, DatasetId)>,
    #[serde(default)]
    default_policy: ConflictPolicy,
}

fn ordered(a: &DatasetId, b: &DatasetId) -> (DatasetId, DatasetId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl ConflictMatrix {
    pub fn new(datasets: Vec<DatasetId>, default_policy: ConflictPolicy) -> Self {
        Self { datasets, conflicts: BTreeSet::new(), compatible: BTreeSet::new(), default_policy }
    }

    fn check(&self, d: &DatasetId) -> Result<()> {
        if self.datasets.contains(d) {
            Ok(())
        } else {
            Err(Error::UnknownDataset(d.to_string()))
        }
    }

    /// Declares `a` and `b` conflicting. Self pairs are ignored.
    pub fn declare_conflict(&mut self, a: &DatasetId, b: &DatasetId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if a != b {
            let key = ordered(a, b);
            self.compatible.remove(&key);
            self.conflicts.insert(key);
        }
        Ok(())
    }

    pub fn declare_compatible(&mut self, a: &DatasetId, b: &DatasetId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if a != b {
            let key = ordered(a, b);
            self.conflicts.remove(&key);
            self.compatible.insert(key);
        }
        Ok(())
    }

    pub fn is_conflicting(&self, a: &DatasetId, b: &DatasetId) -> Result<bool> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Ok(false);
        }
        let key = ordered(a, b);
        if self.conflicts.contains(&key) {
            return Ok(true);
        }
        if self.compatible.contains(&key) {
            return Ok(false);
        }
        Ok(self.default_policy == ConflictPolicy::AllConflicting)
    }

    pub fn datasets(&self) -> &[DatasetId] {
        &self.datasets
    }

    pub fn default_policy(&self) -> ConflictPolicy {
        self.default_policy
    }
}

/// Merge entry in a config file: a bare member list or one with a name override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MergeEntry {
    Members(Vec<SourceRef>),
    Named { members: Vec<SourceRef>, canonical_name: Option<String> },
}

impl From<MergeEntry> for MergeGroup {
    fn from(entry: MergeEntry) -> Self {
        match entry {
            MergeEntry::Members(members) => MergeGroup { members, canonical_name: None },
            MergeEntry::Named { members, canonical_name } => MergeGroup { members, canonical_name },
        }
    }
}

/// The merge/conflict JSON config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeConfig {
    #[serde(default)]
    pub merges: Vec<MergeEntry>,
    #[serde(default)]
    pub conflicts: Vec<(DatasetId, DatasetId)>,
    #[serde(default)]
    pub compatible: Vec<(DatasetId, DatasetId)>,
    #[serde(default)]
    pub default_policy: ConflictPolicy,
}

impl MergeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn merge_groups(&self) -> Vec<MergeGroup> {
        self.merges.iter().cloned().map(MergeGroup::from).collect()
    }

    pub fn conflict_matrix(&self, datasets: &[DatasetId]) -> Result<ConflictMatrix> {
        let mut m = ConflictMatrix::new(datasets.to_vec(), self.default_policy);
        for (a, b) in &self.conflicts {
            m.declare_conflict(a, b)?;
        }
        for (a, b) in &self.compatible {
            m.declare_compatible(a, b)?;
        }
        Ok(m)
    }

    pub fn build(&self, sources: &[SourceList]) -> Result<(HybridLabelSpace, ConflictMatrix)> {
        let space = HybridLabelSpace::build(sources, &self.merge_groups())?;
        let conflicts = self.conflict_matrix(space.datasets())?;
        Ok((space, conflicts))
    }
}
