//! Label taxonomies: a fixed tree of classes across levels.
//!
//! Level 1 is the finest granularity and level `m` the coarsest. Every class
//! at a level below the top has exactly one parent at the next level up, and
//! every class above the bottom has at least one child. Class indices are
//! dense and zero-based within each level.
//!
//! The JSON representation holds `levels`, `classes_per_level` (finest
//! first), `parents` (one array per level below the top, either positional
//! `[parent, ...]` indexed by child, or explicit `[[child, parent], ...]`
//! pairs), and optionally `names`.

use std::convert::TryFrom;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A class at a specific level. Levels are 1-based; level 1 is the finest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId {
    pub level: usize,
    pub index: usize,
}

impl LabelId {
    pub fn new(level: usize, index: usize) -> Self {
        LabelId { level, index }
    }
}

/// An immutable, validated label tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    classes_per_level: Vec<usize>,
    /// `parents[k-1][i]` is the parent (at level k+1) of class i at level k.
    parents: Vec<Vec<usize>>,
    /// `children[k-2][p]` lists the level-(k-1) children of class p at
    /// level k, ascending.
    children: Vec<Vec<Vec<usize>>>,
    names: Option<Vec<Vec<String>>>,
}

impl Taxonomy {
    /// Build and validate a taxonomy from per-level class counts and
    /// positional parent arrays (`parents[k-1][i]` as on the struct).
    pub fn from_parts(
        classes_per_level: Vec<usize>,
        parents: Vec<Vec<usize>>,
        names: Option<Vec<Vec<String>>>,
    ) -> Result<Self> {
        if classes_per_level.is_empty() {
            return Err(Error::Taxonomy("no levels defined".into()));
        }
        let m = classes_per_level.len();
        for (k, &count) in classes_per_level.iter().enumerate() {
            if count == 0 {
                return Err(Error::Taxonomy(format!("level {} has zero classes", k + 1)));
            }
        }
        if parents.len() != m - 1 {
            return Err(Error::Taxonomy(format!(
                "expected {} parent arrays for {} levels, found {}",
                m - 1,
                m,
                parents.len()
            )));
        }
        for (k, level_parents) in parents.iter().enumerate() {
            let level = k + 1;
            let expected = classes_per_level[k];
            if level_parents.len() != expected {
                return Err(Error::Taxonomy(format!(
                    "level {level} has {expected} classes but {} parent entries",
                    level_parents.len()
                )));
            }
            let limit = classes_per_level[k + 1];
            for (child, &parent) in level_parents.iter().enumerate() {
                if parent >= limit {
                    return Err(Error::Taxonomy(format!(
                        "class {child} at level {level} names parent {parent}, but level {} has \
                         only {limit} classes",
                        level + 1
                    )));
                }
            }
        }
        if let Some(names) = &names {
            if names.len() != m {
                return Err(Error::Taxonomy(format!(
                    "names cover {} levels, expected {m}",
                    names.len()
                )));
            }
            for (k, level_names) in names.iter().enumerate() {
                if level_names.len() != classes_per_level[k] {
                    return Err(Error::Taxonomy(format!(
                        "level {} has {} classes but {} names",
                        k + 1,
                        classes_per_level[k],
                        level_names.len()
                    )));
                }
            }
        }

        let mut children = Vec::with_capacity(m.saturating_sub(1));
        for (k, level_parents) in parents.iter().enumerate() {
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); classes_per_level[k + 1]];
            for (child, &parent) in level_parents.iter().enumerate() {
                buckets[parent].push(child);
            }
            for (parent, bucket) in buckets.iter().enumerate() {
                if bucket.is_empty() {
                    return Err(Error::Taxonomy(format!(
                        "class {parent} at level {} has no children",
                        k + 2
                    )));
                }
            }
            children.push(buckets);
        }

        Ok(Taxonomy {
            classes_per_level,
            parents,
            children,
            names,
        })
    }

    /// Number of levels `m`.
    pub fn num_levels(&self) -> usize {
        self.classes_per_level.len()
    }

    /// Class counts per level, finest first.
    pub fn classes_per_level(&self) -> &[usize] {
        &self.classes_per_level
    }

    /// Number of classes at a 1-based level.
    pub fn classes_at(&self, level: usize) -> Result<usize> {
        self.check_level(level)?;
        Ok(self.classes_per_level[level - 1])
    }

    /// Parent of a class. Top-level classes have none.
    pub fn parent(&self, label: LabelId) -> Result<LabelId> {
        self.check_label(label)?;
        if label.level == self.num_levels() {
            return Err(Error::Taxonomy(format!(
                "class {} at top level {} has no parent",
                label.index, label.level
            )));
        }
        Ok(LabelId::new(
            label.level + 1,
            self.parents[label.level - 1][label.index],
        ))
    }

    /// Children of a class, ascending by index. Bottom-level classes have
    /// none.
    pub fn children(&self, label: LabelId) -> Result<Vec<LabelId>> {
        self.check_label(label)?;
        if label.level == 1 {
            return Err(Error::Taxonomy(format!(
                "class {} at level 1 has no children",
                label.index
            )));
        }
        Ok(self.children[label.level - 2][label.index]
            .iter()
            .map(|&child| LabelId::new(label.level - 1, child))
            .collect())
    }

    /// Parent index of `class` at `level`, as a bare index at `level + 1`.
    pub fn parent_index(&self, level: usize, class: usize) -> Result<usize> {
        Ok(self.parent(LabelId::new(level, class))?.index)
    }

    /// Total number of parent-child edges: the sum of class counts over all
    /// levels below the top.
    pub fn edge_count(&self) -> usize {
        self.classes_per_level[..self.num_levels() - 1]
            .iter()
            .sum()
    }

    /// Check a full label tuple (finest first): length, ranges, and that
    /// each level's class is the parent of the one below.
    pub fn validate_chain(&self, labels: &[usize]) -> Result<()> {
        let m = self.num_levels();
        if labels.len() != m {
            return Err(Error::Data(format!(
                "label tuple has {} entries, taxonomy has {m} levels",
                labels.len()
            )));
        }
        for (k, &class) in labels.iter().enumerate() {
            let limit = self.classes_per_level[k];
            if class >= limit {
                return Err(Error::ClassOutOfRange {
                    level: k + 1,
                    index: class,
                    limit,
                });
            }
        }
        for k in 1..m {
            let child = labels[k - 1];
            let parent = self.parents[k - 1][child];
            if parent != labels[k] {
                return Err(Error::Data(format!(
                    "class {child} at level {k} has parent {parent} at level {}, but the tuple \
                     says {}",
                    k + 1,
                    labels[k]
                )));
            }
        }
        Ok(())
    }

    /// Display name of a class, when the taxonomy carries names.
    pub fn name(&self, label: LabelId) -> Option<&str> {
        let names = self.names.as_ref()?;
        names
            .get(label.level - 1)
            .and_then(|level| level.get(label.index))
            .map(String::as_str)
    }

    /// Serialize to the canonical JSON layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TaxonomyFile::from(self.clone());
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Taxonomy(format!("serialization failed: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.num_levels() {
            return Err(Error::Taxonomy(format!(
                "level {level} out of range 1..={}",
                self.num_levels()
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: LabelId) -> Result<()> {
        self.check_level(label.level)?;
        let limit = self.classes_per_level[label.level - 1];
        if label.index >= limit {
            return Err(Error::ClassOutOfRange {
                level: label.level,
                index: label.index,
                limit,
            });
        }
        Ok(())
    }
}

/// Load a taxonomy from its JSON file.
pub fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TaxonomyFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Taxonomy::try_from(file)
}

/// On-disk layout. `parents` accepts either positional arrays or explicit
/// child-parent pairs per level; serialization always emits positional form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    levels: usize,
    classes_per_level: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    parents: Vec<ParentLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<Vec<String>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ParentLevel {
    Positional(Vec<usize>),
    Pairs(Vec<(usize, usize)>),
}

impl ParentLevel {
    /// Normalize to a positional array for `expected` children at `level`.
    fn into_positional(self, level: usize, expected: usize) -> Result<Vec<usize>> {
        match self {
            ParentLevel::Positional(v) => Ok(v),
            ParentLevel::Pairs(pairs) => {
                let mut slots: Vec<Option<usize>> = vec![None; expected];
                for (child, parent) in pairs {
                    if child >= expected {
                        return Err(Error::Taxonomy(format!(
                            "level {level} parent pair names child {child}, but the level has \
                             {expected} classes"
                        )));
                    }
                    if slots[child].is_some() {
                        return Err(Error::Taxonomy(format!(
                            "class {child} at level {level} has two parent entries"
                        )));
                    }
                    slots[child] = Some(parent);
                }
                slots
                    .into_iter()
                    .enumerate()
                    .map(|(child, slot)| {
                        slot.ok_or_else(|| {
                            Error::Taxonomy(format!(
                                "class {child} at level {level} has no parent entry"
                            ))
                        })
                    })
                    .collect()
            }
        }
    }
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = Error;

    fn try_from(file: TaxonomyFile) -> Result<Taxonomy> {
        if file.levels != file.classes_per_level.len() {
            return Err(Error::Taxonomy(format!(
                "levels field says {}, but classes_per_level has {} entries",
                file.levels,
                file.classes_per_level.len()
            )));
        }
        let counts = file.classes_per_level.clone();
        let parents = file
            .parents
            .into_iter()
            .enumerate()
            .map(|(k, level)| {
                let expected = counts.get(k).copied().unwrap_or(0);
                level.into_positional(k + 1, expected)
            })
            .collect::<Result<Vec<_>>>()?;
        Taxonomy::from_parts(file.classes_per_level, parents, file.names)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(tax: Taxonomy) -> TaxonomyFile {
        TaxonomyFile {
            levels: tax.classes_per_level.len(),
            classes_per_level: tax.classes_per_level,
            parents: tax.parents.into_iter().map(ParentLevel::Positional).collect(),
            names: tax.names,
        }
    }
}
