//! Label taxonomies: base labels, super labels and the validity mask.
//!
//! A [`LabelScheme`] owns the base label ids `0..num_base_labels` (id 0 is
//! background) and a list of super labels, each standing for a disjoint set of
//! base labels. Label maps store one id per pixel; a pixel carrying a super id
//! is only known to belong to *one of* the super label's members, and its
//! validity mask entry is 0.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label ids fit in one byte on disk, so they do in memory too.
pub type LabelId = u8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemeError {
    #[error("scheme needs at least two base labels, got {0}")]
    TooFewBaseLabels(usize),
    #[error("super label id {id} collides with base ids 0..{num_base}")]
    SuperIdInBaseRange { id: usize, num_base: usize },
    #[error("super label id {0} does not fit in a label byte")]
    SuperIdOutOfRange(usize),
    #[error("duplicate super label id {0}")]
    DuplicateSuperId(LabelId),
    #[error("super label {super_id} lists invalid base id {member}")]
    InvalidMember { super_id: LabelId, member: usize },
    #[error("base id {member} belongs to both super labels {first} and {second}")]
    OverlappingSuperLabels { member: LabelId, first: LabelId, second: LabelId },
    #[error("super label {0} has no members")]
    EmptySuperLabel(LabelId),
    #[error("super label {super_id} has the single member {member}; only background may stand alone")]
    SingletonNotBackground { super_id: LabelId, member: LabelId },
    #[error("expected {expected} base label names, got {got}")]
    NameCount { expected: usize, got: usize },
    #[error("unknown label id {id} at pixel {pixel}")]
    UnknownLabel { id: LabelId, pixel: usize },
    #[error("super id {id} at pixel {pixel} where only base ids are allowed")]
    UnexpectedSuperLabel { id: LabelId, pixel: usize },
    #[error("super label {0} is not defined by the scheme")]
    UndefinedSuperLabel(LabelId),
    #[error("label map has {got} values, expected {height}x{width}")]
    Shape { height: usize, width: usize, got: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperLabel {
    pub id: LabelId,
    pub members: BTreeSet<LabelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    num_base_labels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    names: Vec<String>,
    #[serde(default)]
    super_labels: Vec<SuperLabel>,
}

/// Full label set plus super label definitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct LabelScheme {
    num_base_labels: usize,
    names: Vec<String>,
    super_labels: Vec<SuperLabel>,
}

impl TryFrom<RawScheme> for LabelScheme {
    type Error = SchemeError;

    fn try_from(raw: RawScheme) -> Result<Self, Self::Error> {
        LabelScheme::with_names(raw.num_base_labels, raw.super_labels, raw.names)
    }
}

impl From<LabelScheme> for RawScheme {
    fn from(s: LabelScheme) -> Self {
        RawScheme { num_base_labels: s.num_base_labels, names: s.names, super_labels: s.super_labels }
    }
}

impl LabelScheme {
    pub fn new(num_base_labels: usize, super_labels: Vec<SuperLabel>) -> Result<Self, SchemeError> {
        Self::with_names(num_base_labels, super_labels, Vec::new())
    }

    /// Builds and validates a scheme. `names` is either empty or has one entry
    /// per base label.
    pub fn with_names(
        num_base_labels: usize,
        mut super_labels: Vec<SuperLabel>,
        names: Vec<String>,
    ) -> Result<Self, SchemeError> {
        if num_base_labels < 2 {
            return Err(SchemeError::TooFewBaseLabels(num_base_labels));
        }
        if num_base_labels > usize::from(LabelId::MAX) {
            return Err(SchemeError::SuperIdOutOfRange(num_base_labels));
        }
        if !names.is_empty() && names.len() != num_base_labels {
            return Err(SchemeError::NameCount { expected: num_base_labels, got: names.len() });
        }
        let mut owner: Vec<Option<LabelId>> = vec![None; num_base_labels];
        let mut seen = BTreeSet::new();
        for s in &super_labels {
            if usize::from(s.id) < num_base_labels {
                return Err(SchemeError::SuperIdInBaseRange { id: s.id.into(), num_base: num_base_labels });
            }
            if !seen.insert(s.id) {
                return Err(SchemeError::DuplicateSuperId(s.id));
            }
            match s.members.len() {
                0 => return Err(SchemeError::EmptySuperLabel(s.id)),
                1 => {
                    let only = *s.members.iter().next().unwrap();
                    if usize::from(only) < num_base_labels && only != 0 {
                        return Err(SchemeError::SingletonNotBackground { super_id: s.id, member: only });
                    }
                }
                _ => {}
            }
            for &m in &s.members {
                let slot = owner
                    .get_mut(usize::from(m))
                    .ok_or(SchemeError::InvalidMember { super_id: s.id, member: m.into() })?;
                if let Some(first) = *slot {
                    return Err(SchemeError::OverlappingSuperLabels { member: m, first, second: s.id });
                }
                *slot = Some(s.id);
            }
        }
        super_labels.sort_by_key(|s| s.id);
        Ok(Self { num_base_labels, names, super_labels })
    }

    pub fn num_base_labels(&self) -> usize {
        self.num_base_labels
    }

    /// Super labels sorted by id.
    pub fn super_labels(&self) -> &[SuperLabel] {
        &self.super_labels
    }

    pub fn is_base(&self, id: LabelId) -> bool {
        usize::from(id) < self.num_base_labels
    }

    pub fn super_label(&self, id: LabelId) -> Option<&SuperLabel> {
        self.super_labels.iter().find(|s| s.id == id)
    }

    pub fn is_valid(&self, id: LabelId) -> bool {
        self.is_base(id) || self.super_label(id).is_some()
    }

    /// Display name of a base or super id, falling back to `label<id>`.
    pub fn name(&self, id: LabelId) -> String {
        if self.is_base(id) {
            if let Some(n) = self.names.get(usize::from(id)) {
                return n.clone();
            }
        } else if let Some(n) = self.super_label(id).and_then(|s| s.name.clone()) {
            return n;
        }
        format!("label{id}")
    }

    pub fn base_names(&self) -> Vec<String> {
        (0..self.num_base_labels).map(|id| self.name(id as LabelId)).collect()
    }

    /// Checks that every value of `labels` is a base or super id of this scheme.
    pub fn validate(&self, labels: &LabelMap) -> Result<(), SchemeError> {
        match labels.values.iter().position(|&v| !self.is_valid(v)) {
            Some(pixel) => Err(SchemeError::UnknownLabel { id: labels.values[pixel], pixel }),
            None => Ok(()),
        }
    }

    /// Checks that `labels` holds base ids only.
    pub fn validate_base_only(&self, labels: &LabelMap) -> Result<(), SchemeError> {
        self.validate(labels)?;
        match labels.values.iter().position(|&v| !self.is_base(v)) {
            Some(pixel) => Err(SchemeError::UnexpectedSuperLabel { id: labels.values[pixel], pixel }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} base labels", self.num_base_labels)?;
        for s in &self.super_labels {
            let members: Vec<String> = s.members.iter().map(|m| self.name(*m)).collect();
            write!(f, "; {} = {{{}}}", self.name(s.id), members.join(", "))?;
        }
        Ok(())
    }
}

/// Per-pixel label ids in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<LabelId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<LabelId>) -> Result<Self, SchemeError> {
        if values.len() != height * width {
            return Err(SchemeError::Shape { height, width, got: values.len() });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, id: LabelId) -> Self {
        Self { height, width, values: vec![id; height * width] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> LabelId {
        self.values[row * self.width + col]
    }

    /// Number of pixels carrying `id`.
    pub fn count(&self, id: LabelId) -> usize {
        self.values.iter().filter(|&&v| v == id).count()
    }
}

/// 1 where a precise base label is known, 0 where only a super label is.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl ValidityMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![1; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn count_valid(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

pub fn mask_from_labels(labels: &LabelMap, scheme: &LabelScheme) -> Result<ValidityMask, SchemeError> {
    scheme.validate(labels)?;
    let values = labels.values.iter().map(|&v| u8::from(scheme.is_base(v))).collect();
    Ok(ValidityMask { height: labels.height, width: labels.width, values })
}

/// Rewrites every pixel belonging to a member of `super_id` to `super_id`.
pub fn merge_labels(labels: &LabelMap, scheme: &LabelScheme, super_id: LabelId) -> Result<LabelMap, SchemeError> {
    let sup = scheme.super_label(super_id).ok_or(SchemeError::UndefinedSuperLabel(super_id))?;
    scheme.validate_base_only(labels)?;
    let values = labels
        .values
        .iter()
        .map(|&v| if sup.members.contains(&v) { super_id } else { v })
        .collect();
    Ok(LabelMap { height: labels.height, width: labels.width, values })
}

/// Checks `perm` (indexed by old base id, holding the new id) is a bijection
/// on the base ids that fixes background.
pub fn check_permutation(num_base_labels: usize, perm: &[LabelId]) -> Result<(), SchemeError> {
    if perm.len() != num_base_labels {
        return Err(SchemeError::InvalidPermutation(format!(
            "length {} for {} base labels",
            perm.len(),
            num_base_labels
        )));
    }
    if perm[0] != 0 {
        return Err(SchemeError::InvalidPermutation("background must map to itself".into()));
    }
    let mut hit = vec![false; num_base_labels];
    for &p in perm {
        match hit.get_mut(usize::from(p)) {
            Some(h) if !*h => *h = true,
            Some(_) => return Err(SchemeError::InvalidPermutation(format!("id {p} is hit twice"))),
            None => return Err(SchemeError::InvalidPermutation(format!("id {p} is out of range"))),
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[LabelId]) -> Vec<LabelId> {
    let mut inv = vec![0; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        inv[usize::from(new)] = old as LabelId;
    }
    inv
}

/// Renames base ids by `perm` in both the scheme and the label map. Super ids
/// keep their values; their member sets are renamed.
pub fn relabel_permute(
    scheme: &LabelScheme,
    labels: &LabelMap,
    perm: &[LabelId],
) -> Result<(LabelScheme, LabelMap), SchemeError> {
    check_permutation(scheme.num_base_labels, perm)?;
    scheme.validate(labels)?;
    let map = |v: LabelId| if scheme.is_base(v) { perm[usize::from(v)] } else { v };
    let super_labels = scheme
        .super_labels
        .iter()
        .map(|s| SuperLabel { id: s.id, members: s.members.iter().map(|&m| map(m)).collect(), name: s.name.clone() })
        .collect();
    let names = if scheme.names.is_empty() {
        Vec::new()
    } else {
        let mut names = scheme.names.clone();
        for (old, &new) in perm.iter().enumerate() {
            names[usize::from(new)] = scheme.names[old].clone();
        }
        names
    };
    let scheme2 = LabelScheme::with_names(scheme.num_base_labels, super_labels, names)?;
    let labels2 = LabelMap { height: labels.height, width: labels.width, values: labels.values.iter().map(|&v| map(v)).collect() };
    Ok((scheme2, labels2))
}
