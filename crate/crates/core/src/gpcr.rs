//! Reliable positive mining against instance memories, and the
//! multi-positive instance losses built on the mined sets.
//!
//! Global features of a cross-modality pair share one positive set per bank:
//! the intersection of both features' neighbor sets. Part features use mutual
//! correction: a part feature's positives are the global neighbor set
//! intersected with the neighbors of its *partners* in the semantic-aligned
//! triplet, never its own.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::linalg::dot_f64;
use crate::memory_bank::{multi_positive_loss, BankLevel, MemoryBank};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Which instance memory a set or term refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BankId {
    Global(Modality),
    Part(usize, Modality),
}

/// Ascending, duplicate-free indices into one bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub bank: BankId,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Intersection,
    MutualCorrection,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSet {
    pub indices: Vec<usize>,
    pub strategy: Strategy,
}

impl PositiveSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices of the `k` rows most cosine-similar to `feature`, lower index
/// first among ties. The feature's own row, if present, is a candidate.
pub fn knn(feature: &[f64], bank: &MemoryBank, bank_id: BankId, k: usize) -> Result<NeighborSet> {
    knn_excluding(feature, bank, bank_id, k, None)
}

/// As [`knn`], optionally removing one index (the anchor) from the candidates.
pub fn knn_excluding(
    feature: &[f64],
    bank: &MemoryBank,
    bank_id: BankId,
    k: usize,
    exclude: Option<usize>,
) -> Result<NeighborSet> {
    if bank.level() != BankLevel::Instance {
        return Err(Error::InvalidParameter(
            "neighbor search needs an instance-level bank".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if feature.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: feature.len(),
        });
    }
    let mut candidates: Vec<(f64, usize)> = (0..bank.len())
        .filter(|&j| Some(j) != exclude)
        .map(|j| (dot_f64(bank.row(j), feature), j))
        .collect();
    let mut k_eff = k;
    if k > candidates.len() {
        log::warn!(
            "k = {k} exceeds the {} candidates in {bank_id:?}; clamping",
            candidates.len()
        );
        k_eff = candidates.len();
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k_eff < candidates.len() && k_eff > 0 {
        candidates.select_nth_unstable_by(k_eff - 1, order);
    }
    let mut indices: Vec<usize> = candidates[..k_eff].iter().map(|c| c.1).collect();
    indices.sort_unstable();
    Ok(NeighborSet {
        indices,
        bank: bank_id,
        k,
    })
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Shared positive sets of a global pair `(f_v, f_r)`: one in the visible
/// instance bank, one in the infrared instance bank.
pub fn intersect_positive_global(
    f_v: &[f64],
    f_r: &[f64],
    bank_v: &MemoryBank,
    bank_r: &MemoryBank,
    k: usize,
) -> Result<(PositiveSet, PositiveSet)> {
    let mut sets = Vec::with_capacity(2);
    for (bank, m) in [(bank_v, Modality::Visible), (bank_r, Modality::Infrared)] {
        let id = BankId::Global(m);
        let a = knn(f_v, bank, id, k)?;
        let b = knn(f_r, bank, id, k)?;
        sets.push(PositiveSet {
            indices: intersect(&a.indices, &b.indices),
            strategy: Strategy::Intersection,
        });
    }
    let r = sets.pop().expect("two sets");
    let v = sets.pop().expect("two sets");
    Ok((v, r))
}

/// `global ∩ (aug ∪ cross)`: the partners' part neighbors, filtered by the
/// global neighbor set.
pub fn mutual_correction_positive(
    global_neighbors: &NeighborSet,
    part_neighbors_aug: &NeighborSet,
    part_neighbors_cross: &NeighborSet,
) -> PositiveSet {
    let partners = union(&part_neighbors_aug.indices, &part_neighbors_cross.indices);
    PositiveSet {
        indices: intersect(&global_neighbors.indices, &partners),
        strategy: Strategy::MutualCorrection,
    }
}

/// Global and per-part instance memories for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceBanks {
    pub visible: MemoryBank,
    pub infrared: MemoryBank,
    /// One `(visible, infrared)` pair per part.
    pub parts: Vec<(MemoryBank, MemoryBank)>,
}

impl InstanceBanks {
    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn get(&self, id: BankId) -> Result<&MemoryBank> {
        match id {
            BankId::Global(Modality::Visible) => Ok(&self.visible),
            BankId::Global(Modality::Infrared) => Ok(&self.infrared),
            BankId::Part(p, m) => {
                let pair = self.parts.get(p).ok_or(Error::LabelOutOfRange {
                    label: p,
                    k: self.parts.len(),
                })?;
                Ok(match m {
                    Modality::Visible => &pair.0,
                    Modality::Infrared => &pair.1,
                })
            }
        }
    }

    pub fn get_mut(&mut self, id: BankId) -> Result<&mut MemoryBank> {
        let n = self.parts.len();
        match id {
            BankId::Global(Modality::Visible) => Ok(&mut self.visible),
            BankId::Global(Modality::Infrared) => Ok(&mut self.infrared),
            BankId::Part(p, m) => {
                let pair = self
                    .parts
                    .get_mut(p)
                    .ok_or(Error::LabelOutOfRange { label: p, k: n })?;
                Ok(match m {
                    Modality::Visible => &mut pair.0,
                    Modality::Infrared => &mut pair.1,
                })
            }
        }
    }
}

/// Which feature of a pair a term belongs to. Global features are keyed by
/// their modality; part features by the query modality and the modality of
/// the sequence that was attended over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureRole {
    Global(Modality),
    Part { query: Modality, source: Modality },
}

/// One multi-positive term: `feature` against `bank` with `positives`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTerm {
    pub role: FeatureRole,
    pub bank: BankId,
    pub feature: Vec<f64>,
    pub positives: PositiveSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GpcrLoss {
    pub value: f64,
    pub empty_sets: usize,
    pub terms: usize,
}

/// Terms sharing a `(role, bank)` key form one batch-mean loss. Global
/// groups are summed; part groups are summed and scaled by `1 / n_parts`.
/// A term with an empty positive set contributes 0 to its group's sum and is
/// counted in `empty_sets`.
pub fn gpcr_loss(terms: &[InstanceTerm], banks: &InstanceBanks) -> Result<GpcrLoss> {
    let mut groups: BTreeMap<(BankId, FeatureRole), (f64, usize)> = BTreeMap::new();
    let mut empty_sets = 0;
    for t in terms {
        let bank = banks.get(t.bank)?;
        let entry = groups.entry((t.bank, t.role)).or_insert((0.0, 0));
        entry.1 += 1;
        if t.positives.is_empty() {
            empty_sets += 1;
            continue;
        }
        entry.0 += multi_positive_loss(bank, &t.feature, &t.positives.indices)?;
    }
    let (mut global, mut parts) = (0.0, 0.0);
    for ((bank, _), (sum, n)) in &groups {
        let mean = sum / *n as f64;
        match bank {
            BankId::Global(_) => global += mean,
            BankId::Part(..) => parts += mean,
        }
    }
    let n_parts = banks.n_parts();
    let value = if n_parts == 0 {
        global
    } else {
        global + parts / n_parts as f64
    };
    Ok(GpcrLoss {
        value,
        empty_sets,
        terms: terms.len(),
    })
}
