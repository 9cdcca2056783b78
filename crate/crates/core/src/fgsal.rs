//! Semantic-aligned part features.
//!
//! A flattened feature map (H·W pixels × d) is cut into `n_parts` contiguous
//! pixel sequences. For each part, a learnable part prototype weighs the
//! pixels of the query instance through a sigmoid to form an instance-adaptive
//! query; that query then attends (scaled dot-product, softmax over pixels)
//! over the matching sequence of the query instance *and* of its
//! cross-modality partner. Both outputs see the pixels through the same
//! query, so they carry the same semantics.
//!
//! Everything here is forward-only.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::linalg::{dot_f64, normalize_f64, normalized, row_slice};
use crate::memory_bank::{infonce_loss, softmax, MemoryBank};

pub const DEFAULT_PARTS: usize = 3;

/// Flattened `(H*W) x d` map, row-major over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pixels: Array2<f64>,
    height: usize,
    width: usize,
}

impl FeatureMap {
    pub fn new(pixels: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if height * width != pixels.nrows() {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                found: pixels.nrows(),
            });
        }
        if pixels.nrows() == 0 || pixels.ncols() == 0 {
            return Err(Error::Empty("feature map"));
        }
        if let Some(pos) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / pixels.ncols(),
                col: pos % pixels.ncols(),
            });
        }
        Ok(Self {
            pixels: pixels.as_standard_layout().into_owned(),
            height,
            width,
        })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn sequence(&self, range: Range<usize>) -> ArrayView2<'_, f64> {
        self.pixels.slice(s![range, ..])
    }
}

/// One prototype per part, shared across modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct PartPrototypes {
    prototypes: Array2<f64>,
}

impl PartPrototypes {
    pub fn new(prototypes: Array2<f64>) -> Result<Self> {
        if prototypes.nrows() == 0 {
            return Err(Error::Empty("part prototypes"));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite part prototype".into()));
        }
        Ok(Self {
            prototypes: prototypes.as_standard_layout().into_owned(),
        })
    }

    /// Unit-Gaussian draws, L2-normalized per row.
    pub fn seeded(n_parts: usize, d: usize, seed: u64) -> Result<Self> {
        if n_parts == 0 || d == 0 {
            return Err(Error::InvalidParameter("part prototypes need n_parts, d >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n_parts, d), |_| StandardNormal.sample(&mut rng));
        for mut r in m.outer_iter_mut() {
            normalize_f64(r.as_slice_mut().expect("standard layout"));
        }
        Self::new(m)
    }

    pub fn n_parts(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        row_slice(&self.prototypes, p)
    }
}

/// An attention output together with the weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeature {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
    pub part: usize,
    pub query_modality: Modality,
    pub source_modality: Modality,
}

/// Sequence `p` covers flat indices `ceil(n*p/parts) .. ceil(n*(p+1)/parts)`.
pub fn split_parts(total_pixels: usize, n_parts: usize) -> Result<Vec<Range<usize>>> {
    if n_parts == 0 {
        return Err(Error::InvalidParameter("n_parts must be >= 1".into()));
    }
    if n_parts > total_pixels {
        return Err(Error::InvalidParameter(format!(
            "{n_parts} parts requested from a map of {total_pixels} pixels"
        )));
    }
    let bound = |p: usize| (total_pixels * p).div_ceil(n_parts);
    Ok((0..n_parts).map(|p| bound(p)..bound(p + 1)).collect())
}

/// Sigmoid-weighted pixel average: returns `(query, weights)` with the
/// weights normalized to sum to 1.
pub fn generate_query(prototype: &[f64], sequence: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sequence(prototype.len(), &sequence)?;
    let raw: Vec<f64> = sequence
        .outer_iter()
        .map(|px| sigmoid(dot_f64(prototype, px.as_slice().expect("standard layout"))))
        .collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|a| a / total).collect();
    Ok((combine(&weights, &sequence), weights))
}

/// `softmax(q K^T / sqrt(d)) V` with K = V = the sequence.
pub fn query_attention(query: &[f64], sequence: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sequence(query.len(), &sequence)?;
    let scale = (query.len() as f64).sqrt();
    let logits: Vec<f64> = sequence
        .outer_iter()
        .map(|px| dot_f64(query, px.as_slice().expect("standard layout")) / scale)
        .collect();
    let weights = softmax(&logits);
    Ok((combine(&weights, &sequence), weights))
}

fn check_sequence(d: usize, sequence: &ArrayView2<'_, f64>) -> Result<()> {
    if sequence.nrows() == 0 {
        return Err(Error::Empty("pixel sequence"));
    }
    if sequence.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: sequence.ncols(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn combine(weights: &[f64], sequence: &ArrayView2<'_, f64>) -> Vec<f64> {
    let mut out = vec![0.0f64; sequence.ncols()];
    for (w, px) in weights.iter().zip(sequence.outer_iter()) {
        for (o, &v) in out.iter_mut().zip(px.iter()) {
            *o += w * v;
        }
    }
    out
}

/// Per-part output of [`semantic_aligned_pair`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPart {
    pub query: Vec<f64>,
    /// Attention over the query instance's own sequence.
    pub own: PartFeature,
    /// Attention over the partner's sequence with the same query.
    pub partner: PartFeature,
}

/// Queries come from `query_map`; each is applied to both maps.
pub fn semantic_aligned_pair(
    query_map: &FeatureMap,
    query_modality: Modality,
    partner_map: &FeatureMap,
    prototypes: &PartPrototypes,
) -> Result<Vec<AlignedPart>> {
    let d = prototypes.dim();
    for m in [query_map, partner_map] {
        if m.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.dim(),
            });
        }
    }
    let own_parts = split_parts(query_map.pixels.nrows(), prototypes.n_parts())?;
    let partner_parts = split_parts(partner_map.pixels.nrows(), prototypes.n_parts())?;
    own_parts
        .into_iter()
        .zip(partner_parts)
        .enumerate()
        .map(|(p, (own_range, partner_range))| {
            let own_seq = query_map.sequence(own_range);
            let (query, _) = generate_query(prototypes.row(p), own_seq)?;
            let (own_vec, own_w) = query_attention(&query, own_seq)?;
            let (par_vec, par_w) = query_attention(&query, partner_map.sequence(partner_range))?;
            Ok(AlignedPart {
                own: PartFeature {
                    vector: own_vec,
                    weights: own_w,
                    part: p,
                    query_modality,
                    source_modality: query_modality,
                },
                partner: PartFeature {
                    vector: par_vec,
                    weights: par_w,
                    part: p,
                    query_modality,
                    source_modality: query_modality.other(),
                },
                query,
            })
        })
        .collect()
}

/// Applies precomputed per-part queries to another map (e.g. an augmented copy).
pub fn attend_with_queries(
    queries: &[Vec<f64>],
    map: &FeatureMap,
    query_modality: Modality,
    source_modality: Modality,
) -> Result<Vec<PartFeature>> {
    let ranges = split_parts(map.pixels.nrows(), queries.len())?;
    queries
        .iter()
        .zip(ranges)
        .enumerate()
        .map(|(p, (q, r))| {
            let (vector, weights) = query_attention(q, map.sequence(r))?;
            Ok(PartFeature {
                vector,
                weights,
                part: p,
                query_modality,
                source_modality,
            })
        })
        .collect()
}

/// Part features of a map under its own queries, used to seed banks.
pub fn own_part_features(
    map: &FeatureMap,
    modality: Modality,
    prototypes: &PartPrototypes,
) -> Result<Vec<PartFeature>> {
    Ok(semantic_aligned_pair(map, modality, map, prototypes)?
        .into_iter()
        .map(|a| a.own)
        .collect())
}

/// Normalized part features of one query-side instance and its partner,
/// with the query instance's labels in its own label space (`intra`) and in
/// the partner modality's label space (`cross`).
#[derive(Clone, Debug, PartialEq)]
pub struct PartPairSample {
    pub own: Vec<Vec<f64>>,
    pub partner: Vec<Vec<f64>>,
    pub intra_label: usize,
    pub cross_label: usize,
}

impl PartPairSample {
    pub fn from_aligned(parts: &[AlignedPart], intra_label: usize, cross_label: usize) -> Self {
        Self {
            own: parts.iter().map(|a| normalized(&a.own.vector)).collect(),
            partner: parts.iter().map(|a| normalized(&a.partner.vector)).collect(),
            intra_label,
            cross_label,
        }
    }
}

/// Part-level cluster banks for one query modality, indexed by part.
///
/// For visible queries `intra[p]` is indexed by visible cluster labels and
/// `cross[p]` by the infrared labels assigned to visible instances.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySideBanks {
    pub intra: Vec<MemoryBank>,
    pub cross: Vec<MemoryBank>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartBanks {
    pub visible: QuerySideBanks,
    pub infrared: QuerySideBanks,
}

/// Mean over parts of the visible-query and infrared-query losses. Each is
/// the sum of four batch-mean InfoNCE terms (own and partner feature,
/// against the intra and cross bank). A side without pairs contributes 0.
pub fn part_contrastive_loss(
    visible_pairs: &[PartPairSample],
    infrared_pairs: &[PartPairSample],
    banks: &PartBanks,
) -> Result<f64> {
    let n_parts = banks.visible.intra.len();
    if n_parts == 0 {
        return Ok(0.0);
    }
    for side in [&banks.visible, &banks.infrared] {
        if side.intra.len() != n_parts || side.cross.len() != n_parts {
            return Err(Error::DimensionMismatch {
                expected: n_parts,
                found: side.intra.len().min(side.cross.len()),
            });
        }
    }
    let mut total = 0.0;
    for p in 0..n_parts {
        total += side_part_loss(visible_pairs, &banks.visible, p)?;
        total += side_part_loss(infrared_pairs, &banks.infrared, p)?;
    }
    Ok(total / n_parts as f64)
}

fn side_part_loss(pairs: &[PartPairSample], banks: &QuerySideBanks, p: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in pairs {
        for feature in [&s.own[p], &s.partner[p]] {
            sum += infonce_loss(&banks.intra[p], feature, s.intra_label)?;
            sum += infonce_loss(&banks.cross[p], feature, s.cross_label)?;
        }
    }
    Ok(sum / pairs.len() as f64)
}
