//! Per-modality DBSCAN and cluster centroids.
//!
//! Distances are Euclidean over L2-normalized features, evaluated through the
//! cosine kernel as `sqrt(2 - 2 cos)`. Neighborhoods are computed in parallel;
//! expansion is sequential in ascending index order, so border points always
//! join the first cluster that reaches them.

use std::collections::VecDeque;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{squared_distance_from_cosine, EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::linalg::dot_f32;

pub const DEFAULT_MIN_PTS: usize = 4;
pub const OUTLIER: i64 = -1;

/// Per-instance pseudo-labels for one modality; `-1` marks an outlier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<i64>,
    pub k: usize,
    pub modality: Modality,
}

impl Labeling {
    /// Checks that labels lie in `{-1, 0..k-1}` and that every cluster id is used.
    pub fn new(labels: Vec<i64>, k: usize, modality: Modality) -> Result<Self> {
        let mut seen = vec![false; k];
        for &l in &labels {
            if l == OUTLIER {
                continue;
            }
            if l < 0 || l as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: l.max(0) as usize,
                    k,
                });
            }
            seen[l as usize] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::EmptyCluster(c));
        }
        Ok(Self {
            labels,
            k,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        let l = self.labels[i];
        (l >= 0).then_some(l as usize)
    }

    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == OUTLIER).count()
    }

    /// Instance indices of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }
}

/// Normalized cluster means.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: Array2<f64>,
    pub member_counts: Vec<usize>,
}

impl CentroidSet {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

/// Density-based clustering with `min_pts` counting the point itself.
pub fn dbscan(set: &EmbeddingSet, eps: f64, min_pts: usize) -> Result<Labeling> {
    if set.is_empty() {
        return Err(Error::Empty("dbscan input"));
    }
    if !set.is_normalized() {
        return Err(Error::NotNormalized("dbscan"));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be > 0, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidParameter("min_pts must be >= 1".into()));
    }
    let modality = set.modality()[0];
    let neighbors = region_queries(set, eps);

    let n = set.len();
    let mut labels = vec![OUTLIER; n];
    let mut visited = vec![false; n];
    let mut k = 0usize;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if neighbors[i].len() < min_pts {
            continue;
        }
        let cluster = k as i64;
        k += 1;
        labels[i] = cluster;
        queue.extend(neighbors[i].iter().copied());
        while let Some(j) = queue.pop_front() {
            if labels[j] == OUTLIER {
                labels[j] = cluster;
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if neighbors[j].len() >= min_pts {
                queue.extend(neighbors[j].iter().copied());
            }
        }
    }
    Labeling::new(labels, k, modality)
}

/// Indices within `eps` of each point (including itself), ascending.
fn region_queries(set: &EmbeddingSet, eps: f64) -> Vec<Vec<usize>> {
    let eps_sq = eps * eps;
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let ri = set.row(i);
            (0..set.len())
                .filter(|&j| {
                    j == i || squared_distance_from_cosine(dot_f32(ri, set.row(j))) <= eps_sq
                })
                .collect()
        })
        .collect()
}

/// Mean feature of each cluster, then L2-normalized. Outliers are ignored.
pub fn centroids(set: &EmbeddingSet, labeling: &Labeling) -> Result<CentroidSet> {
    if labeling.len() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            found: labeling.len(),
        });
    }
    if labeling.k == 0 {
        return Err(Error::Empty("labeling has no clusters"));
    }
    let d = set.dim();
    let mut sums = Array2::<f64>::zeros((labeling.k, d));
    let mut counts = vec![0usize; labeling.k];
    for i in 0..set.len() {
        let Some(l) = labeling.label(i) else { continue };
        if l >= labeling.k {
            return Err(Error::LabelOutOfRange { label: l, k: labeling.k });
        }
        counts[l] += 1;
        for (acc, &v) in sums.row_mut(l).iter_mut().zip(set.row(i)) {
            *acc += f64::from(v);
        }
    }
    for (c, mut row) in sums.outer_iter_mut().enumerate() {
        if counts[c] == 0 {
            return Err(Error::EmptyCluster(c));
        }
        let inv = 1.0 / counts[c] as f64;
        row.iter_mut().for_each(|v| *v *= inv);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        // A zero mean (antipodal members) is left as-is rather than dividing by zero.
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(CentroidSet {
        centroids: sums,
        member_counts: counts,
    })
}
