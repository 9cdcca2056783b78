//! Cross-modality feature propagation.
//!
//! Each feature is replaced by the weighted average of its k most similar
//! same-modality features plus the weighted average of its k most similar
//! other-modality features. The four blocks (vv, vr, rv, rr) are
//! row-normalized separately, so neither modality dominates the sum.
//!
//! Used on training features before association and on query/gallery
//! features at retrieval time.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::linalg::dot_f32;

pub const DEFAULT_K_TRAIN: usize = 30;
pub const DEFAULT_K_TEST: usize = 30;
/// Suggested neighbor count for small galleries.
pub const SMALL_SET_K: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmfpOptions {
    pub k: usize,
    /// Let an instance compete for its own intra-modality slot.
    pub include_self: bool,
    /// L2-normalize propagated rows.
    pub normalize_output: bool,
}

impl CmfpOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            include_self: true,
            normalize_output: true,
        }
    }
}

/// Row-normalized sparse block: `rows[i]` lists `(column, weight)` pairs in
/// ascending column order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseBlock {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_cols: usize,
}

impl SparseBlock {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows.len(), self.n_cols));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[[i, j]] = w;
            }
        }
        m
    }
}

/// The four affinity blocks of a two-modality set.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub vv: SparseBlock,
    pub vr: SparseBlock,
    pub rv: SparseBlock,
    pub rr: SparseBlock,
    pub k: usize,
}

/// Top-`k` positive similarities of `row` against every row of `cols`,
/// normalized to sum to 1. Ties in similarity keep the lower column.
fn block_row(row: &[f32], cols: &EmbeddingSet, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut cand: Vec<(f64, usize)> = (0..cols.len())
        .filter(|&j| Some(j) != skip)
        .map(|j| (dot_f32(row, cols.row(j)), j))
        .filter(|&(s, _)| s > 0.0)
        .collect();
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
    }
    cand.sort_unstable_by_key(|c| c.1);
    let total: f64 = cand.iter().map(|c| c.0).sum();
    cand.into_iter().map(|(s, j)| (j, s / total)).collect()
}

fn build_block(rows: &EmbeddingSet, cols: &EmbeddingSet, opts: &CmfpOptions, intra: bool) -> SparseBlock {
    let rows_out = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let skip = (intra && !opts.include_self).then_some(i);
            block_row(rows.row(i), cols, opts.k, skip)
        })
        .collect();
    SparseBlock {
        rows: rows_out,
        n_cols: cols.len(),
    }
}

fn check_pair(vis: &EmbeddingSet, inf: &EmbeddingSet) -> Result<()> {
    if vis.dim() != inf.dim() {
        return Err(Error::DimensionMismatch {
            expected: vis.dim(),
            found: inf.dim(),
        });
    }
    if !vis.is_normalized() || !inf.is_normalized() {
        return Err(Error::NotNormalized("feature propagation"));
    }
    Ok(())
}

pub fn build_affinity(vis: &EmbeddingSet, inf: &EmbeddingSet, k: usize) -> Result<AffinityGraph> {
    build_affinity_with(vis, inf, &CmfpOptions::new(k))
}

pub fn build_affinity_with(vis: &EmbeddingSet, inf: &EmbeddingSet, opts: &CmfpOptions) -> Result<AffinityGraph> {
    if opts.k < 1 {
        return Err(Error::InvalidParameter("propagation needs k >= 1".into()));
    }
    check_pair(vis, inf)?;
    Ok(AffinityGraph {
        vv: build_block(vis, vis, opts, true),
        vr: build_block(vis, inf, opts, false),
        rv: build_block(inf, vis, opts, false),
        rr: build_block(inf, inf, opts, true),
        k: opts.k,
    })
}

/// Adds `sum_j w_j x_j` to `out`; an empty block row adds `fallback` instead.
fn accumulate(out: &mut [f64], row: &[(usize, f64)], src: &EmbeddingSet, fallback: &[f32]) {
    if row.is_empty() {
        for (o, &v) in out.iter_mut().zip(fallback) {
            *o += f64::from(v);
        }
        return;
    }
    for &(j, w) in row {
        for (o, &v) in out.iter_mut().zip(src.row(j)) {
            *o += w * f64::from(v);
        }
    }
}

/// Un-normalized propagated rows for one modality.
fn propagate_rows(
    intra: &SparseBlock,
    cross: &SparseBlock,
    own: &EmbeddingSet,
    other: &EmbeddingSet,
) -> Vec<Vec<f64>> {
    (0..own.len())
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0f64; own.dim()];
            accumulate(&mut out, &intra.rows[i], own, own.row(i));
            accumulate(&mut out, &cross.rows[i], other, own.row(i));
            out
        })
        .collect()
}

/// `G · [vis; inf]` before any output normalization.
pub fn propagate_raw(graph: &AffinityGraph, vis: &EmbeddingSet, inf: &EmbeddingSet) -> Result<(Array2<f64>, Array2<f64>)> {
    if graph.vv.n_rows() != vis.len() || graph.rr.n_rows() != inf.len() || graph.vr.n_cols != inf.len() || graph.rv.n_cols != vis.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.vv.n_rows() + graph.rr.n_rows(),
            found: vis.len() + inf.len(),
        });
    }
    if vis.dim() != inf.dim() {
        return Err(Error::DimensionMismatch {
            expected: vis.dim(),
            found: inf.dim(),
        });
    }
    let to_array = |rows: Vec<Vec<f64>>, d: usize| {
        let n = rows.len();
        Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("row lengths equal d")
    };
    let d = vis.dim();
    Ok((
        to_array(propagate_rows(&graph.vv, &graph.vr, vis, inf), d),
        to_array(propagate_rows(&graph.rr, &graph.rv, inf, vis), d),
    ))
}

fn finish(set: &EmbeddingSet, mut m: Array2<f64>, normalize: bool) -> Result<EmbeddingSet> {
    if normalize {
        for (row, mut r) in m.outer_iter_mut().enumerate() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm { row });
            }
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
    set.with_features(m.mapv(|v| v as f32))
}

/// Propagated copies of both sets, rows L2-normalized.
pub fn propagate(graph: &AffinityGraph, vis: &EmbeddingSet, inf: &EmbeddingSet) -> Result<(EmbeddingSet, EmbeddingSet)> {
    propagate_with(graph, vis, inf, true)
}

pub fn propagate_with(
    graph: &AffinityGraph,
    vis: &EmbeddingSet,
    inf: &EmbeddingSet,
    normalize_output: bool,
) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let (pv, pr) = propagate_raw(graph, vis, inf)?;
    Ok((finish(vis, pv, normalize_output)?, finish(inf, pr, normalize_output)?))
}

/// Build and propagate in one call with explicit options.
pub fn cmfp(vis: &EmbeddingSet, inf: &EmbeddingSet, opts: &CmfpOptions) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let graph = build_affinity_with(vis, inf, opts)?;
    propagate_with(&graph, vis, inf, opts.normalize_output)
}

/// Retrieval-time propagation: queries take one modality slot and the
/// gallery the other. `k_te = 0` returns both sets unchanged.
pub fn cmfp_rerank(query: &EmbeddingSet, gallery: &EmbeddingSet, k_te: usize) -> Result<(EmbeddingSet, EmbeddingSet)> {
    if k_te == 0 {
        return Ok((query.clone(), gallery.clone()));
    }
    cmfp(query, gallery, &CmfpOptions::new(k_te))
}

/// Propagates a mixed-modality set in place of its rows, preserving order.
/// `k = 0` returns the set unchanged.
pub fn propagate_mixed(set: &EmbeddingSet, opts: &CmfpOptions) -> Result<EmbeddingSet> {
    if opts.k == 0 {
        return Ok(set.clone());
    }
    let (vis, vis_idx) = set
        .split_modality(Modality::Visible)
        .ok_or(Error::Empty("visible rows"))?;
    let (inf, inf_idx) = set
        .split_modality(Modality::Infrared)
        .ok_or(Error::Empty("infrared rows"))?;
    let (pv, pr) = cmfp(&vis, &inf, opts)?;
    let mut features = Array2::<f32>::zeros(set.features().dim());
    for (src, idx) in [(&pv, &vis_idx), (&pr, &inf_idx)] {
        for (local, &global) in idx.iter().enumerate() {
            features.row_mut(global).assign(&src.features().row(local));
        }
    }
    set.with_features(features)
}
