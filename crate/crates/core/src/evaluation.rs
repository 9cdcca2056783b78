//! Retrieval metrics (CMC, mAP, mINP) and clustering-quality indices
//! (ARI, FMI, AMI, V-measure).
//!
//! Ranking is by descending cosine similarity with ties going to the lower
//! gallery index. Clustering indices follow the usual contingency-table
//! definitions, including scikit-learn's conventions for degenerate inputs.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::OUTLIER;
use crate::embedding::{l2_normalize, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::dot_f32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub ap: f64,
    pub inp: f64,
    /// 1-based rank of the first positive.
    pub first_hit: usize,
    /// 1-based rank of the last positive.
    pub hardest_hit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[r - 1]` is the fraction of queries with a positive in the top `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub minp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryResult>>,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc.get(r.saturating_sub(1)).copied().unwrap_or(f64::NAN)
    }

    pub fn without_details(mut self) -> Self {
        self.per_query = None;
        self
    }
}

/// Gallery order for one query: descending similarity, then ascending index.
pub fn ranking(similarities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    order
}

/// AP and INP for a ranked list of match flags.
pub fn score_ranked(matches: &[bool]) -> Option<QueryResult> {
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = 0;
    let mut hardest_hit = 0;
    for (pos, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            let rank = pos + 1;
            precision_sum += hits as f64 / rank as f64;
            if first_hit == 0 {
                first_hit = rank;
            }
            hardest_hit = rank;
        }
    }
    (hits > 0).then(|| QueryResult {
        ap: precision_sum / hits as f64,
        inp: hits as f64 / hardest_hit as f64,
        first_hit,
        hardest_hit,
    })
}

/// Ranks the gallery for every query by cosine similarity. Inputs that are
/// not yet L2-normalized are normalized first.
pub fn rank_metrics(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    query_ids: &[i64],
    gallery_ids: &[i64],
) -> Result<EvalReport> {
    if query.len() != query_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: query.len(),
            found: query_ids.len(),
        });
    }
    if gallery.len() != gallery_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: gallery.len(),
            found: gallery_ids.len(),
        });
    }
    if query.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: query.dim(),
            found: gallery.dim(),
        });
    }
    let present: BTreeSet<i64> = gallery_ids.iter().copied().collect();
    let missing: BTreeSet<i64> = query_ids
        .iter()
        .copied()
        .filter(|id| !present.contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGalleryIdentity(missing.into_iter().collect()));
    }

    let q = if query.is_normalized() { query.clone() } else { l2_normalize(query)? };
    let g = if gallery.is_normalized() { gallery.clone() } else { l2_normalize(gallery)? };

    let per_query: Vec<QueryResult> = (0..q.len())
        .into_par_iter()
        .map(|i| {
            let sims: Vec<f64> = (0..g.len()).map(|j| dot_f32(q.row(i), g.row(j))).collect();
            let matches: Vec<bool> = ranking(&sims)
                .into_iter()
                .map(|j| gallery_ids[j] == query_ids[i])
                .collect();
            score_ranked(&matches).expect("every query identity is in the gallery")
        })
        .collect();

    let nq = per_query.len() as f64;
    let mut first_hits = vec![0usize; g.len() + 1];
    for r in &per_query {
        first_hits[r.first_hit] += 1;
    }
    let mut cmc = Vec::with_capacity(g.len());
    let mut cumulative = 0usize;
    for hits in &first_hits[1..] {
        cumulative += hits;
        cmc.push(cumulative as f64 / nq);
    }
    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / nq;
    let minp = per_query.iter().map(|r| r.inp).sum::<f64>() / nq;
    Ok(EvalReport {
        cmc,
        map,
        minp,
        per_query: Some(per_query),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub ari: f64,
    pub fmi: f64,
    pub ami: f64,
    pub v_measure: f64,
}

/// Contingency counts over the positions where neither label is an outlier.
struct Contingency {
    n: u64,
    /// Nonzero cells as `(truth class, predicted cluster, count)`, with
    /// dense class and cluster indices.
    cells: Vec<(usize, usize, u64)>,
    /// Row sums (truth classes).
    a: Vec<u64>,
    /// Column sums (predicted clusters).
    b: Vec<u64>,
}

impl Contingency {
    fn build(pred: &[i64], truth: &[i64]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                found: pred.len(),
            });
        }
        let mut table: BTreeMap<(i64, i64), u64> = BTreeMap::new();
        let mut a: BTreeMap<i64, u64> = BTreeMap::new();
        let mut b: BTreeMap<i64, u64> = BTreeMap::new();
        let mut n = 0;
        for (&p, &t) in pred.iter().zip(truth) {
            if p == OUTLIER || t == OUTLIER {
                continue;
            }
            *table.entry((t, p)).or_default() += 1;
            *a.entry(t).or_default() += 1;
            *b.entry(p).or_default() += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::AllOutliers);
        }
        let row_of: BTreeMap<i64, usize> = a.keys().enumerate().map(|(i, &k)| (k, i)).collect();
        let col_of: BTreeMap<i64, usize> = b.keys().enumerate().map(|(i, &k)| (k, i)).collect();
        Ok(Self {
            n,
            cells: table
                .into_iter()
                .map(|((t, p), c)| (row_of[&t], col_of[&p], c))
                .collect(),
            a: a.into_values().collect(),
            b: b.into_values().collect(),
        })
    }

    fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        self.cells
            .iter()
            .map(|&(i, j, c)| {
                let c = c as f64;
                c / n * (n * c / (self.a[i] as f64 * self.b[j] as f64)).ln()
            })
            .sum::<f64>()
            .max(0.0)
    }
}

fn comb2(x: u64) -> u128 {
    let x = u128::from(x);
    x * x.saturating_sub(1) / 2
}

fn entropy(counts: &[u64], n: u64) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Expected mutual information under the hypergeometric model of random
/// labelings with fixed marginals.
fn expected_mutual_information(a: &[u64], b: &[u64], n: u64) -> f64 {
    let n_us = n as usize;
    let mut ln_fact = vec![0.0f64; n_us + 1];
    for k in 1..=n_us {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let (ai_, bj_, nij_) = (ai as usize, bj as usize, nij as usize);
                let ln_p = ln_fact[ai_] + ln_fact[bj_] + ln_fact[n_us - ai_] + ln_fact[n_us - bj_]
                    - ln_fact[n_us]
                    - ln_fact[nij_]
                    - ln_fact[ai_ - nij_]
                    - ln_fact[bj_ - nij_]
                    - ln_fact[n_us + nij_ - ai_ - bj_];
                let x = nij as f64;
                emi += x / nf * (nf * x / (ai as f64 * bj as f64)).ln() * ln_p.exp();
            }
        }
    }
    emi
}

/// Agreement between predicted labels and ground truth. Positions where
/// either side is -1 are dropped.
pub fn clustering_quality(pred: &[i64], truth: &[i64]) -> Result<ClusterQuality> {
    let ct = Contingency::build(pred, truth)?;
    let n = ct.n;

    // ARI
    let sum_cells: u128 = ct.cells.iter().map(|&(_, _, c)| comb2(c)).sum();
    let sum_a: u128 = ct.a.iter().map(|&c| comb2(c)).sum();
    let sum_b: u128 = ct.b.iter().map(|&c| comb2(c)).sum();
    let pairs = comb2(n);
    let ari = if pairs == 0 {
        1.0
    } else {
        let expected = sum_a as f64 * sum_b as f64 / pairs as f64;
        let max = (sum_a + sum_b) as f64 / 2.0;
        if max == expected {
            1.0
        } else {
            (sum_cells as f64 - expected) / (max - expected)
        }
    };

    // FMI
    let tk = 2 * sum_cells;
    let pk = 2 * sum_a;
    let qk = 2 * sum_b;
    let fmi = if tk == 0 {
        0.0
    } else {
        (tk as f64 / pk as f64).sqrt() * (tk as f64 / qk as f64).sqrt()
    };

    // V-measure and AMI
    let h_true = entropy(&ct.a, n);
    let h_pred = entropy(&ct.b, n);
    let mi = ct.mutual_information();
    let homogeneity = if h_true == 0.0 { 1.0 } else { mi / h_true };
    let completeness = if h_pred == 0.0 { 1.0 } else { mi / h_pred };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };

    let bijective = ct.cells.len() == ct.a.len() && ct.cells.len() == ct.b.len();
    let ami = if bijective {
        // Identical partitions; the general formula degenerates to 0/0.
        1.0
    } else if ct.a.len() == 1 || ct.b.len() == 1 {
        0.0
    } else {
        let emi = expected_mutual_information(&ct.a, &ct.b, n);
        let mut denom = (h_true + h_pred) / 2.0 - emi;
        denom = if denom < 0.0 {
            denom.min(-f64::EPSILON)
        } else {
            denom.max(f64::EPSILON)
        };
        (mi - emi) / denom
    };

    Ok(ClusterQuality {
        ari,
        fmi,
        ami,
        v_measure,
    })
}
