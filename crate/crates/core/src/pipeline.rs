//! One training epoch at desk scale, and a multi-epoch driver.
//!
//! The "network" here is the embedding matrix itself. Each epoch clusters
//! both modalities, seeds every memory from the clustering, propagates
//! features across modalities, associates labels in both directions, then
//! runs mini-batches that evaluate all three loss families, apply momentum
//! updates, and take a gradient step on the global embeddings using the
//! analytic gradient of the global contrastive terms.
//!
//! Feature maps are emulated: pixel `h` of instance `i` is the current
//! embedding plus a fixed, seeded per-instance residual. Part features are
//! evaluated forward-only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::association::{dual_associate, SinkhornOptions};
use crate::clustering::{centroids, dbscan, CentroidSet, Labeling};
use crate::cmfp::{cmfp, cmfp_rerank, CmfpOptions};
use crate::embedding::{l2_normalize, load_embeddings, EmbeddingSet, Format, Modality};
use crate::error::{Error, Result};
use crate::evaluation::{clustering_quality, rank_metrics, ClusterQuality, EvalReport};
use crate::fgsal::{
    attend_with_queries, own_part_features, part_contrastive_loss, semantic_aligned_pair,
    FeatureMap, PartBanks, PartPairSample, PartPrototypes, QuerySideBanks,
};
use crate::gpcr::{
    gpcr_loss, intersect_positive_global, knn, mutual_correction_positive, BankId, FeatureRole,
    InstanceBanks, InstanceTerm,
};
use crate::linalg::{normalize_f64, normalized, row_slice};
use crate::memory_bank::{infonce_grad, infonce_loss, BankLevel, MemoryBank};
use crate::synth::{generate, SynthConfig};

const MODALITIES: [Modality; 2] = [Modality::Visible, Modality::Infrared];

// Independent RNG streams derived from the run seed.
const STREAM_RESIDUALS: u64 = 1;
const STREAM_PROTOTYPES: u64 = 2;
const STREAM_TRAINING: u64 = 3;

fn side(m: Modality) -> usize {
    match m {
        Modality::Visible => 0,
        Modality::Infrared => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub lambda_ot: f64,
    pub tau: f64,
    pub mu: f64,
    /// Parts per feature map; 0 turns off part features and part-level mining.
    pub n_parts: usize,
    pub k_gpcr: usize,
    /// Propagation neighbors before association; 0 associates raw features.
    pub k_tr: usize,
    /// Propagation neighbors at retrieval; 0 disables re-ranking.
    pub k_te: usize,
    pub lambda_gpcr: f64,
    pub batch_size: usize,
    pub labels_per_batch: usize,
    /// Batches per epoch; 0 means one pass over the training instances.
    pub iters_per_epoch: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
    pub map_height: usize,
    pub map_width: usize,
    /// Scale of the fixed per-pixel residuals around the global embedding.
    pub map_noise: f64,
    /// Noise added to visible maps for the augmented branch.
    pub aug_sigma: f64,
    pub synth: Option<SynthConfig>,
    pub visible: Option<PathBuf>,
    pub infrared: Option<PathBuf>,
    /// Optional real feature maps, one row per input row, `map_height *
    /// map_width * d` wide (pixel-major). Without them maps are emulated.
    pub visible_maps: Option<PathBuf>,
    pub infrared_maps: Option<PathBuf>,
    pub history: Option<PathBuf>,
    /// Worker threads; results do not depend on it, so it is not recorded.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eps: 0.6,
            min_pts: crate::clustering::DEFAULT_MIN_PTS,
            lambda_ot: crate::association::DEFAULT_LAMBDA_OT,
            tau: crate::memory_bank::DEFAULT_TEMPERATURE,
            mu: crate::memory_bank::DEFAULT_MOMENTUM,
            n_parts: crate::fgsal::DEFAULT_PARTS,
            k_gpcr: crate::gpcr::DEFAULT_K,
            k_tr: crate::cmfp::DEFAULT_K_TRAIN,
            k_te: crate::cmfp::SMALL_SET_K,
            lambda_gpcr: crate::gpcr::DEFAULT_LAMBDA,
            batch_size: 64,
            labels_per_batch: 8,
            iters_per_epoch: 0,
            epochs: 15,
            step_size: 0.1,
            seed: 0,
            map_height: 4,
            map_width: 2,
            map_noise: 0.3,
            aug_sigma: 0.05,
            synth: None,
            visible: None,
            infrared: None,
            visible_maps: None,
            infrared_maps: None,
            history: None,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.min_pts == 0 {
            return bad("min_pts must be >= 1".into());
        }
        if !(self.lambda_ot > 0.0) {
            return bad(format!("lambda_ot must be > 0, got {}", self.lambda_ot));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if self.k_gpcr == 0 {
            return bad("k_gpcr must be >= 1".into());
        }
        if !(self.lambda_gpcr >= 0.0) {
            return bad(format!("lambda_gpcr must be >= 0, got {}", self.lambda_gpcr));
        }
        if self.labels_per_batch == 0 || self.batch_size < 2 * self.labels_per_batch {
            return bad("batch_size must be at least 2 * labels_per_batch".into());
        }
        if !(self.step_size >= 0.0) {
            return bad(format!("step_size must be >= 0, got {}", self.step_size));
        }
        if self.map_height * self.map_width == 0 || self.n_parts > self.map_height * self.map_width {
            return bad("feature map must have at least n_parts pixels".into());
        }
        if !(self.map_noise >= 0.0) || !(self.aug_sigma >= 0.0) {
            return bad("map_noise and aug_sigma must be >= 0".into());
        }
        if self.visible.is_some() != self.infrared.is_some() {
            return bad("visible and infrared inputs must be given together".into());
        }
        if self.visible_maps.is_some() != self.infrared_maps.is_some() {
            return bad("visible_maps and infrared_maps must be given together".into());
        }
        if self.visible_maps.is_some() && self.visible.is_none() {
            return bad("feature maps need visible and infrared embedding inputs".into());
        }
        if self.visible.is_some() && self.synth.is_some() {
            return bad("give either input files or a synth table, not both".into());
        }
        Ok(())
    }

    /// Instances per label per modality in a batch.
    pub fn per_label(&self) -> usize {
        self.batch_size / (2 * self.labels_per_batch)
    }

    pub fn association_params(&self) -> AssociationParams {
        AssociationParams {
            eps: self.eps,
            min_pts: self.min_pts,
            lambda_ot: self.lambda_ot,
            k_tr: self.k_tr,
        }
    }

    /// Both modalities stacked (visible first), from files or the generator.
    pub fn load_input(&self) -> Result<EmbeddingSet> {
        match (&self.visible, &self.infrared) {
            (Some(v), Some(r)) => {
                let vis = load_embeddings(v, Format::from_path(v))?;
                let inf = load_embeddings(r, Format::from_path(r))?;
                vis.concat(&inf)
            }
            _ => generate(&self.synth.clone().unwrap_or_default()),
        }
    }

    /// Stacked feature maps in the same row order as [`Self::load_input`].
    pub fn load_maps(&self) -> Result<Option<Array2<f64>>> {
        let (Some(v), Some(r)) = (&self.visible_maps, &self.infrared_maps) else {
            return Ok(None);
        };
        let vis = load_embeddings(v, Format::from_path(v))?;
        let inf = load_embeddings(r, Format::from_path(r))?;
        Ok(Some(vis.concat(&inf)?.features().mapv(f64::from)))
    }
}

/// Parameters for clustering plus association.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    pub eps: f64,
    pub min_pts: usize,
    pub lambda_ot: f64,
    pub k_tr: usize,
}

impl Default for AssociationParams {
    fn default() -> Self {
        PipelineConfig::default().association_params()
    }
}

/// Intra-modality clusters and cross-modality labels for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub visible: Labeling,
    pub infrared: Labeling,
    /// Infrared cluster per visible instance; `None` for outliers.
    pub visible_cross: Vec<Option<usize>>,
    /// Visible cluster per infrared instance; `None` for outliers.
    pub infrared_cross: Vec<Option<usize>>,
    pub visible_centroids: CentroidSet,
    pub infrared_centroids: CentroidSet,
}

impl Association {
    pub fn labeling(&self, m: Modality) -> &Labeling {
        match m {
            Modality::Visible => &self.visible,
            Modality::Infrared => &self.infrared,
        }
    }

    pub fn cross(&self, m: Modality) -> &[Option<usize>] {
        match m {
            Modality::Visible => &self.visible_cross,
            Modality::Infrared => &self.infrared_cross,
        }
    }
}

fn non_outliers(l: &Labeling) -> Vec<usize> {
    (0..l.len()).filter(|&i| l.label(i).is_some()).collect()
}

/// Clusters each modality, propagates the non-outlier features across
/// modalities (`k_tr > 0`), then assigns every non-outlier instance a label
/// in the other modality's space by optimal transport against the other
/// modality's centroids.
pub fn associate_sets(vis: &EmbeddingSet, inf: &EmbeddingSet, params: &AssociationParams) -> Result<Association> {
    let vis = if vis.is_normalized() { vis.clone() } else { l2_normalize(vis)? };
    let inf = if inf.is_normalized() { inf.clone() } else { l2_normalize(inf)? };
    let lv = dbscan(&vis, params.eps, params.min_pts)?;
    if lv.k == 0 {
        return Err(Error::NoClusters(Modality::Visible));
    }
    let lr = dbscan(&inf, params.eps, params.min_pts)?;
    if lr.k == 0 {
        return Err(Error::NoClusters(Modality::Infrared));
    }
    let cv = centroids(&vis, &lv)?;
    let cr = centroids(&inf, &lr)?;

    let (tv, tr) = (non_outliers(&lv), non_outliers(&lr));
    let (train_v, train_r) = (vis.select(&tv), inf.select(&tr));
    let (fv, fr) = if params.k_tr > 0 {
        cmfp(&train_v, &train_r, &CmfpOptions::new(params.k_tr))?
    } else {
        (train_v, train_r)
    };
    let dual = dual_associate(&fv, &fr, &cv.centroids, &cr.centroids, &SinkhornOptions::with_lambda(params.lambda_ot))?;

    let mut visible_cross = vec![None; vis.len()];
    for (&i, &c) in tv.iter().zip(&dual.visible_to_infrared) {
        visible_cross[i] = Some(c);
    }
    let mut infrared_cross = vec![None; inf.len()];
    for (&i, &c) in tr.iter().zip(&dual.infrared_to_visible) {
        infrared_cross[i] = Some(c);
    }
    Ok(Association {
        visible: lv,
        infrared: lr,
        visible_cross,
        infrared_cross,
        visible_centroids: cv,
        infrared_centroids: cr,
    })
}

/// Fraction of non-outlier instances whose cross-modality cluster's majority
/// identity (over that cluster's members) equals their own identity.
/// `None` without ground truth.
pub fn association_accuracy(assoc: &Association, vis_ids: &[Option<i64>], inf_ids: &[Option<i64>]) -> Option<f64> {
    let majority = |labels: &Labeling, ids: &[Option<i64>]| -> Vec<Option<i64>> {
        let mut counts: Vec<BTreeMap<i64, usize>> = vec![BTreeMap::new(); labels.k];
        for (i, id) in ids.iter().enumerate() {
            if let (Some(l), Some(id)) = (labels.label(i), id) {
                *counts[l].entry(*id).or_default() += 1;
            }
        }
        counts
            .iter()
            .map(|c| {
                c.iter()
                    .fold(None, |best: Option<(i64, usize)>, (&id, &n)| match best {
                        Some((_, bn)) if bn >= n => best,
                        _ => Some((id, n)),
                    })
                    .map(|b| b.0)
            })
            .collect()
    };
    let maj_v = majority(&assoc.visible, vis_ids);
    let maj_r = majority(&assoc.infrared, inf_ids);
    let (mut hit, mut total) = (0usize, 0usize);
    for (cross, ids, target) in [(&assoc.visible_cross, vis_ids, &maj_r), (&assoc.infrared_cross, inf_ids, &maj_v)] {
        for (c, id) in cross.iter().zip(ids) {
            if let (Some(c), Some(id)) = (c, id) {
                total += 1;
                hit += usize::from(target[*c] == Some(*id));
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Mean cosine over all (visible, infrared) pairs sharing an identity.
pub fn cross_modality_cosine(set: &EmbeddingSet) -> Option<f64> {
    let mut by_id: BTreeMap<i64, [Vec<usize>; 2]> = BTreeMap::new();
    for i in 0..set.len() {
        if let Some(id) = set.identity()[i] {
            by_id.entry(id).or_default()[side(set.modality()[i])].push(i);
        }
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for [v, r] in by_id.values() {
        for &i in v {
            for &j in r {
                sum += crate::linalg::dot_f32(set.row(i), set.row(j));
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// The trainable embeddings plus everything needed to rebuild feature maps.
#[derive(Clone, Debug)]
pub struct PipelineState {
    embeddings: Array2<f64>,
    modality: Vec<Modality>,
    identity: Vec<Option<i64>>,
    /// Per instance, `H*W x d` fixed pixel offsets.
    residuals: Vec<Array2<f64>>,
    prototypes: Option<PartPrototypes>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl PipelineState {
    pub fn new(set: &EmbeddingSet, cfg: &PipelineConfig) -> Result<Self> {
        Self::with_maps(set, None, cfg)
    }

    /// `maps` holds one flattened `H*W x d` map per row of `set`; each
    /// instance keeps the offset of its map from its initial embedding.
    pub fn with_maps(set: &EmbeddingSet, maps: Option<&Array2<f64>>, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        for m in MODALITIES {
            if set.count(m) == 0 {
                return Err(Error::NoClusters(m));
            }
        }
        let set = if set.is_normalized() { set.clone() } else { l2_normalize(set)? };
        let (n, d) = (set.len(), set.dim());
        let embeddings = set.features().mapv(f64::from);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_RESIDUALS);
        let hw = cfg.map_height * cfg.map_width;
        if let Some(maps) = maps {
            if maps.nrows() != n {
                return Err(Error::DimensionMismatch { expected: n, found: maps.nrows() });
            }
            if maps.ncols() != hw * d {
                return Err(Error::DimensionMismatch { expected: hw * d, found: maps.ncols() });
            }
        }
        let residuals = (0..n)
            .map(|i| {
                if let Some(maps) = maps {
                    let flat = Array2::from_shape_vec((hw, d), maps.row(i).to_vec()).expect("checked width");
                    return flat - embeddings.row(i);
                }
                let mut r = Array2::from_shape_fn((hw, d), |_| StandardNormal.sample(&mut rng));
                for mut row in r.outer_iter_mut() {
                    let s = row.as_slice_mut().expect("standard layout");
                    normalize_f64(s);
                    s.iter_mut().for_each(|v| *v *= cfg.map_noise);
                }
                r
            })
            .collect();
        let prototypes = if cfg.n_parts > 0 {
            let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            seed_rng.set_stream(STREAM_PROTOTYPES);
            Some(PartPrototypes::seeded(cfg.n_parts, d, seed_rng.random())?)
        } else {
            None
        };
        let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        train_rng.set_stream(STREAM_TRAINING);
        Ok(Self {
            embeddings,
            modality: set.modality().to_vec(),
            identity: set.identity().to_vec(),
            residuals,
            prototypes,
            rng: train_rng,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        row_slice(&self.embeddings, i)
    }

    /// Current embeddings as a normalized set, original row order.
    pub fn embeddings(&self) -> EmbeddingSet {
        let f = self.embeddings.mapv(|v| v as f32);
        EmbeddingSet::new(f, self.modality.clone(), self.identity.clone())
            .expect("state rows are finite")
    }

    /// One modality's rows and their indices in the full set.
    pub fn split(&self, m: Modality) -> Result<(EmbeddingSet, Vec<usize>)> {
        let set = l2_normalize(&self.embeddings())?;
        set.split_modality(m).ok_or(Error::NoClusters(m))
    }

    pub fn feature_map(&self, i: usize, cfg: &PipelineConfig) -> Result<FeatureMap> {
        let mut px = self.residuals[i].clone();
        let f = self.embedding(i);
        for mut row in px.outer_iter_mut() {
            row.iter_mut().zip(f).for_each(|(p, &v)| *p += v);
        }
        FeatureMap::new(px, cfg.map_height, cfg.map_width)
    }

    fn augmented_map(&mut self, i: usize, cfg: &PipelineConfig) -> Result<FeatureMap> {
        let base = self.feature_map(i, cfg)?;
        let rng = &mut self.rng;
        let px = base.pixels().mapv(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + cfg.aug_sigma * z
        });
        FeatureMap::new(px, cfg.map_height, cfg.map_width)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dagl: f64,
    pub fgsal: f64,
    pub gpcr: f64,
    /// `dagl + fgsal + lambda_gpcr * gpcr`.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub association_accuracy: Option<f64>,
    pub visible_quality: Option<ClusterQuality>,
    pub infrared_quality: Option<ClusterQuality>,
    pub visible_clusters: usize,
    pub infrared_clusters: usize,
    pub visible_outliers: usize,
    pub infrared_outliers: usize,
    pub empty_positive_sets: usize,
    pub gpcr_terms: usize,
    /// Mean same-identity cross-modality cosine after this epoch's updates.
    pub cross_modality_cosine: Option<f64>,
    pub iterations: usize,
}

/// A non-outlier training instance with its labels in both spaces.
#[derive(Clone, Copy, Debug)]
struct Item {
    global: usize,
    intra: usize,
    cross: usize,
}

struct Entry {
    m: Modality,
    /// Row in this modality's instance banks.
    item: usize,
    global: usize,
    intra: usize,
    cross: usize,
    f: Vec<f64>,
}

fn label_centroids(rows: &[Vec<f64>], labels: impl Iterator<Item = usize>, k: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((k, d));
    for (row, l) in rows.iter().zip(labels) {
        m.row_mut(l).iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    for mut r in m.outer_iter_mut() {
        normalize_f64(r.as_slice_mut().expect("standard layout"));
    }
    m
}

fn bank_from_rows(rows: &[Vec<f64>], cfg: &PipelineConfig) -> Result<MemoryBank> {
    let d = rows.first().map_or(0, Vec::len);
    let m = Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rows share a length");
    MemoryBank::new(m, cfg.mu, cfg.tau, BankLevel::Instance)
}

fn cluster_bank(rows: Array2<f64>, cfg: &PipelineConfig) -> Result<MemoryBank> {
    MemoryBank::new(rows, cfg.mu, cfg.tau, BankLevel::Cluster)
}

/// Runs one epoch in place and reports its statistics.
pub fn run_epoch(state: &mut PipelineState, cfg: &PipelineConfig) -> Result<EpochReport> {
    cfg.validate()?;
    let (vis, vis_global) = state.split(Modality::Visible)?;
    let (inf, inf_global) = state.split(Modality::Infrared)?;
    let assoc = associate_sets(&vis, &inf, &cfg.association_params())?;
    let d = vis.dim();

    let items: [Vec<Item>; 2] = [(&vis_global, Modality::Visible), (&inf_global, Modality::Infrared)].map(|(globals, m)| {
        let l = assoc.labeling(m);
        let cross = assoc.cross(m);
        (0..l.len())
            .filter_map(|i| {
                Some(Item {
                    global: globals[i],
                    intra: l.label(i)?,
                    cross: cross[i]?,
                })
            })
            .collect()
    });
    let k = [assoc.visible.k, assoc.infrared.k];

    // Memories seeded from this epoch's clustering.
    let mut cluster_banks = [
        MemoryBank::from_centroids(&assoc.visible_centroids, cfg.mu, cfg.tau)?,
        MemoryBank::from_centroids(&assoc.infrared_centroids, cfg.mu, cfg.tau)?,
    ];
    let global_rows = |m: Modality| -> Vec<Vec<f64>> {
        items[side(m)].iter().map(|it| state.embedding(it.global).to_vec()).collect()
    };
    let mut instance = InstanceBanks {
        visible: bank_from_rows(&global_rows(Modality::Visible), cfg)?,
        infrared: bank_from_rows(&global_rows(Modality::Infrared), cfg)?,
        parts: Vec::new(),
    };
    let mut part_banks: Option<PartBanks> = None;
    if let Some(protos) = &state.prototypes {
        // own[side][item][part]
        let own: [Vec<Vec<Vec<f64>>>; 2] = [0, 1].map(|s| {
            items[s]
                .iter()
                .map(|it| {
                    let map = state.feature_map(it.global, cfg)?;
                    Ok(own_part_features(&map, MODALITIES[s], protos)?
                        .into_iter()
                        .map(|pf| normalized(&pf.vector))
                        .collect())
                })
                .collect::<Result<Vec<Vec<Vec<f64>>>>>()
        }).try_map_all()?;
        let np = protos.n_parts();
        let column = |s: usize, p: usize| -> Vec<Vec<f64>> { own[s].iter().map(|parts| parts[p].clone()).collect() };
        let centroid_bank = |s: usize, p: usize| {
            cluster_bank(label_centroids(&column(s, p), items[s].iter().map(|it| it.intra), k[s], d), cfg)
        };
        let mut pb = PartBanks {
            visible: QuerySideBanks { intra: vec![], cross: vec![] },
            infrared: QuerySideBanks { intra: vec![], cross: vec![] },
        };
        for p in 0..np {
            instance.parts.push((bank_from_rows(&column(0, p), cfg)?, bank_from_rows(&column(1, p), cfg)?));
            pb.visible.intra.push(centroid_bank(0, p)?);
            pb.visible.cross.push(centroid_bank(1, p)?);
            pb.infrared.intra.push(centroid_bank(1, p)?);
            pb.infrared.cross.push(centroid_bank(0, p)?);
        }
        part_banks = Some(pb);
    }

    // by_label[space][modality][label] -> item indices
    let mut by_label: [[Vec<Vec<usize>>; 2]; 2] = Default::default();
    for space in 0..2 {
        for s in 0..2 {
            let mut lists = vec![Vec::new(); k[space]];
            for (idx, it) in items[s].iter().enumerate() {
                let l = if s == space { it.intra } else { it.cross };
                lists[l].push(idx);
            }
            by_label[space][s] = lists;
        }
    }

    let iterations = match cfg.iters_per_epoch {
        0 => (items[0].len() + items[1].len()).div_ceil(cfg.batch_size),
        n => n,
    };
    let mut sums = LossBreakdown::default();
    let mut empty_positive_sets = 0;
    let mut gpcr_terms = 0;
    for t in 0..iterations {
        let space = t % 2;
        let n_labels = cfg.labels_per_batch.min(k[space]);
        let labels = sample_indices(&mut state.rng, k[space], n_labels).into_vec();
        let per = cfg.per_label();
        let mut batch: Vec<Entry> = Vec::with_capacity(cfg.batch_size);
        for &l in &labels {
            for s in 0..2 {
                let pool = &by_label[space][s][l];
                if pool.is_empty() {
                    continue;
                }
                let picks: Vec<usize> = if pool.len() >= per {
                    sample_indices(&mut state.rng, pool.len(), per).into_vec()
                } else {
                    (0..per).map(|_| state.rng.random_range(0..pool.len())).collect()
                };
                for p in picks {
                    let idx = pool[p];
                    let it = items[s][idx];
                    batch.push(Entry {
                        m: MODALITIES[s],
                        item: idx,
                        global: it.global,
                        intra: it.intra,
                        cross: it.cross,
                        f: state.embedding(it.global).to_vec(),
                    });
                }
            }
        }
        let out = batch_step(state, cfg, &batch, &mut cluster_banks, &mut instance, part_banks.as_mut())?;
        sums.dagl += out.dagl;
        sums.fgsal += out.fgsal;
        sums.gpcr += out.gpcr;
        empty_positive_sets += out.empty_sets;
        gpcr_terms += out.terms;
    }

    let iters = iterations.max(1) as f64;
    let mut losses = LossBreakdown {
        dagl: sums.dagl / iters,
        fgsal: sums.fgsal / iters,
        gpcr: sums.gpcr / iters,
        total: 0.0,
    };
    losses.total = losses.dagl + losses.fgsal + cfg.lambda_gpcr * losses.gpcr;

    state.epoch += 1;
    let has_ids = |s: &EmbeddingSet| s.identity().iter().any(Option::is_some);
    let quality = |l: &Labeling, s: &EmbeddingSet| {
        has_ids(s).then(|| clustering_quality(&l.labels, &s.identity_codes()).ok()).flatten()
    };
    Ok(EpochReport {
        epoch: state.epoch,
        losses,
        association_accuracy: association_accuracy(&assoc, vis.identity(), inf.identity()),
        visible_quality: quality(&assoc.visible, &vis),
        infrared_quality: quality(&assoc.infrared, &inf),
        visible_clusters: assoc.visible.k,
        infrared_clusters: assoc.infrared.k,
        visible_outliers: assoc.visible.outlier_count(),
        infrared_outliers: assoc.infrared.outlier_count(),
        empty_positive_sets,
        gpcr_terms,
        cross_modality_cosine: cross_modality_cosine(&state.embeddings()),
        iterations,
    })
}

trait TryMapAll<T> {
    fn try_map_all(self) -> Result<[T; 2]>;
}

impl<T> TryMapAll<T> for [Result<T>; 2] {
    fn try_map_all(self) -> Result<[T; 2]> {
        let [a, b] = self;
        Ok([a?, b?])
    }
}

struct BatchOutcome {
    dagl: f64,
    fgsal: f64,
    gpcr: f64,
    empty_sets: usize,
    terms: usize,
}

/// Part features of one query instance and its partner.
struct PairParts {
    entry: usize,
    sample: PartPairSample,
    aug: Vec<Vec<f64>>,
}

fn batch_step(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    batch: &[Entry],
    cluster_banks: &mut [MemoryBank; 2],
    instance: &mut InstanceBanks,
    part_banks: Option<&mut PartBanks>,
) -> Result<BatchOutcome> {
    let [bv, br] = &*cluster_banks;
    let count = |m: Modality| batch.iter().filter(|e| e.m == m).count();
    let n = [count(Modality::Visible), count(Modality::Infrared)];
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };

    // Global terms and their gradients.
    let mut intra_sum = [0.0; 2];
    let mut cross_sum = [0.0; 2];
    let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in batch {
        let s = side(e.m);
        let (own, other) = if s == 0 { (bv, br) } else { (br, bv) };
        intra_sum[s] += infonce_loss(own, &e.f, e.intra)?;
        cross_sum[s] += infonce_loss(other, &e.f, e.cross)?;
        let g1 = infonce_grad(own, &e.f, e.intra)?;
        let g2 = infonce_grad(other, &e.f, e.cross)?;
        let scale = 1.0 / n[s] as f64;
        let acc = grads.entry(e.global).or_insert_with(|| vec![0.0; e.f.len()]);
        for ((a, x), y) in acc.iter_mut().zip(&g1).zip(&g2) {
            *a += scale * (x + y);
        }
    }
    let dagl = mean(intra_sum[0], n[0]) + mean(intra_sum[1], n[1]) + mean(cross_sum[0], n[0]) + mean(cross_sum[1], n[1]);

    // Cross-modality partner: first entry of the other modality sharing a
    // label in either space.
    let partner: Vec<Option<usize>> = batch
        .iter()
        .map(|e| {
            batch
                .iter()
                .position(|o| o.m != e.m && (e.intra == o.cross || e.cross == o.intra))
        })
        .collect();

    let mut pairs: Vec<PairParts> = Vec::new();
    if let Some(protos) = state.prototypes.clone() {
        for (i, e) in batch.iter().enumerate() {
            let Some(j) = partner[i] else { continue };
            let own_map = state.feature_map(e.global, cfg)?;
            let partner_map = state.feature_map(batch[j].global, cfg)?;
            let aligned = semantic_aligned_pair(&own_map, e.m, &partner_map, &protos)?;
            let vis_global = if e.m == Modality::Visible { e.global } else { batch[j].global };
            let aug_map = state.augmented_map(vis_global, cfg)?;
            let queries: Vec<Vec<f64>> = aligned.iter().map(|a| a.query.clone()).collect();
            let aug = attend_with_queries(&queries, &aug_map, e.m, Modality::Visible)?
                .into_iter()
                .map(|pf| normalized(&pf.vector))
                .collect();
            pairs.push(PairParts {
                entry: i,
                sample: PartPairSample::from_aligned(&aligned, e.intra, e.cross),
                aug,
            });
        }
    }

    let fgsal = match part_banks.as_deref() {
        Some(pb) => {
            let (vp, rp): (Vec<&PairParts>, Vec<&PairParts>) =
                pairs.iter().partition(|p| batch[p.entry].m == Modality::Visible);
            let vs: Vec<PartPairSample> = vp.iter().map(|p| p.sample.clone()).collect();
            let rs: Vec<PartPairSample> = rp.iter().map(|p| p.sample.clone()).collect();
            part_contrastive_loss(&vs, &rs, pb)?
        }
        None => 0.0,
    };

    // Positive mining.
    let k = cfg.k_gpcr;
    let mut terms: Vec<InstanceTerm> = Vec::new();
    let mut pair_of: BTreeMap<usize, &PairParts> = BTreeMap::new();
    for p in &pairs {
        pair_of.insert(p.entry, p);
    }
    for (i, e) in batch.iter().enumerate() {
        let Some(j) = partner[i] else { continue };
        let (fv, fr) = if e.m == Modality::Visible {
            (&e.f, &batch[j].f)
        } else {
            (&batch[j].f, &e.f)
        };
        let (pv, pr) = intersect_positive_global(fv, fr, &instance.visible, &instance.infrared, k)?;
        for (bank, set) in [(BankId::Global(Modality::Visible), pv), (BankId::Global(Modality::Infrared), pr)] {
            terms.push(InstanceTerm {
                role: FeatureRole::Global(e.m),
                bank,
                feature: e.f.clone(),
                positives: set,
            });
        }
        let Some(parts) = pair_of.get(&i) else { continue };
        let globals = [
            knn(fv, &instance.visible, BankId::Global(Modality::Visible), k)?,
            knn(fr, &instance.infrared, BankId::Global(Modality::Infrared), k)?,
        ];
        for p in 0..instance.n_parts() {
            for bm in MODALITIES {
                let id = BankId::Part(p, bm);
                let bank = instance.get(id)?;
                let own = &parts.sample.own[p];
                let other = &parts.sample.partner[p];
                let n_aug = knn(&parts.aug[p], bank, id, k)?;
                let n_own = knn(own, bank, id, k)?;
                let n_other = knn(other, bank, id, k)?;
                let g = &globals[side(bm)];
                terms.push(InstanceTerm {
                    role: FeatureRole::Part { query: e.m, source: e.m },
                    bank: id,
                    feature: own.clone(),
                    positives: mutual_correction_positive(g, &n_aug, &n_other),
                });
                terms.push(InstanceTerm {
                    role: FeatureRole::Part { query: e.m, source: e.m.other() },
                    bank: id,
                    feature: other.clone(),
                    positives: mutual_correction_positive(g, &n_aug, &n_own),
                });
            }
        }
    }
    let gpcr = gpcr_loss(&terms, instance)?;

    // Momentum updates, after every loss has been evaluated.
    for e in batch {
        let s = side(e.m);
        cluster_banks[s].momentum_update(e.intra, &e.f)?;
        cluster_banks[1 - s].momentum_update(e.cross, &e.f)?;
        instance.get_mut(BankId::Global(e.m))?.momentum_update(e.item, &e.f)?;
    }
    if let Some(pb) = part_banks {
        for parts in &pairs {
            let e = &batch[parts.entry];
            let q = if e.m == Modality::Visible { &mut pb.visible } else { &mut pb.infrared };
            for p in 0..q.intra.len() {
                for f in [&parts.sample.own[p], &parts.sample.partner[p]] {
                    q.intra[p].momentum_update(e.intra, f)?;
                    q.cross[p].momentum_update(e.cross, f)?;
                }
                instance.get_mut(BankId::Part(p, e.m))?.momentum_update(e.item, &parts.sample.own[p])?;
            }
        }
    }

    // Gradient step on the global embeddings.
    for (g, grad) in grads {
        let row = state.embeddings.row_mut(g).into_slice().expect("standard layout");
        let old = row.to_vec();
        row.iter_mut().zip(&grad).for_each(|(x, gx)| *x -= cfg.step_size * gx);
        if !normalize_f64(row) {
            row.copy_from_slice(&old);
        }
    }

    Ok(BatchOutcome {
        dagl,
        fgsal,
        gpcr: gpcr.value,
        empty_sets: gpcr.empty_sets,
        terms: gpcr.terms,
    })
}

/// Everything a run produces; serializes to the JSON history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineHistory {
    pub config: PipelineConfig,
    pub epochs: Vec<EpochReport>,
    /// Infrared queries against the visible gallery, plain cosine.
    pub retrieval: Option<EvalReport>,
    /// Same, after propagation with `k_te` neighbors.
    pub retrieval_cmfp: Option<EvalReport>,
}

impl PipelineHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Infrared-to-visible retrieval without and with propagation.
pub fn evaluate_retrieval(set: &EmbeddingSet, k_te: usize) -> Result<Option<(EvalReport, EvalReport)>> {
    if set.identity().iter().any(Option::is_none) {
        return Ok(None);
    }
    let set = if set.is_normalized() { set.clone() } else { l2_normalize(set)? };
    let (Some((gallery, _)), Some((query, _))) = (set.split_modality(Modality::Visible), set.split_modality(Modality::Infrared)) else {
        return Ok(None);
    };
    let ids = |s: &EmbeddingSet| s.identity_codes();
    let before = rank_metrics(&query, &gallery, &ids(&query), &ids(&gallery))?.without_details();
    let (pq, pg) = cmfp_rerank(&query, &gallery, k_te)?;
    let after = rank_metrics(&pq, &pg, &ids(&pq), &ids(&pg))?.without_details();
    Ok(Some((before, after)))
}

/// Loads or generates the input, runs `epochs` epochs, and evaluates.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineHistory> {
    cfg.validate()?;
    let input = cfg.load_input()?;
    let maps = cfg.load_maps()?;
    run_pipeline_with(&input, maps.as_ref(), cfg)
}

pub fn run_pipeline_on(input: &EmbeddingSet, cfg: &PipelineConfig) -> Result<PipelineHistory> {
    run_pipeline_with(input, None, cfg)
}

fn run_pipeline_with(input: &EmbeddingSet, maps: Option<&Array2<f64>>, cfg: &PipelineConfig) -> Result<PipelineHistory> {
    let mut state = PipelineState::with_maps(input, maps, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let report = run_epoch(&mut state, cfg)?;
        log::info!(
            "epoch {}: total {:.4}, association {:?}, cross cosine {:?}",
            report.epoch,
            report.losses.total,
            report.association_accuracy,
            report.cross_modality_cosine
        );
        epochs.push(report);
    }
    let retrieval = evaluate_retrieval(&state.embeddings(), cfg.k_te)?;
    let (retrieval, retrieval_cmfp) = match retrieval {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    Ok(PipelineHistory {
        config: cfg.clone(),
        epochs,
        retrieval,
        retrieval_cmfp,
    })
}
