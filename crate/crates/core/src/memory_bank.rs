//! Prototype memories with momentum updates, and the softmax-over-prototypes
//! contrastive losses evaluated against them.
//!
//! One [`MemoryBank`] type covers both cluster-level banks (one row per
//! pseudo-label) and instance-level banks (one row per training instance).
//! Every loss in the framework, including the part-level and cross-modality
//! terms, is an [`infonce_loss`] or [`multi_positive_loss`] call with the right
//! bank and label.
//!
//! Within a mini-batch all losses are evaluated first and momentum updates are
//! applied afterwards; the bank is never mutated mid-evaluation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clustering::CentroidSet;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dot_f64, log_sum_exp, normalize_f64, row_slice};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankLevel {
    Cluster,
    Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    prototypes: Array2<f64>,
    momentum: f64,
    temperature: f64,
    level: BankLevel,
}

impl MemoryBank {
    /// Rows are L2-normalized on construction; zero rows are rejected.
    pub fn new(
        mut prototypes: Array2<f64>,
        momentum: f64,
        temperature: f64,
        level: BankLevel,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if prototypes.nrows() == 0 || prototypes.ncols() == 0 {
            return Err(Error::Empty("memory bank"));
        }
        prototypes = prototypes.as_standard_layout().into_owned();
        for (row, mut r) in prototypes.outer_iter_mut().enumerate() {
            let s = r.as_slice_mut().expect("standard layout");
            if !normalize_f64(s) {
                return Err(Error::ZeroNorm { row });
            }
        }
        Ok(Self {
            prototypes,
            momentum,
            temperature,
            level,
        })
    }

    pub fn from_centroids(c: &CentroidSet, momentum: f64, temperature: f64) -> Result<Self> {
        Self::new(c.centroids.clone(), momentum, temperature, BankLevel::Cluster)
    }

    pub fn from_embeddings(set: &EmbeddingSet, momentum: f64, temperature: f64) -> Result<Self> {
        Self::new(set.features().mapv(f64::from), momentum, temperature, BankLevel::Instance)
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        row_slice(&self.prototypes, i)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn level(&self) -> BankLevel {
        self.level
    }

    /// `M[label] <- mu * M[label] + (1 - mu) * feature`, then re-normalized.
    pub fn momentum_update(&mut self, label: usize, feature: &[f64]) -> Result<()> {
        self.check_label(label)?;
        self.check_dim(feature)?;
        let mu = self.momentum;
        let mut row = self.prototypes.row_mut(label);
        let s = row.as_slice_mut().expect("standard layout");
        let old = s.to_vec();
        for (m, &f) in s.iter_mut().zip(feature) {
            *m = mu * *m + (1.0 - mu) * f;
        }
        // Exactly opposite old and new vectors cancel; keep the old row then.
        if !normalize_f64(s) {
            log::warn!("momentum update cancelled prototype {label}; leaving it unchanged");
            s.copy_from_slice(&old);
        }
        Ok(())
    }

    /// Scaled similarities `M[j] . f / tau` for every row.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|j| dot_f64(self.row(j), feature) / self.temperature)
            .collect()
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.len() {
            return Err(Error::LabelOutOfRange {
                label,
                k: self.len(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: feature.len(),
            });
        }
        Ok(())
    }
}

/// `-log softmax(M f / tau)[label]`.
pub fn infonce_loss(bank: &MemoryBank, feature: &[f64], label: usize) -> Result<f64> {
    bank.check_label(label)?;
    bank.check_dim(feature)?;
    let logits = bank.logits(feature);
    let lse = log_sum_exp(logits.iter().copied());
    // Clamp the rounding residue so a single-class bank gives exactly 0.
    Ok((lse - logits[label]).max(0.0))
}

/// Gradient of [`infonce_loss`] with respect to the feature:
/// `(sum_j p_j M[j] - M[label]) / tau`.
pub fn infonce_grad(bank: &MemoryBank, feature: &[f64], label: usize) -> Result<Vec<f64>> {
    bank.check_label(label)?;
    bank.check_dim(feature)?;
    let p = softmax(&bank.logits(feature));
    let mut grad = vec![0.0f64; bank.dim()];
    for (j, &pj) in p.iter().enumerate() {
        let w = if j == label { pj - 1.0 } else { pj };
        if w == 0.0 {
            continue;
        }
        for (g, &m) in grad.iter_mut().zip(bank.row(j)) {
            *g += w * m;
        }
    }
    let inv_tau = 1.0 / bank.temperature;
    grad.iter_mut().for_each(|g| *g *= inv_tau);
    Ok(grad)
}

/// `-log( sum_{i in P} exp(M[i] f / tau) / sum_j exp(M[j] f / tau) )`.
///
/// Duplicate indices in `positives` are counted once.
pub fn multi_positive_loss(bank: &MemoryBank, feature: &[f64], positives: &[usize]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    bank.check_dim(feature)?;
    let mut in_set = vec![false; bank.len()];
    for &i in positives {
        bank.check_label(i)?;
        in_set[i] = true;
    }
    let logits = bank.logits(feature);
    let all = log_sum_exp(logits.iter().copied());
    let pos = log_sum_exp(
        logits
            .iter()
            .zip(&in_set)
            .filter(|(_, &keep)| keep)
            .map(|(&l, _)| l),
    );
    Ok((all - pos).max(0.0))
}

/// Arithmetic mean of per-sample InfoNCE terms.
pub fn batch_infonce_loss(bank: &MemoryBank, samples: &[(&[f64], usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(f, l) in samples {
        total += infonce_loss(bank, f, l)?;
    }
    Ok(total / samples.len() as f64)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize_f64(&mut v);
        v
    }

    fn random_bank(rng: &mut ChaCha8Rng, k: usize, d: usize, tau: f64) -> MemoryBank {
        let m = Array2::from_shape_fn((k, d), |_| rng.sample::<f64, _>(StandardNormal));
        MemoryBank::new(m, DEFAULT_MOMENTUM, tau, BankLevel::Cluster).unwrap()
    }

    /// Direct evaluation without max subtraction.
    fn naive_multi(bank: &MemoryBank, f: &[f64], pos: &[usize]) -> f64 {
        let e: Vec<f64> = (0..bank.len())
            .map(|j| {
                let s: f64 = (0..bank.dim()).map(|t| bank.prototypes()[[j, t]] * f[t]).sum();
                (s / bank.temperature()).exp()
            })
            .collect();
        let num: f64 = pos.iter().map(|&i| e[i]).sum();
        let den: f64 = e.iter().sum();
        -(num / den).ln()
    }

    #[test]
    fn momentum_degenerate_cases() {
        let mut keep = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 1.0, 0.05, BankLevel::Cluster).unwrap();
        keep.momentum_update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(keep.row(0), &[1.0, 0.0]);
        let mut replace = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 0.0, 0.05, BankLevel::Cluster).unwrap();
        replace.momentum_update(0, &[0.6, 0.8]).unwrap();
        assert!((replace.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((replace.row(0)[1] - 0.8).abs() < 1e-12);
        assert_eq!(replace.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn momentum_point_one() {
        let mut bank = MemoryBank::new(array![[1.0, 0.0]], 0.1, 0.05, BankLevel::Cluster).unwrap();
        bank.momentum_update(0, &[0.0, 1.0]).unwrap();
        let n = (0.1f64 * 0.1 + 0.9 * 0.9).sqrt();
        assert!((bank.row(0)[0] - 0.1 / n).abs() < 1e-12);
        assert!((bank.row(0)[1] - 0.9 / n).abs() < 1e-12);
        assert!((bank.row(0)[0] - 0.1104).abs() < 5e-5);
        assert!((bank.row(0)[1] - 0.9939).abs() < 5e-5);
    }

    #[test]
    fn momentum_label_out_of_range() {
        let mut bank = MemoryBank::new(array![[1.0, 0.0]], 0.1, 0.05, BankLevel::Cluster).unwrap();
        assert!(matches!(bank.momentum_update(1, &[1.0, 0.0]), Err(Error::LabelOutOfRange { label: 1, k: 1 })));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let bank = MemoryBank::new(array![[0.3, 0.4]], 0.1, 0.05, BankLevel::Cluster).unwrap();
        assert_eq!(infonce_loss(&bank, &[1.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(infonce_grad(&bank, &[1.0, 0.0], 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn orthonormal_pair_loss() {
        let bank = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 0.1, 0.05, BankLevel::Cluster).unwrap();
        let loss = infonce_loss(&bank, &[1.0, 0.0], 0).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let bank = random_bank(&mut rng, 10, 16, 0.05);
            let f = random_unit(&mut rng, 16);
            let label = rng.random_range(0..10);
            let got = infonce_loss(&bank, &f, label).unwrap();
            assert!((got - naive_multi(&bank, &f, &[label])).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_gradient() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let bank = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 0.1, 0.5, BankLevel::Cluster).unwrap();
        let g = infonce_grad(&bank, &[h, h], 1).unwrap();
        // (0.5*M0 + 0.5*M1 - M1) / tau
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_positive_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = random_bank(&mut rng, 6, 5, 0.05);
        let f = random_unit(&mut rng, 5);
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(multi_positive_loss(&bank, &f, &all).unwrap(), 0.0);
        for l in 0..6 {
            let a = multi_positive_loss(&bank, &f, &[l]).unwrap();
            let b = infonce_loss(&bank, &f, l).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(multi_positive_loss(&bank, &f, &[]), Err(Error::EmptyPositiveSet)));
        assert!(multi_positive_loss(&bank, &f, &[6]).is_err());
    }

    #[test]
    fn multi_positive_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let bank = random_bank(&mut rng, 20, 12, 0.05);
            let f = random_unit(&mut rng, 12);
            let mut pos: Vec<usize> = (0..20).collect();
            for i in (1..20).rev() {
                pos.swap(i, rng.random_range(0..=i));
            }
            pos.truncate(5);
            let got = multi_positive_loss(&bank, &f, &pos).unwrap();
            assert!((got - naive_multi(&bank, &f, &pos)).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &tau in &[0.05, 0.5, 1.0] {
            for _ in 0..100 {
                let k = rng.random_range(2..12);
                let d = rng.random_range(2..16);
                let bank = random_bank(&mut rng, k, d, tau);
                let f = random_unit(&mut rng, d);
                let label = rng.random_range(0..k);
                let g = infonce_grad(&bank, &f, label).unwrap();
                let h = 1e-4;
                let fd: Vec<f64> = (0..d)
                    .map(|t| {
                        let mut up = f.clone();
                        let mut dn = f.clone();
                        up[t] += h;
                        dn[t] -= h;
                        (infonce_loss(&bank, &up, label).unwrap() - infonce_loss(&bank, &dn, label).unwrap()) / (2.0 * h)
                    })
                    .collect();
                let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
                assert!(diff / scale < 1e-4 || diff < 1e-9, "tau {tau}: rel err {}", diff / scale);
            }
        }
    }

    #[test]
    fn batch_mean() {
        let bank = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 0.1, 0.05, BankLevel::Cluster).unwrap();
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let mean = batch_infonce_loss(&bank, &[(&a, 0), (&b, 0)]).unwrap();
        let expected = (infonce_loss(&bank, &a, 0).unwrap() + infonce_loss(&bank, &b, 0).unwrap()) / 2.0;
        assert!((mean - expected).abs() < 1e-15);
        assert_eq!(batch_infonce_loss(&bank, &[]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_superset_monotone(seed in 0u64..500, k in 2usize..15, cut in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng, k, 6, 0.05);
            let f = random_unit(&mut rng, 6);
            let cut = cut.min(k);
            let small: Vec<usize> = (0..cut).collect();
            let big: Vec<usize> = (0..k).collect();
            let ls = multi_positive_loss(&bank, &f, &small).unwrap();
            let lb = multi_positive_loss(&bank, &f, &big).unwrap();
            prop_assert!(ls >= 0.0);
            prop_assert!(lb <= ls + 1e-12);
            prop_assert!(infonce_loss(&bank, &f, 0).unwrap() >= 0.0);
        }

        #[test]
        fn momentum_keeps_unit_rows(seed in 0u64..500, mu in 0.0f64..1.0, steps in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = random_bank(&mut rng, 4, 8, 0.05);
            bank.momentum = mu;
            for _ in 0..steps {
                let f = random_unit(&mut rng, 8);
                let l = rng.random_range(0..4);
                bank.momentum_update(l, &f).unwrap();
            }
            for j in 0..4 {
                let n = dot_f64(bank.row(j), bank.row(j)).sqrt();
                prop_assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }
}
