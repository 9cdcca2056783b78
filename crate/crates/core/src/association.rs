//! Bi-directional optimal-transport label association.
//!
//! Instances of one modality are assigned cluster labels of the other by
//! solving an entropic transport problem between N instances (row mass 1/N)
//! and K prototypes (column mass 1/K) with Sinkhorn-Knopp scaling, then taking
//! the per-row argmax of the plan. Running it both ways gives every instance a
//! label in each modality's label space.
//!
//! The kernel is `exp(-lambda_ot * cost)`. Scaling runs in linear space when
//! every kernel entry is a normal float and switches to log-domain scaling
//! otherwise.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{squared_distance_from_cosine, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{dot_mixed, log_sum_exp, row_slice};

pub const DEFAULT_LAMBDA_OT: f64 = 5.0;
pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Squared Euclidean distances between N instances and K prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub cost: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `max(row residual, column residual)` after each iteration.
    pub residuals: Vec<f64>,
    pub log_domain: bool,
}

impl TransportPlan {
    /// ∞-norm deviations of row sums from 1/N and column sums from 1/K.
    pub fn marginal_residuals(&self) -> (f64, f64) {
        marginal_residuals(&self.plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub lambda_ot: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// When false, an underflowing kernel row/column is an error instead of
    /// triggering log-domain scaling.
    pub log_domain_fallback: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            lambda_ot: DEFAULT_LAMBDA_OT,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOLERANCE,
            log_domain_fallback: true,
        }
    }
}

impl SinkhornOptions {
    pub fn with_lambda(lambda_ot: f64) -> Self {
        Self {
            lambda_ot,
            ..Self::default()
        }
    }
}

/// `cost[i][j] = 2 - 2 cos(f_i, M_j)`, the squared distance between unit vectors.
pub fn cost_matrix(instances: &EmbeddingSet, prototypes: &Array2<f64>) -> Result<CostMatrix> {
    if instances.dim() != prototypes.ncols() {
        return Err(Error::DimensionMismatch {
            expected: instances.dim(),
            found: prototypes.ncols(),
        });
    }
    if !instances.is_normalized() {
        return Err(Error::NotNormalized("cost_matrix"));
    }
    if prototypes.nrows() == 0 {
        return Err(Error::Empty("no prototypes"));
    }
    let prototypes = prototypes.as_standard_layout();
    let (n, k) = (instances.len(), prototypes.nrows());
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let f = instances.row(i);
            let protos = &prototypes;
            (0..k).map(move |j| {
                let p = protos.row(j);
                squared_distance_from_cosine(dot_mixed(f, p.as_slice().expect("standard layout")))
            })
        })
        .collect();
    Ok(CostMatrix {
        cost: Array2::from_shape_vec((n, k), data).expect("shape matches"),
    })
}

/// Entropic OT with uniform marginals `1/N` (rows) and `1/K` (columns).
pub fn sinkhorn(cost: &CostMatrix, opts: &SinkhornOptions) -> Result<TransportPlan> {
    let c = cost.cost.as_standard_layout().into_owned();
    let (n, k) = c.dim();
    if n == 0 || k == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if !(opts.lambda_ot > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda_ot must be > 0, got {}",
            opts.lambda_ot
        )));
    }
    if opts.max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
    }
    if let Some(pos) = c.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "cost entry ({}, {}) is negative or non-finite",
            pos / k,
            pos % k
        )));
    }

    let kernel = c.mapv(|v| (-opts.lambda_ot * v).exp());
    let underflow = kernel.iter().any(|&v| !v.is_normal());
    if underflow {
        if opts.log_domain_fallback {
            log::debug!("sinkhorn kernel underflows at lambda_ot={}; using log domain", opts.lambda_ot);
            return Ok(sinkhorn_log(&c, opts));
        }
        if let Some(i) = (0..n).find(|&i| kernel.row(i).iter().all(|&v| v == 0.0)) {
            return Err(Error::KernelUnderflow { axis: "row", index: i });
        }
        if let Some(j) = (0..k).find(|&j| kernel.column(j).iter().all(|&v| v == 0.0)) {
            return Err(Error::KernelUnderflow { axis: "column", index: j });
        }
    }
    Ok(sinkhorn_linear(&kernel, opts))
}

fn sinkhorn_linear(kernel: &Array2<f64>, opts: &SinkhornOptions) -> TransportPlan {
    let (n, k) = kernel.dim();
    let (a, b) = (1.0 / n as f64, 1.0 / k as f64);
    let mut u = vec![1.0f64; n];
    let mut v = vec![1.0f64; k];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        // Row scaling.
        u.par_iter_mut().enumerate().for_each(|(i, ui)| {
            let s: f64 = row_slice(kernel, i).iter().zip(&v).map(|(kij, vj)| kij * vj).sum();
            *ui = a / s;
        });
        // Column scaling: accumulate K^T u row by row to keep the summation order fixed.
        let mut ktu = vec![0.0f64; k];
        for (i, &ui) in u.iter().enumerate() {
            for (acc, &kij) in ktu.iter_mut().zip(row_slice(kernel, i)) {
                *acc += kij * ui;
            }
        }
        for (vj, s) in v.iter_mut().zip(&ktu) {
            *vj = b / s;
        }
        let plan = scaled_plan(kernel, &u, &v);
        let (r, c) = marginal_residuals(&plan);
        let res = r.max(c);
        residuals.push(res);
        if res <= opts.tol {
            converged = true;
            break;
        }
    }
    let plan = scaled_plan(kernel, &u, &v);
    if !converged {
        log::warn!(
            "sinkhorn did not reach tol {} in {} iterations (residual {:.3e})",
            opts.tol,
            opts.max_iters,
            residuals.last().copied().unwrap_or(f64::NAN)
        );
    }
    TransportPlan {
        plan,
        converged,
        iterations,
        residuals,
        log_domain: false,
    }
}

fn scaled_plan(kernel: &Array2<f64>, u: &[f64], v: &[f64]) -> Array2<f64> {
    let mut plan = kernel.clone();
    for (i, mut row) in plan.outer_iter_mut().enumerate() {
        for (p, &vj) in row.iter_mut().zip(v) {
            *p *= u[i] * vj;
        }
    }
    plan
}

fn sinkhorn_log(cost: &Array2<f64>, opts: &SinkhornOptions) -> TransportPlan {
    let (n, k) = cost.dim();
    let (log_a, log_b) = (-(n as f64).ln(), -(k as f64).ln());
    let logk = cost.mapv(|v| -opts.lambda_ot * v);
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; k];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((n, k), |(i, j)| (logk[[i, j]] + f[i] + g[j]).exp())
    };

    for _ in 0..opts.max_iters {
        iterations += 1;
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            *fi = log_a - log_sum_exp((0..k).map(|j| logk[[i, j]] + g[j]));
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            *gj = log_b - log_sum_exp((0..n).map(|i| logk[[i, j]] + f[i]));
        });
        let (r, c) = marginal_residuals(&plan_of(&f, &g));
        let res = r.max(c);
        residuals.push(res);
        if res <= opts.tol {
            converged = true;
            break;
        }
    }
    TransportPlan {
        plan: plan_of(&f, &g),
        converged,
        iterations,
        residuals,
        log_domain: true,
    }
}

fn marginal_residuals(plan: &Array2<f64>) -> (f64, f64) {
    let (n, k) = plan.dim();
    let (a, b) = (1.0 / n as f64, 1.0 / k as f64);
    let row = plan
        .outer_iter()
        .map(|r| (r.sum() - a).abs())
        .fold(0.0, f64::max);
    let mut col_sums = vec![0.0f64; k];
    for r in plan.outer_iter() {
        for (s, &p) in col_sums.iter_mut().zip(r.iter()) {
            *s += p;
        }
    }
    let col = col_sums.iter().map(|s| (s - b).abs()).fold(0.0, f64::max);
    (row, col)
}

/// Per-row argmax of the plan; ties go to the lowest column.
pub fn assign_labels(plan: &TransportPlan) -> Vec<usize> {
    plan.plan
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Cross-modality labels for both modalities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualLabels {
    /// Infrared cluster assigned to each visible instance.
    pub visible_to_infrared: Vec<usize>,
    /// Visible cluster assigned to each infrared instance.
    pub infrared_to_visible: Vec<usize>,
}

/// Runs cost, Sinkhorn and argmax in both directions.
pub fn dual_associate(
    visible: &EmbeddingSet,
    infrared: &EmbeddingSet,
    visible_prototypes: &Array2<f64>,
    infrared_prototypes: &Array2<f64>,
    opts: &SinkhornOptions,
) -> Result<DualLabels> {
    let inf_cost = cost_matrix(infrared, visible_prototypes)?;
    let inf_plan = sinkhorn(&inf_cost, opts)?;
    let vis_cost = cost_matrix(visible, infrared_prototypes)?;
    let vis_plan = sinkhorn(&vis_cost, opts)?;
    Ok(DualLabels {
        visible_to_infrared: assign_labels(&vis_plan),
        infrared_to_visible: assign_labels(&inf_plan),
    })
}
