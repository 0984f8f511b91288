//! Posterior functionals: prediction of `h` at new exposure rows, index-wise
//! and component-wise exposure-response curves, weight summaries on all
//! three scales, and K-fold cross-validated prediction error.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{BmimError, Result};
use crate::kernels::{cross_kernel, KernelFactor, KernelSpec};
use crate::linalg::{sample_mvn_zero, CovFactor};
use crate::model::{decompose_weights, Dataset};
use crate::sampler::{run_mcmc, Draw, McmcConfig, ModelSpec, PosteriorSamples};
use crate::stats::{mean, quantile, quantile_sorted};

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_GRID_POINTS: usize = 25;
pub const DEFAULT_INDEX_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub enum PredictionMode {
    /// `h` at new exposure rows given on the standardized scale (`n_new x P`).
    Holdout { x_new: DMatrix<f64> },
    /// `h` along index `index` at the given quantiles of its posterior-mean
    /// values, other indices at their medians. With `reference`, values are
    /// contrasts against the curve at that quantile. `condition` holds one
    /// other index at a given quantile instead of its median.
    Indexwise {
        index: usize,
        quantiles: Vec<f64>,
        reference: Option<f64>,
        condition: Option<(usize, f64)>,
        propagate_weights: bool,
    },
    /// `h` as exposure column `exposure` varies over `grid` (standardized
    /// units; defaults to equally spaced points between its quartiles),
    /// other exposures at their medians.
    Componentwise { exposure: usize, grid: Option<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub mode: PredictionMode,
    pub level: f64,
    /// Seed for the conditional draws used to build intervals.
    pub seed: u64,
}

impl PredictionRequest {
    pub fn holdout(x_new: DMatrix<f64>) -> Self {
        Self::with_mode(PredictionMode::Holdout { x_new })
    }

    pub fn indexwise(index: usize) -> Self {
        Self::with_mode(PredictionMode::Indexwise {
            index,
            quantiles: DEFAULT_INDEX_QUANTILES.to_vec(),
            reference: None,
            condition: None,
            propagate_weights: false,
        })
    }

    pub fn componentwise(exposure: usize) -> Self {
        Self::with_mode(PredictionMode::Componentwise { exposure, grid: None })
    }

    fn with_mode(mode: PredictionMode) -> Self {
        PredictionRequest {
            mode,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn validate(&self, dataset: &Dataset, samples: &PosteriorSamples) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(BmimError::Request(format!("interval level {} outside (0, 1)", self.level)));
        }
        let in_unit = |q: f64| q > 0.0 && q < 1.0;
        let m = samples.n_indices();
        match &self.mode {
            PredictionMode::Holdout { x_new } => {
                if x_new.ncols() != dataset.n_exposures() {
                    return Err(BmimError::Request(format!(
                        "new exposures have {} columns, expected {}",
                        x_new.ncols(),
                        dataset.n_exposures()
                    )));
                }
                if x_new.iter().any(|v| !v.is_finite()) {
                    return Err(BmimError::Request("new exposures contain non-finite values".into()));
                }
            }
            PredictionMode::Indexwise {
                index,
                quantiles,
                reference,
                condition,
                ..
            } => {
                if *index >= m {
                    return Err(BmimError::Request(format!("index {} out of range (M = {m})", index + 1)));
                }
                if quantiles.is_empty()
                    || !quantiles.iter().all(|&q| in_unit(q))
                    || !reference.is_none_or(in_unit)
                {
                    return Err(BmimError::Request("quantiles must lie in (0, 1)".into()));
                }
                if let Some((c, q)) = condition {
                    if *c >= m || c == index || !in_unit(*q) {
                        return Err(BmimError::Request("invalid conditioning index or quantile".into()));
                    }
                }
            }
            PredictionMode::Componentwise { exposure, grid } => {
                if *exposure >= dataset.n_exposures() {
                    return Err(BmimError::Request(format!("exposure {} out of range", exposure + 1)));
                }
                if !samples.columns.iter().any(|c| c.contains(exposure)) {
                    return Err(BmimError::Request(format!(
                        "exposure {} belongs to no index",
                        exposure + 1
                    )));
                }
                if grid.as_ref().is_some_and(|g| g.is_empty() || g.iter().any(|v| !v.is_finite())) {
                    return Err(BmimError::Request("grid must be finite and nonempty".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveEstimate {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Grid value the curve is centred on, if any.
    pub reference: Option<f64>,
}

/// Index values `E` (`rows x M`) of exposure rows under the given weights.
pub fn index_values(x: &DMatrix<f64>, columns: &[Vec<usize>], theta_star: &[Vec<f64>]) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(x.nrows(), columns.len());
    for (m, (cols, t)) in columns.iter().zip(theta_star).enumerate() {
        for (&c, &w) in cols.iter().zip(t) {
            if w != 0.0 {
                for i in 0..x.nrows() {
                    e[(i, m)] += x[(i, c)] * w;
                }
            }
        }
    }
    e
}

/// Posterior mean weights of every index.
pub fn posterior_mean_weights(samples: &PosteriorSamples) -> Vec<Vec<f64>> {
    let n = samples.len() as f64;
    let mut out: Vec<Vec<f64>> = samples.columns.iter().map(|c| vec![0.0; c.len()]).collect();
    for d in &samples.draws {
        for (acc, t) in out.iter_mut().zip(&d.theta_star) {
            for (a, v) in acc.iter_mut().zip(t) {
                *a += v / n;
            }
        }
    }
    out
}

/// Conditional mean of `h` at `e_new` and, when `normals` is given, one draw
/// from the conditional distribution (joint when `joint`, otherwise
/// independent per point with the marginal variances).
fn conditional(
    dataset: &Dataset,
    draw: &Draw,
    kernel: &KernelSpec,
    e_train: &DMatrix<f64>,
    e_new: &DMatrix<f64>,
    normals: &DVector<f64>,
    joint: bool,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = dataset.n();
    let tau = 1.0 / draw.lambda;
    let max_rank = if n >= 40 { n / 4 } else { 0 };
    let kf = KernelFactor::new(e_train, kernel, max_rank)?;
    let cov = CovFactor::new(&kf, tau, kernel.jitter)?;
    let gamma = DVector::from_column_slice(&draw.gamma);
    let resid = &dataset.y - &dataset.z * gamma;
    let k_nt = cross_kernel(e_new, e_train, kernel)?;
    let alpha = cov.solve(&resid);
    let mean = &k_nt * alpha * tau;
    let solved = cov.solve_mat(&k_nt.transpose());
    let s2 = draw.sigma2;
    let sample = if joint {
        let k_nn = cross_kernel(e_new, e_new, kernel)?;
        let mut c = (k_nn * tau - &k_nt * &solved * (tau * tau)) * s2;
        c = (&c + c.transpose()) * 0.5;
        &mean + sample_mvn_zero(&c, normals)?
    } else {
        DVector::from_fn(e_new.nrows(), |i, _| {
            let row = e_new.row(i);
            let knn = kernel_self(&row.iter().copied().collect::<Vec<_>>(), kernel);
            let reduce = k_nt.row(i).dot(&solved.column(i).transpose());
            let var = (s2 * (tau * knn - tau * tau * reduce)).max(0.0);
            mean[i] + var.sqrt() * normals[i]
        })
    };
    Ok((mean, sample))
}

fn kernel_self(e: &[f64], kernel: &KernelSpec) -> f64 {
    crate::kernels::kernel_value(e, e, kernel).unwrap_or(f64::NAN)
}

/// Removes duplicate rows; returns the unique rows and the map from each
/// original row to its unique row.
fn dedupe_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let mut uniq: Vec<Vec<f64>> = Vec::new();
    let mut map = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        match uniq.iter().position(|u| u.iter().zip(&row).all(|(a, b)| a.to_bits() == b.to_bits())) {
            Some(k) => map.push(k),
            None => {
                map.push(uniq.len());
                uniq.push(row);
            }
        }
    }
    let cols = m.ncols();
    let out = DMatrix::from_fn(uniq.len(), cols, |i, j| uniq[i][j]);
    (out, map)
}

/// Per-draw index matrices for the training rows and the new points.
type IndexBuilder<'a> = dyn Fn(&Draw) -> (DMatrix<f64>, DMatrix<f64>) + Sync + 'a;

fn summarize_draws(
    dataset: &Dataset,
    samples: &PosteriorSamples,
    build: &IndexBuilder<'_>,
    reference_row: Option<usize>,
    level: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let per_draw: Vec<Result<(DVector<f64>, DVector<f64>)>> = samples
        .draws
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let (e_train, e_new) = build(d);
            let (uniq, map) = dedupe_rows(&e_new);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let normals = DVector::from_fn(uniq.nrows(), |_, _| StandardNormal.sample(&mut rng));
            let joint = reference_row.is_some();
            let (mu, draw) = conditional(dataset, d, &samples.kernel, &e_train, &uniq, &normals, joint)?;
            let mut mean = DVector::from_fn(map.len(), |i, _| mu[map[i]]);
            let mut sample = DVector::from_fn(map.len(), |i, _| draw[map[i]]);
            if let Some(r) = reference_row {
                let (m0, s0) = (mean[r], sample[r]);
                mean.add_scalar_mut(-m0);
                sample.add_scalar_mut(-s0);
            }
            Ok((mean, sample))
        })
        .collect();
    let mut means = Vec::with_capacity(per_draw.len());
    let mut draws = Vec::with_capacity(per_draw.len());
    for r in per_draw {
        let (m, s) = r?;
        means.push(m);
        draws.push(s);
    }
    let g = means[0].len();
    let tail = 0.5 * (1.0 - level);
    let mut mean_out = Vec::with_capacity(g);
    let mut lo = Vec::with_capacity(g);
    let mut hi = Vec::with_capacity(g);
    for i in 0..g {
        let m = mean(&means.iter().map(|v| v[i]).collect::<Vec<_>>());
        let mut col: Vec<f64> = draws.iter().map(|v| v[i]).collect();
        col.sort_by(f64::total_cmp);
        // intervals come from conditional draws, the point estimate from
        // conditional means, so the two can disagree slightly at the edges
        lo.push(quantile_sorted(&col, tail).min(m));
        hi.push(quantile_sorted(&col, 1.0 - tail).max(m));
        mean_out.push(m);
    }
    Ok((mean_out, lo, hi))
}

/// Pointwise posterior summaries of `h` for the requested points.
pub fn predict_h(samples: &PosteriorSamples, dataset: &Dataset, request: &PredictionRequest) -> Result<CurveEstimate> {
    if samples.is_empty() {
        return Err(BmimError::Request("no posterior draws".into()));
    }
    request.validate(dataset, samples)?;
    let cols = &samples.columns;
    let x = &dataset.x;
    match &request.mode {
        PredictionMode::Holdout { x_new } => {
            let build = |d: &Draw| (index_values(x, cols, &d.theta_star), index_values(x_new, cols, &d.theta_star));
            let (mean, lo, hi) = summarize_draws(dataset, samples, &build, None, request.level, request.seed)?;
            Ok(CurveEstimate {
                grid: (1..=x_new.nrows()).map(|i| i as f64).collect(),
                mean,
                lo,
                hi,
                reference: None,
            })
        }
        PredictionMode::Componentwise { exposure, grid } => {
            let p = *exposure;
            let column: Vec<f64> = x.column(p).iter().copied().collect();
            let grid = grid.clone().unwrap_or_else(|| quartile_grid(&column, DEFAULT_GRID_POINTS));
            let medians: Vec<f64> = (0..x.ncols())
                .map(|j| crate::stats::median(&x.column(j).iter().copied().collect::<Vec<_>>()))
                .collect();
            let x_new = DMatrix::from_fn(grid.len(), x.ncols(), |i, j| if j == p { grid[i] } else { medians[j] });
            let build = |d: &Draw| (index_values(x, cols, &d.theta_star), index_values(&x_new, cols, &d.theta_star));
            let (mean, lo, hi) = summarize_draws(dataset, samples, &build, None, request.level, request.seed)?;
            Ok(CurveEstimate {
                grid,
                mean,
                lo,
                hi,
                reference: None,
            })
        }
        PredictionMode::Indexwise {
            index,
            quantiles,
            reference,
            condition,
            propagate_weights,
        } => {
            let m_sel = *index;
            let fixed = posterior_mean_weights(samples);
            let e_fixed = index_values(x, cols, &fixed);
            let mut qs = quantiles.clone();
            let ref_row = reference.map(|r| {
                qs.push(r);
                qs.len() - 1
            });
            let points = |e_train: &DMatrix<f64>| -> DMatrix<f64> {
                let at = |m: usize, q: f64| quantile(&e_train.column(m).iter().copied().collect::<Vec<_>>(), q);
                let others: Vec<f64> = (0..e_train.ncols())
                    .map(|m| match condition {
                        Some((c, q)) if *c == m => at(m, *q),
                        _ => at(m, 0.5),
                    })
                    .collect();
                DMatrix::from_fn(qs.len(), e_train.ncols(), |i, m| if m == m_sel { at(m, qs[i]) } else { others[m] })
            };
            let build = |d: &Draw| {
                if *propagate_weights {
                    let e = index_values(x, cols, &d.theta_star);
                    let p = points(&e);
                    (e, p)
                } else {
                    (e_fixed.clone(), points(&e_fixed))
                }
            };
            let (mut mean, mut lo, mut hi) =
                summarize_draws(dataset, samples, &build, ref_row, request.level, request.seed)?;
            let e_col: Vec<f64> = e_fixed.column(m_sel).iter().copied().collect();
            let mut grid: Vec<f64> = qs.iter().map(|&q| quantile(&e_col, q)).collect();
            let reference_value = ref_row.map(|r| grid[r]);
            if ref_row.is_some() {
                grid.pop();
                mean.pop();
                lo.pop();
                hi.pop();
            }
            Ok(CurveEstimate {
                grid,
                mean,
                lo,
                hi,
                reference: reference_value,
            })
        }
    }
}

/// `points` equally spaced values between the 25th and 75th percentiles.
pub fn quartile_grid(values: &[f64], points: usize) -> Vec<f64> {
    let lo = quantile(values, 0.25);
    let hi = quantile(values, 0.75);
    if points == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Posterior summary of one scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub lo: f64,
    pub median: f64,
    pub hi: f64,
}

impl Summary {
    pub fn from_values(values: &[f64], level: f64) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let tail = 0.5 * (1.0 - level);
        Some(Summary {
            mean: mean(&v),
            lo: quantile_sorted(&v, tail),
            median: quantile_sorted(&v, 0.5),
            hi: quantile_sorted(&v, 1.0 - tail),
        })
    }
}

/// Posterior summaries of one exposure's weight within its index.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSummary {
    pub index: usize,
    pub index_name: String,
    pub component: usize,
    /// Exposure column of the component.
    pub exposure: usize,
    pub theta_star: Summary,
    /// Unit-norm weight, over draws where it is defined.
    pub theta: Option<Summary>,
    pub theta_defined: f64,
    /// Proportion weight, over draws where it is defined.
    pub w: Option<Summary>,
    pub w_defined: f64,
    /// Fraction of draws in which the exposure's weight is nonzero.
    pub pip: f64,
}

pub fn summarize_weights(samples: &PosteriorSamples) -> Vec<ComponentSummary> {
    summarize_weights_at(samples, DEFAULT_LEVEL)
}

pub fn summarize_weights_at(samples: &PosteriorSamples, level: f64) -> Vec<ComponentSummary> {
    let mut out = Vec::new();
    let n = samples.len() as f64;
    for (m, cols) in samples.columns.iter().enumerate() {
        let decomp: Vec<_> = samples.draws.iter().map(|d| decompose_weights(&d.theta_star[m])).collect();
        for (l, &col) in cols.iter().enumerate() {
            let ts: Vec<f64> = samples.draws.iter().map(|d| d.theta_star[m][l]).collect();
            let th: Vec<f64> = decomp.iter().filter_map(|w| w.theta.as_ref().map(|t| t[l])).collect();
            let ws: Vec<f64> = decomp.iter().filter_map(|w| w.w.as_ref().map(|t| t[l])).collect();
            let Some(ts_summary) = Summary::from_values(&ts, level) else {
                continue;
            };
            out.push(ComponentSummary {
                index: m,
                index_name: samples.index_names[m].clone(),
                component: l,
                exposure: col,
                theta_star: ts_summary,
                theta: Summary::from_values(&th, level),
                theta_defined: th.len() as f64 / n,
                w: Summary::from_values(&ws, level),
                w_defined: ws.len() as f64 / n,
                pip: ts.iter().filter(|&&v| v != 0.0).count() as f64 / n,
            });
        }
    }
    out
}

/// Cross-validated prediction error of `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// Root of the squared errors pooled over every held-out row.
    pub rmse: f64,
    /// Mean of the per-fold RMSEs.
    pub mean_fold_rmse: f64,
    pub fold_rmse: Vec<f64>,
}

/// Deterministic assignment of `n` rows to `folds` folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (k, &r) in rows.iter().enumerate() {
        out[r] = k % folds;
    }
    out
}

/// K-fold cross-validation: fit on each training portion and predict
/// `y = h + Z gamma` on the held-out rows by posterior means. Errors are
/// reported in the outcome's original units when it was standardized.
pub fn evaluate_cv(dataset: &Dataset, spec: &ModelSpec, config: &McmcConfig, folds: usize) -> Result<CvResult> {
    if folds < 2 || folds > dataset.n() {
        return Err(BmimError::Request(format!("folds must be in 2..={}, got {folds}", dataset.n())));
    }
    let assign = fold_assignment(dataset.n(), folds, config.seed);
    let scale = dataset.outcome_scaling.map_or(1.0, |s| s.sd);
    let mut sse_total = 0.0;
    let mut fold_rmse = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..dataset.n()).filter(|&i| assign[i] != f).collect();
        let test: Vec<usize> = (0..dataset.n()).filter(|&i| assign[i] == f).collect();
        if train.len() <= dataset.n_covariates() || test.is_empty() {
            return Err(BmimError::Request(format!(
                "fold {} leaves {} training rows for {} covariates",
                f + 1,
                train.len(),
                dataset.n_covariates()
            )));
        }
        let tr = dataset.select_rows(&train);
        let te = dataset.select_rows(&test);
        let fold_cfg = McmcConfig {
            seed: config.seed.wrapping_add(f as u64 + 1),
            ..config.clone()
        };
        let samples = run_mcmc(&tr, spec, &fold_cfg)?;
        let est = predict_h(&samples, &tr, &PredictionRequest::holdout(te.x.clone()))?;
        let q = tr.n_covariates();
        let mut gbar = DVector::zeros(q);
        for d in &samples.draws {
            gbar += DVector::from_column_slice(&d.gamma);
        }
        gbar /= samples.len() as f64;
        let zg = &te.z * gbar;
        let sse: f64 = (0..te.n())
            .map(|i| ((te.y[i] - est.mean[i] - zg[i]) * scale).powi(2))
            .sum();
        sse_total += sse;
        fold_rmse.push((sse / te.n() as f64).sqrt());
    }
    Ok(CvResult {
        rmse: (sse_total / dataset.n() as f64).sqrt(),
        mean_fold_rmse: mean(&fold_rmse),
        fold_rmse,
    })
}
