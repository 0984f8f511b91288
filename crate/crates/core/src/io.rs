//! CSV ingestion and emission: datasets, posterior draws, diagnostics,
//! curves, weight summaries and simulation tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{BmimError, Result};
use crate::harness::MetricTable;
use crate::model::{standardize_columns, ColumnScaling, Dataset};
use crate::posterior::{ComponentSummary, CurveEstimate};
use crate::sampler::{Draw, ModelSpec, PosteriorSamples};

/// Name given to the constant covariate column.
pub const INTERCEPT: &str = "(intercept)";

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleMap {
    pub outcome: String,
    pub exposures: Vec<String>,
    pub covariates: Vec<String>,
    pub intercept: bool,
    pub standardize_outcome: bool,
}

impl RoleMap {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        RoleMap {
            outcome: cfg.outcome.clone(),
            exposures: cfg.exposure_names(),
            covariates: cfg.covariates.clone(),
            intercept: cfg.intercept,
            standardize_outcome: cfg.standardize_outcome,
        }
    }
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| BmimError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| BmimError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn is_indicator(values: &[f64]) -> bool {
    values.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Reads a dataset. Exposures are standardized, continuous covariates are
/// standardized, 0/1 covariates are kept as-is, and the outcome is
/// standardized when the role map asks for it.
pub fn load_csv(path: &Path, roles: &RoleMap) -> Result<Dataset> {
    let mut rdr = open(path)?;
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(BmimError::Data(format!("{} is empty", path.display())));
    }
    let mut pos = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        if pos.insert(h.to_string(), i).is_some() {
            return Err(BmimError::Data(format!("column '{h}' appears twice in the header")));
        }
    }
    let wanted: Vec<&String> = std::iter::once(&roles.outcome)
        .chain(&roles.exposures)
        .chain(&roles.covariates)
        .collect();
    let idx: Vec<usize> = wanted
        .iter()
        .map(|name| {
            pos.get(name.as_str())
                .copied()
                .ok_or_else(|| BmimError::Data(format!("column '{name}' not found in {}", path.display())))
        })
        .collect::<Result<_>>()?;

    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (k, &i) in idx.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("");
            let loc = || format!("row {}, column '{}'", r + 1, wanted[k]);
            if cell.is_empty() {
                return Err(BmimError::Data(format!("blank cell at {}", loc())));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| BmimError::Data(format!("non-numeric cell '{cell}' at {}", loc())))?;
            if !v.is_finite() {
                return Err(BmimError::Data(format!("non-finite cell '{cell}' at {}", loc())));
            }
            cols[k].push(v);
        }
    }
    let n = cols[0].len();
    if n == 0 {
        return Err(BmimError::Data(format!("{} has no data rows", path.display())));
    }
    log::info!("read {n} rows from {}", path.display());

    let p = roles.exposures.len();
    for (j, name) in roles.exposures.iter().enumerate() {
        if ColumnScaling::fit(&cols[1 + j]).sd <= 0.0 {
            return Err(BmimError::Data(format!("exposure '{name}' has zero variance")));
        }
    }
    let mut x = DMatrix::from_fn(n, p, |i, j| cols[1 + j][i]);
    let exposure_scaling = standardize_columns(&mut x)?;

    let mut z_cols = Vec::new();
    let mut covariate_names = Vec::new();
    let mut covariate_scaling = Vec::new();
    if roles.intercept {
        z_cols.push(vec![1.0; n]);
        covariate_names.push(INTERCEPT.to_string());
        covariate_scaling.push(None);
    }
    for (j, name) in roles.covariates.iter().enumerate() {
        let raw = &cols[1 + p + j];
        if is_indicator(raw) {
            z_cols.push(raw.clone());
            covariate_scaling.push(None);
        } else {
            let s = ColumnScaling::fit(raw);
            if !(s.sd.is_finite() && s.sd > 0.0) {
                return Err(BmimError::Data(format!("column '{name}' has zero or undefined variance")));
            }
            z_cols.push(raw.iter().map(|&v| s.apply(v)).collect());
            covariate_scaling.push(Some(s));
        }
        covariate_names.push(name.clone());
    }
    let z = DMatrix::from_fn(n, z_cols.len(), |i, j| z_cols[j][i]);

    let (y, outcome_scaling) = if roles.standardize_outcome {
        let s = ColumnScaling::fit(&cols[0]);
        if !(s.sd.is_finite() && s.sd > 0.0) {
            return Err(BmimError::Data(format!("outcome '{}' has zero variance", roles.outcome)));
        }
        (DVector::from_iterator(n, cols[0].iter().map(|&v| s.apply(v))), Some(s))
    } else {
        (DVector::from_column_slice(&cols[0]), None)
    };

    let ds = Dataset {
        y,
        x,
        z,
        outcome_name: roles.outcome.clone(),
        exposure_names: roles.exposures.clone(),
        covariate_names,
        exposure_scaling,
        covariate_scaling,
        outcome_scaling,
    };
    ds.check()?;
    Ok(ds)
}

/// Reads a numeric CSV with a header row into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = open(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let name = header.get(j).map_or("?", |h| h.as_str());
                if c.is_empty() {
                    return Err(BmimError::Data(format!("blank cell at row {}, column '{name}'", r + 1)));
                }
                c.parse::<f64>().map_err(|_| {
                    BmimError::Data(format!("non-numeric cell '{c}' at row {}, column '{name}'", r + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(BmimError::Data(format!("{} has no data rows", path.display())));
    }
    let m = DMatrix::from_fn(rows.len(), header.len(), |i, j| rows[i][j]);
    Ok((header, m))
}

/// Writes a dataset in its original units, leaving out the intercept.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let zcols: Vec<usize> = (0..ds.n_covariates())
        .filter(|&j| ds.covariate_names[j] != INTERCEPT)
        .collect();
    let mut header = vec![ds.outcome_name.clone()];
    header.extend(ds.exposure_names.iter().cloned());
    header.extend(zcols.iter().map(|&j| ds.covariate_names[j].clone()));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row = Vec::with_capacity(header.len());
        let y = ds.outcome_scaling.map_or(ds.y[i], |s| s.invert(ds.y[i]));
        row.push(fmt_f64(y));
        for j in 0..ds.n_exposures() {
            row.push(fmt_f64(ds.exposure_scaling[j].invert(ds.x[(i, j)])));
        }
        for &j in &zcols {
            let v = ds.z[(i, j)];
            row.push(fmt_f64(ds.covariate_scaling[j].map_or(v, |s| s.invert(v))));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}

/// Column names of `samples.csv`. `beta.m.j` columns appear for indices
/// whose sampled coefficients differ from the exposure weights.
pub fn sample_columns(samples: &PosteriorSamples) -> Vec<String> {
    let mut cols = vec!["chain".to_string(), "iter".to_string()];
    let Some(first) = samples.draws.first() else {
        return cols;
    };
    for (m, t) in first.theta_star.iter().enumerate() {
        cols.extend((1..=t.len()).map(|l| format!("theta_star.{}.{l}", m + 1)));
    }
    for (m, nu) in first.nu.iter().enumerate() {
        cols.extend((1..=nu.len()).map(|j| format!("nu.{}.{j}", m + 1)));
    }
    for m in 0..first.coef.len() {
        if has_beta(samples, m) {
            cols.extend((1..=first.coef[m].len()).map(|j| format!("beta.{}.{j}", m + 1)));
        }
    }
    cols.extend((1..=first.gamma.len()).map(|q| format!("gamma.{q}")));
    cols.extend(["sigma2", "lambda", "loglik"].map(String::from));
    cols
}

fn has_beta(samples: &PosteriorSamples, m: usize) -> bool {
    samples.draws.iter().any(|d| d.coef[m] != d.theta_star[m])
}

/// One row per retained draw; chains are numbered from 1.
pub fn write_samples_csv(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(sample_columns(samples))?;
    let beta: Vec<bool> = (0..samples.n_indices()).map(|m| has_beta(samples, m)).collect();
    for d in &samples.draws {
        let mut row = vec![(d.chain + 1).to_string(), d.iter.to_string()];
        row.extend(d.theta_star.iter().flatten().map(|&v| fmt_f64(v)));
        row.extend(d.nu.iter().flatten().map(|&v| u8::from(v).to_string()));
        for (m, c) in d.coef.iter().enumerate() {
            if beta[m] {
                row.extend(c.iter().map(|&v| fmt_f64(v)));
            }
        }
        row.extend(d.gamma.iter().map(|&v| fmt_f64(v)));
        row.extend([fmt_f64(d.sigma2), fmt_f64(d.lambda), fmt_f64(d.loglik)]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}

fn parse_key(name: &str, prefix: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix(prefix)?.strip_prefix('.')?;
    let (a, b) = rest.split_once('.')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Reads `samples.csv` back; index metadata comes from the model.
pub fn read_samples_csv(path: &Path, spec: &ModelSpec, seed: u64) -> Result<PosteriorSamples> {
    let mut rdr = open(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| BmimError::Data(format!("{} lacks column '{name}'", path.display())))
    };
    let groups = &spec.structure.groups;
    let mut theta_idx = Vec::new();
    let mut nu_idx = Vec::new();
    let mut beta_idx = Vec::new();
    for (m, g) in groups.iter().enumerate() {
        theta_idx.push(
            (1..=g.len())
                .map(|l| col(&format!("theta_star.{}.{l}", m + 1)))
                .collect::<Result<Vec<_>>>()?,
        );
        let find = |prefix: &str| -> Vec<usize> {
            let mut v: Vec<(usize, usize)> = header
                .iter()
                .enumerate()
                .filter_map(|(i, h)| parse_key(h, prefix).filter(|k| k.0 == m + 1).map(|k| (k.1, i)))
                .collect();
            v.sort();
            v.into_iter().map(|(_, i)| i).collect()
        };
        nu_idx.push(find("nu"));
        beta_idx.push(find("beta"));
    }
    let gamma_idx: Vec<usize> = (1..)
        .map_while(|q| header.iter().position(|h| *h == format!("gamma.{q}")))
        .collect();
    let (ci, ii, si, li, lli) = (col("chain")?, col("iter")?, col("sigma2")?, col("lambda")?, col("loglik")?);

    let mut draws = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| BmimError::Data(format!("bad value at row {}, column '{}'", r + 1, header[i])))
        };
        let chain = num(ci)? as usize;
        if chain == 0 {
            return Err(BmimError::Data(format!("chain numbers start at 1 (row {})", r + 1)));
        }
        let theta_star: Vec<Vec<f64>> = theta_idx
            .iter()
            .map(|ix| ix.iter().map(|&i| num(i)).collect())
            .collect::<Result<_>>()?;
        let nu = nu_idx
            .iter()
            .map(|ix| ix.iter().map(|&i| num(i).map(|v| v != 0.0)).collect())
            .collect::<Result<_>>()?;
        let coef = beta_idx
            .iter()
            .zip(&theta_star)
            .map(|(ix, t)| {
                if ix.is_empty() {
                    Ok(t.clone())
                } else {
                    ix.iter().map(|&i| num(i)).collect()
                }
            })
            .collect::<Result<_>>()?;
        draws.push(Draw {
            chain: chain - 1,
            iter: num(ii)? as usize,
            theta_star,
            coef,
            nu,
            gamma: gamma_idx.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            sigma2: num(si)?,
            lambda: num(li)?,
            loglik: num(lli)?,
        });
    }
    if draws.is_empty() {
        return Err(BmimError::Data(format!("{} holds no draws", path.display())));
    }
    let chains = draws.iter().map(|d| d.chain).max().unwrap_or(0) + 1;
    Ok(PosteriorSamples {
        draws,
        seed,
        chains,
        index_names: groups.iter().map(|g| g.name.clone()).collect(),
        columns: groups.iter().map(|g| g.columns.clone()).collect(),
        families: spec.priors.iter().map(|p| p.family_name().to_string()).collect(),
        kernel: spec.kernel,
        acceptance: Vec::new(),
        rhat: Vec::new(),
    })
}

/// Acceptance rates per block and chain, then split-R-hat per parameter.
pub fn write_diagnostics_csv(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["kind", "name", "chain", "value"])?;
    for a in &samples.acceptance {
        w.write_record(["acceptance", &a.block, &(a.chain + 1).to_string(), &fmt_f64(a.rate)])?;
    }
    for (name, r) in &samples.rhat {
        w.write_record(["rhat", name, "", &fmt_f64(*r)])?;
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}

pub fn write_curve_csv(path: &Path, curve: &CurveEstimate) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["grid", "mean", "lo", "hi"])?;
    for i in 0..curve.grid.len() {
        w.write_record([curve.grid[i], curve.mean[i], curve.lo[i], curve.hi[i]].map(fmt_f64))?;
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<CurveEstimate> {
    let mut rdr = open(path)?;
    let mut c = CurveEstimate {
        grid: Vec::new(),
        mean: Vec::new(),
        lo: Vec::new(),
        hi: Vec::new(),
        reference: None,
    };
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| BmimError::Data(format!("bad curve row {}", r + 1)))?;
        if v.len() != 4 {
            return Err(BmimError::Data(format!("curve row {} has {} fields", r + 1, v.len())));
        }
        c.grid.push(v[0]);
        c.mean.push(v[1]);
        c.lo.push(v[2]);
        c.hi.push(v[3]);
    }
    Ok(c)
}

/// Weight summaries on the three scales plus inclusion probabilities.
pub fn write_weights_csv(path: &Path, summaries: &[ComponentSummary], exposure_names: &[String]) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["index".to_string(), "exposure".to_string(), "pip".to_string()];
    for scale in ["theta_star", "theta", "w"] {
        for stat in ["mean", "lo", "median", "hi"] {
            header.push(format!("{scale}_{stat}"));
        }
    }
    header.extend(["theta_defined", "w_defined"].map(String::from));
    w.write_record(&header)?;
    for s in summaries {
        let mut row = vec![
            s.index_name.clone(),
            exposure_names.get(s.exposure).cloned().unwrap_or_else(|| format!("x{}", s.exposure + 1)),
            fmt_f64(s.pip),
        ];
        for sum in [Some(s.theta_star), s.theta, s.w] {
            match sum {
                Some(v) => row.extend([v.mean, v.lo, v.median, v.hi].map(fmt_f64)),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        row.extend([fmt_f64(s.theta_defined), fmt_f64(s.w_defined)]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}

const METRIC_NAMES: [&str; 6] = [
    "holdout_mse",
    "holdout_width",
    "holdout_coverage",
    "comp_mse",
    "comp_width",
    "comp_coverage",
];

fn metric_values(m: &crate::harness::Metrics) -> [f64; 6] {
    [
        m.holdout_mse,
        m.holdout_width,
        m.holdout_coverage,
        m.comp_mse,
        m.comp_width,
        m.comp_coverage,
    ]
}

/// Per-replicate, per-model metrics; failed fits have empty metric cells.
pub fn write_metrics_csv(path: &Path, tables: &[MetricTable]) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["scenario", "rep", "model", "status"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for t in tables {
        for r in &t.records {
            let mut row = vec![t.scenario.clone(), (r.rep + 1).to_string(), r.model.clone()];
            match &r.metrics {
                Some(m) => {
                    row.push("ok".into());
                    row.extend(metric_values(m).map(fmt_f64));
                }
                None => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), 6));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}

/// Ratio table: MSE and width relative to the unconstrained model,
/// coverages absolute.
pub fn write_table1_csv(path: &Path, tables: &[MetricTable]) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["scenario", "model"];
    header.extend(METRIC_NAMES);
    header.extend(["succeeded", "failed"]);
    w.write_record(&header)?;
    for t in tables {
        for r in &t.rows {
            let mut row = vec![t.scenario.clone(), r.model.clone()];
            row.extend(metric_values(&r.relative).map(fmt_f64));
            row.extend([r.succeeded.to_string(), r.failed.to_string()]);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| BmimError::io(path, e))
}
