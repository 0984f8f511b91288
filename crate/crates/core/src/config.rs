//! Run configuration: strict TOML parsing, validation and the resolved echo
//! in which every defaulted value is written out explicitly.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::natural_spline_basis;
use crate::error::{BmimError, Result};
use crate::kernels::{KernelFamily, KernelSpec, DEFAULT_JITTER};
use crate::model::{ordering_matrix, IndexGroup, IndexStructure, Transform};
use crate::priors::{
    rpf_to_dirichlet, Inclusion, NuisancePriors, PriorFamily, WeightPriorSpec, DEFAULT_A_BETA, DEFAULT_A_RHO,
    DEFAULT_A_THETA, DEFAULT_B_BETA, DEFAULT_B_RHO, DEFAULT_B_THETA, DEFAULT_CONCENTRATION, DEFAULT_INCLUSION,
    DEFAULT_SIGMA2_THETA,
};
use crate::sampler::{McmcConfig, ModelSpec};

/// Relative tolerance when an echoed `alpha` is checked against `c * rpf`.
const ALPHA_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    pub outcome: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize_outcome: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<RawMcmc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuisance: Option<RawNuisance>,
    #[serde(rename = "index", default)]
    pub indices: Vec<RawIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawInclusion {
    Off(String),
    Beta(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub exposures: Vec<String>,
    pub prior: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inclusion: Option<RawInclusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    /// Exposure names from least to most potent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    /// `natural_spline:df` or the path of a CSV holding the basis matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMcmc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acceptance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_only: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNuisance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_rate: Option<f64>,
}

/// One declared index after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub name: String,
    pub exposures: Vec<String>,
    pub prior: WeightPriorSpec,
    pub transform: Transform,
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub outcome: String,
    pub covariates: Vec<String>,
    pub intercept: bool,
    pub standardize_outcome: bool,
    pub kernel: KernelSpec,
    pub indices: Vec<IndexConfig>,
    pub mcmc: McmcConfig,
    pub nuisance: NuisancePriors,
    /// The configuration with every default written out.
    pub resolved: RawConfig,
}

impl RunConfig {
    /// Exposure names in column order: the indices' exposures concatenated.
    pub fn exposure_names(&self) -> Vec<String> {
        self.indices.iter().flat_map(|i| i.exposures.iter().cloned()).collect()
    }

    pub fn structure(&self) -> IndexStructure {
        let mut next = 0;
        let groups = self
            .indices
            .iter()
            .map(|ix| {
                let columns: Vec<usize> = (next..next + ix.exposures.len()).collect();
                next += ix.exposures.len();
                IndexGroup::new(ix.name.clone(), columns).with_transform(ix.transform.clone())
            })
            .collect();
        IndexStructure::new(groups)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(
            self.structure(),
            self.indices.iter().map(|i| i.prior.clone()).collect(),
            self.kernel,
        );
        spec.nuisance = self.nuisance;
        spec
    }

    /// Replaces the MCMC settings, keeping the resolved echo in sync.
    pub fn set_mcmc(&mut self, mcmc: McmcConfig) {
        self.resolved.mcmc = Some(raw_mcmc(&mcmc));
        self.mcmc = mcmc;
    }

    /// Replaces the data path, keeping the resolved echo in sync.
    pub fn set_data(&mut self, data: &Path) {
        self.resolved.data = Some(data.display().to_string());
        self.data = Some(data.to_path_buf());
    }

    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(&self.resolved).map_err(|e| BmimError::Config(format!("cannot serialize configuration: {e}")))
    }
}

/// Parses a configuration; relative basis paths resolve against the working directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, Path::new("."))
}

/// Parses a configuration, resolving relative basis paths against `base`.
pub fn parse_config_in(text: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| BmimError::Config(e.message().to_string()))?;
    resolve(raw, base)
}

fn resolve(raw: RawConfig, base: &Path) -> Result<RunConfig> {
    if raw.outcome.trim().is_empty() {
        return Err(BmimError::Config("'outcome' must name a column".into()));
    }
    if raw.indices.is_empty() {
        return Err(BmimError::Config("at least one [[index]] table is required".into()));
    }

    let kernel_name = raw.kernel.clone().unwrap_or_else(|| "gaussian".into());
    let jitter = raw.jitter.unwrap_or(DEFAULT_JITTER);
    let (kernel, degree) = match kernel_name.as_str() {
        "gaussian" => {
            if raw.degree.is_some() {
                return Err(BmimError::Config("'degree' applies only to the polynomial kernel".into()));
            }
            (KernelSpec::gaussian(), None)
        }
        "polynomial" => {
            let d = raw
                .degree
                .ok_or_else(|| BmimError::Config("kernel 'polynomial' requires key 'degree'".into()))?;
            (KernelSpec::polynomial(d), Some(d))
        }
        other => return Err(BmimError::Config(format!("unknown kernel '{other}'"))),
    };
    let kernel = kernel.with_jitter(jitter);
    kernel.validate()?;
    debug_assert!(matches!(
        (kernel.family, degree),
        (KernelFamily::Gaussian, None) | (KernelFamily::Polynomial { .. }, Some(_))
    ));

    let mut names_seen: Vec<&str> = vec![raw.outcome.as_str()];
    for c in &raw.covariates {
        if names_seen.contains(&c.as_str()) {
            return Err(BmimError::Config(format!("column '{c}' is declared twice")));
        }
        names_seen.push(c);
    }

    let mut indices = Vec::with_capacity(raw.indices.len());
    let mut resolved_indices = Vec::with_capacity(raw.indices.len());
    for (m, ri) in raw.indices.iter().enumerate() {
        let name = ri.name.clone().unwrap_or_else(|| format!("index{}", m + 1));
        if ri.exposures.is_empty() {
            return Err(BmimError::Config(format!("index '{name}' has no exposures")));
        }
        for e in &ri.exposures {
            if names_seen.contains(&e.as_str()) {
                return Err(BmimError::Config(format!(
                    "column '{e}' is declared twice; index groups must not overlap"
                )));
            }
            names_seen.push(e);
        }
        if indices.iter().any(|i: &IndexConfig| i.name == name) {
            return Err(BmimError::Config(format!("index name '{name}' is used twice")));
        }
        let (cfg, echo) = resolve_index(ri, name, base)?;
        indices.push(cfg);
        resolved_indices.push(echo);
    }

    let mcmc = resolve_mcmc(raw.mcmc.as_ref().cloned().unwrap_or_default());
    mcmc.validate()?;
    let nuisance = resolve_nuisance(raw.nuisance.as_ref().cloned().unwrap_or_default());
    nuisance.validate()?;

    let intercept = raw.intercept.unwrap_or(true);
    let standardize_outcome = raw.standardize_outcome.unwrap_or(true);
    let resolved = RawConfig {
        data: raw.data.clone(),
        outcome: raw.outcome.clone(),
        covariates: raw.covariates.clone(),
        intercept: Some(intercept),
        standardize_outcome: Some(standardize_outcome),
        kernel: Some(kernel_name),
        degree,
        jitter: Some(jitter),
        mcmc: Some(raw_mcmc(&mcmc)),
        nuisance: Some(RawNuisance {
            gamma_variance: Some(nuisance.gamma_variance),
            sigma2_shape: Some(nuisance.sigma2_shape),
            sigma2_scale: Some(nuisance.sigma2_scale),
            tau_shape: Some(nuisance.tau_shape),
            tau_rate: Some(nuisance.tau_rate),
        }),
        indices: resolved_indices,
    };

    let cfg = RunConfig {
        data: raw.data.map(PathBuf::from),
        outcome: raw.outcome,
        covariates: raw.covariates,
        intercept,
        standardize_outcome,
        kernel,
        indices,
        mcmc,
        nuisance,
        resolved,
    };
    cfg.structure()
        .validate(cfg.exposure_names().len())
        .map_err(|e| BmimError::Config(e.to_string()))?;
    Ok(cfg)
}

fn resolve_mcmc(r: RawMcmc) -> McmcConfig {
    let d = McmcConfig::default();
    McmcConfig {
        iterations: r.iterations.unwrap_or(d.iterations),
        burnin: r.burnin.unwrap_or(d.burnin),
        thin: r.thin.unwrap_or(d.thin),
        chains: r.chains.unwrap_or(d.chains),
        seed: r.seed.unwrap_or(d.seed),
        proposal_sd: r.proposal_sd.unwrap_or(d.proposal_sd),
        adapt: r.adapt.unwrap_or(d.adapt),
        target_acceptance: r.target_acceptance.unwrap_or(d.target_acceptance),
        prior_only: r.prior_only.unwrap_or(d.prior_only),
        diagnostics: true,
    }
}

fn raw_mcmc(c: &McmcConfig) -> RawMcmc {
    RawMcmc {
        iterations: Some(c.iterations),
        burnin: Some(c.burnin),
        thin: Some(c.thin),
        chains: Some(c.chains),
        seed: Some(c.seed),
        proposal_sd: Some(c.proposal_sd),
        adapt: Some(c.adapt),
        target_acceptance: Some(c.target_acceptance),
        prior_only: Some(c.prior_only),
    }
}

fn resolve_nuisance(r: RawNuisance) -> NuisancePriors {
    let d = NuisancePriors::default();
    NuisancePriors {
        gamma_variance: r.gamma_variance.unwrap_or(d.gamma_variance),
        sigma2_shape: r.sigma2_shape.unwrap_or(d.sigma2_shape),
        sigma2_scale: r.sigma2_scale.unwrap_or(d.sigma2_scale),
        tau_shape: r.tau_shape.unwrap_or(d.tau_shape),
        tau_rate: r.tau_rate.unwrap_or(d.tau_rate),
    }
}

/// Keys each family accepts besides name, exposures, prior and inclusion.
fn allowed_keys(prior: &str) -> Option<&'static [&'static str]> {
    Some(match prior {
        "unconstrained" => &["sigma2_theta"],
        "smooth" => &["sigma2_theta", "basis"],
        "constrained" => &["a_theta", "b_theta"],
        "dirichlet" => &["rpf", "c", "alpha", "a_rho", "b_rho"],
        "dirichlet_ss" => &["rpf", "c", "alpha", "b_theta"],
        "ranked" => &["a_beta", "b_beta", "order", "A"],
        "fixed" => &["rpf", "a_rho", "b_rho"],
        _ => return None,
    })
}

fn present_keys(ri: &RawIndex) -> Vec<&'static str> {
    let mut k = Vec::new();
    let mut push = |set: bool, name: &'static str| {
        if set {
            k.push(name)
        }
    };
    push(ri.sigma2_theta.is_some(), "sigma2_theta");
    push(ri.a_theta.is_some(), "a_theta");
    push(ri.b_theta.is_some(), "b_theta");
    push(ri.a_beta.is_some(), "a_beta");
    push(ri.b_beta.is_some(), "b_beta");
    push(ri.a_rho.is_some(), "a_rho");
    push(ri.b_rho.is_some(), "b_rho");
    push(ri.rpf.is_some(), "rpf");
    push(ri.c.is_some(), "c");
    push(ri.alpha.is_some(), "alpha");
    push(ri.order.is_some(), "order");
    push(ri.a.is_some(), "A");
    push(ri.basis.is_some(), "basis");
    k
}

fn require<T: Clone>(v: &Option<T>, key: &str, name: &str, prior: &str) -> Result<T> {
    v.clone().ok_or_else(|| {
        BmimError::Config(format!("index '{name}': prior '{prior}' requires key '{key}'"))
    })
}

fn resolve_inclusion(ri: &RawIndex, name: &str, supports: bool) -> Result<Option<Inclusion>> {
    match &ri.inclusion {
        None if supports => Ok(Some(DEFAULT_INCLUSION)),
        None => Ok(None),
        Some(RawInclusion::Off(s)) if s == "off" => Ok(None),
        Some(RawInclusion::Off(s)) => Err(BmimError::Config(format!(
            "index '{name}': inclusion must be \"off\" or [a0, b0], got \"{s}\""
        ))),
        Some(RawInclusion::Beta(v)) => {
            if !supports {
                return Err(BmimError::Config(format!(
                    "index '{name}': prior '{}' does not support component selection",
                    ri.prior
                )));
            }
            if v.len() != 2 || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(BmimError::Config(format!(
                    "index '{name}': inclusion must be two positive numbers [a0, b0]"
                )));
            }
            Ok(Some(Inclusion { a0: v[0], b0: v[1] }))
        }
    }
}

fn resolve_index(ri: &RawIndex, name: String, base: &Path) -> Result<(IndexConfig, RawIndex)> {
    let prior = ri.prior.as_str();
    let allowed = allowed_keys(prior).ok_or_else(|| {
        BmimError::Config(format!(
            "index '{name}': unknown prior '{prior}' (expected unconstrained, constrained, dirichlet, dirichlet_ss, ranked, smooth or fixed)"
        ))
    })?;
    if let Some(bad) = present_keys(ri).into_iter().find(|k| !allowed.contains(k)) {
        return Err(BmimError::Config(format!(
            "index '{name}': key '{bad}' does not apply to prior '{prior}'"
        )));
    }
    let l = ri.exposures.len();
    let supports_selection = !matches!(prior, "dirichlet" | "fixed");
    let selection = resolve_inclusion(ri, &name, supports_selection)?;

    let mut echo = RawIndex {
        name: Some(name.clone()),
        exposures: ri.exposures.clone(),
        prior: ri.prior.clone(),
        inclusion: Some(match selection {
            Some(inc) => RawInclusion::Beta(vec![inc.a0, inc.b0]),
            None => RawInclusion::Off("off".into()),
        }),
        ..RawIndex::default()
    };
    let mut transform = Transform::Identity;

    let family = match prior {
        "unconstrained" => {
            let s = ri.sigma2_theta.unwrap_or(DEFAULT_SIGMA2_THETA);
            echo.sigma2_theta = Some(s);
            PriorFamily::Unconstrained { sigma2_theta: s }
        }
        "smooth" => {
            let s = ri.sigma2_theta.unwrap_or(DEFAULT_SIGMA2_THETA);
            let basis = require(&ri.basis, "basis", &name, prior)?;
            transform = Transform::Basis(load_basis(&basis, l, base, &name)?);
            echo.sigma2_theta = Some(s);
            // file paths are echoed relative to the working directory
            let relocate = !basis.starts_with("natural_spline:") && base != Path::new(".");
            echo.basis = Some(if relocate { base.join(&basis).display().to_string() } else { basis });
            PriorFamily::Smooth { sigma2_theta: s }
        }
        "constrained" => {
            let a = ri.a_theta.unwrap_or(DEFAULT_A_THETA);
            let b = ri.b_theta.unwrap_or(DEFAULT_B_THETA);
            echo.a_theta = Some(a);
            echo.b_theta = Some(b);
            PriorFamily::Constrained { a_theta: a, b_theta: b }
        }
        "dirichlet" | "dirichlet_ss" => {
            let rpf = require(&ri.rpf, "rpf", &name, prior)?;
            if rpf.len() != l {
                return Err(BmimError::Config(format!(
                    "index '{name}': rpf has {} entries for {l} exposures",
                    rpf.len()
                )));
            }
            let c = ri.c.unwrap_or(DEFAULT_CONCENTRATION);
            let alpha = rpf_to_dirichlet(&rpf, c).map_err(|e| BmimError::Config(format!("index '{name}': {e}")))?;
            if let Some(given) = &ri.alpha {
                let agrees = given.len() == alpha.len()
                    && given
                        .iter()
                        .zip(&alpha)
                        .all(|(g, a)| (g - a).abs() <= ALPHA_TOL * a.abs().max(1.0));
                if !agrees {
                    return Err(BmimError::Config(format!(
                        "index '{name}': alpha {given:?} does not equal c * rpf = {alpha:?}"
                    )));
                }
            }
            echo.rpf = Some(rpf);
            echo.c = Some(c);
            echo.alpha = Some(alpha.clone());
            if prior == "dirichlet" {
                let a_rho = ri.a_rho.unwrap_or(DEFAULT_A_RHO);
                let b_rho = ri.b_rho.unwrap_or(DEFAULT_B_RHO);
                echo.a_rho = Some(a_rho);
                echo.b_rho = Some(b_rho);
                PriorFamily::TargetedDirichlet { alpha, a_rho, b_rho }
            } else {
                let b_theta = ri.b_theta.unwrap_or(c);
                echo.b_theta = Some(b_theta);
                PriorFamily::DirichletSs { alpha, b_theta }
            }
        }
        "ranked" => {
            let a_beta = ri.a_beta.unwrap_or(DEFAULT_A_BETA);
            let b_beta = ri.b_beta.unwrap_or(DEFAULT_B_BETA);
            let a = match (&ri.order, &ri.a) {
                (Some(_), Some(_)) => {
                    return Err(BmimError::Config(format!(
                        "index '{name}': give either 'order' or 'A', not both"
                    )))
                }
                (None, None) => {
                    return Err(BmimError::Config(format!(
                        "index '{name}': prior 'ranked' requires key 'order' or 'A'"
                    )))
                }
                (Some(order), None) => {
                    let pos = order
                        .iter()
                        .map(|o| {
                            ri.exposures.iter().position(|e| e == o).ok_or_else(|| {
                                BmimError::Config(format!("index '{name}': order names unknown exposure '{o}'"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if pos.len() != l {
                        return Err(BmimError::Config(format!(
                            "index '{name}': order must list all {l} exposures"
                        )));
                    }
                    echo.order = Some(order.clone());
                    ordering_matrix(&pos).map_err(|e| BmimError::Config(format!("index '{name}': {e}")))?
                }
                (None, Some(rows)) => {
                    echo.a = Some(rows.clone());
                    matrix_from_rows(rows, &name)?
                }
            };
            if a.nrows() != l {
                return Err(BmimError::Config(format!(
                    "index '{name}': A has {} rows for {l} exposures",
                    a.nrows()
                )));
            }
            transform = Transform::LinearMap(a);
            echo.a_beta = Some(a_beta);
            echo.b_beta = Some(b_beta);
            PriorFamily::Ranked { a_beta, b_beta }
        }
        "fixed" => {
            let rpf = require(&ri.rpf, "rpf", &name, prior)?;
            if rpf.len() != l {
                return Err(BmimError::Config(format!(
                    "index '{name}': rpf has {} entries for {l} exposures",
                    rpf.len()
                )));
            }
            let spec = WeightPriorSpec::fixed(&rpf).map_err(|e| BmimError::Config(format!("index '{name}': {e}")))?;
            let a_rho = ri.a_rho.unwrap_or(DEFAULT_A_RHO);
            let b_rho = ri.b_rho.unwrap_or(DEFAULT_B_RHO);
            echo.rpf = Some(rpf);
            echo.a_rho = Some(a_rho);
            echo.b_rho = Some(b_rho);
            match spec.family {
                PriorFamily::Fixed { weights, .. } => PriorFamily::Fixed { weights, a_rho, b_rho },
                _ => unreachable!(),
            }
        }
        _ => unreachable!(),
    };

    let spec = WeightPriorSpec { family, selection };
    spec.validate(&transform, l)
        .map_err(|e| BmimError::Config(format!("index '{name}': {e}")))?;
    Ok((
        IndexConfig {
            name,
            exposures: ri.exposures.clone(),
            prior: spec,
            transform,
        },
        echo,
    ))
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let ncol = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || ncol == 0 || rows.iter().any(|r| r.len() != ncol) {
        return Err(BmimError::Config(format!(
            "index '{name}': A must be a nonempty list of equal-length rows"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(BmimError::Config(format!("index '{name}': A has non-finite entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncol, |i, j| rows[i][j]))
}

fn load_basis(spec: &str, l: usize, base: &Path, name: &str) -> Result<DMatrix<f64>> {
    if let Some(df) = spec.strip_prefix("natural_spline:") {
        let df: usize = df
            .trim()
            .parse()
            .map_err(|_| BmimError::Config(format!("index '{name}': bad spline df in '{spec}'")))?;
        return natural_spline_basis(l, df).map_err(|e| BmimError::Config(format!("index '{name}': {e}")));
    }
    let path = base.join(spec);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|e| BmimError::Config(format!("index '{name}': cannot read basis {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| {
                c.parse::<f64>().map_err(|_| {
                    BmimError::Config(format!("index '{name}': basis row {} has non-numeric cell '{c}'", i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    matrix_from_rows(&rows, name)
}
