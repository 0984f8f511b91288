//! Metropolis-within-Gibbs sampler over the index weights, inclusion
//! indicators, covariate coefficients, residual variance and kernel scale,
//! targeting the likelihood with the Gaussian process integrated out.
//!
//! Each sweep updates the weights index by index and component by component,
//! then `gamma`, `sigma2` and `lambda`, in that fixed order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{BmimError, Result};
use crate::kernels::{KernelFactor, KernelSpec};
use crate::linalg::{cholesky_with_escalation, gaussian_log_density, CovFactor};
use crate::model::{group_block, Dataset, IndexStructure};
use crate::priors::{sample_gamma, NuisancePriors, WeightPriorSpec};
use crate::stats::split_rhat;

/// Threshold above which split-R-hat values are reported as warnings.
pub const RHAT_WARNING: f64 = 1.05;
const INIT_ATTEMPTS: usize = 100;
const INITIAL_SCALE_SD: f64 = 0.3;
const INITIAL_LOG_TAU_SD: f64 = 0.5;

/// Everything the sampler needs to know about the model besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub structure: IndexStructure,
    pub priors: Vec<WeightPriorSpec>,
    pub kernel: KernelSpec,
    pub nuisance: NuisancePriors,
}

impl ModelSpec {
    pub fn new(structure: IndexStructure, priors: Vec<WeightPriorSpec>, kernel: KernelSpec) -> Self {
        ModelSpec {
            structure,
            priors,
            kernel,
            nuisance: NuisancePriors::default(),
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        dataset.check()?;
        self.structure.validate(dataset.n_exposures())?;
        if self.priors.len() != self.structure.n_indices() {
            return Err(BmimError::Prior(format!(
                "{} weight priors for {} indices",
                self.priors.len(),
                self.structure.n_indices()
            )));
        }
        for (g, p) in self.structure.groups.iter().zip(&self.priors) {
            p.validate(&g.transform, g.len())
                .map_err(|e| BmimError::Prior(format!("index '{}': {e}", g.name)))?;
        }
        self.kernel.validate()?;
        self.nuisance.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Initial random-walk standard deviation for each weight coefficient.
    pub proposal_sd: f64,
    /// Robbins–Monro adaptation of proposal scales during burnin.
    pub adapt: bool,
    pub target_acceptance: f64,
    /// Drop the likelihood so the weights are sampled from their prior. The
    /// nuisance parameters stay at their initial values.
    pub prior_only: bool,
    /// Compute split-R-hat and warn about values above [`RHAT_WARNING`].
    pub diagnostics: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 5000,
            burnin: 2500,
            thin: 1,
            chains: 1,
            seed: 42,
            proposal_sd: 0.1,
            adapt: true,
            target_acceptance: 0.4,
            prior_only: false,
            diagnostics: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 || self.chains == 0 {
            return Err(BmimError::Sampler(
                "iterations, thin and chains must be positive".into(),
            ));
        }
        if self.burnin >= self.iterations {
            return Err(BmimError::Sampler(format!(
                "burnin {} must be below iterations {}",
                self.burnin, self.iterations
            )));
        }
        if !(self.proposal_sd.is_finite() && self.proposal_sd > 0.0) {
            return Err(BmimError::Sampler("proposal_sd must be positive".into()));
        }
        if !(0.3..=0.5).contains(&self.target_acceptance) {
            return Err(BmimError::Sampler("target acceptance must lie in [0.3, 0.5]".into()));
        }
        Ok(())
    }

    /// Retained draws per chain; trailing draws that do not fill a thinning
    /// interval are dropped.
    pub fn retained_per_chain(&self) -> usize {
        (self.iterations - self.burnin) / self.thin
    }
}

/// One retained draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub chain: usize,
    pub iter: usize,
    /// Weights on the raw exposures of each index.
    pub theta_star: Vec<Vec<f64>>,
    /// Sampled coefficients of each index (equal to `theta_star` for identity transforms).
    pub coef: Vec<Vec<f64>>,
    pub nu: Vec<Vec<bool>>,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    pub lambda: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRate {
    pub block: String,
    pub chain: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub draws: Vec<Draw>,
    pub seed: u64,
    pub chains: usize,
    pub index_names: Vec<String>,
    /// Exposure columns of each index.
    pub columns: Vec<Vec<usize>>,
    pub families: Vec<String>,
    pub kernel: KernelSpec,
    /// Post-burnin acceptance rates per block and chain.
    pub acceptance: Vec<AcceptanceRate>,
    /// Split-R-hat per scalar parameter (empty when diagnostics are off).
    pub rhat: Vec<(String, f64)>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn n_indices(&self) -> usize {
        self.columns.len()
    }
}

/// Log density of `y ~ N(Z gamma, sigma2 (I + K / lambda))`, computed through
/// a Cholesky factor of `I + K / lambda`. Returns `-inf` when the factorization
/// fails even after jitter escalation.
pub fn marginal_log_likelihood(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    gamma: &DVector<f64>,
    sigma2: f64,
    lambda: f64,
    k: &DMatrix<f64>,
) -> Result<f64> {
    let n = y.len();
    if z.nrows() != n || k.nrows() != n || k.ncols() != n || z.ncols() != gamma.len() {
        return Err(BmimError::Dimension(format!(
            "y has {n} rows, Z is {}x{}, gamma has {} entries, K is {}x{}",
            z.nrows(),
            z.ncols(),
            gamma.len(),
            k.nrows(),
            k.ncols()
        )));
    }
    let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
    if !finite(y.as_slice()) || !finite(z.as_slice()) || !finite(gamma.as_slice()) || !finite(k.as_slice()) {
        return Err(BmimError::NonFinite("likelihood inputs contain non-finite values".into()));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) {
        return Err(BmimError::Numerical(format!(
            "sigma2 = {sigma2} and lambda = {lambda} must be positive"
        )));
    }
    let factor = match CovFactor::new(&KernelFactor::Dense(k.clone()), 1.0 / lambda, 0.0) {
        Ok(f) => f,
        Err(_) => return Ok(f64::NEG_INFINITY),
    };
    let resid = y - z * gamma;
    Ok(gaussian_log_density(&resid, sigma2, &factor))
}

/// Data and model pieces shared by every chain.
struct Prepared<'a> {
    y: &'a DVector<f64>,
    z: &'a DMatrix<f64>,
    designs: Vec<DMatrix<f64>>,
    loadings: Vec<DMatrix<f64>>,
    priors: &'a [WeightPriorSpec],
    kernel: KernelSpec,
    nuisance: NuisancePriors,
    max_rank: usize,
    prior_only: bool,
}

impl<'a> Prepared<'a> {
    fn new(dataset: &'a Dataset, spec: &'a ModelSpec, prior_only: bool) -> Self {
        let mut designs = Vec::new();
        let mut loadings = Vec::new();
        for (g, p) in spec.structure.groups.iter().zip(&spec.priors) {
            let loading = p.loading(&g.transform, g.len());
            designs.push(group_block(&dataset.x, g) * &loading);
            loadings.push(loading);
        }
        let n = dataset.n();
        Prepared {
            y: &dataset.y,
            z: &dataset.z,
            designs,
            loadings,
            priors: &spec.priors,
            kernel: spec.kernel,
            nuisance: spec.nuisance,
            max_rank: if n >= 40 { n / 4 } else { 0 },
            prior_only,
        }
    }

    fn n_indices(&self) -> usize {
        self.designs.len()
    }

    fn factor(&self, e: &DMatrix<f64>, tau: f64) -> Option<(KernelFactor, CovFactor)> {
        let kf = KernelFactor::new(e, &self.kernel, self.max_rank).ok()?;
        let cf = CovFactor::new(&kf, tau, self.kernel.jitter).ok()?;
        Some((kf, cf))
    }

    fn log_prior_index(&self, m: usize, coef: &[f64], nu: &[bool], pi: f64) -> f64 {
        let spec = &self.priors[m];
        let mut lp = spec.log_density_coef(coef, nu);
        if spec.has_selection() {
            let k = nu.iter().filter(|&&v| v).count() as f64;
            lp += k * pi.ln() + (nu.len() as f64 - k) * (1.0 - pi).ln();
        }
        lp
    }

    fn theta_star(&self, m: usize, coef: &DVector<f64>) -> Vec<f64> {
        (&self.loadings[m] * coef).iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
struct State {
    coef: Vec<DVector<f64>>,
    nu: Vec<Vec<bool>>,
    pi: Vec<f64>,
    e: DMatrix<f64>,
    gamma: DVector<f64>,
    resid: DVector<f64>,
    sigma2: f64,
    tau: f64,
    factors: Option<(KernelFactor, CovFactor)>,
    loglik: f64,
}

impl State {
    fn cov(&self) -> &CovFactor {
        &self.factors.as_ref().expect("likelihood factors present").1
    }

    fn kernel(&self) -> &KernelFactor {
        &self.factors.as_ref().expect("likelihood factors present").0
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    accepted: u64,
    total: u64,
}

impl Counter {
    fn record(&mut self, accepted: bool) {
        self.total += 1;
        self.accepted += accepted as u64;
    }
}

/// Proposal scales and their acceptance bookkeeping.
struct Tuning {
    log_sd: Vec<Vec<f64>>,
    scale_log_sd: Vec<f64>,
    tau_log_sd: f64,
    adapting: bool,
    step: f64,
    target: f64,
    rw: Vec<Counter>,
    select: Vec<Counter>,
    scale: Vec<Counter>,
    tau: Counter,
}

impl Tuning {
    fn adapt(&self, log_sd: &mut f64, accepted: bool) {
        if self.adapting {
            *log_sd += self.step * (accepted as u8 as f64 - self.target);
        }
    }
}

/// One chain's sampler.
struct Chain<'p, 'a> {
    prep: &'p Prepared<'a>,
    state: State,
    tuning: Tuning,
    rng: ChaCha8Rng,
}

impl<'p, 'a> Chain<'p, 'a> {
    fn init(prep: &'p Prepared<'a>, config: &McmcConfig, chain: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(chain as u64);
        let m_count = prep.n_indices();
        let n = prep.y.len();
        let gamma = if prep.z.ncols() == 0 {
            DVector::zeros(0)
        } else {
            prep.z
                .clone()
                .svd(true, true)
                .solve(prep.y, 1e-12)
                .map_err(|e| BmimError::Numerical(format!("least squares start failed: {e}")))?
        };
        let resid = prep.y - prep.z * &gamma;
        let sigma2 = (resid.norm_squared() / n.max(1) as f64).max(1e-8);
        let tau = 1.0;

        let mut last_err = String::new();
        for _ in 0..INIT_ATTEMPTS {
            let mut coef = Vec::with_capacity(m_count);
            let mut nu = Vec::with_capacity(m_count);
            let mut pi = Vec::with_capacity(m_count);
            for m in 0..m_count {
                let spec = &prep.priors[m];
                let j = prep.designs[m].ncols();
                let (mut c, v, p) = spec.sample_coef(j, &mut rng);
                if spec.is_sign_symmetric() {
                    let t = prep.theta_star(m, &DVector::from_column_slice(&c));
                    if t.iter().sum::<f64>() < 0.0 {
                        c.iter_mut().for_each(|x| *x = -*x);
                    }
                }
                coef.push(DVector::from_vec(c));
                nu.push(v);
                pi.push(p);
            }
            let mut e = DMatrix::zeros(n, m_count);
            for (m, (d, c)) in prep.designs.iter().zip(&coef).enumerate() {
                e.set_column(m, &(d * c));
            }
            let (factors, loglik) = if prep.prior_only {
                (None, 0.0)
            } else {
                match prep.factor(&e, tau) {
                    Some(f) => {
                        let ll = gaussian_log_density(&resid, sigma2, &f.1);
                        (Some(f), ll)
                    }
                    None => {
                        last_err = "kernel factorization failed".into();
                        continue;
                    }
                }
            };
            if !loglik.is_finite() {
                last_err = format!("log likelihood {loglik}");
                continue;
            }
            let tuning = Tuning {
                log_sd: coef.iter().map(|c| vec![config.proposal_sd.ln(); c.len()]).collect(),
                scale_log_sd: vec![INITIAL_SCALE_SD.ln(); m_count],
                tau_log_sd: INITIAL_LOG_TAU_SD.ln(),
                adapting: config.adapt,
                step: 0.0,
                target: config.target_acceptance,
                rw: vec![Counter::default(); m_count],
                select: vec![Counter::default(); m_count],
                scale: vec![Counter::default(); m_count],
                tau: Counter::default(),
            };
            return Ok(Chain {
                prep,
                state: State {
                    coef,
                    nu,
                    pi,
                    e,
                    gamma,
                    resid,
                    sigma2,
                    tau,
                    factors,
                    loglik,
                },
                tuning,
                rng,
            });
        }
        Err(BmimError::Sampler(format!(
            "chain {chain}: non-finite likelihood at initialization after {INIT_ATTEMPTS} prior re-draws ({last_err})"
        )))
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Metropolis–Hastings step for a proposed change to index `m`.
    /// `log_q` is the log proposal ratio `q(old | new) / q(new | old)`.
    fn try_weights(&mut self, m: usize, coef_new: DVector<f64>, nu_new: Vec<bool>, log_q: f64) -> bool {
        let st = &self.state;
        let lp_new = self.prep.log_prior_index(m, coef_new.as_slice(), &nu_new, st.pi[m]);
        if lp_new == f64::NEG_INFINITY || lp_new.is_nan() {
            return false;
        }
        let lp_old = self.prep.log_prior_index(m, st.coef[m].as_slice(), &st.nu[m], st.pi[m]);
        let col = &self.prep.designs[m] * &coef_new;
        let (factors, ll_new) = if self.prep.prior_only {
            (None, 0.0)
        } else {
            let mut e_new = st.e.clone();
            e_new.set_column(m, &col);
            match self.prep.factor(&e_new, st.tau) {
                Some(f) => {
                    let ll = gaussian_log_density(&st.resid, st.sigma2, &f.1);
                    (Some(f), ll)
                }
                None => return false,
            }
        };
        if !ll_new.is_finite() {
            return false;
        }
        let log_alpha = ll_new - st.loglik + lp_new - lp_old + log_q;
        let u: f64 = self.rng.random();
        if u.ln() < log_alpha {
            let st = &mut self.state;
            st.coef[m] = coef_new;
            st.nu[m] = nu_new;
            st.e.set_column(m, &col);
            st.factors = factors;
            st.loglik = ll_new;
            true
        } else {
            false
        }
    }

    fn random_walk(&mut self, m: usize, j: usize) {
        let sd = self.tuning.log_sd[m][j].exp();
        let step = sd * self.normal();
        let mut coef = self.state.coef[m].clone();
        coef[j] += step;
        let nu = self.state.nu[m].clone();
        let accepted = self.try_weights(m, coef, nu, 0.0);
        self.tuning.rw[m].record(accepted);
        let mut ls = self.tuning.log_sd[m][j];
        self.tuning.adapt(&mut ls, accepted);
        self.tuning.log_sd[m][j] = ls;
    }

    /// Sweep over the weights of every index.
    fn update_weights(&mut self) {
        for m in 0..self.prep.n_indices() {
            let spec = &self.prep.priors[m];
            let j_dim = self.state.coef[m].len();
            for j in 0..j_dim {
                if !spec.has_selection() {
                    self.random_walk(m, j);
                    continue;
                }
                if !self.state.nu[m][j] {
                    let v = spec.sample_slab(j, &mut self.rng);
                    let mut coef = self.state.coef[m].clone();
                    let mut nu = self.state.nu[m].clone();
                    coef[j] = v;
                    nu[j] = true;
                    let log_q = 0.5f64.ln() - spec.slab_log_density(j, v);
                    let accepted = self.try_weights(m, coef, nu, log_q);
                    self.tuning.select[m].record(accepted);
                } else if self.rng.random::<f64>() < 0.5 {
                    let v = self.state.coef[m][j];
                    let mut coef = self.state.coef[m].clone();
                    let mut nu = self.state.nu[m].clone();
                    coef[j] = 0.0;
                    nu[j] = false;
                    let log_q = spec.slab_log_density(j, v) - 0.5f64.ln();
                    let accepted = self.try_weights(m, coef, nu, log_q);
                    self.tuning.select[m].record(accepted);
                } else {
                    self.random_walk(m, j);
                }
            }

            // joint rescaling of the active coefficients; a single coefficient
            // is already covered by its random walk
            let active = self.state.nu[m].iter().filter(|&&v| v).count();
            if active > 0 && j_dim > 1 {
                let eps = self.tuning.scale_log_sd[m].exp() * self.normal();
                let coef = &self.state.coef[m] * eps.exp();
                let nu = self.state.nu[m].clone();
                let accepted = self.try_weights(m, coef, nu, active as f64 * eps);
                self.tuning.scale[m].record(accepted);
                let mut ls = self.tuning.scale_log_sd[m];
                self.tuning.adapt(&mut ls, accepted);
                self.tuning.scale_log_sd[m] = ls;
            }

            if spec.is_sign_symmetric() {
                let total: f64 = self.prep.theta_star(m, &self.state.coef[m]).iter().sum();
                if total < 0.0 {
                    let st = &mut self.state;
                    st.coef[m].neg_mut();
                    let flipped = -st.e.column(m);
                    st.e.set_column(m, &flipped);
                }
            }

            if let Some(inc) = spec.selection {
                let k = self.state.nu[m].iter().filter(|&&v| v).count() as f64;
                let beta = Beta::new(inc.a0 + k, inc.b0 + j_dim as f64 - k).expect("valid beta");
                self.state.pi[m] = beta.sample(&mut self.rng);
            }
        }
    }

    /// Gibbs updates of `gamma` and `sigma2`, then a random walk on `log(1/lambda)`.
    fn update_nuisance(&mut self) -> Result<()> {
        if self.prep.prior_only {
            return Ok(());
        }
        let n = self.prep.y.len();
        let q = self.prep.z.ncols();
        let nuis = self.prep.nuisance;

        if q > 0 {
            let st = &self.state;
            let vz = st.cov().solve_mat(self.prep.z);
            let mut prec = self.prep.z.tr_mul(&vz) / st.sigma2;
            for i in 0..q {
                prec[(i, i)] += 1.0 / nuis.gamma_variance;
            }
            let b = vz.tr_mul(self.prep.y) / st.sigma2;
            let chol = cholesky_with_escalation(prec)?;
            let mean = chol.solve(&b);
            let zeta = DVector::from_fn(q, |_, _| self.rng.sample::<f64, _>(StandardNormal));
            let noise = chol
                .l()
                .transpose()
                .solve_upper_triangular(&zeta)
                .ok_or_else(|| BmimError::Numerical("singular gamma precision".into()))?;
            let gamma = mean + noise;
            self.state.resid = self.prep.y - self.prep.z * &gamma;
            self.state.gamma = gamma;
        }

        let quad = self.state.cov().quad_form(&self.state.resid);
        let shape = nuis.sigma2_shape + 0.5 * n as f64;
        let scale = nuis.sigma2_scale + 0.5 * quad;
        self.state.sigma2 = scale / sample_gamma(shape, 1.0, &mut self.rng);
        self.state.loglik = gaussian_log_density(&self.state.resid, self.state.sigma2, self.state.cov());

        let log_tau = self.state.tau.ln();
        let prop = log_tau + self.tuning.tau_log_sd.exp() * self.normal();
        let mut accepted = false;
        if let Ok(cf) = CovFactor::new(self.state.kernel(), prop.exp(), self.prep.kernel.jitter) {
            let ll = gaussian_log_density(&self.state.resid, self.state.sigma2, &cf);
            if ll.is_finite() {
                let log_alpha =
                    ll - self.state.loglik + nuis.ln_pdf_log_tau(prop) - nuis.ln_pdf_log_tau(log_tau);
                if self.rng.random::<f64>().ln() < log_alpha {
                    accepted = true;
                    self.state.tau = prop.exp();
                    self.state.loglik = ll;
                    if let Some(f) = self.state.factors.as_mut() {
                        f.1 = cf;
                    }
                }
            }
        }
        self.tuning.tau.record(accepted);
        let mut ls = self.tuning.tau_log_sd;
        self.tuning.adapt(&mut ls, accepted);
        self.tuning.tau_log_sd = ls;
        Ok(())
    }

    fn reset_counters(&mut self) {
        let m = self.prep.n_indices();
        self.tuning.rw = vec![Counter::default(); m];
        self.tuning.select = vec![Counter::default(); m];
        self.tuning.scale = vec![Counter::default(); m];
        self.tuning.tau = Counter::default();
    }

    fn record(&self, chain: usize, iter: usize) -> Draw {
        let st = &self.state;
        Draw {
            chain,
            iter,
            theta_star: (0..self.prep.n_indices())
                .map(|m| self.prep.theta_star(m, &st.coef[m]))
                .collect(),
            coef: st.coef.iter().map(|c| c.iter().copied().collect()).collect(),
            nu: st.nu.clone(),
            gamma: st.gamma.iter().copied().collect(),
            sigma2: st.sigma2,
            lambda: 1.0 / st.tau,
            loglik: st.loglik,
        }
    }

    fn acceptance(&self, chain: usize, names: &[String]) -> Vec<AcceptanceRate> {
        let mut out = Vec::new();
        let mut push = |block: String, c: &Counter| {
            if c.total > 0 {
                out.push(AcceptanceRate {
                    block,
                    chain,
                    rate: c.accepted as f64 / c.total as f64,
                });
            }
        };
        for (m, name) in names.iter().enumerate() {
            push(format!("weights.{name}"), &self.tuning.rw[m]);
            push(format!("selection.{name}"), &self.tuning.select[m]);
            push(format!("scale.{name}"), &self.tuning.scale[m]);
        }
        push("lambda".into(), &self.tuning.tau);
        out
    }
}

fn run_chain(
    prep: &Prepared<'_>,
    config: &McmcConfig,
    chain: usize,
    names: &[String],
) -> Result<(Vec<Draw>, Vec<AcceptanceRate>)> {
    let mut ch = Chain::init(prep, config, chain)?;
    let mut draws = Vec::with_capacity(config.retained_per_chain());
    for it in 0..config.iterations {
        ch.tuning.adapting = config.adapt && it < config.burnin;
        ch.tuning.step = ((it + 1) as f64).powf(-0.6);
        if it == config.burnin {
            ch.reset_counters();
        }
        ch.update_weights();
        ch.update_nuisance()?;
        if it >= config.burnin && (it - config.burnin) % config.thin == config.thin - 1 {
            draws.push(ch.record(chain, it + 1));
        }
    }
    Ok((draws, ch.acceptance(chain, names)))
}

/// Runs `config.chains` chains, each seeded from `(config.seed, chain)`.
/// Draws are ordered by chain then iteration.
pub fn run_mcmc(dataset: &Dataset, spec: &ModelSpec, config: &McmcConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    spec.validate(dataset)?;
    let prep = Prepared::new(dataset, spec, config.prior_only);
    let names: Vec<String> = spec.structure.groups.iter().map(|g| g.name.clone()).collect();
    let results: Vec<Result<(Vec<Draw>, Vec<AcceptanceRate>)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&prep, config, c, &names))
        .collect();
    let mut draws = Vec::with_capacity(config.chains * config.retained_per_chain());
    let mut acceptance = Vec::new();
    for r in results {
        let (d, a) = r?;
        draws.extend(d);
        acceptance.extend(a);
    }
    let mut samples = PosteriorSamples {
        draws,
        seed: config.seed,
        chains: config.chains,
        index_names: names,
        columns: spec.structure.groups.iter().map(|g| g.columns.clone()).collect(),
        families: spec.priors.iter().map(|p| p.family_name().to_string()).collect(),
        kernel: spec.kernel,
        acceptance,
        rhat: Vec::new(),
    };
    if config.diagnostics {
        samples.rhat = rhat_table(&samples);
        for (name, r) in &samples.rhat {
            if *r > RHAT_WARNING {
                log::warn!("split R-hat for {name} is {r:.3} (above {RHAT_WARNING})");
            }
        }
    }
    Ok(samples)
}

/// Split-R-hat of every scalar parameter, in output column order.
pub fn rhat_table(samples: &PosteriorSamples) -> Vec<(String, f64)> {
    let chains = samples.chains;
    let series = |f: &dyn Fn(&Draw) -> f64| -> Vec<Vec<f64>> {
        (0..chains)
            .map(|c| samples.draws.iter().filter(|d| d.chain == c).map(f).collect())
            .collect()
    };
    let mut out = Vec::new();
    if let Some(first) = samples.draws.first() {
        for (m, t) in first.theta_star.iter().enumerate() {
            for l in 0..t.len() {
                out.push((
                    format!("theta_star.{}.{}", m + 1, l + 1),
                    split_rhat(&series(&|d: &Draw| d.theta_star[m][l])),
                ));
            }
        }
        for q in 0..first.gamma.len() {
            out.push((format!("gamma.{}", q + 1), split_rhat(&series(&|d: &Draw| d.gamma[q]))));
        }
    }
    out.push(("sigma2".into(), split_rhat(&series(&|d: &Draw| d.sigma2))));
    out.push(("lambda".into(), split_rhat(&series(&|d: &Draw| d.lambda))));
    out.push(("loglik".into(), split_rhat(&series(&|d: &Draw| d.loglik))));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_matrix;
    use crate::model::{full_order_matrix, IndexGroup, Transform};
    use crate::priors::{gamma_ln_pdf, PriorFamily};
    use crate::stats::{ks_two_sample, mean};
    use approx::assert_abs_diff_eq;
    use statrs::function::gamma::ln_gamma;

    fn toy_dataset(n: usize, p: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            f(&row) + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(y, x, DMatrix::from_element(n, 1, 1.0)).unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let ll = marginal_log_likelihood(
            &DVector::from_element(1, 0.0),
            &DMatrix::zeros(1, 0),
            &DVector::zeros(0),
            0.5,
            1.0,
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_abs_diff_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..=30);
            let e = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
            let k = kernel_matrix(&e, &KernelSpec::gaussian()).unwrap();
            let z = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let gamma = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let (s2, lam) = (rng.random_range(0.2..2.0), rng.random_range(0.1..10.0));
            let cov = (DMatrix::identity(n, n) + &k / lam) * s2;
            let r = &y - &z * &gamma;
            let inv = cov.clone().try_inverse().unwrap();
            let oracle = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * cov.determinant().ln()
                - 0.5 * (r.transpose() * inv * &r)[0];
            let ll = marginal_log_likelihood(&y, &z, &gamma, s2, lam, &k).unwrap();
            assert!((ll - oracle).abs() < 1e-8, "{ll} vs {oracle}");
        }
    }

    #[test]
    fn large_lambda_is_linear_model() {
        let n = 10;
        let e = DMatrix::from_fn(n, 1, |i, _| i as f64 * 0.2);
        let k = kernel_matrix(&e, &KernelSpec::gaussian()).unwrap();
        let y = DVector::from_fn(n, |i, _| (i as f64).sin());
        let z = DMatrix::from_element(n, 1, 1.0);
        let gamma = DVector::from_element(1, 0.1);
        let s2 = 0.7;
        let ll = marginal_log_likelihood(&y, &z, &gamma, s2, 1e8, &k).unwrap();
        let r = &y - &z * &gamma;
        let oracle = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * r.norm_squared() / s2;
        assert!((ll - oracle).abs() < 1e-6);
    }

    #[test]
    fn likelihood_input_errors() {
        let k = DMatrix::identity(2, 2);
        let y = DVector::zeros(3);
        assert!(marginal_log_likelihood(&y, &DMatrix::zeros(3, 0), &DVector::zeros(0), 1.0, 1.0, &k).is_err());
        let y = DVector::from_vec(vec![0.0, f64::NAN]);
        assert!(marginal_log_likelihood(&y, &DMatrix::zeros(2, 0), &DVector::zeros(0), 1.0, 1.0, &k).is_err());
    }

    #[test]
    fn same_seed_same_draws() {
        let ds = toy_dataset(30, 3, 1, |x| x[0] - 0.5 * x[1]);
        let spec = ModelSpec::new(IndexStructure::single(3), vec![WeightPriorSpec::unconstrained()], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 200,
            burnin: 100,
            chains: 2,
            seed: 11,
            ..McmcConfig::default()
        };
        let a = run_mcmc(&ds, &spec, &cfg).unwrap();
        let b = run_mcmc(&ds, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        let c = run_mcmc(&ds, &spec, &McmcConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn retained_count_and_thinning() {
        let ds = toy_dataset(20, 2, 2, |x| x[0]);
        let spec = ModelSpec::new(IndexStructure::single(2), vec![WeightPriorSpec::constrained()], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 107,
            burnin: 50,
            thin: 5,
            chains: 3,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        assert_eq!(s.len(), 3 * 11);
        assert_eq!(s.draws[0].iter, 55);
        assert!(s.draws.iter().all(|d| d.loglik.is_finite()));
    }

    #[test]
    fn retained_draws_respect_support() {
        let ds = toy_dataset(40, 4, 5, |x| (x[0] + x[1]).tanh());
        let structure = IndexStructure::new(vec![
            IndexGroup::new("c", vec![0, 1]),
            IndexGroup::new("r", vec![2, 3]).with_transform(Transform::LinearMap(full_order_matrix(2))),
        ]);
        let spec = ModelSpec::new(
            structure,
            vec![WeightPriorSpec::constrained(), WeightPriorSpec::ranked()],
            KernelSpec::gaussian(),
        );
        let cfg = McmcConfig {
            iterations: 400,
            burnin: 100,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        for d in &s.draws {
            for (v, &n) in d.theta_star[0].iter().zip(&d.nu[0]) {
                assert!(*v >= 0.0);
                assert_eq!(*v == 0.0, !n);
            }
            assert!(d.theta_star[1][1] >= d.theta_star[1][0] && d.theta_star[1][0] >= 0.0);
            assert!(d.coef[1].iter().all(|&b| b >= 0.0));
        }
    }

    #[test]
    fn all_excluded_weights_stay_stable() {
        // the spike dominates, so many sweeps run with a constant kernel
        let ds = toy_dataset(50, 3, 9, |_| 0.0);
        let spec = ModelSpec::new(
            IndexStructure::single(3),
            vec![WeightPriorSpec::constrained().with_selection(Some(crate::priors::Inclusion { a0: 1.0, b0: 60.0 }))],
            KernelSpec::gaussian(),
        );
        let cfg = McmcConfig {
            iterations: 300,
            burnin: 50,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        let empty = s.draws.iter().filter(|d| d.nu[0].iter().all(|v| !v)).count();
        assert!(empty > 0);
        assert!(s.draws.iter().all(|d| d.loglik.is_finite()));
    }

    #[test]
    fn null_data_has_low_inclusion() {
        let ds = toy_dataset(60, 4, 21, |_| 0.0);
        let spec = ModelSpec::new(IndexStructure::single(4), vec![WeightPriorSpec::unconstrained()], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 2000,
            burnin: 1000,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        let pip: f64 = s.draws.iter().map(|d| d.nu[0].iter().filter(|&&v| v).count() as f64 / 4.0).sum::<f64>()
            / s.len() as f64;
        assert!(pip < 0.5, "average PIP {pip}");
    }

    /// Log marginal of y with sigma2 integrated against its Inverse-Gamma
    /// prior, for a zero mean.
    fn log_marginal_sigma(y: &DVector<f64>, k: &DMatrix<f64>, tau: f64, nuis: &NuisancePriors) -> f64 {
        let n = y.len();
        let v = DMatrix::identity(n, n) + k * tau;
        let chol = v.cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let q = y.dot(&chol.solve(y));
        let (a, b) = (nuis.sigma2_shape, nuis.sigma2_scale);
        let an = a + 0.5 * n as f64;
        -0.5 * logdet + a * b.ln() - ln_gamma(a) + ln_gamma(an) - an * (b + 0.5 * q).ln()
    }

    #[test]
    fn one_weight_posterior_matches_grid_oracle() {
        let n = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 0.8 * x[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let ds = Dataset::new(y.clone(), x.clone(), DMatrix::zeros(n, 0)).unwrap();
        let prior = WeightPriorSpec::constrained().with_selection(None);
        let kernel = KernelSpec::polynomial(1);
        let spec = ModelSpec::new(IndexStructure::single(1), vec![prior.clone()], kernel);
        let nuis = spec.nuisance;

        // grid over (theta, log tau) with sigma2 integrated analytically
        let thetas: Vec<f64> = (1..=600).map(|i| i as f64 * 0.01).collect();
        let log_taus: Vec<f64> = (0..=240).map(|i| -12.0 + i as f64 * 0.1).collect();
        let mut logw = Vec::new();
        for &t in &thetas {
            let e = &x * t;
            let k = kernel_matrix(&e, &kernel).unwrap();
            for &lt in &log_taus {
                let lp = log_marginal_sigma(&y, &k, lt.exp(), &nuis)
                    + gamma_ln_pdf(t, 1.0, 1.0)
                    + nuis.ln_pdf_log_tau(lt);
                logw.push((t, lp));
            }
        }
        let mx = logw.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (t, lp) in &logw {
            let w = (lp - mx).exp();
            num += t * w;
            den += w;
        }
        let oracle = num / den;

        let cfg = McmcConfig {
            iterations: 60_000,
            burnin: 5_000,
            chains: 2,
            seed: 5,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        let post: Vec<f64> = s.draws.iter().map(|d| d.theta_star[0][0]).collect();
        let m = mean(&post);
        assert!((m - oracle).abs() < 0.02, "mcmc {m} vs grid {oracle}");
    }

    #[test]
    fn sigma2_conditional_mean_matches_conjugate_formula() {
        let base = toy_dataset(40, 2, 31, |x| x[0]);
        let ds = Dataset::new(base.y.clone(), base.x.clone(), DMatrix::zeros(40, 0)).unwrap();
        let spec = ModelSpec::new(IndexStructure::single(2), vec![WeightPriorSpec::unconstrained()], KernelSpec::gaussian());
        let prep = Prepared::new(&ds, &spec, false);
        let mut rel_errs = Vec::new();
        for rep in 0..50 {
            let cfg = McmcConfig {
                seed: rep,
                ..McmcConfig::default()
            };
            let mut ch = Chain::init(&prep, &cfg, 0).unwrap();
            let quad = ch.state.cov().quad_form(&ch.state.resid);
            let shape = spec.nuisance.sigma2_shape + 20.0;
            let expected = (spec.nuisance.sigma2_scale + 0.5 * quad) / (shape - 1.0);
            let snapshot = ch.state.clone();
            let draws = 2000;
            let mut acc = 0.0;
            for _ in 0..draws {
                ch.state = snapshot.clone();
                ch.update_nuisance().unwrap();
                acc += ch.state.sigma2;
            }
            rel_errs.push((acc / draws as f64 - expected) / expected);
        }
        assert!(mean(&rel_errs).abs() < 0.01, "{}", mean(&rel_errs));
    }

    #[test]
    fn gamma_conditional_without_kernel_is_linear_regression() {
        // with tau tiny the gamma full conditional is the conjugate regression posterior
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / n as f64 });
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * z[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ds = Dataset::new(y.clone(), x, z.clone()).unwrap();
        let spec = ModelSpec::new(IndexStructure::single(1), vec![WeightPriorSpec::unconstrained()], KernelSpec::gaussian());
        let prep = Prepared::new(&ds, &spec, false);
        let mut ch = Chain::init(&prep, &McmcConfig::default(), 0).unwrap();
        ch.state.tau = 1e-10;
        let f = prep.factor(&ch.state.e, 1e-10).unwrap();
        ch.state.factors = Some(f);
        ch.state.sigma2 = 0.09;
        let prec = z.transpose() * &z / 0.09 + DMatrix::identity(2, 2) / 100.0;
        let expect = prec.clone().try_inverse().unwrap() * (z.transpose() * &y / 0.09);
        let snapshot = ch.state.clone();
        let mut acc = DVector::zeros(2);
        let reps = 4000;
        for _ in 0..reps {
            ch.state = snapshot.clone();
            ch.tuning.adapting = false;
            ch.update_nuisance().unwrap();
            acc += &ch.state.gamma;
        }
        let got = acc / reps as f64;
        assert!((&got - &expect).amax() < 0.02, "{got} vs {expect}");
    }

    #[test]
    fn two_state_selection_balance() {
        // prior-only birth/death on one component: stationary inclusion rate
        // equals E[pi] and the two transition flows balance
        let ds = toy_dataset(5, 1, 1, |_| 0.0);
        let prior = WeightPriorSpec::constrained().with_selection(Some(crate::priors::Inclusion { a0: 30.0, b0: 10.0 }));
        let spec = ModelSpec::new(IndexStructure::single(1), vec![prior], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 200_001,
            burnin: 1,
            prior_only: true,
            diagnostics: false,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        let states: Vec<bool> = s.draws.iter().map(|d| d.nu[0][0]).collect();
        let n = (states.len() - 1) as f64;
        let up = states.windows(2).filter(|w| !w[0] && w[1]).count() as f64 / n;
        let down = states.windows(2).filter(|w| w[0] && !w[1]).count() as f64 / n;
        let on = states.iter().filter(|&&v| v).count() as f64 / states.len() as f64;
        assert!((up - down).abs() < 0.01);
        assert!((on - 0.75).abs() < 0.01, "{on}");
    }

    #[test]
    fn prior_only_matches_prior_draws() {
        let ds = toy_dataset(5, 3, 1, |_| 0.0);
        let prior = WeightPriorSpec {
            family: PriorFamily::DirichletSs {
                alpha: vec![2.0, 1.0, 0.5],
                b_theta: 3.0,
            },
            selection: Some(crate::priors::DEFAULT_INCLUSION),
        };
        let spec = ModelSpec::new(IndexStructure::single(3), vec![prior.clone()], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 60_000,
            burnin: 1000,
            thin: 10,
            prior_only: true,
            diagnostics: false,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for l in 0..3 {
            let mcmc: Vec<f64> = s.draws.iter().map(|d| d.theta_star[0][l]).collect();
            let direct: Vec<f64> = (0..20_000)
                .map(|_| crate::priors::sample_prior(&prior, &Transform::Identity, 3, &mut rng).0[l])
                .collect();
            let p = ks_two_sample(&mcmc, &direct).p_value;
            assert!(p > 0.01, "component {l} p {p}");
        }
    }

    #[test]
    fn lambda_acceptance_after_adaptation() {
        let ds = toy_dataset(80, 3, 8, |x| (x[0] + 0.5 * x[1]).tanh());
        let spec = ModelSpec::new(IndexStructure::single(3), vec![WeightPriorSpec::constrained()], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 1500,
            burnin: 750,
            ..McmcConfig::default()
        };
        let s = run_mcmc(&ds, &spec, &cfg).unwrap();
        let rate = s.acceptance.iter().find(|a| a.block == "lambda").unwrap().rate;
        assert!(rate > 0.2 && rate < 0.6, "{rate}");
    }
}
