//! Weight priors: log densities and prior draws for every family, relative
//! potency factor (RPF) to Dirichlet hyperparameter construction, and the
//! default priors on the nuisance parameters.
//!
//! Each index carries coefficients on its own "coefficient scale": the raw
//! weights for unstructured families, the nonnegative increments `beta` for
//! ranked weights, basis coefficients for smooth weights, and a single scale
//! for fixed weights. [`WeightPriorSpec::loading`] maps coefficients back to
//! weights on the raw exposures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{BmimError, Result};
use crate::model::Transform;

pub const DEFAULT_SIGMA2_THETA: f64 = 0.25;
pub const DEFAULT_A_THETA: f64 = 1.0;
pub const DEFAULT_B_THETA: f64 = 1.0;
pub const DEFAULT_A_BETA: f64 = 1.0;
pub const DEFAULT_B_BETA: f64 = 1.0;
pub const DEFAULT_A_RHO: f64 = 1.0;
pub const DEFAULT_B_RHO: f64 = 1.0;
pub const DEFAULT_INCLUSION: Inclusion = Inclusion { a0: 2.0, b0: 2.0 };
pub const DEFAULT_CONCENTRATION: f64 = 50.0;
/// Floor applied to relative potency factors before building Dirichlet weights.
pub const RPF_FLOOR: f64 = 0.001;

/// Beta hyperprior on the inclusion probability of a spike-and-slab prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inclusion {
    pub a0: f64,
    pub b0: f64,
}

impl Inclusion {
    pub fn mean(&self) -> f64 {
        self.a0 / (self.a0 + self.b0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorFamily {
    /// Normal slab on each weight, sign identified by `1^T theta >= 0`.
    Unconstrained { sigma2_theta: f64 },
    /// Gamma slab (rate parameterization) enforcing nonnegative weights.
    Constrained { a_theta: f64, b_theta: f64 },
    /// Dirichlet on proportion weights times a Gamma prior on their sum.
    TargetedDirichlet { alpha: Vec<f64>, a_rho: f64, b_rho: f64 },
    /// Independent `Gamma(alpha_l, b_theta)` slabs, a Dirichlet slab after normalization.
    DirichletSs { alpha: Vec<f64>, b_theta: f64 },
    /// Gamma slabs on the increments of ordered weights.
    Ranked { a_beta: f64, b_beta: f64 },
    /// Normal slab on basis coefficients of a smooth weight function.
    Smooth { sigma2_theta: f64 },
    /// Known proportion weights with a Gamma prior on the overall scale.
    Fixed { weights: Vec<f64>, a_rho: f64, b_rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightPriorSpec {
    pub family: PriorFamily,
    pub selection: Option<Inclusion>,
}

impl WeightPriorSpec {
    pub fn unconstrained() -> Self {
        WeightPriorSpec {
            family: PriorFamily::Unconstrained {
                sigma2_theta: DEFAULT_SIGMA2_THETA,
            },
            selection: Some(DEFAULT_INCLUSION),
        }
    }

    pub fn constrained() -> Self {
        WeightPriorSpec {
            family: PriorFamily::Constrained {
                a_theta: DEFAULT_A_THETA,
                b_theta: DEFAULT_B_THETA,
            },
            selection: Some(DEFAULT_INCLUSION),
        }
    }

    /// Targeted Dirichlet centred on the given RPFs.
    pub fn targeted_dirichlet(rpf: &[f64], c: f64) -> Result<Self> {
        Ok(WeightPriorSpec {
            family: PriorFamily::TargetedDirichlet {
                alpha: rpf_to_dirichlet(rpf, c)?,
                a_rho: DEFAULT_A_RHO,
                b_rho: DEFAULT_B_RHO,
            },
            selection: None,
        })
    }

    /// Dirichlet slab with component selection. The Gamma rate defaults to
    /// the concentration `c`, so the slab sum has unit prior mean.
    pub fn dirichlet_ss(rpf: &[f64], c: f64) -> Result<Self> {
        Ok(WeightPriorSpec {
            family: PriorFamily::DirichletSs {
                alpha: rpf_to_dirichlet(rpf, c)?,
                b_theta: c,
            },
            selection: Some(DEFAULT_INCLUSION),
        })
    }

    pub fn ranked() -> Self {
        WeightPriorSpec {
            family: PriorFamily::Ranked {
                a_beta: DEFAULT_A_BETA,
                b_beta: DEFAULT_B_BETA,
            },
            selection: Some(DEFAULT_INCLUSION),
        }
    }

    pub fn smooth() -> Self {
        WeightPriorSpec {
            family: PriorFamily::Smooth {
                sigma2_theta: DEFAULT_SIGMA2_THETA,
            },
            selection: Some(DEFAULT_INCLUSION),
        }
    }

    pub fn fixed(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(BmimError::Prior("fixed weights must be nonnegative".into()));
        }
        let s: f64 = weights.iter().sum();
        if s <= 0.0 {
            return Err(BmimError::Prior("fixed weights must have a positive sum".into()));
        }
        Ok(WeightPriorSpec {
            family: PriorFamily::Fixed {
                weights: weights.iter().map(|v| v / s).collect(),
                a_rho: DEFAULT_A_RHO,
                b_rho: DEFAULT_B_RHO,
            },
            selection: None,
        })
    }

    pub fn with_selection(mut self, selection: Option<Inclusion>) -> Self {
        self.selection = selection;
        self
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            PriorFamily::Unconstrained { .. } => "unconstrained",
            PriorFamily::Constrained { .. } => "constrained",
            PriorFamily::TargetedDirichlet { .. } => "dirichlet",
            PriorFamily::DirichletSs { .. } => "dirichlet_ss",
            PriorFamily::Ranked { .. } => "ranked",
            PriorFamily::Smooth { .. } => "smooth",
            PriorFamily::Fixed { .. } => "fixed",
        }
    }

    /// Whether active coefficients must be strictly positive.
    pub fn is_positive(&self) -> bool {
        !matches!(
            self.family,
            PriorFamily::Unconstrained { .. } | PriorFamily::Smooth { .. }
        )
    }

    /// Whether the prior is symmetric under a global sign flip, in which case
    /// the sign is identified by flipping draws to `1^T theta >= 0`.
    pub fn is_sign_symmetric(&self) -> bool {
        !self.is_positive()
    }

    pub fn has_selection(&self) -> bool {
        self.selection.is_some()
    }

    /// Number of free coefficients for a group of `l` exposures.
    pub fn coef_dim(&self, transform: &Transform, l: usize) -> usize {
        match self.family {
            PriorFamily::Fixed { .. } => 1,
            _ => transform.coef_dim(l),
        }
    }

    /// `L x J` map from coefficients to weights on the raw exposures.
    pub fn loading(&self, transform: &Transform, l: usize) -> DMatrix<f64> {
        match &self.family {
            PriorFamily::Fixed { weights, .. } => {
                let norm = weights.iter().map(|v| v * v).sum::<f64>().sqrt();
                DMatrix::from_iterator(l, 1, weights.iter().map(|v| v / norm))
            }
            _ => transform.loading(l),
        }
    }

    /// Checks hyperparameters and compatibility with the group's transform.
    pub fn validate(&self, transform: &Transform, l: usize) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(BmimError::Prior(format!("{name} must be positive, got {v}")))
            }
        }
        if let Some(inc) = self.selection {
            positive("a0", inc.a0)?;
            positive("b0", inc.b0)?;
        }
        let j = self.coef_dim(transform, l);
        match &self.family {
            PriorFamily::Unconstrained { sigma2_theta } => positive("sigma2_theta", *sigma2_theta)?,
            PriorFamily::Constrained { a_theta, b_theta } => {
                positive("a_theta", *a_theta)?;
                positive("b_theta", *b_theta)?;
            }
            PriorFamily::TargetedDirichlet { alpha, a_rho, b_rho } => {
                positive("a_rho", *a_rho)?;
                positive("b_rho", *b_rho)?;
                check_alpha(alpha, j)?;
                if self.selection.is_some() {
                    return Err(BmimError::Prior(
                        "the targeted Dirichlet prior has no component selection; use dirichlet_ss".into(),
                    ));
                }
            }
            PriorFamily::DirichletSs { alpha, b_theta } => {
                positive("b_theta", *b_theta)?;
                check_alpha(alpha, j)?;
            }
            PriorFamily::Ranked { a_beta, b_beta } => {
                positive("a_beta", *a_beta)?;
                positive("b_beta", *b_beta)?;
                if !matches!(transform, Transform::LinearMap(_)) {
                    return Err(BmimError::Prior("ranked prior requires an ordering transform".into()));
                }
            }
            PriorFamily::Smooth { sigma2_theta } => {
                positive("sigma2_theta", *sigma2_theta)?;
                if !matches!(transform, Transform::Basis(_)) {
                    return Err(BmimError::Prior("smooth prior requires a basis transform".into()));
                }
            }
            PriorFamily::Fixed { weights, a_rho, b_rho } => {
                positive("a_rho", *a_rho)?;
                positive("b_rho", *b_rho)?;
                if weights.len() != l {
                    return Err(BmimError::Prior(format!(
                        "fixed weights have length {} but the index has {l} exposures",
                        weights.len()
                    )));
                }
                if weights.iter().any(|&v| v < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(BmimError::Prior("fixed weights must be nonnegative and sum to 1".into()));
                }
                if self.selection.is_some() {
                    return Err(BmimError::Prior("fixed weights have no component selection".into()));
                }
                if *transform != Transform::Identity {
                    return Err(BmimError::Prior("fixed weights require an identity transform".into()));
                }
            }
        }
        Ok(())
    }

    /// Log slab density of coefficient `j` at `v` for families whose slab
    /// factorizes over components; `-inf` outside the support.
    pub fn slab_log_density(&self, j: usize, v: f64) -> f64 {
        match &self.family {
            PriorFamily::Unconstrained { sigma2_theta } | PriorFamily::Smooth { sigma2_theta } => {
                normal_ln_pdf(v, *sigma2_theta)
            }
            PriorFamily::Constrained { a_theta, b_theta } => gamma_ln_pdf(v, *a_theta, *b_theta),
            PriorFamily::DirichletSs { alpha, b_theta } => gamma_ln_pdf(v, alpha[j], *b_theta),
            PriorFamily::Ranked { a_beta, b_beta } => gamma_ln_pdf(v, *a_beta, *b_beta),
            PriorFamily::Fixed { a_rho, b_rho, .. } => gamma_ln_pdf(v, *a_rho, *b_rho),
            PriorFamily::TargetedDirichlet { .. } => {
                unreachable!("targeted Dirichlet density does not factorize")
            }
        }
    }

    /// Log joint density of the active coefficients given the indicators,
    /// or `-inf` when the coefficients leave the family's support.
    pub fn log_density_coef(&self, coef: &[f64], nu: &[bool]) -> f64 {
        if coef.len() != nu.len() {
            return f64::NEG_INFINITY;
        }
        for (&c, &n) in coef.iter().zip(nu) {
            if !n && c != 0.0 {
                return f64::NEG_INFINITY;
            }
            if n && self.is_positive() && !(c > 0.0) {
                return f64::NEG_INFINITY;
            }
        }
        match &self.family {
            PriorFamily::TargetedDirichlet { alpha, a_rho, b_rho } => {
                targeted_dirichlet_ln_pdf(coef, alpha, *a_rho, *b_rho)
            }
            _ => coef
                .iter()
                .zip(nu)
                .enumerate()
                .filter(|(_, (_, &n))| n)
                .map(|(j, (&c, _))| self.slab_log_density(j, c))
                .sum(),
        }
    }

    /// Draws one value from the slab of coefficient `j`.
    pub fn sample_slab<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> f64 {
        match &self.family {
            PriorFamily::Unconstrained { sigma2_theta } | PriorFamily::Smooth { sigma2_theta } => {
                Normal::new(0.0, sigma2_theta.sqrt()).expect("valid sd").sample(rng)
            }
            PriorFamily::Constrained { a_theta, b_theta } => sample_gamma(*a_theta, *b_theta, rng),
            PriorFamily::DirichletSs { alpha, b_theta } => sample_gamma(alpha[j], *b_theta, rng),
            PriorFamily::Ranked { a_beta, b_beta } => sample_gamma(*a_beta, *b_beta, rng),
            PriorFamily::Fixed { a_rho, b_rho, .. } => sample_gamma(*a_rho, *b_rho, rng),
            PriorFamily::TargetedDirichlet { .. } => {
                unreachable!("targeted Dirichlet has no per-component slab")
            }
        }
    }

    /// Draws `(coef, nu, pi)` on the coefficient scale. `pi` is the sampled
    /// inclusion probability, or 1 for families without selection.
    pub fn sample_coef<R: Rng + ?Sized>(&self, j_dim: usize, rng: &mut R) -> (Vec<f64>, Vec<bool>, f64) {
        match &self.family {
            PriorFamily::TargetedDirichlet { alpha, a_rho, b_rho } => {
                let w = sample_dirichlet(alpha, rng);
                let s = sample_gamma(*a_rho, *b_rho, rng);
                (w.iter().map(|v| s * v).collect(), vec![true; j_dim], 1.0)
            }
            _ => {
                let pi = match self.selection {
                    Some(inc) => Beta::new(inc.a0, inc.b0).expect("valid beta").sample(rng),
                    None => 1.0,
                };
                let mut coef = vec![0.0; j_dim];
                let mut nu = vec![false; j_dim];
                for j in 0..j_dim {
                    let include = self.selection.is_none() || rng.random::<f64>() < pi;
                    if include {
                        nu[j] = true;
                        coef[j] = self.sample_slab(j, rng);
                    }
                }
                (coef, nu, pi)
            }
        }
    }
}

fn check_alpha(alpha: &[f64], j: usize) -> Result<()> {
    if alpha.len() != j {
        return Err(BmimError::Prior(format!(
            "Dirichlet alpha has length {} but the index has {j} components",
            alpha.len()
        )));
    }
    if alpha.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
        return Err(BmimError::Prior("Dirichlet alpha entries must be positive".into()));
    }
    Ok(())
}

pub(crate) fn normal_ln_pdf(v: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * v * v / var
}

/// Gamma log density with shape `a` and rate `b`.
pub fn gamma_ln_pdf(v: f64, a: f64, b: f64) -> f64 {
    if !(v > 0.0) || !v.is_finite() {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) + (a - 1.0) * v.ln() - b * v
}

/// Density on the weights induced by `w ~ Dirichlet(alpha)` and
/// `sum(weights) ~ Gamma(a_rho, b_rho)`.
pub fn targeted_dirichlet_ln_pdf(theta_star: &[f64], alpha: &[f64], a_rho: f64, b_rho: f64) -> f64 {
    if theta_star.iter().any(|&v| !(v > 0.0)) {
        return f64::NEG_INFINITY;
    }
    let alpha_sum: f64 = alpha.iter().sum();
    let s: f64 = theta_star.iter().sum();
    let mut out = ln_gamma(alpha_sum);
    for (&t, &a) in theta_star.iter().zip(alpha) {
        out += (a - 1.0) * t.ln() - ln_gamma(a);
    }
    out + (1.0 - alpha_sum) * s.ln() + gamma_ln_pdf(s, a_rho, b_rho)
}

/// Gamma draw (shape, rate) that never returns an exact zero.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng);
    g.max(f64::MIN_POSITIVE)
}

/// Dirichlet draw by normalizing independent unit-rate Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = alpha.iter().map(|&a| sample_gamma(a, 1.0, rng)).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Dirichlet hyperparameters `alpha_l = c a_l` centred on relative potency
/// factors `a`. Entries below [`RPF_FLOOR`] are raised to it and the vector
/// renormalized.
pub fn rpf_to_dirichlet(a: &[f64], c: f64) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(BmimError::Prior("empty RPF vector".into()));
    }
    if a.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(BmimError::Prior("RPF entries must be nonnegative".into()));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(BmimError::Prior(format!("concentration c must be positive, got {c}")));
    }
    let sum: f64 = a.iter().sum();
    if sum <= 0.0 {
        return Err(BmimError::Prior("RPF entries sum to zero".into()));
    }
    if (sum - 1.0).abs() > 1e-9 {
        log::warn!("RPF vector sums to {sum}; rescaling to 1");
    }
    let floored: Vec<f64> = a.iter().map(|v| (v / sum).max(RPF_FLOOR)).collect();
    let s2: f64 = floored.iter().sum();
    Ok(floored.iter().map(|v| c * v / s2).collect())
}

/// Pulls weights on the raw exposures back to the coefficient scale.
pub fn pull_back(theta_star: &[f64], spec: &WeightPriorSpec, transform: &Transform) -> Result<Vec<f64>> {
    let l = theta_star.len();
    let t = DVector::from_column_slice(theta_star);
    match (&spec.family, transform) {
        (PriorFamily::Fixed { .. }, _) => {
            let load = spec.loading(transform, l);
            let s = load.column(0).dot(&t);
            let resid = (&t - load.column(0) * s).amax();
            if resid > 1e-9 * (1.0 + s.abs()) {
                return Err(BmimError::Support("weights are not proportional to the fixed weights".into()));
            }
            Ok(vec![s])
        }
        (_, Transform::Identity) => Ok(theta_star.to_vec()),
        (_, Transform::LinearMap(a)) => {
            if a.nrows() != l {
                return Err(BmimError::Dimension("linear map does not match weight length".into()));
            }
            let beta = a
                .clone()
                .lu()
                .solve(&t)
                .ok_or_else(|| BmimError::Structure("singular linear map".into()))?;
            Ok(beta.iter().map(|&v| if v.abs() < 1e-12 { 0.0 } else { v }).collect())
        }
        (_, Transform::Basis(psi)) => {
            if psi.nrows() != l {
                return Err(BmimError::Dimension("basis does not match weight length".into()));
            }
            Ok((psi.transpose() * t).iter().copied().collect())
        }
    }
}

/// Log prior of one index's weights (on the raw exposure scale) given the
/// inclusion indicators on the coefficient scale. Fails on support
/// violations rather than returning `-inf`.
pub fn log_prior(theta_star: &[f64], nu: &[bool], spec: &WeightPriorSpec, transform: &Transform) -> Result<f64> {
    let coef = pull_back(theta_star, spec, transform)?;
    if coef.len() != nu.len() {
        return Err(BmimError::Dimension(format!(
            "{} coefficients but {} inclusion indicators",
            coef.len(),
            nu.len()
        )));
    }
    for (j, (&c, &n)) in coef.iter().zip(nu).enumerate() {
        if !n && c != 0.0 {
            return Err(BmimError::Support(format!("component {} is excluded but nonzero", j + 1)));
        }
        if n && spec.is_positive() && !(c > 0.0) {
            let what = if matches!(spec.family, PriorFamily::Ranked { .. }) {
                "ordering increment"
            } else {
                "weight"
            };
            return Err(BmimError::Support(format!(
                "{what} {} is {c} under the nonnegative {} prior",
                j + 1,
                spec.family_name()
            )));
        }
    }
    let lp = spec.log_density_coef(&coef, nu);
    if lp == f64::NEG_INFINITY {
        return Err(BmimError::Support("weights outside the prior support".into()));
    }
    Ok(lp)
}

/// One prior draw of `(theta_star, nu)`: weights on the raw exposures and
/// indicators on the coefficient scale. Sign-symmetric families are returned
/// with `1^T theta_star >= 0`.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &WeightPriorSpec,
    transform: &Transform,
    l: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<bool>) {
    let j = spec.coef_dim(transform, l);
    let (mut coef, nu, _) = spec.sample_coef(j, rng);
    let load = spec.loading(transform, l);
    let mut theta = &load * DVector::from_column_slice(&coef);
    if spec.is_sign_symmetric() && theta.sum() < 0.0 {
        coef.iter_mut().for_each(|v| *v = -*v);
        theta = -theta;
    }
    (theta.iter().copied().collect(), nu)
}

/// Default priors on the covariate coefficients, residual variance and
/// kernel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisancePriors {
    /// Prior variance of each covariate coefficient (mean zero).
    pub gamma_variance: f64,
    /// Inverse-Gamma shape for the residual variance.
    pub sigma2_shape: f64,
    /// Inverse-Gamma scale for the residual variance.
    pub sigma2_scale: f64,
    /// Gamma shape for `1 / lambda`.
    pub tau_shape: f64,
    /// Gamma rate for `1 / lambda`.
    pub tau_rate: f64,
}

impl Default for NuisancePriors {
    fn default() -> Self {
        nuisance_priors()
    }
}

pub fn nuisance_priors() -> NuisancePriors {
    NuisancePriors {
        gamma_variance: 100.0,
        sigma2_shape: 0.001,
        sigma2_scale: 0.001,
        tau_shape: 1.0,
        tau_rate: 0.1,
    }
}

impl NuisancePriors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_variance", self.gamma_variance),
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_scale", self.sigma2_scale),
            ("tau_shape", self.tau_shape),
            ("tau_rate", self.tau_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BmimError::Prior(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Log prior density of `log(1/lambda)`.
    pub fn ln_pdf_log_tau(&self, log_tau: f64) -> f64 {
        gamma_ln_pdf(log_tau.exp(), self.tau_shape, self.tau_rate) + log_tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::full_order_matrix;
    use crate::stats::{ks_one_sample, ks_two_sample, mean, variance};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Beta as BetaDist, ContinuousCDF, Gamma as GammaDist};

    #[test]
    fn rpf_scaling() {
        let alpha = rpf_to_dirichlet(&[0.5, 0.25, 0.25], 20.0).unwrap();
        for (a, e) in alpha.iter().zip([10.0, 5.0, 5.0]) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
        let flat = rpf_to_dirichlet(&[1.0 / 3.0; 3], 9.0).unwrap();
        for a in flat {
            assert_abs_diff_eq!(a, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rpf_errors_and_floor() {
        assert!(rpf_to_dirichlet(&[0.5, -0.5], 10.0).is_err());
        assert!(rpf_to_dirichlet(&[0.5, 0.5], 0.0).is_err());
        let alpha = rpf_to_dirichlet(&[1.0, 0.0], 10.0).unwrap();
        assert!(alpha[1] > 0.0);
        assert_abs_diff_eq!(alpha.iter().sum::<f64>(), 10.0, epsilon = 1e-12);
        // unnormalized input is rescaled
        let alpha = rpf_to_dirichlet(&[2.0, 1.0, 1.0], 20.0).unwrap();
        assert_abs_diff_eq!(alpha[0], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn rpf_variance_formula_monte_carlo() {
        let a = [0.5, 0.25, 0.25];
        let c = 100.0;
        let alpha = rpf_to_dirichlet(&a, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w1: Vec<f64> = (0..1_000_000).map(|_| sample_dirichlet(&alpha, &mut rng)[0]).collect();
        assert_abs_diff_eq!(variance(&w1), 0.25 / 101.0, epsilon = 5e-4);
        assert_abs_diff_eq!(mean(&w1), 0.5, epsilon = 1e-3);
    }

    #[test]
    fn targeted_dirichlet_single_component_is_scale_density() {
        let spec = WeightPriorSpec {
            family: PriorFamily::TargetedDirichlet {
                alpha: vec![4.0],
                a_rho: 2.5,
                b_rho: 1.5,
            },
            selection: None,
        };
        for v in [0.1, 1.0, 3.7] {
            let lp = log_prior(&[v], &[true], &spec, &Transform::Identity).unwrap();
            assert_abs_diff_eq!(lp, gamma_ln_pdf(v, 2.5, 1.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn dirichlet_ss_density_arithmetic() {
        let spec = WeightPriorSpec {
            family: PriorFamily::DirichletSs {
                alpha: vec![2.0, 3.0],
                b_theta: 1.0,
            },
            selection: Some(DEFAULT_INCLUSION),
        };
        let lp = log_prior(&[1.0, 1.0], &[true, true], &spec, &Transform::Identity).unwrap();
        assert_abs_diff_eq!(lp, -2.0 - 2f64.ln(), epsilon = 1e-12);
        // excluded components contribute nothing
        let lp = log_prior(&[1.0, 0.0], &[true, false], &spec, &Transform::Identity).unwrap();
        assert_abs_diff_eq!(lp, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn support_violations_are_errors() {
        let c = WeightPriorSpec::constrained();
        assert!(log_prior(&[1.0, -0.5], &[true, true], &c, &Transform::Identity).is_err());
        assert!(log_prior(&[1.0, 0.5], &[true, false], &c, &Transform::Identity).is_err());
        let r = WeightPriorSpec::ranked();
        let a = Transform::LinearMap(full_order_matrix(3));
        // decreasing weights pull back to a negative increment
        let err = log_prior(&[2.0, 1.0, 3.0], &[true; 3], &r, &a).unwrap_err();
        assert!(err.to_string().contains("increment"), "{err}");
        assert!(log_prior(&[1.0, 2.0, 3.0], &[true; 3], &r, &a).is_ok());
    }

    #[test]
    fn fixed_prior_scale_density() {
        let spec = WeightPriorSpec::fixed(&[3.0, 1.0]).unwrap();
        let load = spec.loading(&Transform::Identity, 2);
        let theta: Vec<f64> = load.column(0).iter().map(|v| 2.0 * v).collect();
        let lp = log_prior(&theta, &[true], &spec, &Transform::Identity).unwrap();
        assert_abs_diff_eq!(lp, gamma_ln_pdf(2.0, 1.0, 1.0), epsilon = 1e-12);
        assert!(log_prior(&[1.0, 1.0], &[true], &spec, &Transform::Identity).is_err());
    }

    #[test]
    fn inclusion_frequency_matches_beta_mean() {
        let spec = WeightPriorSpec::constrained();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut included = 0usize;
        for _ in 0..draws {
            let (_, nu) = sample_prior(&spec, &Transform::Identity, 1, &mut rng);
            included += nu[0] as usize;
        }
        assert_abs_diff_eq!(included as f64 / draws as f64, 0.5, epsilon = 0.01);
    }

    #[test]
    fn dirichlet_ss_all_included_gives_dirichlet_mean() {
        let spec = WeightPriorSpec {
            family: PriorFamily::DirichletSs {
                alpha: vec![5.0, 10.0, 15.0],
                b_theta: 1.0,
            },
            selection: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w1: Vec<f64> = (0..100_000)
            .map(|_| {
                let (t, _) = sample_prior(&spec, &Transform::Identity, 3, &mut rng);
                t[0] / t.iter().sum::<f64>()
            })
            .collect();
        assert_abs_diff_eq!(mean(&w1), 5.0 / 30.0, epsilon = 0.005);
    }

    #[test]
    fn dirichlet_ss_selection_has_point_masses() {
        // 75% prior inclusion: Beta(a0, b0) with mean 0.75
        let spec = WeightPriorSpec {
            family: PriorFamily::DirichletSs {
                alpha: vec![5.0, 10.0, 15.0],
                b_theta: 1.0,
            },
            selection: Some(Inclusion { a0: 75.0, b0: 25.0 }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut zero = 0;
        let mut one = 0;
        let draws = 50_000;
        for _ in 0..draws {
            let (t, _) = sample_prior(&spec, &Transform::Identity, 3, &mut rng);
            let s: f64 = t.iter().sum();
            if s == 0.0 {
                continue;
            }
            let w1 = t[0] / s;
            if w1 == 0.0 {
                zero += 1;
            }
            if w1 == 1.0 {
                one += 1;
            }
        }
        let pz = zero as f64 / draws as f64;
        let po = one as f64 / draws as f64;
        assert!((pz - 0.25).abs() < 0.02, "{pz}");
        // w1 = 1 when the other two are excluded: about 0.25^2 minus all-excluded overlap
        assert!(po > 0.03 && po < 0.12, "{po}");
        assert!(po < pz);
    }

    #[test]
    fn gamma_normalization_is_dirichlet() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for alpha in [vec![2.0, 3.0], vec![0.7, 1.5, 4.0], vec![1.0, 2.0, 0.5, 3.0, 1.0, 1.0, 2.5, 0.8]] {
            let total: f64 = alpha.iter().sum();
            let draws: Vec<Vec<f64>> = (0..20_000).map(|_| sample_dirichlet(&alpha, &mut rng)).collect();
            for (l, &a) in alpha.iter().enumerate() {
                let marg: Vec<f64> = draws.iter().map(|d| d[l]).collect();
                let beta = BetaDist::new(a, total - a).unwrap();
                let ks = ks_one_sample(&marg, |x| beta.cdf(x));
                assert!(ks.p_value > 0.01, "alpha {alpha:?} l {l} p {}", ks.p_value);
                assert_abs_diff_eq!(mean(&marg), a / total, epsilon = 0.005);
            }
        }
    }

    #[test]
    fn proportions_invariant_to_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples: Vec<Vec<f64>> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&b| {
                let spec = WeightPriorSpec {
                    family: PriorFamily::DirichletSs {
                        alpha: vec![2.0, 4.0],
                        b_theta: b,
                    },
                    selection: None,
                };
                (0..5000)
                    .map(|_| {
                        let (t, _) = sample_prior(&spec, &Transform::Identity, 2, &mut rng);
                        t[0] / (t[0] + t[1])
                    })
                    .collect()
            })
            .collect();
        assert!(ks_two_sample(&samples[0], &samples[1]).p_value > 0.01);
        assert!(ks_two_sample(&samples[1], &samples[2]).p_value > 0.01);
    }

    #[test]
    fn ranked_draws_are_ordered() {
        let spec = WeightPriorSpec::ranked();
        let t = Transform::LinearMap(full_order_matrix(5));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2000 {
            let (theta, _) = sample_prior(&spec, &t, 5, &mut rng);
            for k in 1..5 {
                assert!(theta[k] >= theta[k - 1]);
            }
            assert!(theta[0] >= 0.0);
        }
    }

    #[test]
    fn unconstrained_draws_are_sign_identified() {
        let spec = WeightPriorSpec::unconstrained();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let (theta, _) = sample_prior(&spec, &Transform::Identity, 4, &mut rng);
            assert!(theta.iter().sum::<f64>() >= 0.0);
        }
    }

    #[test]
    fn one_dimensional_slices_match_density() {
        // chi-square goodness of fit of prior draws against exp(log_prior)
        let specs = vec![
            WeightPriorSpec::constrained().with_selection(None),
            WeightPriorSpec::targeted_dirichlet(&[1.0], 50.0).unwrap(),
            WeightPriorSpec::fixed(&[1.0]).unwrap(),
            WeightPriorSpec {
                family: PriorFamily::DirichletSs {
                    alpha: vec![3.0],
                    b_theta: 2.0,
                },
                selection: None,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for spec in specs {
            let draws: Vec<f64> = (0..20_000)
                .map(|_| sample_prior(&spec, &Transform::Identity, 1, &mut rng).0[0])
                .collect();
            let mut edges: Vec<f64> = (0..=10).map(|k| crate::stats::quantile(&draws, k as f64 / 10.0)).collect();
            edges[0] = 1e-12;
            edges[10] = crate::stats::quantile(&draws, 1.0) * 4.0;
            // integrate exp(log_prior) over bins by Simpson's rule
            let dens = |v: f64| log_prior(&[v], &[true], &spec, &Transform::Identity).map(f64::exp).unwrap_or(0.0);
            let mut probs = Vec::new();
            for b in 0..10 {
                let (lo, hi) = (edges[b], edges[b + 1]);
                let k = 2000;
                let h = (hi - lo) / k as f64;
                let mut s = dens(lo) + dens(hi);
                for i in 1..k {
                    s += dens(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                probs.push(s * h / 3.0);
            }
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-3, "{} mass {total}", spec.family_name());
            let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
            let mut counts = vec![0u64; 10];
            for d in &draws {
                let b = edges.windows(2).position(|w| *d >= w[0] && *d < w[1]).unwrap_or(9);
                counts[b] += 1;
            }
            let p = crate::stats::chi_square_gof(&counts, &probs);
            assert!(p > 0.01, "{} p {p}", spec.family_name());
        }
    }

    #[test]
    fn nuisance_tau_prior_central_range() {
        // quantile oracle on Gamma(1, rate 0.1)
        let n = nuisance_priors();
        let g = GammaDist::new(n.tau_shape, n.tau_rate).unwrap();
        let lo = g.inverse_cdf(0.01);
        let hi = g.inverse_cdf(0.99);
        assert!(lo >= 0.1 && hi <= 100.0, "({lo}, {hi})");
        assert_eq!(n.gamma_variance, 100.0);
        assert_eq!((n.sigma2_shape, n.sigma2_scale), (0.001, 0.001));
    }
}
