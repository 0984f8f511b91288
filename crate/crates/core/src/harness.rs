//! Simulation study: scenario generators, the model list compared in the
//! study, per-replicate accuracy metrics and the aggregated ratio table.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{BmimError, Result};
use crate::kernels::KernelSpec;
use crate::model::{ordering_matrix, ColumnScaling, Dataset, IndexGroup, IndexStructure, Transform};
use crate::posterior::{predict_h, quartile_grid, PredictionRequest, DEFAULT_GRID_POINTS};
use crate::priors::{WeightPriorSpec, DEFAULT_CONCENTRATION};
use crate::sampler::{run_mcmc, McmcConfig, ModelSpec};
use crate::stats::median;

pub const W_A: [f64; 8] = [0.50, 0.25, 0.10, 0.05, 0.05, 0.02, 0.02, 0.01];
pub const W_B: [f64; 8] = [0.10, 0.25, 0.50, 0.05, 0.05, 0.02, 0.02, 0.01];
pub const W_C: [f64; 8] = [0.50, -0.25, 0.10, 0.05, 0.05, 0.02, 0.02, 0.01];
pub const GAMMA: [f64; 5] = [-0.43, 0.00, -0.25, 0.12, 0.08];
pub const SIGMA: f64 = 0.5;
pub const EXPOSURE_CORRELATION: f64 = 0.6;
pub const DEFAULT_REPS: usize = 50;
pub const DEFAULT_N: usize = 200;
pub const DEFAULT_HOLDOUT: usize = 100;
const BMI_PROBS: [f64; 3] = [0.3, 0.35, 0.35];

/// True exposure-response function: a smooth sigmoid through the origin.
pub fn true_h(v: f64) -> f64 {
    2.0 / (1.0 + (-2.0 * v).exp()) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioTag {
    A,
    B,
    C,
}

impl ScenarioTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ScenarioTag::A),
            "B" => Ok(ScenarioTag::B),
            "C" => Ok(ScenarioTag::C),
            other => Err(BmimError::Request(format!("unknown scenario '{other}' (expected A, B or C)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioTag::A => "A",
            ScenarioTag::B => "B",
            ScenarioTag::C => "C",
        }
    }

    pub fn weights(&self) -> [f64; 8] {
        match self {
            ScenarioTag::A => W_A,
            ScenarioTag::B => W_B,
            ScenarioTag::C => W_C,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub tag: ScenarioTag,
    /// Weights generating the data.
    pub weights: Vec<f64>,
    /// Weights assumed by the informative priors.
    pub assumed: Vec<f64>,
    pub n: usize,
    pub reps: usize,
    pub holdout: usize,
    pub gamma: Vec<f64>,
    pub sigma: f64,
    pub correlation: f64,
    /// Raw exposure rows to resample instead of the Gaussian generator.
    pub exposure_pool: Option<DMatrix<f64>>,
}

impl Scenario {
    pub fn new(tag: ScenarioTag) -> Self {
        Scenario {
            tag,
            weights: tag.weights().to_vec(),
            assumed: W_A.to_vec(),
            n: DEFAULT_N,
            reps: DEFAULT_REPS,
            holdout: DEFAULT_HOLDOUT,
            gamma: GAMMA.to_vec(),
            sigma: SIGMA,
            correlation: EXPOSURE_CORRELATION,
            exposure_pool: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.weights.len();
        if p == 0 || self.weights.iter().any(|v| !v.is_finite()) {
            return Err(BmimError::Request("scenario weights must be finite and nonempty".into()));
        }
        if self.assumed.len() != p || self.assumed.iter().any(|&v| v < 0.0) {
            return Err(BmimError::Request("assumed weights must be nonnegative with one entry per exposure".into()));
        }
        if self.gamma.len() != GAMMA.len() {
            return Err(BmimError::Request(format!("gamma must have {} entries", GAMMA.len())));
        }
        if self.n < 10 || self.reps == 0 || self.holdout == 0 {
            return Err(BmimError::Request("n must be at least 10 and reps, holdout positive".into()));
        }
        if !(self.sigma >= 0.0) || !(self.correlation >= 0.0 && self.correlation < 1.0) {
            return Err(BmimError::Request("sigma must be nonnegative and correlation in [0, 1)".into()));
        }
        if let Some(pool) = &self.exposure_pool {
            if pool.ncols() != p || pool.nrows() < 2 {
                return Err(BmimError::Request(format!("exposure pool must have {p} columns")));
            }
        }
        Ok(())
    }
}

/// Noiseless truth accompanying one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub weights: Vec<f64>,
    pub h_train: Vec<f64>,
    /// Hold-out exposure rows on the training standardization.
    pub x_holdout: DMatrix<f64>,
    pub h_holdout: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub dataset: Dataset,
    pub truth: Truth,
}

fn raw_exposures<R: Rng>(scenario: &Scenario, rows: usize, rng: &mut R) -> DMatrix<f64> {
    let p = scenario.weights.len();
    match &scenario.exposure_pool {
        Some(pool) => {
            let idx: Vec<usize> = (0..rows).map(|_| rng.random_range(0..pool.nrows())).collect();
            pool.select_rows(&idx)
        }
        None => {
            let a = scenario.correlation.sqrt();
            let b = (1.0 - scenario.correlation).sqrt();
            let mut x = DMatrix::zeros(rows, p);
            for i in 0..rows {
                let common: f64 = rng.sample(StandardNormal);
                for j in 0..p {
                    let own: f64 = rng.sample(StandardNormal);
                    x[(i, j)] = a * common + b * own;
                }
            }
            x
        }
    }
}

fn h_of_rows(x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| true_h(x.row(i).iter().zip(w).map(|(a, b)| a * b).sum()))
        .collect()
}

/// One dataset with its truth, fully determined by `seed`.
pub fn generate_replicate(scenario: &Scenario, seed: u64) -> Result<Replicate> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scenario.n;
    let p = scenario.weights.len();
    let mut x = raw_exposures(scenario, n, &mut rng);
    let mut xh = raw_exposures(scenario, scenario.holdout, &mut rng);
    let mut scaling = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let s = ColumnScaling::fit(&col);
        if !(s.sd > 0.0) {
            return Err(BmimError::Data(format!("simulated exposure {} is constant", j + 1)));
        }
        x.column_mut(j).apply(|v| *v = s.apply(*v));
        xh.column_mut(j).apply(|v| *v = s.apply(*v));
        scaling.push(s);
    }

    // covariates: standardized age, its square, male, two BMI category indicators
    let age: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..80.0)).collect();
    let age_s = ColumnScaling::fit(&age);
    let mut z = DMatrix::zeros(n, 5);
    for i in 0..n {
        let a = age_s.apply(age[i]);
        z[(i, 0)] = a;
        z[(i, 1)] = a * a;
        z[(i, 2)] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let u: f64 = rng.random();
        if (BMI_PROBS[0]..BMI_PROBS[0] + BMI_PROBS[1]).contains(&u) {
            z[(i, 3)] = 1.0;
        } else if u >= BMI_PROBS[0] + BMI_PROBS[1] {
            z[(i, 4)] = 1.0;
        }
    }

    let h_train = h_of_rows(&x, &scenario.weights);
    let zg = &z * DVector::from_column_slice(&scenario.gamma);
    let y = DVector::from_fn(n, |i, _| {
        let eps: f64 = rng.sample(StandardNormal);
        h_train[i] + zg[i] + scenario.sigma * eps
    });
    let h_holdout = h_of_rows(&xh, &scenario.weights);

    let mut dataset = Dataset::new(y, x, z)?;
    dataset.exposure_scaling = scaling;
    dataset.covariate_names = ["age", "age2", "male", "bmi_25_30", "bmi_30"].map(String::from).to_vec();
    dataset.covariate_scaling = vec![Some(age_s), None, None, None, None];
    Ok(Replicate {
        dataset,
        truth: Truth {
            weights: scenario.weights.clone(),
            h_train,
            x_holdout: xh,
            h_holdout,
        },
    })
}

/// Seed of replicate `rep` derived from the master seed.
pub fn replicate_seed(master: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64 + 1);
    rng.next_u64()
}

/// All `scenario.reps` replicates, in replicate order.
pub fn generate_scenario(scenario: &Scenario, seed: u64) -> Result<Vec<Replicate>> {
    (0..scenario.reps)
        .map(|r| generate_replicate(scenario, replicate_seed(seed, r)))
        .collect()
}

/// Index with fixed weights `a` (rescaled to sum to one) on the rows of `x_m`.
pub fn teq_index(x_m: &DMatrix<f64>, a: &[f64]) -> Result<DVector<f64>> {
    if a.len() != x_m.ncols() {
        return Err(BmimError::Dimension(format!(
            "{} weights for {} exposures",
            a.len(),
            x_m.ncols()
        )));
    }
    if a.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(BmimError::Prior("fixed weights must be nonnegative".into()));
    }
    let s: f64 = a.iter().sum();
    if s <= 0.0 {
        return Err(BmimError::Prior("fixed weights sum to zero".into()));
    }
    let w = DVector::from_iterator(a.len(), a.iter().map(|v| v / s));
    Ok(x_m * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Unconstrained,
    Constrained,
    /// Targeted Dirichlet without selection.
    Dirichlet,
    /// Dirichlet slab with selection.
    DirichletSs,
    Ranked,
    Teq,
    Bkmr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Bkmr,
        ModelKind::Unconstrained,
        ModelKind::Constrained,
        ModelKind::DirichletSs,
        ModelKind::Dirichlet,
        ModelKind::Ranked,
        ModelKind::Teq,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Unconstrained => "unconstrained",
            ModelKind::Constrained => "constrained",
            ModelKind::Dirichlet => "dirichlet",
            ModelKind::DirichletSs => "dirichlet_ss",
            ModelKind::Ranked => "ranked",
            ModelKind::Teq => "teq",
            ModelKind::Bkmr => "bkmr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| BmimError::Request(format!("unknown model '{s}'")))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|t| !t.trim().is_empty()).map(Self::parse).collect()
    }

    /// Model specification for `p` exposures with prior knowledge `assumed`.
    pub fn spec(&self, assumed: &[f64]) -> Result<ModelSpec> {
        let p = assumed.len();
        let kernel = KernelSpec::gaussian();
        let single = IndexStructure::single(p);
        let spec = match self {
            ModelKind::Unconstrained => ModelSpec::new(single, vec![WeightPriorSpec::unconstrained()], kernel),
            ModelKind::Constrained => ModelSpec::new(single, vec![WeightPriorSpec::constrained()], kernel),
            ModelKind::Dirichlet => ModelSpec::new(
                single,
                vec![WeightPriorSpec::targeted_dirichlet(assumed, DEFAULT_CONCENTRATION)?],
                kernel,
            ),
            ModelKind::DirichletSs => ModelSpec::new(
                single,
                vec![WeightPriorSpec::dirichlet_ss(assumed, DEFAULT_CONCENTRATION)?],
                kernel,
            ),
            ModelKind::Ranked => {
                // least potent first; ties keep column order
                let mut order: Vec<usize> = (0..p).collect();
                order.sort_by(|&a, &b| assumed[a].total_cmp(&assumed[b]).then(b.cmp(&a)));
                let group = IndexGroup::new("index1", (0..p).collect())
                    .with_transform(Transform::LinearMap(ordering_matrix(&order)?));
                ModelSpec::new(IndexStructure::new(vec![group]), vec![WeightPriorSpec::ranked()], kernel)
            }
            ModelKind::Teq => ModelSpec::new(single, vec![WeightPriorSpec::fixed(assumed)?], kernel),
            ModelKind::Bkmr => ModelSpec::new(
                IndexStructure::singletons(p),
                vec![WeightPriorSpec::unconstrained(); p],
                kernel,
            ),
        };
        Ok(spec)
    }
}

/// Accuracy of one fitted model on one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub holdout_mse: f64,
    pub holdout_width: f64,
    pub holdout_coverage: f64,
    pub comp_mse: f64,
    pub comp_width: f64,
    pub comp_coverage: f64,
}

impl Metrics {
    fn fields(&self) -> [f64; 6] {
        [
            self.holdout_mse,
            self.holdout_width,
            self.holdout_coverage,
            self.comp_mse,
            self.comp_width,
            self.comp_coverage,
        ]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Metrics {
            holdout_mse: f[0],
            holdout_width: f[1],
            holdout_coverage: f[2],
            comp_mse: f[3],
            comp_width: f[4],
            comp_coverage: f[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub model: String,
    /// `None` when the fit failed; the replicate is then excluded for this model.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    /// Means over successful replicates.
    pub absolute: Metrics,
    /// MSE and width divided by the reference model's; coverages are absolute.
    pub relative: Metrics,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub scenario: String,
    pub reference: String,
    pub rows: Vec<TableRow>,
    pub records: Vec<ReplicateRecord>,
}

impl MetricTable {
    pub fn row(&self, model: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

fn interval_metrics(mean: &[f64], lo: &[f64], hi: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let k = truth.len() as f64;
    let mse = mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / k;
    let width = lo.iter().zip(hi).map(|(l, h)| h - l).sum::<f64>() / k;
    let cover = truth
        .iter()
        .zip(lo.iter().zip(hi))
        .filter(|(t, (l, h))| *l <= *t && *t <= *h)
        .count() as f64
        / k;
    (mse, width, cover)
}

/// Component-wise evaluation rows: each exposure in turn over its quartile
/// grid, the others at their medians.
fn componentwise_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j).iter().copied().collect()).collect();
    let medians: Vec<f64> = cols.iter().map(|c| median(c)).collect();
    let g = DEFAULT_GRID_POINTS;
    let mut rows = DMatrix::zeros(p * g, p);
    for j in 0..p {
        let grid = quartile_grid(&cols[j], g);
        for (k, v) in grid.iter().enumerate() {
            for c in 0..p {
                rows[(j * g + k, c)] = if c == j { *v } else { medians[c] };
            }
        }
    }
    rows
}

/// Fits one model to one replicate and scores it against the truth.
pub fn evaluate_model(replicate: &Replicate, spec: &ModelSpec, config: &McmcConfig) -> Result<Metrics> {
    let ds = &replicate.dataset;
    let samples = run_mcmc(ds, spec, config)?;
    let comp = componentwise_rows(&ds.x);
    let h_comp = h_of_rows(&comp, &replicate.truth.weights);
    let x_new = DMatrix::from_fn(replicate.truth.x_holdout.nrows() + comp.nrows(), ds.n_exposures(), |i, j| {
        let nh = replicate.truth.x_holdout.nrows();
        if i < nh {
            replicate.truth.x_holdout[(i, j)]
        } else {
            comp[(i - nh, j)]
        }
    });
    let mut request = PredictionRequest::holdout(x_new);
    request.seed = config.seed;
    let est = predict_h(&samples, ds, &request)?;
    let nh = replicate.truth.h_holdout.len();
    let (hm, hw, hc) = interval_metrics(&est.mean[..nh], &est.lo[..nh], &est.hi[..nh], &replicate.truth.h_holdout);
    let (cm, cw, cc) = interval_metrics(&est.mean[nh..], &est.lo[nh..], &est.hi[nh..], &h_comp);
    Ok(Metrics {
        holdout_mse: hm,
        holdout_width: hw,
        holdout_coverage: hc,
        comp_mse: cm,
        comp_width: cw,
        comp_coverage: cc,
    })
}

/// Runs every model on every replicate of the scenario. The first
/// occurrence of the unconstrained model is the reference for ratios.
pub fn run_study(scenario: &Scenario, models: &[ModelKind], config: &McmcConfig, seed: u64) -> Result<MetricTable> {
    scenario.validate()?;
    config.validate()?;
    if !models.contains(&ModelKind::Unconstrained) {
        return Err(BmimError::Request("the model list must include the unconstrained reference".into()));
    }
    let specs: Vec<ModelSpec> = models.iter().map(|m| m.spec(&scenario.assumed)).collect::<Result<_>>()?;
    let per_rep: Vec<Result<Vec<ReplicateRecord>>> = (0..scenario.reps)
        .into_par_iter()
        .map(|rep| {
            let rseed = replicate_seed(seed, rep);
            let replicate = generate_replicate(scenario, rseed)?;
            let mut out = Vec::with_capacity(models.len());
            for (k, (model, spec)) in models.iter().zip(&specs).enumerate() {
                let cfg = McmcConfig {
                    seed: rseed.wrapping_add(1 + k as u64),
                    chains: 1,
                    diagnostics: false,
                    ..config.clone()
                };
                let metrics = match evaluate_model(&replicate, spec, &cfg) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        log::warn!("replicate {} model {}: {e}", rep + 1, model.name());
                        None
                    }
                };
                out.push(ReplicateRecord {
                    rep,
                    model: model.name().to_string(),
                    metrics,
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_rep {
        records.extend(r?);
    }
    Ok(aggregate(scenario.tag.name(), models, records))
}

/// Aggregates replicate records into the ratio table.
pub fn aggregate(scenario: &str, models: &[ModelKind], records: Vec<ReplicateRecord>) -> MetricTable {
    let mut rows = Vec::new();
    for model in models {
        let name = model.name();
        if rows.iter().any(|r: &TableRow| r.model == name) {
            continue;
        }
        let ok: Vec<Metrics> = records
            .iter()
            .filter(|r| r.model == name)
            .filter_map(|r| r.metrics)
            .collect();
        let failed = records.iter().filter(|r| r.model == name && r.metrics.is_none()).count();
        let mut sums = [0.0; 6];
        for m in &ok {
            for (s, v) in sums.iter_mut().zip(m.fields()) {
                *s += v;
            }
        }
        let k = ok.len().max(1) as f64;
        let absolute = Metrics::from_fields(sums.map(|s| if ok.is_empty() { f64::NAN } else { s / k }));
        rows.push(TableRow {
            model: name.to_string(),
            absolute,
            relative: absolute,
            succeeded: ok.len(),
            failed,
        });
    }
    let reference = ModelKind::Unconstrained.name();
    if let Some(base) = rows.iter().find(|r| r.model == reference).map(|r| r.absolute) {
        for row in rows.iter_mut() {
            let a = row.absolute;
            row.relative = Metrics {
                holdout_mse: a.holdout_mse / base.holdout_mse,
                holdout_width: a.holdout_width / base.holdout_width,
                comp_mse: a.comp_mse / base.comp_mse,
                comp_width: a.comp_width / base.comp_width,
                ..a
            };
            if row.model == reference {
                row.relative.holdout_mse = 1.0;
                row.relative.holdout_width = 1.0;
                row.relative.comp_mse = 1.0;
                row.relative.comp_width = 1.0;
            }
        }
    }
    MetricTable {
        scenario: scenario.to_string(),
        reference: reference.to_string(),
        rows,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::correlation;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noiseless_outcome_is_exact() {
        let mut sc = Scenario::new(ScenarioTag::A);
        sc.sigma = 0.0;
        sc.n = 50;
        let r = generate_replicate(&sc, 3).unwrap();
        let zg = &r.dataset.z * DVector::from_column_slice(&GAMMA);
        for i in 0..50 {
            assert_abs_diff_eq!(r.dataset.y[i], r.truth.h_train[i] + zg[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn top_component_dominates_index() {
        let mut sc = Scenario::new(ScenarioTag::A);
        sc.reps = 40;
        let reps = generate_scenario(&sc, 5).unwrap();
        let mut hits = 0;
        for r in &reps {
            let idx = teq_index(&r.dataset.x, &W_A).unwrap();
            let c1 = correlation(idx.as_slice(), r.dataset.x.column(0).as_slice());
            let c8 = correlation(idx.as_slice(), r.dataset.x.column(7).as_slice());
            hits += (c1 > c8) as usize;
        }
        assert!(hits as f64 >= 0.95 * reps.len() as f64);
    }

    #[test]
    fn scenario_c_negative_direction() {
        let w = W_C;
        let base = [0.1; 8];
        let v: f64 = base.iter().zip(&w).map(|(a, b)| a * b).sum();
        let d = 1e-4;
        let d1 = true_h(v + d * w[0]) - true_h(v);
        let d2 = true_h(v + d * w[1]) - true_h(v);
        assert!(d1 > 0.0 && d2 < 0.0);
    }

    #[test]
    fn teq_index_examples() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = teq_index(&x, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(i.as_slice(), &[1.0, 4.0]);
        let u = teq_index(&x, &[1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(u[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 5.0, epsilon = 1e-12);
        assert!(teq_index(&x, &[1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn teq_index_tracks_true_index() {
        let r = generate_replicate(&Scenario::new(ScenarioTag::A), 9).unwrap();
        let idx = teq_index(&r.dataset.x, &W_A).unwrap();
        let tru: Vec<f64> = (0..r.dataset.n())
            .map(|i| r.dataset.x.row(i).iter().zip(&W_A).map(|(a, b)| a * b).sum())
            .collect();
        assert_abs_diff_eq!(correlation(idx.as_slice(), &tru), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let sc = Scenario::new(ScenarioTag::B);
        let a = generate_replicate(&sc, 4).unwrap();
        let b = generate_replicate(&sc, 4).unwrap();
        assert_eq!(a.dataset.y, b.dataset.y);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn exposures_standardized_on_training_rows() {
        let r = generate_replicate(&Scenario::new(ScenarioTag::A), 2).unwrap();
        for j in 0..8 {
            let c: Vec<f64> = r.dataset.x.column(j).iter().copied().collect();
            assert_abs_diff_eq!(crate::stats::mean(&c), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(crate::stats::variance(&c), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ranked_model_orders_by_assumed_weights() {
        let spec = ModelKind::Ranked.spec(&W_A).unwrap();
        let Transform::LinearMap(a) = &spec.structure.groups[0].transform else {
            panic!("expected a linear map");
        };
        let theta = a * DVector::from_element(8, 1.0);
        for k in 1..8 {
            assert!(theta[k - 1] >= theta[k], "{theta}");
        }
    }

    #[test]
    fn reference_ratios_are_one() {
        let m = Metrics {
            holdout_mse: 0.2,
            holdout_width: 1.0,
            holdout_coverage: 0.9,
            comp_mse: 0.1,
            comp_width: 0.5,
            comp_coverage: 0.95,
        };
        let recs = vec![
            ReplicateRecord {
                rep: 0,
                model: "unconstrained".into(),
                metrics: Some(m),
            },
            ReplicateRecord {
                rep: 0,
                model: "teq".into(),
                metrics: Some(Metrics { holdout_mse: 0.1, ..m }),
            },
            ReplicateRecord {
                rep: 1,
                model: "teq".into(),
                metrics: None,
            },
        ];
        let t = aggregate("A", &[ModelKind::Unconstrained, ModelKind::Teq], recs);
        let u = t.row("unconstrained").unwrap();
        assert_eq!(u.relative.holdout_mse, 1.0);
        assert_eq!(u.relative.comp_width, 1.0);
        let teq = t.row("teq").unwrap();
        assert_abs_diff_eq!(teq.relative.holdout_mse, 0.5, epsilon = 1e-12);
        assert_eq!(teq.failed, 1);
        assert_eq!(teq.succeeded, 1);
    }

    #[test]
    fn study_requires_reference_model() {
        let sc = Scenario::new(ScenarioTag::A);
        assert!(run_study(&sc, &[ModelKind::Teq], &McmcConfig::default(), 1).is_err());
    }

    #[test]
    fn small_study_runs() {
        let mut sc = Scenario::new(ScenarioTag::A);
        sc.reps = 2;
        sc.n = 60;
        sc.holdout = 20;
        let cfg = McmcConfig {
            iterations: 120,
            burnin: 60,
            thin: 2,
            ..McmcConfig::default()
        };
        let models = [ModelKind::Unconstrained, ModelKind::Teq, ModelKind::Ranked];
        let a = run_study(&sc, &models, &cfg, 3).unwrap();
        let b = run_study(&sc, &models, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 6);
        for r in &a.rows {
            assert!(r.absolute.holdout_coverage >= 0.0 && r.absolute.holdout_coverage <= 1.0);
        }
    }
}
