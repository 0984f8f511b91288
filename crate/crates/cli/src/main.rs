use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use bmim::config::{parse_config_in, RunConfig};
use bmim::harness::{run_study, ModelKind, Scenario, ScenarioTag};
use bmim::io::{
    load_csv, read_matrix_csv, read_samples_csv, write_curve_csv, write_diagnostics_csv, write_metrics_csv,
    write_samples_csv, write_table1_csv, write_weights_csv, RoleMap,
};
use bmim::model::Dataset;
use bmim::posterior::{
    evaluate_cv, predict_h, summarize_weights_at, CurveEstimate, PredictionMode, PredictionRequest, DEFAULT_LEVEL,
};
use bmim::sampler::{run_mcmc, McmcConfig, PosteriorSamples};

const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser)]
#[command(name = "bmim", version, about = "Bayesian multiple index models for exposure mixtures")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write draws, diagnostics and weight summaries to a run directory.
    Fit(FitArgs),
    /// Predict exposure-response curves from a fitted run.
    Predict(PredictArgs),
    /// Run the simulation study and write per-replicate metrics and the ratio table.
    Simulate(SimulateArgs),
    /// K-fold cross-validated prediction error.
    Cv(CvArgs),
    /// Print weight summaries and diagnostics of a fitted run.
    Summarize(SummarizeArgs),
}

#[derive(Args, Clone, Default)]
struct McmcOverrides {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl McmcOverrides {
    fn apply(&self, base: &McmcConfig) -> McmcConfig {
        McmcConfig {
            iterations: self.iters.unwrap_or(base.iterations),
            burnin: self.burnin.unwrap_or(base.burnin),
            thin: self.thin.unwrap_or(base.thin),
            chains: self.chains.unwrap_or(base.chains),
            seed: self.seed.unwrap_or(base.seed),
            ..base.clone()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Data CSV; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    mcmc: McmcOverrides,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Holdout,
    Indexwise,
    Componentwise,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Index number (from 1) for indexwise curves.
    #[arg(long)]
    index: Option<usize>,
    /// Quantiles of the index values for indexwise curves.
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
    /// Center indexwise curves at this quantile.
    #[arg(long)]
    reference: Option<f64>,
    /// Hold another index at a quantile, as `index:quantile`.
    #[arg(long)]
    condition: Option<String>,
    /// Propagate weight uncertainty into indexwise curves.
    #[arg(long)]
    propagate_weights: bool,
    /// Exposure name (or number from 1) for componentwise curves.
    #[arg(long)]
    exposure: Option<String>,
    /// Componentwise grid in the exposure's original units.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grid: Option<Vec<f64>>,
    /// CSV of new exposure rows (original units) for holdout predictions.
    #[arg(long)]
    newdata: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    /// Seed for the conditional draws; defaults to the run's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; defaults to a file in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario tags, comma separated (A, B, C).
    #[arg(long, value_delimiter = ',', default_value = "A")]
    scenario: Vec<String>,
    #[arg(long, default_value_t = bmim::harness::DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = bmim::harness::DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = bmim::harness::DEFAULT_HOLDOUT)]
    holdout: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "unconstrained,constrained,dirichlet,dirichlet_ss,ranked,teq,bkmr")]
    models: String,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 2500)]
    burnin: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    /// CSV of raw exposure rows to resample instead of the Gaussian generator.
    #[arg(long)]
    exposure_pool: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[command(flatten)]
    mcmc: McmcOverrides,
    /// Optional CSV of per-fold RMSE.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    /// Write the summaries to this CSV as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Simulate(a) => simulate(a),
        Command::Cv(a) => cv(a),
        Command::Summarize(a) => summarize(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Reads a config and resolves its data path; relative paths inside the
/// config are taken relative to the config file.
fn load_config(config: &Path, data: Option<&Path>) -> Result<RunConfig> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let dir = config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = dir.canonicalize().with_context(|| format!("resolving {}", dir.display()))?;
    let mut cfg = parse_config_in(&text, &base).with_context(|| format!("in {}", config.display()))?;
    let data = match (data, &cfg.data) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => base.join(d),
        (None, None) => bail!("no data file: pass --data or set `data` in the config"),
    };
    let data = data.canonicalize().with_context(|| format!("resolving {}", data.display()))?;
    cfg.set_data(&data);
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.as_ref().ok_or_else(|| anyhow!("configuration has no data path"))?;
    Ok(load_csv(path, &RoleMap::from_config(cfg))?)
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, a.data.as_deref())?;
    cfg.set_mcmc(a.mcmc.apply(&cfg.mcmc));
    cfg.mcmc.validate()?;
    let ds = load_data(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(RESOLVED_CONFIG), cfg.resolved_toml()?)?;
    let spec = cfg.model_spec();
    let samples = run_mcmc(&ds, &spec, &cfg.mcmc)?;
    write_samples_csv(&a.out.join("samples.csv"), &samples)?;
    write_diagnostics_csv(&a.out.join("diagnostics.csv"), &samples)?;
    write_weights_csv(
        &a.out.join("weights.csv"),
        &summarize_weights_at(&samples, DEFAULT_LEVEL),
        &ds.exposure_names,
    )?;
    println!(
        "{} draws from {} chain(s) written to {}",
        samples.len(),
        samples.chains,
        a.out.display()
    );
    Ok(())
}

struct Run {
    cfg: RunConfig,
    data: Dataset,
    samples: PosteriorSamples,
}

fn open_run(dir: &Path) -> Result<Run> {
    let path = dir.join(RESOLVED_CONFIG);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = bmim::config::parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    let data = load_data(&cfg)?;
    let samples = read_samples_csv(&dir.join("samples.csv"), &cfg.model_spec(), cfg.mcmc.seed)?;
    Ok(Run { cfg, data, samples })
}

fn exposure_number(name: &str, ds: &Dataset) -> Result<usize> {
    if let Some(p) = ds.exposure_names.iter().position(|e| e == name) {
        return Ok(p);
    }
    match name.parse::<usize>() {
        Ok(k) if (1..=ds.n_exposures()).contains(&k) => Ok(k - 1),
        _ => bail!("unknown exposure '{name}'"),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let run = open_run(&a.run)?;
    let ds = &run.data;
    let (mode, default_name) = match a.mode {
        Mode::Holdout => {
            let path = a.newdata.as_ref().ok_or_else(|| anyhow!("holdout mode needs --newdata"))?;
            let (header, raw) = read_matrix_csv(path)?;
            let cols: Vec<usize> = ds
                .exposure_names
                .iter()
                .map(|e| {
                    header
                        .iter()
                        .position(|h| h == e)
                        .ok_or_else(|| anyhow!("column '{e}' not found in {}", path.display()))
                })
                .collect::<Result<_>>()?;
            let x_new = DMatrix::from_fn(raw.nrows(), cols.len(), |i, j| {
                ds.exposure_scaling[j].apply(raw[(i, cols[j])])
            });
            (PredictionMode::Holdout { x_new }, "holdout.csv".to_string())
        }
        Mode::Indexwise => {
            let m = a.index.ok_or_else(|| anyhow!("indexwise mode needs --index"))?;
            if m == 0 {
                bail!("indices are numbered from 1");
            }
            let condition = match &a.condition {
                None => None,
                Some(s) => {
                    let (i, q) = s
                        .split_once(':')
                        .ok_or_else(|| anyhow!("--condition expects index:quantile"))?;
                    let i: usize = i.trim().parse().context("--condition index")?;
                    if i == 0 {
                        bail!("indices are numbered from 1");
                    }
                    Some((i - 1, q.trim().parse().context("--condition quantile")?))
                }
            };
            let quantiles = a
                .quantiles
                .clone()
                .unwrap_or_else(|| bmim::posterior::DEFAULT_INDEX_QUANTILES.to_vec());
            (
                PredictionMode::Indexwise {
                    index: m - 1,
                    quantiles,
                    reference: a.reference,
                    condition,
                    propagate_weights: a.propagate_weights,
                },
                format!("indexwise_{m}.csv"),
            )
        }
        Mode::Componentwise => {
            let name = a.exposure.as_ref().ok_or_else(|| anyhow!("componentwise mode needs --exposure"))?;
            let p = exposure_number(name, ds)?;
            let s = ds.exposure_scaling[p];
            let grid = a.grid.as_ref().map(|g| g.iter().map(|&v| s.apply(v)).collect());
            (
                PredictionMode::Componentwise { exposure: p, grid },
                format!("componentwise_{}.csv", ds.exposure_names[p]),
            )
        }
    };
    let request = PredictionRequest {
        mode: mode.clone(),
        level: a.level,
        seed: a.seed.unwrap_or(run.cfg.mcmc.seed),
    };
    let mut curve = predict_h(&run.samples, ds, &request)?;
    if let PredictionMode::Componentwise { exposure, .. } = mode {
        // echo a requested grid verbatim rather than its round trip
        match &a.grid {
            Some(g) => curve.grid.clone_from(g),
            None => {
                let s = ds.exposure_scaling[exposure];
                curve.grid.iter_mut().for_each(|v| *v = s.invert(*v));
            }
        }
    }
    to_outcome_units(&mut curve, ds);
    let out = a.out.unwrap_or_else(|| a.run.join(default_name));
    write_curve_csv(&out, &curve)?;
    println!("{} points written to {}", curve.grid.len(), out.display());
    Ok(())
}

/// Rescales `h` from the standardized outcome to the outcome's units.
fn to_outcome_units(curve: &mut CurveEstimate, ds: &Dataset) {
    if let Some(s) = ds.outcome_scaling {
        for v in curve.mean.iter_mut().chain(curve.lo.iter_mut()).chain(curve.hi.iter_mut()) {
            *v *= s.sd;
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let models = ModelKind::parse_list(&a.models)?;
    let pool = match &a.exposure_pool {
        Some(p) => Some(read_matrix_csv(p)?.1),
        None => None,
    };
    let config = McmcConfig {
        iterations: a.iters,
        burnin: a.burnin,
        thin: a.thin,
        chains: 1,
        seed: a.seed,
        diagnostics: false,
        ..McmcConfig::default()
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut tables = Vec::new();
    for tag in &a.scenario {
        let mut sc = Scenario::new(ScenarioTag::parse(tag)?);
        sc.n = a.n;
        sc.reps = a.reps;
        sc.holdout = a.holdout;
        sc.exposure_pool = pool.clone();
        log::info!("scenario {}: {} replicates", sc.tag.name(), sc.reps);
        tables.push(run_study(&sc, &models, &config, a.seed)?);
    }
    write_metrics_csv(&a.out.join("metrics.csv"), &tables)?;
    write_table1_csv(&a.out.join("table1.csv"), &tables)?;
    println!(
        "{:<8} {:<14} {:>8} {:>8} {:>6} {:>8} {:>8} {:>6}",
        "scenario", "model", "h_mse", "h_width", "h_cvg", "c_mse", "c_width", "c_cvg"
    );
    for t in &tables {
        for r in &t.rows {
            let m = r.relative;
            println!(
                "{:<8} {:<14} {:>8.2} {:>8.2} {:>6.2} {:>8.2} {:>8.2} {:>6.2}",
                t.scenario,
                r.model,
                m.holdout_mse,
                m.holdout_width,
                m.holdout_coverage,
                m.comp_mse,
                m.comp_width,
                m.comp_coverage
            );
        }
    }
    Ok(())
}

fn cv(a: CvArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, a.data.as_deref())?;
    cfg.set_mcmc(a.mcmc.apply(&cfg.mcmc));
    let ds = load_data(&cfg)?;
    let res = evaluate_cv(&ds, &cfg.model_spec(), &cfg.mcmc, a.folds)?;
    println!("rmse {}", res.rmse);
    println!("mean fold rmse {}", res.mean_fold_rmse);
    if let Some(out) = a.out {
        let mut text = String::from("fold,rmse\n");
        for (f, r) in res.fold_rmse.iter().enumerate() {
            text.push_str(&format!("{},{r}\n", f + 1));
        }
        text.push_str(&format!("all,{}\n", res.rmse));
        fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn summarize(a: SummarizeArgs) -> Result<()> {
    let run = open_run(&a.run)?;
    let sums = summarize_weights_at(&run.samples, a.level);
    let names = &run.data.exposure_names;
    println!(
        "{} draws, {} chain(s); intervals at level {}",
        run.samples.len(),
        run.samples.chains,
        a.level
    );
    println!(
        "{:<12} {:<12} {:>6} {:>9} {:>9} {:>9} {:>9}",
        "index", "exposure", "pip", "w_mean", "w_lo", "w_hi", "theta*"
    );
    for s in &sums {
        let (wm, wl, wh) = s.w.map_or((f64::NAN, f64::NAN, f64::NAN), |w| (w.mean, w.lo, w.hi));
        println!(
            "{:<12} {:<12} {:>6.3} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            s.index_name, names[s.exposure], s.pip, wm, wl, wh, s.theta_star.mean
        );
    }
    let rhat = bmim::sampler::rhat_table(&run.samples);
    if let Some((name, worst)) = rhat
        .iter()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1))
    {
        println!("largest split R-hat: {name} = {worst:.3}");
    }
    if let Some(out) = a.out {
        write_weights_csv(&out, &sums, names)?;
    }
    Ok(())
}
