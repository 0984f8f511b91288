//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `BMIM_ACCEPTANCE=1,2,9` restricts the run to the listed criteria; by
//! default all nine run, including the desk-scale simulation study.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Beta, ContinuousCDF};

use bmim::harness::{run_study, MetricTable, ModelKind, Scenario, ScenarioTag};
use bmim::kernels::{kernel_matrix, KernelSpec};
use bmim::basis::natural_spline_basis;
use bmim::model::{decompose_weights, full_order_matrix, Dataset, IndexStructure, Transform};
use bmim::priors::{rpf_to_dirichlet, sample_dirichlet, sample_gamma, sample_prior, PriorFamily, WeightPriorSpec};
use bmim::sampler::{marginal_log_likelihood, run_mcmc, McmcConfig, ModelSpec};
use bmim::stats::{ks_one_sample, ks_two_sample, mean, quantile, variance};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Dense Gaussian log density with an explicit determinant and inverse.
fn dense_oracle(y: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let det = cov.clone().lu().determinant();
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let r = y - mu;
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(2..=50);
        let p = rng.random_range(1..=4);
        let q = rng.random_range(0..=3);
        let e = DMatrix::from_fn(n, p, |_, _| 0.5 * normal(&mut rng));
        let spec = if inst % 2 == 0 {
            KernelSpec::gaussian()
        } else {
            KernelSpec::polynomial(rng.random_range(1..=3))
        };
        let k = kernel_matrix(&e, &spec.with_jitter(0.0)).unwrap();
        let z = DMatrix::from_fn(n, q, |_, _| normal(&mut rng));
        let gamma = DVector::from_fn(q, |_, _| normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| 2.0 * normal(&mut rng));
        let sigma2 = rng.random_range(0.2..3.0);
        let lambda = rng.random_range(0.2..5.0);
        let got = marginal_log_likelihood(&y, &z, &gamma, sigma2, lambda, &k).unwrap();
        let cov = (DMatrix::identity(n, n) + &k / lambda) * sigma2;
        let want = dense_oracle(&y, &(&z * &gamma), &cov);
        worst = worst.max((got - want).abs());
    }
    outcome(worst <= 1e-8, format!("max |error| {worst:.2e} over 100 instances (tol 1e-8)"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let settings: [(&[f64], f64); 5] = [
        (&[0.5, 0.3, 0.2], 50.0),
        (&[0.5, 0.25, 0.1, 0.05, 0.05, 0.02, 0.02, 0.01], 50.0),
        (&[0.7, 0.3], 5.0),
        (&[0.25, 0.25, 0.25, 0.25], 1.0),
        (&[0.1, 0.6, 0.3], 200.0),
    ];
    let mut worst_rel: f64 = 0.0;
    for (a, c) in settings {
        let alpha = rpf_to_dirichlet(a, c).unwrap();
        let draws: Vec<Vec<f64>> = (0..1_000_000).map(|_| sample_dirichlet(&alpha, &mut rng)).collect();
        for (l, &al) in a.iter().enumerate() {
            let v: Vec<f64> = draws.iter().map(|d| d[l]).collect();
            let want = al * (1.0 - al) / (1.0 + c);
            worst_rel = worst_rel.max((variance(&v) - want).abs() / want);
        }
    }
    let part_a = worst_rel <= 0.10;

    let mut min_p: f64 = 1.0;
    for (l_dim, b_theta) in [(2usize, 1.0), (3, 2.5), (8, 0.7)] {
        let alpha: Vec<f64> = (0..l_dim).map(|l| 0.5 + l as f64 * 0.75).collect();
        let total: f64 = alpha.iter().sum();
        let draws: Vec<Vec<f64>> = (0..5000)
            .map(|_| {
                let g: Vec<f64> = alpha.iter().map(|&a| sample_gamma(a, b_theta, &mut rng)).collect();
                let s: f64 = g.iter().sum();
                g.into_iter().map(|v| v / s).collect()
            })
            .collect();
        for (l, &al) in alpha.iter().enumerate() {
            let beta = Beta::new(al, total - al).unwrap();
            let v: Vec<f64> = draws.iter().map(|d| d[l]).collect();
            min_p = min_p.min(ks_one_sample(&v, |x| beta.cdf(x)).p_value);
        }
    }
    let part_b = min_p > 0.01;
    outcome(
        part_a && part_b,
        format!(
            "(a) max relative variance error {:.3} (tol 0.10); (b) min KS p {:.3} for L in {{2,3,8}} (need > 0.01)",
            worst_rel, min_p
        ),
    )
}

fn null_dataset(n: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
    let y = DVector::from_fn(n, |_, _| normal(&mut rng));
    Dataset::new(y, x, DMatrix::from_element(n, 1, 1.0)).unwrap()
}

fn criterion_3() -> Outcome {
    let alpha = rpf_to_dirichlet(&[0.3, 0.7], 10.0).unwrap();
    let (a_rho, b_rho) = (1.0, 1.0);
    let prior = WeightPriorSpec {
        family: PriorFamily::TargetedDirichlet {
            alpha: alpha.clone(),
            a_rho,
            b_rho,
        },
        selection: None,
    };
    let ds = null_dataset(5, 2);
    let spec = ModelSpec::new(IndexStructure::single(2), vec![prior], KernelSpec::gaussian());
    let cfg = McmcConfig {
        iterations: 1_210_000,
        burnin: 10_000,
        thin: 20,
        prior_only: true,
        diagnostics: false,
        ..McmcConfig::default()
    };
    let s = run_mcmc(&ds, &spec, &cfg).unwrap();
    let w1: Vec<f64> = s.draws.iter().map(|d| d.theta_star[0][0] / d.theta_star[0].iter().sum::<f64>()).collect();
    let sums: Vec<f64> = s.draws.iter().map(|d| d.theta_star[0].iter().sum()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let direct: Vec<f64> = (0..20_000).map(|_| sample_dirichlet(&alpha, &mut rng)[0]).collect();
    let p = ks_two_sample(&w1, &direct).p_value;
    let (m, v) = (mean(&sums), variance(&sums));
    let (m0, v0) = (a_rho / b_rho, a_rho / (b_rho * b_rho));
    let (em, ev) = ((m - m0).abs() / m0, (v - v0).abs() / v0);
    outcome(
        p > 0.01 && em <= 0.05 && ev <= 0.05,
        format!(
            "w1 KS p {p:.3} (need > 0.01); sum mean {m:.4} vs {m0}, variance {v:.4} vs {v0} (rel err {em:.3}, {ev:.3}; tol 0.05)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let truth = [0.6, 0.3, 0.1];
    let reps = 100;
    let covered: Vec<[bool; 3]> = (0..reps)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + r as u64);
            let n = 100;
            let x = DMatrix::from_fn(n, 3, |_, _| normal(&mut rng));
            let y = DVector::from_fn(n, |i, _| {
                1.5 * (0..3).map(|l| truth[l] * x[(i, l)]).sum::<f64>() + 0.5 * normal(&mut rng)
            });
            let ds = Dataset::new(y, x, DMatrix::from_element(n, 1, 1.0)).unwrap();
            let spec = ModelSpec::new(
                IndexStructure::single(3),
                vec![WeightPriorSpec::constrained()],
                KernelSpec::polynomial(1),
            );
            let cfg = McmcConfig {
                iterations: 20000,
                burnin: 5000,
                thin: 10,
                seed: 9000 + r as u64,
                diagnostics: false,
                ..McmcConfig::default()
            };
            let s = run_mcmc(&ds, &spec, &cfg).unwrap();
            let ws: Vec<Vec<f64>> = s
                .draws
                .iter()
                .map(|d| decompose_weights(&d.theta_star[0]).w.unwrap_or_else(|| vec![f64::NAN; 3]))
                .collect();
            let mut out = [false; 3];
            for l in 0..3 {
                let v: Vec<f64> = ws.iter().map(|w| w[l]).filter(|v| v.is_finite()).collect();
                out[l] = !v.is_empty() && quantile(&v, 0.025) <= truth[l] && truth[l] <= quantile(&v, 0.975);
            }
            out
        })
        .collect();
    let counts: Vec<usize> = (0..3).map(|l| covered.iter().filter(|c| c[l]).count()).collect();
    outcome(
        counts.iter().all(|&c| c >= 90),
        format!("coverage of w = (0.6, 0.3, 0.1): {counts:?} of {reps} (need >= 90 each)"),
    )
}

fn study_config() -> McmcConfig {
    McmcConfig {
        iterations: 5000,
        burnin: 2500,
        thin: 5,
        chains: 1,
        diagnostics: false,
        ..McmcConfig::default()
    }
}

fn study(tag: ScenarioTag, models: &[ModelKind]) -> MetricTable {
    let sc = Scenario::new(tag);
    let t = Instant::now();
    let table = run_study(&sc, models, &study_config(), 7).unwrap();
    println!("  scenario {} ({} replicates, {:.0} s)", tag.name(), sc.reps, t.elapsed().as_secs_f64());
    println!("    {:<14} {:>7} {:>7} {:>6} {:>7} {:>7} {:>6}", "model", "h_mse", "h_width", "h_cvg", "c_mse", "c_width", "c_cvg");
    for r in &table.rows {
        let m = r.relative;
        println!(
            "    {:<14} {:>7.3} {:>7.3} {:>6.3} {:>7.3} {:>7.3} {:>6.3}",
            r.model, m.holdout_mse, m.holdout_width, m.holdout_coverage, m.comp_mse, m.comp_width, m.comp_coverage
        );
    }
    table
}

fn ratio(t: &MetricTable, m: ModelKind) -> f64 {
    t.row(m.name()).map_or(f64::NAN, |r| r.relative.holdout_mse)
}

fn coverage(t: &MetricTable, m: ModelKind) -> f64 {
    t.row(m.name()).map_or(f64::NAN, |r| r.relative.holdout_coverage)
}

fn criterion_5(a: &MetricTable) -> Outcome {
    use ModelKind::*;
    let [teq, dns, dir, con, bkmr] = [Teq, Dirichlet, DirichletSs, Constrained, Bkmr].map(|m| ratio(a, m));
    let ordered = teq < dns && dns <= dir && dir <= con && con < 1.0 && 1.0 < bkmr;
    let reference = [(teq, 0.58), (dns, 0.65), (dir, 0.71), (con, 0.87), (bkmr, 1.16)];
    let within: Vec<String> = reference
        .iter()
        .map(|(v, r)| format!("{v:.2}/{r:.2}{}", if (v - r).abs() <= 0.15 { "" } else { "*" }))
        .collect();
    outcome(
        ordered,
        format!(
            "holdout MSE ratios TEQ {teq:.3} < Dir(no sel) {dns:.3} <= Dir {dir:.3} <= Constrained {con:.3} < 1 < BKMR {bkmr:.3}; vs reference (* = outside 0.15): {}",
            within.join(" ")
        ),
    )
}

fn criterion_6(b: &MetricTable) -> Outcome {
    use ModelKind::*;
    let teq = ratio(b, Teq);
    let (dns, dir) = (ratio(b, Dirichlet), ratio(b, DirichletSs));
    let cov = coverage(b, Teq);
    outcome(
        teq > 1.5 && dns < 1.0 && dir < 1.0 && cov < 0.90,
        format!("TEQ ratio {teq:.3} (> 1.5), Dirichlet ratios {dns:.3}, {dir:.3} (< 1), TEQ coverage {cov:.3} (< 0.90)"),
    )
}

fn criterion_7(c: &MetricTable) -> Outcome {
    use ModelKind::*;
    let base = coverage(c, Unconstrained);
    let fam = [Constrained, Dirichlet, DirichletSs, Ranked, Teq];
    let gaps: Vec<String> = fam.iter().map(|&m| format!("{} {:.3}", m.name(), coverage(c, m))).collect();
    let pass = fam.iter().all(|&m| coverage(c, m) <= base - 0.03);
    outcome(pass, format!("unconstrained coverage {base:.3}; need each <= {:.3}: {}", base - 0.03, gaps.join(", ")))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bmim")
}

fn run_bin(args: &[&str], cwd: &Path) -> bool {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env("RAYON_NUM_THREADS", "2")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_files(a: &Path, b: &Path) -> (bool, usize) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let same = !names.is_empty()
        && names
            .iter()
            .all(|n| fs::read(a.join(n)).ok().is_some_and(|x| fs::read(b.join(n)).ok() == Some(x)));
    (same, names.len())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut body = String::from("y,a,b,c,age\n");
    for _ in 0..60 {
        let v: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let y = (0.6 * v[0] + 0.4 * v[1]).tanh() + 0.2 * v[3] + 0.3 * normal(&mut rng);
        body.push_str(&format!("{y},{},{},{},{}\n", v[0], v[1], v[2], v[3]));
    }
    fs::write(d.join("d.csv"), body).unwrap();
    fs::write(
        d.join("m.toml"),
        "outcome = \"y\"\ncovariates = [\"age\"]\n[[index]]\nexposures = [\"a\", \"b\", \"c\"]\nprior = \"dirichlet_ss\"\nrpf = [0.5, 0.3, 0.2]\n",
    )
    .unwrap();
    let fit = |out: &str| {
        run_bin(
            &["fit", "--data", "d.csv", "--config", "m.toml", "--iters", "400", "--burnin", "200", "--chains", "2", "--seed", "42", "--out", out],
            d,
        )
    };
    let sim = |out: &str| {
        run_bin(
            &["simulate", "--scenario", "A", "--reps", "2", "--n", "40", "--holdout", "20", "--iters", "200", "--burnin", "100", "--thin", "2", "--models", "unconstrained,teq", "--seed", "7", "--out", out],
            d,
        )
    };
    let ran = fit("r1") && fit("r2") && sim("s1") && sim("s2");
    let (fit_same, nf) = same_files(&d.join("r1"), &d.join("r2"));
    let (sim_same, ns) = same_files(&d.join("s1"), &d.join("s2"));
    outcome(
        ran && fit_same && sim_same,
        format!("fit: {nf} files identical = {fit_same}; simulate: {ns} files identical = {sim_same}"),
    )
}

fn criterion_9() -> Outcome {
    let l = 4;
    let families: Vec<(WeightPriorSpec, Transform)> = vec![
        (WeightPriorSpec::unconstrained(), Transform::Identity),
        (WeightPriorSpec::constrained(), Transform::Identity),
        (WeightPriorSpec::targeted_dirichlet(&[0.4, 0.3, 0.2, 0.1], 10.0).unwrap(), Transform::Identity),
        (WeightPriorSpec::dirichlet_ss(&[0.4, 0.3, 0.2, 0.1], 10.0).unwrap(), Transform::Identity),
        (WeightPriorSpec::ranked(), Transform::LinearMap(full_order_matrix(l))),
        (WeightPriorSpec::smooth(), Transform::Basis(natural_spline_basis(l, 3).unwrap())),
        (WeightPriorSpec::fixed(&[0.4, 0.3, 0.2, 0.1]).unwrap(), Transform::Identity),
    ];
    let ds = null_dataset(5, l);
    let mut lines = Vec::new();
    let mut pass = true;
    for (k, (prior, transform)) in families.into_iter().enumerate() {
        let mut s = IndexStructure::single(l);
        s.groups[0].transform = transform.clone();
        let spec = ModelSpec::new(s, vec![prior.clone()], KernelSpec::gaussian());
        let cfg = McmcConfig {
            iterations: 210_000,
            burnin: 10_000,
            thin: 20,
            seed: 900 + k as u64,
            prior_only: true,
            diagnostics: false,
            ..McmcConfig::default()
        };
        let samples = run_mcmc(&ds, &spec, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(990 + k as u64);
        let direct: Vec<Vec<f64>> = (0..20_000).map(|_| sample_prior(&prior, &transform, l, &mut rng).0).collect();
        let min_p = (0..l)
            .map(|j| {
                let a: Vec<f64> = samples.draws.iter().map(|d| d.theta_star[0][j]).collect();
                let b: Vec<f64> = direct.iter().map(|d| d[j]).collect();
                ks_two_sample(&a, &b).p_value
            })
            .fold(1.0f64, f64::min);
        pass &= min_p > 0.01;
        lines.push(format!("{} {:.3}", prior.family_name(), min_p));
    }
    outcome(pass, format!("min KS p per family (need > 0.01): {}", lines.join(", ")))
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("BMIM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: u32| selected.as_ref().is_none_or(|s| s.contains(&k));
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |k: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(k) {
            let t = Instant::now();
            let o = f();
            let secs = t.elapsed().as_secs_f64();
            println!(
                "criterion {k} [{}] {name}: {} ({secs:.1} s)",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((k, name, o, secs));
        }
    };
    run(1, "likelihood oracle", &mut criterion_1);
    run(2, "Dirichlet machinery", &mut criterion_2);
    run(3, "induced density", &mut criterion_3);
    run(4, "sampler calibration", &mut criterion_4);
    if wanted(5) || wanted(6) || wanted(7) {
        use ModelKind::*;
        let t = Instant::now();
        let a = (wanted(5)).then(|| study(ScenarioTag::A, &[Unconstrained, Constrained, Dirichlet, DirichletSs, Teq, Bkmr]));
        let b = (wanted(6)).then(|| study(ScenarioTag::B, &[Unconstrained, Constrained, Dirichlet, DirichletSs, Teq]));
        let c = (wanted(7))
            .then(|| study(ScenarioTag::C, &[Unconstrained, Constrained, Dirichlet, DirichletSs, Ranked, Teq]));
        println!("  simulation study total {:.0} s", t.elapsed().as_secs_f64());
        if let Some(a) = &a {
            run(5, "simulation A ordering", &mut || criterion_5(a));
        }
        if let Some(b) = &b {
            run(6, "simulation B mis-specification", &mut || criterion_6(b));
        }
        if let Some(c) = &c {
            run(7, "simulation C direction", &mut || criterion_7(c));
        }
    }
    run(8, "determinism", &mut criterion_8);
    run(9, "prior-only validation", &mut criterion_9);

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
