//! Small statistical helpers shared by the sampler diagnostics, posterior
//! summaries and the simulation harness.

use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Linear-interpolation quantile (R type 7) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = sign * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Kolmogorov–Smirnov test result.
#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_q((s + 0.12 + 0.11 / s) * d)
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
    }
}

/// Two-sample KS test. Ties (for example point masses at zero) are handled by
/// advancing both empirical CDFs past equal values before comparing.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let n_eff = (n * m) as f64 / (n + m) as f64;
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, n_eff),
    }
}

/// Pearson chi-square goodness of fit given observed counts and expected
/// probabilities per bin. Bins with tiny expected counts should be merged by
/// the caller.
pub fn chi_square_gof(observed: &[u64], expected_prob: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected_prob.len());
    let total: u64 = observed.iter().sum();
    let total = total as f64;
    let stat: f64 = observed
        .iter()
        .zip(expected_prob)
        .map(|(&o, &p)| {
            let e = total * p;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = (observed.len() - 1) as f64;
    let chi = ChiSquared::new(dof).expect("positive degrees of freedom");
    1.0 - chi.cdf(stat)
}

/// Split-R-hat (Gelman et al.) over equal-length chains of one scalar.
/// Returns NaN when fewer than four draws per chain are available.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = len / 2;
    if half < 2 {
        return f64::NAN;
    }
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        pieces.push(&c[..half]);
        pieces.push(&c[len - half..len]);
    }
    let m = pieces.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = pieces.iter().map(|p| mean(p)).collect();
    let vars: Vec<f64> = pieces.iter().map(|p| variance(p)).collect();
    let grand = mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = mean(&vars);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_type7() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_abs_diff_eq!(quantile(&xs, 0.5), 2.5);
        assert_abs_diff_eq!(quantile(&xs, 0.0), 1.0);
        assert_abs_diff_eq!(quantile(&xs, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&xs, 0.25), 1.75);
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Q(1.36) is the classic 5% critical point, Q(1.63) the 1% one.
        assert_abs_diff_eq!(kolmogorov_q(1.358), 0.05, epsilon = 1e-3);
        assert_abs_diff_eq!(kolmogorov_q(1.628), 0.01, epsilon = 1e-3);
    }

    #[test]
    fn ks_detects_shift() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).p_value < 1e-6);
        assert!(ks_two_sample(&a, &a).p_value > 0.99);
        let uniform = ks_one_sample(&a, |x| x.clamp(0.0, 1.0));
        assert!(uniform.p_value > 0.99);
    }

    #[test]
    fn rhat_near_one_for_identical_chains() {
        let c: Vec<f64> = (0..100).map(|i| ((i * 7919) % 101) as f64).collect();
        let r = split_rhat(&[c.clone(), c]);
        assert!((r - 1.0).abs() < 0.05, "{r}");
        let shifted: Vec<Vec<f64>> = vec![vec![0.0, 0.1, 0.0, 0.1, 0.0, 0.1], vec![5.0, 5.1, 5.0, 5.1, 5.0, 5.1]];
        assert!(split_rhat(&shifted) > 2.0);
    }
}
