//! Convergence diagnostics for scalar MCMC traces: the Heidelberger–Welch
//! stationarity and halfwidth tests, and effective sample size.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::mcmc::PosteriorDraws;

/// Shortest trace accepted by [`hw_diagnostic`].
pub const HW_MIN_LENGTH: usize = 100;
/// Shortest trace accepted by [`effective_sample_size`].
pub const ESS_MIN_LENGTH: usize = 10;
pub const HW_PVALUE: f64 = 0.05;
pub const HW_EPS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("trace of length {len} is shorter than the required {min}")]
    TraceTooShort { len: usize, min: usize },
    #[error("trace contains a non-finite value at index {0}")]
    NonFinite(usize),
}

fn check(trace: &[f64], min: usize) -> Result<(), DiagnosticsError> {
    if trace.len() < min {
        return Err(DiagnosticsError::TraceTooShort { len: trace.len(), min });
    }
    match trace.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(DiagnosticsError::NonFinite(i)),
        None => Ok(()),
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Residual standard deviation of a least-squares line through `x` against
/// its index, used to detect traces with no stochastic variation.
fn detrended_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let tbar = (n - 1.0) / 2.0;
    let xbar = mean(x);
    let (mut sxt, mut stt) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - tbar;
        sxt += dt * (v - xbar);
        stt += dt * dt;
    }
    let slope = sxt / stt;
    let ss: f64 = x
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            let r = v - xbar - slope * (t as f64 - tbar);
            r * r
        })
        .sum();
    (ss / (n - 1.0)).sqrt()
}

/// Biased (divisor `n`) sample autocovariances at lags `0..=max_lag`.
fn autocovariances(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..=max_lag.min(n - 1))
        .map(|k| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Autoregressive fit chosen by AIC over orders `0..=⌊10·log10 n⌋` with
/// Yule–Walker estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub order: usize,
    pub phi: Vec<f64>,
    /// Innovation variance, with the small-sample factor `n / (n − order − 1)`.
    pub var_pred: f64,
}

pub fn ar_yule_walker(x: &[f64]) -> ArFit {
    let n = x.len();
    let max_order = (n - 1).min((10.0 * (n as f64).log10()).floor() as usize);
    let r = autocovariances(x, max_order);
    let max_order = r.len() - 1;

    let mut vars = vec![r[0]];
    let mut coefs: Vec<Vec<f64>> = vec![Vec::new()];
    let mut phi: Vec<f64> = Vec::new();
    let mut v = r[0];
    for k in 1..=max_order {
        if v <= 0.0 {
            break;
        }
        let acc: f64 = (1..k).map(|j| phi[j - 1] * r[k - j]).sum();
        let refl = (r[k] - acc) / v;
        let mut next = vec![0.0; k];
        for j in 1..k {
            next[j - 1] = phi[j - 1] - refl * phi[k - j - 1];
        }
        next[k - 1] = refl;
        phi = next;
        v *= 1.0 - refl * refl;
        vars.push(v);
        coefs.push(phi.clone());
    }
    let aic = |k: usize| n as f64 * vars[k].ln() + 2.0 * k as f64;
    let order = (0..vars.len()).filter(|&k| vars[k] > 0.0).min_by(|&a, &b| aic(a).total_cmp(&aic(b))).unwrap_or(0);
    ArFit { order, phi: coefs[order].clone(), var_pred: vars[order] * n as f64 / (n - (order + 1)) as f64 }
}

/// Spectral density at frequency zero from an AIC-selected autoregression.
/// Zero for a trace that is exactly linear in its index.
pub fn spectrum0_ar(x: &[f64]) -> f64 {
    if x.len() < 3 || detrended_sd(x) <= 1e-12 * mean(x).abs().max(f64::MIN_POSITIVE) {
        return 0.0;
    }
    let fit = ar_yule_walker(x);
    let s: f64 = fit.phi.iter().sum();
    fit.var_pred / ((1.0 - s) * (1.0 - s))
}

/// Modified Bessel function of the second kind, `K_ν(x)` for `x > 0`, by the
/// trapezoidal rule on `∫₀^∞ exp(−x cosh t) cosh(νt) dt`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k requires x > 0");
    let h = 0.01;
    let f = |t: f64| (-x * t.cosh() + (nu * t).abs()).exp() * 0.5 * (1.0 + (-2.0 * (nu * t).abs()).exp());
    let mut sum = 0.5 * f(0.0);
    let mut t = h;
    loop {
        let term = f(t);
        sum += term;
        if x * t.cosh() - nu.abs() * t > 750.0 || (term < 1e-18 * sum && t > 1.0) {
            break;
        }
        t += h;
    }
    sum * h
}

/// Limiting distribution function of the Cramér–von Mises statistic, summing
/// the Anderson–Darling series until the exponential factor drops below 1e-5.
pub fn pcramer(q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let cutoff = -(1e-5f64.ln());
    let mut total = 0.0;
    for k in 0.. {
        let k = k as f64;
        let u = (4.0 * k + 1.0).powi(2) / (16.0 * q);
        if u > cutoff {
            break;
        }
        let z = (ln_gamma(k + 0.5) - ln_gamma(k + 1.0)).exp() * (4.0 * k + 1.0).sqrt()
            / (std::f64::consts::PI.powf(1.5) * q.sqrt());
        total += z * (-u).exp() * bessel_k(0.25, u);
    }
    total.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HwResult {
    /// Passed the stationarity test after dropping at most half the trace.
    pub stationary: bool,
    /// Fraction of the trace retained when the test passed (1 when degenerate).
    pub kept_fraction: f64,
    /// `1.96·√(S(0)/n) / |mean|` on the retained part.
    pub halfwidth_ratio: f64,
    pub halfwidth_passed: bool,
    /// p-value of the stationarity test on the retained part.
    pub p_value: f64,
    /// The trace is constant up to a linear trend; stationarity is reported
    /// as true with zero halfwidth.
    pub degenerate: bool,
}

/// Heidelberger–Welch diagnostic at the 5% level and halfwidth tolerance 0.1.
///
/// The spectral density for the bridge normalization is estimated once from
/// the second half of the whole trace; the front of the trace is then
/// truncated in steps of 10% until the Cramér–von Mises test passes or half
/// of the trace is gone.
pub fn hw_diagnostic(trace: &[f64]) -> Result<HwResult, DiagnosticsError> {
    check(trace, HW_MIN_LENGTH)?;
    let n_total = trace.len();
    if is_constant(trace) {
        return Ok(HwResult {
            stationary: true,
            kept_fraction: 1.0,
            halfwidth_ratio: 0.0,
            halfwidth_passed: true,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let s0 = spectrum0_ar(&trace[n_total.div_ceil(2) - 1..]);
    let step = n_total as f64 / 10.0;
    let mut start = 0;
    let mut stat = f64::NAN;
    let mut passed = false;
    let mut k = 0usize;
    while 1.0 + k as f64 * step <= n_total as f64 / 2.0 {
        start = (k as f64 * step).ceil() as usize;
        let y = &trace[start..];
        let n = y.len() as f64;
        let ybar = mean(y);
        let mut cum = 0.0;
        let mut total = 0.0;
        for (t, &v) in y.iter().enumerate() {
            cum += v;
            let b = cum - ybar * (t + 1) as f64;
            total += b * b / (n * s0);
        }
        stat = total / n;
        if stat.is_finite() && pcramer(stat) < 1.0 - HW_PVALUE {
            passed = true;
            break;
        }
        k += 1;
    }
    let y = &trace[start..];
    let ybar = mean(y);
    let halfwidth = 1.96 * (spectrum0_ar(y) / y.len() as f64).sqrt();
    let ratio = halfwidth / ybar.abs();
    Ok(HwResult {
        stationary: passed,
        kept_fraction: y.len() as f64 / n_total as f64,
        halfwidth_ratio: ratio,
        halfwidth_passed: passed && ratio <= HW_EPS,
        p_value: if stat.is_finite() { 1.0 - pcramer(stat) } else { f64::NAN },
        degenerate: s0 == 0.0,
    })
}

/// `n / (1 + 2 Σ ρ_k)`, with the sum cut at the first adjacent pair of
/// autocorrelations whose sum is not positive. Returns 0 for a constant trace.
pub fn effective_sample_size(trace: &[f64]) -> Result<f64, DiagnosticsError> {
    check(trace, ESS_MIN_LENGTH)?;
    if is_constant(trace) {
        return Ok(0.0);
    }
    let n = trace.len();
    let m = mean(trace);
    let d: Vec<f64> = trace.iter().map(|v| v - m).collect();
    let acov = |k: usize| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = acov(0);
    // Γ_m = γ(2m) + γ(2m+1); τ = −1 + 2 Σ_m Γ_m / γ(0).
    let mut sum_pairs = 0.0;
    let mut m_idx = 0;
    while 2 * m_idx + 1 < n {
        let pair = acov(2 * m_idx) + acov(2 * m_idx + 1);
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        m_idx += 1;
    }
    let tau = (-1.0 + 2.0 * sum_pairs / c0).max(1.0 / n as f64);
    Ok(n as f64 / tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDiagnostic {
    pub name: String,
    pub hw: HwResult,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_draws: usize,
    pub traces: Vec<TraceDiagnostic>,
}

impl DiagnosticsReport {
    pub fn from_traces(traces: &[(String, Vec<f64>)]) -> Result<Self, DiagnosticsError> {
        let n_draws = traces.first().map_or(0, |t| t.1.len());
        let traces = traces
            .iter()
            .map(|(name, x)| {
                Ok(TraceDiagnostic { name: name.clone(), hw: hw_diagnostic(x)?, ess: effective_sample_size(x)? })
            })
            .collect::<Result<Vec<_>, DiagnosticsError>>()?;
        Ok(Self { n_draws, traces })
    }

    /// Monitors the scalar parameters and every regression coefficient.
    pub fn from_draws(draws: &PosteriorDraws) -> Result<Self, DiagnosticsError> {
        let mut traces = draws.scalar_traces();
        traces.extend(draws.coefficient_traces());
        Self::from_traces(&traces)
    }

    pub fn stationary_fraction(&self) -> f64 {
        if self.traces.is_empty() {
            return 1.0;
        }
        self.traces.iter().filter(|t| t.hw.stationary).count() as f64 / self.traces.len() as f64
    }

    pub fn min_ess(&self) -> f64 {
        self.traces.iter().map(|t| t.ess).fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let z = normals(n + 500, seed);
        let mut x = 0.0;
        let mut out = Vec::with_capacity(n);
        for (t, e) in z.into_iter().enumerate() {
            x = phi * x + e;
            if t >= 500 {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn bessel_half_order_closed_form() {
        for &x in &[0.01, 0.3, 1.0, 4.0, 11.0] {
            let exact = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            assert!((bessel_k(0.5, x) / exact - 1.0).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn bessel_zero_order_reference() {
        // K_0(1) and K_1(2) from standard tables.
        assert!((bessel_k(0.0, 1.0) - 0.421_024_438_240_708_3).abs() < 1e-12);
        assert!((bessel_k(1.0, 2.0) - 0.139_865_881_816_522_4).abs() < 1e-12);
    }

    #[test]
    fn cramer_von_mises_critical_values() {
        // Tabulated upper quantiles of the limiting distribution.
        assert!((pcramer(0.461_36) - 0.95).abs() < 1e-3);
        assert!((pcramer(0.743_3) - 0.99).abs() < 1e-3);
        assert!((pcramer(0.347_3) - 0.90).abs() < 1e-3);
        assert!(pcramer(0.0) == 0.0);
        assert!(pcramer(2.0) > 0.9999);
        assert!(pcramer(200.0) > 0.9999);
        assert!((1..40).all(|k| pcramer(0.05 * k as f64) < pcramer(0.05 * (k + 1) as f64)));
        assert!((1..100).all(|k| pcramer(k as f64) <= pcramer(k as f64 + 1.0) + 1e-9));
    }

    #[test]
    fn spectrum_of_ar1_matches_closed_form() {
        // S(0) = σ² / (1 − φ)² for a unit-innovation AR(1).
        let x = ar1(20_000, 0.5, 7);
        let s0 = spectrum0_ar(&x);
        assert!((s0 / 4.0 - 1.0).abs() < 0.15, "s0={s0}");
    }

    #[test]
    fn yule_walker_recovers_ar2() {
        let z = normals(40_000, 3);
        let mut x = vec![0.0, 0.0];
        for e in z {
            let t = x.len();
            x.push(0.6 * x[t - 1] - 0.3 * x[t - 2] + e);
        }
        let fit = ar_yule_walker(&x[1000..]);
        assert!(fit.order >= 2);
        assert!((fit.phi[0] - 0.6).abs() < 0.03 && (fit.phi[1] + 0.3).abs() < 0.03, "{fit:?}");
        assert!((fit.var_pred - 1.0).abs() < 0.03);
    }

    #[test]
    fn hw_null_calibration() {
        let passes = (0..100).filter(|&s| hw_diagnostic(&normals(2000, 1000 + s)).unwrap().stationary).count();
        assert!(passes >= 90, "{passes}/100");
    }

    #[test]
    fn hw_detects_linear_drift() {
        let z = normals(2000, 11);
        let x: Vec<f64> = z.iter().enumerate().map(|(t, e)| e + 5.0 * t as f64 / 2000.0).collect();
        let r = hw_diagnostic(&x).unwrap();
        assert!(!r.stationary);
    }

    #[test]
    fn hw_drops_a_transient() {
        let z = normals(2000, 12);
        let x: Vec<f64> = z.iter().enumerate().map(|(t, e)| e + if t < 150 { 8.0 } else { 0.0 }).collect();
        let r = hw_diagnostic(&x).unwrap();
        assert!(r.stationary && r.kept_fraction < 1.0, "{r:?}");
    }

    #[test]
    fn hw_constant_trace_is_degenerate() {
        let r = hw_diagnostic(&[2.5; 500]).unwrap();
        assert!(r.degenerate && r.stationary);
        assert_eq!(r.halfwidth_ratio, 0.0);
    }

    #[test]
    fn hw_rejects_short_and_non_finite() {
        assert_eq!(hw_diagnostic(&[0.0; 99]), Err(DiagnosticsError::TraceTooShort { len: 99, min: 100 }));
        let mut x = normals(200, 1);
        x[17] = f64::NAN;
        assert_eq!(hw_diagnostic(&x), Err(DiagnosticsError::NonFinite(17)));
    }

    #[test]
    fn hw_halfwidth_matches_mean_precision() {
        let x: Vec<f64> = normals(4000, 5).iter().map(|e| 10.0 + e).collect();
        let r = hw_diagnostic(&x).unwrap();
        let expected = 1.96 * (1.0 / 4000.0f64).sqrt() / 10.0;
        assert!((r.halfwidth_ratio / expected - 1.0).abs() < 0.2);
        assert!(r.halfwidth_passed);
    }

    #[test]
    fn ess_iid() {
        let n = 10_000;
        for seed in 0..5 {
            let ess = effective_sample_size(&normals(n, 20 + seed)).unwrap();
            assert!(ess >= 0.8 * n as f64 && ess <= 1.2 * n as f64, "{ess}");
        }
    }

    #[test]
    fn ess_ar1_closed_form() {
        let n = 20_000;
        let target = n as f64 * 0.1 / 1.9;
        for seed in 0..5 {
            let ess = effective_sample_size(&ar1(n, 0.9, 40 + seed)).unwrap();
            assert!(ess > target / 1.5 && ess < target * 1.5, "{ess} vs {target}");
        }
    }

    #[test]
    fn ess_constant_is_zero() {
        assert_eq!(effective_sample_size(&[1.0; 50]).unwrap(), 0.0);
        assert!(matches!(effective_sample_size(&[1.0; 5]), Err(DiagnosticsError::TraceTooShort { .. })));
    }

    #[test]
    fn report_has_one_entry_per_trace() {
        let traces = vec![("a".to_string(), normals(300, 1)), ("b".to_string(), vec![1.0; 300])];
        let r = DiagnosticsReport::from_traces(&traces).unwrap();
        assert_eq!(r.traces.len(), 2);
        assert_eq!(r.n_draws, 300);
        assert_eq!(r.traces[1].ess, 0.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: DiagnosticsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
