//! Maximum-likelihood Gamma fit for music popularity counts.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    pub log_likelihood: f64,
    /// Log-likelihood at every Newton iterate, starting point first.
    pub trace: Vec<f64>,
}

/// Digamma via upward recurrence to `x >= 20` and the asymptotic series.
pub fn digamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 20.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    acc + x.ln() - 0.5 * inv - series
}

/// Trigamma, same scheme as [`digamma`].
pub fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv * (1.0 + inv * (0.5 + inv * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))));
    acc + series
}

/// Profile log-likelihood at shape `k` with the scale at its optimum `mean / k`.
fn profile_ll(k: f64, n: f64, mean: f64, mean_ln: f64) -> f64 {
    let theta = mean / k;
    n * ((k - 1.0) * mean_ln - mean / theta - k * theta.ln() - ln_gamma(k))
}

/// Fits `Gamma(shape, scale)` by Newton iterations on
/// `ln k - digamma(k) = ln(mean) - mean(ln x)`, then `scale = mean / k`.
///
/// The start point is moved to the left of the root if needed; from there
/// the iterates rise monotonically (the left side is convex and
/// decreasing), so the log-likelihood never drops.
pub fn fit_gamma_mle(counts: &[f64]) -> Result<GammaFit> {
    if counts.len() < 2 {
        return Err(Error::Data(format!("gamma fit needs at least 2 values, got {}", counts.len())));
    }
    if let Some(v) = counts.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Data(format!("gamma fit needs positive finite values, got {v}")));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let mean_ln = counts.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_ln;
    if !(s > 1e-12) {
        return Err(Error::Data(
            "gamma fit is degenerate: all values (nearly) equal, zero variance; add jitter".into(),
        ));
    }

    let f = |k: f64| k.ln() - digamma(k) - s;
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    while f(k) < 0.0 {
        k *= 0.5;
    }
    let mut trace = vec![profile_ll(k, n, mean, mean_ln)];
    for _ in 0..200 {
        let step = f(k) / (1.0 / k - trigamma(k));
        let next = k - step;
        let next = if next > 0.0 { next } else { 0.5 * k };
        let converged = ((next - k) / k).abs() < 1e-10;
        k = next;
        trace.push(profile_ll(k, n, mean, mean_ln));
        if converged {
            return Ok(GammaFit {
                shape: k,
                scale: mean / k,
                log_likelihood: *trace.last().unwrap(),
                trace,
            });
        }
    }
    Err(Error::Numeric(format!("gamma fit did not converge (last shape {k})")))
}
