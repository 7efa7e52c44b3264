//! Gaussian-process regression over profile parameters.
//!
//! Anisotropic squared-exponential kernel with per-dimension lengthscales,
//!
//! ```text
//! k(p, p') = σ² · exp(−½ · Σ_d ((p_d − p'_d)/ℓ_d)²)
//! ```
//!
//! plus observation noise on the diagonal. Callers hand in points already
//! mapped to the unit box (the optimizer does this through its bounds);
//! targets are standardized internally and de-standardized on prediction.
//!
//! Key properties:
//! - fitting factorizes `K = LLᵀ` with jitter escalation (0, then 1e-6
//!   stepping ×10 up to 1e-2) before giving up with a conditioning error;
//! - an empty training set is legal and yields the prior (zero mean,
//!   `signal_variance` everywhere);
//! - `log_marginal_likelihood` is the closed form
//!   `−½·yᵀK⁻¹y − ½·log|K| − (N/2)·log 2π` on the standardized targets;
//! - hyperparameters come from a multi-start coordinate search over a
//!   log-space grid, seeded by the median-distance heuristic.

use serde::{Deserialize, Serialize};

use crate::{ensure_finite, Error, Result};

/// Kernel and noise hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub signal_variance: f64,
    /// One lengthscale per input dimension.
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyperParams {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("signal_variance", self.signal_variance)?;
        ensure_finite("noise_variance", self.noise_variance)?;
        if self.signal_variance <= 0.0 {
            return Err(Error::Param("signal_variance must be positive".into()));
        }
        if self.noise_variance < 0.0 {
            return Err(Error::Param("noise_variance must be non-negative".into()));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::Param("need at least one lengthscale".into()));
        }
        for l in &self.lengthscales {
            ensure_finite("lengthscale", *l)?;
            if *l <= 0.0 {
                return Err(Error::Param("lengthscales must be positive".into()));
            }
        }
        Ok(())
    }

    /// Sensible defaults for `dims` unit-box dimensions.
    pub fn default_for(dims: usize) -> Self {
        GpHyperParams {
            signal_variance: 1.0,
            lengthscales: vec![0.5; dims],
            noise_variance: 1e-4,
        }
    }
}

/// Squared-exponential covariance between two points.
pub fn rbf_kernel(hyper: &GpHyperParams, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), hyper.lengthscales.len());
    debug_assert_eq!(b.len(), hyper.lengthscales.len());
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(&hyper.lengthscales) {
        let d = (x - y) / l;
        s += d * d;
    }
    hyper.signal_variance * (-0.5 * s).exp()
}

/// Fitted model. Prediction and likelihood queries borrow the factorization
/// computed at fit time; refit to change data or hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    hyper: GpHyperParams,
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    /// Standardized targets.
    y: Vec<f64>,
    /// Lower Cholesky factor of K, row-major n×n.
    chol: Vec<f64>,
    /// K⁻¹·y (standardized).
    alpha: Vec<f64>,
    /// Diagonal jitter that made the factorization succeed.
    jitter: f64,
}

impl GpModel {
    /// Fits the GP. An empty dataset yields the prior model; otherwise all
    /// points must share the hyperparameters' dimensionality.
    pub fn fit(x: &[Vec<f64>], y: &[f64], hyper: &GpHyperParams) -> Result<GpModel> {
        hyper.validate()?;
        if x.len() != y.len() {
            return Err(Error::Shape(format!(
                "{} points but {} targets",
                x.len(),
                y.len()
            )));
        }
        let dims = hyper.lengthscales.len();
        for (i, p) in x.iter().enumerate() {
            if p.len() != dims {
                return Err(Error::Shape(format!(
                    "point {i} has {} coordinates, expected {dims}",
                    p.len()
                )));
            }
            for v in p {
                ensure_finite("input coordinate", *v)?;
            }
        }
        for v in y {
            ensure_finite("target", *v)?;
        }

        let n = x.len();
        if n == 0 {
            return Ok(GpModel {
                hyper: hyper.clone(),
                x: Vec::new(),
                y_mean: 0.0,
                y_std: 1.0,
                y: Vec::new(),
                chol: Vec::new(),
                alpha: Vec::new(),
                jitter: 0.0,
            });
        }

        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        let y_s: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

        let mut base = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = rbf_kernel(hyper, &x[i], &x[j]);
                base[i * n + j] = k;
                base[j * n + i] = k;
            }
            base[i * n + i] += hyper.noise_variance;
        }

        let mut jitter = 0.0;
        loop {
            let mut k = base.clone();
            for i in 0..n {
                k[i * n + i] += jitter;
            }
            if cholesky_in_place(n, &mut k).is_ok() {
                let mut alpha = y_s.clone();
                solve_lower(n, &k, &mut alpha);
                solve_lower_transpose(n, &k, &mut alpha);
                return Ok(GpModel {
                    hyper: hyper.clone(),
                    x: x.to_vec(),
                    y_mean,
                    y_std,
                    y: y_s,
                    chol: k,
                    alpha,
                    jitter,
                });
            }
            jitter = if jitter == 0.0 { 1e-6 } else { jitter * 10.0 };
            if jitter > 1e-2 {
                return Err(Error::Conditioning(format!(
                    "covariance not positive definite even with jitter up to 1e-2 (n = {n})"
                )));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn hyper(&self) -> &GpHyperParams {
        &self.hyper
    }

    /// Jitter added during factorization (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean and standard deviation at `p`, in target units.
    pub fn posterior(&self, p: &[f64]) -> Result<(f64, f64)> {
        if p.len() != self.hyper.lengthscales.len() {
            return Err(Error::Shape(format!(
                "query has {} coordinates, expected {}",
                p.len(),
                self.hyper.lengthscales.len()
            )));
        }
        for v in p {
            ensure_finite("query coordinate", *v)?;
        }
        let n = self.x.len();
        if n == 0 {
            return Ok((self.y_mean, self.y_std * self.hyper.signal_variance.sqrt()));
        }
        let ks: Vec<f64> = self.x.iter().map(|xi| rbf_kernel(&self.hyper, p, xi)).collect();
        let mean_s: f64 = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let mut v = ks;
        solve_lower(n, &self.chol, &mut v);
        let latent = self.hyper.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
        let std_s = latent.max(0.0).sqrt();
        Ok((self.y_mean + self.y_std * mean_s, self.y_std * std_s))
    }

    /// Log marginal likelihood of the standardized targets under the fitted
    /// hyperparameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len();
        if n == 0 {
            return 0.0;
        }
        let fit_term: f64 = -0.5 * self.y.iter().zip(&self.alpha).map(|(y, a)| y * a).sum::<f64>();
        let log_det: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        fit_term - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Multi-start coordinate search for kernel hyperparameters, maximizing the
/// log marginal likelihood over a log-space probe grid.
///
/// Starts from the median-distance heuristic and from unit scales; each
/// sweep visits every hyperparameter and keeps the best of ×{¼, ½, 2, 4}.
pub fn hyper_opt(x: &[Vec<f64>], y: &[f64], dims: usize) -> Result<GpHyperParams> {
    if x.len() < 2 {
        return Ok(median_heuristic(x, dims));
    }
    let starts = [median_heuristic(x, dims), GpHyperParams::default_for(dims)];
    let score = |h: &GpHyperParams| -> f64 {
        match GpModel::fit(x, y, h) {
            Ok(m) => m.log_marginal_likelihood(),
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let mut best: Option<(f64, GpHyperParams)> = None;
    for start in starts {
        let mut current = start;
        let mut current_score = score(&current);
        for _sweep in 0..2 {
            for slot in 0..(dims + 2) {
                for mult in [0.25, 0.5, 2.0, 4.0] {
                    let mut probe = current.clone();
                    match slot {
                        0 => {
                            probe.signal_variance =
                                (probe.signal_variance * mult).clamp(1e-6, 1e6)
                        }
                        1 => {
                            probe.noise_variance =
                                (probe.noise_variance * mult).clamp(1e-8, 1.0)
                        }
                        d => {
                            probe.lengthscales[d - 2] =
                                (probe.lengthscales[d - 2] * mult).clamp(1e-3, 1e3)
                        }
                    }
                    let s = score(&probe);
                    if s > current_score {
                        current_score = s;
                        current = probe;
                    }
                }
            }
        }
        if best.as_ref().map_or(true, |(s, _)| current_score > *s) {
            best = Some((current_score, current));
        }
    }
    let (best_score, best_hyper) = best.expect("at least one start");
    if best_score == f64::NEG_INFINITY {
        return Err(Error::Conditioning(
            "no hyperparameter candidate produced a well-conditioned fit".into(),
        ));
    }
    Ok(best_hyper)
}

/// Median pairwise distance per dimension; the standard lengthscale seed.
fn median_heuristic(x: &[Vec<f64>], dims: usize) -> GpHyperParams {
    let mut lengthscales = vec![0.5; dims];
    for d in 0..dims {
        let mut gaps: Vec<f64> = Vec::new();
        for i in 0..x.len() {
            for j in (i + 1)..x.len() {
                let g = (x[i][d] - x[j][d]).abs();
                if g > 0.0 {
                    gaps.push(g);
                }
            }
        }
        if !gaps.is_empty() {
            gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            lengthscales[d] = gaps[gaps.len() / 2].clamp(1e-3, 1e3);
        }
    }
    GpHyperParams {
        signal_variance: 1.0,
        lengthscales,
        noise_variance: 1e-4,
    }
}

/// In-place lower Cholesky; fails on a non-positive pivot.
fn cholesky_in_place(n: usize, a: &mut [f64]) -> std::result::Result<(), ()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(());
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves L·out = b in place.
fn solve_lower(n: usize, l: &[f64], b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves Lᵀ·out = b in place.
fn solve_lower_transpose(n: usize, l: &[f64], b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}
