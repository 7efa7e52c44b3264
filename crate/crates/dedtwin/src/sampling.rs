//! Randomized laser-power profile libraries.
//!
//! Training data for the surrogate comes from profiles that sweep a wide
//! power envelope rather than from the parametric generator. Each library
//! entry is produced by a fixed five-step recipe:
//!
//! 1. Latin hypercube sample of summary statistics (mean power, power
//!    spread, low-pass cutoff) — one point per stratum in every dimension.
//! 2. Gaussian random walk (`x₀ = 0`, `x_{k+1} = x_k + N(0, step²)`) for
//!    uncorrelated roughness.
//! 3. Exact standardization of the walk to the sampled mean/spread
//!    (population convention).
//! 4. Butterworth low-pass at the sampled cutoff to set the bandwidth; a
//!    cutoff of zero bypasses the filter and yields a constant profile at
//!    the target mean.
//! 5. Clamp to the commanded power range.
//!
//! Profile `i` draws from ChaCha stream `i + 1` of the run seed (stream 0
//! is reserved for the statistics sample), so entries are independent of
//! generation order and the library is reproducible sample-for-sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::butterworth;
use crate::profile::LaserPowerProfile;
use crate::{ensure_finite, Error, Result};

/// Summary statistics that define one library profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    /// Target mean power, W.
    pub mean_w: f64,
    /// Target power standard deviation, W (the width of the excitation).
    pub std_w: f64,
    /// Low-pass cutoff, Hz; 0 disables filtering and fixes the profile at
    /// the mean.
    pub cutoff_hz: f64,
}

/// Sampling box for [`ProfileStats`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsBounds {
    pub mean_w: [f64; 2],
    pub std_w: [f64; 2],
    pub cutoff_hz: [f64; 2],
}

impl Default for StatsBounds {
    fn default() -> Self {
        StatsBounds {
            mean_w: [400.0, 700.0],
            std_w: [50.0, 300.0],
            cutoff_hz: [0.0, 1.0],
        }
    }
}

impl StatsBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("mean_w", self.mean_w),
            ("std_w", self.std_w),
            ("cutoff_hz", self.cutoff_hz),
        ] {
            ensure_finite(name, lo)?;
            ensure_finite(name, hi)?;
            if lo > hi {
                return Err(Error::Config(format!("{name}: lower {lo} > upper {hi}")));
            }
        }
        if self.std_w[0] < 0.0 || self.cutoff_hz[0] < 0.0 {
            return Err(Error::Config(
                "std_w and cutoff_hz bounds must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One generated library profile plus the stats and seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub profile_id: u32,
    pub stats: ProfileStats,
    /// RNG stream of the run seed that produced the walk.
    pub seed: u64,
    #[serde(skip)]
    pub profile: LaserPowerProfile,
}

/// Latin hypercube sample: `count` points over the given per-dimension
/// bounds, exactly one point per stratum in every dimension.
pub fn lhs_sample(bounds: &[[f64; 2]], count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if bounds.is_empty() {
        return Err(Error::Param("lhs_sample needs at least one dimension".into()));
    }
    if count == 0 {
        return Err(Error::Param("lhs_sample needs count >= 1".into()));
    }
    for (d, [lo, hi]) in bounds.iter().enumerate() {
        ensure_finite("bound", *lo)?;
        ensure_finite("bound", *hi)?;
        if lo > hi {
            return Err(Error::Config(format!("dimension {d}: lower {lo} > upper {hi}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; bounds.len()]; count];
    for (d, [lo, hi]) in bounds.iter().enumerate() {
        // Shuffled stratum indices, then uniform jitter inside each stratum.
        let mut strata: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            let j = rng.gen_range(0..=i);
            strata.swap(i, j);
        }
        let width = (hi - lo) / count as f64;
        for (point, stratum) in points.iter_mut().zip(strata) {
            let u: f64 = rng.gen();
            point[d] = lo + (stratum as f64 + u) * width;
        }
    }
    Ok(points)
}

/// Gaussian random walk of `length` samples starting at zero.
pub fn mcmc_profile(length: usize, step_scale: f64, seed: u64) -> Result<Vec<f64>> {
    ensure_finite("step_scale", step_scale)?;
    if step_scale <= 0.0 {
        return Err(Error::Param(format!(
            "step_scale must be positive, got {step_scale}"
        )));
    }
    if length == 0 {
        return Err(Error::Param("walk length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(walk_with(&mut rng, length, step_scale))
}

fn walk_with(rng: &mut ChaCha8Rng, length: usize, step_scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, step_scale).expect("step_scale checked positive");
    let mut out = Vec::with_capacity(length);
    let mut x = 0.0;
    out.push(x);
    for _ in 1..length {
        x += normal.sample(rng);
        out.push(x);
    }
    out
}

/// Rescales `series` to the exact target mean and population standard
/// deviation. A zero `target_std` collapses the series onto the mean;
/// a constant series cannot be stretched to a positive spread.
pub fn standardize_to(series: &[f64], target_mean: f64, target_std: f64) -> Result<Vec<f64>> {
    ensure_finite("target_mean", target_mean)?;
    ensure_finite("target_std", target_std)?;
    if target_std < 0.0 {
        return Err(Error::Param(format!(
            "target_std must be non-negative, got {target_std}"
        )));
    }
    if series.is_empty() {
        return Err(Error::Param("cannot standardize an empty series".into()));
    }
    if target_std == 0.0 {
        return Ok(vec![target_mean; series.len()]);
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(Error::Degenerate(
            "constant series cannot be scaled to a positive spread".into(),
        ));
    }
    Ok(series
        .iter()
        .map(|x| (x - mean) / std * target_std + target_mean)
        .collect())
}

/// Generates `count` library profiles of `floor(duration/period) + 1`
/// samples each. `clamp_w` bounds the commanded power.
pub fn build_profile_library(
    bounds: &StatsBounds,
    count: usize,
    duration_s: f64,
    sample_period_s: f64,
    clamp_w: [f64; 2],
    seed: u64,
) -> Result<Vec<LibraryEntry>> {
    bounds.validate()?;
    ensure_finite("duration_s", duration_s)?;
    ensure_finite("sample_period_s", sample_period_s)?;
    if duration_s <= 0.0 || sample_period_s <= 0.0 || sample_period_s > duration_s {
        return Err(Error::Param(
            "need 0 < sample_period_s <= duration_s".into(),
        ));
    }
    if clamp_w[0] > clamp_w[1] {
        return Err(Error::Config(format!(
            "power clamp floor {} above ceiling {}",
            clamp_w[0], clamp_w[1]
        )));
    }
    let sample_rate_hz = 1.0 / sample_period_s;
    if bounds.cutoff_hz[1] >= sample_rate_hz / 2.0 {
        return Err(Error::Config(format!(
            "cutoff bound {} Hz reaches Nyquist {} Hz",
            bounds.cutoff_hz[1],
            sample_rate_hz / 2.0
        )));
    }
    let n_samples = (duration_s / sample_period_s).floor() as usize + 1;
    let stats_points = lhs_sample(
        &[bounds.mean_w, bounds.std_w, bounds.cutoff_hz],
        count,
        seed,
    )?;

    let mut entries = Vec::with_capacity(count);
    for (i, point) in stats_points.into_iter().enumerate() {
        let stats = ProfileStats {
            mean_w: point[0],
            std_w: point[1],
            cutoff_hz: point[2],
        };
        let stream = i as u64 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let powers = if stats.cutoff_hz > 0.0 {
            let walk = walk_with(&mut rng, n_samples, 1.0);
            let scaled = standardize_to(&walk, stats.mean_w, stats.std_w)?;
            let coeffs = butterworth::design(stats.cutoff_hz, sample_rate_hz)?;
            butterworth::filter_series(&coeffs, &scaled)
        } else {
            vec![stats.mean_w; n_samples]
        };
        let powers_w: Vec<f64> = powers
            .into_iter()
            .map(|p| p.clamp(clamp_w[0], clamp_w[1]))
            .collect();
        let times_s = (0..n_samples).map(|k| k as f64 * sample_period_s).collect();
        entries.push(LibraryEntry {
            profile_id: i as u32,
            stats,
            seed: stream,
            profile: LaserPowerProfile { times_s, powers_w },
        });
    }
    Ok(entries)
}
