//! Window extraction and feature normalization for the temperature
//! surrogate. Raw units live in the windows; the model normalizes on the
//! way in so checkpoints stay self-contained.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::thermal::ThermalHistory;
use crate::{Error, Result};

/// Time-variant input channels per step, in order.
pub const CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["dn_mm", "dl_mm", "lp_w", "temp_lag_c"];

/// One training sample: `window` steps of inputs, the node's birth
/// descriptors, and the last `horizon` temperatures of the window as
/// targets. The temperature channel is the node's own history lagged by
/// `horizon`, so every temperature the network sees predates the span it
/// predicts; that is what lets closed-loop rollout feed predictions back
/// without peeking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    /// `window` rows of [DN, DL, LP, lagged T].
    pub inputs: Vec<[f64; CHANNELS]>,
    /// [temperature at birth, laser power at birth].
    pub invariant: [f64; 2],
    /// `horizon` true temperatures, raw °C.
    pub targets: Vec<f64>,
    /// Index into the history slice this window came from.
    pub source: usize,
    /// Sample index of the first window step.
    pub start: usize,
}

/// Slices every history into overlapping windows. Window k of a history
/// starts at `k·stride`; a history shorter than `window` yields none.
/// Steps whose lagged-temperature index would be negative clamp to the
/// first recorded sample (only the earliest windows are affected).
pub fn make_windows(
    histories: &[ThermalHistory],
    window: usize,
    stride: usize,
    horizon: usize,
) -> Result<Vec<FeatureWindow>> {
    if window < 2 || stride == 0 {
        return Err(Error::Param("window must be >= 2 and stride >= 1".into()));
    }
    if horizon == 0 || horizon > window {
        return Err(Error::Param(format!(
            "horizon {horizon} must be in 1..={window}"
        )));
    }
    let mut out = Vec::new();
    for (source, h) in histories.iter().enumerate() {
        let n = h.time_s.len();
        if n < window {
            continue;
        }
        let count = (n - window) / stride + 1;
        for k in 0..count {
            let start = k * stride;
            let mut inputs = Vec::with_capacity(window);
            for j in start..start + window {
                let lag = j.saturating_sub(horizon);
                inputs.push([h.dn_mm[j], h.dl_mm[j], h.lp_w[j], h.temp_c[lag]]);
            }
            let targets = h.temp_c[start + window - horizon..start + window].to_vec();
            out.push(FeatureWindow {
                inputs,
                invariant: [h.temp_c[0], h.lp_birth_w],
                targets,
                source,
                start,
            });
        }
    }
    Ok(out)
}

/// Per-channel standardization constants, estimated on training data only.
/// Channel 3 (lagged temperature) shares the target statistics so the
/// closed-loop feedback path is consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: [f64; CHANNELS],
    pub input_std: [f64; CHANNELS],
    pub invariant_mean: [f64; 2],
    pub invariant_std: [f64; 2],
    pub temp_mean: f64,
    pub temp_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var: f64 = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    // Constant channels (a wall built at one power, say) would otherwise
    // divide by zero; centring them to 0 and leaving the scale alone is
    // the right degenerate behaviour.
    (mean, if std > 1e-9 { std } else { 1.0 })
}

impl NormStats {
    pub fn from_windows(windows: &[FeatureWindow]) -> Result<NormStats> {
        if windows.is_empty() {
            return Err(Error::Param("no windows to estimate statistics from".into()));
        }
        let mut input_mean = [0.0; CHANNELS];
        let mut input_std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            let it = windows.iter().flat_map(move |w| w.inputs.iter().map(move |row| row[c]));
            let (m, s) = mean_std(it);
            input_mean[c] = m;
            input_std[c] = s;
        }
        let mut invariant_mean = [0.0; 2];
        let mut invariant_std = [1.0; 2];
        for c in 0..2 {
            let it = windows.iter().map(move |w| w.invariant[c]);
            let (m, s) = mean_std(it);
            invariant_mean[c] = m;
            invariant_std[c] = s;
        }
        let (temp_mean, temp_std) =
            mean_std(windows.iter().flat_map(|w| w.targets.iter().copied()));
        // Keep the feedback path self-consistent: the lagged-temperature
        // channel is normalized exactly like the targets.
        input_mean[3] = temp_mean;
        input_std[3] = temp_std;
        Ok(NormStats {
            input_mean,
            input_std,
            invariant_mean,
            invariant_std,
            temp_mean,
            temp_std,
        })
    }

    pub fn normalize_step(&self, row: &[f64; CHANNELS]) -> Vec<f64> {
        (0..CHANNELS)
            .map(|c| (row[c] - self.input_mean[c]) / self.input_std[c])
            .collect()
    }

    pub fn normalize_invariant(&self, inv: &[f64; 2]) -> Vec<f64> {
        (0..2)
            .map(|c| (inv[c] - self.invariant_mean[c]) / self.invariant_std[c])
            .collect()
    }

    pub fn normalize_temp(&self, t: f64) -> f64 {
        (t - self.temp_mean) / self.temp_std
    }

    pub fn denormalize_temp(&self, t: f64) -> f64 {
        t * self.temp_std + self.temp_mean
    }
}

/// Shuffles profile indices and splits them whole, so no profile leaks
/// samples across the train/test boundary. The train side always keeps at
/// least one profile; with `n >= 2` the test side does too.
pub fn split_profiles(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Param("cannot split zero profiles".into()));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Param(format!("train_frac {train_frac} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut n_train = ((n as f64) * train_frac).round() as usize;
    n_train = n_train.clamp(1, if n >= 2 { n - 1 } else { n });
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
