//! Parametric laser-power profiles.
//!
//! A profile is described by ten scalars and evaluated on normalized build
//! time `t ∈ [0, 1]`. The core shape is a modified Fourier series over the
//! odd harmonics only,
//!
//! ```text
//! y(t) = (A + n·ΔA) · (2/π) · Σ_{i=1,3,5,…,i≤n} (1/i) · sin(2π(f + i·Δf)·t + (φ + i·Δφ))
//! ```
//!
//! which degenerates to a square-wave expansion when the step terms vanish.
//! On top of that sit a linear trend and a seasonal component:
//!
//! ```text
//! y'(t) = y(t) + T·t + S·sin(2π·t·SF)
//! ```
//!
//! `y'` is dimensionless; an affine [`PowerMap`] turns it into clamped watts.
//! Rendering samples `y'` at a fixed period and yields a [`LaserPowerProfile`]
//! ready for the simulator.
//!
//! Invariants kept here:
//! - `n ≥ 1` and integral; even harmonics contribute nothing by construction.
//! - rendered powers always lie inside the power map's clamp range;
//! - rendering the same parameters twice is bit-identical (pure arithmetic,
//!   no RNG).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{ensure_finite, Error, Result};

/// Number of free parameters in the profile description.
pub const PARAM_COUNT: usize = 10;

/// Canonical parameter order used by [`ProfileParams::to_array`],
/// [`ParamBounds`] vectors and every optimizer-facing interface.
pub const PARAM_NAMES: [&str; PARAM_COUNT] = [
    "A", "f", "n", "phi", "dA", "df", "dphi", "T_trend", "S", "SF",
];

/// Ten-parameter profile description.
///
/// Serialized as a flat JSON object keyed by the canonical parameter names
/// (`A`, `f`, `n`, `phi`, `dA`, `df`, `dphi`, `T_trend`, `S`, `SF`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    /// Base amplitude `A` of the Fourier block.
    #[serde(rename = "A")]
    pub amplitude: f64,
    /// Base frequency `f`, in cycles per normalized build time.
    #[serde(rename = "f")]
    pub frequency: f64,
    /// Number of series terms `n`; only odd indices enter the sum.
    #[serde(rename = "n")]
    pub n_terms: u32,
    /// Base phase `phi`, radians.
    #[serde(rename = "phi")]
    pub phase: f64,
    /// Per-term amplitude increment `dA`.
    #[serde(rename = "dA")]
    pub amplitude_step: f64,
    /// Per-term frequency increment `df`.
    #[serde(rename = "df")]
    pub frequency_step: f64,
    /// Per-term phase increment `dphi`, radians.
    #[serde(rename = "dphi")]
    pub phase_step: f64,
    /// Linear trend slope `T_trend` over the whole build (t runs 0..1).
    #[serde(rename = "T_trend")]
    pub trend: f64,
    /// Seasonal amplitude `S`.
    #[serde(rename = "S")]
    pub seasonal_amplitude: f64,
    /// Seasonal frequency `SF`, cycles per normalized build time.
    #[serde(rename = "SF")]
    pub seasonal_frequency: f64,
}

impl ProfileParams {
    /// Fails on non-finite values or `n_terms == 0`.
    pub fn validate(&self) -> Result<()> {
        for (name, value) in PARAM_NAMES.iter().zip(self.to_array()) {
            ensure_finite(name, value)?;
        }
        if self.n_terms == 0 {
            return Err(Error::Param("n must be a positive integer".into()));
        }
        Ok(())
    }

    /// Canonical vector form, order per [`PARAM_NAMES`].
    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        [
            self.amplitude,
            self.frequency,
            self.n_terms as f64,
            self.phase,
            self.amplitude_step,
            self.frequency_step,
            self.phase_step,
            self.trend,
            self.seasonal_amplitude,
            self.seasonal_frequency,
        ]
    }

    /// Inverse of [`to_array`](Self::to_array). The `n` slot is a continuous
    /// relaxation: it is rounded to the nearest integer with ties rounding
    /// down (2.5 → 2), then must land at ≥ 1.
    pub fn from_array(values: &[f64]) -> Result<Self> {
        if values.len() != PARAM_COUNT {
            return Err(Error::Shape(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                values.len()
            )));
        }
        for (name, value) in PARAM_NAMES.iter().zip(values) {
            ensure_finite(name, *value)?;
        }
        let n = (values[2] - 0.5).ceil();
        if n < 1.0 || n > u32::MAX as f64 {
            return Err(Error::Param(format!(
                "n rounds to {n}, must be a positive integer"
            )));
        }
        let params = ProfileParams {
            amplitude: values[0],
            frequency: values[1],
            n_terms: n as u32,
            phase: values[3],
            amplitude_step: values[4],
            frequency_step: values[5],
            phase_step: values[6],
            trend: values[7],
            seasonal_amplitude: values[8],
            seasonal_frequency: values[9],
        };
        params.validate()?;
        Ok(params)
    }
}

/// Per-parameter `[lower, upper]` box for sampling and optimization.
///
/// Serialized as a JSON object keyed by parameter name, each value a
/// two-element array. Equal bounds pin a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamBounds {
    #[serde(rename = "A")]
    pub amplitude: [f64; 2],
    #[serde(rename = "f")]
    pub frequency: [f64; 2],
    #[serde(rename = "n")]
    pub n_terms: [f64; 2],
    #[serde(rename = "phi")]
    pub phase: [f64; 2],
    #[serde(rename = "dA")]
    pub amplitude_step: [f64; 2],
    #[serde(rename = "df")]
    pub frequency_step: [f64; 2],
    #[serde(rename = "dphi")]
    pub phase_step: [f64; 2],
    #[serde(rename = "T_trend")]
    pub trend: [f64; 2],
    #[serde(rename = "S")]
    pub seasonal_amplitude: [f64; 2],
    #[serde(rename = "SF")]
    pub seasonal_frequency: [f64; 2],
}

impl Default for ParamBounds {
    /// Working box for watt-scale profiles under the default power map.
    fn default() -> Self {
        ParamBounds {
            amplitude: [0.0, 10.0],
            frequency: [0.0, 2.0],
            n_terms: [1.0, 5.0],
            phase: [-PI, PI],
            amplitude_step: [-1.0, 1.0],
            frequency_step: [-0.5, 0.5],
            phase_step: [-1.0, 1.0],
            trend: [-100.0, 100.0],
            seasonal_amplitude: [0.0, 50.0],
            seasonal_frequency: [0.0, 2.0],
        }
    }
}

impl ParamBounds {
    pub fn to_rows(&self) -> [[f64; 2]; PARAM_COUNT] {
        [
            self.amplitude,
            self.frequency,
            self.n_terms,
            self.phase,
            self.amplitude_step,
            self.frequency_step,
            self.phase_step,
            self.trend,
            self.seasonal_amplitude,
            self.seasonal_frequency,
        ]
    }

    /// Fails when any bound is non-finite, inverted, or when the `n` row
    /// cannot contain a positive integer.
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in PARAM_NAMES.iter().zip(self.to_rows()) {
            ensure_finite(name, lo)?;
            ensure_finite(name, hi)?;
            if lo > hi {
                return Err(Error::Config(format!("{name}: lower {lo} > upper {hi}")));
            }
        }
        let [n_lo, n_hi] = self.n_terms;
        if (n_hi - 0.5).ceil() < 1.0 {
            return Err(Error::Config(format!(
                "n bounds [{n_lo}, {n_hi}] round below 1"
            )));
        }
        Ok(())
    }

    /// Maps a unit-box point to physical parameter values (no rounding; use
    /// [`ProfileParams::from_array`] for that).
    pub fn from_unit(&self, unit: &[f64]) -> Result<[f64; PARAM_COUNT]> {
        if unit.len() != PARAM_COUNT {
            return Err(Error::Shape(format!(
                "expected {PARAM_COUNT} coordinates, got {}",
                unit.len()
            )));
        }
        let rows = self.to_rows();
        let mut out = [0.0; PARAM_COUNT];
        for (k, u) in unit.iter().enumerate() {
            ensure_finite("unit coordinate", *u)?;
            let [lo, hi] = rows[k];
            out[k] = lo + u.clamp(0.0, 1.0) * (hi - lo);
        }
        Ok(out)
    }

    /// Maps physical values into the unit box; pinned parameters map to 0.
    pub fn to_unit(&self, values: &[f64; PARAM_COUNT]) -> [f64; PARAM_COUNT] {
        let rows = self.to_rows();
        let mut out = [0.0; PARAM_COUNT];
        for k in 0..PARAM_COUNT {
            let [lo, hi] = rows[k];
            out[k] = if hi > lo {
                ((values[k] - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        out
    }

    pub fn contains(&self, params: &ProfileParams) -> bool {
        self.to_rows()
            .iter()
            .zip(params.to_array())
            .all(|([lo, hi], v)| v >= *lo && v <= *hi)
    }
}

/// Affine map from dimensionless profile output to clamped laser watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerMap {
    /// Watts per unit of profile output.
    pub scale: f64,
    /// Baseline power added before clamping, W.
    pub offset_w: f64,
    /// Clamp floor, W.
    pub min_w: f64,
    /// Clamp ceiling, W.
    pub max_w: f64,
}

impl Default for PowerMap {
    fn default() -> Self {
        PowerMap {
            scale: 1.0,
            offset_w: 550.0,
            min_w: 0.0,
            max_w: 1000.0,
        }
    }
}

impl PowerMap {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("scale", self.scale)?;
        ensure_finite("offset_w", self.offset_w)?;
        ensure_finite("min_w", self.min_w)?;
        ensure_finite("max_w", self.max_w)?;
        if self.min_w > self.max_w {
            return Err(Error::Config(format!(
                "power clamp floor {} above ceiling {}",
                self.min_w, self.max_w
            )));
        }
        Ok(())
    }

    pub fn apply(&self, y: f64) -> f64 {
        (self.offset_w + self.scale * y).clamp(self.min_w, self.max_w)
    }
}

/// Sampled laser-power schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LaserPowerProfile {
    /// Sample instants, seconds from build start; uniformly spaced.
    pub times_s: Vec<f64>,
    /// Commanded power at each instant, W.
    pub powers_w: Vec<f64>,
}

impl LaserPowerProfile {
    pub fn len(&self) -> usize {
        self.powers_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers_w.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.times_s.last().copied().unwrap_or(0.0)
    }

    pub fn sample_period_s(&self) -> f64 {
        if self.times_s.len() < 2 {
            0.0
        } else {
            self.times_s[1] - self.times_s[0]
        }
    }

    /// Commanded power at time `t_s`, held constant between samples and at
    /// the boundaries (zero-order hold).
    pub fn power_at(&self, t_s: f64) -> f64 {
        let period = self.sample_period_s();
        if period <= 0.0 {
            return self.powers_w.first().copied().unwrap_or(0.0);
        }
        let idx = (t_s / period).floor();
        let idx = (idx.max(0.0) as usize).min(self.powers_w.len() - 1);
        self.powers_w[idx]
    }

    /// Renders `time_s,power_w` CSV with six-decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(24 * self.len() + 16);
        out.push_str("time_s,power_w\n");
        for (t, p) in self.times_s.iter().zip(&self.powers_w) {
            out.push_str(&format!("{t:.6},{p:.6}\n"));
        }
        out
    }

    /// Parses the CSV produced by [`to_csv`](Self::to_csv).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("time_s,power_w") => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header time_s,power_w, got {other:?}"
                )))
            }
        }
        let mut times_s = Vec::new();
        let mut powers_w = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (t, p) = line.split_once(',').ok_or_else(|| {
                Error::Parse(format!("line {}: expected two fields", lineno + 2))
            })?;
            let parse = |field: &str| {
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
            };
            times_s.push(parse(t)?);
            powers_w.push(parse(p)?);
        }
        if powers_w.is_empty() {
            return Err(Error::Parse("profile CSV has no samples".into()));
        }
        Ok(LaserPowerProfile { times_s, powers_w })
    }
}

/// Modified Fourier series `y(t)`; odd harmonics only.
///
/// `t` is normalized build time; values outside `[0, 1]` are legal (the
/// series is defined everywhere) but the renderer never asks for them.
pub fn eval_fourier(params: &ProfileParams, t: f64) -> f64 {
    let mut sum = 0.0;
    let mut i = 1u32;
    while i <= params.n_terms {
        let fi = i as f64;
        let freq = params.frequency + fi * params.frequency_step;
        let phase = params.phase + fi * params.phase_step;
        sum += (2.0 * PI * freq * t + phase).sin() / fi;
        i += 2;
    }
    (params.amplitude + params.n_terms as f64 * params.amplitude_step) * (2.0 / PI) * sum
}

/// Full profile `y'(t) = y(t) + T·t + S·sin(2π·t·SF)`.
pub fn eval_profile(params: &ProfileParams, t: f64) -> f64 {
    eval_fourier(params, t)
        + params.trend * t
        + params.seasonal_amplitude * (2.0 * PI * t * params.seasonal_frequency).sin()
}

/// Samples the profile at `sample_period_s` over `[0, duration_s]` and maps
/// it to watts. Produces `floor(duration/period) + 1` samples, endpoints
/// included.
pub fn render_profile(
    params: &ProfileParams,
    duration_s: f64,
    sample_period_s: f64,
    map: &PowerMap,
) -> Result<LaserPowerProfile> {
    params.validate()?;
    map.validate()?;
    ensure_finite("duration_s", duration_s)?;
    ensure_finite("sample_period_s", sample_period_s)?;
    if duration_s <= 0.0 || sample_period_s <= 0.0 {
        return Err(Error::Param(
            "duration and sample period must be positive".into(),
        ));
    }
    if sample_period_s > duration_s {
        return Err(Error::Param(format!(
            "sample period {sample_period_s} s exceeds duration {duration_s} s"
        )));
    }
    let n = (duration_s / sample_period_s).floor() as usize + 1;
    let mut times_s = Vec::with_capacity(n);
    let mut powers_w = Vec::with_capacity(n);
    for k in 0..n {
        let t_s = k as f64 * sample_period_s;
        let t_norm = t_s / duration_s;
        times_s.push(t_s);
        powers_w.push(map.apply(eval_profile(params, t_norm)));
    }
    Ok(LaserPowerProfile { times_s, powers_w })
}
