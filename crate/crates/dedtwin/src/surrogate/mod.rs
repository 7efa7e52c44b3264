//! Bayesian LSTM surrogate for per-node thermal history.
//!
//! Architecture: two stacked LSTM layers over the windowed input channels,
//! scaled dot-product attention pooling with a learned query, and a tanh
//! dense branch for the birth descriptors; the concatenation feeds a linear
//! head that emits the whole prediction horizon at once. Dropout sits after
//! each LSTM, after the attention context, and after the invariant branch,
//! and stays live at inference (Monte Carlo dropout), which is where the
//! uncertainty bands come from.
//!
//! Training maximizes an evidence lower bound: Gaussian log-likelihood with
//! fixed observation noise plus an L2 weight penalty standing in for the
//! KL term, optimized with plain SGD under a global gradient-norm clip.

mod data;
mod layers;
mod train;

pub use data::{make_windows, split_profiles, FeatureWindow, NormStats, CHANNELS, CHANNEL_NAMES};
pub use train::{train, EpochMetrics};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::thermal::ThermalHistory;
use crate::{ensure_finite, mix_seed, Error, Result};
use layers::{AttnCache, AttnGrad, Attention, Dense, DenseGrad, LstmGrad, LstmLayer, LstmStepCache};

const CHECKPOINT_FORMAT: &str = "dedtwin-surrogate";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Input window length, samples.
    pub window: usize,
    /// Offset between consecutive training windows.
    pub stride: usize,
    /// Outputs per window; also the closed-loop step size.
    pub horizon: usize,
    /// Hidden width of both LSTM layers.
    pub hidden: usize,
    /// Key/value width of the attention pool.
    pub attention_dim: usize,
    /// Width of the tanh branch over the birth descriptors.
    pub invariant_width: usize,
    /// Dropout probability at the four dropout sites.
    pub dropout: f64,
    /// Fixed observation noise of the likelihood, in normalized units.
    pub sigma_obs: f64,
    /// L2 penalty weight (weights only, never biases).
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling per SGD step.
    pub grad_clip: f64,
}

impl Default for SurrogateConfig {
    fn default() -> SurrogateConfig {
        SurrogateConfig {
            window: 100,
            stride: 50,
            horizon: 50,
            hidden: 32,
            attention_dim: 32,
            invariant_width: 100,
            dropout: 0.1,
            sigma_obs: 0.05,
            weight_decay: 1e-5,
            learning_rate: 0.02,
            epochs: 60,
            batch_size: 32,
            grad_clip: 1.0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("window must be >= 2".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.horizon == 0 || self.horizon > self.window {
            return Err(Error::Config(format!(
                "horizon {} must be in 1..=window ({})",
                self.horizon, self.window
            )));
        }
        if self.hidden == 0 || self.attention_dim == 0 || self.invariant_width == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (name, v, positive) in [
            ("sigma_obs", self.sigma_obs, true),
            ("weight_decay", self.weight_decay, false),
            ("learning_rate", self.learning_rate, true),
            ("grad_clip", self.grad_clip, true),
        ] {
            ensure_finite(name, v)?;
            if v < 0.0 || (positive && v == 0.0) {
                return Err(Error::Config(format!("{name} must be {}", if positive { "> 0" } else { ">= 0" })));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub config: SurrogateConfig,
    pub norm: NormStats,
    lstm1: LstmLayer,
    lstm2: LstmLayer,
    attn: Attention,
    invariant: Dense,
    head: Dense,
}

/// Everything the backward pass needs, captured during one forward run.
pub struct ForwardPass {
    /// Horizon predictions in normalized units.
    pub preds_norm: Vec<f64>,
    l1: Vec<LstmStepCache>,
    m1: Vec<Vec<f64>>,
    l2: Vec<LstmStepCache>,
    m2: Vec<Vec<f64>>,
    h2d: Vec<Vec<f64>>,
    attn: AttnCache,
    mc: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
    mu: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// Gaussian log-likelihood of the targets under the predictions.
    pub log_lik: f64,
    /// L2 surrogate for the KL term: weight_decay × Σ‖W‖².
    pub kl: f64,
    /// −log_lik + kl; the quantity SGD descends.
    pub loss: f64,
}

/// Monte Carlo prediction summary, raw °C. `std` is the spread of the
/// dropout samples alone (epistemic only: with dropout 0 the band
/// collapses onto the mean); the 95% limits are mean ± 1.96·std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

impl PredictionBand {
    fn empty() -> PredictionBand {
        PredictionBand {
            mean: Vec::new(),
            std: Vec::new(),
            lower95: Vec::new(),
            upper95: Vec::new(),
        }
    }

    fn extend(&mut self, other: &PredictionBand, take: usize) {
        self.mean.extend_from_slice(&other.mean[..take]);
        self.std.extend_from_slice(&other.std[..take]);
        self.lower95.extend_from_slice(&other.lower95[..take]);
        self.upper95.extend_from_slice(&other.upper95[..take]);
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Closed-loop prediction from `start` onwards (history sample indices).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub start: usize,
    pub band: PredictionBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    lstm1: LstmGrad,
    lstm2: LstmGrad,
    attn: AttnGrad,
    invariant: DenseGrad,
    head: DenseGrad,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: SurrogateModel,
}

impl SurrogateModel {
    pub fn new(config: SurrogateConfig, norm: NormStats, seed: u64) -> Result<SurrogateModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm1 = LstmLayer::new(CHANNELS, config.hidden, &mut rng);
        let lstm2 = LstmLayer::new(config.hidden, config.hidden, &mut rng);
        let attn = Attention::new(config.hidden, config.attention_dim, &mut rng);
        let invariant = Dense::new(2, config.invariant_width, &mut rng);
        let head = Dense::new(
            config.attention_dim + config.invariant_width,
            config.horizon,
            &mut rng,
        );
        Ok(SurrogateModel {
            config,
            norm,
            lstm1,
            lstm2,
            attn,
            invariant,
            head,
        })
    }

    fn check_window(&self, w: &FeatureWindow) -> Result<()> {
        if w.inputs.len() != self.config.window {
            return Err(Error::Shape(format!(
                "window has {} steps, model expects {}",
                w.inputs.len(),
                self.config.window
            )));
        }
        Ok(())
    }

    fn draw_masks(&self, dropout_seed: Option<u64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let w = self.config.window;
        let h = self.config.hidden;
        let p = self.config.dropout;
        let ones = |n: usize| vec![1.0; n];
        let (mut m1, mut m2) = (vec![ones(h); w], vec![ones(h); w]);
        let mut mc = ones(self.config.attention_dim);
        let mut mu = ones(self.config.invariant_width);
        if p > 0.0 {
            if let Some(seed) = dropout_seed {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 / (1.0 - p);
                let mut fill = |m: &mut [f64]| {
                    for v in m.iter_mut() {
                        *v = if rng.gen::<f64>() < p { 0.0 } else { keep };
                    }
                };
                for m in &mut m1 {
                    fill(m);
                }
                for m in &mut m2 {
                    fill(m);
                }
                fill(&mut mc);
                fill(&mut mu);
            }
        }
        (m1, m2, mc, mu)
    }

    /// One forward run. `dropout_seed: Some(_)` samples fresh dropout masks
    /// (training / MC inference); `None` runs the deterministic mean path.
    pub fn forward(&self, window: &FeatureWindow, dropout_seed: Option<u64>) -> Result<ForwardPass> {
        self.check_window(window)?;
        let w = self.config.window;
        let h = self.config.hidden;
        let (m1, m2, mc, mu) = self.draw_masks(dropout_seed);

        let xs: Vec<Vec<f64>> = window.inputs.iter().map(|r| self.norm.normalize_step(r)).collect();

        let mut l1 = Vec::with_capacity(w);
        let mut h1d = Vec::with_capacity(w);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for t in 0..w {
            let cache = self.lstm1.step(&xs[t], &h_prev, &c_prev);
            h_prev = cache.h.clone();
            c_prev = cache.c.clone();
            let dropped: Vec<f64> = cache.h.iter().zip(&m1[t]).map(|(v, m)| v * m).collect();
            h1d.push(dropped);
            l1.push(cache);
        }

        let mut l2 = Vec::with_capacity(w);
        let mut h2d = Vec::with_capacity(w);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for t in 0..w {
            let cache = self.lstm2.step(&h1d[t], &h_prev, &c_prev);
            h_prev = cache.h.clone();
            c_prev = cache.c.clone();
            let dropped: Vec<f64> = cache.h.iter().zip(&m2[t]).map(|(v, m)| v * m).collect();
            h2d.push(dropped);
            l2.push(cache);
        }

        let attn = self.attn.forward(&h2d);
        let ctxd: Vec<f64> = attn.context.iter().zip(&mc).map(|(v, m)| v * m).collect();

        let u = self.norm.normalize_invariant(&window.invariant);
        let a: Vec<f64> = self.invariant.forward(&u).iter().map(|v| v.tanh()).collect();
        let ad: Vec<f64> = a.iter().zip(&mu).map(|(v, m)| v * m).collect();

        let mut z = ctxd;
        z.extend_from_slice(&ad);
        let preds_norm = self.head.forward(&z);
        if preds_norm.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged("non-finite prediction".into()));
        }

        Ok(ForwardPass {
            preds_norm,
            l1,
            m1,
            l2,
            m2,
            h2d,
            attn,
            mc,
            u,
            a,
            mu,
            z,
        })
    }

    /// Backpropagates `d loss / d preds_norm` through the cached pass,
    /// accumulating into `grad`. Does not add the weight-decay term; see
    /// [`Gradients::add_weight_decay`].
    pub fn backward(&self, pass: &ForwardPass, dpreds: &[f64], grad: &mut Gradients) {
        let h = self.config.hidden;
        let dk = self.config.attention_dim;
        let w = self.config.window;

        let mut dz = vec![0.0; self.head.n_in];
        self.head.backward(&pass.z, dpreds, &mut grad.head, Some(&mut dz));

        let dctx: Vec<f64> = dz[..dk].iter().zip(&pass.mc).map(|(d, m)| d * m).collect();
        let dad = &dz[dk..];
        let da_pre: Vec<f64> = dad
            .iter()
            .zip(&pass.mu)
            .zip(&pass.a)
            .map(|((d, m), a)| d * m * (1.0 - a * a))
            .collect();
        self.invariant.backward(&pass.u, &da_pre, &mut grad.invariant, None);

        let mut dh2d = self.attn.backward(&pass.h2d, &pass.attn, &dctx, &mut grad.attn);

        // BPTT through LSTM2; dx of each step feeds LSTM1's dropped output.
        let mut dh1d = vec![vec![0.0; h]; w];
        let mut dh_carry = vec![0.0; h];
        let mut dc_carry = vec![0.0; h];
        for t in (0..w).rev() {
            for k in 0..h {
                dh_carry[k] += dh2d[t][k] * pass.m2[t][k];
            }
            let (dx, dh_prev, dc_prev) =
                self.lstm2.step_backward(&pass.l2[t], &dh_carry, &dc_carry, &mut grad.lstm2);
            dh1d[t] = dx;
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
        dh2d.clear();

        let mut dh_carry = vec![0.0; h];
        let mut dc_carry = vec![0.0; h];
        for t in (0..w).rev() {
            for k in 0..h {
                dh_carry[k] += dh1d[t][k] * pass.m1[t][k];
            }
            let (_dx, dh_prev, dc_prev) =
                self.lstm1.step_backward(&pass.l1[t], &dh_carry, &dc_carry, &mut grad.lstm1);
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
    }

    /// Sum of squared weights over weight matrices and the attention query;
    /// biases are exempt from the penalty.
    pub fn weight_l2(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|w| w * w).sum::<f64>();
        sq(&self.lstm1.wx)
            + sq(&self.lstm1.wh)
            + sq(&self.lstm2.wx)
            + sq(&self.lstm2.wh)
            + sq(&self.attn.query)
            + sq(&self.attn.wk.w)
            + sq(&self.attn.wv.w)
            + sq(&self.invariant.w)
            + sq(&self.head.w)
    }

    /// ELBO pieces for one window's normalized predictions.
    pub fn elbo(&self, preds_norm: &[f64], window: &FeatureWindow) -> Result<ElboTerms> {
        if preds_norm.len() != window.targets.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} targets",
                preds_norm.len(),
                window.targets.len()
            )));
        }
        let s2 = self.config.sigma_obs * self.config.sigma_obs;
        let norm_const = 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let mut log_lik = 0.0;
        for (p, t_raw) in preds_norm.iter().zip(&window.targets) {
            let t = self.norm.normalize_temp(*t_raw);
            let r = p - t;
            log_lik -= norm_const + r * r / (2.0 * s2);
        }
        let kl = self.config.weight_decay * self.weight_l2();
        Ok(ElboTerms {
            log_lik,
            kl,
            loss: -log_lik + kl,
        })
    }

    /// Full per-window loss and gradient (data term plus weight decay);
    /// this is the function the finite-difference check probes.
    pub fn loss_and_grad(
        &self,
        window: &FeatureWindow,
        dropout_seed: Option<u64>,
    ) -> Result<(ElboTerms, Gradients)> {
        let pass = self.forward(window, dropout_seed)?;
        let terms = self.elbo(&pass.preds_norm, window)?;
        let s2 = self.config.sigma_obs * self.config.sigma_obs;
        let dpreds: Vec<f64> = pass
            .preds_norm
            .iter()
            .zip(&window.targets)
            .map(|(p, t_raw)| (p - self.norm.normalize_temp(*t_raw)) / s2)
            .collect();
        let mut grad = Gradients::zeros_like(self);
        self.backward(&pass, &dpreds, &mut grad);
        grad.add_weight_decay(self, 2.0 * self.config.weight_decay);
        Ok((terms, grad))
    }

    /// Monte Carlo dropout prediction: `n_samples` stochastic passes,
    /// summarized as mean and the spread of the dropout samples. With
    /// dropout 0 the pass is deterministic and the band collapses exactly.
    pub fn predict_mc(&self, window: &FeatureWindow, n_samples: usize, seed: u64) -> Result<PredictionBand> {
        if n_samples == 0 {
            return Err(Error::Param("n_samples must be >= 1".into()));
        }
        self.check_window(window)?;
        let hz = self.config.horizon;
        if self.config.dropout == 0.0 {
            // Every sample is the same deterministic pass; collapse the
            // band exactly instead of leaving cancellation residue.
            let pass = self.forward(window, None)?;
            let mut band = PredictionBand::empty();
            for p in &pass.preds_norm {
                let mean = self.norm.denormalize_temp(*p);
                band.mean.push(mean);
                band.std.push(0.0);
                band.lower95.push(mean);
                band.upper95.push(mean);
            }
            return Ok(band);
        }
        let mut sum = vec![0.0; hz];
        let mut sum_sq = vec![0.0; hz];
        for s in 0..n_samples {
            let pass = self.forward(window, Some(mix_seed(seed, s as u64)))?;
            for (k, p) in pass.preds_norm.iter().enumerate() {
                sum[k] += p;
                sum_sq[k] += p * p;
            }
        }
        let n = n_samples as f64;
        let mut band = PredictionBand::empty();
        for k in 0..hz {
            let mean_norm = sum[k] / n;
            let var_mc = (sum_sq[k] / n - mean_norm * mean_norm).max(0.0);
            let std_norm = var_mc.sqrt();
            let mean = self.norm.denormalize_temp(mean_norm);
            let std = std_norm * self.norm.temp_std;
            band.mean.push(mean);
            band.std.push(std);
            band.lower95.push(mean - 1.96 * std);
            band.upper95.push(mean + 1.96 * std);
        }
        Ok(band)
    }

    /// Builds the teacher-forced window whose prediction span ends at
    /// sample `end` (exclusive), reading the temperature channel through
    /// `temp_at`. Targets are filled with recorded truth; forward passes
    /// never read them.
    fn window_ending_at(
        &self,
        h: &ThermalHistory,
        end: usize,
        temp_at: &dyn Fn(usize) -> f64,
    ) -> Result<FeatureWindow> {
        let w = self.config.window;
        let hz = self.config.horizon;
        if end < w || end > h.time_s.len() {
            return Err(Error::Param(format!(
                "window ending at {end} needs samples {}..{} in a history of {}",
                end as i64 - w as i64,
                end,
                h.time_s.len()
            )));
        }
        let start = end - w;
        let mut inputs = Vec::with_capacity(w);
        for j in start..end {
            let lag = j.saturating_sub(hz);
            inputs.push([h.dn_mm[j], h.dl_mm[j], h.lp_w[j], temp_at(lag)]);
        }
        Ok(FeatureWindow {
            inputs,
            invariant: [h.temp_c[0], h.lp_birth_w],
            targets: h.temp_c[end - hz..end].to_vec(),
            source: 0,
            start,
        })
    }

    /// Closed-loop rollout: truth temperatures before `seed_end`, model
    /// mean fed back after. Each block advances one horizon; DN/DL/LP come
    /// from the recorded schedule (they are control inputs, not latent
    /// state). Returns `steps` predictions starting at sample `seed_end`.
    pub fn rollout(
        &self,
        history: &ThermalHistory,
        seed_end: usize,
        steps: usize,
        n_samples: usize,
        seed: u64,
    ) -> Result<RolloutResult> {
        let w = self.config.window;
        let hz = self.config.horizon;
        if steps == 0 {
            return Err(Error::Param("rollout needs steps >= 1".into()));
        }
        if seed_end + hz < w {
            return Err(Error::Param(format!(
                "seed_end {seed_end} too early for window {w} / horizon {hz}"
            )));
        }
        let blocks = steps.div_ceil(hz);
        if seed_end + blocks * hz > history.time_s.len() {
            return Err(Error::Param(format!(
                "rollout of {steps} steps past {seed_end} overruns the recorded schedule ({} samples)",
                history.time_s.len()
            )));
        }
        let mut fed_back: Vec<f64> = Vec::with_capacity(blocks * hz);
        let mut band = PredictionBand::empty();
        for b in 0..blocks {
            let end = seed_end + (b + 1) * hz;
            let predicted = fed_back.clone();
            let temp_at = move |i: usize| {
                if i < seed_end {
                    history.temp_c[i]
                } else {
                    predicted[i - seed_end]
                }
            };
            let win = self.window_ending_at(history, end, &temp_at)?;
            let block_seed = seed.wrapping_add((b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let block = self.predict_mc(&win, n_samples, block_seed)?;
            fed_back.extend_from_slice(&block.mean);
            let take = hz.min(steps - band.len());
            band.extend(&block, take);
        }
        Ok(RolloutResult {
            start: seed_end,
            band,
        })
    }

    /// Teacher-forced sweep over a whole history: consecutive windows
    /// strided by one horizon, truth temperatures throughout. Covers
    /// samples `window − horizon ..` as far as full windows reach.
    pub fn predict_series(
        &self,
        history: &ThermalHistory,
        n_samples: usize,
        seed: u64,
    ) -> Result<RolloutResult> {
        let w = self.config.window;
        let hz = self.config.horizon;
        if history.time_s.len() < w {
            return Err(Error::Param(format!(
                "history of {} samples is shorter than one window ({w})",
                history.time_s.len()
            )));
        }
        let mut band = PredictionBand::empty();
        let mut end = w;
        let mut k = 0u64;
        while end <= history.time_s.len() {
            let win = self.window_ending_at(history, end, &|i| history.temp_c[i])?;
            let block = self.predict_mc(&win, n_samples, seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
            band.extend(&block, hz);
            end += hz;
            k += 1;
        }
        Ok(RolloutResult {
            start: w - hz,
            band,
        })
    }

    /// Deterministic (mean-path) R² over pooled horizon predictions, raw °C.
    pub fn evaluate_r2(&self, windows: &[FeatureWindow]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Degenerate("no windows to evaluate".into()));
        }
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for win in windows {
            let pass = self.forward(win, None)?;
            for (p, t) in pass.preds_norm.iter().zip(&win.targets) {
                preds.push(self.norm.denormalize_temp(*p));
                truth.push(*t);
            }
        }
        let n = truth.len() as f64;
        let mean = truth.iter().sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
        if ss_tot <= 1e-12 {
            return Err(Error::Degenerate("targets have zero variance".into()));
        }
        let ss_res: f64 = preds
            .iter()
            .zip(&truth)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(1.0 - ss_res / ss_tot)
    }

    /// Named parameter groups in a fixed order; the flat layouts of
    /// [`SurrogateModel`] and [`Gradients`] both follow it.
    pub fn group_names(&self) -> Vec<&'static str> {
        vec![
            "lstm1.wx", "lstm1.wh", "lstm1.b", "lstm2.wx", "lstm2.wh", "lstm2.b", "attn.query",
            "attn.wk.w", "attn.wk.b", "attn.wv.w", "attn.wv.b", "invariant.w", "invariant.b",
            "head.w", "head.b",
        ]
    }

    fn group_slices(&self) -> Vec<&[f64]> {
        vec![
            &self.lstm1.wx,
            &self.lstm1.wh,
            &self.lstm1.b,
            &self.lstm2.wx,
            &self.lstm2.wh,
            &self.lstm2.b,
            &self.attn.query,
            &self.attn.wk.w,
            &self.attn.wk.b,
            &self.attn.wv.w,
            &self.attn.wv.b,
            &self.invariant.w,
            &self.invariant.b,
            &self.head.w,
            &self.head.b,
        ]
    }

    fn group_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.lstm1.wx,
            &mut self.lstm1.wh,
            &mut self.lstm1.b,
            &mut self.lstm2.wx,
            &mut self.lstm2.wh,
            &mut self.lstm2.b,
            &mut self.attn.query,
            &mut self.attn.wk.w,
            &mut self.attn.wk.b,
            &mut self.attn.wv.w,
            &mut self.attn.wv.b,
            &mut self.invariant.w,
            &mut self.invariant.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    /// Half-open ranges of each group within the flat parameter vector.
    pub fn group_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut at = 0;
        for (name, s) in self.group_names().into_iter().zip(self.group_slices()) {
            out.push((name, at..at + s.len()));
            at += s.len();
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in self.group_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.group_slices().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut at = 0;
        for s in self.group_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.group_slices().iter().map(|s| s.len()).sum()
    }

    /// θ ← θ − lr·g.
    pub(crate) fn apply_update(&mut self, grad: &Gradients, lr: f64) {
        for (p, g) in self.group_slices_mut().into_iter().zip(grad.group_slices()) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= lr * gi;
            }
        }
    }

    pub fn save_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<SurrogateModel> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let m = ck.model;
        m.config.validate()?;
        let h = m.config.hidden;
        let shapes_ok = m.lstm1.wx.len() == 4 * h * CHANNELS
            && m.lstm1.wh.len() == 4 * h * h
            && m.lstm2.wx.len() == 4 * h * h
            && m.attn.query.len() == m.config.attention_dim
            && m.head.w.len() == m.config.horizon * (m.config.attention_dim + m.config.invariant_width)
            && m.invariant.w.len() == m.config.invariant_width * 2;
        if !shapes_ok {
            return Err(Error::Parse("checkpoint weight shapes disagree with config".into()));
        }
        Ok(m)
    }
}

impl Gradients {
    pub fn zeros_like(model: &SurrogateModel) -> Gradients {
        Gradients {
            lstm1: LstmGrad::zeros_like(&model.lstm1),
            lstm2: LstmGrad::zeros_like(&model.lstm2),
            attn: AttnGrad::zeros_like(&model.attn),
            invariant: DenseGrad::zeros_like(&model.invariant),
            head: DenseGrad::zeros_like(&model.head),
        }
    }

    fn group_slices(&self) -> Vec<&[f64]> {
        vec![
            &self.lstm1.wx,
            &self.lstm1.wh,
            &self.lstm1.b,
            &self.lstm2.wx,
            &self.lstm2.wh,
            &self.lstm2.b,
            &self.attn.query,
            &self.attn.wk.w,
            &self.attn.wk.b,
            &self.attn.wv.w,
            &self.attn.wv.b,
            &self.invariant.w,
            &self.invariant.b,
            &self.head.w,
            &self.head.b,
        ]
    }

    fn group_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.lstm1.wx,
            &mut self.lstm1.wh,
            &mut self.lstm1.b,
            &mut self.lstm2.wx,
            &mut self.lstm2.wh,
            &mut self.lstm2.b,
            &mut self.attn.query,
            &mut self.attn.wk.w,
            &mut self.attn.wk.b,
            &mut self.attn.wv.w,
            &mut self.attn.wv.b,
            &mut self.invariant.w,
            &mut self.invariant.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in self.group_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.group_slices_mut() {
            for v in s.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds `factor·W` to every weight-matrix gradient (biases untouched);
    /// `factor = 2·weight_decay` completes the ELBO gradient.
    pub fn add_weight_decay(&mut self, model: &SurrogateModel, factor: f64) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 9] = [
            (&mut self.lstm1.wx, &model.lstm1.wx),
            (&mut self.lstm1.wh, &model.lstm1.wh),
            (&mut self.lstm2.wx, &model.lstm2.wx),
            (&mut self.lstm2.wh, &model.lstm2.wh),
            (&mut self.attn.query, &model.attn.query),
            (&mut self.attn.wk.w, &model.attn.wk.w),
            (&mut self.attn.wv.w, &model.attn.wv.w),
            (&mut self.invariant.w, &model.invariant.w),
            (&mut self.head.w, &model.head.w),
        ];
        for (g, w) in pairs {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += factor * wi;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.group_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales in place so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.group_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
