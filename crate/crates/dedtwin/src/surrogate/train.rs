//! Plain-SGD training of the surrogate under the ELBO objective. No
//! momentum, no schedules: a fixed learning rate and a global
//! gradient-norm clip, which is enough for this model family and keeps
//! runs exactly reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureWindow, Gradients, NormStats, SurrogateConfig, SurrogateModel};
use crate::{mix_seed, Error, Result};

/// Per-epoch training record: mean per-window log-likelihood and the
/// weight penalty at epoch end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub log_lik: f64,
    pub kl: f64,
}

/// Trains a fresh model on `windows`. Dropout masks resample every
/// forward pass; batches reshuffle every epoch; everything is a pure
/// function of (`config`, `windows`, `norm`, `seed`).
pub fn train(
    config: &SurrogateConfig,
    windows: &[FeatureWindow],
    norm: NormStats,
    seed: u64,
) -> Result<(SurrogateModel, Vec<EpochMetrics>)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Degenerate("no training windows".into()));
    }
    for w in windows {
        if w.targets.len() != config.horizon {
            return Err(Error::Shape(format!(
                "window has {} targets, config horizon is {}",
                w.targets.len(),
                config.horizon
            )));
        }
    }
    let mut model = SurrogateModel::new(config.clone(), norm, seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(u32::MAX)));
    let mut mask_counter = 0u64;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loglik_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = Gradients::zeros_like(&model);
            let s2 = config.sigma_obs * config.sigma_obs;
            for &wi in batch {
                let win = &windows[wi];
                let pass = model.forward(win, Some(mix_seed(seed, mask_counter)))?;
                mask_counter += 1;
                let terms = model.elbo(&pass.preds_norm, win)?;
                if !terms.loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, window {wi}"
                    )));
                }
                loglik_sum += terms.log_lik;
                let dpreds: Vec<f64> = pass
                    .preds_norm
                    .iter()
                    .zip(&win.targets)
                    .map(|(p, t)| (p - model.norm.normalize_temp(*t)) / s2)
                    .collect();
                model.backward(&pass, &dpreds, &mut grad);
            }
            grad.scale(1.0 / batch.len() as f64);
            grad.add_weight_decay(&model, 2.0 * config.weight_decay);
            if !grad.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient at epoch {epoch}")));
            }
            grad.clip_global_norm(config.grad_clip);
            model.apply_update(&grad, config.learning_rate);
        }
        let log_lik = loglik_sum / windows.len() as f64;
        let kl = config.weight_decay * model.weight_l2();
        metrics.push(EpochMetrics {
            epoch,
            loss: -log_lik + kl,
            log_lik,
            kl,
        });
    }
    Ok((model, metrics))
}
