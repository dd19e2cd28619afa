use serde::{Deserialize, Serialize};

use super::net::{BatchPrediction, Prediction};
use super::params::{Gradients, ModelParams};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value; `empty_mask` flags that no band contributed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub empty_mask: bool,
}

fn band_bce(q: f64, y: u8) -> f64 {
    let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y != 0 {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

/// Binary cross-entropy summed over the bands with `mask != 0`.
pub fn bce_loss(pred: &Prediction, labels: &[u8], mask: &[u8]) -> Result<Loss> {
    if pred.probs.len() != labels.len() || labels.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "prediction {}, labels {}, mask {} differ in length",
            pred.probs.len(),
            labels.len(),
            mask.len()
        )));
    }
    let value = pred
        .probs
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .map(|((&q, &y), _)| band_bce(q, y))
        .sum();
    Ok(Loss {
        value,
        empty_mask: mask.iter().all(|&m| m == 0),
    })
}

/// Sum of per-sample losses; `labels` is row-major `batch x N_f`.
pub fn batch_bce_loss(pred: &BatchPrediction, labels: &[u8], mask: &[u8]) -> Result<Loss> {
    let n_f = pred.n_bands;
    if labels.len() != pred.probs.len() || mask.len() != n_f {
        return Err(Error::Dimension("labels or mask do not match the batch".into()));
    }
    let mut value = 0.0;
    for (q, y) in pred.probs.chunks(n_f).zip(labels.chunks(n_f)) {
        for n in (0..n_f).filter(|&n| mask[n] != 0) {
            value += band_bce(q[n], y[n]);
        }
    }
    Ok(Loss {
        value,
        empty_mask: mask.iter().all(|&m| m == 0),
    })
}

/// `w <- w - eta * g` on trainable entries.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, eta: f64) -> Result<()> {
    params.sgd_step(grads, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub eta0: f64,
    pub eta_min: f64,
    pub t_max: u64,
}

impl LrSchedule {
    pub fn new(eta0: f64, eta_min: f64, t_max: u64) -> Result<Self> {
        let s = LrSchedule { eta0, eta_min, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min.is_finite() && self.eta0.is_finite() && self.eta0 >= self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rates need eta0 >= eta_min >= 0, got {} and {}",
                self.eta0, self.eta_min
            )));
        }
        if self.t_max == 0 {
            return Err(Error::InvalidParameter("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Half-cosine annealing from `eta0` at `t = 0` to `eta_min` at `t = t_max`.
pub fn cosine_lr(t: u64, s: &LrSchedule) -> Result<f64> {
    if t > s.t_max {
        return Err(Error::Domain(format!("iteration {t} exceeds t_max {}", s.t_max)));
    }
    // convex weights keep both endpoints exact
    let c = 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / s.t_max as f64).cos());
    let c = if 2 * t == s.t_max { 0.5 } else { c };
    Ok(s.eta0 * c + s.eta_min * (1.0 - c))
}

/// Busy decision per band: `prob >= 0.5`.
pub fn classify(pred: &Prediction) -> Vec<u8> {
    classify_probs(&pred.probs)
}

pub fn classify_probs(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}
