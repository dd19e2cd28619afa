use rand::Rng;

use super::{check_env, noise_psd_for, synthesize_with_noise, PsdSample, SpectrumConfig};
use crate::channel::ChannelEnv;
use crate::error::{Error, Result};
use crate::rng::{substream, tag};

/// Floor added before converting linear PSD to dB.
pub const DB_EPSILON: f64 = 1e-12;

pub fn to_db(value: f64) -> f64 {
    10.0 * (value + DB_EPSILON).log10()
}

/// Per-feature standardisation of dB-scaled PSD values.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Fits mean and population standard deviation of every feature.
    pub fn fit(samples: &[PsdSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidParameter("cannot fit normalization on an empty split".into()))?;
        let len = first.psd.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; len];
        for s in samples {
            if s.psd.len() != len {
                return Err(Error::Dimension("samples of different shapes".into()));
            }
            for (m, v) in mean.iter_mut().zip(&s.psd) {
                *m += to_db(*v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; len];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(&s.psd).zip(&mean) {
                let d = to_db(*v) - m;
                *acc += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                // constant feature
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply_into(&self, sample: &PsdSample, out: &mut Vec<f64>) {
        out.extend(
            sample
                .psd
                .iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (to_db(*v) - m) / s),
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Train/test samples of one or more SUs, with a normalization fitted on the
/// training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_points: usize,
    pub n_bands: usize,
    pub train: Vec<PsdSample>,
    pub test: Vec<PsdSample>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(train: Vec<PsdSample>, test: Vec<PsdSample>) -> Result<Self> {
        let normalization = Normalization::fit(&train)?;
        let (n_points, n_bands) = (train[0].n_points, train[0].n_bands);
        if test.iter().any(|s| s.n_points != n_points || s.n_bands != n_bands) {
            return Err(Error::Dimension("train and test shapes differ".into()));
        }
        Ok(Dataset {
            n_points,
            n_bands,
            train,
            test,
            normalization,
        })
    }

    /// Concatenates several datasets and refits the normalization on the
    /// combined training split.
    pub fn merge(parts: &[Dataset]) -> Result<Self> {
        let train = parts.iter().flat_map(|d| d.train.iter().cloned()).collect();
        let test = parts.iter().flat_map(|d| d.test.iter().cloned()).collect();
        Dataset::new(train, test)
    }

    pub fn split(&self, split: Split) -> &[PsdSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Normalized features, one row of `n_points * n_bands` per sample.
    pub fn features(&self, split: Split) -> Vec<f64> {
        let samples = self.split(split);
        let mut out = Vec::with_capacity(samples.len() * self.n_points * self.n_bands);
        for s in samples {
            self.normalization.apply_into(s, &mut out);
        }
        out
    }

    /// Labels, one row of `n_bands` per sample.
    pub fn labels(&self, split: Split) -> Vec<u8> {
        self.split(split).iter().flat_map(|s| s.labels.iter().copied()).collect()
    }
}

/// Draws `n_train + n_test` independent samples as seen by SU `su_idx`.
///
/// Each sample has its own stream derived from one draw of `rng`, so the
/// result depends only on the state of `rng` and not on evaluation order.
pub fn make_dataset<R: Rng + ?Sized>(
    env: &ChannelEnv,
    cfg: &SpectrumConfig,
    su_idx: usize,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidParameter(format!(
            "need at least one train and one test sample, got {n_train}/{n_test}"
        )));
    }
    cfg.validate()?;
    check_env(env, cfg, su_idx)?;
    let noise = noise_psd_for(env, cfg)?;
    let base = rng.next_u64();
    let draw = |split: u64, count: usize| -> Result<Vec<PsdSample>> {
        (0..count)
            .map(|i| {
                let mut rng = substream(base, &[split, i as u64]);
                synthesize_with_noise(env, cfg, su_idx, noise, &mut rng)
            })
            .collect()
    };
    let train = draw(tag::TRAIN, n_train)?;
    let test = draw(tag::TEST, n_test)?;
    Dataset::new(train, test)
}
