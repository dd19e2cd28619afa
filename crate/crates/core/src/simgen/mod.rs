//! Labelled wideband PSD synthesis.
//!
//! A sample is an `N_w x N_f` matrix: column `n` holds the `N_w` frequency
//! points of band `n`. Busy bands carry `h_n * x_n` on a flat level, the
//! immediate neighbours receive `eta * h_n * x_n` of leakage, and every point
//! gets independent exponential noise (the power of complex white Gaussian
//! noise in one bin).

mod dataset;
pub mod io;
mod timeseries;

pub use dataset::{make_dataset, to_db, Dataset, Normalization, Split, DB_EPSILON};
pub use timeseries::{
    circular_autocorrelation, psd_from_time_series, psd_sample_from_time_series,
    synthesize_time_series, TimeSeriesSample,
};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{direct_gain, irs_gain, sample_shadowing, ChannelEnv};
use crate::rng::SimRng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumConfig {
    /// Number of bands `N_f`.
    pub n_bands: usize,
    /// Frequency points per band `N_w`.
    pub n_points: usize,
    pub p_busy: f64,
    /// Adjacent-band leakage ratio.
    pub leakage: f64,
    /// Linear PSD level of every PU across its band.
    pub pu_power: f64,
    /// Target per-band SNR at the receiver, dB.
    pub snr_db: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            n_bands: 20,
            n_points: 64,
            p_busy: 0.5,
            leakage: 0.1,
            pu_power: 1.0,
            snr_db: -10.0,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_bands == 0 || self.n_points == 0 {
            return bad(format!(
                "need at least one band and one point per band, got {}x{}",
                self.n_points, self.n_bands
            ));
        }
        if !(0.0..=1.0).contains(&self.p_busy) {
            return bad(format!("p_busy must lie in [0,1], got {}", self.p_busy));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return bad(format!("leakage must lie in [0,1], got {}", self.leakage));
        }
        if !(self.pu_power.is_finite() && self.pu_power > 0.0) {
            return bad(format!("pu_power must be > 0, got {}", self.pu_power));
        }
        if !self.snr_db.is_finite() {
            return bad(format!("snr_db must be finite, got {}", self.snr_db));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.n_points * self.n_bands
    }
}

/// One labelled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdSample {
    pub n_points: usize,
    pub n_bands: usize,
    /// Row-major `n_points x n_bands`, linear and nonnegative.
    pub psd: Vec<f64>,
    /// 1 = busy, 0 = idle.
    pub labels: Vec<u8>,
}

impl PsdSample {
    pub fn new(n_points: usize, n_bands: usize, psd: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if psd.len() != n_points * n_bands || labels.len() != n_bands {
            return Err(Error::Dimension(format!(
                "sample expects {}x{} PSD and {} labels, got {} values and {} labels",
                n_points,
                n_bands,
                n_bands,
                psd.len(),
                labels.len()
            )));
        }
        if psd.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("PSD values must be finite and nonnegative".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        Ok(PsdSample {
            n_points,
            n_bands,
            psd,
            labels,
        })
    }

    #[inline]
    pub fn at(&self, point: usize, band: usize) -> f64 {
        self.psd[point * self.n_bands + band]
    }

    /// Mean PSD of one band column.
    pub fn column_mean(&self, band: usize) -> f64 {
        (0..self.n_points).map(|w| self.at(w, band)).sum::<f64>() / self.n_points as f64
    }
}

/// Independent Bernoulli(p_busy) occupancy for each band.
pub fn sample_occupancy<R: Rng + ?Sized>(rng: &mut R, cfg: &SpectrumConfig) -> Vec<u8> {
    (0..cfg.n_bands)
        .map(|_| u8::from(rng.random::<f64>() < cfg.p_busy))
        .collect()
}

/// Noiseless per-band level: own signal plus leakage from busy neighbours.
pub fn band_levels(occupancy: &[u8], gains: &[f64], cfg: &SpectrumConfig) -> Result<Vec<f64>> {
    let n_f = cfg.n_bands;
    if occupancy.len() != n_f || gains.len() != n_f {
        return Err(Error::Dimension(format!(
            "expected {n_f} occupancy flags and gains, got {} and {}",
            occupancy.len(),
            gains.len()
        )));
    }
    let power = |n: usize| {
        if occupancy[n] == 1 {
            gains[n] * cfg.pu_power
        } else {
            0.0
        }
    };
    Ok((0..n_f)
        .map(|n| {
            let mut level = power(n);
            if n > 0 {
                level += cfg.leakage * power(n - 1);
            }
            if n + 1 < n_f {
                level += cfg.leakage * power(n + 1);
            }
            level
        })
        .collect())
}

/// Exponential noise with mean `noise_psd`, drawn as `|z|^2` for
/// `z ~ CN(0, noise_psd)`.
#[inline]
pub(crate) fn draw_noise<R: Rng + ?Sized>(rng: &mut R, noise_psd: f64) -> f64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    0.5 * noise_psd * (re * re + im * im)
}

/// Builds the `N_w x N_f` PSD matrix for one observation.
pub fn band_psd<R: Rng + ?Sized>(
    occupancy: &[u8],
    gains: &[f64],
    cfg: &SpectrumConfig,
    noise_psd: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(noise_psd.is_finite() && noise_psd > 0.0) {
        return Err(Error::Domain(format!("noise PSD must be > 0, got {noise_psd}")));
    }
    let levels = band_levels(occupancy, gains, cfg)?;
    let mut psd = Vec::with_capacity(cfg.features());
    for _ in 0..cfg.n_points {
        for level in &levels {
            psd.push(level + draw_noise(rng, noise_psd));
        }
    }
    Ok(psd)
}

/// Noise PSD that puts the mean direct-path received level at `cfg.snr_db`.
pub fn noise_psd_for(env: &ChannelEnv, cfg: &SpectrumConfig) -> Result<f64> {
    let reference = env.mean_direct_gain()? * cfg.pu_power;
    Ok(reference / 10f64.powf(cfg.snr_db / 10.0))
}

fn check_env(env: &ChannelEnv, cfg: &SpectrumConfig, su_idx: usize) -> Result<()> {
    if env.pu_positions.len() != cfg.n_bands {
        return Err(Error::Dimension(format!(
            "one PU per band: {} bands but {} PUs",
            cfg.n_bands,
            env.pu_positions.len()
        )));
    }
    if su_idx >= env.su_positions.len() {
        return Err(Error::InvalidParameter(format!(
            "SU index {su_idx} out of range ({})",
            env.su_positions.len()
        )));
    }
    Ok(())
}

/// Per-band total gains from every PU to SU `su_idx`.
///
/// The reflected terms draw from a stream forked off `rng`, and the fork seed
/// is consumed whether or not the IRS is enabled, so toggling the IRS leaves
/// every other draw (direct shadowing, noise) unchanged.
pub fn band_gains<R: Rng + ?Sized>(env: &ChannelEnv, n_bands: usize, su_idx: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n_bands > env.pu_positions.len() || su_idx >= env.su_positions.len() {
        return Err(Error::Dimension(format!(
            "{n_bands} bands / SU {su_idx} against {} PUs and {} SUs",
            env.pu_positions.len(),
            env.su_positions.len()
        )));
    }
    let mut irs_rng = SimRng::seed_from_u64(rng.next_u64());
    let mut gains = Vec::with_capacity(n_bands);
    for n in 0..n_bands {
        let d = env.pu_positions[n].distance(&env.su_positions[su_idx]);
        let psi = sample_shadowing(rng, &env.shadowing);
        gains.push(direct_gain(d, psi, &env.pathloss)?);
    }
    for (n, g) in gains.iter_mut().enumerate() {
        *g += irs_gain(n, su_idx, env, &mut irs_rng)?.value;
    }
    Ok(gains)
}

/// Draws occupancy and channel, then assembles one labelled sample as seen by
/// SU `su_idx`.
pub fn synthesize_sample<R: Rng + ?Sized>(
    env: &ChannelEnv,
    cfg: &SpectrumConfig,
    su_idx: usize,
    rng: &mut R,
) -> Result<PsdSample> {
    cfg.validate()?;
    check_env(env, cfg, su_idx)?;
    let noise = noise_psd_for(env, cfg)?;
    synthesize_with_noise(env, cfg, su_idx, noise, rng)
}

pub(crate) fn synthesize_with_noise<R: Rng + ?Sized>(
    env: &ChannelEnv,
    cfg: &SpectrumConfig,
    su_idx: usize,
    noise_psd: f64,
    rng: &mut R,
) -> Result<PsdSample> {
    let occupancy = sample_occupancy(rng, cfg);
    let gains = band_gains(env, cfg.n_bands, su_idx, rng)?;
    let psd = band_psd(&occupancy, &gains, cfg, noise_psd, rng)?;
    Ok(PsdSample {
        n_points: cfg.n_points,
        n_bands: cfg.n_bands,
        psd,
        labels: occupancy,
    })
}
