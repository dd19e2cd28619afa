//! Time-domain observations and their PSD via the autocorrelation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{band_levels, PsdSample, SpectrumConfig};
use crate::error::{Error, Result};

/// Complex baseband samples received by one SU over the whole pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub samples: Vec<Complex64>,
}

impl TimeSeriesSample {
    pub fn new(samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Dimension(format!(
                "time series needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        Ok(TimeSeriesSample { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    fft.process(buf);
}

/// `r[k] = sum_n y[(n + k) mod L] * conj(y[n])`.
pub fn circular_autocorrelation(y: &[Complex64]) -> Vec<Complex64> {
    let l = y.len();
    let mut spectrum = y.to_vec();
    fft_in_place(&mut spectrum, false);
    for v in spectrum.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    fft_in_place(&mut spectrum, true);
    let scale = 1.0 / l as f64;
    spectrum.iter_mut().for_each(|v| *v *= scale);
    spectrum
}

/// DFT of the circular autocorrelation of `y`; length `N_w * N_f`.
pub fn psd_from_time_series(y: &TimeSeriesSample, cfg: &SpectrumConfig) -> Result<Vec<f64>> {
    let expected = cfg.features();
    if y.len() != expected {
        return Err(Error::Dimension(format!(
            "time series length {} does not match {} points x {} bands",
            y.len(),
            cfg.n_points,
            cfg.n_bands
        )));
    }
    let mut r = circular_autocorrelation(&y.samples);
    fft_in_place(&mut r, false);
    Ok(r.into_iter().map(|v| v.re).collect())
}

/// Synthesises a time series whose periodogram has, on average, the same
/// band structure as [`super::band_psd`]: band `n` occupies DFT bins
/// `n*N_w .. (n+1)*N_w`.
pub fn synthesize_time_series<R: Rng + ?Sized>(
    occupancy: &[u8],
    gains: &[f64],
    cfg: &SpectrumConfig,
    noise_psd: f64,
    rng: &mut R,
) -> Result<TimeSeriesSample> {
    if !(noise_psd.is_finite() && noise_psd > 0.0) {
        return Err(Error::Domain(format!("noise PSD must be > 0, got {noise_psd}")));
    }
    let levels = band_levels(occupancy, gains, cfg)?;
    let l = cfg.features();
    let mut gauss = || -> Complex64 {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    };
    let mut spectrum: Vec<Complex64> = (0..l)
        .map(|bin| {
            let level = levels[bin / cfg.n_points];
            gauss() * (l as f64 * level).sqrt()
        })
        .collect();
    fft_in_place(&mut spectrum, true);
    let inv = 1.0 / l as f64;
    let noise_amp = noise_psd.sqrt();
    let samples = spectrum
        .into_iter()
        .map(|v| v * inv + gauss() * noise_amp)
        .collect();
    TimeSeriesSample::new(samples)
}

/// Periodogram (`PSD / L`) of `y`, stacked band by band into an
/// `N_w x N_f` sample.
pub fn psd_sample_from_time_series(
    y: &TimeSeriesSample,
    cfg: &SpectrumConfig,
    labels: Vec<u8>,
) -> Result<PsdSample> {
    let psd = psd_from_time_series(y, cfg)?;
    let l = psd.len() as f64;
    let (n_w, n_f) = (cfg.n_points, cfg.n_bands);
    let mut matrix = vec![0.0; n_w * n_f];
    for n in 0..n_f {
        for w in 0..n_w {
            matrix[w * n_f + n] = (psd[n * n_w + w] / l).max(0.0);
        }
    }
    PsdSample::new(n_w, n_f, matrix, labels)
}
