//! Path-loss channel with an optional intelligent reflecting surface.
//!
//! Gains are dimensionless power gains. The direct link follows a log-distance
//! law with log-normal shadowing; the reflected link sums, over the IRS
//! elements, the product of a PU→element and an element→SU gain of the same
//! form, each element contributing with a controllable phase.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn centroid(points: &[Point]) -> Option<Point> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let (sx, sy) = points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Some(Point::new(sx / n, sy / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    /// Path-loss constant.
    pub beta: f64,
    /// Reference distance in meters.
    pub d0: f64,
    /// Path-loss exponent.
    pub alpha: f64,
}

impl PathLossParams {
    pub fn new(beta: f64, d0: f64, alpha: f64) -> Result<Self> {
        let p = PathLossParams { beta, d0, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("d0", self.d0), ("alpha", self.alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "path-loss {name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for PathLossParams {
    /// `alpha = 3.71`, `beta = 10^3.154`, `d0 = 1 m`.
    fn default() -> Self {
        PathLossParams {
            beta: 10f64.powf(3.154),
            d0: 1.0,
            alpha: 3.71,
        }
    }
}

/// Log-normal shadowing: `psi ~ Normal(0, sigma_db^2)`, applied as `10^(-psi/10)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowingModel {
    pub sigma_db: f64,
    pub enabled: bool,
}

impl ShadowingModel {
    pub fn new(sigma_db: f64, enabled: bool) -> Result<Self> {
        if !(sigma_db.is_finite() && sigma_db >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "shadowing sigma must be finite and >= 0, got {sigma_db}"
            )));
        }
        Ok(ShadowingModel { sigma_db, enabled })
    }

    pub fn disabled() -> Self {
        ShadowingModel {
            sigma_db: 0.0,
            enabled: false,
        }
    }

    /// Whether draws are random at all; inactive models always give 0 dB.
    pub fn is_active(&self) -> bool {
        self.enabled && self.sigma_db != 0.0
    }

    /// `E[10^(-psi/10)]`, the mean linear attenuation factor.
    pub fn mean_linear_factor(&self) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        let s = self.sigma_db * std::f64::consts::LN_10 / 10.0;
        (0.5 * s * s).exp()
    }
}

impl Default for ShadowingModel {
    fn default() -> Self {
        ShadowingModel {
            sigma_db: 8.0,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhasePolicy {
    /// Every element's phase cancels its cascade phase; terms add coherently.
    Aligned,
    /// All `theta_m = 0`.
    Zero,
    /// `theta_m ~ U[0, 2pi)`, drawn per call.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrsConfig {
    pub num_elements: usize,
    pub position: Point,
    pub phase_policy: PhasePolicy,
}

/// How PU and SU positions are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Layout {
    /// PUs and SUs uniform in a `side_m` x `side_m` square.
    Uniform { side_m: f64 },
    /// PUs uniform in a `spread_m` square centred at the origin, SUs uniform
    /// in a `spread_m` square centred `separation_m` away along x.
    Clustered { separation_m: f64, spread_m: f64 },
}

impl Layout {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_pu: usize, n_su: usize) -> (Vec<Point>, Vec<Point>) {
        let mut square = |cx: f64, cy: f64, side: f64, n: usize| -> Vec<Point> {
            (0..n)
                .map(|_| {
                    let x = cx + (rng.random::<f64>() - 0.5) * side;
                    let y = cy + (rng.random::<f64>() - 0.5) * side;
                    Point::new(x, y)
                })
                .collect()
        };
        match *self {
            Layout::Uniform { side_m } => {
                let pus = square(side_m / 2.0, side_m / 2.0, side_m, n_pu);
                let sus = square(side_m / 2.0, side_m / 2.0, side_m, n_su);
                (pus, sus)
            }
            Layout::Clustered {
                separation_m,
                spread_m,
            } => {
                let pus = square(0.0, 0.0, spread_m, n_pu);
                let sus = square(separation_m, 0.0, spread_m, n_su);
                (pus, sus)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEnv {
    pub pu_positions: Vec<Point>,
    pub su_positions: Vec<Point>,
    pub irs: IrsConfig,
    pub pathloss: PathLossParams,
    pub shadowing: ShadowingModel,
    pub irs_enabled: bool,
}

impl ChannelEnv {
    pub fn new(
        pu_positions: Vec<Point>,
        su_positions: Vec<Point>,
        irs: IrsConfig,
        pathloss: PathLossParams,
        shadowing: ShadowingModel,
        irs_enabled: bool,
    ) -> Result<Self> {
        let env = ChannelEnv {
            pu_positions,
            su_positions,
            irs,
            pathloss,
            shadowing,
            irs_enabled,
        };
        env.validate()?;
        Ok(env)
    }

    /// Samples PU/SU positions from `layout` and places the IRS at the
    /// centroid of all of them unless `irs_position` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn generate<R: Rng + ?Sized>(
        rng: &mut R,
        layout: Layout,
        n_pu: usize,
        n_su: usize,
        irs_elements: usize,
        phase_policy: PhasePolicy,
        irs_position: Option<Point>,
        pathloss: PathLossParams,
        shadowing: ShadowingModel,
        irs_enabled: bool,
    ) -> Result<Self> {
        let (pus, sus) = layout.sample(rng, n_pu, n_su);
        let position = match irs_position {
            Some(p) => p,
            None => {
                let all: Vec<Point> = pus.iter().chain(sus.iter()).copied().collect();
                Point::centroid(&all)
                    .ok_or_else(|| Error::InvalidParameter("no PU or SU positions".into()))?
            }
        };
        let irs = IrsConfig {
            num_elements: irs_elements,
            position,
            phase_policy,
        };
        ChannelEnv::new(pus, sus, irs, pathloss, shadowing, irs_enabled)
    }

    // negated comparisons also reject NaN distances
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.pathloss.validate()?;
        if !(self.shadowing.sigma_db.is_finite() && self.shadowing.sigma_db >= 0.0) {
            return Err(Error::InvalidParameter("shadowing sigma must be >= 0".into()));
        }
        if self.irs.num_elements == 0 {
            return Err(Error::InvalidParameter("IRS needs at least one element".into()));
        }
        for (i, pu) in self.pu_positions.iter().enumerate() {
            for (j, su) in self.su_positions.iter().enumerate() {
                if !(pu.distance(su) > 0.0) {
                    return Err(Error::Domain(format!("PU {i} and SU {j} coincide")));
                }
            }
            if !(pu.distance(&self.irs.position) > 0.0) {
                return Err(Error::Domain(format!("PU {i} coincides with the IRS")));
            }
        }
        for (j, su) in self.su_positions.iter().enumerate() {
            if !(su.distance(&self.irs.position) > 0.0) {
                return Err(Error::Domain(format!("SU {j} coincides with the IRS")));
            }
        }
        Ok(())
    }

    fn positions(&self, pu_idx: usize, su_idx: usize) -> Result<(Point, Point)> {
        let pu = self.pu_positions.get(pu_idx).ok_or_else(|| {
            Error::InvalidParameter(format!("PU index {pu_idx} out of range ({})", self.pu_positions.len()))
        })?;
        let su = self.su_positions.get(su_idx).ok_or_else(|| {
            Error::InvalidParameter(format!("SU index {su_idx} out of range ({})", self.su_positions.len()))
        })?;
        Ok((*pu, *su))
    }

    /// Direct-path gain averaged over shadowing and over every (PU, SU) pair.
    ///
    /// This is the reference gain that fixes the noise floor for a target SNR.
    pub fn mean_direct_gain(&self) -> Result<f64> {
        let pairs = self.pu_positions.len() * self.su_positions.len();
        if pairs == 0 {
            return Err(Error::InvalidParameter("no PU/SU pairs".into()));
        }
        let mut sum = 0.0;
        for pu in &self.pu_positions {
            for su in &self.su_positions {
                sum += direct_gain(pu.distance(su), 0.0, &self.pathloss)?;
            }
        }
        Ok(sum / pairs as f64 * self.shadowing.mean_linear_factor())
    }

    /// Same as [`ChannelEnv::mean_direct_gain`] for the reflected path with
    /// aligned phases.
    pub fn mean_irs_gain(&self) -> Result<f64> {
        let pairs = self.pu_positions.len() * self.su_positions.len();
        if pairs == 0 {
            return Err(Error::InvalidParameter("no PU/SU pairs".into()));
        }
        let f = self.shadowing.mean_linear_factor();
        let mut sum = 0.0;
        for pu in &self.pu_positions {
            for su in &self.su_positions {
                let d_im = pu.distance(&self.irs.position);
                let d_mj = self.irs.position.distance(su);
                sum += cascade_element_gain(d_im, 0.0, d_mj, 0.0, &self.pathloss)?;
            }
        }
        Ok(sum / pairs as f64 * f * f * self.irs.num_elements as f64)
    }
}

/// `beta * (d0/d)^alpha * 10^(-psi_db/10)`.
pub fn direct_gain(d: f64, psi_db: f64, p: &PathLossParams) -> Result<f64> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::Domain(format!("distance must be > 0, got {d}")));
    }
    Ok(p.beta * (p.d0 / d).powf(p.alpha) * 10f64.powf(-psi_db / 10.0))
}

/// Draws a shadowing value in dB. Consumes no randomness when disabled or
/// when `sigma_db == 0`.
pub fn sample_shadowing<R: Rng + ?Sized>(rng: &mut R, model: &ShadowingModel) -> f64 {
    if !model.is_active() {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    model.sigma_db * z
}

/// Gain of one reflected path: PU→element times element→SU.
pub fn cascade_element_gain(
    d_im: f64,
    psi_im: f64,
    d_mj: f64,
    psi_mj: f64,
    p: &PathLossParams,
) -> Result<f64> {
    Ok(direct_gain(d_im, psi_im, p)? * direct_gain(d_mj, psi_mj, p)?)
}

/// Reflected gain, flagged inactive when the IRS is switched off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrsGain {
    pub value: f64,
    pub active: bool,
}

/// Gain through the IRS between PU `pu_idx` and SU `su_idx`.
///
/// All elements share the IRS position; shadowing is drawn independently per
/// element and per hop.
pub fn irs_gain<R: Rng + ?Sized>(
    pu_idx: usize,
    su_idx: usize,
    env: &ChannelEnv,
    rng: &mut R,
) -> Result<IrsGain> {
    let (pu, su) = env.positions(pu_idx, su_idx)?;
    if !env.irs_enabled {
        return Ok(IrsGain {
            value: 0.0,
            active: false,
        });
    }
    let d_im = pu.distance(&env.irs.position);
    let d_mj = env.irs.position.distance(&su);
    let value = match env.irs.phase_policy {
        PhasePolicy::Aligned | PhasePolicy::Zero if !env.shadowing.is_active() => {
            // identical element terms: M * g exactly, no draws consumed
            env.irs.num_elements as f64 * cascade_element_gain(d_im, 0.0, d_mj, 0.0, &env.pathloss)?
        }
        PhasePolicy::Aligned | PhasePolicy::Zero => {
            let mut sum = 0.0;
            for _ in 0..env.irs.num_elements {
                let psi_im = sample_shadowing(rng, &env.shadowing);
                let psi_mj = sample_shadowing(rng, &env.shadowing);
                sum += cascade_element_gain(d_im, psi_im, d_mj, psi_mj, &env.pathloss)?;
            }
            sum
        }
        PhasePolicy::Random => {
            let mut sum = Complex64::new(0.0, 0.0);
            for _ in 0..env.irs.num_elements {
                let psi_im = sample_shadowing(rng, &env.shadowing);
                let psi_mj = sample_shadowing(rng, &env.shadowing);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let g = cascade_element_gain(d_im, psi_im, d_mj, psi_mj, &env.pathloss)?;
                sum += Complex64::from_polar(g, theta);
            }
            sum.norm()
        }
    };
    Ok(IrsGain {
        value,
        active: true,
    })
}

/// Direct plus reflected gain.
pub fn total_gain<R: Rng + ?Sized>(
    pu_idx: usize,
    su_idx: usize,
    env: &ChannelEnv,
    rng: &mut R,
) -> Result<f64> {
    let (pu, su) = env.positions(pu_idx, su_idx)?;
    let psi = sample_shadowing(rng, &env.shadowing);
    let direct = direct_gain(pu.distance(&su), psi, &env.pathloss)?;
    let reflected = irs_gain(pu_idx, su_idx, env, rng)?;
    Ok(direct + reflected.value)
}
