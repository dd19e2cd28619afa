//! Declarative experiment description, read from TOML.
//!
//! Every key is optional; an empty file yields the full-size setup (20 bands
//! of 64 points, `alpha = 3.71`, `beta = 10^3.154`, 100 IRS elements, four
//! sensing nodes). Unknown keys are rejected. See `docs/FORMATS.md` for the
//! full key list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelEnv, Layout, PathLossParams, PhasePolicy, Point, ShadowingModel};
use crate::collab::{ObservationTopology, Scheme, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ArchConfig;
use crate::rng::{substream, tag};
use crate::simgen::SpectrumConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub n_bands: usize,
    pub n_points: usize,
    pub p_busy: f64,
    pub leakage: f64,
    pub pu_power: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        let s = SpectrumConfig::default();
        SpectrumSection {
            n_bands: s.n_bands,
            n_points: s.n_points,
            p_busy: s.p_busy,
            leakage: s.leakage,
            pu_power: s.pu_power,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub alpha: f64,
    pub beta: f64,
    pub d0: f64,
    pub shadowing: bool,
    pub shadowing_sigma_db: f64,
    pub irs_elements: usize,
    pub phase_policy: PhasePolicy,
    /// Defaults to the centroid of all PU and SU positions.
    pub irs_position: Option<Point>,
    pub layout: Layout,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let p = PathLossParams::default();
        let s = ShadowingModel::default();
        ChannelSection {
            alpha: p.alpha,
            beta: p.beta,
            d0: p.d0,
            shadowing: s.enabled,
            shadowing_sigma_db: s.sigma_db,
            irs_elements: 100,
            phase_policy: PhasePolicy::Aligned,
            irs_position: None,
            layout: Layout::Uniform { side_m: 500.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    pub n_nodes: usize,
    /// Bands per node window; defaults to half the bands, rounded up.
    pub window: Option<usize>,
    /// Explicit masks, one row per node; overrides the random windows.
    pub masks: Option<Vec<Vec<u8>>>,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            n_nodes: 4,
            window: None,
            masks: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training samples summed over all nodes, split evenly.
    pub n_train: usize,
    /// Test samples summed over all nodes, split evenly.
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 8000,
            n_test: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    /// Output channels of the shared convolutions; defaults to twice the
    /// band count.
    pub shallow_filters: Option<usize>,
    pub max_pool: Option<[usize; 2]>,
    pub avg_pool: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub snr_list: Vec<f64>,
    pub schemes: Vec<Scheme>,
    /// Schemes additionally trained with the IRS switched off.
    pub irs_comparison: Vec<Scheme>,
    pub out_dir: Option<PathBuf>,
    pub spectrum: SpectrumSection,
    pub channel: ChannelSection,
    pub topology: TopologySection,
    pub data: DataSection,
    pub arch: ArchSection,
    pub training: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            snr_list: vec![-16.0, -14.0, -12.0, -10.0],
            schemes: Scheme::ALL.to_vec(),
            irs_comparison: vec![Scheme::Standalone, Scheme::Decoupled],
            out_dir: None,
            spectrum: SpectrumSection::default(),
            channel: ChannelSection::default(),
            topology: TopologySection::default(),
            data: DataSection::default(),
            arch: ArchSection::default(),
            training: TrainConfig::default(),
        }
    }
}

/// Reads and validates an experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::ConfigMissing(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    ExperimentConfig::from_toml(&text)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The reduced profile: 8 bands of 32 points, four nodes holding 2000
    /// training and 500 test samples in total, three seeds, SNR -16..-10 dB,
    /// clustered geometry, and a short training run.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_desk_scale();
        cfg
    }

    /// Overrides everything but `schemes` and `out_dir` with the reduced
    /// profile.
    pub fn apply_desk_scale(&mut self) {
        self.seeds = vec![1, 2, 3];
        self.snr_list = vec![-16.0, -14.0, -12.0, -10.0];
        self.irs_comparison = vec![Scheme::Standalone];
        self.spectrum = SpectrumSection {
            n_bands: 8,
            n_points: 32,
            ..SpectrumSection::default()
        };
        self.channel = ChannelSection {
            layout: Layout::Clustered {
                separation_m: 85.0,
                spread_m: 10.0,
            },
            ..ChannelSection::default()
        };
        self.topology = TopologySection::default();
        self.data = DataSection {
            n_train: 2000,
            n_test: 500,
        };
        self.arch = ArchSection {
            shallow_filters: Some(8),
            max_pool: Some([4, 1]),
            avg_pool: Some([2, 2]),
        };
        self.training = TrainConfig {
            rounds: 10,
            eta0: 0.1,
            eta_min: 1e-3,
            ..TrainConfig::default()
        };
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::ConfigInvalid(_) => e,
            other => Error::ConfigInvalid(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::ConfigInvalid(msg.into()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.snr_list.is_empty() {
            return bad("snr_list must not be empty");
        }
        if self.schemes.is_empty() {
            return bad("schemes must not be empty");
        }
        let mut snrs = self.snr_list.clone();
        snrs.sort_by(f64::total_cmp);
        if snrs.windows(2).any(|w| w[0] == w[1]) {
            return bad("snr_list has duplicate entries");
        }
        for snr in &self.snr_list {
            self.spectrum(*snr).validate()?;
        }
        self.pathloss()?;
        self.shadowing()?;
        if self.channel.irs_elements == 0 {
            return bad("channel.irs_elements must be at least 1");
        }
        match self.channel.layout {
            Layout::Uniform { side_m } if !(side_m.is_finite() && side_m > 0.0) => {
                return bad("channel.layout.side_m must be > 0");
            }
            Layout::Clustered { separation_m, spread_m }
                if !(separation_m.is_finite() && spread_m.is_finite() && separation_m >= 0.0 && spread_m > 0.0) =>
            {
                return bad("channel.layout needs separation_m >= 0 and spread_m > 0");
            }
            _ => {}
        }
        let j = self.topology.n_nodes;
        if j == 0 {
            return bad("topology.n_nodes must be at least 1");
        }
        if self.data.n_train < j || self.data.n_test < j {
            return bad("data.n_train and data.n_test need at least one sample per node");
        }
        if let Some(masks) = &self.topology.masks {
            if masks.len() != j || masks.iter().any(|m| m.len() != self.spectrum.n_bands) {
                return bad("topology.masks must be n_nodes rows of n_bands entries");
            }
            ObservationTopology::new(masks.clone())?;
        } else if self.window() == 0 || self.window() > self.spectrum.n_bands || self.window() * j < self.spectrum.n_bands {
            return bad("topology.window must lie in 1..=n_bands and the windows must be able to cover every band");
        }
        self.arch().dims()?;
        self.training.validate()
    }

    pub fn spectrum(&self, snr_db: f64) -> SpectrumConfig {
        let s = &self.spectrum;
        SpectrumConfig {
            n_bands: s.n_bands,
            n_points: s.n_points,
            p_busy: s.p_busy,
            leakage: s.leakage,
            pu_power: s.pu_power,
            snr_db,
        }
    }

    pub fn pathloss(&self) -> Result<PathLossParams> {
        PathLossParams::new(self.channel.beta, self.channel.d0, self.channel.alpha)
    }

    pub fn shadowing(&self) -> Result<ShadowingModel> {
        ShadowingModel::new(self.channel.shadowing_sigma_db, self.channel.shadowing)
    }

    pub fn arch(&self) -> ArchConfig {
        let n_bands = self.spectrum.n_bands;
        let mut arch = ArchConfig::new(self.spectrum.n_points, n_bands)
            .with_shallow_filters(self.arch.shallow_filters.unwrap_or(2 * n_bands));
        arch.max_pool = self.arch.max_pool;
        arch.avg_pool = self.arch.avg_pool;
        arch
    }

    pub fn window(&self) -> usize {
        self.topology.window.unwrap_or(self.spectrum.n_bands.div_ceil(2))
    }

    pub fn n_train_per_node(&self) -> usize {
        self.data.n_train / self.topology.n_nodes
    }

    pub fn n_test_per_node(&self) -> usize {
        self.data.n_test / self.topology.n_nodes
    }

    /// Geometry for `seed`, one PU per band and one SU per node. Switching
    /// the IRS off keeps the positions.
    pub fn env(&self, seed: u64, irs_enabled: bool) -> Result<ChannelEnv> {
        ChannelEnv::generate(
            &mut substream(seed, &[tag::GEOMETRY]),
            self.channel.layout,
            self.spectrum.n_bands,
            self.topology.n_nodes,
            self.channel.irs_elements,
            self.channel.phase_policy,
            self.channel.irs_position,
            self.pathloss()?,
            self.shadowing()?,
            irs_enabled,
        )
    }

    pub fn observation_topology(&self, seed: u64) -> Result<ObservationTopology> {
        match &self.topology.masks {
            Some(m) => ObservationTopology::new(m.clone()),
            None => ObservationTopology::random_windows(
                self.topology.n_nodes,
                self.spectrum.n_bands,
                self.window(),
                &mut substream(seed, &[tag::TOPOLOGY]),
            ),
        }
    }

    /// Schemes that also run with the IRS off.
    pub fn compared_schemes(&self) -> impl Iterator<Item = Scheme> + '_ {
        self.schemes.iter().copied().filter(|s| self.irs_comparison.contains(s))
    }
}
