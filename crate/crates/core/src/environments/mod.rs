//! Heterogeneous RIS environments: receiver placement distributions, the
//! exhaustive configuration-labeling oracle, dataset generation, and the
//! deployment defaults used throughout the experiments.

mod io;
mod scaler;

pub use io::{read_dataset_csv, write_dataset_csv, DatasetMeta};
pub use scaler::{apply_scaler, fit_scaler, Scaler, ScalerKind};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    angles_and_distance, compute_g, correlation_matrix, effective_gain, pathloss, psd_factor,
    sample_h, BoresightFrame, ComplexVec, FadingParams, PhaseConfig, RisGeometry, Vec3,
};
use crate::seeding::{domain, substream};

/// Distance density over the annulus [r_min, r_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DistanceLaw {
    /// Flat density.
    Uniform,
    /// Density proportional to (r_max - r)^beta: mass near the RIS.
    BiasedNear { beta: f64 },
    /// Density proportional to (r - r_min)^beta: mass far from the RIS.
    BiasedFar { beta: f64 },
}

/// Azimuth density over the front half-space (-pi/2, pi/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum AngleLaw {
    Uniform,
    /// Normal(center, spread) truncated to the front half-space.
    Concentrated { center: f64, spread: f64 },
}

/// Receiver placement distribution of one environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxDistribution {
    pub distance_law: DistanceLaw,
    pub angle_law: AngleLaw,
    pub r_min: f64,
    pub r_max: f64,
}

impl RxDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max.is_finite()) {
            return Err(Error::config(format!(
                "rx_distribution requires 0 < r_min < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        match self.distance_law {
            DistanceLaw::BiasedNear { beta } | DistanceLaw::BiasedFar { beta } if beta < 0.0 => {
                return Err(Error::config("rx_distribution.distance_law beta must be >= 0"));
            }
            _ => {}
        }
        if let AngleLaw::Concentrated { spread, .. } = self.angle_law {
            if !(spread > 0.0) {
                return Err(Error::config("rx_distribution.angle_law spread must be > 0"));
            }
        }
        Ok(())
    }
}

/// Complete description of one RIS environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub id: u32,
    pub geometry: RisGeometry,
    pub tx_position: Vec3,
    pub rx_distribution: RxDistribution,
    pub rician_k: f64,
    /// Transmit power over noise power p/sigma^2 (dimensionless).
    pub power_ratio: f64,
    /// Receiver height above ground in meters.
    #[serde(default = "default_rx_height")]
    pub rx_height: f64,
}

fn default_rx_height() -> f64 {
    DEFAULT_RX_HEIGHT
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.rx_distribution.validate()?;
        if !self.tx_position.is_finite() {
            return Err(Error::config("tx_position must be finite"));
        }
        if !(self.rician_k >= 0.0) {
            return Err(Error::config("rician_k must be >= 0"));
        }
        if !(self.power_ratio > 0.0 && self.power_ratio.is_finite()) {
            return Err(Error::config("power_ratio must be > 0"));
        }
        if !self.rx_height.is_finite() {
            return Err(Error::config("rx_height must be finite"));
        }
        Ok(())
    }
}

/// Ordered feasible set of phase configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigClassSet {
    configs: Vec<PhaseConfig>,
}

impl ConfigClassSet {
    pub fn new(configs: Vec<PhaseConfig>) -> Result<Self> {
        let first = configs
            .first()
            .ok_or_else(|| Error::contract("config class set must be non-empty"))?;
        let n = first.len();
        if configs.iter().any(|c| c.len() != n) {
            return Err(Error::contract("all configurations must share the same length"));
        }
        Ok(Self { configs })
    }

    /// Default two-class set: all-zeros and alternating 0/pi.
    pub fn two_class(n: usize) -> Self {
        Self {
            configs: vec![PhaseConfig::zeros(n), PhaseConfig::alternating(n)],
        }
    }

    pub fn configs(&self) -> &[PhaseConfig] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// One labeled CSI example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSample {
    pub h: ComplexVec,
    pub g: ComplexVec,
    /// (az_tx, el_tx, az_rx, el_rx, dist_tx, dist_rx); radians and meters.
    pub geo_features: [f64; 6],
    /// Index into the config class set of the gain-maximizing configuration.
    pub label: usize,
    pub per_config_gains: Vec<f64>,
}

/// Labeled dataset of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub environment_id: u32,
    pub samples: Vec<CsiSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.h.len())
    }
}

/// Draws a receiver position: distance and azimuth per the environment's
/// laws, elevation fixed by the receiver height, so the RIS-Rx distance is
/// exactly the drawn `r`.
pub fn sample_rx_position<R: Rng + ?Sized>(spec: &EnvironmentSpec, rng: &mut R) -> Vec3 {
    let dist = &spec.rx_distribution;
    let span = dist.r_max - dist.r_min;
    let u: f64 = rng.random();
    let r = match dist.distance_law {
        DistanceLaw::Uniform => dist.r_min + span * u,
        DistanceLaw::BiasedNear { beta } => dist.r_max - span * u.powf(1.0 / (beta + 1.0)),
        DistanceLaw::BiasedFar { beta } => dist.r_min + span * u.powf(1.0 / (beta + 1.0)),
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let azimuth = match dist.angle_law {
        AngleLaw::Uniform => rng.random_range(-half_pi..half_pi),
        AngleLaw::Concentrated { center, spread } => {
            let normal = Normal::new(center, spread).expect("spread validated > 0");
            loop {
                let a = normal.sample(rng);
                if a > -half_pi && a < half_pi {
                    break a;
                }
            }
        }
    };
    let dz = spec.rx_height - spec.geometry.position.z;
    let sin_el = (dz / r).clamp(-1.0, 1.0);
    let cos_el = (1.0 - sin_el * sin_el).sqrt();
    let frame = &spec.geometry.frame;
    let dir = frame
        .horizontal
        .scale(cos_el * azimuth.sin())
        .add(frame.normal.scale(cos_el * azimuth.cos()))
        .add(frame.vertical.scale(sin_el));
    spec.geometry.position.add(dir.scale(r))
}

/// Exhaustively evaluates the effective gain of every configuration and
/// returns the argmax label (ties to the lowest index) with the gains.
pub fn label_oracle(
    h: &[Complex64],
    g: &[Complex64],
    classes: &ConfigClassSet,
) -> Result<(usize, Vec<f64>)> {
    let gains: Vec<f64> = classes
        .configs()
        .iter()
        .map(|cfg| effective_gain(h, g, cfg))
        .collect::<Result<_>>()?;
    let mut best = 0usize;
    for (idx, &gain) in gains.iter().enumerate().skip(1) {
        if gain > gains[best] {
            best = idx;
        }
    }
    Ok((best, gains))
}

/// Generates `count` labeled samples. Each sample owns an RNG substream keyed
/// by (seed, environment id, sample index), so the output is a pure function
/// of the arguments regardless of thread count.
pub fn generate_dataset(
    spec: &EnvironmentSpec,
    classes: &ConfigClassSet,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::contract("generate_dataset requires count >= 1"));
    }
    spec.validate()?;
    if classes.configs()[0].len() != spec.geometry.num_elements() {
        return Err(Error::contract(format!(
            "config length {} does not match N = {}",
            classes.configs()[0].len(),
            spec.geometry.num_elements()
        )));
    }

    let (aoa, dist_tx) = angles_and_distance(&spec.geometry, spec.tx_position)?;
    let alpha_tx = pathloss(&spec.geometry, dist_tx)?;
    let l_factor = psd_factor(&correlation_matrix(&spec.geometry))?;

    let samples: Vec<Result<CsiSample>> = crate::par::map_indexed(count, |idx| {
        let mut rng = substream(seed, domain::DATASET, spec.id as u64, idx as u64);
        let rx = sample_rx_position(spec, &mut rng);
        let (aod, dist_rx) = angles_and_distance(&spec.geometry, rx)?;
        let alpha_rx = pathloss(&spec.geometry, dist_rx)?;
        let fading = FadingParams::new(spec.rician_k, alpha_tx, alpha_rx)?;
        let h = sample_h(&spec.geometry, &fading, aoa, &l_factor, &mut rng);
        let g = compute_g(&spec.geometry, &fading, aod);
        let (label, per_config_gains) = label_oracle(&h, &g, classes)?;
        Ok(CsiSample {
            h,
            g,
            geo_features: [
                aoa.azimuth,
                aoa.elevation,
                aod.azimuth,
                aod.elevation,
                dist_tx,
                dist_rx,
            ],
            label,
            per_config_gains,
        })
    });
    Ok(Dataset {
        environment_id: spec.id,
        samples: samples.into_iter().collect::<Result<_>>()?,
    })
}

/// Raw feature vector [Re(h); Im(h); Re(g); Im(g)] of length 4N.
pub fn featurize_raw(sample: &CsiSample) -> Vec<f64> {
    let n = sample.h.len();
    let mut out = Vec::with_capacity(4 * n);
    out.extend(sample.h.iter().map(|c| c.re));
    out.extend(sample.h.iter().map(|c| c.im));
    out.extend(sample.g.iter().map(|c| c.re));
    out.extend(sample.g.iter().map(|c| c.im));
    out
}

/// Geometric feature vector (az_tx, el_tx, az_rx, el_rx, dist_tx, dist_rx).
pub fn featurize_geo(sample: &CsiSample) -> Vec<f64> {
    sample.geo_features.to_vec()
}

// Deployment constants shared by the three environments.
pub const DEFAULT_WAVELENGTH: f64 = 0.1;
pub const DEFAULT_RIS_POSITION: Vec3 = Vec3::new(10.0, 20.0, 1.0);
pub const DEFAULT_TX_POSITION: Vec3 = Vec3::new(0.0, 35.0, 3.0);
pub const DEFAULT_R_MIN: f64 = 1.0;
pub const DEFAULT_R_MAX: f64 = 5.0;
pub const DEFAULT_RICIAN_K: f64 = 5.0;
pub const DEFAULT_POWER_RATIO: f64 = 1e10;
pub const DEFAULT_RX_HEIGHT: f64 = 1.5;
pub const DEFAULT_N_X: usize = 10;
pub const DEFAULT_N_Y: usize = 10;

/// Element spacing of each environment as a fraction of the wavelength.
pub const ENV_SPACING_FRACTIONS: [f64; 3] = [0.5, 0.25, 0.4];

fn default_geometry(spacing_fraction: f64) -> RisGeometry {
    let d = spacing_fraction * DEFAULT_WAVELENGTH;
    RisGeometry {
        n_x: DEFAULT_N_X,
        n_y: DEFAULT_N_Y,
        d_x: d,
        d_y: d,
        wavelength: DEFAULT_WAVELENGTH,
        position: DEFAULT_RIS_POSITION,
        frame: BoresightFrame::vertical_plane_facing_y(),
    }
}

/// The three deployment environments: two training environments with
/// near/far-biased uniform-angle receivers at half/quarter-wavelength
/// spacing, and a held-out environment with uniform distances and a
/// direction-concentrated angle distribution at 0.4-wavelength spacing.
pub fn default_environments() -> Vec<EnvironmentSpec> {
    let rx = |distance_law, angle_law| RxDistribution {
        distance_law,
        angle_law,
        r_min: DEFAULT_R_MIN,
        r_max: DEFAULT_R_MAX,
    };
    vec![
        EnvironmentSpec {
            id: 1,
            geometry: default_geometry(ENV_SPACING_FRACTIONS[0]),
            tx_position: DEFAULT_TX_POSITION,
            rx_distribution: rx(DistanceLaw::BiasedNear { beta: 1.0 }, AngleLaw::Uniform),
            rician_k: DEFAULT_RICIAN_K,
            power_ratio: DEFAULT_POWER_RATIO,
            rx_height: DEFAULT_RX_HEIGHT,
        },
        EnvironmentSpec {
            id: 2,
            geometry: default_geometry(ENV_SPACING_FRACTIONS[1]),
            tx_position: DEFAULT_TX_POSITION,
            rx_distribution: rx(DistanceLaw::BiasedFar { beta: 1.0 }, AngleLaw::Uniform),
            rician_k: DEFAULT_RICIAN_K,
            power_ratio: DEFAULT_POWER_RATIO,
            rx_height: DEFAULT_RX_HEIGHT,
        },
        EnvironmentSpec {
            id: 3,
            geometry: default_geometry(ENV_SPACING_FRACTIONS[2]),
            tx_position: DEFAULT_TX_POSITION,
            rx_distribution: rx(
                DistanceLaw::Uniform,
                AngleLaw::Concentrated {
                    center: std::f64::consts::FRAC_PI_4,
                    spread: std::f64::consts::PI / 12.0,
                },
            ),
            rician_k: DEFAULT_RICIAN_K,
            power_ratio: DEFAULT_POWER_RATIO,
            rx_height: DEFAULT_RX_HEIGHT,
        },
    ]
}
