//! RIS geometry and channel model.
//!
//! Closed-form steering vectors for a uniform planar array, aperture path
//! loss, isotropic-scattering spatial correlation, correlated Rician channel
//! sampling, and the reflected-link effective gain / rate formulas.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ComplexVec = Vec<Complex64>;

/// Rician factors at or above this threshold are treated as a pure LoS link.
pub const RICIAN_K_LOS_THRESHOLD: f64 = 1e12;

const FRAME_ORTHONORMAL_TOL: f64 = 1e-12;

/// Cartesian point or direction in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn sub(self, other: Self) -> Self {
        Self::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Local orthonormal triad of the RIS plane: the boresight normal plus the
/// in-plane horizontal (element x-axis) and vertical (element y-axis) axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoresightFrame {
    pub normal: Vec3,
    pub horizontal: Vec3,
    pub vertical: Vec3,
}

impl BoresightFrame {
    pub fn new(normal: Vec3, horizontal: Vec3, vertical: Vec3) -> Result<Self> {
        let frame = Self {
            normal,
            horizontal,
            vertical,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// Vertical RIS plane facing +y, elements along world +x and +z.
    pub fn vertical_plane_facing_y() -> Self {
        Self {
            normal: Vec3::new(0.0, 1.0, 0.0),
            horizontal: Vec3::new(1.0, 0.0, 0.0),
            vertical: Vec3::new(0.0, 0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [self.normal, self.horizontal, self.vertical];
        for v in axes {
            if !v.is_finite() {
                return Err(Error::DegenerateGeometry(
                    "frame axis has non-finite component".into(),
                ));
            }
            if (v.norm() - 1.0).abs() > FRAME_ORTHONORMAL_TOL {
                return Err(Error::DegenerateGeometry(format!(
                    "frame axis not unit length: |v| = {}",
                    v.norm()
                )));
            }
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let d = axes[a].dot(axes[b]).abs();
            if d > FRAME_ORTHONORMAL_TOL {
                return Err(Error::DegenerateGeometry(format!(
                    "frame axes not orthogonal: |dot| = {d}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for BoresightFrame {
    fn default() -> Self {
        Self::vertical_plane_facing_y()
    }
}

/// Uniform planar array geometry of one RIS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RisGeometry {
    /// Horizontal element count.
    pub n_x: usize,
    /// Vertical element count.
    pub n_y: usize,
    /// Horizontal inter-element spacing in meters.
    pub d_x: f64,
    /// Vertical inter-element spacing in meters.
    pub d_y: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    pub position: Vec3,
    #[serde(default)]
    pub frame: BoresightFrame,
}

impl RisGeometry {
    pub fn new(
        n_x: usize,
        n_y: usize,
        d_x: f64,
        d_y: f64,
        wavelength: f64,
        position: Vec3,
        frame: BoresightFrame,
    ) -> Result<Self> {
        let geo = Self {
            n_x,
            n_y,
            d_x,
            d_y,
            wavelength,
            position,
            frame,
        };
        geo.validate()?;
        Ok(geo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::config("geometry.n_x and n_y must be >= 1"));
        }
        for (name, v) in [
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("wavelength", self.wavelength),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("geometry.{name} must be > 0")));
            }
        }
        if !self.position.is_finite() {
            return Err(Error::config("geometry.position must be finite"));
        }
        self.frame.validate()
    }

    /// Total element count N = n_x * n_y.
    pub fn num_elements(&self) -> usize {
        self.n_x * self.n_y
    }
}

/// Azimuth/elevation pair in radians, azimuth in (-pi, pi], elevation in
/// [-pi/2, pi/2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angles {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Angles {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        use std::f64::consts::{FRAC_PI_2, PI};
        // atan2 can return exactly -pi; fold onto the closed end of the range.
        let azimuth = if azimuth == -PI { PI } else { azimuth };
        if !(azimuth.is_finite() && azimuth > -PI && azimuth <= PI) {
            return Err(Error::contract(format!(
                "azimuth {azimuth} outside (-pi, pi]"
            )));
        }
        if !(elevation.is_finite() && (-FRAC_PI_2..=FRAC_PI_2).contains(&elevation)) {
            return Err(Error::contract(format!(
                "elevation {elevation} outside [-pi/2, pi/2]"
            )));
        }
        Ok(Self { azimuth, elevation })
    }
}

/// Rician factor and the two link path losses of one channel realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingParams {
    pub rician_k: f64,
    pub pathloss_tx: f64,
    pub pathloss_rx: f64,
}

impl FadingParams {
    pub fn new(rician_k: f64, pathloss_tx: f64, pathloss_rx: f64) -> Result<Self> {
        if !(rician_k >= 0.0 && rician_k.is_finite() || rician_k >= RICIAN_K_LOS_THRESHOLD) {
            return Err(Error::contract(format!(
                "rician_k {rician_k} must be finite and >= 0"
            )));
        }
        for (name, v) in [("pathloss_tx", pathloss_tx), ("pathloss_rx", pathloss_rx)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} {v} must be > 0 and finite")));
            }
            if v > 1.0 {
                log::warn!("{name} = {v} exceeds 1; outside the intended far-field regime");
            }
        }
        Ok(Self {
            rician_k,
            pathloss_tx,
            pathloss_rx,
        })
    }
}

/// Per-element phase shifts in [0, 2*pi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    phases: Vec<f64>,
}

impl PhaseConfig {
    /// Wraps each phase into [0, 2*pi).
    pub fn new(phases: Vec<f64>) -> Result<Self> {
        use std::f64::consts::TAU;
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::contract("phase entries must be finite"));
        }
        let phases = phases
            .into_iter()
            .map(|p| {
                let w = p.rem_euclid(TAU);
                if w == TAU {
                    0.0
                } else {
                    w
                }
            })
            .collect();
        Ok(Self { phases })
    }

    /// All-zero configuration.
    pub fn zeros(n: usize) -> Self {
        Self {
            phases: vec![0.0; n],
        }
    }

    /// Alternating 0/pi configuration over the element index.
    pub fn alternating(n: usize) -> Self {
        Self {
            phases: (0..n)
                .map(|i| if i % 2 == 0 { 0.0 } else { std::f64::consts::PI })
                .collect(),
        }
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Zero-based planar indices (i, j) of 1-based element `n` in row-major order
/// over rows of `n_x` elements.
pub fn element_indices(n: usize, n_x: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::contract("element index n must be >= 1"));
    }
    if n_x == 0 {
        return Err(Error::contract("n_x must be >= 1"));
    }
    Ok(((n - 1) % n_x, (n - 1) / n_x))
}

/// In-plane position [i*d_x, j*d_y] of element `n` in meters.
pub fn element_position(n: usize, geometry: &RisGeometry) -> Result<[f64; 2]> {
    if n > geometry.num_elements() {
        return Err(Error::contract(format!(
            "element index {n} exceeds N = {}",
            geometry.num_elements()
        )));
    }
    let (i, j) = element_indices(n, geometry.n_x)?;
    Ok([i as f64 * geometry.d_x, j as f64 * geometry.d_y])
}

/// Steering vector of the planar array toward `angles`.
///
/// Entry n is exp(j * 2*pi/lambda * delta_n) with
/// delta_n = i*d_x*cos(el)*sin(az) + j*d_y*sin(el); all entries have unit
/// modulus and the first entry is exactly 1.
pub fn steering_vector(angles: Angles, geometry: &RisGeometry) -> ComplexVec {
    let k = std::f64::consts::TAU / geometry.wavelength;
    let u = angles.elevation.cos() * angles.azimuth.sin();
    let v = angles.elevation.sin();
    let n = geometry.num_elements();
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let i = (idx % geometry.n_x) as f64;
        let j = (idx / geometry.n_x) as f64;
        let delta = i * geometry.d_x * u + j * geometry.d_y * v;
        out.push(Complex64::from_polar(1.0, k * delta));
    }
    out
}

/// Azimuth/elevation of `to` as seen from the RIS in its local frame, plus
/// the Euclidean distance.
pub fn angles_and_distance(geometry: &RisGeometry, to: Vec3) -> Result<(Angles, f64)> {
    let diff = to.sub(geometry.position);
    let dist = diff.norm();
    if dist == 0.0 || !dist.is_finite() {
        return Err(Error::DegenerateGeometry(
            "target coincides with the RIS position".into(),
        ));
    }
    let unit = diff.scale(1.0 / dist);
    let x = unit.dot(geometry.frame.horizontal);
    let n = unit.dot(geometry.frame.normal);
    let y = unit.dot(geometry.frame.vertical).clamp(-1.0, 1.0);
    let angles = Angles::new(x.atan2(n), y.asin())?;
    Ok((angles, dist))
}

/// Aperture path loss N*d_x*d_y / (4*pi*d^2).
pub fn pathloss(geometry: &RisGeometry, distance: f64) -> Result<f64> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::DegenerateGeometry(format!(
            "pathloss distance {distance} must be > 0"
        )));
    }
    let aperture = geometry.num_elements() as f64 * geometry.d_x * geometry.d_y;
    Ok(aperture / (4.0 * std::f64::consts::PI * distance * distance))
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Spatial correlation matrix under isotropic scattering:
/// R[m][n] = sinc(2*|u_m - u_n| / lambda). Symmetric with unit diagonal.
pub fn correlation_matrix(geometry: &RisGeometry) -> nalgebra::DMatrix<f64> {
    let n = geometry.num_elements();
    let positions: Vec<[f64; 2]> = (1..=n)
        .map(|idx| element_position(idx, geometry).expect("index within N"))
        .collect();
    let mut r = nalgebra::DMatrix::zeros(n, n);
    for m in 0..n {
        r[(m, m)] = 1.0;
        for l in (m + 1)..n {
            let dx = positions[m][0] - positions[l][0];
            let dy = positions[m][1] - positions[l][1];
            let dist = (dx * dx + dy * dy).sqrt();
            let val = sinc(2.0 * dist / geometry.wavelength);
            r[(m, l)] = val;
            r[(l, m)] = val;
        }
    }
    r
}

/// Symmetric PSD square root of `r`: eigendecomposition with eigenvalues
/// clamped at zero, L = Q * sqrt(max(diag, 0)) * Q^T, so L*L^T ~= r.
///
/// Correlation matrices at sub-half-wavelength spacing are rank deficient,
/// which rules out a plain Cholesky factorization.
pub fn psd_factor(r: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::contract("psd_factor requires a square matrix"));
    }
    if (r - r.transpose()).abs().max() > 1e-10 {
        return Err(Error::contract("psd_factor requires a symmetric matrix"));
    }
    let eig = r.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let scaled = {
        let mut q = eig.eigenvectors.clone();
        for (c, s) in sqrt_vals.iter().enumerate() {
            q.column_mut(c).scale_mut(*s);
        }
        q
    };
    let l = &scaled * eig.eigenvectors.transpose();
    let err = (&l * l.transpose() - r).norm();
    let budget = 1e-8 * n as f64;
    if !err.is_finite() || err > budget {
        return Err(Error::Numerical(format!(
            "psd factor reconstruction error {err} exceeds {budget}"
        )));
    }
    Ok(l)
}

/// Draws one correlated Rician channel realization:
/// h = sqrt(a_t) * (sqrt(k/(1+k)) * a_N(aoa) + sqrt(1/(1+k)) * L*w) with w
/// i.i.d. standard complex normal. At `rician_k >= RICIAN_K_LOS_THRESHOLD`
/// the scattered term is dropped and no random draws are consumed.
pub fn sample_h<R: Rng + ?Sized>(
    geometry: &RisGeometry,
    fading: &FadingParams,
    aoa: Angles,
    l_factor: &nalgebra::DMatrix<f64>,
    rng: &mut R,
) -> ComplexVec {
    let n = geometry.num_elements();
    let amp = fading.pathloss_tx.sqrt();
    let los = steering_vector(aoa, geometry);
    if fading.rician_k >= RICIAN_K_LOS_THRESHOLD {
        return los.into_iter().map(|a| a * amp).collect();
    }
    let los_w = (fading.rician_k / (1.0 + fading.rician_k)).sqrt();
    let nlos_w = (1.0 / (1.0 + fading.rician_k)).sqrt();
    // CN(0,1): variance 1/2 per real/imaginary part.
    let comp_scale = std::f64::consts::FRAC_1_SQRT_2;
    let w: Vec<Complex64> = (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * comp_scale, im * comp_scale)
        })
        .collect();
    (0..n)
        .map(|row| {
            let mut scattered = Complex64::new(0.0, 0.0);
            for (col, wc) in w.iter().enumerate() {
                scattered += l_factor[(row, col)] * wc;
            }
            amp * (los_w * los[row] + nlos_w * scattered)
        })
        .collect()
}

/// Deterministic LoS-only RIS-to-Rx channel g = sqrt(a_r) * a_N(aod).
pub fn compute_g(geometry: &RisGeometry, fading: &FadingParams, aod: Angles) -> ComplexVec {
    let amp = fading.pathloss_rx.sqrt();
    steering_vector(aod, geometry)
        .into_iter()
        .map(|a| a * amp)
        .collect()
}

/// Reflected-link power gain |sum_n conj(h_n) * exp(j*theta_n) * g_n|^2.
pub fn effective_gain(h: &[Complex64], g: &[Complex64], config: &PhaseConfig) -> Result<f64> {
    if h.len() != g.len() || h.len() != config.len() {
        return Err(Error::contract(format!(
            "length mismatch: |h|={}, |g|={}, |theta|={}",
            h.len(),
            g.len(),
            config.len()
        )));
    }
    let sum: Complex64 = h
        .iter()
        .zip(g)
        .zip(config.phases())
        .map(|((hn, gn), &theta)| hn.conj() * Complex64::from_polar(1.0, theta) * gn)
        .sum();
    Ok(sum.norm_sqr())
}

/// Downlink spectral efficiency log2(1 + gain * power_ratio) in bits/s/Hz.
pub fn rate(
    h: &[Complex64],
    g: &[Complex64],
    config: &PhaseConfig,
    power_ratio: f64,
) -> Result<f64> {
    if !(power_ratio > 0.0 && power_ratio.is_finite()) {
        return Err(Error::contract(format!(
            "power_ratio {power_ratio} must be > 0 and finite"
        )));
    }
    let gain = effective_gain(h, g, config)?;
    Ok(rate_from_gain(gain, power_ratio))
}

/// Rate evaluated from a precomputed effective gain.
pub fn rate_from_gain(gain: f64, power_ratio: f64) -> f64 {
    (1.0 + gain * power_ratio).log2()
}
