use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::PweError;

/// Vacuum permittivity in F/m.
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    #[default]
    Horizontal,
    Vertical,
}

/// Geometry, wall electrical parameters, carrier frequency and grid steps of
/// one rectangular tunnel slice (range x height).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunnelEnvironment {
    pub length_m: f64,
    pub height_m: f64,
    /// Marching step along the tunnel axis.
    pub delta_range_m: f64,
    /// Transverse grid step.
    pub delta_height_m: f64,
    pub frequency_hz: f64,
    pub eps_r: f64,
    pub sigma_s_per_m: f64,
    pub mu_r: f64,
    #[serde(default)]
    pub polarization: Polarization,
}

impl Default for TunnelEnvironment {
    /// 500 m x 50 m tunnel on a 0.5 m grid (1001 x 101 samples), concrete-like
    /// walls at 900 MHz.
    fn default() -> Self {
        Self {
            length_m: 500.0,
            height_m: 50.0,
            delta_range_m: 0.5,
            delta_height_m: 0.5,
            frequency_hz: 900e6,
            eps_r: 5.0,
            sigma_s_per_m: 0.01,
            mu_r: 1.0,
            polarization: Polarization::Horizontal,
        }
    }
}

impl TunnelEnvironment {
    pub fn validate(&self) -> Result<(), PweError> {
        let bad = |msg: String| Err(PweError::InvalidEnvironment(msg));
        for (name, v) in [
            ("length_m", self.length_m),
            ("height_m", self.height_m),
            ("delta_range_m", self.delta_range_m),
            ("delta_height_m", self.delta_height_m),
            ("frequency_hz", self.frequency_hz),
            ("mu_r", self.mu_r),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.sigma_s_per_m.is_finite() && self.sigma_s_per_m >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma_s_per_m));
        }
        if !(self.eps_r.is_finite() && self.eps_r >= 1.0) {
            return bad(format!("eps_r must be >= 1, got {}", self.eps_r));
        }
        if self.n_range() < 3 || self.n_height() < 3 {
            return bad(format!(
                "grid {}x{} is smaller than 3x3",
                self.n_range(),
                self.n_height()
            ));
        }
        Ok(())
    }

    pub fn n_range(&self) -> usize {
        (self.length_m / self.delta_range_m).round() as usize + 1
    }

    pub fn n_height(&self) -> usize {
        (self.height_m / self.delta_height_m).round() as usize + 1
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    /// Free-space wave number k0 = 2*pi*f/c.
    pub fn k0(&self) -> f64 {
        2.0 * PI * self.frequency_hz / SPEED_OF_LIGHT
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_hz
    }

    /// Surface impedance factor of the Leontovich wall condition.
    pub fn impedance_alpha(&self) -> Complex64 {
        let eps_c = complex_permittivity(self);
        let root = (eps_c - 1.0).sqrt();
        match self.polarization {
            Polarization::Horizontal => root,
            Polarization::Vertical => root / eps_c,
        }
    }

    pub fn height_at(&self, row: usize) -> f64 {
        row as f64 * self.delta_height_m
    }

    pub fn range_at(&self, col: usize) -> f64 {
        col as f64 * self.delta_range_m
    }

    pub fn nearest_row(&self, height_m: f64) -> Result<usize, PweError> {
        if !(height_m.is_finite() && (0.0..=self.height_m).contains(&height_m)) {
            return Err(PweError::HeightOutOfDomain(height_m));
        }
        let row = (height_m / self.delta_height_m).round() as usize;
        Ok(row.min(self.n_height() - 1))
    }
}

/// eps_c = eps_r - j*sigma/(omega*eps0).
pub fn complex_permittivity(env: &TunnelEnvironment) -> Complex64 {
    Complex64::new(env.eps_r, -env.sigma_s_per_m / (env.omega() * EPSILON_0))
}

/// Gaussian aperture feeding column 0 of the slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Transverse position of the aperture centre.
    pub height_m: f64,
    /// Gaussian half-width `w` in `exp(-(x-x0)^2 / (2 w^2))`.
    pub beam_waist_m: f64,
    pub amplitude: f64,
}

impl SourceSpec {
    /// Mid-height source with a waist of five wavelengths.
    pub fn centered(env: &TunnelEnvironment) -> Self {
        Self {
            height_m: env.height_m / 2.0,
            beam_waist_m: 5.0 * env.wavelength_m(),
            amplitude: 1.0,
        }
    }

    pub fn validate(&self, env: &TunnelEnvironment) -> Result<(), PweError> {
        if !(self.height_m > 0.0 && self.height_m < env.height_m) {
            return Err(PweError::InvalidSource(format!(
                "source height {} m outside (0, {})",
                self.height_m, env.height_m
            )));
        }
        if !(self.beam_waist_m.is_finite() && self.beam_waist_m > 0.0) {
            return Err(PweError::InvalidSource(format!(
                "beam waist must be positive, got {}",
                self.beam_waist_m
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(PweError::InvalidSource("amplitude is not finite".into()));
        }
        Ok(())
    }
}
