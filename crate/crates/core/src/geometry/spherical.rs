use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Bounds of the 2D spherical grid and the sensor's vertical field of view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalConfig {
    /// Number of rows (`v_s` upper bound).
    pub height: usize,
    /// Number of columns (`u_s` upper bound).
    pub width: usize,
    /// Upward vertical field of view, degrees.
    pub f_up_deg: f64,
    /// Downward vertical field of view, degrees.
    pub f_down_deg: f64,
}

impl SphericalConfig {
    /// 64-beam sensor defaults.
    pub fn kitti() -> Self {
        Self {
            height: 64,
            width: 1800,
            f_up_deg: 2.0,
            f_down_deg: 24.8,
        }
    }

    pub fn new(height: usize, width: usize, f_up_deg: f64, f_down_deg: f64) -> Result<Self> {
        let c = Self {
            height,
            width,
            f_up_deg,
            f_down_deg,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.f_up_deg + self.f_down_deg > 0.0) {
            return Err(Error::InvalidConfig(format!("bad spherical config {self:?}")));
        }
        Ok(())
    }

    pub fn fov_rad(&self) -> f64 {
        (self.f_up_deg + self.f_down_deg).to_radians()
    }
}

/// Integer spherical coordinates `(u_s, v_s)` of a point given in the sensor
/// convention (x forward, y left, z up).
///
/// The floor is applied to the whole scaled expression. Azimuth wraps modulo
/// `width`; elevation is clamped into `[0, height - 1]`. Row 0 is the upper
/// edge of the field of view (elevation `+f_up`).
pub fn spherical_project(p: [f64; 3], cfg: &SphericalConfig) -> Result<(usize, usize)> {
    let [x, y, z] = p;
    let r = (x * x + y * y + z * z).sqrt();
    if !(r > 0.0) {
        return Err(Error::ZeroRange);
    }
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let u = (0.5 * (1.0 - y.atan2(x) / PI) * w).floor();
    let u = (u as i64).rem_euclid(cfg.width as i64) as usize;
    let elevation = (z / r).clamp(-1.0, 1.0).asin();
    let v = ((1.0 - (elevation + cfg.f_down_deg.to_radians()) / cfg.fov_rad()) * h).floor();
    let v = v.clamp(0.0, h - 1.0) as usize;
    Ok((u, v))
}

/// Camera frame (x right, y down, z forward) to sensor frame
/// (x forward, y left, z up).
pub fn camera_to_lidar_axes(p: [f64; 3]) -> [f64; 3] {
    [p[2], -p[0], -p[1]]
}

pub fn lidar_to_camera_axes(p: [f64; 3]) -> [f64; 3] {
    [-p[1], -p[2], p[0]]
}
