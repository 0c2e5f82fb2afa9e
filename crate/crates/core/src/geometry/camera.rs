use crate::error::{Error, Result};

/// Points at or below this depth are not projected onto the normalized plane.
pub const DEFAULT_Z_MIN: f64 = 1e-3;

/// Pinhole intrinsics (no distortion).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// `K⁻¹ (u, v, 1)ᵀ`, dropping the trailing 1.
    pub fn inverse_project(&self, u: f64, v: f64) -> [f64; 2] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy]
    }

    /// Maps normalized-plane coordinates to pixels.
    pub fn from_normalized(&self, xn: f64, yn: f64) -> [f64; 2] {
        [self.fx * xn + self.cx, self.fy * yn + self.cy]
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: [f64; 3], z_min: f64) -> Result<[f64; 2]> {
        let [xn, yn] = normalized_plane_project(p, z_min)?;
        Ok(self.from_normalized(xn, yn))
    }

    /// Intrinsics after resizing the image by `(sx, sy)`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// `(x/z, y/z)`; fails for points at depth `<= z_min`.
pub fn normalized_plane_project(p: [f64; 3], z_min: f64) -> Result<[f64; 2]> {
    let z = p[2];
    if !(z > z_min) {
        return Err(Error::BehindCamera(z));
    }
    Ok([p[0] / z, p[1] / z])
}
