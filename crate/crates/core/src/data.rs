//! Synthetic scenes, perturbation sampling and file formats.
//!
//! A scene is rendered from a virtual scanner sitting at the camera center:
//! rays on a regular azimuth/elevation lattice hit a ground plane, a few
//! boxes or a far sphere, every hit gets a procedural color, and the image is
//! produced by splatting those colors through the pinhole model. The stored
//! cloud is then moved into the "map" frame by the inverse of the sampled
//! target pose.
//!
//! Convention: `gt_pose` maps camera-frame points to the map frame, so the
//! network must predict `gt_pose⁻¹` (map → camera).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::config::parse_kv;
use crate::error::{malformed, Error, Result};
use crate::geometry::{CameraIntrinsics, PoseQT, Quaternion, SphericalConfig, Vec3};
use crate::registration::ModelInput;
use crate::sampling::PointCloud;

/// Which protocol a perturbation follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// Yaw about the up axis and a ground-plane translation.
    LargeRange,
    /// Small rotation and translation about every axis.
    CoarseInit,
    /// A miscalibration `φ` is applied; the target is `φ⁻¹`.
    Decalib,
}

impl PerturbMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "large" => Ok(Self::LargeRange),
            "coarse" => Ok(Self::CoarseInit),
            "decalib" => Ok(Self::Decalib),
            _ => Err(Error::InvalidConfig(format!("unknown mode '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LargeRange => "large",
            Self::CoarseInit => "coarse",
            Self::Decalib => "decalib",
        }
    }
}

/// Uniform ranges `[-r, r]` per axis of the vehicle frame (x forward, y left,
/// z up): roll/pitch/yaw in degrees and translations in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    pub rot_deg: [f64; 3],
    pub transl: [f64; 3],
}

impl PerturbSpec {
    pub fn large() -> Self {
        Self {
            mode: PerturbMode::LargeRange,
            rot_deg: [0.0, 0.0, 30.0],
            transl: [1.0, 1.0, 0.0],
        }
    }

    pub fn coarse() -> Self {
        Self {
            mode: PerturbMode::CoarseInit,
            rot_deg: [5.0; 3],
            transl: [0.5; 3],
        }
    }

    pub fn decalib() -> Self {
        Self {
            mode: PerturbMode::Decalib,
            rot_deg: [5.0; 3],
            transl: [0.2; 3],
        }
    }

    pub fn for_mode(mode: PerturbMode) -> Self {
        match mode {
            PerturbMode::LargeRange => Self::large(),
            PerturbMode::CoarseInit => Self::coarse(),
            PerturbMode::Decalib => Self::decalib(),
        }
    }

    pub fn zero(mode: PerturbMode) -> Self {
        Self {
            mode,
            rot_deg: [0.0; 3],
            transl: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rot_deg.iter().chain(&self.transl).any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidConfig(format!("perturbation ranges must be non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Applies one `key=value` override (`mode`, `rot_x`..`rot_z`,
    /// `transl_x`..`transl_z`). Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || value.parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad value for {key}: '{value}'")));
        match key {
            "mode" => self.mode = PerturbMode::parse(value)?,
            "rot_x" => self.rot_deg[0] = num()?,
            "rot_y" => self.rot_deg[1] = num()?,
            "rot_z" => self.rot_deg[2] = num()?,
            "transl_x" => self.transl[0] = num()?,
            "transl_y" => self.transl[1] = num()?,
            "transl_z" => self.transl[2] = num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Rotation taking camera axes to vehicle axes.
fn camera_to_vehicle() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Per-axis draw in the vehicle frame, returned as a camera-frame pose.
/// Rotation order is `Rx · Ry · Rz`.
fn draw_vehicle_pose(spec: &PerturbSpec, rng: &mut ChaCha8Rng) -> PoseQT {
    let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let (rot, tr) = match spec.mode {
        PerturbMode::LargeRange => ([0.0, 0.0, u(spec.rot_deg[2])], [u(spec.transl[0]), u(spec.transl[1]), 0.0]),
        _ => (
            [u(spec.rot_deg[0]), u(spec.rot_deg[1]), u(spec.rot_deg[2])],
            [u(spec.transl[0]), u(spec.transl[1]), u(spec.transl[2])],
        ),
    };
    let r = Rotation3::from_axis_angle(&Vec3::x_axis(), rot[0].to_radians())
        * Rotation3::from_axis_angle(&Vec3::y_axis(), rot[1].to_radians())
        * Rotation3::from_axis_angle(&Vec3::z_axis(), rot[2].to_radians());
    let c = camera_to_vehicle();
    let rc = c.transpose() * r.matrix() * c;
    let q = UnitQuaternion::from_matrix(&rc);
    let t = c.transpose() * Vec3::new(tr[0], tr[1], tr[2]);
    PoseQT::new(Quaternion::new(q.w, q.i, q.j, q.k), t).expect("rotation matrix gives a unit quaternion")
}

/// `(applied, target)`: the transform applied to camera-frame points to get
/// the stored cloud, and the pose the network must predict (its inverse).
pub fn sample_perturbation_pair(spec: &PerturbSpec, seed: u64) -> (PoseQT, PoseQT) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A11);
    let drawn = draw_vehicle_pose(spec, &mut rng);
    match spec.mode {
        // φ is the miscalibration applied to the cloud.
        PerturbMode::Decalib => (drawn, drawn.inverse()),
        _ => (drawn.inverse(), drawn),
    }
}

/// The pose the network must predict for a scene generated with `seed`.
pub fn sample_perturbation(spec: &PerturbSpec, seed: u64) -> PoseQT {
    sample_perturbation_pair(spec, seed).1
}

/// Synthetic scene generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
    /// Scanner lattice: rows span the spherical field of view, columns span
    /// `±azimuth_deg`.
    pub rows: usize,
    pub cols: usize,
    pub azimuth_deg: f64,
    pub spherical: SphericalConfig,
    pub ground_height: f64,
    pub boxes: usize,
    pub far_radius: f64,
    pub perturb: PerturbSpec,
}

impl SceneConfig {
    /// 32×64 image, 16×32 = 512 scanner points.
    pub fn desk(perturb: PerturbSpec) -> Self {
        Self {
            height: 32,
            width: 64,
            intrinsics: CameraIntrinsics::new(32.0, 32.0, 31.5, 15.5).expect("valid intrinsics"),
            rows: 16,
            cols: 32,
            azimuth_deg: 60.0,
            spherical: SphericalConfig::new(16, 96, 15.0, 25.0).expect("valid spherical config"),
            ground_height: 1.5,
            boxes: 4,
            far_radius: 20.0,
            perturb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perturb.validate()?;
        self.spherical.validate()?;
        if self.height == 0 || self.width == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig("scene dimensions must be positive".into()));
        }
        if !(self.azimuth_deg > 0.0 && self.azimuth_deg < 180.0) || !(self.far_radius > 0.0) {
            return Err(Error::InvalidConfig("bad scanner extent".into()));
        }
        Ok(())
    }
}

/// One image/cloud pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Map-frame points; one feature channel (intensity).
    pub cloud: PointCloud,
    /// RGB, row-major `[height, width, 3]`.
    pub image: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
    /// Camera frame → map frame.
    pub gt_pose: PoseQT,
    pub spherical: SphericalConfig,
    pub seed: u64,
    pub mode: PerturbMode,
}

impl Scene {
    /// The map → camera pose the network regresses.
    pub fn target(&self) -> PoseQT {
        self.gt_pose.inverse()
    }

    pub fn image_real(&self) -> Vec<Real> {
        self.image.iter().map(|&b| b as Real / 255.0).collect()
    }

    /// Cloud with initial features `[0, …, 0, intensity]` of width
    /// `channels` and spherical grid coordinates.
    pub fn model_cloud(&self, channels: usize) -> Result<PointCloud> {
        model_cloud(&self.cloud, channels, &self.spherical)
    }
}

/// Initial point features: zeros followed by intensity.
pub fn model_cloud(cloud: &PointCloud, channels: usize, spherical: &SphericalConfig) -> Result<PointCloud> {
    if channels == 0 || cloud.channels != 1 {
        return Err(Error::InvalidConfig("expects a one-channel intensity cloud".into()));
    }
    let mut f = vec![0.0; cloud.len() * channels];
    for (i, &v) in cloud.features.iter().enumerate() {
        f[i * channels + channels - 1] = v;
    }
    PointCloud::new(cloud.positions.clone(), f, channels)?.with_spherical(spherical)
}

/// Owned model inputs for one scene.
pub struct PreparedInput {
    pub image: Vec<Real>,
    pub cloud: PointCloud,
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
}

impl PreparedInput {
    pub fn new(scene: &Scene, channels: usize) -> Result<Self> {
        Ok(Self {
            image: scene.image_real(),
            cloud: scene.model_cloud(channels)?,
            height: scene.height,
            width: scene.width,
            intrinsics: scene.intrinsics,
        })
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            image: &self.image,
            height: self.height,
            width: self.width,
            intrinsics: self.intrinsics,
            cloud: &self.cloud,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
    color: [f64; 3],
}

impl Aabb {
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if 0.0 < self.lo[a] || 0.0 > self.hi[a] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = (self.lo[a] / d[a], self.hi[a] / d[a]);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            t0 = t0.max(n);
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Color of a hit point; `surface` 0 ground, 1 far sphere, `2 + b` box `b`.
fn shade(p: [f64; 3], surface: usize, boxes: &[Aabb], phase: f64) -> [u8; 3] {
    let c = match surface {
        0 => {
            let check = ((p[0].floor() + p[2].floor()) as i64).rem_euclid(2) as f64;
            [0.25 + 0.35 * check, 0.3 + 0.25 * check, 0.2 + 0.1 * check]
        }
        1 => {
            let az = p[0].atan2(p[2]);
            let el = (-p[1]).atan2(p[2].hypot(p[0]));
            [
                0.5 + 0.45 * (3.0 * az + phase).sin(),
                0.5 + 0.45 * (5.0 * el + 0.5 * phase).cos(),
                0.5 + 0.45 * (2.0 * az - 4.0 * el).sin(),
            ]
        }
        b => {
            let base = boxes[b - 2].color;
            let stripe = 0.75 + 0.25 * (4.0 * (p[1] + p[0] + p[2])).sin();
            [base[0] * stripe, base[1] * stripe, base[2] * stripe]
        }
    };
    [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]
}

fn luminance(c: [u8; 3]) -> f32 {
    ((0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0) as f32
}

/// Camera-frame scanner points with their colors, before any perturbation.
pub fn scan(seed: u64, cfg: &SceneConfig) -> Vec<([f64; 3], [u8; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes: Vec<Aabb> = (0..cfg.boxes)
        .map(|_| {
            let (x, z) = (rng.gen_range(-6.0..6.0), rng.gen_range(4.0..15.0));
            let (w, d, h) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.5));
            Aabb {
                lo: [x - w / 2.0, cfg.ground_height - h, z - d / 2.0],
                hi: [x + w / 2.0, cfg.ground_height, z + d / 2.0],
                color: [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)],
            }
        })
        .collect();
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let fov = cfg.spherical.f_up_deg + cfg.spherical.f_down_deg;
    let mut out = Vec::with_capacity(cfg.rows * cfg.cols);
    for i in 0..cfg.rows {
        let el = (cfg.spherical.f_up_deg - (i as f64 + 0.5) * fov / cfg.rows as f64).to_radians();
        for j in 0..cfg.cols {
            let az = (cfg.azimuth_deg - (j as f64 + 0.5) * 2.0 * cfg.azimuth_deg / cfg.cols as f64).to_radians();
            // Sensor direction (x fwd, y left, z up) in camera axes.
            let d = [-el.cos() * az.sin(), -el.sin(), el.cos() * az.cos()];
            let mut best = (cfg.far_radius, 1usize);
            if d[1] > 1e-9 {
                let t = cfg.ground_height / d[1];
                if t < best.0 {
                    best = (t, 0);
                }
            }
            for (b, bx) in boxes.iter().enumerate() {
                if let Some(t) = bx.hit(d) {
                    if t < best.0 {
                        best = (t, b + 2);
                    }
                }
            }
            let p = [d[0] * best.0, d[1] * best.0, d[2] * best.0];
            out.push((p, shade(p, best.1, &boxes, phase)));
        }
    }
    out
}

/// Splats each point into a 3×3 block with a z-buffer. A point's own center
/// pixel beats any neighbor's halo; among equals the nearer point wins.
/// Pixels nobody covers get seeded noise.
pub fn render(points: &[([f64; 3], [u8; 3])], cfg: &SceneConfig, seed: u64) -> Vec<u8> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A6E);
    let mut img: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
    let mut depth = vec![(2u8, f64::INFINITY); h * w];
    for (p, c) in points {
        let Ok([u, v]) = cfg.intrinsics.project(*p, crate::geometry::DEFAULT_Z_MIN) else {
            continue;
        };
        let (cu, cv) = (u.round() as i64, v.round() as i64);
        for dv in -1..=1i64 {
            for du in -1..=1i64 {
                let (x, y) = (cu + du, cv + dv);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let k = y as usize * w + x as usize;
                let key = (u8::from(du != 0 || dv != 0), p[2]);
                if key.0 < depth[k].0 || (key.0 == depth[k].0 && key.1 < depth[k].1) {
                    depth[k] = key;
                    img[k * 3..k * 3 + 3].copy_from_slice(c);
                }
            }
        }
    }
    img
}

fn quantize(p: [f64; 3]) -> [f64; 3] {
    [p[0] as f32 as f64, p[1] as f32 as f64, p[2] as f32 as f64]
}

/// Deterministic synthetic scene.
pub fn synth_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let pts = scan(seed, cfg);
    let image = render(&pts, cfg, seed);
    let (applied, _) = sample_perturbation_pair(&cfg.perturb, seed);
    let positions: Vec<[f64; 3]> = pts
        .iter()
        .map(|(p, _)| {
            let q = applied.apply_point(Vec3::new(p[0], p[1], p[2]));
            quantize([q.x, q.y, q.z])
        })
        .collect();
    let features: Vec<Real> = pts.iter().map(|(_, c)| luminance(*c) as Real).collect();
    Ok(Scene {
        cloud: PointCloud::new(positions, features, 1)?,
        image,
        height: cfg.height,
        width: cfg.width,
        intrinsics: cfg.intrinsics,
        gt_pose: applied,
        spherical: cfg.spherical,
        seed,
        mode: cfg.perturb.mode,
    })
}

/// Reads little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn load_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(malformed(path, format!("size {} is not a multiple of 16", bytes.len())));
    }
    let vals: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let positions = vals.chunks_exact(4).map(|v| [v[0] as f64, v[1] as f64, v[2] as f64]).collect();
    let features = vals.chunks_exact(4).map(|v| v[3] as Real).collect();
    PointCloud::new(positions, features, 1)
}

pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    if cloud.channels != 1 {
        return Err(Error::InvalidConfig("bin files carry exactly one feature".into()));
    }
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, f) in cloud.positions.iter().zip(&cloud.features) {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, *f as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_ppm(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    if rgb.len() != height * width * 3 {
        return Err(Error::LengthMismatch(rgb.len(), height * width * 3));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Binary P6 with maxval 255; comments are not supported.
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(malformed(path, "not a binary PPM (P6)"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| malformed(path, format!("bad header field '{s}'")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    if num(token()?)? != 255 {
        return Err(malformed(path, "maxval must be 255"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height * 3 {
        return Err(malformed(path, format!("expected {} pixel bytes, found {}", width * height * 3, data.len())));
    }
    Ok((data.to_vec(), height, width))
}

/// `key=value` intrinsics file with keys `fx, fy, cx, cy`.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let kv = parse_kv(&fs::read_to_string(path)?)?;
    let get = |k: &str| -> Result<f64> {
        kv.iter()
            .find(|(key, _)| key == k)
            .ok_or_else(|| malformed(path, format!("missing key {k}")))?
            .1
            .parse()
            .map_err(|_| malformed(path, format!("bad value for {k}")))
    };
    CameraIntrinsics::new(get("fx")?, get("fy")?, get("cx")?, get("cy")?)
}

fn meta_text(s: &Scene) -> String {
    let q = s.gt_pose.q();
    let t = s.gt_pose.t();
    let k = &s.intrinsics;
    let sp = &s.spherical;
    let rows = [
        ("seed", s.seed.to_string()),
        ("mode", s.mode.name().to_string()),
        ("height", s.height.to_string()),
        ("width", s.width.to_string()),
        ("fx", format!("{:?}", k.fx)),
        ("fy", format!("{:?}", k.fy)),
        ("cx", format!("{:?}", k.cx)),
        ("cy", format!("{:?}", k.cy)),
        ("gt_qw", format!("{:?}", q.w)),
        ("gt_qx", format!("{:?}", q.x)),
        ("gt_qy", format!("{:?}", q.y)),
        ("gt_qz", format!("{:?}", q.z)),
        ("gt_tx", format!("{:?}", t.x)),
        ("gt_ty", format!("{:?}", t.y)),
        ("gt_tz", format!("{:?}", t.z)),
        ("spherical_height", sp.height.to_string()),
        ("spherical_width", sp.width.to_string()),
        ("spherical_f_up", format!("{:?}", sp.f_up_deg)),
        ("spherical_f_down", format!("{:?}", sp.f_down_deg)),
    ];
    rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Writes `cloud.bin`, `image.ppm` and `meta.txt` into `dir`.
pub fn save_scene(dir: &Path, s: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_kitti_bin(&dir.join("cloud.bin"), &s.cloud)?;
    write_ppm(&dir.join("image.ppm"), &s.image, s.height, s.width)?;
    fs::write(dir.join("meta.txt"), meta_text(s))?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let meta_path = dir.join("meta.txt");
    let kv = parse_kv(&fs::read_to_string(&meta_path)?)?;
    let raw = |k: &str| -> Result<&str> {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| malformed(&meta_path, format!("missing key {k}")))
    };
    let f = |k: &str| -> Result<f64> { raw(k)?.parse().map_err(|_| malformed(&meta_path, format!("bad value for {k}"))) };
    let u = |k: &str| -> Result<usize> { raw(k)?.parse().map_err(|_| malformed(&meta_path, format!("bad value for {k}"))) };
    let cloud = load_kitti_bin(&dir.join("cloud.bin"))?;
    let (image, height, width) = read_ppm(&dir.join("image.ppm"))?;
    if (height, width) != (u("height")?, u("width")?) {
        return Err(malformed(dir, "image size disagrees with meta"));
    }
    let q = Quaternion::new(f("gt_qw")?, f("gt_qx")?, f("gt_qy")?, f("gt_qz")?);
    let gt_pose = PoseQT::new(q, Vec3::new(f("gt_tx")?, f("gt_ty")?, f("gt_tz")?))?;
    Ok(Scene {
        cloud,
        image,
        height,
        width,
        intrinsics: CameraIntrinsics::new(f("fx")?, f("fy")?, f("cx")?, f("cy")?)?,
        gt_pose,
        spherical: SphericalConfig::new(
            u("spherical_height")?,
            u("spherical_width")?,
            f("spherical_f_up")?,
            f("spherical_f_down")?,
        )?,
        seed: raw("seed")?.parse().map_err(|_| malformed(&meta_path, "bad seed"))?,
        mode: PerturbMode::parse(raw("mode")?)?,
    })
}

pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Scene directories under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let dirs = scene_dirs(root)?;
    if dirs.is_empty() {
        return Err(malformed(root, "no scenes found"));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

/// Generates `n` scenes with seeds `seed..seed+n`.
pub fn generate_dataset(root: &Path, n: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<PathBuf>> {
    let scenes = crate::par::map_range(n, |i| synth_scene(seed + i as u64, cfg));
    let mut dirs = Vec::with_capacity(n);
    for (i, s) in scenes.into_iter().enumerate() {
        let d = root.join(scene_dir_name(i));
        save_scene(&d, &s?)?;
        dirs.push(d);
    }
    Ok(dirs)
}
