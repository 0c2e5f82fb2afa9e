//! Point clouds on a spherical grid, stride sampling, and neighborhood
//! queries: projection-aware KNN inside a 2D kernel window, the exhaustive
//! KNN it must agree with, and farthest point sampling for clouds without a
//! grid.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{camera_to_lidar_axes, spherical_project, SphericalConfig};
use crate::par;

/// Integer spherical coordinates `(u, v)` of every point plus the grid bounds
/// at the cloud's pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalGrid {
    pub coords: Vec<[usize; 2]>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// Row-major `len() × channels`.
    pub features: Vec<Real>,
    pub channels: usize,
    pub spherical: Option<SphericalGrid>,
    pub level: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: Vec<Real>, channels: usize) -> Result<Self> {
        if features.len() != positions.len() * channels {
            return Err(Error::LengthMismatch(positions.len() * channels, features.len()));
        }
        Ok(Self {
            positions,
            features,
            channels,
            spherical: None,
            level: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[Real] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Computes spherical coordinates. Positions use camera-style axes
    /// (x right, y down, z forward) and are re-axed to the sensor convention.
    pub fn with_spherical(mut self, cfg: &SphericalConfig) -> Result<Self> {
        let coords = self
            .positions
            .iter()
            .map(|p| spherical_project(camera_to_lidar_axes(*p), cfg).map(|(u, v)| [u, v]))
            .collect::<Result<Vec<_>>>()?;
        self.spherical = Some(SphericalGrid {
            coords,
            width: cfg.width,
            height: cfg.height,
        });
        Ok(self)
    }

    /// The points at `idx`, in that order, with the same grid units.
    pub fn subset(&self, idx: &[usize]) -> PointCloud {
        let c = self.channels;
        let mut features = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            features.extend_from_slice(self.feature(i));
        }
        PointCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            features,
            channels: c,
            spherical: self.spherical.as_ref().map(|s| SphericalGrid {
                coords: idx.iter().map(|&i| s.coords[i]).collect(),
                width: s.width,
                height: s.height,
            }),
            level: self.level,
        }
    }
}

/// Neighborhood query parameters for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingSpec {
    pub k: usize,
    /// Window `(rows, cols)` on the spherical grid; both odd.
    pub kernel: (usize, usize),
    pub max_dist: f64,
    /// Sampling strides `(s_h, s_w)` that produce this level's centers.
    pub strides: (usize, usize),
}

impl GroupingSpec {
    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.k == 0 || kh % 2 == 0 || kw % 2 == 0 || !(self.max_dist > 0.0) || self.strides.0 == 0 || self.strides.1 == 0 {
            return Err(Error::InvalidConfig(format!("bad grouping spec {self:?}")));
        }
        Ok(())
    }
}

/// `k` neighbor indices per center, row-major, with a validity flag per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub idx: Vec<usize>,
    pub valid: Vec<bool>,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.idx.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    /// Center index of every slot: `[0; k] ++ [1; k] ++ ...`.
    pub fn center_of_slot(&self) -> Vec<usize> {
        (0..self.len()).flat_map(|i| std::iter::repeat(i).take(self.k)).collect()
    }

    fn from_rows(k: usize, rows: Vec<(Vec<usize>, Vec<bool>)>) -> Self {
        let mut idx = Vec::with_capacity(rows.len() * k);
        let mut valid = Vec::with_capacity(rows.len() * k);
        for (i, v) in rows {
            idx.extend(i);
            valid.extend(v);
        }
        Self { k, idx, valid }
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn by_dist(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Keeps the `k` best `(d², index)` pairs within the threshold and pads.
fn select(mut cand: Vec<(f64, usize)>, k: usize, max_d2: f64, fallback: impl FnOnce() -> usize) -> (Vec<usize>, Vec<bool>) {
    cand.retain(|c| c.0 <= max_d2);
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, by_dist);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_dist);
    let mut idx: Vec<usize> = cand.iter().map(|c| c.1).collect();
    let mut valid = vec![true; idx.len()];
    let fill = idx.first().copied().unwrap_or_else(fallback);
    idx.resize(k, fill);
    valid.resize(k, false);
    (idx, valid)
}

fn nearest_any(p: &[f64; 3], cands: &[[f64; 3]]) -> usize {
    cands
        .iter()
        .enumerate()
        .map(|(j, c)| (dist2(p, c), j))
        .min_by(by_dist)
        .map(|c| c.1)
        .unwrap_or(0)
}

/// Exact `k` nearest candidates of each center by Euclidean distance, ties
/// to the lower index. Candidates farther than `max_dist` are not selected;
/// short rows repeat their nearest valid neighbor and are flagged invalid.
/// A center with no valid neighbor gets its overall nearest candidate in
/// every slot, all flagged invalid.
pub fn brute_force_knn(centers: &[[f64; 3]], cands: &[[f64; 3]], k: usize, max_dist: f64) -> Result<Neighbors> {
    if k == 0 {
        return Err(Error::InvalidConfig("knn with k = 0".into()));
    }
    if cands.is_empty() {
        return Err(Error::NoCandidates(0));
    }
    let max_d2 = max_dist * max_dist;
    let rows = par::map_range(centers.len(), |i| {
        let p = &centers[i];
        let all: Vec<(f64, usize)> = cands.iter().enumerate().map(|(j, c)| (dist2(p, c), j)).collect();
        select(all, k, max_d2, || nearest_any(p, cands))
    });
    Ok(Neighbors::from_rows(k, rows))
}

/// KNN restricted to candidates whose spherical cell lies inside the kernel
/// window around each center's cell. Azimuth wraps, elevation clamps.
/// Centers must carry coordinates in the candidates' grid units.
pub fn projection_aware_knn(centers: &PointCloud, cands: &PointCloud, spec: &GroupingSpec) -> Result<Neighbors> {
    spec.validate()?;
    let cs = centers.spherical.as_ref().ok_or(Error::MissingSpherical)?;
    let gs = cands.spherical.as_ref().ok_or(Error::MissingSpherical)?;
    if cands.is_empty() {
        return Err(Error::NoCandidates(0));
    }
    let (w, h) = (gs.width, gs.height);
    if cs.width != w || cs.height != h {
        return Err(Error::IndexMismatch(format!(
            "center grid {}x{} vs candidate grid {}x{}",
            cs.height, cs.width, h, w
        )));
    }
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); w * h];
    for (j, &[u, v]) in gs.coords.iter().enumerate() {
        if u >= w || v >= h {
            return Err(Error::IndexMismatch(format!("cell ({u},{v}) outside {h}x{w}")));
        }
        cells[v * w + u].push(j);
    }
    let (kh, kw) = spec.kernel;
    let cols_all = kw >= w;
    let max_d2 = spec.max_dist * spec.max_dist;
    let rows = par::map_range(centers.len(), |i| {
        let p = &centers.positions[i];
        let [u, v] = cs.coords[i];
        let v0 = v.saturating_sub(kh / 2);
        let v1 = (v + kh / 2).min(h - 1);
        let mut cand = Vec::new();
        for vv in v0..=v1 {
            if cols_all {
                for uu in 0..w {
                    cand.extend(cells[vv * w + uu].iter().map(|&j| (dist2(p, &cands.positions[j]), j)));
                }
            } else {
                for du in 0..kw {
                    let uu = (u + w + du - kw / 2) % w;
                    cand.extend(cells[vv * w + uu].iter().map(|&j| (dist2(p, &cands.positions[j]), j)));
                }
            }
        }
        select(cand, spec.k, max_d2, || nearest_any(p, &cands.positions))
    });
    Ok(Neighbors::from_rows(spec.k, rows))
}

/// Keeps points whose cell is a lattice multiple of the strides, first point
/// per cell wins. Returns the sampled cloud (coordinates divided by the
/// strides, one level up) and the kept indices into `cloud`.
pub fn stride_sample(cloud: &PointCloud, strides: (usize, usize)) -> Result<(PointCloud, Vec<usize>)> {
    let s = cloud.spherical.as_ref().ok_or(Error::MissingSpherical)?;
    let (sh, sw) = strides;
    if sh == 0 || sw == 0 {
        return Err(Error::InvalidConfig("zero stride".into()));
    }
    let mut seen = vec![false; s.width * s.height];
    let mut keep = Vec::new();
    for (i, &[u, v]) in s.coords.iter().enumerate() {
        if u % sw == 0 && v % sh == 0 && !seen[v * s.width + u] {
            seen[v * s.width + u] = true;
            keep.push(i);
        }
    }
    let mut out = cloud.subset(&keep);
    out.level = cloud.level + 1;
    out.spherical = Some(SphericalGrid {
        coords: keep.iter().map(|&i| [s.coords[i][0] / sw, s.coords[i][1] / sh]).collect(),
        width: s.width.div_ceil(sw),
        height: s.height.div_ceil(sh),
    });
    Ok((out, keep))
}

/// Converts grid coordinates into the units of a level sampled with
/// `strides` (rounding down), e.g. to query a coarser level from finer
/// centers.
pub fn coarsen_grid(grid: &SphericalGrid, strides: (usize, usize)) -> SphericalGrid {
    SphericalGrid {
        coords: grid.coords.iter().map(|&[u, v]| [u / strides.1, v / strides.0]).collect(),
        width: grid.width.div_ceil(strides.1),
        height: grid.height.div_ceil(strides.0),
    }
}

/// Farthest point sampling starting from a seeded random index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if m > cloud.len() || cloud.is_empty() {
        return Err(Error::TooFewPoints {
            requested: m,
            available: cloud.len(),
        });
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..cloud.len());
    farthest_point_sample_from(cloud, m, start)
}

/// Farthest point sampling from a fixed first index. Each pick maximizes the
/// distance to the chosen set, ties to the lower index.
pub fn farthest_point_sample_from(cloud: &PointCloud, m: usize, start: usize) -> Result<(PointCloud, Vec<usize>)> {
    let n = cloud.len();
    if m > n || start >= n {
        return Err(Error::TooFewPoints {
            requested: m,
            available: n,
        });
    }
    let mut picked = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        picked.push(cur);
        let pc = cloud.positions[cur];
        let mut next = (f64::NEG_INFINITY, 0);
        for (j, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(&pc, &cloud.positions[j]));
            if *b > next.0 {
                next = (*b, j);
            }
        }
        cur = next.1;
    }
    let mut out = cloud.subset(&picked);
    out.level = cloud.level + 1;
    Ok((out, picked))
}

/// Outcome of [`knn_exactness_benchmark`].
#[derive(Debug, Clone, PartialEq)]
pub struct KnnBenchReport {
    pub trials: usize,
    pub exact: usize,
    pub grid_secs: f64,
    pub brute_secs: f64,
}

impl KnnBenchReport {
    pub fn exactness(&self) -> f64 {
        self.exact as f64 / self.trials.max(1) as f64
    }
}

/// Random scanner-like clouds of `n` points: compares the windowed query
/// under a kernel that covers the whole grid with the exhaustive search.
/// The two must agree exactly.
pub fn knn_exactness_benchmark(n: usize, trials: usize, k: usize, seed: u64) -> Result<KnnBenchReport> {
    let cfg = SphericalConfig::new(16, 64, 15.0, 25.0)?;
    let spec = GroupingSpec {
        k,
        kernel: (2 * cfg.height + 1, 2 * cfg.width + 1),
        max_dist: f64::INFINITY,
        strides: (1, 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = KnnBenchReport {
        trials,
        exact: 0,
        grid_secs: 0.0,
        brute_secs: 0.0,
    };
    for _ in 0..trials {
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let r = rng.gen_range(2.0..30.0);
                let az: f64 = rng.gen_range(-3.0..3.0);
                let el: f64 = rng.gen_range(-0.4..0.25);
                // Camera axes: x right, y down, z forward.
                [-r * el.cos() * az.sin(), -r * el.sin(), r * el.cos() * az.cos()]
            })
            .collect();
        let cloud = PointCloud::new(positions, vec![], 0)?.with_spherical(&cfg)?;
        let centers: Vec<usize> = (0..n).step_by(4).collect();
        let sub = cloud.subset(&centers);
        let t = std::time::Instant::now();
        let a = projection_aware_knn(&sub, &cloud, &spec)?;
        rep.grid_secs += t.elapsed().as_secs_f64();
        let t = std::time::Instant::now();
        let b = brute_force_knn(&sub.positions, &cloud.positions, k, f64::INFINITY)?;
        rep.brute_secs += t.elapsed().as_secs_f64();
        rep.exact += usize::from(a == b);
    }
    Ok(rep)
}
