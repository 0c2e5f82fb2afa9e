//! Feature pyramids: three conv layers over the image, four set-abstraction
//! layers over the point cloud, plus the two operators that reuse set
//! abstraction on cost volumes (context gathering and upsampling).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::config::{ImageLayerSpec, PointLayerSpec, UpsampleSpec};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::nn::{ConvBlock, Ctx, Linear, SharedMlp};
use crate::sampling::{
    brute_force_knn, coarsen_grid, farthest_point_sample, projection_aware_knn, stride_sample, GroupingSpec, Neighbors,
    PointCloud,
};

/// Dense feature grid of one image level.
#[derive(Clone)]
pub struct FeatureImage<'g> {
    /// `[height, width, channels]`.
    pub features: Tensor<'g>,
    /// Cell centers in original-image pixel units, row-major `(u, v)`.
    pub pixel_coords: Vec<[f64; 2]>,
    pub height: usize,
    pub width: usize,
    pub level: usize,
    pub intrinsics: CameraIntrinsics,
}

impl FeatureImage<'_> {
    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    /// Cell centers inverse-projected onto the normalized plane.
    pub fn normalized_coords(&self) -> Vec<[f64; 2]> {
        self.pixel_coords
            .iter()
            .map(|&[u, v]| self.intrinsics.inverse_project(u, v))
            .collect()
    }
}

/// Centers of the `stride`-sized receptive cells of an `h × w` grid.
pub fn pixel_centers(h: usize, w: usize, stride: (usize, usize)) -> Vec<[f64; 2]> {
    let (sh, sw) = (stride.0 as f64, stride.1 as f64);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push([j as f64 * sw + (sw - 1.0) / 2.0, i as f64 * sh + (sh - 1.0) / 2.0]);
        }
    }
    out
}

/// Three layers of five conv blocks; the first block of each layer pools by
/// the layer stride.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub layers: Vec<Vec<ConvBlock>>,
    pub strides: Vec<(usize, usize)>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, specs: &[ImageLayerSpec], slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = in_ch;
        for (l, spec) in specs.iter().enumerate() {
            let mut blocks = Vec::new();
            for (b, &out) in spec.channels.iter().enumerate() {
                let stride = if b == 0 { spec.stride } else { (1, 1) };
                blocks.push(ConvBlock::new(store, &format!("{name}.l{}.b{b}", l + 1), c, out, stride, slope, rng)?);
                c = out;
            }
            layers.push(blocks);
        }
        Ok(Self {
            layers,
            strides: specs.iter().map(|s| s.stride).collect(),
        })
    }

    /// `img: [H, W, in_ch]` → one [`FeatureImage`] per layer.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, img: Tensor<'g>, k: CameraIntrinsics) -> Result<Vec<FeatureImage<'g>>> {
        let mut x = img;
        let mut cum = (1, 1);
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, blocks) in self.layers.iter().enumerate() {
            for b in blocks {
                x = b.forward(ctx, x)?;
            }
            cum = (cum.0 * self.strides[l].0, cum.1 * self.strides[l].1);
            let s = x.shape();
            if s[0] == 0 || s[1] == 0 {
                return Err(Error::InvalidConfig(format!("image too small for level {}", l + 1)));
            }
            out.push(FeatureImage {
                features: x,
                pixel_coords: pixel_centers(s[0], s[1], cum),
                height: s[0],
                width: s[1],
                level: l + 1,
                intrinsics: k,
            });
        }
        Ok(out)
    }
}

/// One level of the point pyramid.
#[derive(Clone)]
pub struct PointLevel<'g> {
    /// Positions and grid coordinates (features unused).
    pub cloud: PointCloud,
    /// `[N, 3]`, differentiable when the level-0 positions are.
    pub positions: Tensor<'g>,
    /// `[N, C]`.
    pub features: Tensor<'g>,
    /// Indices of this level's points in the previous level.
    pub parent: Vec<usize>,
}

impl PointLevel<'_> {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Image and point levels of one input pair.
#[derive(Clone)]
pub struct PyramidBundle<'g> {
    /// Levels 1..=3.
    pub image_levels: Vec<FeatureImage<'g>>,
    /// Levels 0..=4.
    pub point_levels: Vec<PointLevel<'g>>,
}

/// Neighbor query: projection-aware when both clouds have grid coordinates
/// and `fallback` is off, exhaustive otherwise.
pub fn group_query(centers: &PointCloud, cands: &PointCloud, spec: &GroupingSpec, fallback: bool) -> Result<Neighbors> {
    if fallback || centers.spherical.is_none() || cands.spherical.is_none() {
        spec.validate()?;
        brute_force_knn(&centers.positions, &cands.positions, spec.k, spec.max_dist)
    } else {
        projection_aware_knn(centers, cands, spec)
    }
}

/// `MaxPool_k(MLP(feature ⊕ (p_neighbor − p_center)))` per center.
pub fn group_pool<'g>(
    ctx: &Ctx<'g, '_>,
    mlp: &SharedMlp,
    center_pos: Tensor<'g>,
    cand_pos: Tensor<'g>,
    cand_feats: Tensor<'g>,
    nb: &Neighbors,
) -> Result<Tensor<'g>> {
    let n = nb.len();
    let feats = cand_feats.gather(&nb.idx)?;
    let offsets = cand_pos.gather(&nb.idx)?.sub(center_pos.gather(&nb.center_of_slot())?)?;
    let x = Tensor::concat(&[feats, offsets], 1)?;
    let y = mlp.forward(ctx, x)?;
    y.reshape(&[n, nb.k, mlp.out_dim()])?.reduce_max(1)
}

/// One set-abstraction layer.
#[derive(Debug, Clone)]
pub struct SetAbstraction {
    pub mlp: SharedMlp,
    pub spec: GroupingSpec,
}

impl SetAbstraction {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, spec: &PointLayerSpec, slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.grouping.validate()?;
        Ok(Self {
            mlp: SharedMlp::new(store, name, in_ch + 3, &spec.mlp, slope, rng)?,
            spec: spec.grouping.clone(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Samples the next level from `prev` and pools its neighborhoods.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, prev: &PointLevel<'g>, level: usize, fallback: bool, seed: u64) -> Result<PointLevel<'g>> {
        let (next, keep, nb) = if fallback || prev.cloud.spherical.is_none() {
            let (sh, sw) = self.spec.strides;
            let m = prev.len().div_ceil(sh * sw);
            if m == 0 {
                return Err(Error::EmptyLevel(level));
            }
            let (next, keep) = farthest_point_sample(&prev.cloud, m, seed.wrapping_add(level as u64))?;
            let nb = brute_force_knn(&next.positions, &prev.cloud.positions, self.spec.k, self.spec.max_dist)?;
            (next, keep, nb)
        } else {
            let (next, keep) = stride_sample(&prev.cloud, self.spec.strides)?;
            if next.is_empty() {
                return Err(Error::EmptyLevel(level));
            }
            // Centers keep the previous level's grid units for the window.
            let centers = prev.cloud.subset(&keep);
            let nb = projection_aware_knn(&centers, &prev.cloud, &self.spec)?;
            (next, keep, nb)
        };
        let positions = prev.positions.gather(&keep)?;
        let features = group_pool(ctx, &self.mlp, positions, prev.positions, prev.features, &nb)?;
        let mut cloud = next;
        cloud.level = level;
        Ok(PointLevel {
            cloud,
            positions,
            features,
            parent: keep,
        })
    }
}

/// Builds levels 1..=4 on top of `level0`.
pub fn point_pyramid<'g>(ctx: &Ctx<'g, '_>, level0: PointLevel<'g>, layers: &[SetAbstraction], fallback: bool, seed: u64) -> Result<Vec<PointLevel<'g>>> {
    if level0.is_empty() {
        return Err(Error::EmptyLevel(0));
    }
    let mut levels = vec![level0];
    for (l, sa) in layers.iter().enumerate() {
        let next = sa.forward(ctx, &levels[l], l + 1, fallback, seed)?;
        levels.push(next);
    }
    Ok(levels)
}

/// Set abstraction applied to cost volumes on the level-4 points, with the
/// level-4 points as their own centers.
#[derive(Debug, Clone)]
pub struct ContextGather {
    pub mlp: SharedMlp,
    pub spec: GroupingSpec,
}

impl ContextGather {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, spec: &PointLayerSpec, slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.grouping.validate()?;
        Ok(Self {
            mlp: SharedMlp::new(store, name, in_ch + 3, &spec.mlp, slope, rng)?,
            spec: spec.grouping.clone(),
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, cv: Tensor<'g>, level4: &PointLevel<'g>, fallback: bool) -> Result<Tensor<'g>> {
        let rows = cv.shape()[0];
        if rows != level4.len() {
            return Err(Error::IndexMismatch(format!(
                "cost volume has {rows} rows, level 4 has {} points",
                level4.len()
            )));
        }
        let nb = group_query(&level4.cloud, &level4.cloud, &self.spec, fallback)?;
        group_pool(ctx, &self.mlp, level4.positions, level4.positions, cv, &nb)
    }
}

/// Carries per-point vectors from level 4 to level 3:
/// `FC(f³ ⊕ MaxPool(MLP(x⁴_k ⊕ (p⁴_k − p³))))`.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub mlp: SharedMlp,
    pub fc: Linear,
    pub spec: GroupingSpec,
}

impl Upsample {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        coarse_ch: usize,
        fine_ch: usize,
        spec: &UpsampleSpec,
        slope: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mlp = SharedMlp::new(store, &format!("{name}.mlp"), coarse_ch + 3, &spec.mlp, slope, rng)?;
        let fc = Linear::new(store, &format!("{name}.fc"), fine_ch + mlp.out_dim(), spec.fc, slope, rng)?;
        let spec = GroupingSpec {
            k: spec.k,
            kernel: spec.kernel,
            max_dist: spec.max_dist,
            strides: (1, 1),
        };
        spec.validate()?;
        Ok(Self { mlp, fc, spec })
    }

    /// `coarse_strides` are the sampling strides between the two levels;
    /// fine grid coordinates are divided by them to query the coarse grid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        coarse_feats: Tensor<'g>,
        coarse: &PointLevel<'g>,
        fine: &PointLevel<'g>,
        fine_feats: Tensor<'g>,
        coarse_strides: (usize, usize),
        fallback: bool,
    ) -> Result<Tensor<'g>> {
        if coarse.is_empty() {
            return Err(Error::EmptyLevel(4));
        }
        let mut centers = fine.cloud.clone();
        centers.spherical = centers.spherical.as_ref().map(|g| coarsen_grid(g, coarse_strides));
        let nb = group_query(&centers, &coarse.cloud, &self.spec, fallback)?;
        let pooled = group_pool(ctx, &self.mlp, fine.positions, coarse.positions, coarse_feats, &nb)?;
        self.fc.forward(ctx, Tensor::concat(&[fine_feats, pooled], 1)?)
    }
}
