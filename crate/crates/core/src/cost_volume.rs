//! 2D-3D cost volume: soft point-to-pixel association followed by a local
//! embedding over neighboring points.
//!
//! Candidate pixels for each point are either every pixel of the image level
//! (all-to-all, which also adds the inverse similarity term) or the `k`
//! nearest pixels on the normalized image plane.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::config::{CostVolumeSpec, Mixture};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, SharedMlp};
use crate::par;
use crate::pyramids::{group_query, FeatureImage, PointLevel};
use crate::sampling::{GroupingSpec, Neighbors};

/// Floor of the per-vector standard deviation in the similarity.
pub const SIGMA_FLOOR: Real = 1e-8;
/// Added to the logits of invalid neighbor slots.
pub const MASK_PENALTY: Real = -1e9;

/// Per-point embedding vectors aligned to one point level.
#[derive(Clone)]
pub struct CostVolume<'g> {
    /// `[N, C]`.
    pub entries: Tensor<'g>,
    pub level: usize,
}

impl<'g> CostVolume<'g> {
    pub fn new(entries: Tensor<'g>, level: usize, points: usize) -> Result<Self> {
        let rows = entries.shape()[0];
        if rows != points {
            return Err(Error::IndexMismatch(format!("cost volume has {rows} rows for {points} points")));
        }
        Ok(Self { entries, level })
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standardizes each row of `x: [N, C]` over its channels with the
/// population standard deviation floored at [`SIGMA_FLOOR`].
pub fn standardize_rows<'g>(x: Tensor<'g>) -> Result<Tensor<'g>> {
    let s = x.shape();
    let (n, c) = (s[0], s[1] as Real);
    let mean = x.reduce_sum(1)?.scale(1.0 / c).reshape(&[n, 1])?;
    let centered = x.sub(mean)?;
    let sigma = centered.square()?.reduce_sum(1)?.scale(1.0 / c).sqrt().clamp_min(SIGMA_FLOOR);
    centered.div(sigma.reshape(&[n, 1])?)
}

/// Row-wise product of standardized point and pixel features.
pub fn point_pixel_similarity<'g>(f: Tensor<'g>, g: Tensor<'g>) -> Result<Tensor<'g>> {
    standardize_rows(f)?.mul(standardize_rows(g)?)
}

/// For every pixel, the channel-wise max over all points of the raw product
/// `f ⊙ g`. `points: [N, C]`, `pixels: [M, C]` → `[M, C]`.
pub fn inverse_similarity<'g>(mode: Mixture, points: Tensor<'g>, pixels: Tensor<'g>) -> Result<Tensor<'g>> {
    if mode != Mixture::AllToAll {
        return Err(Error::ModeMismatch);
    }
    let (ps, qs) = (points.shape(), pixels.shape());
    let (n, m, c) = (ps[0], qs[0], ps[1]);
    if n == 0 {
        return Err(Error::EmptyLevel(0));
    }
    let prod = points.reshape(&[n, 1, c])?.mul(pixels.reshape(&[1, m, c])?)?;
    prod.reduce_max(0)
}

/// Indices of the `k` pixels nearest to `p` on the normalized plane, ties to
/// the lower index.
pub fn knn_pixel_candidates(p: [f64; 2], plane: &[[f64; 2]], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = plane
        .iter()
        .enumerate()
        .map(|(j, q)| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2), j))
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, by);
        d.truncate(k);
    }
    d.sort_unstable_by(by);
    d.into_iter().map(|x| x.1).collect()
}

/// Candidate pixels of each point, `k` per point, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl Candidates {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

/// Builds the candidate sets. In KNN mode points at or behind `z_min` are
/// searched as if they sat at `z_min`.
pub fn candidate_sets(points: &[[f64; 3]], plane: &[[f64; 2]], mode: Mixture, z_min: f64) -> Result<Candidates> {
    let m = plane.len();
    if m == 0 {
        return Err(Error::NoCandidates(0));
    }
    match mode {
        Mixture::AllToAll => Ok(Candidates {
            k: m,
            idx: (0..points.len()).flat_map(|_| 0..m).collect(),
        }),
        Mixture::Knn(k) => {
            if k == 0 {
                return Err(Error::InvalidConfig("pixel knn with k = 0".into()));
            }
            if k > m {
                return Err(Error::TooFewPoints { requested: k, available: m });
            }
            let rows = par::map_range(points.len(), |i| {
                let p = points[i];
                let z = p[2].max(z_min);
                knn_pixel_candidates([p[0] / z, p[1] / z], plane, k)
            });
            Ok(Candidates {
                k,
                idx: rows.into_iter().flatten().collect(),
            })
        }
    }
}

/// `Σ_k h ⊙ softmax_k(logits)` for `[N*K, C]` inputs grouped by point.
pub fn salience_pool<'g>(h: Tensor<'g>, logits: Tensor<'g>, n: usize, k: usize) -> Result<Tensor<'g>> {
    let c = h.shape()[1];
    let w = logits.reshape(&[n, k, c])?.softmax(1)?;
    h.reshape(&[n, k, c])?.mul(w)?.reduce_sum(1)
}

/// Masked version of [`salience_pool`]: invalid slots get [`MASK_PENALTY`]
/// unless every slot of a row is invalid, in which case slot 0 is kept.
pub fn masked_salience_pool<'g>(h: Tensor<'g>, logits: Tensor<'g>, nb: &Neighbors) -> Result<Tensor<'g>> {
    let (n, k) = (nb.len(), nb.k);
    let mut mask = vec![0.0; n * k];
    for i in 0..n {
        let row = &nb.valid[i * k..(i + 1) * k];
        let any = row.iter().any(|&v| v);
        for (s, &v) in row.iter().enumerate() {
            if !v && (any || s > 0) {
                mask[i * k + s] = MASK_PENALTY;
            }
        }
    }
    let g = logits.graph();
    let logits = logits.add(g.constant(mask, &[n * k, 1])?)?;
    salience_pool(h, logits, n, k)
}

/// Soft point-to-pixel association producing one vector per point.
#[derive(Debug, Clone)]
pub struct IcGenerator {
    /// Maps point features to the pixel feature width when they differ.
    pub proj: Option<Linear>,
    pub h_mlp: SharedMlp,
    pub pos_fc: Linear,
    pub salience: SharedMlp,
    pub mode: Mixture,
    pub z_min: f64,
}

impl IcGenerator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        point_ch: usize,
        pixel_ch: usize,
        mode: Mixture,
        spec: &CostVolumeSpec,
        z_min: f64,
        slope: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let proj = if point_ch != pixel_ch {
            Some(Linear::new(store, &format!("{name}.proj"), point_ch, pixel_ch, slope, rng)?)
        } else {
            None
        };
        let inv = if mode == Mixture::AllToAll { pixel_ch } else { 0 };
        let h_mlp = SharedMlp::new(store, &format!("{name}.h"), pixel_ch + inv + 5, &spec.h_mlp, slope, rng)?;
        let pos_fc = Linear::new(store, &format!("{name}.pos"), 5, spec.pos_fc, slope, rng)?;
        let salience = SharedMlp::new(store, &format!("{name}.salience"), h_mlp.out_dim() + spec.pos_fc, &spec.salience_mlp, slope, rng)?;
        if salience.out_dim() != h_mlp.out_dim() {
            return Err(Error::InvalidConfig(format!(
                "salience width {} differs from candidate width {}",
                salience.out_dim(),
                h_mlp.out_dim()
            )));
        }
        Ok(Self {
            proj,
            h_mlp,
            pos_fc,
            salience,
            mode,
            z_min,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.h_mlp.out_dim()
    }

    /// Candidate features `h` and salience logits, both `[N*K, C]`.
    pub fn candidate_logits<'g>(&self, ctx: &Ctx<'g, '_>, points: &PointLevel<'g>, img: &FeatureImage<'g>) -> Result<(Tensor<'g>, Tensor<'g>, Candidates)> {
        let n = points.len();
        let m = img.height * img.width;
        let c = img.channels();
        let plane = img.normalized_coords();
        let cand = candidate_sets(&points.cloud.positions, &plane, self.mode, self.z_min)?;
        let pixels = img.features.reshape(&[m, c])?;
        let f = match &self.proj {
            Some(l) => l.forward(ctx, points.features)?,
            None => points.features,
        };
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(cand.k)).collect();
        let s = point_pixel_similarity(f.gather(&centers)?, pixels.gather(&cand.idx)?)?;
        let plane_flat: Vec<Real> = cand.idx.iter().flat_map(|&j| [plane[j][0] as Real, plane[j][1] as Real]).collect();
        let o = ctx.g.constant(plane_flat, &[n * cand.k, 2])?;
        let p = points.positions.gather(&centers)?;
        let mut parts = vec![s];
        if self.mode == Mixture::AllToAll {
            parts.push(inverse_similarity(self.mode, f, pixels)?.gather(&cand.idx)?);
        }
        parts.push(o);
        parts.push(p);
        let h = self.h_mlp.forward(ctx, Tensor::concat(&parts, 1)?)?;
        let r = self.pos_fc.forward(ctx, Tensor::concat(&[p, o], 1)?)?;
        let logits = self.salience.forward(ctx, Tensor::concat(&[h, r], 1)?)?;
        Ok((h, logits, cand))
    }

    /// `[N, C]` association vectors.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, points: &PointLevel<'g>, img: &FeatureImage<'g>) -> Result<Tensor<'g>> {
        let (h, logits, cand) = self.candidate_logits(ctx, points, img)?;
        salience_pool(h, logits, points.len(), cand.k)
    }
}

/// Local spatial embedding: each point aggregates its neighbors'
/// association vectors with learned weights.
#[derive(Debug, Clone)]
pub struct LstEmbedding {
    pub pos_fc: Linear,
    pub mlp: SharedMlp,
    pub spec: GroupingSpec,
}

impl LstEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, point_ch: usize, ic_ch: usize, spec: &CostVolumeSpec, slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        let grouping = GroupingSpec {
            k: spec.lst_k,
            kernel: spec.lst_kernel,
            max_dist: spec.lst_dist,
            strides: (1, 1),
        };
        grouping.validate()?;
        let pos_fc = Linear::new(store, &format!("{name}.pos"), 10, spec.lst_pos_fc, slope, rng)?;
        let mlp = SharedMlp::new(store, &format!("{name}.mlp"), point_ch + spec.lst_pos_fc + ic_ch, &spec.lst_mlp, slope, rng)?;
        if mlp.out_dim() != ic_ch {
            return Err(Error::InvalidConfig(format!(
                "embedding weight width {} differs from association width {ic_ch}",
                mlp.out_dim()
            )));
        }
        Ok(Self {
            pos_fc,
            mlp,
            spec: grouping,
        })
    }

    /// `ic: [N, C]` aligned to `points` → cost volume at `points.cloud.level`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, points: &PointLevel<'g>, ic: Tensor<'g>, fallback: bool) -> Result<CostVolume<'g>> {
        let nb = group_query(&points.cloud, &points.cloud, &self.spec, fallback)?;
        self.forward_with(ctx, points, ic, &nb)
    }

    pub fn forward_with<'g>(&self, ctx: &Ctx<'g, '_>, points: &PointLevel<'g>, ic: Tensor<'g>, nb: &Neighbors) -> Result<CostVolume<'g>> {
        let n = points.len();
        if ic.shape()[0] != n || nb.len() != n {
            return Err(Error::IndexMismatch(format!(
                "{} association rows, {} neighbor rows, {n} points",
                ic.shape()[0],
                nb.len()
            )));
        }
        let centers = nb.center_of_slot();
        let p = points.positions.gather(&centers)?;
        let pm = points.positions.gather(&nb.idx)?;
        let d = pm.sub(p)?;
        let dist = d.norm_l2(1)?.reshape(&[n * nb.k, 1])?;
        let b = self.pos_fc.forward(ctx, Tensor::concat(&[p, pm, d, dist], 1)?)?;
        let ic_m = ic.gather(&nb.idx)?;
        let logits = self.mlp.forward(ctx, Tensor::concat(&[points.features.gather(&centers)?, b, ic_m], 1)?)?;
        let e = masked_salience_pool(ic_m, logits, nb)?;
        CostVolume::new(e, points.cloud.level, n)
    }
}

/// Association followed by the local embedding.
#[derive(Debug, Clone)]
pub struct CostVolumeLayer {
    pub ic: IcGenerator,
    pub lst: LstEmbedding,
}

impl CostVolumeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        point_ch: usize,
        pixel_ch: usize,
        mode: Mixture,
        spec: &CostVolumeSpec,
        z_min: f64,
        slope: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let ic = IcGenerator::new(store, &format!("{name}.ic"), point_ch, pixel_ch, mode, spec, z_min, slope, rng)?;
        let lst = LstEmbedding::new(store, &format!("{name}.lst"), point_ch, ic.out_dim(), spec, slope, rng)?;
        Ok(Self { ic, lst })
    }

    pub fn out_dim(&self) -> usize {
        self.ic.out_dim()
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, points: &PointLevel<'g>, img: &FeatureImage<'g>, fallback: bool) -> Result<CostVolume<'g>> {
        let ic = self.ic.forward(ctx, points, img)?;
        self.lst.forward(ctx, points, ic, fallback)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::autodiff::gradcheck::{check_inputs, check_params};
    use crate::autodiff::Graph;
    use crate::config::NormMode;
    use crate::geometry::CameraIntrinsics;
    use crate::pyramids::pixel_centers;
    use crate::sampling::{PointCloud, SphericalGrid};

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn ctx<'g, 's>(g: &'g Graph, store: &'s ParamStore) -> Ctx<'g, 's> {
        Ctx::new(g, store, true, NormMode::Feature, 0.1, rng(0))
    }

    fn spec(lst_k: usize) -> CostVolumeSpec {
        CostVolumeSpec {
            h_mlp: vec![6, 5],
            salience_mlp: vec![5],
            pos_fc: 4,
            lst_k,
            lst_kernel: (3, 3),
            lst_dist: 50.0,
            lst_pos_fc: 3,
            lst_mlp: vec![5],
        }
    }

    struct Fixture {
        pos: Vec<[f64; 3]>,
        coords: Vec<[usize; 2]>,
        pf: Vec<Real>,
        img: Vec<Real>,
        h: usize,
        w: usize,
        pc: usize,
        ic: usize,
    }

    fn fixture(seed: u64, n: usize, h: usize, w: usize, pc: usize, ic: usize) -> Fixture {
        let mut r = rng(seed);
        Fixture {
            pos: (0..n)
                .map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-1.0..1.0), r.gen_range(4.0..9.0)])
                .collect(),
            coords: (0..n).map(|i| [i % 5, i / 5]).collect(),
            pf: (0..n * pc).map(|_| r.gen_range(-1.0..1.0)).collect(),
            img: (0..h * w * ic).map(|_| r.gen_range(-1.0..1.0)).collect(),
            h,
            w,
            pc,
            ic,
        }
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(4.0, 4.0, 1.5, 1.0).unwrap()
    }

    impl Fixture {
        fn level<'g>(&self, pos: Tensor<'g>, feats: Tensor<'g>) -> PointLevel<'g> {
            let mut cloud = PointCloud::new(self.pos.clone(), vec![0.0; self.pos.len()], 1).unwrap();
            cloud.spherical = Some(SphericalGrid {
                coords: self.coords.clone(),
                width: 5,
                height: self.pos.len().div_ceil(5),
            });
            cloud.level = 4;
            PointLevel {
                cloud,
                positions: pos,
                features: feats,
                parent: Vec::new(),
            }
        }

        fn image<'g>(&self, feats: Tensor<'g>, k: CameraIntrinsics, stride: usize) -> FeatureImage<'g> {
            FeatureImage {
                features: feats,
                pixel_coords: pixel_centers(self.h, self.w, (stride, stride)),
                height: self.h,
                width: self.w,
                level: 3,
                intrinsics: k,
            }
        }

        fn tensors<'g>(&self, g: &'g Graph) -> (Tensor<'g>, Tensor<'g>, Tensor<'g>) {
            let n = self.pos.len();
            (
                g.constant(self.pos.iter().flatten().map(|&x| x as Real).collect(), &[n, 3]).unwrap(),
                g.constant(self.pf.clone(), &[n, self.pc]).unwrap(),
                g.constant(self.img.clone(), &[self.h, self.w, self.ic]).unwrap(),
            )
        }
    }

    #[test]
    fn similarity_examples() {
        let g = Graph::new();
        let f = g.constant(vec![1.0, 2.0, 4.0, -3.0], &[1, 4]).unwrap();
        let s = point_pixel_similarity(f, f).unwrap().value();
        assert!(s.iter().all(|&x| x >= 0.0));
        assert!((s.iter().sum::<Real>() - 4.0).abs() < 1e-12);
        let c = g.constant(vec![2.0; 4], &[1, 4]).unwrap();
        assert!(point_pixel_similarity(c, f).unwrap().value().iter().all(|&x| x == 0.0));
        let h = g.constant(vec![0.5, -1.0, 3.0, 0.0], &[1, 4]).unwrap();
        assert_eq!(point_pixel_similarity(f, h).unwrap().value(), point_pixel_similarity(h, f).unwrap().value());
    }

    #[test]
    fn inverse_similarity_examples() {
        let g = Graph::new();
        let f = g.constant(vec![1.0, -2.0], &[1, 2]).unwrap();
        let px = g.constant(vec![3.0, 1.0, -1.0, 0.5], &[2, 2]).unwrap();
        assert_eq!(inverse_similarity(Mixture::AllToAll, f, px).unwrap().value(), vec![3.0, -2.0, -1.0, -1.0]);
        assert!(matches!(inverse_similarity(Mixture::Knn(2), f, px), Err(Error::ModeMismatch)));

        let mut r = rng(1);
        let vals: Vec<Real> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let pts = g.constant(vals.clone(), &[4, 3]).unwrap();
        let dup = g.constant([vals.clone(), vals].concat(), &[8, 3]).unwrap();
        let pix = g.constant((0..9).map(|i| i as Real - 4.0).collect(), &[3, 3]).unwrap();
        assert_eq!(
            inverse_similarity(Mixture::AllToAll, pts, pix).unwrap().value(),
            inverse_similarity(Mixture::AllToAll, dup, pix).unwrap().value()
        );
    }

    fn brute(p: [f64; 2], plane: &[[f64; 2]], k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..plane.len()).collect();
        let d = |j: usize| (plane[j][0] - p[0]).powi(2) + (plane[j][1] - p[1]).powi(2);
        all.sort_by(|&a, &b| d(a).partial_cmp(&d(b)).unwrap().then(a.cmp(&b)));
        all.truncate(k);
        all
    }

    #[test]
    fn pixel_knn_matches_exhaustive_scan() {
        let mut r = rng(2);
        for _ in 0..100 {
            let (h, w) = (r.gen_range(1..8), r.gen_range(1..12));
            let kk = CameraIntrinsics::new(r.gen_range(5.0..50.0), r.gen_range(5.0..50.0), r.gen_range(0.0..10.0), r.gen_range(0.0..5.0)).unwrap();
            let plane: Vec<[f64; 2]> = pixel_centers(h, w, (2, 2)).iter().map(|c| kk.inverse_project(c[0], c[1])).collect();
            let p = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let k = r.gen_range(1..=plane.len());
            assert_eq!(knn_pixel_candidates(p, &plane, k), brute(p, &plane, k));
        }
        let plane = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]];
        assert_eq!(knn_pixel_candidates([1.0, 0.0], &plane, 1), vec![1]);
        assert_eq!(knn_pixel_candidates([0.5, 0.0], &plane, 3), vec![0, 1, 2]);
    }

    #[test]
    fn candidate_sets_and_modes() {
        let plane: Vec<[f64; 2]> = (0..6).map(|j| [j as f64 * 0.1, 0.0]).collect();
        let pts = [[0.3, 0.0, 1.0], [0.0, 0.0, -2.0]];
        let all = candidate_sets(&pts, &plane, Mixture::AllToAll, 0.1).unwrap();
        let knn = candidate_sets(&pts, &plane, Mixture::Knn(6), 0.1).unwrap();
        for i in 0..2 {
            let mut a = all.row(i).to_vec();
            let mut b = knn.row(i).to_vec();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
        // Behind the camera: searched at z_min, i.e. (0, 0).
        assert_eq!(candidate_sets(&pts, &plane, Mixture::Knn(1), 0.1).unwrap().row(1), &[0]);
        assert!(matches!(candidate_sets(&pts, &plane, Mixture::Knn(7), 0.1), Err(Error::TooFewPoints { .. })));
        assert!(matches!(candidate_sets(&pts, &[], Mixture::AllToAll, 0.1), Err(Error::NoCandidates(_))));
    }

    #[test]
    fn salience_weights_and_shift_invariance() {
        let g = Graph::new();
        let mut r = rng(3);
        let (n, k, c) = (3, 4, 2);
        let hv: Vec<Real> = (0..n * k * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let lv: Vec<Real> = (0..n * k * c).map(|_| r.gen_range(-3.0..3.0)).collect();
        let h = g.constant(hv.clone(), &[n * k, c]).unwrap();
        let l = g.constant(lv.clone(), &[n * k, c]).unwrap();
        let w = l.reshape(&[n, k, c]).unwrap().softmax(1).unwrap().reduce_sum(1).unwrap().value();
        assert!(w.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let a = salience_pool(h, l, n, k).unwrap().value();
        let shifted: Vec<Real> = lv.iter().enumerate().map(|(i, x)| x + 7.5 * ((i / (k * c)) as Real + 1.0)).collect();
        let b = salience_pool(h, g.constant(shifted, &[n * k, c]).unwrap(), n, k).unwrap().value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // One candidate: the pooled vector is the candidate itself.
        let one = salience_pool(h.slice(0, 0, 1).unwrap(), l.slice(0, 0, 1).unwrap(), 1, 1).unwrap().value();
        assert_eq!(one, hv[..c].to_vec());
    }

    #[test]
    fn masked_pool_ignores_invalid_slots() {
        let g = Graph::new();
        let h = g.constant(vec![1.0, 2.0, 100.0, 3.0, 4.0, 5.0], &[3, 2]).unwrap();
        let l = g.constant(vec![0.0, 0.0, 50.0, 50.0, 0.0, 0.0], &[3, 2]).unwrap();
        let nb = Neighbors {
            k: 3,
            idx: vec![0, 1, 2],
            valid: vec![true, false, true],
        };
        let out = masked_salience_pool(h, l, &nb).unwrap().value();
        assert!((out[0] - 2.5).abs() < 1e-12 && (out[1] - 3.5).abs() < 1e-12, "{out:?}");
        let none = Neighbors {
            k: 3,
            idx: vec![0, 0, 0],
            valid: vec![false; 3],
        };
        assert_eq!(masked_salience_pool(h, l, &none).unwrap().value(), vec![1.0, 2.0]);
    }

    fn layer(store: &mut ParamStore, fx: &Fixture, mode: Mixture, lst_k: usize, seed: u64) -> CostVolumeLayer {
        CostVolumeLayer::new(store, "cv", fx.pc, fx.ic, mode, &spec(lst_k), 0.1, 0.1, &mut rng(seed)).unwrap()
    }

    #[test]
    fn pixel_order_does_not_matter() {
        let fx = fixture(4, 7, 3, 4, 3, 4);
        let mut store = ParamStore::new();
        let cv = layer(&mut store, &fx, Mixture::AllToAll, 3, 5);
        let g = Graph::new();
        let c = ctx(&g, &store);
        let (p, f, im) = fx.tensors(&g);
        let lvl = fx.level(p, f);
        let a = cv.forward(&c, &lvl, &fx.image(im, k(), 1), false).unwrap().entries.value();
        // Reverse the pixel enumeration: a 1-row image with reversed columns.
        let m = fx.h * fx.w;
        let centers = pixel_centers(fx.h, fx.w, (1, 1));
        let perm: Vec<usize> = (0..m).rev().collect();
        let feats: Vec<Real> = perm.iter().flat_map(|&j| fx.img[j * fx.ic..(j + 1) * fx.ic].to_vec()).collect();
        let img = FeatureImage {
            features: g.constant(feats, &[1, m, fx.ic]).unwrap(),
            pixel_coords: perm.iter().map(|&j| centers[j]).collect(),
            height: 1,
            width: m,
            level: 3,
            intrinsics: k(),
        };
        let b = cv.forward(&c, &lvl, &img, false).unwrap().entries.value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn intrinsics_only_enter_through_the_plane() {
        let fx = fixture(6, 6, 3, 4, 4, 4);
        let mut store = ParamStore::new();
        let cv = layer(&mut store, &fx, Mixture::Knn(5), 2, 7);
        let g = Graph::new();
        let c = ctx(&g, &store);
        let (p, f, im) = fx.tensors(&g);
        let lvl = fx.level(p, f);
        let a_img = fx.image(im, k(), 1);
        // Twice the focal length with pixel coordinates scaled to match gives
        // the same normalized grid.
        let k2 = CameraIntrinsics::new(8.0, 8.0, 3.0, 2.0).unwrap();
        let mut b_img = fx.image(im, k2, 1);
        b_img.pixel_coords.iter_mut().for_each(|c| *c = [c[0] * 2.0, c[1] * 2.0]);
        for (x, y) in a_img.normalized_coords().iter().zip(b_img.normalized_coords()) {
            assert!((x[0] - y[0]).abs() < 1e-15 && (x[1] - y[1]).abs() < 1e-15);
        }
        let a = cv.forward(&c, &lvl, &a_img, false).unwrap().entries.value();
        let b = cv.forward(&c, &lvl, &b_img, false).unwrap().entries.value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn self_neighbor_embedding_is_identity() {
        let fx = fixture(8, 5, 2, 3, 3, 3);
        let mut store = ParamStore::new();
        let cv = layer(&mut store, &fx, Mixture::AllToAll, 1, 9);
        let g = Graph::new();
        let c = ctx(&g, &store);
        let (p, f, _) = fx.tensors(&g);
        let lvl = fx.level(p, f);
        let ic = g.constant((0..25).map(|i| i as Real * 0.1).collect(), &[5, 5]).unwrap();
        let e = cv.lst.forward(&c, &lvl, ic, false).unwrap();
        assert_eq!(e.entries.value(), ic.value());
        assert_eq!(e.level, 4);
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let fx = fixture(10, 8, 2, 3, 3, 3);
        let mut store = ParamStore::new();
        let cv = layer(&mut store, &fx, Mixture::AllToAll, 4, 11);
        let g = Graph::new();
        let c = ctx(&g, &store);
        let (p, f, _) = fx.tensors(&g);
        let lvl = fx.level(p, f);
        let ic = g.constant((0..40).map(|i| (i as Real * 0.37).cos()).collect(), &[8, 5]).unwrap();
        let nb = group_query(&lvl.cloud, &lvl.cloud, &cv.lst.spec, false).unwrap();
        let mut rev = nb.clone();
        for i in 0..nb.len() {
            rev.idx[i * 4..(i + 1) * 4].reverse();
            rev.valid[i * 4..(i + 1) * 4].reverse();
        }
        let a = cv.lst.forward_with(&c, &lvl, ic, &nb).unwrap().entries.value();
        let b = cv.lst.forward_with(&c, &lvl, ic, &rev).unwrap().entries.value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fx = fixture(12, 10, 3, 4, 3, 4);
        for mode in [Mixture::AllToAll, Mixture::Knn(5)] {
            let mut store = ParamStore::new();
            let cv = layer(&mut store, &fx, mode, 3, 13);
            let weights: Vec<Real> = (0..50).map(|i| ((i * 7) % 11) as Real - 5.0).collect();
            fn run<'g>(cv: &CostVolumeLayer, fx: &Fixture, w: &[Real], g: &'g Graph, store: &ParamStore, x: &[Tensor<'g>]) -> Result<Tensor<'g>> {
                let c = ctx(g, store);
                let lvl = fx.level(x[0], x[1]);
                let e = cv.forward(&c, &lvl, &fx.image(x[2], k(), 1), false)?.entries;
                e.mul(g.constant(w.to_vec(), &[10, 5])?)?.sum_all()
            }
            let inputs = [
                (fx.pos.iter().flatten().map(|&x| x as Real).collect(), vec![10, 3]),
                (fx.pf.clone(), vec![10, 3]),
                (fx.img.clone(), vec![3, 4, 4]),
            ];
            let rep = check_inputs(&inputs, 1e-6, 400, |g, x| run(&cv, &fx, &weights, g, &store, x)).unwrap();
            assert!(rep.rel_err < 1e-4, "{mode:?} inputs {rep:?}");
            let rep = check_params(&store, 1e-6, 400, |g, s| {
                let x: Vec<Tensor<'_>> = inputs.iter().map(|(v, sh)| g.constant(v.clone(), sh).unwrap()).collect();
                run(&cv, &fx, &weights, g, s, &x)
            })
            .unwrap();
            assert!(rep.rel_err < 1e-4, "{mode:?} params {rep:?}");
        }
    }
}
