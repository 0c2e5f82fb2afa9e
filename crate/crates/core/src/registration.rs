//! The two-stage registration network.
//!
//! Coarse stage: level-4 points are associated with the level-3 image
//! through a cost volume, the result is spread over neighboring points,
//! weighted by a learned outlier mask and regressed to a pose. Fine stage:
//! level-3 points are warped by the coarse pose, associated again with KNN
//! pixel candidates, fused with the upsampled coarse embedding and mask, and
//! a residual pose is regressed and composed on the left.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::config::{Mixture, ModelConfig};
use crate::cost_volume::{CostVolume, CostVolumeLayer};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseQT, Quaternion, Vec3};
use crate::nn::{kaiming_bound, Ctx, Linear, SharedMlp};
use crate::pyramids::{point_pyramid, ContextGather, ImageEncoder, PointLevel, PyramidBundle, SetAbstraction, Upsample};
use crate::sampling::PointCloud;

/// Per-point mask logits; softmax over points gives the aggregation weights.
#[derive(Clone)]
pub struct OutlierMask<'g> {
    /// `[N, C]`.
    pub logits: Tensor<'g>,
    pub level: usize,
}

/// Pose of one stage, both as graph tensors and as plain values.
#[derive(Clone)]
pub struct StageOutput<'g> {
    /// `[4]`, unit norm and sign-canonical.
    pub q: Tensor<'g>,
    /// `[3]`.
    pub t: Tensor<'g>,
    pub pose: PoseQT,
    pub cost_volume: CostVolume<'g>,
    pub mask: OutlierMask<'g>,
}

/// One image/cloud pair as the model consumes it.
#[derive(Clone, Copy)]
pub struct ModelInput<'a> {
    /// Row-major `[height, width, 3]`.
    pub image: &'a [Real],
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
    /// Level-0 points with grid coordinates and initial features.
    pub cloud: &'a PointCloud,
}

/// `Σ_i e_i ⊙ softmax_i(m_i)` over the point axis: `[N, C]`, `[N, C]` → `[C]`.
pub fn masked_aggregate<'g>(e: Tensor<'g>, mask: Tensor<'g>) -> Result<Tensor<'g>> {
    if e.shape() != mask.shape() {
        return Err(crate::error::shape_err("masked_aggregate", &e.shape(), &mask.shape()));
    }
    e.mul(mask.softmax(0)?)?.reduce_sum(0)
}

/// Divides by the norm and flips the sign so the quaternion is canonical.
pub fn normalize_quaternion<'g>(q: Tensor<'g>) -> Result<Tensor<'g>> {
    let v = q.value();
    let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !(n >= 1e-12) {
        return Err(Error::DegenerateQuaternion(n));
    }
    let first = v.iter().copied().find(|x| *x != 0.0).unwrap_or(1.0);
    let sign = if first < 0.0 { -1.0 } else { 1.0 };
    Ok(q.div(q.norm_l2(0)?)?.scale(sign))
}

/// Composes a residual onto a coarse pose:
/// `q = Δq ⊗ q_c`, `t = Δq t_c Δq⁻¹ + Δt`.
pub fn compose_refinement<'g>(dq: Tensor<'g>, dt: Tensor<'g>, q: Tensor<'g>, t: Tensor<'g>) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let q3 = normalize_quaternion(dq.quat_mul(q)?)?;
    let t3 = t.reshape(&[1, 3])?.rigid_apply(dq, dt)?.reshape(&[3])?;
    Ok((q3, t3))
}

pub fn pose_of(q: Tensor<'_>, t: Tensor<'_>) -> Result<PoseQT> {
    let (q, t) = (q.value(), t.value());
    PoseQT::new(
        Quaternion::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64),
        Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64),
    )
}

/// Middle FC with dropout, then quaternion and translation heads.
#[derive(Debug, Clone)]
pub struct PoseHead {
    pub mid: Linear,
    pub q: Linear,
    pub t: Linear,
}

impl PoseHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, mid: usize, init_scale: Real, slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mid_fc = Linear::new(store, &format!("{name}.mid"), in_dim, mid, slope, rng)?;
        let bound = kaiming_bound(mid, slope) * init_scale;
        let q = Linear::with_scale(store, &format!("{name}.q"), mid, 4, bound, rng)?;
        let t = Linear::with_scale(store, &format!("{name}.t"), mid, 3, bound, rng)?;
        // Start near the identity rotation.
        store.get_mut(q.b).value = vec![1.0, 0.0, 0.0, 0.0];
        Ok(Self { mid: mid_fc, q, t })
    }

    /// Global embedding `[C]` → normalized `q: [4]` and `t: [3]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, emb: Tensor<'g>) -> Result<(Tensor<'g>, Tensor<'g>)> {
        let c = emb.numel();
        let h = ctx.dropout(self.mid.forward(ctx, emb.reshape(&[1, c])?)?);
        let q = normalize_quaternion(self.q.forward(ctx, h)?.reshape(&[4])?)?;
        let t = self.t.forward(ctx, h)?.reshape(&[3])?;
        Ok((q, t))
    }
}

/// `[N, C]` embeddings and mask logits → pose tensors.
pub fn regress_pose<'g>(ctx: &Ctx<'g, '_>, head: &PoseHead, e: Tensor<'g>, mask: Tensor<'g>) -> Result<(Tensor<'g>, Tensor<'g>)> {
    head.forward(ctx, masked_aggregate(e, mask)?)
}

/// Every learned block of the network.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub points: Vec<SetAbstraction>,
    pub coarse_cv: CostVolumeLayer,
    pub context: ContextGather,
    pub coarse_mask: SharedMlp,
    pub coarse_head: PoseHead,
    pub fine_cv: CostVolumeLayer,
    pub up_embed: Upsample,
    pub up_mask: Upsample,
    pub opt: SharedMlp,
    pub fine_mask: SharedMlp,
    pub fine_head: PoseHead,
}

impl Model {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let s = cfg.leaky_slope;
        let image = ImageEncoder::new(store, "img", 3, &cfg.image_layers, s, r)?;
        let img_ch = *cfg.image_layers[2].channels.last().expect("validated");
        let mut points = Vec::new();
        let mut ch = cfg.point_in_ch;
        let mut widths = vec![ch];
        for (l, spec) in cfg.point_layers.iter().enumerate() {
            let sa = SetAbstraction::new(store, &format!("pts.l{}", l + 1), ch, spec, s, r)?;
            ch = sa.out_dim();
            widths.push(ch);
            points.push(sa);
        }
        let (f3, f4) = (widths[3], widths[4]);
        let coarse_cv = CostVolumeLayer::new(store, "coarse.cv", f4, img_ch, cfg.coarse_mixture, &cfg.cost_volume, cfg.z_min, s, r)?;
        let context = ContextGather::new(store, "coarse.context", coarse_cv.out_dim(), &cfg.context, s, r)?;
        let e4 = context.mlp.out_dim();
        let coarse_mask = SharedMlp::new(store, "coarse.mask", e4 + f4, &cfg.mask_mlp, s, r)?;
        let coarse_head = PoseHead::new(store, "coarse.head", e4, cfg.mid_fc, cfg.head_init_scale, s, r)?;
        let fine_cv = CostVolumeLayer::new(store, "fine.cv", f3, img_ch, Mixture::Knn(cfg.fine_knn), &cfg.cost_volume, cfg.z_min, s, r)?;
        let up_embed = Upsample::new(store, "fine.up_embed", e4, f3, &cfg.upsample, s, r)?;
        let up_mask = Upsample::new(store, "fine.up_mask", coarse_mask.out_dim(), f3, &cfg.upsample, s, r)?;
        let opt = SharedMlp::new(store, "fine.opt", fine_cv.out_dim() + cfg.upsample.fc + f3, &cfg.opt_mlp, s, r)?;
        let fine_mask = SharedMlp::new(store, "fine.mask", opt.out_dim() + cfg.upsample.fc + f3, &cfg.mask_mlp, s, r)?;
        let fine_head = PoseHead::new(store, "fine.head", opt.out_dim(), cfg.mid_fc, cfg.head_init_scale, s, r)?;
        Ok(Self {
            cfg: cfg.clone(),
            image,
            points,
            coarse_cv,
            context,
            coarse_mask,
            coarse_head,
            fine_cv,
            up_embed,
            up_mask,
            opt,
            fine_mask,
            fine_head,
        })
    }

    /// Image and point pyramids. `positions: [N, 3]` and `features: [N, C₀]`
    /// are the level-0 tensors aligned to `cloud`.
    pub fn pyramids<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        image: Tensor<'g>,
        k: CameraIntrinsics,
        cloud: &PointCloud,
        positions: Tensor<'g>,
        features: Tensor<'g>,
    ) -> Result<PyramidBundle<'g>> {
        if cloud.channels != self.cfg.point_in_ch {
            return Err(Error::InvalidConfig(format!(
                "cloud has {} feature channels, model expects {}",
                cloud.channels, self.cfg.point_in_ch
            )));
        }
        let image_levels = self.image.forward(ctx, image, k)?;
        let level0 = PointLevel {
            cloud: cloud.clone(),
            positions,
            features,
            parent: Vec::new(),
        };
        let point_levels = point_pyramid(ctx, level0, &self.points, self.cfg.fallback, 0)?;
        Ok(PyramidBundle { image_levels, point_levels })
    }

    pub fn predict_outlier_mask_coarse<'g>(&self, ctx: &Ctx<'g, '_>, e4: Tensor<'g>, f4: Tensor<'g>) -> Result<OutlierMask<'g>> {
        Ok(OutlierMask {
            logits: self.coarse_mask.forward(ctx, Tensor::concat(&[e4, f4], 1)?)?,
            level: 4,
        })
    }

    pub fn run_coarse<'g>(&self, ctx: &Ctx<'g, '_>, b: &PyramidBundle<'g>) -> Result<StageOutput<'g>> {
        let l4 = &b.point_levels[4];
        let cv = self.coarse_cv.forward(ctx, l4, &b.image_levels[2], self.cfg.fallback)?;
        let e4 = self.context.forward(ctx, cv.entries, l4, self.cfg.fallback)?;
        let mask = self.predict_outlier_mask_coarse(ctx, e4, l4.features)?;
        let (q, t) = regress_pose(ctx, &self.coarse_head, e4, mask.logits)?;
        Ok(StageOutput {
            pose: pose_of(q, t)?,
            q,
            t,
            cost_volume: CostVolume::new(e4, 4, l4.len())?,
            mask,
        })
    }

    pub fn run_fine<'g>(&self, ctx: &Ctx<'g, '_>, b: &PyramidBundle<'g>, coarse: &StageOutput<'g>) -> Result<StageOutput<'g>> {
        let (l3, l4) = (&b.point_levels[3], &b.point_levels[4]);
        let fb = self.cfg.fallback;
        let (cq, ct) = if self.cfg.detach_coarse {
            (coarse.q.detach(), coarse.t.detach())
        } else {
            (coarse.q, coarse.t)
        };
        // Warped copy of level 3: new positions, original grid coordinates.
        let mut warped = l3.clone();
        warped.positions = l3.positions.rigid_apply(cq, ct)?;
        warped.cloud.positions = coarse.pose.apply(&l3.cloud.positions);
        let e3 = self.fine_cv.forward(ctx, &warped, &b.image_levels[2], fb)?;
        let strides = self.cfg.point_layers[3].grouping.strides;
        let ue3 = self.up_embed.forward(ctx, coarse.cost_volume.entries, l4, l3, l3.features, strides, fb)?;
        let um3 = self.up_mask.forward(ctx, coarse.mask.logits, l4, l3, l3.features, strides, fb)?;
        let oe3 = self.opt.forward(ctx, Tensor::concat(&[e3.entries, ue3, l3.features], 1)?)?;
        let m3 = self.fine_mask.forward(ctx, Tensor::concat(&[oe3, um3, l3.features], 1)?)?;
        let (dq, dt) = regress_pose(ctx, &self.fine_head, oe3, m3)?;
        let (q, t) = compose_refinement(dq, dt, cq, ct)?;
        Ok(StageOutput {
            pose: pose_of(q, t)?,
            q,
            t,
            cost_volume: CostVolume::new(oe3, 3, l3.len())?,
            mask: OutlierMask { logits: m3, level: 3 },
        })
    }

    /// Both stages from level-0 tensors.
    pub fn forward_tensors<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        image: Tensor<'g>,
        k: CameraIntrinsics,
        cloud: &PointCloud,
        positions: Tensor<'g>,
        features: Tensor<'g>,
    ) -> Result<(StageOutput<'g>, StageOutput<'g>)> {
        let b = self.pyramids(ctx, image, k, cloud, positions, features)?;
        let coarse = self.run_coarse(ctx, &b)?;
        let fine = self.run_fine(ctx, &b, &coarse)?;
        Ok((coarse, fine))
    }

    /// Both stages with the input as constants.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, input: &ModelInput<'_>) -> Result<(StageOutput<'g>, StageOutput<'g>)> {
        let g = ctx.g;
        let image = g.constant(input.image.to_vec(), &[input.height, input.width, 3])?;
        let n = input.cloud.len();
        let pos: Vec<Real> = input.cloud.positions.iter().flatten().map(|&x| x as Real).collect();
        let positions = g.constant(pos, &[n, 3])?;
        let features = g.constant(input.cloud.features.clone(), &[n, input.cloud.channels])?;
        self.forward_tensors(ctx, image, input.intrinsics, input.cloud, positions, features)
    }

    /// Eval-mode prediction: `(coarse, fine)` poses.
    pub fn predict(&self, store: &ParamStore, input: &ModelInput<'_>) -> Result<(PoseQT, PoseQT)> {
        let g = crate::autodiff::Graph::new();
        let ctx = Ctx::new(&g, store, false, self.cfg.norm, self.cfg.leaky_slope, ChaCha8Rng::seed_from_u64(0));
        let (c, f) = self.forward(&ctx, input)?;
        Ok((c.pose, f.pose))
    }
}
