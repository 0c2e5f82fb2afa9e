//! Loss, optimizer and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor};
use crate::config::TrainConfig;
use crate::data::{PreparedInput, Scene};
use crate::error::{Error, Result};
use crate::geometry::{rre_rte, PoseQT};
use crate::nn::{apply_stat_updates, Ctx};
use crate::par;
use crate::registration::{Model, StageOutput};

/// Learnable loss-balancing scalars and the fixed stage weights.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub s_q: ParamId,
    pub s_t: ParamId,
    pub alpha_fine: Real,
    pub alpha_coarse: Real,
}

impl LossParams {
    /// Registers `loss.s_q` and `loss.s_t`.
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            s_q: store.add("loss.s_q", &[1], vec![cfg.init_s_q as Real])?,
            s_t: store.add("loss.s_t", &[1], vec![cfg.init_s_t as Real])?,
            alpha_fine: cfg.alpha_fine as Real,
            alpha_coarse: cfg.alpha_coarse as Real,
        })
    }
}

fn pose_consts<'g>(g: &'g Graph, p: &PoseQT) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let q = p.q().canonical().to_array().iter().map(|&x| x as Real).collect();
    let t = p.t().iter().map(|&x| x as Real).collect();
    Ok((g.constant(q, &[4])?, g.constant(t, &[3])?))
}

/// `‖q_gt − q‖₂ e^{−s_q} + s_q + ‖t_gt − t‖₁ e^{−s_t} + s_t`.
pub fn single_loss<'g>(q: Tensor<'g>, t: Tensor<'g>, gt: &PoseQT, s_q: Tensor<'g>, s_t: Tensor<'g>) -> Result<Tensor<'g>> {
    let g = q.graph();
    let (qg, tg) = pose_consts(g, gt)?;
    let eq = qg.sub(q)?.norm_l2(0)?;
    let et = tg.sub(t)?.norm_l1(0)?;
    eq.mul(s_q.neg().exp())?.add(s_q)?.add(et.mul(s_t.neg().exp())?)?.add(s_t)
}

/// Weighted sum of the fine and coarse single losses.
pub fn total_loss<'g>(ctx: &Ctx<'g, '_>, lp: &LossParams, coarse: &StageOutput<'g>, fine: &StageOutput<'g>, gt: &PoseQT) -> Result<Tensor<'g>> {
    let (s_q, s_t) = (ctx.p(lp.s_q), ctx.p(lp.s_t));
    let lf = single_loss(fine.q, fine.t, gt, s_q, s_t)?;
    let lc = single_loss(coarse.q, coarse.t, gt, s_q, s_t)?;
    lf.scale(lp.alpha_fine).add(lc.scale(lp.alpha_coarse))
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

/// First/second-moment adaptive optimizer over the trainable parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<Real>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients stored in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as Real, self.beta2 as Real);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let a = (lr * c2.sqrt() / c1) as Real;
        let eps = (self.eps * c2.sqrt()) as Real;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p.value[j] -= a * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Training or validation split by scene seed.
pub fn is_holdout(seed: u64, holdout_mod: u64) -> bool {
    holdout_mod > 0 && seed % holdout_mod == holdout_mod - 1
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub rre_deg: f64,
    pub rte: f64,
    pub lr: f64,
    /// Coarse-stage errors; kept out of the CSV.
    pub coarse_rre_deg: f64,
    pub coarse_rte: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,rre_deg,rte,lr";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.9},{:.9},{:.9},{:.9e}", self.epoch, self.split, self.loss, self.rre_deg, self.rte, self.lr)
    }
}

pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    /// Parameters at the epoch with the lowest RTE (holdout split when
    /// present, training split otherwise).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_rte: f64,
}

/// Loss, gradients, poses and norm-statistics updates of one sample.
pub struct SampleResult {
    pub loss: f64,
    pub grads: Vec<(ParamId, Vec<Real>)>,
    pub coarse: PoseQT,
    pub fine: PoseQT,
    pub stats: Vec<(ParamId, Vec<Real>)>,
}

/// Forward (and backward when `train`) for one scene. `rng_seed` drives
/// dropout.
pub fn run_sample(model: &Model, store: &ParamStore, lp: &LossParams, input: &PreparedInput, gt: &PoseQT, train: bool, dropout: f64, rng_seed: u64) -> Result<SampleResult> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, store, train, model.cfg.norm, model.cfg.leaky_slope, ChaCha8Rng::seed_from_u64(rng_seed)).with_dropout(dropout as Real);
    let (coarse, fine) = model.forward(&ctx, &input.input())?;
    let loss = total_loss(&ctx, lp, &coarse, &fine, gt)?;
    let value = loss.item() as f64;
    let grads = if train && value.is_finite() {
        g.backward(loss)?;
        g.take_param_grads()
    } else {
        Vec::new()
    };
    Ok(SampleResult {
        loss: value,
        grads,
        coarse: coarse.pose,
        fine: fine.pose,
        stats: ctx.take_stat_updates(),
    })
}

fn mix(a: u64, b: u64) -> u64 {
    (a ^ 0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ b.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Eval-mode means over a set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SetStats {
    pub loss: f64,
    pub rre_deg: f64,
    pub rte: f64,
    pub coarse_rre_deg: f64,
    pub coarse_rte: f64,
}

impl SetStats {
    fn add(&mut self, loss: f64, fine: (f64, f64), coarse: (f64, f64)) {
        self.loss += loss;
        self.rre_deg += fine.0;
        self.rte += fine.1;
        self.coarse_rre_deg += coarse.0;
        self.coarse_rte += coarse.1;
    }

    fn scaled(self, n: usize) -> Self {
        let k = 1.0 / n.max(1) as f64;
        Self {
            loss: self.loss * k,
            rre_deg: self.rre_deg * k,
            rte: self.rte * k,
            coarse_rre_deg: self.coarse_rre_deg * k,
            coarse_rte: self.coarse_rte * k,
        }
    }
}

/// Mean loss and errors of eval-mode predictions.
pub fn evaluate(model: &Model, store: &ParamStore, lp: &LossParams, inputs: &[PreparedInput], targets: &[PoseQT]) -> Result<SetStats> {
    let pairs: Vec<(&PreparedInput, &PoseQT)> = inputs.iter().zip(targets).collect();
    let res = par::map_slice(&pairs, |&(inp, gt)| run_sample(model, store, lp, inp, gt, false, 0.0, 0));
    let mut sums = SetStats::default();
    for (r, gt) in res.into_iter().zip(targets) {
        let r = r?;
        sums.add(r.loss, rre_rte(&r.fine, gt), rre_rte(&r.coarse, gt));
    }
    Ok(sums.scaled(inputs.len()))
}

/// Runs the optimization. `log` receives the CSV header and one row per
/// split per epoch.
pub fn train(model: &Model, store: &mut ParamStore, lp: &LossParams, scenes: &[Scene], cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let ch = model.cfg.point_in_ch;
    let (mut tr, mut ho) = (Vec::new(), Vec::new());
    for s in scenes {
        let item = (PreparedInput::new(s, ch)?, s.target());
        if is_holdout(s.seed, cfg.holdout_mod) {
            ho.push(item);
        } else {
            tr.push(item);
        }
    }
    if tr.is_empty() {
        return Err(Error::InvalidConfig("every scene fell into the holdout split".into()));
    }
    let (ho_in, ho_gt): (Vec<_>, Vec<_>) = ho.into_iter().unzip();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut adam = Adam::new(store, cfg);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut steps = 0;
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0, store.clone());
    'outer: for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut sums = (SetStats::default(), 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot: &ParamStore = store;
            let slots: Vec<(usize, usize)> = chunk.iter().copied().enumerate().collect();
            let res = par::map_slice(&slots, |&(j, i)| {
                let (inp, gt) = &tr[i];
                run_sample(model, snapshot, lp, inp, gt, true, cfg.dropout, mix(mix(cfg.seed, steps as u64), j as u64))
            });
            store.zero_grad();
            let scale = 1.0 / chunk.len() as Real;
            for (j, r) in res.into_iter().enumerate() {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                store.accumulate(&r.grads, scale);
                apply_stat_updates(store, &r.stats);
                let gt = &tr[chunk[j]].1;
                sums.0.add(r.loss, rre_rte(&r.fine, gt), rre_rte(&r.coarse, gt));
                sums.1 += 1;
            }
            store.clip_grad_norm(cfg.clip_norm as Real);
            adam.update(store, lr);
            steps += 1;
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                epochs.extend(finish_epoch(model, store, lp, epoch, lr, sums, &ho_in, &ho_gt, &mut best, &mut log)?);
                break 'outer;
            }
        }
        epochs.extend(finish_epoch(model, store, lp, epoch, lr, sums, &ho_in, &ho_gt, &mut best, &mut log)?);
    }
    Ok(TrainReport {
        epochs,
        steps,
        best: best.2,
        best_epoch: best.1,
        best_rte: best.0,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &Model,
    store: &ParamStore,
    lp: &LossParams,
    epoch: usize,
    lr: f64,
    sums: (SetStats, usize),
    ho_in: &[PreparedInput],
    ho_gt: &[PoseQT],
    best: &mut (f64, usize, ParamStore),
    log: &mut Option<&mut dyn Write>,
) -> Result<Vec<EpochStats>> {
    let row = |split, s: SetStats| EpochStats {
        epoch,
        split,
        loss: s.loss,
        rre_deg: s.rre_deg,
        rte: s.rte,
        lr,
        coarse_rre_deg: s.coarse_rre_deg,
        coarse_rte: s.coarse_rte,
    };
    let mut rows = vec![row("train", sums.0.scaled(sums.1))];
    if !ho_in.is_empty() {
        rows.push(row("holdout", evaluate(model, store, lp, ho_in, ho_gt)?));
    }
    let rte = rows.last().expect("one row").rte;
    if rte < best.0 {
        *best = (rte, epoch, store.clone());
    }
    if let Some(w) = log.as_deref_mut() {
        for r in &rows {
            writeln!(w, "{}", r.csv_row())?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Quaternion, Vec3};

    fn scalars<'g>(g: &'g Graph, sq: Real, st: Real) -> (Tensor<'g>, Tensor<'g>) {
        (g.trainable(vec![sq], &[1]).unwrap(), g.trainable(vec![st], &[1]).unwrap())
    }

    fn pose_t<'g>(g: &'g Graph, p: &PoseQT) -> (Tensor<'g>, Tensor<'g>) {
        pose_consts(g, p).unwrap()
    }

    fn gt() -> PoseQT {
        PoseQT::new(Quaternion::new(0.9, 0.1, -0.3, 0.2), Vec3::new(0.5, -1.0, 2.0)).unwrap()
    }

    #[test]
    fn loss_at_ground_truth() {
        let g = Graph::new();
        let (q, t) = pose_t(&g, &gt());
        let (sq, st) = scalars(&g, -2.5, 0.0);
        let l = single_loss(q, t, &gt(), sq, st).unwrap();
        assert_eq!(l.item(), -2.5);
        g.backward(l).unwrap();
        // Zero rotation error: ∂/∂s_q = 1.
        assert_eq!(g.grad(sq).unwrap(), vec![1.0]);

        let mut store = ParamStore::new();
        let lp = LossParams::new(&mut store, &TrainConfig::default()).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false, crate::config::NormMode::Feature, 0.1, ChaCha8Rng::seed_from_u64(0));
        let (q, t) = pose_t(&g, &gt());
        let stage = |q, t| StageOutput {
            q,
            t,
            pose: gt(),
            cost_volume: crate::cost_volume::CostVolume::new(g.zeros(&[1, 1]), 4, 1).unwrap(),
            mask: crate::registration::OutlierMask { logits: g.zeros(&[1, 1]), level: 4 },
        };
        let total = total_loss(&ctx, &lp, &stage(q, t), &stage(q, t), &gt()).unwrap();
        assert!((total.item() + 6.0).abs() < 1e-12);
        // Coarse weight only.
        let lp1 = LossParams {
            alpha_fine: 0.0,
            alpha_coarse: 1.0,
            ..lp
        };
        let (q2, t2) = pose_t(&g, &PoseQT::from_translation(Vec3::new(0.1, 0.0, 0.0)));
        let only = total_loss(&ctx, &lp1, &stage(q2, t2), &stage(q, t), &gt()).unwrap();
        let direct = single_loss(q2, t2, &gt(), ctx.p(lp.s_q), ctx.p(lp.s_t)).unwrap();
        assert_eq!(only.item(), direct.item());
    }

    #[test]
    fn translation_term_is_l1() {
        let g = Graph::new();
        let target = PoseQT::identity();
        let (q, _) = pose_t(&g, &target);
        let t = g.constant(vec![0.1, -0.2, 0.3], &[3]).unwrap();
        let (sq, st) = scalars(&g, 0.0, 0.0);
        let l = single_loss(q, t, &target, sq, st).unwrap().item();
        assert!((l - 0.6).abs() < 1e-12);
    }

    #[test]
    fn s_q_is_stationary_at_log_error() {
        let target = gt();
        let pred = PoseQT::new(Quaternion::new(0.8, 0.2, -0.3, 0.25), target.t()).unwrap();
        let err = pred.q().to_array().iter().zip(target.q().to_array()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let at = |s: Real| {
            let g = Graph::new();
            let (q, t) = pose_t(&g, &pred);
            let (sq, st) = scalars(&g, s, 0.0);
            single_loss(q, t, &target, sq, st).unwrap().item()
        };
        let s0 = err.ln() as Real;
        let h = 1e-5;
        let d = (at(s0 + h) - at(s0 - h)) / (2.0 * h);
        assert!(d.abs() < 1e-8, "{d}");
        assert!(at(s0 + 0.1) > at(s0) && at(s0 - 0.1) > at(s0));
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert!((lr_at(&cfg, 3) - 1e-3 * 0.99f64.powi(3)).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 0), 1e-3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![1.0, -1.0]).unwrap();
        store.get_mut(id).grad = vec![0.5, -2.0];
        let mut adam = Adam::new(&store, &TrainConfig::default());
        adam.update(&mut store, 0.1);
        let v = &store.get(id).value;
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn holdout_rule() {
        assert!(is_holdout(9, 10) && is_holdout(19, 10));
        assert!(!is_holdout(10, 10) && !is_holdout(9, 0));
    }
}
