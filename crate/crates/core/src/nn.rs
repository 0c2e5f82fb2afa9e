//! Learned building blocks: fully connected layers, shared per-element MLPs
//! and 3×3 conv blocks, each followed by the same norm → leaky ReLU stack.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]; a forward pass borrows the
//! store through a [`Ctx`], which also carries the train/eval flag, the
//! dropout generator, and any running-statistics updates produced in
//! batch-norm mode.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor};
use crate::config::NormMode;
use crate::error::{shape_err, Error, Result};

pub const NORM_EPS: Real = 1e-5;
const BN_MOMENTUM: Real = 0.1;

/// Per-forward state shared by every block.
pub struct Ctx<'g, 's> {
    pub g: &'g Graph,
    pub store: &'s ParamStore,
    pub train: bool,
    pub norm: NormMode,
    pub slope: Real,
    pub dropout: Real,
    rng: RefCell<ChaCha8Rng>,
    cache: RefCell<Vec<Option<Tensor<'g>>>>,
    stats: RefCell<Vec<(ParamId, Vec<Real>)>>,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(g: &'g Graph, store: &'s ParamStore, train: bool, norm: NormMode, slope: Real, rng: ChaCha8Rng) -> Self {
        Self {
            g,
            store,
            train,
            norm,
            slope,
            dropout: 0.0,
            rng: RefCell::new(rng),
            cache: RefCell::new(vec![None; store.len()]),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn with_dropout(mut self, p: Real) -> Self {
        self.dropout = p;
        self
    }

    /// Graph leaf for a parameter; one leaf per parameter per graph.
    pub fn p(&self, id: ParamId) -> Tensor<'g> {
        let mut cache = self.cache.borrow_mut();
        if let Some(t) = cache[id.0] {
            return t;
        }
        let t = self.g.param(self.store, id);
        cache[id.0] = Some(t);
        t
    }

    pub fn dropout(&self, x: Tensor<'g>) -> Tensor<'g> {
        if !self.train || self.dropout <= 0.0 {
            return x;
        }
        x.dropout(self.dropout, &mut *self.rng.borrow_mut())
    }

    /// Running-statistics updates recorded in batch-norm training mode.
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Vec<Real>)> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }
}

/// Writes running-statistics updates back into the store.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[(ParamId, Vec<Real>)]) {
    for (id, v) in updates {
        store.get_mut(*id).value.clone_from(v);
    }
}

/// Kaiming-uniform bound for fan-in `fan_in` feeding a leaky ReLU.
pub fn kaiming_bound(fan_in: usize, slope: Real) -> Real {
    (6.0 / ((1.0 + slope * slope) * fan_in as Real)).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: Real) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Affine map over the last axis: `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_scale(store, name, in_dim, out_dim, kaiming_bound(in_dim, slope), rng)
    }

    pub fn with_scale(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bound: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add(&format!("{name}.weight"), &[in_dim, out_dim], uniform(rng, in_dim * out_dim, bound))?;
        let b = store.add(&format!("{name}.bias"), &[out_dim], vec![0.0; out_dim])?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        if s.last() != Some(&self.in_dim) {
            return Err(shape_err("linear", &s, &[self.in_dim, self.out_dim]));
        }
        x.matmul(ctx.p(self.w))?.add(ctx.p(self.b))
    }
}

/// Per-channel normalization over all leading axes, with learned affine.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub ch: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), &[ch], vec![1.0; ch])?,
            beta: store.add(&format!("{name}.beta"), &[ch], vec![0.0; ch])?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), &[ch], vec![0.0; ch])?,
            running_var: store.add_buffer(&format!("{name}.running_var"), &[ch], vec![1.0; ch])?,
            ch,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let shape = x.shape();
        if shape.last() != Some(&self.ch) {
            return Err(shape_err("norm", &shape, &[self.ch]));
        }
        let e = x.numel() / self.ch;
        let flat = x.reshape(&[e, self.ch])?;
        let normed = match (ctx.norm, ctx.train) {
            (NormMode::Feature, _) => flat.standardize(0, NORM_EPS)?,
            (NormMode::Batch, true) => {
                let out = flat.standardize(0, NORM_EPS)?;
                self.record_stats(ctx, &flat.value(), e);
                out
            }
            (NormMode::Batch, false) => {
                let mean = ctx.p(self.running_mean);
                let var = ctx.p(self.running_var);
                flat.sub(mean)?.div(var.add_scalar(NORM_EPS).sqrt())?
            }
        };
        normed.mul(ctx.p(self.gamma))?.add(ctx.p(self.beta))?.reshape(&shape)
    }

    fn record_stats(&self, ctx: &Ctx<'_, '_>, v: &[Real], e: usize) {
        let c = self.ch;
        let mut mean = vec![0.0; c];
        for row in v.chunks(c) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= e as Real);
        let mut var = vec![0.0; c];
        for row in v.chunks(c) {
            for ((s, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= e as Real);
        let blend = |id: ParamId, batch: &[Real]| {
            let old = &ctx.store.get(id).value;
            old.iter().zip(batch).map(|(o, b)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * b).collect::<Vec<_>>()
        };
        let mut stats = ctx.stats.borrow_mut();
        stats.push((self.running_mean, blend(self.running_mean, &mean)));
        stats.push((self.running_var, blend(self.running_var, &var)));
    }
}

/// Shared MLP: identical weights applied to every element along the leading
/// axes, each layer linear → norm → leaky ReLU.
#[derive(Debug, Clone)]
pub struct SharedMlp {
    pub layers: Vec<(Linear, Norm)>,
}

impl SharedMlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, dims: &[usize], slope: Real, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("{name}: MLP widths {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut c = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.{i}"), c, d, slope, rng)?;
            let norm = Norm::new(store, &format!("{name}.{i}.norm"), d)?;
            layers.push((lin, norm));
            c = d;
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.0.out_dim).unwrap_or(0)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let mut h = x;
        for (lin, norm) in &self.layers {
            h = norm.forward(ctx, lin.forward(ctx, h)?)?.leaky_relu(ctx.slope);
        }
        Ok(h)
    }
}

/// 3×3 conv → norm over spatial positions → leaky ReLU → max-pool.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: Norm,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: (usize, usize),
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: (usize, usize),
        slope: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidConfig(format!("{name}: zero stride")));
        }
        let bound = kaiming_bound(9 * in_ch, slope);
        let w = store.add(&format!("{name}.weight"), &[3, 3, in_ch, out_ch], uniform(rng, 9 * in_ch * out_ch, bound))?;
        let b = store.add(&format!("{name}.bias"), &[out_ch], vec![0.0; out_ch])?;
        let norm = Norm::new(store, &format!("{name}.norm"), out_ch)?;
        Ok(Self {
            w,
            b,
            norm,
            in_ch,
            out_ch,
            stride,
        })
    }

    /// `x: [H, W, in_ch]` → `[H / s_h, W / s_w, out_ch]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_ch {
            return Err(shape_err("conv_block", &s, &[self.in_ch, self.out_ch]));
        }
        let y = x.conv2d(ctx.p(self.w))?.add(ctx.p(self.b))?;
        let y = self.norm.forward(ctx, y)?.leaky_relu(ctx.slope);
        if self.stride == (1, 1) {
            Ok(y)
        } else {
            y.max_pool2d(self.stride.0, self.stride.1)
        }
    }
}
