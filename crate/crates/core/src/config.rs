//! Model and training configuration, plus the flat `key=value` file format
//! used by the CLI and checkpoint sidecars.

use std::fmt::Write as _;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::sampling::GroupingSpec;

/// Normalization used inside conv blocks and shared MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics over the element axis of the current sample, in train and
    /// eval alike. Works at batch size 1.
    Feature,
    /// Batch statistics in training, running statistics in eval.
    Batch,
}

/// How pixel candidates are chosen for each point in the cost volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixture {
    /// Every level-3 pixel is a candidate; adds the inverse similarity term.
    AllToAll,
    /// The `k` nearest pixels on the normalized plane.
    Knn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageLayerSpec {
    pub stride: (usize, usize),
    /// Output channels of the five conv blocks.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointLayerSpec {
    pub grouping: GroupingSpec,
    pub mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostVolumeSpec {
    /// MLP producing candidate features from similarity and positions.
    pub h_mlp: Vec<usize>,
    /// MLP producing candidate salience logits.
    pub salience_mlp: Vec<usize>,
    /// Width of the point/pixel position embedding.
    pub pos_fc: usize,
    /// Point neighbors aggregated by the local embedding.
    pub lst_k: usize,
    pub lst_kernel: (usize, usize),
    pub lst_dist: f64,
    pub lst_pos_fc: usize,
    pub lst_mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleSpec {
    pub k: usize,
    pub kernel: (usize, usize),
    pub max_dist: f64,
    pub mlp: Vec<usize>,
    pub fc: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    /// Width of the initial per-point features (zeros followed by intensity).
    pub point_in_ch: usize,
    pub image_layers: Vec<ImageLayerSpec>,
    pub point_layers: Vec<PointLayerSpec>,
    pub context: PointLayerSpec,
    pub cost_volume: CostVolumeSpec,
    pub coarse_mixture: Mixture,
    pub fine_knn: usize,
    pub upsample: UpsampleSpec,
    pub opt_mlp: Vec<usize>,
    pub mask_mlp: Vec<usize>,
    pub mid_fc: usize,
    pub norm: NormMode,
    pub leaky_slope: Real,
    /// FPS sampling and exhaustive KNN instead of the spherical-grid paths.
    pub fallback: bool,
    pub z_min: f64,
    /// Multiplier on the initial weight bound of the pose heads.
    pub head_init_scale: Real,
    /// Block fine-stage gradients from reaching the coarse pose, so the
    /// coarse stage learns from its own loss term only.
    pub detach_coarse: bool,
}

fn layer(k: usize, strides: (usize, usize), kernel: (usize, usize), dist: f64, mlp: &[usize]) -> PointLayerSpec {
    PointLayerSpec {
        grouping: GroupingSpec {
            k,
            kernel,
            max_dist: dist,
            strides,
        },
        mlp: mlp.to_vec(),
    }
}

impl ModelConfig {
    /// Full-size network hyperparameters for a 64-beam LiDAR.
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            point_in_ch: 4,
            image_layers: vec![
                ImageLayerSpec {
                    stride: (4, 4),
                    channels: vec![16, 16, 16, 16, 32],
                },
                ImageLayerSpec {
                    stride: (4, 4),
                    channels: vec![32, 32, 32, 32, 64],
                },
                ImageLayerSpec {
                    stride: (2, 2),
                    channels: vec![64, 64, 64, 64, 128],
                },
            ],
            point_layers: vec![
                layer(32, (4, 8), (9, 15), 0.75, &[16, 16, 32]),
                layer(16, (2, 2), (9, 15), 3.0, &[32, 32, 64]),
                layer(16, (2, 2), (5, 9), 6.0, &[64, 64, 128]),
                layer(16, (1, 2), (5, 9), 12.0, &[128, 128, 256]),
            ],
            context: layer(16, (1, 1), (5, 9), 12.0, &[128, 64, 64]),
            cost_volume: CostVolumeSpec {
                h_mlp: vec![128, 64, 64],
                salience_mlp: vec![128, 64],
                pos_fc: 64,
                lst_k: 4,
                lst_kernel: (3, 5),
                lst_dist: 4.5,
                lst_pos_fc: 64,
                lst_mlp: vec![128, 64],
            },
            coarse_mixture: Mixture::AllToAll,
            fine_knn: 32,
            upsample: UpsampleSpec {
                k: 8,
                kernel: (5, 9),
                max_dist: 9.0,
                mlp: vec![128, 64],
                fc: 64,
            },
            opt_mlp: vec![128, 64],
            mask_mlp: vec![128, 64],
            mid_fc: 256,
            norm: NormMode::Feature,
            leaky_slope: 0.1,
            fallback: false,
            z_min: crate::geometry::DEFAULT_Z_MIN,
            head_init_scale: 0.01,
            detach_coarse: true,
        }
    }

    /// Narrow network sized for the synthetic 16×32 LiDAR grid and 32×64
    /// images: same topology, roughly an eighth of the widths.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            point_in_ch: 4,
            image_layers: vec![
                ImageLayerSpec {
                    stride: (2, 2),
                    channels: vec![8, 8, 8, 8, 8],
                },
                ImageLayerSpec {
                    stride: (2, 2),
                    channels: vec![16, 16, 16, 16, 16],
                },
                ImageLayerSpec {
                    stride: (2, 2),
                    channels: vec![16, 16, 16, 16, 16],
                },
            ],
            point_layers: vec![
                layer(8, (2, 1), (5, 7), 2.0, &[8, 8, 16]),
                layer(8, (1, 2), (3, 5), 4.0, &[16, 16, 16]),
                layer(8, (2, 2), (3, 5), 8.0, &[16, 16, 16]),
                layer(8, (1, 2), (3, 5), 16.0, &[16, 16, 32]),
            ],
            context: layer(8, (1, 1), (3, 5), 16.0, &[32, 16, 16]),
            cost_volume: CostVolumeSpec {
                h_mlp: vec![32, 16, 16],
                salience_mlp: vec![32, 16],
                pos_fc: 16,
                lst_k: 4,
                lst_kernel: (3, 5),
                lst_dist: 6.0,
                lst_pos_fc: 16,
                lst_mlp: vec![32, 16],
            },
            coarse_mixture: Mixture::AllToAll,
            fine_knn: 8,
            upsample: UpsampleSpec {
                k: 4,
                kernel: (3, 5),
                max_dist: 12.0,
                mlp: vec![32, 16],
                fc: 16,
            },
            opt_mlp: vec![32, 16],
            mask_mlp: vec![32, 16],
            mid_fc: 64,
            norm: NormMode::Feature,
            leaky_slope: 0.1,
            fallback: false,
            z_min: crate::geometry::DEFAULT_Z_MIN,
            head_init_scale: 0.01,
            detach_coarse: true,
        }
    }

    /// Tiny network for gradient checks and smoke tests: 8×8 images keep
    /// their size through every level.
    pub fn micro() -> Self {
        let layer = |k, strides, mlp: &[usize]| PointLayerSpec {
            grouping: GroupingSpec {
                k,
                kernel: (3, 3),
                max_dist: 10.0,
                strides,
            },
            mlp: mlp.to_vec(),
        };
        Self {
            preset: "micro".into(),
            point_in_ch: 4,
            image_layers: vec![
                ImageLayerSpec {
                    stride: (1, 1),
                    channels: vec![3; 5],
                },
                ImageLayerSpec {
                    stride: (1, 1),
                    channels: vec![3; 5],
                },
                ImageLayerSpec {
                    stride: (1, 1),
                    channels: vec![4; 5],
                },
            ],
            point_layers: vec![
                layer(3, (1, 1), &[4]),
                layer(3, (1, 2), &[4]),
                layer(3, (1, 1), &[4]),
                layer(3, (1, 2), &[5]),
            ],
            context: layer(2, (1, 1), &[4]),
            cost_volume: CostVolumeSpec {
                h_mlp: vec![4],
                salience_mlp: vec![4],
                pos_fc: 3,
                lst_k: 2,
                lst_kernel: (3, 3),
                lst_dist: 10.0,
                lst_pos_fc: 3,
                lst_mlp: vec![4],
            },
            coarse_mixture: Mixture::AllToAll,
            fine_knn: 4,
            upsample: UpsampleSpec {
                k: 2,
                kernel: (3, 3),
                max_dist: 10.0,
                mlp: vec![4],
                fc: 3,
            },
            opt_mlp: vec![4],
            mask_mlp: vec![4],
            mid_fc: 6,
            norm: NormMode::Feature,
            leaky_slope: 0.1,
            fallback: false,
            z_min: 0.1,
            head_init_scale: 1.0,
            detach_coarse: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::InvalidConfig(format!("unknown model preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.image_layers.len() != 3 {
            return bad("image pyramid needs 3 layers");
        }
        if self.image_layers.iter().any(|l| l.channels.len() != 5 || l.channels.contains(&0)) {
            return bad("each image layer needs 5 positive channel widths");
        }
        if self.point_layers.len() != 4 {
            return bad("point pyramid needs 4 layers");
        }
        let mut specs: Vec<&GroupingSpec> = self.point_layers.iter().map(|l| &l.grouping).collect();
        specs.push(&self.context.grouping);
        for g in specs {
            g.validate()?;
        }
        let mlps = [
            &self.context.mlp,
            &self.cost_volume.h_mlp,
            &self.cost_volume.salience_mlp,
            &self.cost_volume.lst_mlp,
            &self.upsample.mlp,
            &self.opt_mlp,
            &self.mask_mlp,
        ];
        let point_mlps = self.point_layers.iter().map(|l| &l.mlp);
        if mlps.into_iter().chain(point_mlps).any(|m| m.is_empty() || m.contains(&0)) {
            return bad("MLP widths must be non-empty and positive");
        }
        let c = &self.cost_volume;
        if c.h_mlp.last() != c.salience_mlp.last() || c.h_mlp.last() != c.lst_mlp.last() {
            return bad("cost-volume MLPs must end at the same width");
        }
        if self.mask_mlp.last() != self.context.mlp.last() || self.mask_mlp.last() != self.opt_mlp.last() {
            return bad("mask MLP must end at the cost-volume width");
        }
        if c.lst_k == 0 || self.fine_knn == 0 || self.upsample.k == 0 || self.mid_fc == 0 {
            return bad("neighbor counts and widths must be positive");
        }
        if let Mixture::Knn(0) = self.coarse_mixture {
            return bad("coarse knn needs k >= 1");
        }
        if !(self.leaky_slope >= 0.0) || !(self.z_min > 0.0) {
            return bad("leaky_slope >= 0 and z_min > 0 required");
        }
        Ok(())
    }

    pub fn image_stride(&self) -> (usize, usize) {
        self.image_layers
            .iter()
            .fold((1, 1), |(h, w), l| (h * l.stride.0, w * l.stride.1))
    }

    /// Applies one override; only the top-level switches are exposed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model" => {
                let keep = (self.norm, self.coarse_mixture, self.fine_knn, self.fallback, self.detach_coarse);
                *self = Self::preset(value)?;
                (self.norm, self.coarse_mixture, self.fine_knn, self.fallback, self.detach_coarse) = keep;
            }
            "norm" => {
                self.norm = match value {
                    "feature" => NormMode::Feature,
                    "batch" => NormMode::Batch,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "coarse_mixture" => self.coarse_mixture = parse_mixture(value)?,
            "fine_knn" => self.fine_knn = parse(key, value)?,
            "fallback" => self.fallback = parse(key, value)?,
            "detach_coarse" => self.detach_coarse = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.preset);
        let _ = writeln!(
            s,
            "norm={}",
            match self.norm {
                NormMode::Feature => "feature",
                NormMode::Batch => "batch",
            }
        );
        let _ = writeln!(s, "coarse_mixture={}", mixture_str(self.coarse_mixture));
        let _ = writeln!(s, "fine_knn={}", self.fine_knn);
        let _ = writeln!(s, "fallback={}", self.fallback);
        let _ = writeln!(s, "detach_coarse={}", self.detach_coarse);
        s
    }
}

fn mixture_str(m: Mixture) -> String {
    match m {
        Mixture::AllToAll => "all".into(),
        Mixture::Knn(k) => format!("knn:{k}"),
    }
}

pub fn parse_mixture(v: &str) -> Result<Mixture> {
    if v == "all" {
        return Ok(Mixture::AllToAll);
    }
    match v.strip_prefix("knn:").map(str::parse::<usize>) {
        Some(Ok(k)) if k > 0 => Ok(Mixture::Knn(k)),
        _ => Err(bad_value("coarse_mixture", v)),
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::InvalidConfig(format!("bad value '{value}' for '{key}'"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad_value(key, value))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Multiplicative learning-rate factor applied after each epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub seed: u64,
    pub dropout: f64,
    pub clip_norm: f64,
    /// Scenes whose seed satisfies `seed % holdout_mod == holdout_mod - 1`
    /// form the validation split; 0 disables the split.
    pub holdout_mod: u64,
    pub alpha_fine: f64,
    pub alpha_coarse: f64,
    pub init_s_q: f64,
    pub init_s_t: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay: 0.99,
            batch_size: 8,
            epochs: 10,
            max_steps: 0,
            seed: 0,
            dropout: 0.5,
            clip_norm: 10.0,
            holdout_mod: 10,
            alpha_fine: 0.8,
            alpha_coarse: 1.6,
            init_s_q: -2.5,
            init_s_t: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.dropout)
            && self.clip_norm > 0.0
            && self.alpha_fine >= 0.0
            && self.alpha_coarse >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "holdout_mod" => self.holdout_mod = parse(key, value)?,
            "alpha_fine" => self.alpha_fine = parse(key, value)?,
            "alpha_coarse" => self.alpha_coarse = parse(key, value)?,
            "init_s_q" => self.init_s_q = parse(key, value)?,
            "init_s_t" => self.init_s_t = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        // `{:?}` on f64 prints the shortest string that round-trips.
        format!(
            "lr={:?}\nbeta1={:?}\nbeta2={:?}\nadam_eps={:?}\nlr_decay={:?}\nbatch_size={}\nepochs={}\nmax_steps={}\nseed={}\ndropout={:?}\nclip_norm={:?}\nholdout_mod={}\nalpha_fine={:?}\nalpha_coarse={:?}\ninit_s_q={:?}\ninit_s_t={:?}\n",
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.lr_decay,
            self.batch_size,
            self.epochs,
            self.max_steps,
            self.seed,
            self.dropout,
            self.clip_norm,
            self.holdout_mod,
            self.alpha_fine,
            self.alpha_coarse,
            self.init_s_q,
            self.init_s_t
        )
    }
}

/// Parses flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolved configuration of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let pairs = parse_kv(text)?;
        // The preset goes first so later keys refine it.
        for (k, v) in pairs.iter().filter(|(k, _)| k == "model") {
            self.model.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model") {
            if !self.train.set(k, v)? && !self.model.set(k, v)? {
                return Err(Error::InvalidConfig(format!("unknown key '{k}'")));
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}", self.model.to_kv(), self.train.to_kv())
    }
}
