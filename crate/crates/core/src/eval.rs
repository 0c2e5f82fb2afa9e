//! Evaluation: per-sample errors, gated summaries, recall curves and error
//! histograms, all rendered as CSV text.

use std::fmt::Write;

use crate::autodiff::ParamStore;
use crate::data::{PerturbMode, PreparedInput, Scene};
use crate::error::{Error, Result};
use crate::geometry::{msee_mrr, rre_rte, se3_distance, PoseQT};
use crate::par;
use crate::registration::Model;

/// Samples at or above either bound are left out of the means.
pub const RRE_GATE_DEG: f64 = 10.0;
pub const RTE_GATE: f64 = 5.0;
pub const RRE_BIN_DEG: f64 = 0.5;
pub const RTE_BIN: f64 = 0.1;
/// Recall thresholds are `k · step` for `k = 1..=n`.
const RRE_STEPS: usize = 20;
const RTE_STEPS: usize = 50;

/// Anything that maps a scene to `(coarse, fine)` poses.
pub trait Predictor: Sync {
    fn predict(&self, scene: &Scene) -> Result<(PoseQT, PoseQT)>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, scene: &Scene) -> Result<(PoseQT, PoseQT)> {
        let input = PreparedInput::new(scene, self.model.cfg.point_in_ch)?;
        self.model.predict(self.store, &input.input())
    }
}

/// Returns the ground truth.
pub struct PerfectPredictor;

impl Predictor for PerfectPredictor {
    fn predict(&self, scene: &Scene) -> Result<(PoseQT, PoseQT)> {
        Ok((scene.target(), scene.target()))
    }
}

/// Always predicts "no correction".
pub struct IdentityPredictor;

impl Predictor for IdentityPredictor {
    fn predict(&self, _: &Scene) -> Result<(PoseQT, PoseQT)> {
        Ok((PoseQT::identity(), PoseQT::identity()))
    }
}

/// Errors of one sample's final pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    pub rre_deg: f64,
    pub rte: f64,
    /// Coarse-stage errors, for reference.
    pub coarse_rre_deg: f64,
    pub coarse_rte: f64,
    /// `(E, η)`: se(3) distance to the truth and the injected noise level;
    /// decalibration sets only.
    pub se3: Option<(f64, f64)>,
}

impl SampleEval {
    pub fn gated(&self) -> bool {
        self.rre_deg < RRE_GATE_DEG && self.rte < RTE_GATE
    }
}

pub fn evaluate_scene(pred: &dyn Predictor, scene: &Scene) -> Result<SampleEval> {
    let (coarse, fine) = pred.predict(scene)?;
    let gt = scene.target();
    let (rre_deg, rte) = rre_rte(&fine, &gt);
    let (coarse_rre_deg, coarse_rte) = rre_rte(&coarse, &gt);
    let se3 = (scene.mode == PerturbMode::Decalib).then(|| {
        let g = gt.to_matrix();
        (se3_distance(&fine.to_matrix(), &g), se3_distance(&PoseQT::identity().to_matrix(), &g))
    });
    Ok(SampleEval {
        rre_deg,
        rte,
        coarse_rre_deg,
        coarse_rte,
        se3,
    })
}

/// All scenes, in order.
pub fn evaluate_all(pred: &dyn Predictor, scenes: &[Scene]) -> Result<Vec<SampleEval>> {
    par::map_slice(scenes, |s| evaluate_scene(pred, s)).into_iter().collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn num(x: f64) -> String {
    format!("{x:.9}")
}

/// `metric,mean,std,n_gated,n_total`. RRE/RTE statistics cover gated samples;
/// MSEE and MRR (as a percentage) cover every sample.
pub fn metrics_csv(samples: &[SampleEval]) -> Result<String> {
    let mut s = String::from("metric,mean,std,n_gated,n_total\n");
    let n = samples.len();
    let kept: Vec<&SampleEval> = samples.iter().filter(|e| e.gated()).collect();
    for (name, f) in [("rre_deg", (|e: &SampleEval| e.rre_deg) as fn(&SampleEval) -> f64), ("rte", |e| e.rte)] {
        let (m, sd) = mean_std(&kept.iter().map(|e| f(e)).collect::<Vec<_>>());
        let _ = writeln!(s, "{name},{},{},{},{n}", num(m), num(sd), kept.len());
    }
    let se3: Option<Vec<(f64, f64)>> = samples.iter().map(|e| e.se3).collect();
    if let Some(pairs) = se3.filter(|p| !p.is_empty()) {
        let (errs, noise): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        // Validates the noise levels and pins the means to the shared definition.
        let (msee, mrr) = msee_mrr(&errs, &noise)?;
        let rates: Vec<f64> = pairs.iter().map(|(e, eta)| 100.0 * (eta - e) / eta).collect();
        let _ = writeln!(s, "msee,{},{},{n},{n}", num(msee), num(mean_std(&errs).1));
        let _ = writeln!(s, "mrr_percent,{},{},{n},{n}", num(100.0 * mrr), num(mean_std(&rates).1));
    }
    Ok(s)
}

/// `metric,threshold,recall`: fraction of all samples with error strictly
/// below each threshold.
pub fn recall_csv(samples: &[SampleEval]) -> String {
    let mut s = String::from("metric,threshold,recall\n");
    let n = samples.len().max(1) as f64;
    let rows = [("rre_deg", RRE_STEPS, RRE_BIN_DEG, 1), ("rte", RTE_STEPS, RTE_BIN, 2)];
    for (name, steps, step, which) in rows {
        for k in 1..=steps {
            let th = edge(k, step);
            let hits = samples.iter().filter(|e| pick(e, which) < th).count();
            let _ = writeln!(s, "{name},{th:.1},{}", num(hits as f64 / n));
        }
    }
    s
}

/// `metric,bin_lo,bin_hi,count`, with a final open-ended overflow bin.
pub fn hist_csv(samples: &[SampleEval]) -> String {
    let mut s = String::from("metric,bin_lo,bin_hi,count\n");
    let rows = [("rre_deg", RRE_STEPS, RRE_BIN_DEG, 1), ("rte", RTE_STEPS, RTE_BIN, 2)];
    for (name, steps, step, which) in rows {
        let mut counts = vec![0usize; steps + 1];
        for e in samples {
            let x = pick(e, which);
            // Same edges as the recall thresholds, so bins and recall agree.
            counts[(1..=steps).take_while(|&k| edge(k, step) <= x).count()] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let hi = if b == steps { "inf".to_string() } else { format!("{:.1}", edge(b + 1, step)) };
            let _ = writeln!(s, "{name},{:.1},{hi},{c}", edge(b, step));
        }
    }
    s
}

fn edge(k: usize, step: f64) -> f64 {
    // k/10 and k/2 round once, unlike k·0.1.
    k as f64 / (1.0 / step).round()
}

fn pick(e: &SampleEval, which: u8) -> f64 {
    if which == 1 {
        e.rre_deg
    } else {
        e.rte
    }
}

/// The three CSV files of an evaluation run.
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub metrics: String,
    pub recall: String,
    pub hist: String,
}

pub fn report(pred: &dyn Predictor, scenes: &[Scene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let samples = evaluate_all(pred, scenes)?;
    Ok(EvalReport {
        metrics: metrics_csv(&samples)?,
        recall: recall_csv(&samples),
        hist: hist_csv(&samples),
        samples,
    })
}
