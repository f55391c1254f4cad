//! Grid-based evaluation: average precision, Soft-IoU, calibration error,
//! end-point error and the flow-grounded variants of the occupancy metrics.
//!
//! Metrics are computed per timestep over the pooled queries of every scene
//! and then averaged over timesteps. A metric without a defined value (no
//! positives, empty denominators) is `None`, never zero.

use crate::geom::FlowVec;
use crate::model::{Model, ModelError, Prediction};
use crate::scene::{label_queries, LabelSlice, QueryGrid, QueryPoint, Scenario, SceneError};
use crate::train::Example;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_ECE_BINS: usize = 30;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("no scenes to evaluate")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// Mean precision at the rank of each positive after a stable descending
/// sort. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    (tp > 0).then(|| sum / tp as f64)
}

/// `(recall, precision)` after each distinct score threshold, highest
/// threshold first. Empty without positives.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += labels[i] as usize;
        let last_of_tie = order.get(rank + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            out.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
        }
    }
    out
}

/// `Σ o·ô / Σ (o + ô − o·ô)`; `None` when the denominator is zero.
pub fn soft_iou(labels: &[f64], probs: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), probs.len(), "labels and probs differ in length");
    let (mut inter, mut union) = (0.0, 0.0);
    for (&o, &p) in labels.iter().zip(probs) {
        inter += o * p;
        union += o + p - o * p;
    }
    (union > 0.0).then(|| inter / union)
}

/// One equal-width confidence bin of a reliability diagram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_conf: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

impl CalibrationBin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.mean_conf).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `Σ_b (n_b / N) |acc_b − conf_b|`, zero for an empty set.
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

pub fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor() as usize).min(bins - 1)
}

/// Confidence is the predicted occupancy probability; accuracy is the
/// fraction of occupied labels in the bin.
pub fn expected_calibration_error(labels: &[bool], probs: &[f64], bins: usize) -> Calibration {
    assert!(bins >= 1, "at least one bin");
    assert_eq!(labels.len(), probs.len(), "labels and probs differ in length");
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut pos = vec![0.0; bins];
    for (&o, &p) in labels.iter().zip(probs) {
        let b = bin_index(p, bins);
        count[b] += 1;
        conf[b] += p;
        pos[b] += f64::from(u8::from(o));
    }
    let n = labels.len();
    let mut ece = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (mean_conf, accuracy) = if count[b] > 0 {
                (conf[b] / count[b] as f64, pos[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            if n > 0 {
                ece += count[b] as f64 / n as f64 * (accuracy - mean_conf).abs();
            }
            CalibrationBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_conf,
                accuracy,
            }
        })
        .collect();
    Calibration { ece, bins: table }
}

/// Mean flow error over occupied queries; `None` without any.
pub fn end_point_error(occ: &[bool], flow: &[FlowVec], pred: &[FlowVec]) -> Option<f64> {
    assert!(occ.len() == flow.len() && flow.len() == pred.len(), "inputs differ in length");
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..occ.len() {
        if occ[i] {
            sum += (flow[i].dx - pred[i].dx).hypot(flow[i].dy - pred[i].dy);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

// ---------------------------------------------------------------------------
// Flow-grounded occupancy
// ---------------------------------------------------------------------------

/// Placement of a row-major `(ny, nx)` raster of cell values; row 0 is the
/// minimum y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterFrame {
    pub x_min: f64,
    pub y_min: f64,
    pub res: f64,
    pub nx: usize,
    pub ny: usize,
}

impl RasterFrame {
    pub fn of_grid(g: &QueryGrid) -> Self {
        Self {
            x_min: g.roi.x_min(),
            y_min: g.roi.y_min(),
            res: g.spatial_res,
            nx: g.nx,
            ny: g.ny,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroid(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.res,
            self.y_min + (row as f64 + 0.5) * self.res,
        )
    }

    /// Bilinear sample between centroids; values outside the raster are 0.
    pub fn sample(&self, data: &[f64], x: f64, y: f64) -> f64 {
        let cx = (x - self.x_min) / self.res - 0.5;
        let cy = (y - self.y_min) / self.res - 0.5;
        let (x0, y0) = (cx.floor(), cy.floor());
        let (fx, fy) = (cx - x0, cy - y0);
        let at = |r: f64, c: f64| -> f64 {
            if r < 0.0 || c < 0.0 || r >= self.ny as f64 || c >= self.nx as f64 {
                0.0
            } else {
                data[r as usize * self.nx + c as usize]
            }
        };
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
            + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub frame: RasterFrame,
    pub data: Vec<f64>,
}

/// Backwards flow per cell, meters per label step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRaster {
    pub frame: RasterFrame,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// `O_{t−1}` gathered at `(x, y) + f̂(x, y)`, gated by `Ô_t`.
pub fn flow_grounded_occupancy(prev: &Raster, flow: &FlowRaster, occ: &Raster) -> Result<Raster> {
    let f = prev.frame;
    if flow.frame != f || occ.frame != f {
        return Err(EvalError::FrameMismatch("flow-grounded rasters must share one frame".into()));
    }
    for (name, len) in [("prev", prev.data.len()), ("dx", flow.dx.len()), ("dy", flow.dy.len()), ("occ", occ.data.len())] {
        if len != f.len() {
            return Err(EvalError::Length(format!("{name} has {len} cells, frame has {}", f.len())));
        }
    }
    let mut data = Vec::with_capacity(f.len());
    for r in 0..f.ny {
        for c in 0..f.nx {
            let i = r * f.nx + c;
            let (x, y) = f.centroid(r, c);
            let warped = f.sample(&prev.data, x + flow.dx[i], y + flow.dy[i]);
            data.push(warped * occ.data[i]);
        }
    }
    Ok(Raster { frame: f, data })
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Anything that predicts occupancy and flow at continuous queries of a scene.
pub trait Predictor: Sync {
    fn predict(&self, ex: &Example, qs: &[QueryPoint]) -> Result<Vec<Prediction>>;
}

/// Returns the labels as predictions.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, ex: &Example, qs: &[QueryPoint]) -> Result<Vec<Prediction>> {
        Ok(label_queries(&ex.scenario, qs)
            .into_iter()
            .map(|l| Prediction {
                occ_logit: if l.occ { f64::INFINITY } else { f64::NEG_INFINITY },
                occ_prob: if l.occ { 1.0 } else { 0.0 },
                flow: l.flow.unwrap_or_default(),
            })
            .collect())
    }
}

/// Same probability and zero flow everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, _ex: &Example, qs: &[QueryPoint]) -> Result<Vec<Prediction>> {
        let p = self.0;
        Ok(vec![
            Prediction {
                occ_logit: (p / (1.0 - p)).ln(),
                occ_prob: p,
                flow: FlowVec::default(),
            };
            qs.len()
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Implicit,
    Explicit,
}

impl std::str::FromStr for DecoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "implicit" => Ok(Self::Implicit),
            "explicit" => Ok(Self::Explicit),
            _ => Err(format!("unknown decoder {s:?} (expected implicit or explicit)")),
        }
    }
}

/// A trained model queried through one of its decoders. The explicit
/// decoder answers off-grid queries by interpolating its dense output.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a> {
    pub model: &'a Model<f32>,
    pub decoder: DecoderKind,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, ex: &Example, qs: &[QueryPoint]) -> Result<Vec<Prediction>> {
        let fm = self.model.encode_scene(&ex.lidar, &ex.map)?;
        match self.decoder {
            DecoderKind::Implicit => Ok(self.model.predict(&fm, qs)?),
            DecoderKind::Explicit => {
                let grids = self.model.explicit_decode(&fm)?;
                Ok(qs.iter().map(|q| grids.query(q)).collect::<std::result::Result<_, _>>()?)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub spatial_res: f64,
    /// Seconds between evaluated timesteps.
    pub temporal_res: f64,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            spatial_res: 0.5,
            temporal_res: 0.5,
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spatial_res > 0.0 && self.temporal_res > 0.0) {
            return Err(EvalError::Config("resolutions must be positive".into()));
        }
        if self.ece_bins == 0 {
            return Err(EvalError::Config("ece_bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// Labels and predictions of one timestep, pooled over scenes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepFrame {
    pub t: f64,
    pub occ: Vec<bool>,
    pub prob: Vec<f64>,
    /// Zero where unoccupied.
    pub flow: Vec<FlowVec>,
    pub pred_flow: Vec<FlowVec>,
    /// Flow-grounded occupancy at the same cells.
    pub grounded: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFrame {
    pub steps: Vec<StepFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: f64,
    pub n: usize,
    pub positives: usize,
    pub ap: Option<f64>,
    pub soft_iou: Option<f64>,
    pub ece: f64,
    pub epe: Option<f64>,
    pub fg_ap: Option<f64>,
    pub fg_soft_iou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean of the defined per-timestep APs.
    pub map: Option<f64>,
    pub soft_iou: Option<f64>,
    pub ece_mean: f64,
    /// Sum of per-timestep ECEs.
    pub ece_sum: f64,
    pub epe: Option<f64>,
    pub fg_map: Option<f64>,
    pub fg_soft_iou: Option<f64>,
    /// Timesteps excluded from `map` for lack of positives.
    pub undefined_ap_steps: usize,
    pub steps: Vec<StepMetrics>,
    /// Reliability diagram over every query of every timestep.
    pub reliability: Vec<CalibrationBin>,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn step_metrics(f: &StepFrame, bins: usize) -> StepMetrics {
    let labels: Vec<f64> = f.occ.iter().map(|&o| f64::from(u8::from(o))).collect();
    StepMetrics {
        t: f.t,
        n: f.occ.len(),
        positives: f.occ.iter().filter(|&&o| o).count(),
        ap: average_precision(&f.prob, &f.occ),
        soft_iou: soft_iou(&labels, &f.prob),
        ece: expected_calibration_error(&f.occ, &f.prob, bins).ece,
        epe: end_point_error(&f.occ, &f.flow, &f.pred_flow),
        fg_ap: average_precision(&f.grounded, &f.occ),
        fg_soft_iou: soft_iou(&labels, &f.grounded),
    }
}

pub fn report_from_frame(frame: &EvalFrame, bins: usize) -> MetricsReport {
    let steps: Vec<StepMetrics> = frame.steps.par_iter().map(|f| step_metrics(f, bins)).collect();
    let undefined = steps.iter().filter(|s| s.ap.is_none()).count();
    if undefined > 0 {
        log::warn!("{undefined} of {} timesteps have no positives and are excluded from mAP", steps.len());
    }
    let all_occ: Vec<bool> = frame.steps.iter().flat_map(|f| f.occ.iter().copied()).collect();
    let all_prob: Vec<f64> = frame.steps.iter().flat_map(|f| f.prob.iter().copied()).collect();
    let ece_sum: f64 = steps.iter().map(|s| s.ece).sum();
    MetricsReport {
        map: mean_defined(steps.iter().map(|s| s.ap)),
        soft_iou: mean_defined(steps.iter().map(|s| s.soft_iou)),
        ece_mean: if steps.is_empty() { 0.0 } else { ece_sum / steps.len() as f64 },
        ece_sum,
        epe: mean_defined(steps.iter().map(|s| s.epe)),
        fg_map: mean_defined(steps.iter().map(|s| s.fg_ap)),
        fg_soft_iou: mean_defined(steps.iter().map(|s| s.fg_soft_iou)),
        undefined_ap_steps: undefined,
        reliability: expected_calibration_error(&all_occ, &all_prob, bins).bins,
        steps,
    }
}

/// Per-timestep frames of one scene on its regular query grid.
fn scene_frames(p: &dyn Predictor, ex: &Example, cfg: &EvalConfig) -> Result<(Vec<f64>, Vec<StepFrame>)> {
    let scn: &Scenario = &ex.scenario;
    let grid = QueryGrid::new(scn.roi, scn.horizon, cfg.spatial_res, cfg.temporal_res)?;
    let rf = RasterFrame::of_grid(&grid);
    let qs = grid.points();
    let preds = p.predict(ex, &qs)?;
    if preds.len() != qs.len() {
        return Err(EvalError::Length(format!("{} predictions for {} queries", preds.len(), qs.len())));
    }
    let labels = label_queries(scn, &qs);
    let per = grid.cells_per_slice();
    let mut steps = Vec::with_capacity(grid.times.len());
    for (k, &t) in grid.times.iter().enumerate() {
        let range = k * per..(k + 1) * per;
        let pr = &preds[range.clone()];
        let lb = &labels[range];
        let prev_slice = LabelSlice::new(scn, t - scn.label_dt);
        let prev = Raster {
            frame: rf,
            data: qs[..per]
                .iter()
                .map(|q| f64::from(u8::from(prev_slice.occupied(q.x, q.y))))
                .collect(),
        };
        let flow = FlowRaster {
            frame: rf,
            dx: pr.iter().map(|p| p.flow.dx).collect(),
            dy: pr.iter().map(|p| p.flow.dy).collect(),
        };
        let occ = Raster {
            frame: rf,
            data: pr.iter().map(|p| p.occ_prob).collect(),
        };
        let grounded = flow_grounded_occupancy(&prev, &flow, &occ)?.data;
        steps.push(StepFrame {
            t,
            occ: lb.iter().map(|l| l.occ).collect(),
            prob: occ.data,
            flow: lb.iter().map(|l| l.flow.unwrap_or_default()).collect(),
            pred_flow: pr.iter().map(|p| p.flow).collect(),
            grounded,
        });
    }
    Ok((grid.times, steps))
}

/// Builds grid queries for every scene, labels them and pools them per
/// timestep. Scenes must share a horizon.
pub fn build_frame(p: &dyn Predictor, data: &[Example], cfg: &EvalConfig) -> Result<EvalFrame> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_scene: Vec<_> = data.par_iter().map(|ex| scene_frames(p, ex, cfg)).collect::<Result<_>>()?;
    let times = per_scene[0].0.clone();
    let mut steps: Vec<StepFrame> = times.iter().map(|&t| StepFrame { t, ..Default::default() }).collect();
    for (ts, frames) in per_scene {
        if ts != times {
            return Err(EvalError::FrameMismatch("scenes have different evaluation timesteps".into()));
        }
        for (dst, src) in steps.iter_mut().zip(frames) {
            dst.occ.extend(src.occ);
            dst.prob.extend(src.prob);
            dst.flow.extend(src.flow);
            dst.pred_flow.extend(src.pred_flow);
            dst.grounded.extend(src.grounded);
        }
    }
    Ok(EvalFrame { steps })
}

pub fn evaluate(p: &dyn Predictor, data: &[Example], cfg: &EvalConfig) -> Result<MetricsReport> {
    let frame = build_frame(p, data, cfg)?;
    Ok(report_from_frame(&frame, cfg.ece_bins))
}

/// [`evaluate`] at a fine temporal resolution, for metric-versus-time curves.
pub fn metrics_over_time(p: &dyn Predictor, data: &[Example], spatial_res: f64, temporal_res: f64) -> Result<MetricsReport> {
    let cfg = EvalConfig {
        spatial_res,
        temporal_res,
        ..EvalConfig::default()
    };
    evaluate(p, data, &cfg)
}

/// For each timestep strictly between two label steps, whether its AP is
/// below the mean AP of the enclosing label steps. Steps whose neighbours
/// lack an AP are skipped.
pub fn off_grid_dips(steps: &[StepMetrics], label_dt: f64) -> Vec<(f64, bool)> {
    let on_grid = |t: f64| ((t / label_dt) - (t / label_dt).round()).abs() < 1e-6;
    let ap_at = |t: f64| {
        steps
            .iter()
            .find(|s| (s.t - t).abs() < 1e-6)
            .and_then(|s| s.ap)
    };
    steps
        .iter()
        .filter(|s| !on_grid(s.t))
        .filter_map(|s| {
            let lo = (s.t / label_dt).floor() * label_dt;
            let (a, b, v) = (ap_at(lo)?, ap_at(lo + label_dt)?, s.ap?);
            Some((s.t, v < 0.5 * (a + b)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str = "t,n,positives,ap,soft_iou,ece,epe,fg_ap,fg_soft_iou,ece_sum";
pub const RELIABILITY_HEADER: &str = "bin,lo,hi,count,mean_conf,accuracy,gap";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// One row per timestep and a final `all` row holding the aggregates.
    /// Undefined values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{METRICS_HEADER}").unwrap();
        for m in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},",
                m.t,
                m.n,
                m.positives,
                opt(m.ap),
                opt(m.soft_iou),
                m.ece,
                opt(m.epe),
                opt(m.fg_ap),
                opt(m.fg_soft_iou)
            )
            .unwrap();
        }
        let n: usize = self.steps.iter().map(|m| m.n).sum();
        let pos: usize = self.steps.iter().map(|m| m.positives).sum();
        writeln!(
            s,
            "all,{n},{pos},{},{},{},{},{},{},{}",
            opt(self.map),
            opt(self.soft_iou),
            self.ece_mean,
            opt(self.epe),
            opt(self.fg_map),
            opt(self.fg_soft_iou),
            self.ece_sum
        )
        .unwrap();
        s
    }

    pub fn reliability_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{RELIABILITY_HEADER}").unwrap();
        for (i, b) in self.reliability.iter().enumerate() {
            writeln!(s, "{i},{},{},{},{},{},{}", b.lo, b.hi, b.count, b.mean_conf, b.accuracy, b.gap()).unwrap();
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>_reliability.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(io(csv.clone()))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(io(json.clone()))?;
        let rel = dir.join(format!("{stem}_reliability.csv"));
        fs::write(&rel, self.reliability_csv()).map_err(io(rel.clone()))?;
        Ok(())
    }
}
