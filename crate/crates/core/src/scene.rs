//! Synthetic driving scenarios, a BEV LiDAR simulator and the ground-truth
//! occupancy/flow label oracles.
//!
//! Time inside a [`Scenario`] is measured in seconds relative to the current
//! timestep: negative times are history, `[0, horizon]` is the future. The
//! ego vehicle is a static point sensor at the origin and the region of
//! interest is centered on it.

use crate::geom::{self, BoxState, FlowVec, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const SHARD_SCHEMA_VERSION: u32 = 1;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("query ({x:.3}, {y:.3}, t={t:.3}) is not occupied; flow is undefined")]
    UndefinedQuery { x: f64, y: f64, t: f64 },
    #[error("track has no observed states")]
    EmptyTrack,
    #[error("query count must be positive")]
    EmptyQueryBatch,
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("unsupported schema version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Rectangular region of interest centered on the ego origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    /// Extent along `y`.
    pub h_m: f64,
    /// Extent along `x`.
    pub w_m: f64,
}

impl Roi {
    pub fn x_min(&self) -> f64 {
        -self.w_m / 2.0
    }
    pub fn y_min(&self) -> f64 {
        -self.h_m / 2.0
    }
    pub fn x_max(&self) -> f64 {
        self.w_m / 2.0
    }
    pub fn y_max(&self) -> f64 {
        self.h_m / 2.0
    }
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min() && x <= self.x_max() && y >= self.y_min() && y <= self.y_max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapTemplate {
    Straight,
    Curve,
    Intersection,
    Merge,
}

impl std::str::FromStr for MapTemplate {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "straight" => Ok(Self::Straight),
            "curve" => Ok(Self::Curve),
            "intersection" => Ok(Self::Intersection),
            "merge" => Ok(Self::Merge),
            other => Err(format!("unknown map template '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub template: MapTemplate,
    pub roi_h_m: f64,
    pub roi_w_m: f64,
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_accel: f64,
    pub max_accel: f64,
    pub min_length: f64,
    pub max_length: f64,
    pub min_width: f64,
    pub max_width: f64,
    pub lane_width: f64,
    /// Probability that an agent changes to an adjacent lane during the scenario.
    pub lane_change_prob: f64,
    pub sim_dt: f64,
    pub label_dt: f64,
    pub history_sweeps: usize,
    pub horizon: f64,
    /// Placement attempts per agent before giving up on it.
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            template: MapTemplate::Straight,
            roi_h_m: 64.0,
            roi_w_m: 64.0,
            min_agents: 2,
            max_agents: 6,
            min_speed: 0.0,
            max_speed: 10.0,
            min_accel: 0.0,
            max_accel: 0.0,
            min_length: 4.2,
            max_length: 4.8,
            min_width: 1.8,
            max_width: 2.0,
            lane_width: 3.5,
            lane_change_prob: 0.0,
            sim_dt: 0.1,
            label_dt: 0.5,
            history_sweeps: 5,
            horizon: 5.0,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn roi(&self) -> Roi {
        Roi {
            h_m: self.roi_h_m,
            w_m: self.roi_w_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if !(self.roi_h_m > 0.0 && self.roi_w_m > 0.0) {
            return bad("roi dimensions must be positive");
        }
        if self.max_agents < self.min_agents {
            return bad("max_agents < min_agents");
        }
        if !(self.min_speed >= 0.0 && self.max_speed >= self.min_speed) {
            return bad("speed range must satisfy 0 <= min_speed <= max_speed");
        }
        if self.max_accel < self.min_accel {
            return bad("max_accel < min_accel");
        }
        if !(self.min_width > 0.0 && self.max_width >= self.min_width) {
            return bad("width range invalid");
        }
        if !(self.min_length >= self.max_width && self.max_length >= self.min_length) {
            return bad("length range invalid (length must be >= width)");
        }
        if !(self.sim_dt > 0.0 && self.label_dt > 0.0 && self.horizon > 0.0) {
            return bad("sim_dt, label_dt and horizon must be positive");
        }
        let ratio = self.label_dt / self.sim_dt;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return bad("label_dt must be an integer multiple of sim_dt");
        }
        let hr = self.horizon / self.label_dt;
        if (hr - hr.round()).abs() > 1e-6 {
            return bad("horizon must be an integer multiple of label_dt");
        }
        if self.history_sweeps == 0 {
            return bad("history_sweeps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lane_change_prob) {
            return bad("lane_change_prob must lie in [0, 1]");
        }
        let (need_h, need_w) = template_min_roi(self.template, self.lane_width);
        if self.roi_h_m < need_h || self.roi_w_m < need_w {
            return Err(SceneError::InvalidConfig(format!(
                "roi {}x{} m cannot fit the {:?} template (needs at least {}x{} m)",
                self.roi_h_m, self.roi_w_m, self.template, need_h, need_w
            )));
        }
        Ok(())
    }

    /// Sim steps from the start of the track to the current timestep. Covers
    /// the LiDAR history and one label step of look-back for the flow labels.
    pub fn current_step(&self) -> usize {
        let label_back = (self.label_dt / self.sim_dt).round() as usize;
        (self.history_sweeps - 1).max(label_back)
    }

    pub fn total_steps(&self) -> usize {
        self.current_step() + (self.horizon / self.sim_dt).round() as usize + 1
    }
}

fn template_min_roi(t: MapTemplate, lane_w: f64) -> (f64, f64) {
    match t {
        // Four lanes around a median of one lane width.
        MapTemplate::Straight => (2.0 * (2.5 * lane_w + 0.5), 2.0 * lane_w),
        MapTemplate::Intersection => (4.0 * lane_w + 8.0, 4.0 * lane_w + 8.0),
        MapTemplate::Curve | MapTemplate::Merge => (40.0, 40.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    /// One state per sim step, from step 0 to the end of the horizon.
    pub states: Vec<BoxState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub template: MapTemplate,
    pub roi: Roi,
    pub sim_dt: f64,
    pub label_dt: f64,
    pub horizon: f64,
    pub history_sweeps: usize,
    pub current_step: usize,
    /// Lane centerlines, points ordered along the direction of travel.
    pub map: Vec<Vec<(f64, f64)>>,
    pub agents: Vec<AgentTrack>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
    /// Seconds after the current timestep.
    pub t: f64,
}

impl QueryPoint {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub q: QueryPoint,
    pub occ: bool,
    /// Present iff `occ`.
    pub flow: Option<FlowVec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSweep {
    /// `(p_x, p_y, p_h)` in the ego frame.
    pub points: Vec<[f64; 3]>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub rays: usize,
    pub max_range: f64,
    pub range_noise: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            rays: 720,
            max_range: 100.0,
            range_noise: 0.02,
            min_height: 0.3,
            max_height: 1.5,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Lanes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Lane {
    points: Vec<(f64, f64)>,
    cum: Vec<f64>,
    /// Lanes sharing a group id run side by side in the same direction.
    group: usize,
}

impl Lane {
    fn new(points: Vec<(f64, f64)>, group: usize) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cum.push(cum.last().unwrap() + d);
        }
        Self { points, cum, group }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and tangent heading at arc length `s` (clamped to the lane).
    fn at(&self, s: f64) -> ((f64, f64), f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let w = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        ((a.0 + (b.0 - a.0) * w, a.1 + (b.1 - a.1) * w), (b.1 - a.1).atan2(b.0 - a.0))
    }

    /// Arc length of the closest point on the lane.
    fn project(&self, p: (f64, f64)) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            let u = if len2 > 0.0 {
                (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a.0 + u * dx, a.1 + u * dy);
            let d = (p.0 - cx).hypot(p.1 - cy);
            if d < best.0 {
                best = (d, self.cum[i] + u * len2.sqrt());
            }
        }
        best.1
    }

    /// Arc-length interval whose points lie inside `roi` shrunk by `margin`.
    fn inside_interval(&self, roi: &Roi, margin: f64) -> Option<(f64, f64)> {
        let step = 0.25;
        let n = (self.length() / step).ceil() as usize;
        let mut lo = None;
        let mut hi = None;
        for k in 0..=n {
            let s = (k as f64 * step).min(self.length());
            let ((x, y), _) = self.at(s);
            let inside = x >= roi.x_min() + margin
                && x <= roi.x_max() - margin
                && y >= roi.y_min() + margin
                && y <= roi.y_max() - margin;
            if inside {
                lo.get_or_insert(s);
                hi = Some(s);
            }
        }
        Some((lo?, hi?))
    }
}

fn line(a: (f64, f64), b: (f64, f64), spacing: f64) -> Vec<(f64, f64)> {
    let n = ((b.0 - a.0).hypot(b.1 - a.1) / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let w = k as f64 / n as f64;
            (a.0 + (b.0 - a.0) * w, a.1 + (b.1 - a.1) * w)
        })
        .collect()
}

fn arc(center: (f64, f64), radius: f64, a0: f64, a1: f64, spacing: f64) -> Vec<(f64, f64)> {
    let n = ((a1 - a0).abs() * radius / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let a = a0 + (a1 - a0) * k as f64 / n as f64;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        })
        .collect()
}

fn build_lanes(cfg: &SceneConfig) -> Vec<Lane> {
    let lw = cfg.lane_width;
    let duration = cfg.total_steps() as f64 * cfg.sim_dt;
    let reach = cfg.max_speed * duration + 20.0;
    let (hx, hy) = (cfg.roi_w_m / 2.0 + reach, cfg.roi_h_m / 2.0 + reach);
    match cfg.template {
        MapTemplate::Straight => {
            // Eastbound below the median, westbound above it.
            let ys = [1.5 * lw, 2.5 * lw];
            let mut lanes = Vec::new();
            for y in ys {
                lanes.push(Lane::new(line((-hx, -y), (hx, -y), 2.0), 0));
            }
            for y in ys {
                lanes.push(Lane::new(line((hx, y), (-hx, y), 2.0), 1));
            }
            lanes
        }
        MapTemplate::Intersection => {
            let o = lw / 2.0;
            vec![
                Lane::new(line((-hx, -o), (hx, -o), 2.0), 0),
                Lane::new(line((hx, o), (-hx, o), 2.0), 1),
                Lane::new(line((o, -hy), (o, hy), 2.0), 2),
                Lane::new(line((-o, hy), (-o, -hy), 2.0), 3),
            ]
        }
        MapTemplate::Curve => {
            // A road bending left around a center above the ego.
            let r0 = cfg.roi_h_m.max(cfg.roi_w_m);
            let center = (0.0, r0);
            let sweep = ((reach + cfg.roi_w_m) / r0).min(0.9 * PI);
            let start = -PI / 2.0 - sweep;
            let end = -PI / 2.0 + sweep;
            let mut lanes = Vec::new();
            for dr in [1.5 * lw, 2.5 * lw] {
                lanes.push(Lane::new(arc(center, r0 + dr, start, end, 1.0), 0));
            }
            for dr in [-1.5 * lw, -2.5 * lw] {
                let mut pts = arc(center, r0 + dr, start, end, 1.0);
                pts.reverse();
                lanes.push(Lane::new(pts, 1));
            }
            lanes
        }
        MapTemplate::Merge => {
            let main = [-1.5 * lw, -2.5 * lw];
            let mut lanes: Vec<Lane> = main
                .iter()
                .map(|&y| Lane::new(line((-hx, y), (hx, y), 2.0), 0))
                .collect();
            // On-ramp joining the outer lane just past the ego.
            let join = (5.0, main[1]);
            let ramp_start = (-hx, main[1] - 0.4 * hx);
            let mut ramp = line(ramp_start, (-15.0, main[1] - 6.0), 2.0);
            ramp.extend(line((-15.0, main[1] - 6.0), join, 2.0).into_iter().skip(1));
            ramp.extend(line(join, (hx, main[1]), 2.0).into_iter().skip(1));
            lanes.push(Lane::new(ramp, 2));
            lanes
        }
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Pure-pursuit turn rate steering `state` toward arc length `s + lookahead`.
fn pursuit_turn_rate(state: &BoxState, lane: &Lane, s: f64, lookahead: f64) -> f64 {
    let ((tx, ty), _) = lane.at(s + lookahead);
    let (dx, dy) = (tx - state.pose.x, ty - state.pose.y);
    let ld = dx.hypot(dy);
    if ld < 1e-6 || state.speed <= 0.0 {
        return 0.0;
    }
    let alpha = geom::wrap_angle(dy.atan2(dx) - state.pose.heading);
    if alpha == 0.0 {
        return 0.0;
    }
    2.0 * state.speed * alpha.sin() / ld
}

struct AgentPlan {
    lane: usize,
    s_cur: f64,
    speed: f64,
    accel: f64,
    length: f64,
    width: f64,
    change: Option<(usize, usize)>,
}

fn simulate_agent(cfg: &SceneConfig, lanes: &[Lane], plan: &AgentPlan) -> Vec<BoxState> {
    let n = cfg.total_steps();
    let cur = cfg.current_step();
    let dt = cfg.sim_dt;
    let mut lane = &lanes[plan.lane];
    // Start far enough back that the agent reaches `s_cur` at the current step.
    let back = plan.speed * cur as f64 * dt;
    let s0 = plan.s_cur - back;
    let ((x, y), h) = lane.at(s0);
    let mut state = BoxState {
        pose: Pose2::new(x, y, h),
        length: plan.length,
        width: plan.width,
        speed: plan.speed,
        accel: plan.accel,
        turn_rate: 0.0,
    };
    let mut out = Vec::with_capacity(n);
    for step in 0..n {
        if let Some((at, target)) = plan.change {
            if step == at {
                lane = &lanes[target];
            }
        }
        let s = lane.project((state.pose.x, state.pose.y));
        let lookahead = (state.speed * 1.0).max(4.0);
        state.turn_rate = pursuit_turn_rate(&state, lane, s, lookahead);
        // Keep accelerating agents inside the configured speed band.
        state.accel = if (state.speed >= cfg.max_speed && plan.accel > 0.0)
            || (state.speed <= cfg.min_speed && plan.accel < 0.0)
        {
            0.0
        } else {
            plan.accel
        };
        out.push(state);
        state = geom::ctra_step(&state, dt);
    }
    out
}

fn tracks_overlap(a: &[BoxState], b: &[BoxState]) -> bool {
    a.iter().zip(b).any(|(x, y)| {
        let reach = (x.length + y.length) / 2.0 * std::f64::consts::SQRT_2;
        (x.pose.x - y.pose.x).hypot(x.pose.y - y.pose.y) <= reach && geom::boxes_overlap(x, y)
    })
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a scenario deterministically from `seed`.
///
/// Agents are placed one at a time on lanes so that they sit inside the RoI
/// at the current step; a placement whose track ever touches an already
/// accepted track is redrawn.
pub fn generate_scenario(cfg: &SceneConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lanes = build_lanes(cfg);
    let roi = cfg.roi();
    let intervals: Vec<Option<(f64, f64)>> = lanes.iter().map(|l| l.inside_interval(&roi, 3.0)).collect();
    let usable: Vec<usize> = (0..lanes.len()).filter(|&i| intervals[i].is_some()).collect();
    if usable.is_empty() {
        return Err(SceneError::InvalidConfig("no lane passes through the roi".into()));
    }
    let n_agents = rng.random_range(cfg.min_agents..=cfg.max_agents);
    let total = cfg.total_steps();
    let mut agents: Vec<AgentTrack> = Vec::new();
    for _ in 0..n_agents {
        for _attempt in 0..cfg.max_attempts {
            let lane = usable[rng.random_range(0..usable.len())];
            let (lo, hi) = intervals[lane].unwrap();
            let length = uniform(&mut rng, cfg.min_length, cfg.max_length);
            let width = uniform(&mut rng, cfg.min_width, cfg.max_width);
            let plan = AgentPlan {
                lane,
                s_cur: uniform(&mut rng, lo, hi),
                speed: uniform(&mut rng, cfg.min_speed, cfg.max_speed),
                accel: uniform(&mut rng, cfg.min_accel, cfg.max_accel),
                length,
                width: width.min(length),
                change: {
                    let siblings: Vec<usize> = (0..lanes.len())
                        .filter(|&j| j != lane && lanes[j].group == lanes[lane].group)
                        .collect();
                    if !siblings.is_empty() && rng.random::<f64>() < cfg.lane_change_prob {
                        let at = rng.random_range(cfg.current_step()..total);
                        Some((at, siblings[rng.random_range(0..siblings.len())]))
                    } else {
                        None
                    }
                },
            };
            let states = simulate_agent(cfg, &lanes, &plan);
            if agents.iter().all(|a| !tracks_overlap(&a.states, &states)) {
                agents.push(AgentTrack {
                    id: agents.len() as u32,
                    states,
                });
                break;
            }
        }
    }
    if agents.len() < cfg.min_agents {
        return Err(SceneError::InvalidConfig(format!(
            "could only place {} of at least {} agents without overlap",
            agents.len(),
            cfg.min_agents
        )));
    }
    Ok(Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        seed,
        template: cfg.template,
        roi,
        sim_dt: cfg.sim_dt,
        label_dt: cfg.label_dt,
        horizon: cfg.horizon,
        history_sweeps: cfg.history_sweeps,
        current_step: cfg.current_step(),
        map: lanes.into_iter().map(|l| l.points).collect(),
        agents,
    })
}

// ---------------------------------------------------------------------------
// Scenario queries
// ---------------------------------------------------------------------------

impl Scenario {
    pub fn steps_per_label(&self) -> usize {
        (self.label_dt / self.sim_dt).round() as usize
    }

    pub fn step_time(&self, step: usize) -> f64 {
        (step as f64 - self.current_step as f64) * self.sim_dt
    }

    /// Sim step of label step `k` (label step 0 is the current step).
    fn label_sim_step(&self, k: i64) -> Option<usize> {
        let s = self.current_step as i64 + k * self.steps_per_label() as i64;
        (s >= 0).then_some(s as usize)
    }

    /// Box of `agent` at time `t`, interpolated between the bracketing label
    /// steps (position linearly, heading along the shortest arc).
    pub fn box_at(&self, agent: usize, t: f64) -> Option<BoxState> {
        let track = &self.agents[agent].states;
        let u = t / self.label_dt;
        let k = (u + TIME_EPS).floor();
        let w = u - k;
        let s0 = self.label_sim_step(k as i64)?;
        let b0 = *track.get(s0)?;
        if w.abs() < TIME_EPS {
            return Some(b0);
        }
        let s1 = self.label_sim_step(k as i64 + 1)?;
        let b1 = track.get(s1)?;
        Some(b0.with_pose(b0.pose.lerp(&b1.pose, w)))
    }

    /// All agent boxes at time `t`; agents outside their track span are `None`.
    pub fn boxes_at(&self, t: f64) -> Vec<Option<BoxState>> {
        (0..self.agents.len()).map(|a| self.box_at(a, t)).collect()
    }

    /// Boxes at a sim step, without interpolation.
    pub fn boxes_at_step(&self, step: usize) -> Vec<BoxState> {
        self.agents.iter().filter_map(|a| a.states.get(step).copied()).collect()
    }

    /// Number of label steps in `[0, horizon]`, including `t = 0`.
    pub fn label_steps(&self) -> usize {
        (self.horizon / self.label_dt).round() as usize + 1
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("scenario serializes");
        fs::write(path, text).map_err(|source| SceneError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let scn: Scenario = serde_json::from_str(&text).map_err(|source| SceneError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if scn.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(SceneError::Schema {
                found: scn.schema_version,
                expected: SCENARIO_SCHEMA_VERSION,
            });
        }
        Ok(scn)
    }
}

/// Boxes at a query time and one label step earlier, for labeling many
/// queries that share a timestamp.
#[derive(Debug, Clone)]
pub struct LabelSlice {
    pub t: f64,
    pub now: Vec<Option<BoxState>>,
    pub prev: Vec<Option<BoxState>>,
}

impl LabelSlice {
    pub fn new(scn: &Scenario, t: f64) -> Self {
        Self {
            t,
            now: scn.boxes_at(t),
            prev: scn.boxes_at(t - scn.label_dt),
        }
    }

    /// Occupying agent; overlaps resolve to the nearer box center.
    pub fn occupant(&self, x: f64, y: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in self.now.iter().enumerate() {
            let Some(b) = b else { continue };
            if geom::point_in_box(b, (x, y)) {
                let d = (b.pose.x - x).hypot(b.pose.y - y);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn occupied(&self, x: f64, y: f64) -> bool {
        self.now.iter().flatten().any(|b| geom::point_in_box(b, (x, y)))
    }

    pub fn flow(&self, x: f64, y: f64) -> Option<FlowVec> {
        let i = self.occupant(x, y)?;
        let cur = self.now[i]?;
        // Without a previous pose the agent is treated as stationary.
        let prev = self.prev[i].unwrap_or(cur);
        Some(geom::rigid_backwards_flow(&prev.pose, &cur.pose, (x, y)))
    }

    pub fn label(&self, q: QueryPoint) -> LabeledQuery {
        let flow = self.flow(q.x, q.y);
        LabeledQuery {
            q,
            occ: flow.is_some(),
            flow,
        }
    }
}

pub fn occupancy_label(scn: &Scenario, q: &QueryPoint) -> bool {
    (0..scn.agents.len()).any(|a| scn.box_at(a, q.t).is_some_and(|b| geom::point_in_box(&b, (q.x, q.y))))
}

pub fn flow_label(scn: &Scenario, q: &QueryPoint) -> Result<FlowVec> {
    LabelSlice::new(scn, q.t).flow(q.x, q.y).ok_or(SceneError::UndefinedQuery {
        x: q.x,
        y: q.y,
        t: q.t,
    })
}

/// Labels a batch, sharing box interpolation across equal timestamps.
pub fn label_queries(scn: &Scenario, qs: &[QueryPoint]) -> Vec<LabeledQuery> {
    let mut cache: Option<LabelSlice> = None;
    qs.iter()
        .map(|q| {
            if cache.as_ref().is_none_or(|c| c.t != q.t) {
                cache = Some(LabelSlice::new(scn, q.t));
            }
            cache.as_ref().unwrap().label(*q)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// LiDAR
// ---------------------------------------------------------------------------

/// Distance along the unit ray `(c, s)` from the origin to segment `a`-`b`.
fn ray_segment(c: f64, s: f64, a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let den = c * ey - s * ex;
    if den.abs() < 1e-12 {
        return None;
    }
    let t = (a.0 * ey - a.1 * ex) / den;
    let u = (a.0 * s - a.1 * c) / den;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Casts equally spaced azimuth rays from the ego origin against the agent
/// boxes at `step` and returns the nearest hit of each ray.
pub fn simulate_lidar(scn: &Scenario, step: usize, sensor: &SensorConfig) -> PointSweep {
    let boxes = scn.boxes_at_step(step);
    let mut rng = ChaCha8Rng::seed_from_u64(sensor.seed ^ (scn.seed.rotate_left(17)) ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let noise = Normal::new(0.0, sensor.range_noise.max(0.0)).expect("finite sigma");
    let edges: Vec<[(f64, f64); 4]> = boxes.iter().map(|b| b.corners()).collect();
    let mut points = Vec::new();
    for i in 0..sensor.rays {
        let az = 2.0 * PI * i as f64 / sensor.rays as f64;
        let (s, c) = az.sin_cos();
        let mut best = f64::INFINITY;
        for cs in &edges {
            for k in 0..4 {
                if let Some(t) = ray_segment(c, s, cs[k], cs[(k + 1) % 4]) {
                    best = best.min(t);
                }
            }
        }
        if best <= sensor.max_range {
            let r = if sensor.range_noise > 0.0 {
                best + noise.sample(&mut rng)
            } else {
                best
            };
            let h = uniform(&mut rng, sensor.min_height, sensor.max_height);
            points.push([r * c, r * s, h]);
        }
    }
    PointSweep {
        points,
        timestamp: scn.step_time(step),
    }
}

/// The history sweeps ending at the current step, most recent last.
pub fn history_sweeps(scn: &Scenario, sensor: &SensorConfig) -> Vec<PointSweep> {
    let first = scn.current_step + 1 - scn.history_sweeps;
    (first..=scn.current_step).map(|s| simulate_lidar(scn, s, sensor)).collect()
}

// ---------------------------------------------------------------------------
// Track gap filling
// ---------------------------------------------------------------------------

/// Fills unobserved steps of a track sampled every `dt` seconds.
///
/// Interior gaps roll forward from the earlier observation with turn rate and
/// acceleration fitted to the two bracketing observations; leading and
/// trailing gaps extrapolate the nearest observation with its own CTRA state.
pub fn fill_missing_tracks(track: &[Option<BoxState>], dt: f64) -> Result<Vec<BoxState>> {
    let observed: Vec<usize> = (0..track.len()).filter(|&i| track[i].is_some()).collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(SceneError::EmptyTrack),
    };
    let mut out: Vec<BoxState> = Vec::with_capacity(track.len());
    for i in 0..track.len() {
        let filled = match track[i] {
            Some(b) => b,
            None if i < first => {
                let b = track[first].unwrap();
                geom::ctra_step(&b, -((first - i) as f64) * dt)
            }
            None if i > last => {
                let b = track[last].unwrap();
                geom::ctra_step(&b, (i - last) as f64 * dt)
            }
            None => {
                let lo = observed[observed.partition_point(|&o| o < i) - 1];
                let hi = observed[observed.partition_point(|&o| o < i)];
                let (a, b) = (track[lo].unwrap(), track[hi].unwrap());
                let span = (hi - lo) as f64 * dt;
                let fitted = BoxState {
                    turn_rate: geom::wrap_angle(b.pose.heading - a.pose.heading) / span,
                    accel: (b.speed - a.speed) / span,
                    ..a
                };
                let mut s = geom::ctra_step(&fitted, (i - lo) as f64 * dt);
                s.turn_rate = fitted.turn_rate;
                s.accel = fitted.accel;
                s
            }
        };
        out.push(filled);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Query generation
// ---------------------------------------------------------------------------

/// `n` i.i.d. uniform queries over RoI x `[0, horizon]`.
pub fn sample_queries(roi: &Roi, horizon: f64, n: usize, seed: u64) -> Result<Vec<QueryPoint>> {
    if n == 0 {
        return Err(SceneError::EmptyQueryBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let x = roi.x_min() + rng.random::<f64>() * roi.w_m;
            let y = roi.y_min() + rng.random::<f64>() * roi.h_m;
            let t = rng.random::<f64>() * horizon;
            QueryPoint::new(x, y, t)
        })
        .collect())
}

/// Regular grid of cell-centroid queries. Points are ordered by time slice,
/// then row (y), then column (x).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGrid {
    pub roi: Roi,
    pub spatial_res: f64,
    pub nx: usize,
    pub ny: usize,
    pub times: Vec<f64>,
}

impl QueryGrid {
    pub fn new(roi: Roi, horizon: f64, spatial_res: f64, temporal_res: f64) -> Result<Self> {
        for r in [spatial_res, temporal_res] {
            if !(r > 0.0) {
                return Err(SceneError::BadResolution(r));
            }
        }
        let nt = (horizon / temporal_res + 1e-9).floor() as usize + 1;
        Ok(Self {
            roi,
            spatial_res,
            nx: (roi.w_m / spatial_res - 1e-9).ceil() as usize,
            ny: (roi.h_m / spatial_res - 1e-9).ceil() as usize,
            times: (0..nt).map(|k| k as f64 * temporal_res).collect(),
        })
    }

    pub fn cells_per_slice(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.cells_per_slice() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroid(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.roi.x_min() + (col as f64 + 0.5) * self.spatial_res,
            self.roi.y_min() + (row as f64 + 0.5) * self.spatial_res,
        )
    }

    pub fn slice(&self, t: f64) -> Vec<QueryPoint> {
        let mut out = Vec::with_capacity(self.cells_per_slice());
        for r in 0..self.ny {
            for c in 0..self.nx {
                let (x, y) = self.centroid(r, c);
                out.push(QueryPoint::new(x, y, t));
            }
        }
        out
    }

    pub fn points(&self) -> Vec<QueryPoint> {
        self.times.iter().flat_map(|&t| self.slice(t)).collect()
    }
}

pub fn grid_queries(scn: &Scenario, spatial_res: f64, temporal_res: f64) -> Result<QueryGrid> {
    QueryGrid::new(scn.roi, scn.horizon, spatial_res, temporal_res)
}

// ---------------------------------------------------------------------------
// Dataset shards
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub schema_version: u32,
    pub count: usize,
    pub base_seed: u64,
    pub config: SceneConfig,
    pub files: Vec<String>,
}

/// Generates `count` scenarios with seeds `base_seed + i` into `dir`.
pub fn write_shard(dir: &Path, cfg: &SceneConfig, base_seed: u64, count: usize) -> Result<ShardManifest> {
    let io = |source| SceneError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let scn = generate_scenario(cfg, base_seed.wrapping_add(i as u64))?;
        let name = format!("scene_{i:05}.json");
        scn.save_json(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = ShardManifest {
        schema_version: SHARD_SCHEMA_VERSION,
        count,
        base_seed,
        config: cfg.clone(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text).map_err(io)?;
    Ok(manifest)
}

pub fn read_shard_manifest(dir: &Path) -> Result<ShardManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|source| SceneError::Io {
        path: path.clone(),
        source,
    })?;
    let m: ShardManifest = serde_json::from_str(&text).map_err(|source| SceneError::Json { path, source })?;
    if m.schema_version != SHARD_SCHEMA_VERSION {
        return Err(SceneError::Schema {
            found: m.schema_version,
            expected: SHARD_SCHEMA_VERSION,
        });
    }
    Ok(m)
}

pub fn load_shard(dir: &Path) -> Result<Vec<Scenario>> {
    let m = read_shard_manifest(dir)?;
    m.files.iter().map(|f| Scenario::load_json(&dir.join(f))).collect()
}
