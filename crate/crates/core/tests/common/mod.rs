//! Brute-force oracles shared by the integration tests. None of them call
//! into the library's geometry or metric code.
#![allow(dead_code)]

use occflow_core::geom::BoxState;
use occflow_core::scene::Scenario;

// ---------------------------------------------------------------------------
// Boxes
// ---------------------------------------------------------------------------

/// An oriented rectangle as its corners in counter-clockwise order.
#[derive(Debug, Clone, Copy)]
pub struct Quad(pub [(f64, f64); 4]);

impl Quad {
    pub fn new(x: f64, y: f64, heading: f64, length: f64, width: f64) -> Self {
        let (c, s) = (heading.cos(), heading.sin());
        let (a, b) = (length / 2.0, width / 2.0);
        let at = |u: f64, v: f64| (x + c * u - s * v, y + s * u + c * v);
        Quad([at(a, b), at(-a, b), at(-a, -b), at(a, -b)])
    }

    pub fn of(b: &BoxState) -> Self {
        Self::new(b.pose.x, b.pose.y, b.pose.heading, b.length, b.width)
    }

    fn edges(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        (0..4).map(move |i| (self.0[i], self.0[(i + 1) % 4]))
    }

    /// Every edge cross product is non-negative for a CCW polygon.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        self.edges().all(|(a, b)| cross(a, b, p) >= 0.0)
    }

    pub fn boundary_distance(&self, p: (f64, f64)) -> f64 {
        self.edges().map(|(a, b)| segment_distance(a, b, p)).fold(f64::INFINITY, f64::min)
    }

    /// Edge crossing or containment of a corner, the closed-set rule.
    pub fn intersects(&self, other: &Quad) -> bool {
        self.edges().any(|(a, b)| other.edges().any(|(c, d)| segments_intersect(a, b, c, d)))
            || other.0.iter().any(|&p| self.contains(p))
            || self.0.iter().any(|&p| other.contains(p))
    }
}

fn cross(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn segment_distance(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (a.0 + t * dx - p.0).hypot(a.1 + t * dy - p.1)
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let (d1, d2) = (cross(c, d, a), cross(c, d, b));
    let (d3, d4) = (cross(a, b, c), cross(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        r.0 >= p.0.min(q.0) && r.0 <= p.0.max(q.0) && r.1 >= p.1.min(q.1) && r.1 <= p.1.max(q.1)
    };
    (d1 == 0.0 && on(c, d, a)) || (d2 == 0.0 && on(c, d, b)) || (d3 == 0.0 && on(a, b, c)) || (d4 == 0.0 && on(a, b, d))
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Pose `(x, y, heading)` and size of an agent at `t`, re-derived from the
/// raw track: linear between the bracketing label steps, heading along the
/// shorter arc.
pub fn agent_box(scn: &Scenario, agent: usize, t: f64) -> Option<(f64, f64, f64, f64, f64)> {
    let per = (scn.label_dt / scn.sim_dt).round() as i64;
    let u = t / scn.label_dt;
    let k = (u + 1e-9).floor();
    let w = u - k;
    let step = |k: i64| -> Option<&BoxState> {
        let s = scn.current_step as i64 + k * per;
        if s < 0 {
            return None;
        }
        scn.agents[agent].states.get(s as usize)
    };
    let a = step(k as i64)?;
    if w.abs() < 1e-9 {
        return Some((a.pose.x, a.pose.y, a.pose.heading, a.length, a.width));
    }
    let b = step(k as i64 + 1)?;
    let dh = (b.pose.heading - a.pose.heading).sin().atan2((b.pose.heading - a.pose.heading).cos());
    Some((
        a.pose.x + w * (b.pose.x - a.pose.x),
        a.pose.y + w * (b.pose.y - a.pose.y),
        a.pose.heading + w * dh,
        a.length,
        a.width,
    ))
}

pub fn quads_at(scn: &Scenario, t: f64) -> Vec<Option<Quad>> {
    (0..scn.agents.len())
        .map(|a| agent_box(scn, a, t).map(|(x, y, h, l, w)| Quad::new(x, y, h, l, w)))
        .collect()
}

/// Occupancy read off a raster of `res`-sized cells, each marked when its
/// center lies inside some box.
pub fn raster_occupied(quads: &[Option<Quad>], x: f64, y: f64, res: f64) -> bool {
    let cx = ((x / res).floor() + 0.5) * res;
    let cy = ((y / res).floor() + 0.5) * res;
    quads.iter().flatten().any(|q| q.contains((cx, cy)))
}

/// Distance from `(x, y)` to the nearest box edge.
pub fn boundary_distance(quads: &[Option<Quad>], x: f64, y: f64) -> f64 {
    quads.iter().flatten().map(|q| q.boundary_distance((x, y))).fold(f64::INFINITY, f64::min)
}

type Mat3 = [[f64; 3]; 3];

fn pose_matrix(x: f64, y: f64, h: f64) -> Mat3 {
    [[h.cos(), -h.sin(), x], [h.sin(), h.cos(), y], [0.0, 0.0, 1.0]]
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// General inverse by cofactors.
fn inverse(m: &Mat3) -> Mat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det: f64 = (0..3).map(|j| m[0][j] * cof[0][j]).sum();
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = cof[j][i] / det;
        }
    }
    inv
}

/// Backwards flow `T_prev T_cur⁻¹ p − p` of the agent occupying `(x, y)` at
/// `t`, for a point inside exactly one box; `None` otherwise.
pub fn se2_flow(scn: &Scenario, x: f64, y: f64, t: f64) -> Option<(f64, f64)> {
    let quads = quads_at(scn, t);
    let inside: Vec<usize> = (0..quads.len()).filter(|&a| quads[a].is_some_and(|q| q.contains((x, y)))).collect();
    let [a] = inside[..] else { return None };
    let (cx, cy, ch, _, _) = agent_box(scn, a, t)?;
    let (px, py, ph, _, _) = agent_box(scn, a, t - scn.label_dt).unwrap_or((cx, cy, ch, 0.0, 0.0));
    let m = mul(&pose_matrix(px, py, ph), &inverse(&pose_matrix(cx, cy, ch)));
    let prev = (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]);
    Some((prev.0 - x, prev.1 - y))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Precision at each positive's rank, where rank counts strictly higher
/// scores plus equal scores at lower indices.
pub fn ap_oracle(s: &[f64], o: &[bool]) -> Option<f64> {
    let n = s.len();
    let rank = |i: usize| (0..n).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count() + 1;
    let ranks: Vec<usize> = (0..n).map(rank).collect();
    let pos: Vec<usize> = (0..n).filter(|&i| o[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &i in &pos {
        let tp = pos.iter().filter(|&&j| ranks[j] <= ranks[i]).count();
        sum += tp as f64 / ranks[i] as f64;
    }
    Some(sum / pos.len() as f64)
}

/// Binary-label Soft-IoU: the intersection is the mass on positives, the
/// union is the positive count plus the mass on negatives.
pub fn soft_iou_oracle(o: &[bool], p: &[f64]) -> Option<f64> {
    let inter: f64 = (0..o.len()).filter(|&i| o[i]).map(|i| p[i]).sum();
    let union = o.iter().filter(|&&v| v).count() as f64 + (0..o.len()).filter(|&i| !o[i]).map(|i| p[i]).sum::<f64>();
    (union > 0.0).then(|| inter / union)
}

/// Bins chosen by interval comparison; the last bin is closed.
pub fn ece_oracle(o: &[bool], p: &[f64], bins: usize) -> f64 {
    let n = o.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        let members: Vec<usize> = (0..o.len())
            .filter(|&i| p[i] >= lo && (p[i] < hi || (b == bins - 1 && p[i] <= hi)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let conf = members.iter().map(|&i| p[i]).sum::<f64>() / m;
        let acc = members.iter().filter(|&&i| o[i]).count() as f64 / m;
        ece += m / n * (acc - conf).abs();
    }
    ece
}

pub fn epe_oracle(o: &[bool], f: &[(f64, f64)], g: &[(f64, f64)]) -> Option<f64> {
    let errs: Vec<f64> = (0..o.len())
        .filter(|&i| o[i])
        .map(|i| ((f[i].0 - g[i].0).powi(2) + (f[i].1 - g[i].1).powi(2)).sqrt())
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}
