//! Library outputs against the brute-force oracles in `common`, at a size
//! that keeps the regular test run fast. The acceptance target repeats
//! these at full size.

mod common;

use common::*;
use occflow_core::eval::{average_precision, end_point_error, expected_calibration_error, soft_iou};
use occflow_core::geom::FlowVec;
use occflow_core::scene::{flow_label, generate_scenario, occupancy_label, MapTemplate, QueryPoint, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn intersection_agents_never_overlap() {
    let cfg = SceneConfig {
        template: MapTemplate::Intersection,
        min_agents: 4,
        max_agents: 4,
        ..SceneConfig::default()
    };
    let scn = generate_scenario(&cfg, 11).unwrap();
    assert_eq!(scn.agents.len(), 4);
    let steps = scn.agents[0].states.len();
    for s in 0..steps {
        let quads: Vec<Quad> = scn.agents.iter().map(|a| Quad::of(&a.states[s])).collect();
        for i in 0..quads.len() {
            for j in i + 1..quads.len() {
                assert!(!quads[i].intersects(&quads[j]), "agents {i} and {j} overlap at step {s}");
            }
        }
    }
}

#[test]
fn overlap_oracle_examples() {
    let a = Quad::new(0.0, 0.0, 0.0, 4.0, 2.0);
    assert!(a.intersects(&Quad::new(3.9, 0.0, 0.0, 4.0, 2.0)));
    assert!(a.intersects(&Quad::new(4.0, 0.0, 0.0, 4.0, 2.0)), "touching counts");
    assert!(!a.intersects(&Quad::new(4.01, 0.0, 0.0, 4.0, 2.0)));
    assert!(a.intersects(&Quad::new(0.0, 0.0, 0.0, 1.0, 1.0)), "containment counts");
    assert!(!a.intersects(&Quad::new(3.2, 2.0, 0.7, 1.0, 1.0)));
}

fn label_cfg(template: MapTemplate) -> SceneConfig {
    SceneConfig {
        template,
        roi_h_m: 40.0,
        roi_w_m: 40.0,
        min_agents: 3,
        max_agents: 6,
        max_speed: 14.0,
        lane_change_prob: 0.5,
        ..SceneConfig::default()
    }
}

/// Half uniform over the RoI and horizon, half near a random agent.
pub fn label_queries_near_agents(cfg: &SceneConfig, seed: u64, n: usize) -> (occflow_core::scene::Scenario, Vec<QueryPoint>) {
    let scn = generate_scenario(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let roi = scn.roi;
    let qs = (0..n)
        .map(|i| {
            let t = (r.random_range(0..=10) as f64 * 0.5).min(scn.horizon) * if i % 4 == 0 { r.random::<f64>() } else { 1.0 };
            let near = i % 2 == 1 && !scn.agents.is_empty();
            let c = if near {
                let a = r.random_range(0..scn.agents.len());
                agent_box(&scn, a, t).map(|(x, y, ..)| (x, y))
            } else {
                None
            };
            match c {
                Some((x, y)) => QueryPoint::new(x + r.random_range(-3.0..3.0), y + r.random_range(-2.0..2.0), t),
                None => QueryPoint::new(r.random_range(roi.x_min()..roi.x_max()), r.random_range(roi.y_min()..roi.y_max()), t),
            }
        })
        .collect();
    (scn, qs)
}

#[test]
fn labels_agree_with_raster_and_se2_oracles() {
    let (mut checked, mut occupied) = (0, 0);
    for (k, template) in [MapTemplate::Straight, MapTemplate::Curve, MapTemplate::Intersection, MapTemplate::Merge].into_iter().enumerate() {
        let cfg = label_cfg(template);
        let (scn, qs) = label_queries_near_agents(&cfg, 40 + k as u64, 1500);
        for q in &qs {
            let quads = quads_at(&scn, q.t);
            if boundary_distance(&quads, q.x, q.y) > 0.02 {
                checked += 1;
                let occ = occupancy_label(&scn, q);
                assert_eq!(occ, raster_occupied(&quads, q.x, q.y, 0.01), "{q:?}");
                occupied += occ as usize;
            }
            if let Some((dx, dy)) = se2_flow(&scn, q.x, q.y, q.t) {
                let f = flow_label(&scn, q).unwrap();
                assert!((f.dx - dx).abs() < 1e-9 && (f.dy - dy).abs() < 1e-9, "{q:?}: {f:?} vs ({dx}, {dy})");
            }
        }
    }
    assert!(checked > 5500 && occupied > 500, "{checked} {occupied}");
}

#[test]
fn metrics_agree_with_loop_oracles() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        let n = r.random_range(1..120);
        let ties = case % 2 == 0;
        let p: Vec<f64> = (0..n)
            .map(|_| if ties { r.random_range(0..=8) as f64 / 8.0 } else { r.random::<f64>() })
            .collect();
        let o: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.3).collect();
        let tol = if ties { 1e-6 } else { 1e-9 };
        match (average_precision(&p, &o), ap_oracle(&p, &o)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < tol, "case {case}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
        let labels: Vec<f64> = o.iter().map(|&v| v as u8 as f64).collect();
        match (soft_iou(&labels, &p), soft_iou_oracle(&o, &p)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (a, b) => assert_eq!(a, b),
        }
        let bins = [10, 15, 30][case % 3];
        let ece = expected_calibration_error(&o, &p, bins).ece;
        assert!((ece - ece_oracle(&o, &p, bins)).abs() < 1e-9, "case {case}");
        let f: Vec<(f64, f64)> = (0..n).map(|_| (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).collect();
        let g: Vec<(f64, f64)> = (0..n).map(|_| (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).collect();
        let fv: Vec<FlowVec> = f.iter().map(|&(a, b)| FlowVec::new(a, b)).collect();
        let gv: Vec<FlowVec> = g.iter().map(|&(a, b)| FlowVec::new(a, b)).collect();
        match (end_point_error(&o, &fv, &gv), epe_oracle(&o, &f, &g)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (a, b) => assert_eq!(a, b),
        }
    }
}
