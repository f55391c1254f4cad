use super::*;
use crate::encode::GridMeta;
use crate::geom::FlowVec;
use crate::model::{ModelConfig, ModelFrame};
use crate::nncore::{grad_check_sampled, BoundParams, Tensor};
use crate::scene::{generate_scenario, MapTemplate, QueryPoint, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bce(o: f64, p: f64) -> f64 {
    -(o * p.ln() + (1.0 - o) * (1.0 - p).ln())
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn occ_loss(logits: &[f64], occ: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let z = t.param(Tensor::new(&[logits.len(), 1], logits.to_vec()));
    let l = loss_occupancy(&mut t, z, occ).unwrap();
    t.value(l).item()
}

fn flow_loss(pred: &[f64], target: &[f64], occ: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let p = t.param(Tensor::new(&[occ.len(), 2], pred.to_vec()));
    let l = loss_flow(&mut t, p, target, occ).unwrap();
    t.value(l).item()
}

#[test]
fn occupancy_loss_examples() {
    assert!((occ_loss(&[0.0; 5], &[1.0, 0.0, 1.0, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
    let big = 9e-9f64.ln();
    assert!(occ_loss(&[-big, big, -big], &[1.0, 0.0, 1.0]) < 1e-8);

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let z: Vec<f64> = (0..8).map(|_| r.random_range(-4.0..4.0)).collect();
    let o: Vec<f64> = (0..8).map(|_| (r.random::<f64>() < 0.5) as u8 as f64).collect();
    let want = z.iter().zip(&o).map(|(&z, &o)| bce(o, sig(z))).sum::<f64>() / 8.0;
    assert!((occ_loss(&z, &o) - want).abs() < 1e-9);

    let mut t = Tape::<f64>::new();
    let e = t.param(Tensor::zeros(&[0, 1]));
    assert!(matches!(loss_occupancy(&mut t, e, &[]), Err(TrainError::EmptyBatch)));
}

#[test]
fn flow_loss_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let junk: Vec<f64> = (0..8).map(|_| r.random_range(-5.0..5.0)).collect();
    assert_eq!(flow_loss(&junk, &[0.0; 8], &[0.0; 4]), 0.0);

    let pred = [0.0, 0.0, 3.0, 4.0, 9.0, 9.0, -1.0, 2.0];
    let target = [0.0; 8];
    assert!((flow_loss(&pred, &target, &[0.0, 1.0, 0.0, 0.0]) - 1.25).abs() < 1e-15);

    let n = 16;
    let p: Vec<f64> = (0..2 * n).map(|_| r.random_range(-2.0..2.0)).collect();
    let f: Vec<f64> = (0..2 * n).map(|_| r.random_range(-2.0..2.0)).collect();
    let o: Vec<f64> = (0..n).map(|_| (r.random::<f64>() < 0.4) as u8 as f64).collect();
    let mut want = 0.0;
    for i in 0..n {
        want += o[i] * ((p[2 * i] - f[2 * i]).powi(2) + (p[2 * i + 1] - f[2 * i + 1]).powi(2)).sqrt();
    }
    want /= n as f64;
    assert!((flow_loss(&p, &f, &o) - want).abs() < 1e-9);

    let mut p2 = p.clone();
    for i in 0..n {
        if o[i] == 0.0 {
            p2[2 * i] += 100.0;
            p2[2 * i + 1] -= 7.0;
        }
    }
    assert_eq!(flow_loss(&p, &f, &o), flow_loss(&p2, &f, &o));
}

#[test]
fn total_loss_combination() {
    let mut t = Tape::<f64>::new();
    let lo = t.constant(Tensor::scalar(0.7));
    let lf = t.constant(Tensor::scalar(1.3));
    let l0 = loss_total(&mut t, lo, lf, 0.0).unwrap();
    assert_eq!(t.value(l0).item(), 0.7);
    let l1 = loss_total(&mut t, lo, lf, 0.1).unwrap();
    assert_eq!(t.value(l1).item(), 0.7 + 0.1 * 1.3);
    let mut prev = f64::NEG_INFINITY;
    for lam in [0.0, 0.05, 0.1, 0.5, 2.0] {
        let l = loss_total(&mut t, lo, lf, lam).unwrap();
        let v = t.value(l).item();
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn lr_schedule_steps_every_six_epochs() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(0), 1e-3);
    assert_eq!(c.lr_at(5), 1e-3);
    assert_eq!(c.lr_at(6), 2.5e-4);
    assert_eq!(c.lr_at(19), 1e-3 * 0.25f64.powi(3));
}

#[test]
fn adamw_matches_scalar_reference() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::new(&[2], vec![1.0, -2.0]), true);
    store.insert("b", Tensor::new(&[1], vec![0.5]), false);
    let cfg = TrainConfig {
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&cfg, &store);
    let grads = [vec![0.3f32, -0.2], vec![1.0f32]];
    let lr = 0.01;
    // Reference in f64 for two steps.
    let mut p = [1.0f64, -2.0, 0.5];
    let mut m = [0.0f64; 3];
    let mut v = [0.0f64; 3];
    let g = [0.3f64, -0.2, 1.0];
    for step in 1..=2 {
        opt.step(&mut store, &grads, lr);
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            let wd = if i < 2 { 0.1 } else { 0.0 };
            p[i] -= lr * (mh / (vh.sqrt() + 1e-8) + wd * p[i]);
        }
    }
    let got: Vec<f32> = store.iter().flat_map(|(_, t, _)| t.data.clone()).collect();
    for (a, b) in got.iter().zip(&p) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

fn scene_cfg(max_speed: f64) -> SceneConfig {
    SceneConfig {
        template: MapTemplate::Straight,
        roi_h_m: 32.0,
        roi_w_m: 32.0,
        min_agents: 1,
        max_agents: 1,
        min_speed: 0.0,
        max_speed,
        ..SceneConfig::default()
    }
}

fn tiny_model(scn: &Scenario, enc: &EncodeConfig, implicit: bool, explicit: bool) -> Model<f32> {
    let frame = ModelFrame {
        grid: GridMeta::new(scn.roi, scn.history_sweeps, enc),
        horizon: scn.horizon,
        label_dt: scn.label_dt,
    };
    let cfg = ModelConfig {
        channels: 8,
        stem_channels: 4,
        trunk_blocks: 2,
        mlp_width: 16,
        offset_blocks: 1,
        head_blocks: 1,
        k: 1,
        implicit,
        explicit,
        explicit_upsample: false,
        seed: 5,
        ..ModelConfig::default()
    };
    Model::new(cfg, frame).unwrap()
}

fn tiny_data(n: usize, max_speed: f64) -> (Vec<Example>, EncodeConfig) {
    let enc = EncodeConfig {
        cell_m: 2.0,
        ..EncodeConfig::default()
    };
    let cfg = scene_cfg(max_speed);
    let data = (0..n)
        .map(|i| Example::new(generate_scenario(&cfg, 100 + i as u64).unwrap(), &SensorConfig::default(), &enc).unwrap())
        .collect();
    (data, enc)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (data, enc) = tiny_data(1, 0.0);
    let model = tiny_model(&data[0].scenario, &enc, true, true);
    let before = model.params.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        queries: 64,
        ..TrainConfig::default()
    };
    let (after, logs) = train_run(&data, model, cfg).unwrap();
    assert_eq!(logs.len(), 1);
    for ((_, a, _), (_, b, _)) in before.iter().zip(after.params.iter()) {
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn loss_halves_on_static_scene() {
    let (data, enc) = tiny_data(1, 0.0);
    let model = tiny_model(&data[0].scenario, &enc, true, false);
    let cfg = TrainConfig {
        epochs: 5,
        queries: 256,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    let first = t.example_gradients(&data, 0, 0).unwrap().0.l_total;
    // Five epochs of many small steps on the single example.
    t.cfg.batch_size = 1;
    let mut last = f64::INFINITY;
    for _ in 0..5 {
        for _ in 0..10 {
            let (_, g) = t.example_gradients(&data, 0, t.epochs_done).unwrap();
            t.opt.step(&mut t.model.params, &g, t.cfg.lr_at(t.epochs_done));
        }
        last = t.run_epoch(&data).unwrap().l_total;
    }
    assert!(last < 0.5 * first, "initial {first}, final {last}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (data, enc) = tiny_data(2, 6.0);
    let cfg = TrainConfig {
        epochs: 4,
        queries: 64,
        seed: 9,
        deterministic: true,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let model = tiny_model(&data[0].scenario, &enc, true, true);
        let mut t = Trainer::new(model, cfg.clone()).unwrap();
        let logs = t.run(&data, |_, _| Ok(())).unwrap();
        let out = dir.path().join(name);
        t.save(&out).unwrap();
        (logs, std::fs::read(out.join("params.bin")).unwrap())
    };
    let (la, a) = run("a");
    let (lb, b) = run("b");
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.iter().all(|l| l.wall_ms == 0));

    let model = tiny_model(&data[0].scenario, &enc, true, true);
    let mut t = Trainer::new(model, TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
    let mut logs = t.run(&data, |_, _| Ok(())).unwrap();
    let mid = dir.path().join("mid");
    t.save(&mid).unwrap();
    let mut resumed = Trainer::resume(&mid, Some(4)).unwrap();
    logs.extend(resumed.run(&data, |_, _| Ok(())).unwrap());
    resumed.save(&dir.path().join("c")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("c/params.bin")).unwrap(), a);
    assert_eq!(logs, la);

    let log_path = dir.path().join("log.csv");
    append_log(&log_path, &logs[..2]).unwrap();
    append_log(&log_path, &logs[2..]).unwrap();
    let text = std::fs::read_to_string(&log_path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with(LOG_HEADER));
}

#[test]
fn nan_parameters_abort_training() {
    let (data, enc) = tiny_data(1, 0.0);
    let mut model = tiny_model(&data[0].scenario, &enc, true, false);
    model.params.get_mut(ParamId(0)).data[0] = f32::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        queries: 16,
        ..TrainConfig::default()
    };
    match train_run(&data, model, cfg) {
        Err(TrainError::Diverged { detail, .. }) => assert!(detail.contains("node 0"), "{detail}"),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn grid_targets_follow_label_oracle() {
    let (data, enc) = tiny_data(1, 8.0);
    let model = tiny_model(&data[0].scenario, &enc, false, true);
    let grid = model.explicit_grid();
    let tg = grid_targets(&data[0].scenario, &grid);
    let plane = grid.cells_per_slice();
    let mut occupied = 0;
    for (ti, &t) in grid.times.iter().enumerate() {
        for r in 0..grid.ny {
            for c in 0..grid.nx {
                let (x, y) = grid.centroid(r, c);
                let q = QueryPoint::new(x, y, t);
                let i = ti * plane + r * grid.nx + c;
                let occ = crate::scene::occupancy_label(&data[0].scenario, &q);
                assert_eq!(tg.occ[i], occ as u8 as f64);
                if occ {
                    occupied += 1;
                    let f = crate::scene::flow_label(&data[0].scenario, &q).unwrap();
                    assert_eq!(FlowVec::new(tg.flow[ti * 2 * plane + r * grid.nx + c], tg.flow[ti * 2 * plane + plane + r * grid.nx + c]), f);
                }
            }
        }
    }
    assert!(occupied > 0);
}

#[test]
fn miniature_model_loss_gradient() {
    // C = 8 on a 16 x 16 raster with 8 queries.
    let (data, enc) = tiny_data(1, 8.0);
    let mut model = tiny_model(&data[0].scenario, &enc, true, false).cast::<f64>();
    assert_eq!((model.frame.grid.h_px, model.frame.grid.w_px), (16, 16));
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for t in model.params.tensors_mut() {
        for v in &mut t.data {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let ex = &data[0];
    let (lt, mt) = model.input_tensors(&ex.lidar, &ex.map).unwrap();
    let mut qs = sample_queries(&ex.scenario.roi, ex.scenario.horizon, 6, 4).unwrap();
    let b = ex.scenario.box_at(0, 1.0).unwrap();
    qs.push(QueryPoint::new(b.pose.x, b.pose.y, 1.0));
    let b = ex.scenario.box_at(0, 0.0).unwrap();
    qs.push(QueryPoint::new(b.pose.x + 0.3, b.pose.y, 0.0));
    let labels = label_queries(&ex.scenario, &qs);
    assert!(labels.iter().any(|l| l.occ));
    let inputs: Vec<_> = model.params.iter().map(|(_, t, _)| t.clone()).collect();
    let err = grad_check_sampled(
        |tape, vars| {
            let bp = BoundParams::contiguous(vars);
            let (l, m) = (tape.constant(lt.clone()), tape.constant(mt.clone()));
            let z = model.encode_on_tape(tape, &bp, l, m).unwrap();
            let v = model.decode_on_tape(tape, &bp, z, &qs).unwrap();
            implicit_loss(tape, &v, &labels, 0.1).unwrap().total
        },
        &inputs,
        1e-6,
        4,
        5,
    );
    assert!(err < 1e-4, "{err}");
}
