//! Losses, decoupled-weight-decay Adam, the training loop and resumable
//! training checkpoints.

use crate::encode::{encode_scenario, EncodeConfig, EncodeError, MapRaster, VoxelGrid};
use crate::model::{load_checkpoint, save_checkpoint, DecodeVars, Model, ModelError};
use crate::nncore::{NnError, ParamId, ParamStore, Real, Tape, Var};
use crate::scene::{label_queries, sample_queries, LabeledQuery, QueryGrid, Scenario, SceneError, SensorConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

pub const TRAIN_STATE_SCHEMA_VERSION: u32 = 1;
const STATE_FILE: &str = "train_state.json";
const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LOG_HEADER: &str = "epoch,step,L_o,L_f,L_total,lr,wall_ms";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: u64, detail: String },
    #[error("train checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the flow term.
    pub lambda_f: f64,
    /// Fresh uniform queries per example and epoch.
    pub queries: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate factor applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Examples per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Writes `wall_ms = 0` so that logs are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_f: 0.1,
            queries: 4096,
            epochs: 20,
            lr: 1e-3,
            lr_decay: 0.25,
            decay_every: 6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            shuffle: true,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda_f >= 0.0) {
            return bad("lambda_f must be non-negative");
        }
        if self.queries == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return bad("queries, batch_size and decay_every must be at least 1");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("lr and weight_decay must be non-negative, eps positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Step schedule: `lr * lr_decay^(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// A scenario with its encoded model inputs.
#[derive(Debug, Clone)]
pub struct Example {
    pub scenario: Scenario,
    pub lidar: VoxelGrid,
    pub map: MapRaster,
}

impl Example {
    pub fn new(scenario: Scenario, sensor: &SensorConfig, enc: &EncodeConfig) -> Result<Self> {
        let (lidar, map) = encode_scenario(&scenario, sensor, enc)?;
        Ok(Self { scenario, lidar, map })
    }
}

pub fn build_examples(scenarios: Vec<Scenario>, sensor: &SensorConfig, enc: &EncodeConfig) -> Result<Vec<Example>> {
    scenarios.into_iter().map(|s| Example::new(s, sensor, enc)).collect()
}

/// Dense labels on an explicit grid: occupancy `(T, ny, nx)`, flow
/// `(T, 2, ny, nx)` (zero where unoccupied).
#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    pub occ: Vec<f64>,
    pub flow: Vec<f64>,
}

pub fn grid_targets(scn: &Scenario, grid: &QueryGrid) -> GridTargets {
    let labels = label_queries(scn, &grid.points());
    let plane = grid.cells_per_slice();
    let mut occ = vec![0.0; labels.len()];
    let mut flow = vec![0.0; 2 * labels.len()];
    for (i, l) in labels.iter().enumerate() {
        if l.occ {
            occ[i] = 1.0;
            let f = l.flow.expect("occupied label carries flow");
            let (t, p) = (i / plane, i % plane);
            flow[t * 2 * plane + p] = f.dx;
            flow[t * 2 * plane + plane + p] = f.dy;
        }
    }
    GridTargets { occ, flow }
}

/// Handles of the three loss scalars on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub occ: Var,
    pub flow: Var,
    pub total: Var,
}

/// Mean binary cross entropy from logits.
pub fn loss_occupancy<T: Real>(tape: &mut Tape<T>, logits: Var, occ: &[T]) -> Result<Var> {
    if occ.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(tape.bce_logits_mean(logits, occ)?)
}

/// `(1/|Q|) sum_q o(q) ||f(q) - f_hat(q)||` on `(N, 2)` predictions.
pub fn loss_flow<T: Real>(tape: &mut Tape<T>, flow: Var, target: &[T], occ: &[T]) -> Result<Var> {
    if occ.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(tape.masked_l2(flow, target, occ, 1, T::from_f64(occ.len() as f64))?)
}

pub fn loss_total<T: Real>(tape: &mut Tape<T>, occ: Var, flow: Var, lambda_f: f64) -> Result<Var> {
    let weighted = tape.scale(flow, T::from_f64(lambda_f));
    Ok(tape.add(occ, weighted)?)
}

/// Loss terms of the implicit decoder against labeled queries.
pub fn implicit_loss<T: Real>(tape: &mut Tape<T>, v: &DecodeVars, labels: &[LabeledQuery], lambda_f: f64) -> Result<LossVars> {
    let occ: Vec<T> = labels.iter().map(|l| T::from_f64(l.occ as u8 as f64)).collect();
    let target: Vec<T> = labels
        .iter()
        .flat_map(|l| l.flow.map_or([0.0, 0.0], |f| [f.dx, f.dy]))
        .map(T::from_f64)
        .collect();
    let lo = loss_occupancy(tape, v.logits, &occ)?;
    let lf = loss_flow(tape, v.flow, &target, &occ)?;
    let total = loss_total(tape, lo, lf, lambda_f)?;
    Ok(LossVars { occ: lo, flow: lf, total })
}

/// Loss terms of the explicit decoder against dense grid labels, with the
/// flow term normalized by the number of grid cells.
pub fn explicit_loss<T: Real>(
    tape: &mut Tape<T>,
    occ: Var,
    flow: Var,
    targets: &GridTargets,
    plane: usize,
    lambda_f: f64,
) -> Result<LossVars> {
    let o: Vec<T> = targets.occ.iter().map(|&v| T::from_f64(v)).collect();
    let f: Vec<T> = targets.flow.iter().map(|&v| T::from_f64(v)).collect();
    let lo = loss_occupancy(tape, occ, &o)?;
    let lf = tape.masked_l2(flow, &f, &o, plane, T::from_f64(o.len() as f64))?;
    let total = loss_total(tape, lo, lf, lambda_f)?;
    Ok(LossVars { occ: lo, flow: lf, total })
}

/// Adam with decoupled weight decay on parameters flagged for decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t, _)| vec![0.0f32; t.len()]).collect::<Vec<_>>();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let decay = if params.decays(id) { (lr * self.weight_decay) as f32 } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut params.get_mut(id).data;
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() / c2s + eps) + decay * p[j];
            }
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.m
            .iter()
            .chain(&self.v)
            .flat_map(|s| s.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let total: usize = self.m.iter().map(Vec::len).sum::<usize>() * 2;
        if bytes.len() != total * 4 {
            return Err(TrainError::Checkpoint(format!("optimizer state has {} bytes, expected {}", bytes.len(), total * 4)));
        }
        let mut vals = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for s in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in s.iter_mut() {
                *x = vals.next().expect("length checked");
            }
        }
        Ok(())
    }
}

/// One row of the training log, averaged over the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub l_o: f64,
    pub l_f: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.l_o, self.l_f, self.l_total, self.lr, self.wall_ms
        )
    }
}

/// Appends rows to a CSV log, writing the header if the file is new.
pub fn append_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    schema_version: u32,
    epochs_done: usize,
    step: u64,
    adam_t: u64,
    config: TrainConfig,
}

/// Seed of the query sample for one example in one epoch.
pub fn query_seed(seed: u64, epoch: usize, idx: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (idx as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training loop state: model, optimizer and progress counters.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub epochs_done: usize,
    pub step: u64,
    explicit_targets: Vec<Option<GridTargets>>,
}

/// Scalar losses of one example.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLoss {
    pub l_o: f64,
    pub l_f: f64,
    pub l_total: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&cfg, &model.params);
        Ok(Self {
            model,
            opt,
            cfg,
            epochs_done: 0,
            step: 0,
            explicit_targets: Vec::new(),
        })
    }

    /// Loss and parameter gradients for one example.
    pub fn example_gradients(&mut self, data: &[Example], idx: usize, epoch: usize) -> Result<(StepLoss, Vec<Vec<f32>>)> {
        let ex = &data[idx];
        let model = &self.model;
        let mut tape = Tape::<f32>::new();
        tape.set_nan_check(true);
        let bp = tape.bind(&model.params);
        let (l, m) = model.input_tensors(&ex.lidar, &ex.map)?;
        let (l, m) = (tape.constant(l), tape.constant(m));
        let z = model.encode_on_tape(&mut tape, &bp, l, m)?;
        let mut parts = Vec::new();
        if model.has_implicit() {
            let scn = &ex.scenario;
            let qs = sample_queries(&scn.roi, scn.horizon, self.cfg.queries, query_seed(self.cfg.seed, epoch, idx))?;
            let labels = label_queries(scn, &qs);
            let v = model.decode_on_tape(&mut tape, &bp, z, &qs)?;
            parts.push(implicit_loss(&mut tape, &v, &labels, self.cfg.lambda_f)?);
        }
        if model.has_explicit() {
            if self.explicit_targets.len() != data.len() {
                self.explicit_targets = vec![None; data.len()];
            }
            let grid = model.explicit_grid();
            let targets = self.explicit_targets[idx].get_or_insert_with(|| grid_targets(&ex.scenario, &grid));
            let (o, f) = model.explicit_on_tape(&mut tape, &bp, z)?;
            parts.push(explicit_loss(&mut tape, o, f, targets, grid.cells_per_slice(), self.cfg.lambda_f)?);
        }
        let mut total = parts[0].total;
        for p in &parts[1..] {
            total = tape.add(total, p.total)?;
        }
        let value = |v: Var| tape.value(v).item() as f64;
        let loss = StepLoss {
            l_o: parts.iter().map(|p| value(p.occ)).sum(),
            l_f: parts.iter().map(|p| value(p.flow)).sum(),
            l_total: value(total),
        };
        // ReLU can mask a NaN, so any non-finite intermediate counts.
        if !loss.l_total.is_finite() || tape.first_nonfinite().is_some() {
            let detail = match tape.first_nonfinite() {
                Some((node, op)) => format!("first non-finite value from {op} at node {node}"),
                None => "non-finite loss".to_string(),
            };
            return Err(TrainError::Diverged {
                epoch,
                step: self.step,
                detail,
            });
        }
        let mut grads = tape.backward(total);
        let out = bp
            .vars()
            .zip(model.params.iter())
            .map(|(v, (_, t, _))| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((loss, out))
    }

    /// One pass over `data`.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let start = Instant::now();
        let epoch = self.epochs_done;
        let lr = self.cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(self.cfg.seed, epoch, usize::MAX));
            order.shuffle(&mut rng);
        }
        let mut sum = StepLoss::default();
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc: Option<Vec<Vec<f32>>> = None;
            for &idx in batch {
                let (loss, g) = self.example_gradients(data, idx, epoch)?;
                sum.l_o += loss.l_o;
                sum.l_f += loss.l_f;
                sum.l_total += loss.l_total;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&g) {
                            x.iter_mut().zip(y).for_each(|(x, y)| *x += *y);
                        }
                    }
                }
            }
            let mut g = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let s = 1.0 / batch.len() as f32;
                g.iter_mut().flatten().for_each(|v| *v *= s);
            }
            self.opt.step(&mut self.model.params, &g, lr);
            self.step += 1;
        }
        self.epochs_done += 1;
        let n = data.len() as f64;
        Ok(EpochLog {
            epoch,
            step: self.step,
            l_o: sum.l_o / n,
            l_f: sum.l_f / n,
            l_total: sum.l_total / n,
            lr,
            wall_ms: if self.cfg.deterministic { 0 } else { start.elapsed().as_millis() as u64 },
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run<F>(&mut self, data: &[Example], mut on_epoch: F) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&Trainer, &EpochLog) -> Result<()>,
    {
        let mut logs = Vec::new();
        while self.epochs_done < self.cfg.epochs {
            let log = self.run_epoch(data)?;
            log::info!(
                "epoch {} step {} L_o {:.5} L_f {:.5} L {:.5} lr {:.2e}",
                log.epoch,
                log.step,
                log.l_o,
                log.l_f,
                log.l_total,
                log.lr
            );
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Model checkpoint plus optimizer state and progress counters.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.model, dir)?;
        fs::write(dir.join(OPTIMIZER_FILE), self.opt.to_bytes())?;
        let state = TrainState {
            schema_version: TRAIN_STATE_SCHEMA_VERSION,
            epochs_done: self.epochs_done,
            step: self.step,
            adam_t: self.opt.t,
            config: self.cfg.clone(),
        };
        let json = serde_json::to_string_pretty(&state).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fs::write(dir.join(STATE_FILE), json)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`]. `epochs`, if given,
    /// replaces the stored epoch budget.
    pub fn resume(dir: &Path, epochs: Option<usize>) -> Result<Self> {
        let model = load_checkpoint(dir)?;
        let text = fs::read_to_string(dir.join(STATE_FILE))?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if state.schema_version != TRAIN_STATE_SCHEMA_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported schema version {}", state.schema_version)));
        }
        let mut cfg = state.config;
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        let mut t = Trainer::new(model, cfg)?;
        t.opt.load_bytes(&fs::read(dir.join(OPTIMIZER_FILE))?)?;
        t.opt.t = state.adam_t;
        t.epochs_done = state.epochs_done;
        t.step = state.step;
        Ok(t)
    }
}

/// Trains `model` on `data` for `cfg.epochs` epochs.
pub fn train_run(data: &[Example], model: Model<f32>, cfg: TrainConfig) -> Result<(Model<f32>, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut t = Trainer::new(model, cfg)?;
    let logs = t.run(data, |_, _| Ok(()))?;
    Ok((t.model, logs))
}

#[cfg(test)]
mod tests;
