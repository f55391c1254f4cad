//! Scene encoder, implicit query decoder and explicit grid decoder.
//!
//! The encoder turns the voxelized LiDAR history and the map raster into a
//! feature map `Z` at half the input resolution. The implicit decoder
//! evaluates occupancy and backwards flow at arbitrary `(x, y, t)` queries by
//! sampling `Z` at the query and at `K` learned reference points. The
//! explicit decoder emits dense grids for every label step.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_SCHEMA_VERSION};

use crate::encode::{GridMeta, MapRaster, VoxelGrid};
use crate::geom::FlowVec;
use crate::nncore::{
    conv_layer, cross_attention, fpn_merge, linear_layer, resnet_block, Activation, BoundParams, ConvParams,
    CrossAttentionParams, FpnParams, Init, LinearParams, NnError, ParamStore, Real, ResBlockParams, Tape, Tensor, Var,
};
use crate::scene::{QueryGrid, QueryPoint, Roi};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Input pixels per feature cell.
pub const FEATURE_STRIDE: usize = 2;

/// Queries per tape in [`Model::predict`].
pub const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input frame does not match the model frame: {0}")]
    FrameMismatch(String),
    #[error("empty query batch")]
    EmptyQueries,
    #[error("model has no {0} decoder")]
    MissingDecoder(&'static str),
    #[error("query ({x}, {y}, {t}) outside the grid extent")]
    OutOfExtent { x: f64, y: f64, t: f64 },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` of `Z`.
    pub channels: usize,
    pub stem_channels: usize,
    /// Residual blocks in the trunk, split evenly between strides 2 and 4.
    pub trunk_blocks: usize,
    pub mlp_width: usize,
    pub offset_blocks: usize,
    pub head_blocks: usize,
    /// Number of reference points `K`; 0 disables offsets and attention.
    pub k: usize,
    /// Meters per unit of raw offset-head output.
    pub offset_scale_m: f64,
    pub implicit: bool,
    pub explicit: bool,
    /// Explicit grid at input resolution instead of feature resolution.
    pub explicit_upsample: bool,
    /// Initial occupancy probability; occupancy biases start at its logit.
    pub occ_prior: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stem_channels: 32,
            trunk_blocks: 4,
            mlp_width: 128,
            offset_blocks: 2,
            head_blocks: 2,
            k: 1,
            offset_scale_m: 10.0,
            implicit: true,
            explicit: false,
            explicit_upsample: true,
            occ_prior: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.channels == 0 || self.stem_channels == 0 || self.mlp_width == 0 {
            return bad("widths must be positive");
        }
        if self.trunk_blocks < 2 || !self.trunk_blocks.is_multiple_of(2) {
            return bad("trunk_blocks must be even and at least 2");
        }
        if self.head_blocks == 0 || (self.k > 0 && self.offset_blocks == 0) {
            return bad("decoder MLPs need at least one block");
        }
        if !(self.offset_scale_m > 0.0 && self.offset_scale_m.is_finite()) {
            return bad("offset_scale_m must be positive");
        }
        if !(self.occ_prior > 0.0 && self.occ_prior < 1.0) {
            return bad("occ_prior must lie in (0, 1)");
        }
        if !self.implicit && !self.explicit {
            return bad("at least one decoder must be enabled");
        }
        Ok(())
    }
}

/// Spatial and temporal frame the model was built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFrame {
    pub grid: GridMeta,
    pub horizon: f64,
    pub label_dt: f64,
}

impl ModelFrame {
    pub fn label_steps(&self) -> usize {
        (self.horizon / self.label_dt).round() as usize + 1
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.grid.h_px / FEATURE_STRIDE, self.grid.w_px / FEATURE_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !g.h_px.is_multiple_of(4) || !g.w_px.is_multiple_of(4) || g.h_px == 0 || g.w_px == 0 {
            return Err(ModelError::Config(format!("raster {}x{} must be a positive multiple of 4", g.h_px, g.w_px)));
        }
        if !(self.horizon > 0.0 && self.label_dt > 0.0) {
            return Err(ModelError::Config("horizon and label_dt must be positive".into()));
        }
        Ok(())
    }

    /// `((x - x_min)/W, (y - y_min)/H, t/T)`.
    pub fn normalize(&self, q: &QueryPoint) -> [f64; 3] {
        let roi = self.grid.roi;
        [(q.x - roi.x_min()) / roi.w_m, (q.y - roi.y_min()) / roi.h_m, q.t / self.horizon]
    }

    /// Meters to feature cells.
    pub fn meters_per_cell(&self) -> f64 {
        self.grid.cell_m * FEATURE_STRIDE as f64
    }
}

#[derive(Debug, Clone)]
struct EncoderParams {
    lidar_stem: [ConvParams; 2],
    map_stem: [ConvParams; 2],
    down2: ConvParams,
    blocks2: Vec<ResBlockParams>,
    down4: ConvParams,
    blocks4: Vec<ResBlockParams>,
    fpn: FpnParams,
}

#[derive(Debug, Clone)]
struct ImplicitParams {
    offset_blocks: Vec<ResBlockParams>,
    offset_out: Option<LinearParams>,
    attention: Option<CrossAttentionParams>,
    head_blocks: Vec<ResBlockParams>,
    occ: LinearParams,
    flow: LinearParams,
}

#[derive(Debug, Clone)]
struct ExplicitParams {
    conv: ConvParams,
    block: ResBlockParams,
    occ: ConvParams,
    flow: ConvParams,
}

/// Parameter layout shared by every scalar type.
#[derive(Debug, Clone)]
struct Layout {
    enc: EncoderParams,
    imp: Option<ImplicitParams>,
    exp: Option<ExplicitParams>,
}

/// Encoder plus decoders with their parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub frame: ModelFrame,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// `Z` of shape `(C, H/2, W/2)` with the frame it lives in.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub z: Tensor<T>,
    pub frame: ModelFrame,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub occ_logit: f64,
    pub occ_prob: f64,
    /// Meters per label step.
    pub flow: FlowVec,
}

impl Prediction {
    pub fn from_logit(occ_logit: f64, flow: FlowVec) -> Self {
        Self {
            occ_logit,
            occ_prob: sigmoid(occ_logit),
            flow,
        }
    }
}

/// Per-query offsets, reference points (both meters) and attention weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoderIntrospection {
    pub offsets: Vec<[f64; 2]>,
    pub refs: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// Tape handles produced by [`Model::decode_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct DecodeVars {
    /// `(N, 1)`.
    pub logits: Var,
    /// `(N, 2)`.
    pub flow: Var,
    /// Raw offset-head output `(N*K, 2)`, meters divided by `offset_scale_m`.
    pub offsets: Option<Var>,
    /// `(N, K)`.
    pub weights: Option<Var>,
}

/// Dense explicit-decoder output for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitGrids {
    grid: QueryGrid,
    occ_logit: Vec<f64>,
    occ_prob: Vec<f64>,
    flow: Vec<f64>,
    /// `(T, ny, nx)` of `[occ_prob, dx, dy]`, so one lookup touches few
    /// cache lines.
    cells: Vec<[f64; 3]>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, frame: ModelFrame) -> Result<Self> {
        config.validate()?;
        frame.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let r = &mut rng;
        let s = &mut store;
        let (c, sc, m) = (config.channels, config.stem_channels, config.mlp_width);
        let lidar_in = frame.grid.lidar_channels();
        let conv = |s: &mut ParamStore<T>, r: &mut ChaCha8Rng, name: &str, cin, cout, k, stride| {
            ConvParams::new(s, name, cin, cout, k, stride, true, 1.0, r)
        };
        let enc = EncoderParams {
            lidar_stem: [
                conv(s, r, "enc.lidar0", lidar_in, sc, 3, 1),
                conv(s, r, "enc.lidar1", sc, sc, 3, 1),
            ],
            map_stem: [conv(s, r, "enc.map0", 1, sc, 3, 1), conv(s, r, "enc.map1", sc, sc, 3, 1)],
            down2: conv(s, r, "enc.down2", 2 * sc, c, 3, 2),
            blocks2: (0..config.trunk_blocks / 2)
                .map(|i| ResBlockParams::conv(s, &format!("enc.s2.{i}"), c, c, r))
                .collect(),
            down4: conv(s, r, "enc.down4", c, c, 3, 2),
            blocks4: (0..config.trunk_blocks / 2)
                .map(|i| ResBlockParams::conv(s, &format!("enc.s4.{i}"), c, c, r))
                .collect(),
            fpn: FpnParams::new(s, "enc.fpn", c, c, c, r),
        };
        let imp = config.implicit.then(|| {
            let k = config.k;
            let (offset_blocks, offset_out, attention) = if k > 0 {
                let blocks = (0..config.offset_blocks)
                    .map(|i| ResBlockParams::fc(s, &format!("imp.off.{i}"), if i == 0 { c + 3 } else { m }, m, r))
                    .collect();
                let out = LinearParams::new(s, "imp.off.out", m, 2 * k, Init::Normal(0.01), true, r);
                (blocks, Some(out), Some(CrossAttentionParams::new(s, "imp.att", c, c, r)))
            } else {
                (Vec::new(), None, None)
            };
            let head_in = if k > 0 { 2 * c + 3 } else { c + 3 };
            let head_blocks = (0..config.head_blocks)
                .map(|i| ResBlockParams::fc(s, &format!("imp.head.{i}"), if i == 0 { head_in } else { m }, m, r))
                .collect();
            ImplicitParams {
                offset_blocks,
                offset_out,
                attention,
                head_blocks,
                occ: LinearParams::he(s, "imp.occ", m, 1, r),
                flow: LinearParams::he(s, "imp.flow", m, 2, r),
            }
        });
        let exp = config.explicit.then(|| {
            let steps = frame.label_steps();
            ExplicitParams {
                conv: conv(s, r, "exp.conv", c, c, 3, 1),
                block: ResBlockParams::conv(s, "exp.block", c, c, r),
                occ: conv(s, r, "exp.occ", c, steps, 1, 1),
                flow: conv(s, r, "exp.flow", c, 2 * steps, 1, 1),
            }
        });
        let prior = T::from_f64((config.occ_prior / (1.0 - config.occ_prior)).ln());
        let occ_biases = [imp.as_ref().and_then(|p| p.occ.b), exp.as_ref().and_then(|p| p.occ.b)];
        for b in occ_biases.into_iter().flatten() {
            store.get_mut(b).data.fill(prior);
        }
        Ok(Self {
            config,
            frame,
            params: store,
            layout: Layout { enc, imp, exp },
        })
    }

    /// Same architecture with parameters converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            frame: self.frame,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn has_implicit(&self) -> bool {
        self.layout.imp.is_some()
    }

    pub fn has_explicit(&self) -> bool {
        self.layout.exp.is_some()
    }

    /// Checks that the inputs share the model's frame and returns them as
    /// tensors `(D*history, H, W)` and `(1, H, W)`.
    pub fn input_tensors(&self, lidar: &VoxelGrid, map: &MapRaster) -> Result<(Tensor<T>, Tensor<T>)> {
        let want = self.frame.grid;
        for (what, meta) in [("lidar", &lidar.meta), ("map", &map.meta)] {
            if *meta != want {
                return Err(ModelError::FrameMismatch(format!("{what} frame {meta:?} vs model {want:?}")));
            }
        }
        Ok((
            Tensor::from_f32(&lidar.shape(), &lidar.data),
            Tensor::from_f32(&map.shape(), &map.data),
        ))
    }

    /// `Z` as a tape node.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, bp: &BoundParams, lidar: Var, map: Var) -> Result<Var> {
        let e = &self.layout.enc;
        let stem = |x: Var, ps: &[ConvParams; 2], tape: &mut Tape<T>| -> Result<Var> {
            let h = conv_layer(tape, bp, &ps[0], x)?;
            let h = tape.relu(h);
            let h = conv_layer(tape, bp, &ps[1], h)?;
            Ok(tape.relu(h))
        };
        let l = stem(lidar, &e.lidar_stem, tape)?;
        let m = stem(map, &e.map_stem, tape)?;
        let x = tape.concat_rows(&[l, m])?;
        let x = conv_layer(tape, bp, &e.down2, x)?;
        let mut fine = tape.relu(x);
        for b in &e.blocks2 {
            fine = resnet_block(tape, bp, b, fine, Activation::Relu)?;
        }
        let x = conv_layer(tape, bp, &e.down4, fine)?;
        let mut coarse = tape.relu(x);
        for b in &e.blocks4 {
            coarse = resnet_block(tape, bp, b, coarse, Activation::Relu)?;
        }
        Ok(fpn_merge(tape, bp, &e.fpn, coarse, fine)?)
    }

    pub fn encode_scene(&self, lidar: &VoxelGrid, map: &MapRaster) -> Result<FeatureMap<T>> {
        let (l, m) = self.input_tensors(lidar, map)?;
        let mut tape = Tape::new();
        let bp = tape.bind(&self.params);
        let (l, m) = (tape.constant(l), tape.constant(m));
        let z = self.encode_on_tape(&mut tape, &bp, l, m)?;
        Ok(FeatureMap {
            z: tape.value(z).clone(),
            frame: self.frame,
        })
    }

    /// Feature-cell coordinates `(col, row)` of each query.
    fn query_coords(&self, qs: &[QueryPoint]) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * qs.len());
        for q in qs {
            let (cx, cy) = self.frame.grid.continuous_coords(q.x, q.y, FEATURE_STRIDE);
            data.push(T::from_f64(cx));
            data.push(T::from_f64(cy));
        }
        Tensor::new(&[qs.len(), 2], data)
    }

    fn normalized_queries(&self, qs: &[QueryPoint]) -> Tensor<T> {
        let data = qs.iter().flat_map(|q| self.frame.normalize(q)).map(T::from_f64).collect();
        Tensor::new(&[qs.len(), 3], data)
    }

    /// Implicit decoder over all queries in one batch.
    pub fn decode_on_tape(&self, tape: &mut Tape<T>, bp: &BoundParams, z: Var, qs: &[QueryPoint]) -> Result<DecodeVars> {
        let imp = self.layout.imp.as_ref().ok_or(ModelError::MissingDecoder("implicit"))?;
        if qs.is_empty() {
            return Err(ModelError::EmptyQueries);
        }
        let k = self.config.k;
        let coords = self.query_coords(qs);
        let cq = tape.constant(coords.clone());
        let qn = tape.constant(self.normalized_queries(qs));
        let zq = tape.bilinear(z, cq)?;

        let (head_in, offsets, weights) = match (&imp.offset_out, &imp.attention) {
            (Some(out), Some(att)) => {
                let mut h = tape.concat_cols(&[zq, qn])?;
                for b in &imp.offset_blocks {
                    h = resnet_block(tape, bp, b, h, Activation::Relu)?;
                }
                let raw = linear_layer(tape, bp, out, h)?;
                let raw = tape.reshape(raw, &[qs.len() * k, 2])?;
                let s = T::from_f64(self.config.offset_scale_m / self.frame.meters_per_cell());
                let delta = tape.col_affine(raw, &[s, s], &[T::zero(), T::zero()])?;
                let base = tape.constant(repeat_rows(&coords, k));
                let refs = tape.add(base, delta)?;
                let zr = tape.bilinear(z, refs)?;
                let a = cross_attention(tape, bp, att, zq, zr)?;
                (tape.concat_cols(&[a.out, zq, qn])?, Some(raw), Some(a.weights))
            }
            _ => (tape.concat_cols(&[zq, qn])?, None, None),
        };
        let mut h = head_in;
        for b in &imp.head_blocks {
            h = resnet_block(tape, bp, b, h, Activation::Relu)?;
        }
        let logits = linear_layer(tape, bp, &imp.occ, h)?;
        let flow = linear_layer(tape, bp, &imp.flow, h)?;
        Ok(DecodeVars {
            logits,
            flow,
            offsets,
            weights,
        })
    }

    /// Evaluates every query in a single batched pass.
    pub fn decode_queries(&self, fm: &FeatureMap<T>, qs: &[QueryPoint]) -> Result<(Vec<Prediction>, Vec<DecoderIntrospection>)> {
        let mut tape = Tape::new();
        tape.set_nan_check(false);
        let bp = tape.bind(&self.params);
        let z = tape.constant(fm.z.clone());
        let v = self.decode_on_tape(&mut tape, &bp, z, qs)?;
        let logits = &tape.value(v.logits).data;
        let flow = &tape.value(v.flow).data;
        let preds = (0..qs.len())
            .map(|i| {
                let f = FlowVec::new(flow[2 * i].as_f64(), flow[2 * i + 1].as_f64());
                Prediction::from_logit(logits[i].as_f64(), f)
            })
            .collect();
        let k = self.config.k;
        let scale = self.config.offset_scale_m;
        let intro = match (v.offsets, v.weights) {
            (Some(o), Some(w)) => {
                let (od, wd) = (&tape.value(o).data, &tape.value(w).data);
                qs.iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let offsets: Vec<[f64; 2]> = (0..k)
                            .map(|j| [od[2 * (i * k + j)].as_f64() * scale, od[2 * (i * k + j) + 1].as_f64() * scale])
                            .collect();
                        DecoderIntrospection {
                            refs: offsets.iter().map(|d| [q.x + d[0], q.y + d[1]]).collect(),
                            offsets,
                            weights: wd[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect(),
                        }
                    })
                    .collect()
            }
            _ => vec![DecoderIntrospection::default(); qs.len()],
        };
        Ok((preds, intro))
    }

    /// [`Self::decode_queries`] in chunks of [`PREDICT_CHUNK`], predictions only.
    pub fn predict(&self, fm: &FeatureMap<T>, qs: &[QueryPoint]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(qs.len());
        for chunk in qs.chunks(PREDICT_CHUNK) {
            out.extend(self.decode_queries(fm, chunk)?.0);
        }
        Ok(out)
    }

    /// Grid of cell centroids and label-step times emitted by the explicit decoder.
    pub fn explicit_grid(&self) -> QueryGrid {
        let res = if self.config.explicit_upsample {
            self.frame.grid.cell_m
        } else {
            self.frame.meters_per_cell()
        };
        QueryGrid::new(self.frame.grid.roi, self.frame.horizon, res, self.frame.label_dt).expect("validated frame")
    }

    /// Explicit decoder: occupancy logits `(T, ny, nx)` and flow `(T, 2, ny, nx)`.
    pub fn explicit_on_tape(&self, tape: &mut Tape<T>, bp: &BoundParams, z: Var) -> Result<(Var, Var)> {
        let p = self.layout.exp.as_ref().ok_or(ModelError::MissingDecoder("explicit"))?;
        let h = conv_layer(tape, bp, &p.conv, z)?;
        let h = tape.relu(h);
        let mut h = resnet_block(tape, bp, &p.block, h, Activation::Relu)?;
        if self.config.explicit_upsample {
            h = tape.upsample2x(h)?;
        }
        let occ = conv_layer(tape, bp, &p.occ, h)?;
        let flow = conv_layer(tape, bp, &p.flow, h)?;
        let s = tape.shape(flow).to_vec();
        let flow = tape.reshape(flow, &[s[0] / 2, 2, s[1], s[2]])?;
        Ok((occ, flow))
    }

    pub fn explicit_decode(&self, fm: &FeatureMap<T>) -> Result<ExplicitGrids> {
        let mut tape = Tape::new();
        tape.set_nan_check(false);
        let bp = tape.bind(&self.params);
        let z = tape.constant(fm.z.clone());
        let (occ, flow) = self.explicit_on_tape(&mut tape, &bp, z)?;
        let occ_logit = tape.value(occ).data.iter().map(|v| v.as_f64()).collect();
        let flow = tape.value(flow).data.iter().map(|v| v.as_f64()).collect();
        Ok(ExplicitGrids::new(self.explicit_grid(), occ_logit, flow))
    }
}

fn repeat_rows<T: Real>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let d = t.shape[1];
    let mut data = Vec::with_capacity(t.len() * k);
    for row in t.data.chunks_exact(d) {
        for _ in 0..k {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(&[t.shape[0] * k, d], data)
}

impl ExplicitGrids {
    /// `occ_logit` is `(T, ny, nx)` and `flow` is `(T, 2, ny, nx)` over the
    /// cells and label steps of `grid`.
    pub fn new(grid: QueryGrid, occ_logit: Vec<f64>, flow: Vec<f64>) -> Self {
        let plane = grid.nx * grid.ny;
        let steps = grid.times.len();
        assert_eq!(occ_logit.len(), steps * plane, "occupancy grid shape");
        assert_eq!(flow.len(), 2 * steps * plane, "flow grid shape");
        let occ_prob: Vec<f64> = occ_logit.iter().map(|&l| sigmoid(l)).collect();
        let cells = (0..steps * plane)
            .map(|i| {
                let (t, c) = (i / plane, i % plane);
                [occ_prob[i], flow[2 * t * plane + c], flow[(2 * t + 1) * plane + c]]
            })
            .collect();
        Self {
            grid,
            occ_logit,
            occ_prob,
            flow,
            cells,
        }
    }

    pub fn grid(&self) -> &QueryGrid {
        &self.grid
    }

    /// `(T, ny, nx)`.
    pub fn occ_logit(&self) -> &[f64] {
        &self.occ_logit
    }

    /// `(T, ny, nx)`.
    pub fn occ_prob(&self) -> &[f64] {
        &self.occ_prob
    }

    /// `(T, 2, ny, nx)`.
    pub fn flow(&self) -> &[f64] {
        &self.flow
    }

    fn extent(&self) -> Roi {
        self.grid.roi
    }

    /// Bilinear in space between cell centroids, linear in time between
    /// label steps, on probabilities. Queries between the outermost
    /// centroid and the grid edge take the edge value.
    pub fn query(&self, q: &QueryPoint) -> Result<Prediction> {
        let roi = self.extent();
        let times = &self.grid.times;
        let t_max = *times.last().expect("at least one step");
        let eps = 1e-9;
        if !(roi.contains(q.x, q.y) && q.t >= -eps && q.t <= t_max + eps) {
            return Err(ModelError::OutOfExtent { x: q.x, y: q.y, t: q.t });
        }
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let res = self.grid.spatial_res;
        // Coordinates within rounding of a node snap to it.
        let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        let cx = snap((q.x - roi.x_min()) / res - 0.5).clamp(0.0, (nx - 1) as f64);
        let cy = snap((q.y - roi.y_min()) / res - 0.5).clamp(0.0, (ny - 1) as f64);
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        let ct = snap(q.t / dt).clamp(0.0, (times.len() - 1) as f64);

        let (x0, y0, t0) = (cx.floor() as usize, cy.floor() as usize, ct.floor() as usize);
        let (x1, y1, t1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1), (t0 + 1).min(times.len() - 1));
        let (fx, fy, ft) = (cx - x0 as f64, cy - y0 as f64, ct - t0 as f64);
        let plane = nx * ny;
        let sample = |base: usize| -> [f64; 3] {
            let v = |r: usize, c: usize| &self.cells[base + r * nx + c];
            let (a, b, c, d) = (v(y0, x0), v(y0, x1), v(y1, x0), v(y1, x1));
            std::array::from_fn(|k| (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]))
        };
        let (a, b) = (sample(t0 * plane), sample(t1 * plane));
        let [p, fxv, fyv]: [f64; 3] = std::array::from_fn(|k| (1.0 - ft) * a[k] + ft * b[k]);
        let p = p.clamp(0.0, 1.0);
        let logit = (p / (1.0 - p)).ln();
        Ok(Prediction {
            occ_logit: logit,
            occ_prob: p,
            flow: FlowVec::new(fxv, fyv),
        })
    }
}

/// Explicit-decoder prediction at an arbitrary query.
pub fn query_explicit(grids: &ExplicitGrids, q: &QueryPoint) -> Result<Prediction> {
    grids.query(q)
}
