//! Model inputs: multi-sweep BEV voxel grid and lane-centerline raster.
//!
//! Frame convention shared by every raster in the crate: row 0 holds the
//! minimum `y`, column 0 the minimum `x`, and cell `(r, c)` covers
//! `[x_min + c*cell, x_min + (c+1)*cell) x [y_min + r*cell, y_min + (r+1)*cell)`.

use crate::scene::{history_sweeps, PointSweep, Roi, Scenario, SensorConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("expected {expected} sweeps, got {got}")]
    SweepCount { expected: usize, got: usize },
    #[error("snapshot shape {shape:?} does not match {len} values")]
    SnapshotShape { shape: Vec<usize>, len: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed snapshot sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    pub cell_m: f64,
    pub height_bins: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub binarize: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            cell_m: 0.5,
            height_bins: 4,
            min_height: 0.0,
            max_height: 2.0,
            binarize: false,
        }
    }
}

/// Spatial frame and channel layout of the input rasters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub roi: Roi,
    pub cell_m: f64,
    pub h_px: usize,
    pub w_px: usize,
    pub history: usize,
    pub height_bins: usize,
    pub min_height: f64,
    pub max_height: f64,
}

impl GridMeta {
    pub fn new(roi: Roi, history: usize, cfg: &EncodeConfig) -> Self {
        Self {
            roi,
            cell_m: cfg.cell_m,
            h_px: (roi.h_m / cfg.cell_m).round() as usize,
            w_px: (roi.w_m / cfg.cell_m).round() as usize,
            history,
            height_bins: cfg.height_bins,
            min_height: cfg.min_height,
            max_height: cfg.max_height,
        }
    }

    pub fn lidar_channels(&self) -> usize {
        self.history * self.height_bins
    }

    /// Cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.roi.x_min()) / self.cell_m).floor();
        let r = ((y - self.roi.y_min()) / self.cell_m).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.w_px && (r as usize) < self.h_px).then_some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.roi.x_min() + (col as f64 + 0.5) * self.cell_m,
            self.roi.y_min() + (row as f64 + 0.5) * self.cell_m,
        )
    }

    /// Continuous coordinates on a raster with `stride` input cells per
    /// output cell, where integer values land on cell centers.
    pub fn continuous_coords(&self, x: f64, y: f64, stride: usize) -> (f64, f64) {
        let c = self.cell_m * stride as f64;
        ((x - self.roi.x_min()) / c - 0.5, (y - self.roi.y_min()) / c - 0.5)
    }

    pub fn height_bin(&self, h: f64) -> Option<usize> {
        if !(h >= self.min_height && h < self.max_height) {
            return None;
        }
        let b = ((h - self.min_height) / (self.max_height - self.min_height) * self.height_bins as f64) as usize;
        Some(b.min(self.height_bins - 1))
    }
}

/// LiDAR input of shape `(history * height_bins, h_px, w_px)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub data: Vec<f32>,
    pub meta: GridMeta,
}

impl VoxelGrid {
    pub fn shape(&self) -> [usize; 3] {
        [self.meta.lidar_channels(), self.meta.h_px, self.meta.w_px]
    }

    pub fn at(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.meta.h_px + row) * self.meta.w_px + col]
    }
}

/// Map input of shape `(1, h_px, w_px)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRaster {
    pub data: Vec<f32>,
    pub meta: GridMeta,
}

impl MapRaster {
    pub fn shape(&self) -> [usize; 3] {
        [1, self.meta.h_px, self.meta.w_px]
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.meta.w_px + col]
    }
}

/// Bins the last `meta.history` sweeps (most recent last) into a BEV grid.
/// Sweep `i` lands in channels `i * D .. (i + 1) * D`.
pub fn voxelize(sweeps: &[PointSweep], meta: &GridMeta, binarize: bool) -> Result<VoxelGrid, EncodeError> {
    if sweeps.len() != meta.history {
        return Err(EncodeError::SweepCount {
            expected: meta.history,
            got: sweeps.len(),
        });
    }
    let plane = meta.h_px * meta.w_px;
    let mut data = vec![0.0f32; meta.lidar_channels() * plane];
    for (i, sweep) in sweeps.iter().enumerate() {
        for p in &sweep.points {
            let (Some((r, c)), Some(b)) = (meta.cell_of(p[0], p[1]), meta.height_bin(p[2])) else {
                continue;
            };
            let v = &mut data[(i * meta.height_bins + b) * plane + r * meta.w_px + c];
            *v = if binarize { 1.0 } else { *v + 1.0 };
        }
    }
    Ok(VoxelGrid { data, meta: *meta })
}

/// Whether segment `a`-`b` touches the closed axis-aligned square
/// `[x0, x1] x [y0, y1]` (Liang-Barsky clipping).
fn segment_hits_square(a: (f64, f64), b: (f64, f64), x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0 - x0), (dx, x1 - a.0), (-dy, a.1 - y0), (dy, y1 - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Lights every cell whose square is touched by a polyline segment, i.e.
/// whose center lies within half a cell (Chebyshev) of the segment.
pub fn raster_map(polylines: &[Vec<(f64, f64)>], meta: &GridMeta) -> MapRaster {
    let mut data = vec![0.0f32; meta.h_px * meta.w_px];
    let (x0, y0, cell) = (meta.roi.x_min(), meta.roi.y_min(), meta.cell_m);
    let clamp_idx = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n.saturating_sub(1));
    for line in polylines {
        for w in line.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (lo_x, hi_x) = (a.0.min(b.0), a.0.max(b.0));
            let (lo_y, hi_y) = (a.1.min(b.1), a.1.max(b.1));
            if hi_x < x0 || hi_y < y0 || lo_x > meta.roi.x_max() || lo_y > meta.roi.y_max() {
                continue;
            }
            let c0 = clamp_idx((lo_x - x0) / cell - 1.0, meta.w_px);
            let c1 = clamp_idx((hi_x - x0) / cell + 1.0, meta.w_px);
            let r0 = clamp_idx((lo_y - y0) / cell - 1.0, meta.h_px);
            let r1 = clamp_idx((hi_y - y0) / cell + 1.0, meta.h_px);
            for r in r0..=r1 {
                let (sy0, sy1) = (y0 + r as f64 * cell, y0 + (r + 1) as f64 * cell);
                for c in c0..=c1 {
                    let (sx0, sx1) = (x0 + c as f64 * cell, x0 + (c + 1) as f64 * cell);
                    if segment_hits_square(a, b, sx0, sx1, sy0, sy1) {
                        data[r * meta.w_px + c] = 1.0;
                    }
                }
            }
        }
    }
    MapRaster { data, meta: *meta }
}

/// Both model inputs for a scenario: its simulated LiDAR history and map.
pub fn encode_scenario(scn: &Scenario, sensor: &SensorConfig, cfg: &EncodeConfig) -> Result<(VoxelGrid, MapRaster), EncodeError> {
    let meta = GridMeta::new(scn.roi, scn.history_sweeps, cfg);
    let sweeps = history_sweeps(scn, sensor);
    Ok((voxelize(&sweeps, &meta, cfg.binarize)?, raster_map(&scn.map, &meta)))
}

// ---------------------------------------------------------------------------
// Tensor snapshots: `<stem>.bin` holds little-endian f32 values in row-major
// order, `<stem>.json` the shape, dtype and frame.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<GridMeta>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

pub fn write_snapshot(stem: &Path, shape: &[usize], data: &[f32], frame: Option<GridMeta>) -> Result<(), EncodeError> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(EncodeError::SnapshotShape {
            shape: shape.to_vec(),
            len: data.len(),
        });
    }
    let bin = with_ext(stem, ".bin");
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|source| EncodeError::Io { path: bin, source })?;
    let side = SnapshotSidecar {
        shape: shape.to_vec(),
        dtype: "f32".into(),
        frame,
    };
    let json = with_ext(stem, ".json");
    fs::write(&json, serde_json::to_string_pretty(&side).expect("sidecar serializes"))
        .map_err(|source| EncodeError::Io { path: json, source })
}

pub fn read_snapshot(stem: &Path) -> Result<(SnapshotSidecar, Vec<f32>), EncodeError> {
    let json = with_ext(stem, ".json");
    let text = fs::read_to_string(&json).map_err(|source| EncodeError::Io {
        path: json.clone(),
        source,
    })?;
    let side: SnapshotSidecar = serde_json::from_str(&text).map_err(|source| EncodeError::Sidecar { path: json, source })?;
    let bin = with_ext(stem, ".bin");
    let bytes = fs::read(&bin).map_err(|source| EncodeError::Io { path: bin, source })?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if side.shape.iter().product::<usize>() != data.len() || bytes.len() % 4 != 0 {
        return Err(EncodeError::SnapshotShape {
            shape: side.shape,
            len: data.len(),
        });
    }
    Ok((side, data))
}
