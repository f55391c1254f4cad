//! Decoder timing: wall time against query count for the implicit and
//! explicit decoders, encoder excluded.

use crate::eval::DecoderKind;
use crate::model::{FeatureMap, Model, ModelError, Prediction, PREDICT_CHUNK};
use crate::scene::{sample_queries, QueryPoint, SceneError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const MIN_REPS: usize = 5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least {MIN_REPS} repetitions required, got {0}")]
    TooFewReps(usize),
    #[error("query counts must be non-empty, positive and strictly ascending")]
    BadCounts,
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Where a record was measured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub cpu: String,
    pub threads: usize,
    pub profile: String,
    pub parallel: bool,
}

impl Fingerprint {
    pub fn current(parallel: bool) -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let threads = if parallel { rayon::current_num_threads() } else { 1 };
        let profile = if cfg!(debug_assertions) { "debug-assertions" } else { "release" };
        Self {
            cpu,
            threads,
            profile: profile.to_string(),
            parallel,
        }
    }
}

/// One CSV row; the fingerprint is flattened into the trailing columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub decoder: DecoderKind,
    pub n_queries: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub cpu: String,
    pub threads: usize,
    pub profile: String,
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub reps: usize,
    /// Decode query chunks on the rayon pool.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: 7,
            parallel: false,
            seed: 0,
        }
    }
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile_sorted(&s, 0.5), quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25))
}

/// One timed decode of `qs`. The explicit path decodes the dense grid and
/// then interpolates at every query.
pub fn decode_once(model: &Model<f32>, fm: &FeatureMap<f32>, decoder: DecoderKind, qs: &[QueryPoint], parallel: bool) -> Result<Vec<Prediction>> {
    match decoder {
        DecoderKind::Implicit if parallel => {
            let parts: Vec<Vec<Prediction>> = qs
                .par_chunks(PREDICT_CHUNK)
                .map(|c| model.predict(fm, c))
                .collect::<std::result::Result<_, _>>()?;
            Ok(parts.concat())
        }
        DecoderKind::Implicit => Ok(model.predict(fm, qs)?),
        DecoderKind::Explicit => {
            let grids = model.explicit_decode(fm)?;
            if parallel {
                Ok(qs.par_iter().map(|q| grids.query(q)).collect::<std::result::Result<_, _>>()?)
            } else {
                Ok(qs.iter().map(|q| grids.query(q)).collect::<std::result::Result<_, _>>()?)
            }
        }
    }
}

/// Times `decoder` at every count: one warmup per count, then `reps`
/// rounds that each visit every count once, so drift in machine speed is
/// shared by all counts.
pub fn bench_decoder(
    model: &Model<f32>,
    fm: &FeatureMap<f32>,
    decoder: DecoderKind,
    counts: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    if cfg.reps < MIN_REPS {
        return Err(BenchError::TooFewReps(cfg.reps));
    }
    if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BenchError::BadCounts);
    }
    let fp = Fingerprint::current(cfg.parallel);
    let queries = counts
        .iter()
        .map(|&n| sample_queries(&fm.frame.grid.roi, fm.frame.horizon, n, cfg.seed ^ n as u64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for qs in &queries {
        std::hint::black_box(decode_once(model, fm, decoder, qs, cfg.parallel)?);
    }
    let mut ms = vec![Vec::with_capacity(cfg.reps); counts.len()];
    for _ in 0..cfg.reps {
        for (qs, ms) in queries.iter().zip(&mut ms) {
            let t0 = Instant::now();
            std::hint::black_box(decode_once(model, fm, decoder, qs, cfg.parallel)?);
            ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(counts
        .iter()
        .zip(&ms)
        .map(|(&n, ms)| {
            let (median_ms, iqr_ms) = median_iqr(ms);
            BenchRecord {
                decoder,
                n_queries: n,
                reps: cfg.reps,
                median_ms,
                iqr_ms,
                cpu: fp.cpu.clone(),
                threads: fp.threads,
                profile: fp.profile.clone(),
                parallel: fp.parallel,
            }
        })
        .collect())
}

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let err = |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in records {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let err = |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(err)
}

/// Ratio of the slowest to the fastest median.
pub fn spread(records: &[BenchRecord]) -> f64 {
    let max = records.iter().map(|r| r.median_ms).fold(f64::MIN, f64::max);
    let min = records.iter().map(|r| r.median_ms).fold(f64::MAX, f64::min);
    max / min
}

/// Fixed-plus-linear reading of a time-versus-count curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeAnalysis {
    /// Median at the smallest count.
    pub fixed_ms: f64,
    /// Slope between the two largest counts.
    pub per_query_ms: f64,
    /// Count at which the linear term equals the fixed term.
    pub knee: f64,
    /// Largest `t(n) / t(n_min)` over counts at or below the knee.
    pub flat_ratio: f64,
    /// Largest `(t2 / t1) / (n2 / n1)` over consecutive counts past the
    /// knee; at most 1 for sub-linear growth.
    pub growth_excess: f64,
}

/// Needs at least two records, sorted by count.
pub fn knee_analysis(records: &[BenchRecord]) -> KneeAnalysis {
    assert!(records.len() >= 2, "knee analysis needs two counts");
    let first = &records[0];
    let (a, b) = (&records[records.len() - 2], &records[records.len() - 1]);
    let fixed_ms = first.median_ms;
    let per_query_ms = ((b.median_ms - a.median_ms) / (b.n_queries - a.n_queries) as f64).max(f64::MIN_POSITIVE);
    let knee = fixed_ms / per_query_ms;
    let flat_ratio = records
        .iter()
        .filter(|r| r.n_queries as f64 <= knee)
        .map(|r| r.median_ms / fixed_ms)
        .fold(1.0, f64::max);
    let growth_excess = records
        .windows(2)
        .filter(|w| w[0].n_queries as f64 >= knee)
        .map(|w| (w[1].median_ms / w[0].median_ms) / (w[1].n_queries as f64 / w[0].n_queries as f64))
        .fold(0.0, f64::max);
    KneeAnalysis {
        fixed_ms,
        per_query_ms,
        knee,
        flat_ratio,
        growth_excess,
    }
}

/// Pairs `(n_a, n_b)` of counts at or past `knee` whose time grows faster
/// than the count even when each median is moved half its interquartile
/// range in the favorable direction. Empty means at most linear growth
/// within measurement noise.
pub fn superlinear_pairs(records: &[BenchRecord], knee: f64) -> Vec<(usize, usize)> {
    let past: Vec<&BenchRecord> = records.iter().filter(|r| r.n_queries as f64 >= knee).collect();
    let mut out = Vec::new();
    for (i, a) in past.iter().enumerate() {
        for b in &past[i + 1..] {
            let growth = (b.median_ms - b.iqr_ms / 2.0) / (a.median_ms + a.iqr_ms / 2.0);
            if growth > b.n_queries as f64 / a.n_queries as f64 {
                out.push((a.n_queries, b.n_queries));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::{EncodeConfig, GridMeta, MapRaster, VoxelGrid};
    use crate::model::{ModelConfig, ModelFrame};
    use crate::scene::Roi;

    fn setup() -> (Model<f32>, FeatureMap<f32>) {
        let enc = EncodeConfig {
            cell_m: 1.0,
            ..EncodeConfig::default()
        };
        let g = GridMeta::new(Roi { h_m: 16.0, w_m: 16.0 }, 2, &enc);
        let frame = ModelFrame {
            grid: g,
            horizon: 5.0,
            label_dt: 0.5,
        };
        let cfg = ModelConfig {
            channels: 8,
            stem_channels: 4,
            trunk_blocks: 2,
            mlp_width: 16,
            explicit: true,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg, frame).unwrap();
        let lidar = VoxelGrid {
            data: (0..g.lidar_channels() * g.h_px * g.w_px).map(|i| (i % 7 == 0) as u8 as f32).collect(),
            meta: g,
        };
        let map = MapRaster {
            data: vec![0.0; g.h_px * g.w_px],
            meta: g,
        };
        let fm = m.encode_scene(&lidar, &map).unwrap();
        (m, fm)
    }

    #[test]
    fn quantiles_match_hand_values() {
        let (m, iqr) = median_iqr(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);
        let (m, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_eq!(iqr, 1.5);
    }

    #[test]
    fn single_count_gives_one_record() {
        let (m, fm) = setup();
        for d in [DecoderKind::Implicit, DecoderKind::Explicit] {
            let r = bench_decoder(&m, &fm, d, &[1], &BenchConfig::default()).unwrap();
            assert_eq!(r.len(), 1);
            assert!(r[0].median_ms > 0.0 && r[0].iqr_ms >= 0.0);
            assert_eq!(r[0].reps, 7);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (m, fm) = setup();
        let few = BenchConfig {
            reps: 4,
            ..BenchConfig::default()
        };
        assert!(matches!(bench_decoder(&m, &fm, DecoderKind::Implicit, &[1], &few), Err(BenchError::TooFewReps(4))));
        for counts in [&[][..], &[0], &[10, 5], &[3, 3]] {
            let r = bench_decoder(&m, &fm, DecoderKind::Implicit, counts, &BenchConfig::default());
            assert!(matches!(r, Err(BenchError::BadCounts)));
        }
    }

    #[test]
    fn repeated_runs_are_stable() {
        let (m, fm) = setup();
        let run = || bench_decoder(&m, &fm, DecoderKind::Implicit, &[256], &BenchConfig::default()).unwrap()[0].median_ms;
        let (a, b) = (run(), run());
        assert!(a / b < 3.0 && b / a < 3.0, "{a} vs {b}");
    }

    #[test]
    fn parallel_path_matches_serial() {
        let (m, fm) = setup();
        let qs = sample_queries(&fm.frame.grid.roi, 5.0, 5000, 1).unwrap();
        for d in [DecoderKind::Implicit, DecoderKind::Explicit] {
            let a = decode_once(&m, &fm, d, &qs, false).unwrap();
            let b = decode_once(&m, &fm, d, &qs, true).unwrap();
            assert_eq!(a, b);
        }
    }

    fn rec(n: usize, ms: f64) -> BenchRecord {
        BenchRecord {
            decoder: DecoderKind::Implicit,
            n_queries: n,
            reps: 5,
            median_ms: ms,
            iqr_ms: 0.0,
            cpu: "cpu, with comma".into(),
            threads: 1,
            profile: "release".into(),
            parallel: false,
        }
    }

    #[test]
    fn knee_of_affine_curve() {
        // 2 ms fixed plus 0.01 ms per query: knee at 200.
        let r: Vec<_> = [1, 10, 100, 1000, 10000].iter().map(|&n| rec(n, 2.0 + 0.01 * n as f64)).collect();
        let k = knee_analysis(&r);
        assert!((k.per_query_ms - 0.01).abs() < 1e-12);
        assert!((k.knee - 2.01 / 0.01).abs() < 1e-9);
        assert!(k.flat_ratio < 2.0);
        assert!(k.growth_excess <= 1.0);
        assert!((spread(&r) - 102.0 / 2.01).abs() < 1e-9);
    }

    #[test]
    fn superlinear_pairs_respect_noise() {
        let mut r: Vec<_> = [100, 1000, 10000].iter().map(|&n| rec(n, 0.01 * n as f64)).collect();
        assert!(superlinear_pairs(&r, 0.0).is_empty(), "exactly linear");
        r[2].median_ms = 120.0;
        assert_eq!(superlinear_pairs(&r, 0.0), vec![(100, 10000), (1000, 10000)]);
        assert_eq!(superlinear_pairs(&r, 5000.0), vec![]);
        r[2].iqr_ms = 40.0;
        assert!(superlinear_pairs(&r, 0.0).is_empty(), "within noise");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bench.csv");
        let r = vec![rec(1, 0.5), rec(100, 0.75)];
        write_csv(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("decoder,n_queries,reps,median_ms,iqr_ms,cpu,threads,profile,parallel\n"));
        assert_eq!(read_csv(&p).unwrap(), r);
    }
}
