//! Per-speaker latent feature codebooks: k-means++ seeding, Lloyd refinement
//! and the `ELFC` file format.
//!
//! `ELFC` layout (little-endian): magic `"ELFC"`, version `u32`, speaker id
//! (`u32` length + UTF-8), `K` `u32`, `H` `u32`, clustered flag `u8`, seed
//! `u64`, source frame count `u64`, source clip count `u32`, `K * H`
//! row-major `f32` payload, CRC-32 of all preceding bytes.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{read_file, unseal, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ELFC";
pub const VERSION: u32 = 1;

/// All `mu` frames of one speaker, concatenated in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct MuFrameSet {
    pub speaker_id: String,
    pub frames: Array2<f32>,
    /// Source clip id and the row range it contributed.
    pub clip_ranges: Vec<(String, Range<usize>)>,
}

impl MuFrameSet {
    pub fn from_clips(
        speaker_id: impl Into<String>,
        clips: Vec<(String, Array2<f32>)>,
    ) -> Result<Self> {
        let speaker_id = speaker_id.into();
        if clips.is_empty() {
            return Err(Error::Input(format!("speaker `{speaker_id}` has no clips")));
        }
        let width = clips[0].1.ncols();
        let total: usize = clips.iter().map(|(_, m)| m.nrows()).sum();
        if total == 0 {
            return Err(Error::Input(format!(
                "speaker `{speaker_id}` has no frames"
            )));
        }
        let mut frames = Array2::<f32>::zeros((total, width));
        let mut clip_ranges = Vec::with_capacity(clips.len());
        let mut row = 0;
        for (id, m) in clips {
            if m.ncols() != width {
                return Err(Error::Dimension(format!(
                    "clip `{id}` has width {}, expected {width}",
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("clip `{id}` has non-finite frames")));
            }
            let n = m.nrows();
            frames.slice_mut(ndarray::s![row..row + n, ..]).assign(&m);
            clip_ranges.push((id, row..row + n));
            row += n;
        }
        Ok(Self {
            speaker_id,
            frames,
            clip_ranges,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub n_source_frames: u64,
    pub n_source_clips: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerCodebook {
    pub speaker_id: String,
    /// `K x H` centroids (or raw frames when not clustered).
    pub vectors: Array2<f32>,
    pub clustered: bool,
    pub provenance: Provenance,
}

impl SpeakerCodebook {
    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(&self.speaker_id);
        w.u32(self.vectors.nrows() as u32);
        w.u32(self.vectors.ncols() as u32);
        w.u8(self.clustered as u8);
        w.u64(self.provenance.seed);
        w.u64(self.provenance.n_source_frames);
        w.u32(self.provenance.n_source_clips);
        let standard = self.vectors.as_standard_layout();
        w.f32s(standard.as_slice().expect("standard layout"));
        w.seal()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unseal(bytes)?;
        let mut r = ByteReader::new(body);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let speaker_id = r.string()?;
        let k = r.u32()? as usize;
        let h = r.u32()? as usize;
        let clustered = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad clustered flag {other}"))),
        };
        let seed = r.u64()?;
        let n_source_frames = r.u64()?;
        let n_source_clips = r.u32()?;
        let data = r.f32s(k * h)?;
        r.finish()?;
        let vectors =
            Array2::from_shape_vec((k, h), data).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            speaker_id,
            vectors,
            clustered,
            provenance: Provenance {
                n_source_frames,
                n_source_clips,
                seed,
            },
        })
    }
}

pub fn save_codebook(cb: &SpeakerCodebook, path: &Path) -> Result<()> {
    write_atomic(path, &cb.to_bytes())
}

pub fn load_codebook(path: &Path) -> Result<SpeakerCodebook> {
    SpeakerCodebook::from_bytes(&read_file(path)?)
}

/// Clustering settings. Lloyd stops on an unchanged assignment, a relative
/// SSE improvement below `tol`, or after `max_iters` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent seeding + refinement runs; the lowest SSE wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 32,
            max_iters: 300,
            tol: 1e-6,
            restarts: 1,
            seed: 0,
        }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn to_f64(points: ArrayView2<f32>) -> Array2<f64> {
    points.mapv(|v| v as f64)
}

/// Draw an index with probability proportional to `weights`.
fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc && w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// Squared distance from every point to its nearest chosen point; the
/// k-means++ sampling weights once normalized.
pub fn nearest_sq_distances(points: ArrayView2<f32>, chosen: &[usize]) -> Vec<f64> {
    let p = to_f64(points);
    (0..p.nrows())
        .map(|i| {
            chosen
                .iter()
                .map(|&c| sq_dist(p.row(i), p.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// k-means++ seeding. The first centroid is uniform over the points; each
/// later one is drawn proportionally to the squared distance to the nearest
/// centroid already chosen. When every remaining weight is zero (duplicate
/// points) a not-yet-chosen index is drawn uniformly.
pub fn kmeanspp_init<R: Rng + ?Sized>(
    points: ArrayView2<f32>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f32>> {
    let idx = kmeanspp_indices(points, k, rng)?;
    Ok(points.select(ndarray::Axis(0), &idx))
}

pub fn kmeanspp_indices<R: Rng + ?Sized>(
    points: ArrayView2<f32>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::Input(format!(
            "cannot seed {k} centroids from {n} points"
        )));
    }
    let p = to_f64(points);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(p.row(i), p.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match weighted_pick(&d2, rng) {
            Some(i) => i,
            None => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(p.row(i), p.row(next)));
        }
    }
    Ok(chosen)
}

/// Uniformly random distinct points; the baseline seeding.
pub fn uniform_init<R: Rng + ?Sized>(
    points: ArrayView2<f32>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f32>> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::Input(format!(
            "cannot seed {k} centroids from {n} points"
        )));
    }
    let idx = rand::seq::index::sample(rng, n, k).into_vec();
    Ok(points.select(ndarray::Axis(0), &idx))
}

#[derive(Debug, Clone)]
pub struct LloydResult {
    pub centroids: Array2<f32>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// SSE after every iteration; non-increasing.
    pub sse_history: Vec<f64>,
}

/// Lloyd refinement from `init`. Empty clusters are repaired by moving the
/// centroid onto the point farthest from its current centroid.
pub fn lloyd(
    points: ArrayView2<f32>,
    init: &Array2<f32>,
    max_iters: usize,
    tol: f64,
) -> Result<LloydResult> {
    let (n, h) = points.dim();
    let k = init.nrows();
    if k == 0 || n < k {
        return Err(Error::Input(format!("{k} centroids for {n} points")));
    }
    if init.ncols() != h {
        return Err(Error::Dimension(format!(
            "centroid width {} vs point width {h}",
            init.ncols()
        )));
    }
    for a in 0..k {
        for b in a + 1..k {
            if init.row(a) == init.row(b) {
                return Err(Error::Input(format!(
                    "initial centroids {a} and {b} coincide"
                )));
            }
        }
    }
    let p = to_f64(points);
    let mut centroids = init.mapv(|v| v as f64);
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut next = vec![0usize; n];
        let mut dist = vec![0f64; n];
        for i in 0..n {
            let (best, d) = (0..k)
                .map(|c| (c, sq_dist(p.row(i), centroids.row(c))))
                .fold(
                    (0, f64::INFINITY),
                    |acc, x| if x.1 < acc.1 { x } else { acc },
                );
            next[i] = best;
            dist[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &a in &next {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("n >= k leaves a cluster with two points");
            counts[next[donor]] -= 1;
            next[donor] = c;
            dist[donor] = 0.0;
            counts[c] = 1;
            centroids.row_mut(c).assign(&p.row(donor));
        }
        let mut sums = Array2::<f64>::zeros((k, h));
        for (i, &a) in next.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &p.row(i);
        }
        for c in 0..k {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        }
        centroids = sums;
        let sse: f64 = (0..n)
            .map(|i| sq_dist(p.row(i), centroids.row(next[i])))
            .sum();
        let unchanged = next == assignments;
        assignments = next;
        let converged = match history.last() {
            Some(&prev) => unchanged || prev - sse <= tol * prev.max(f64::MIN_POSITIVE),
            None => false,
        };
        history.push(sse);
        if converged {
            break;
        }
    }
    Ok(LloydResult {
        centroids: centroids.mapv(|v| v as f32),
        assignments,
        sse: *history.last().expect("at least one iteration"),
        sse_history: history,
    })
}

/// Best of `restarts` k-means++ + Lloyd runs.
pub fn cluster<R: Rng + ?Sized>(
    points: ArrayView2<f32>,
    cfg: &ClusterConfig,
    rng: &mut R,
) -> Result<LloydResult> {
    let mut best: Option<LloydResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = kmeanspp_init(points, cfg.k, rng)?;
        let run = lloyd(
            points,
            &dedup_rows(init, points, rng)?,
            cfg.max_iters,
            cfg.tol,
        )?;
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

// Seeds drawn from duplicated points can coincide; Lloyd needs distinct rows,
// so nudge coincident seeds onto other distinct points when any exist.
fn dedup_rows<R: Rng + ?Sized>(
    init: Array2<f32>,
    points: ArrayView2<f32>,
    rng: &mut R,
) -> Result<Array2<f32>> {
    let mut out = init;
    let k = out.nrows();
    for a in 1..k {
        if (0..a).any(|b| out.row(a) == out.row(b)) {
            let candidates: Vec<usize> = (0..points.nrows())
                .filter(|&i| (0..k).all(|b| out.row(b) != points.row(i)))
                .collect();
            if candidates.is_empty() {
                // Fewer distinct points than centroids: perturb slightly.
                let mut row = out.row_mut(a);
                row[0] += f32::EPSILON * (1.0 + row[0].abs()) * a as f32;
            } else {
                let pick = candidates[rng.random_range(0..candidates.len())];
                out.row_mut(a).assign(&points.row(pick));
            }
        }
    }
    Ok(out)
}

/// Cluster a speaker's frames into `cfg.k` centroids, or keep the frames
/// verbatim when there are fewer than `cfg.k` of them.
pub fn build_codebook(frames: &MuFrameSet, cfg: &ClusterConfig) -> Result<SpeakerCodebook> {
    if frames.n_frames() == 0 {
        return Err(Error::Input("no frames to cluster".into()));
    }
    let provenance = Provenance {
        n_source_frames: frames.n_frames() as u64,
        n_source_clips: frames.clip_ranges.len() as u32,
        seed: cfg.seed,
    };
    if frames.n_frames() < cfg.k {
        return Ok(SpeakerCodebook {
            speaker_id: frames.speaker_id.clone(),
            vectors: frames.frames.clone(),
            clustered: false,
            provenance,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let result = cluster(frames.frames.view(), cfg, &mut rng)?;
    Ok(SpeakerCodebook {
        speaker_id: frames.speaker_id.clone(),
        vectors: result.centroids,
        clustered: true,
        provenance,
    })
}
