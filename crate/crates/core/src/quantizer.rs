//! k-means codebooks over frame-level features and nearest-centroid
//! pseudo-transcription.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::units::UnitSequence;

const FEATURE_MAGIC: &[u8; 4] = b"SSF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L2,
    Cosine,
}

impl std::str::FromStr for Distance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(Distance::L2),
            "cosine" => Ok(Distance::Cosine),
            other => Err(format!("unknown distance `{other}` (expected l2 or cosine)")),
        }
    }
}

/// Frames of one utterance, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    dim: usize,
    frames: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, dim: usize, frames: Vec<f32>) -> Result<Self> {
        let id = id.into();
        crate::units::validate_id(&id)?;
        if dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        if frames.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                got: frames.len() % dim,
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of `{id}`")));
        }
        Ok(Self { id, dim, frames })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    pub distance: Distance,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>, distance: Distance, seed: u64) -> Result<Self> {
        let k = centroids.len();
        let dim = centroids.first().map_or(0, Vec::len);
        if k == 0 || dim == 0 {
            return Err(Error::Config("codebook needs at least one non-empty centroid".into()));
        }
        for c in &centroids {
            if c.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("centroid".into()));
            }
            if distance == Distance::Cosine && norm(c) == 0.0 {
                return Err(Error::Config("cosine codebook has a zero-norm centroid".into()));
            }
        }
        Ok(Self {
            k,
            dim,
            distance,
            seed,
            centroids,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cb: Codebook = serde_json::from_str(&text)?;
        let checked = Codebook::new(cb.centroids, cb.distance, cb.seed)?;
        if checked.k != cb.k || checked.dim != cb.dim {
            return Err(Error::Config(format!(
                "codebook header says k={} dim={} but centroids are {}x{}",
                cb.k, cb.dim, checked.k, checked.dim
            )));
        }
        Ok(checked)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Index of the closest centroid; ties go to the lowest index.
    fn nearest(&self, frame: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        let fnorm = norm(frame);
        for (j, c) in self.centroids.iter().enumerate() {
            let d = dissimilarity(self.distance, frame, fnorm, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared Euclidean distance, or `1 - cos` in cosine mode.
fn dissimilarity(distance: Distance, frame: &[f64], frame_norm: f64, c: &[f64]) -> f64 {
    match distance {
        Distance::L2 => frame.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum(),
        Distance::Cosine => {
            let dot: f64 = frame.iter().zip(c).map(|(a, b)| a * b).sum();
            1.0 - dot / (frame_norm * norm(c))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub distance: Distance,
    pub max_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Objective after each assignment step.
    pub inertia: Vec<f64>,
    pub assignments: Vec<usize>,
    pub initial_centers: Vec<usize>,
}

fn gather_frames(features: &[FeatureSequence], distance: Distance) -> Result<(usize, Vec<Vec<f64>>)> {
    let dim = features
        .first()
        .map(FeatureSequence::dim)
        .ok_or(Error::TooFewFrames { k: 1, frames: 0 })?;
    let mut frames = Vec::new();
    for seq in features {
        if seq.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: seq.dim(),
            });
        }
        for f in seq.frames() {
            let v: Vec<f64> = f.iter().map(|&x| f64::from(x)).collect();
            if distance == Distance::Cosine && norm(&v) == 0.0 {
                return Err(Error::ZeroNormFrame(frames.len()));
            }
            frames.push(v);
        }
    }
    Ok((dim, frames))
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Assignment runs in parallel; centroid sums are accumulated in frame
/// order, so the result is bit-identical for any thread count. In cosine
/// mode each centroid is the plain mean of its members' unit vectors.
pub fn kmeans_fit(features: &[FeatureSequence], params: &KMeansParams) -> Result<KMeansFit> {
    let KMeansParams {
        k,
        distance,
        max_iters,
        seed,
    } = *params;
    if k == 0 || max_iters == 0 {
        return Err(Error::Config("k and max_iters must be at least 1".into()));
    }
    let (dim, frames) = gather_frames(features, distance)?;
    if frames.len() < k {
        return Err(Error::TooFewFrames {
            k,
            frames: frames.len(),
        });
    }
    let norms: Vec<f64> = frames.iter().map(|f| norm(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++
    let mut initial_centers = vec![rng.random_range(0..frames.len())];
    let mut min_d: Vec<f64> = frames
        .par_iter()
        .zip(&norms)
        .map(|(f, &n)| dissimilarity(distance, f, n, &frames[initial_centers[0]]).max(0.0))
        .collect();
    while initial_centers.len() < k {
        let next = match WeightedIndex::new(&min_d) {
            Ok(w) => w.sample(&mut rng),
            // every frame coincides with a chosen center: take the first unused frame
            Err(_) => (0..frames.len())
                .find(|i| !initial_centers.contains(i))
                .expect("frames.len() >= k"),
        };
        initial_centers.push(next);
        let c = &frames[next];
        min_d
            .par_iter_mut()
            .zip(frames.par_iter().zip(&norms))
            .for_each(|(m, (f, &n))| *m = m.min(dissimilarity(distance, f, n, c).max(0.0)));
    }
    let mut centroids: Vec<Vec<f64>> = initial_centers.iter().map(|&i| frames[i].clone()).collect();

    let mut assignments: Vec<usize> = vec![usize::MAX; frames.len()];
    let mut inertia = Vec::new();
    for _ in 0..max_iters {
        let cb = Codebook {
            k,
            dim,
            distance,
            seed,
            centroids,
        };
        let assigned: Vec<(usize, f64)> = frames.par_iter().map(|f| cb.nearest(f)).collect();
        centroids = cb.centroids;
        let changed = assigned
            .iter()
            .zip(&assignments)
            .any(|((a, _), &old)| *a != old);
        let mut dists: Vec<f64> = assigned.iter().map(|&(_, d)| d.max(0.0)).collect();
        for (slot, (a, _)) in assignments.iter_mut().zip(&assigned) {
            *slot = *a;
        }
        inertia.push(crate::stats::compensated_sum(dists.iter().copied()));
        if !changed {
            break;
        }

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in frames.iter().enumerate() {
            let a = assignments[i];
            counts[a] += 1;
            let scale = match distance {
                Distance::L2 => 1.0,
                Distance::Cosine => 1.0 / norms[i],
            };
            for (s, x) in sums[a].iter_mut().zip(f) {
                *s += x * scale;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                // members cancelling out leave every direction equally good
                if distance == Distance::L2 || norm(&mean) > 0.0 {
                    centroids[j] = mean;
                }
            }
        }
        // Empty clusters take the frame currently worst served by its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
                centroids[j] = frames[far].clone();
                dists[far] = f64::NEG_INFINITY;
            }
        }
    }

    Ok(KMeansFit {
        codebook: Codebook::new(centroids, distance, seed)?,
        inertia,
        assignments,
        initial_centers,
    })
}

/// Maps every frame to its nearest centroid.
pub fn quantize(seq: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    if seq.dim() != cb.dim {
        return Err(Error::DimMismatch {
            expected: cb.dim,
            got: seq.dim(),
        });
    }
    let units = seq
        .frames()
        .enumerate()
        .map(|(i, f)| {
            let v: Vec<f64> = f.iter().map(|&x| f64::from(x)).collect();
            if cb.distance == Distance::Cosine && norm(&v) == 0.0 {
                return Err(Error::ZeroNormFrame(i));
            }
            Ok(cb.nearest(&v).0 as u32)
        })
        .collect::<Result<Vec<_>>>()?;
    UnitSequence::new(units, cb.k as u32)
}

pub fn encode_features(seqs: &[FeatureSequence]) -> Result<Vec<u8>> {
    let dim = seqs.first().map_or(0, FeatureSequence::dim);
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in seqs {
        if s.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
        out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.extend_from_slice(&(s.n_frames() as u32).to_le_bytes());
        for v in &s.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Vec<FeatureSequence>> {
    let bad = |msg: &str, at: usize| Error::Parse {
        path: path.to_path_buf(),
        line: at,
        msg: format!("{msg} (byte offset {at})"),
    };
    let mut r = bytes;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str, r: &mut &[u8]| -> Result<Vec<u8>> {
        if r.len() < n {
            return Err(bad(&format!("truncated {what}"), pos));
        }
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).expect("length checked");
        pos += n;
        Ok(buf)
    };
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;

    if take(4, "magic", &mut r)? != FEATURE_MAGIC {
        return Err(bad("bad magic, expected SSF1", 0));
    }
    let dim = u32_of(take(4, "dim", &mut r)?);
    let mut seqs = Vec::new();
    while !r.is_empty() {
        let id_len = u32_of(take(4, "id length", &mut r)?);
        let id = String::from_utf8(take(id_len, "id", &mut r)?).map_err(|_| bad("id is not UTF-8", 0))?;
        let n = u32_of(take(4, "frame count", &mut r)?);
        let raw = take(n * dim * 4, "frames", &mut r)?;
        let frames = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        seqs.push(FeatureSequence::new(id, dim, frames)?);
    }
    Ok(seqs)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

pub fn write_features(seqs: &[FeatureSequence], path: &Path) -> Result<()> {
    let bytes = encode_features(seqs)?;
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
