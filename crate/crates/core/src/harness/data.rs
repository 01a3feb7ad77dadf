use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// One feature vector per row.
    pub frames: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.utterances.iter().map(|u| u.frames.rows()).sum()
    }

    /// Applies [`frame_stack`] to every utterance.
    pub fn stacked(&self, stacking: &FrameStacking) -> Result<Dataset> {
        let utterances = self
            .utterances
            .iter()
            .map(|u| {
                Ok(Utterance { id: u.id.clone(), frames: frame_stack(&u.frames, stacking)?, labels: u.labels.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { utterances })
    }
}

/// Keep every `downsample`-th frame, then concatenate windows of `stack`
/// consecutive kept frames starting every `stride` frames. Windows start at
/// every multiple of `stride` below the kept-frame count; positions past the
/// end are zero-filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameStacking {
    pub downsample: usize,
    pub stack: usize,
    pub stride: usize,
}

impl Default for FrameStacking {
    fn default() -> Self {
        Self { downsample: 3, stack: 3, stride: 2 }
    }
}

impl FrameStacking {
    pub const IDENTITY: Self = Self { downsample: 1, stack: 1, stride: 1 };

    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.stack == 0 || self.stride == 0 {
            return Err(Error::Config("frame stacking factors must be positive".into()));
        }
        Ok(())
    }

    /// Output frame count for `n` input frames.
    pub fn output_len(&self, n: usize) -> usize {
        n.div_ceil(self.downsample).div_ceil(self.stride)
    }
}

pub fn frame_stack(features: &Matrix, cfg: &FrameStacking) -> Result<Matrix> {
    cfg.validate()?;
    let dim = features.cols();
    let kept: Vec<&[f64]> = (0..features.rows()).step_by(cfg.downsample).map(|r| features.row(r)).collect();
    let out_rows = cfg.output_len(features.rows());
    let mut data = Vec::with_capacity(out_rows * dim * cfg.stack);
    for w in 0..out_rows {
        let start = w * cfg.stride;
        for k in 0..cfg.stack {
            match kept.get(start + k) {
                Some(row) => data.extend_from_slice(row),
                None => data.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
    }
    Matrix::new(out_rows, dim * cfg.stack, data)
}

/// Toy utterances: label-bearing "content" segments built from per-class
/// prototype vectors plus noise, separated by low-variance "silence".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub feature_dim: usize,
    /// Non-blank tokens; ids run from 1 to `num_tokens`.
    pub num_tokens: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    /// Inclusive range of raw frames per content segment.
    pub content_frames: [usize; 2],
    /// Expected fraction of silent raw frames.
    pub silence_fraction: f64,
    /// Relative length of the trailing silence against the other gaps.
    pub trailing_weight: f64,
    pub content_noise: f64,
    pub silence_noise: f64,
    /// Each token is an ordered pattern of this many sub-prototypes, played
    /// back over its content segment.
    pub pattern_length: usize,
    /// Distinct sub-prototypes shared by all tokens.
    pub pool_size: usize,
    /// Seeds the prototypes and patterns, shared by every split.
    pub prototype_seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            num_tokens: 7,
            min_labels: 2,
            max_labels: 5,
            content_frames: [15, 27],
            silence_fraction: 0.5,
            trailing_weight: 0.25,
            content_noise: 0.6,
            silence_noise: 0.1,
            pattern_length: 2,
            pool_size: 4,
            prototype_seed: 99,
        }
    }
}

/// One generated utterance with its per-raw-frame silence flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub utterance: Utterance,
    pub silent: Vec<bool>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("data.task: {m}")));
        if self.feature_dim == 0 || self.num_tokens == 0 {
            return fail("feature_dim and num_tokens must be positive");
        }
        if self.num_tokens > 63 {
            return fail("at most 63 tokens");
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return fail("need 1 <= min_labels <= max_labels");
        }
        if self.content_frames[0] == 0 || self.content_frames[0] > self.content_frames[1] {
            return fail("content_frames must be a non-empty increasing range");
        }
        if self.pattern_length == 0 || self.pool_size == 0 {
            return fail("pattern_length and pool_size must be positive");
        }
        if (self.pool_size as f64).powi(self.pattern_length.min(16) as i32) < self.num_tokens as f64 {
            return fail("pool_size^pattern_length must cover num_tokens distinct patterns");
        }
        if !(0.0..0.95).contains(&self.silence_fraction) {
            return fail("silence_fraction must lie in [0, 0.95)");
        }
        if !(self.trailing_weight >= 0.0) || !(self.content_noise >= 0.0) || !(self.silence_noise >= 0.0) {
            return fail("weights and noise levels must be non-negative");
        }
        Ok(())
    }

    /// Per token, the sequence of frame means played over its segment.
    pub fn prototypes(&self) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let pool: Vec<Vec<f64>> = (0..self.pool_size)
            .map(|_| (0..self.feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5).collect())
            .collect();
        let mut patterns: Vec<Vec<usize>> = Vec::with_capacity(self.num_tokens);
        while patterns.len() < self.num_tokens {
            let p: Vec<usize> = (0..self.pattern_length).map(|_| rng.gen_range(0..self.pool_size)).collect();
            if !patterns.contains(&p) {
                patterns.push(p);
            }
        }
        patterns.into_iter().map(|p| p.into_iter().map(|i| pool[i].clone()).collect()).collect()
    }

    fn noise_frame(&self, rng: &mut ChaCha8Rng, sigma: f64, base: Option<&[f64]>) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|i| base.map_or(0.0, |b| b[i]) + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn generate_one(&self, id: String, prototypes: &[Vec<Vec<f64>>], rng: &mut ChaCha8Rng) -> SyntheticUtterance {
        let n_labels = rng.gen_range(self.min_labels..=self.max_labels);
        let labels: Vec<usize> = (0..n_labels).map(|_| rng.gen_range(1..=self.num_tokens)).collect();
        let lengths: Vec<usize> =
            (0..n_labels).map(|_| rng.gen_range(self.content_frames[0]..=self.content_frames[1])).collect();
        let content: usize = lengths.iter().sum();
        let f = self.silence_fraction;
        let total_silence = content as f64 * f / (1.0 - f);
        let weights: Vec<f64> = (0..=n_labels)
            .map(|g| {
                let w = if g == n_labels { self.trailing_weight } else { 1.0 };
                w * rng.gen_range(0.5..1.5)
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        let gaps: Vec<usize> =
            weights.iter().map(|w| if wsum > 0.0 { (total_silence * w / wsum).round() as usize } else { 0 }).collect();

        let mut rows = Vec::new();
        let mut silent = Vec::new();
        for (g, &gap) in gaps.iter().enumerate() {
            for _ in 0..gap {
                rows.push(self.noise_frame(rng, self.silence_noise, None));
                silent.push(true);
            }
            if g < n_labels {
                let pattern = &prototypes[labels[g] - 1];
                for i in 0..lengths[g] {
                    let part = &pattern[i * pattern.len() / lengths[g]];
                    rows.push(self.noise_frame(rng, self.content_noise, Some(part)));
                    silent.push(false);
                }
            }
        }
        let n = rows.len();
        let frames = Matrix::new(n, self.feature_dim, rows.concat()).expect("rows have feature_dim entries");
        SyntheticUtterance { utterance: Utterance { id, frames, labels }, silent }
    }
}

/// Deterministic under `seed`; prototypes depend only on the task.
pub fn generate_synthetic(task: &SyntheticTask, count: usize, seed: u64) -> Result<Dataset> {
    Ok(Dataset { utterances: generate_synthetic_detailed(task, count, seed)?.into_iter().map(|s| s.utterance).collect() })
}

pub fn generate_synthetic_detailed(task: &SyntheticTask, count: usize, seed: u64) -> Result<Vec<SyntheticUtterance>> {
    task.validate()?;
    let protos = task.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|i| task.generate_one(format!("utt{i:05}"), &protos, &mut rng)).collect())
}

/// Feature file: `u32` frame count, `u32` dimension, then row-major `f64`,
/// all little-endian.
pub fn write_features(path: &Path, frames: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(frames.rows() as u32).to_le_bytes())?;
    w.write_all(&(frames.cols() as u32).to_le_bytes())?;
    for v in frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Data { path: path.to_path_buf(), reason };
    if bytes.len() < 8 {
        return Err(bad(format!("{} bytes is shorter than the 8-byte header", bytes.len())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expect = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| bad(format!("header {rows}x{cols} overflows")))?;
    if bytes.len() != expect {
        return Err(bad(format!("header says {rows}x{cols} ({expect} bytes) but file has {}", bytes.len())));
    }
    let data: Vec<f64> =
        bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value".into()));
    }
    Matrix::new(rows, cols, data)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let line: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    fs::write(path, line.join(" ") + "\n")?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::Data { path: path.to_path_buf(), reason: format!("label {t:?}: {e}") })
        })
        .collect()
}

/// Writes `<id>.feat` and `<id>.lab` per utterance.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for u in &data.utterances {
        write_features(&dir.join(format!("{}.feat", u.id)), &u.frames)?;
        write_labels(&dir.join(format!("{}.lab", u.id)), &u.labels)?;
    }
    Ok(())
}

/// Reads every `*.feat` in `dir` (sorted by name) with its `.lab` sidecar.
pub fn read_dataset(dir: &Path, vocab_size: usize) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "feat"))
        .collect();
    paths.sort();
    let mut utterances = Vec::with_capacity(paths.len());
    let mut dim = None;
    for p in paths {
        let frames = read_features(&p)?;
        if *dim.get_or_insert(frames.cols()) != frames.cols() {
            return Err(Error::Data { path: p, reason: "feature dimension differs from earlier files".into() });
        }
        let lab = p.with_extension("lab");
        let labels = read_labels(&lab)?;
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l >= vocab_size) {
            return Err(Error::Data { path: lab, reason: format!("label {bad} outside 1..{vocab_size}") });
        }
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        utterances.push(Utterance { id, frames, labels });
    }
    Ok(Dataset { utterances })
}
