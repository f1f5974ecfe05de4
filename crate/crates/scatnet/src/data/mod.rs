//! Datasets, normalization, and the subsampling procedures.
//!
//! Normalization statistics always come from the training split; validation
//! and test splits adopt them. Inputs are min-max normalized per band to
//! [0, 1] (test-time values outside the training range are clipped);
//! regression targets are z-scored and predictions un-normalized again for
//! evaluation.

pub mod synthetic;
pub mod tensor_file;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::graph::bilinear_resize_last2;
use crate::tensor::{Real, Tensor};

pub use tensor_file::{load_tensor_file, save_tensor_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Generator-side ground truth kept for oracle checks; never visible to
/// models.
#[derive(Debug, Clone, Copy)]
pub enum SampleMeta {
    None,
    StormCell { present: bool, row: usize, col: usize, radius: f64 },
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub target: f32,
    pub meta: SampleMeta,
}

/// Per-band input range and target moments, computed from the training
/// split only.
#[derive(Debug, Clone)]
pub struct NormMeta {
    pub band_lo: Vec<f32>,
    pub band_hi: Vec<f32>,
    pub target_mu: f32,
    pub target_sigma: f32,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub role: SplitRole,
    samples: Vec<Sample>,
    pub norm: Option<NormMeta>,
}

impl Dataset {
    pub fn new(task: Task, role: SplitRole, samples: Vec<Sample>) -> Self {
        Dataset { task, role, samples, norm: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn targets(&self) -> impl Iterator<Item = f32> + '_ {
        self.samples.iter().map(|s| s.target)
    }

    /// Input shape (C, H, W) shared by all samples.
    pub fn input_dims(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        match first.input.dims() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::Dims(format!("samples must be (C, H, W), got {other:?}"))),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("index {i} out of range 0..{}", self.len())))?;
            samples.push(s.clone());
        }
        Ok(Dataset { task: self.task, role: self.role, samples, norm: self.norm.clone() })
    }

    pub fn with_role(mut self, role: SplitRole) -> Self {
        self.role = role;
        self
    }

    /// Computes per-band ranges and target moments from this dataset.
    /// Statistics must come from the training split; leaking them from
    /// validation or test data trips the assertion in test builds.
    pub fn compute_norm_stats(&mut self) -> Result<&NormMeta> {
        debug_assert!(
            self.role == SplitRole::Train,
            "normalization statistics recomputed from a non-training split"
        );
        let (c, _, _) = self.input_dims()?;
        let mut lo = vec![f32::INFINITY; c];
        let mut hi = vec![f32::NEG_INFINITY; c];
        for s in &self.samples {
            let plane = s.input.numel() / c;
            for (b, chunk) in s.input.data().chunks(plane).enumerate() {
                for &v in chunk {
                    lo[b] = lo[b].min(v);
                    hi[b] = hi[b].max(v);
                }
            }
        }
        for b in 0..c {
            if !(hi[b] > lo[b]) {
                return Err(Error::Dataset(format!("band {b} has no range: lo={} hi={}", lo[b], hi[b])));
            }
        }
        let (mu, sigma) = match self.task {
            Task::Regression => {
                let n = self.samples.len() as f64;
                let mean = self.samples.iter().map(|s| s.target as f64).sum::<f64>() / n;
                let var = self.samples.iter().map(|s| (s.target as f64 - mean).powi(2)).sum::<f64>() / n;
                if var <= 0.0 {
                    return Err(Error::Dataset("targets have zero variance".into()));
                }
                (mean as f32, var.sqrt() as f32)
            }
            Task::Classification => (0.0, 1.0),
        };
        self.norm = Some(NormMeta { band_lo: lo, band_hi: hi, target_mu: mu, target_sigma: sigma });
        Ok(self.norm.as_ref().unwrap())
    }

    pub fn adopt_norm(&mut self, norm: &NormMeta) {
        self.norm = Some(norm.clone());
    }

    /// Normalized input and target for one sample.
    pub fn prepared(&self, i: usize) -> Result<(Tensor<f32>, f32)> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::Dataset("normalization statistics not set".into()))?;
        let s = &self.samples[i];
        let c = norm.band_lo.len();
        let plane = s.input.numel() / c;
        let mut data = Vec::with_capacity(s.input.numel());
        for (b, chunk) in s.input.data().chunks(plane).enumerate() {
            let band = minmax_normalize(
                &Tensor::from_vec(&[plane], chunk.to_vec())?,
                norm.band_lo[b],
                norm.band_hi[b],
            )?;
            data.extend_from_slice(band.data());
        }
        let input = Tensor::from_vec(s.input.dims(), data)?;
        let target = match self.task {
            Task::Regression => zscore(s.target, norm.target_mu, norm.target_sigma)?,
            Task::Classification => s.target,
        };
        Ok((input, target))
    }
}

// ── normalization primitives ─────────────────────────────────────────

/// Min-max normalization to [0, 1]; values outside the range clip.
pub fn minmax_normalize<T: Real>(x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("minmax range requires hi > lo, got {lo}..{hi}")));
    }
    let span = hi - lo;
    Ok(Tensor::from_vec(
        x.dims(),
        x.data()
            .iter()
            .map(|&v| ((v - lo) / span).max(T::zero()).min(T::one()))
            .collect(),
    )?)
}

pub fn zscore<T: Real>(t: T, mu: T, sigma: T) -> Result<T> {
    if sigma <= T::zero() {
        return Err(Error::InvalidArgument("zscore requires sigma > 0".into()));
    }
    Ok((t - mu) / sigma)
}

pub fn unzscore<T: Real>(y: T, mu: T, sigma: T) -> Result<T> {
    if sigma <= T::zero() {
        return Err(Error::InvalidArgument("unzscore requires sigma > 0".into()));
    }
    Ok(y * sigma + mu)
}

/// Stacks the frames at t-(count-1)*interval .. t (t = last index) into
/// channels, oldest first.
pub fn stack_timesteps(frames: &[Tensor<f32>], interval: usize, count: usize) -> Result<Tensor<f32>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if frames.len() < (count - 1) * interval + 1 {
        return Err(Error::Dataset(format!(
            "need {} frames to reach back {} steps, got {}",
            (count - 1) * interval + 1,
            (count - 1) * interval,
            frames.len()
        )));
    }
    let t = frames.len() - 1;
    let (h, w) = frames[0].spatial()?;
    let mut data = Vec::with_capacity(count * h * w);
    for i in 0..count {
        let idx = t - (count - 1 - i) * interval;
        let f = &frames[idx];
        if f.dims() != [h, w] {
            return Err(Error::ShapeMismatch { expected: vec![h, w], got: f.dims().to_vec() });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[count, h, w], data)
}

// ── subsampling ──────────────────────────────────────────────────────

/// Wind-speed group boundaries: 15 + 17k for k = 0..=10.
pub fn tc_boundaries() -> Vec<f32> {
    (0..=10).map(|k| 15.0 + 17.0 * k as f32).collect()
}

/// Draws n samples spread evenly over the wind-speed groups
/// [B_i, B_{i+1}), borrowing from neighboring groups when one runs short.
/// Deterministic under the seed.
pub fn subsample_tc(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need n >= 10, got {n}")));
    }
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!("n = {n} exceeds dataset size {}", dataset.len())));
    }
    let bounds = tc_boundaries();
    let groups = bounds.len() - 1;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (i, s) in dataset.samples.iter().enumerate() {
        let t = s.target;
        // targets below the first or above the last boundary join the edge
        // groups so no sample silently disappears
        let mut gi = groups - 1;
        for gidx in 0..groups {
            if t < bounds[gidx + 1] {
                gi = gidx;
                break;
            }
        }
        pools[gi].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; groups];
    let base = n / groups;
    let extra = n % groups;
    let mut chosen = Vec::with_capacity(n);
    for gi in 0..groups {
        let want = base + usize::from(gi < extra);
        let mut got = 0;
        // own pool first, then neighbors upward, then downward
        let order = (gi..groups).chain((0..gi).rev());
        for src in order {
            while got < want && cursors[src] < pools[src].len() {
                chosen.push(pools[src][cursors[src]]);
                cursors[src] += 1;
                got += 1;
            }
            if got == want {
                break;
            }
        }
        if got < want {
            return Err(Error::Dataset(format!("ran out of samples filling group {gi}")));
        }
    }
    dataset.subset(&chosen)
}

/// Binary labels from flash counts: positive when the count exceeds zero.
pub fn binarize_flash_counts(counts: &[f32]) -> Result<Vec<bool>> {
    counts
        .iter()
        .map(|&c| {
            if c < 0.0 {
                Err(Error::InvalidArgument(format!("negative flash count {c}")))
            } else {
                Ok(c > 0.0)
            }
        })
        .collect()
}

/// Draws n samples preserving the positive fraction within one sample.
/// Deterministic under the seed.
pub fn subsample_stratified(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!("n = {n} exceeds dataset size {}", dataset.len())));
    }
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.target > 0.5 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let frac = pos.len() as f64 / dataset.len() as f64;
    let mut want_pos = (n as f64 * frac).round() as usize;
    want_pos = want_pos.min(pos.len()).min(n);
    let mut want_neg = n - want_pos;
    if want_neg > neg.len() {
        want_pos += want_neg - neg.len();
        want_neg = neg.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut chosen: Vec<usize> = pos[..want_pos].to_vec();
    chosen.extend_from_slice(&neg[..want_neg]);
    dataset.subset(&chosen)
}

/// Corner-aligned separable bilinear resize of a (C, H, W) tensor.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, h_out: usize, w_out: usize) -> Result<Tensor<T>> {
    bilinear_resize_last2(x, h_out, w_out)
}

// ── manifests and splits ─────────────────────────────────────────────

/// Loads a `path,target` manifest; sample paths resolve relative to the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>, task: Task, role: SplitRole) -> Result<Dataset> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("manifest {}: {e}", path.display())))?;
    {
        let headers = rdr.headers().map_err(|e| Error::Dataset(format!("manifest header: {e}")))?;
        if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "target" {
            return Err(Error::Dataset(format!("manifest must start with `path,target`, got {headers:?}")));
        }
    }
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Dataset(format!("manifest row: {e}")))?;
        let rel = rec.get(0).ok_or_else(|| Error::Dataset("missing path column".into()))?;
        let target: f32 = rec
            .get(1)
            .ok_or_else(|| Error::Dataset("missing target column".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Dataset(format!("bad target value: {e}")))?;
        let input = load_tensor_file(dir.join(rel))?.to_f32();
        samples.push(Sample { input, target, meta: SampleMeta::None });
    }
    Ok(Dataset::new(task, role, samples))
}

/// Newline-separated sample indices.
pub fn load_split_file(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::Dataset(format!("bad split index `{l}`: {e}")))
        })
        .collect()
}
