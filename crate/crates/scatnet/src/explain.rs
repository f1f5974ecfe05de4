//! Explanation surfaces: upsampled spatial attention overlays, channel
//! attention disks, and integrated gradients.

use crate::data::bilinear_resize;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::GraphBinding;
use crate::scattering::{Path, PathTable};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Per-pixel attribution scores with the bookkeeping needed to audit them.
#[derive(Debug, Clone)]
pub struct Attribution<T> {
    /// Same dims as the input (C, H, W).
    pub scores: Tensor<T>,
    pub method: String,
    /// |sum of scores - (f(x) - f(baseline))|.
    pub completeness_residual: f64,
    /// f(x) - f(baseline).
    pub delta: f64,
}

/// One scattering path with its normalized channel-attention weight.
#[derive(Debug, Clone, Copy)]
pub struct DiskEntry {
    pub path: Path,
    /// Min-max normalized to [0, 1] within the channel; 0 when degenerate.
    pub weight: f64,
}

/// Channel-attention weights arranged for polar rendering, one list of all
/// K paths per input channel.
#[derive(Debug, Clone)]
pub struct ChannelDisk {
    pub channels: Vec<Vec<DiskEntry>>,
    /// Set when a channel's gates were all equal (zero range); its weights
    /// are reported as 0.
    pub degenerate: Vec<bool>,
}

impl ChannelDisk {
    /// CSV rows `channel,order,j1,theta1,j2,theta2,weight`; wavelet indices
    /// a path does not use stay empty.
    pub fn to_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut out = String::from("channel,order,j1,theta1,j2,theta2,weight\n");
        for (c, entries) in self.channels.iter().enumerate() {
            for e in entries {
                let (j1, t1, j2, t2) = match e.path {
                    Path::Order0 => (String::new(), String::new(), String::new(), String::new()),
                    Path::Order1 { j1, theta1 } => (j1.to_string(), theta1.to_string(), String::new(), String::new()),
                    Path::Order2 { j1, theta1, j2, theta2 } => {
                        (j1.to_string(), theta1.to_string(), j2.to_string(), theta2.to_string())
                    }
                };
                out.push_str(&format!("{c},{},{j1},{t1},{j2},{t2},{}\n", e.path.order(), e.weight));
            }
        }
        let path = path.as_ref();
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Upsamples one recorded spatial-attention map per input channel back to
/// the input resolution and stacks them as (C, H, W).
pub fn spatial_map<T: Real>(maps: &[Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no recorded spatial attention maps".into()));
    }
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        let up = bilinear_resize(m, h, w)?;
        if up.dims().len() != 3 || up.dims()[0] != 1 {
            return Err(Error::Dims(format!("each map must be (1, Hs, Ws), got {:?}", m.dims())));
        }
        data.extend_from_slice(up.data());
    }
    Tensor::from_vec(&[maps.len(), h, w], data)
}

/// Min-max normalizes each channel's attention gates over its K paths and
/// tags every weight with the path indices. An all-equal channel maps to
/// zeros and is flagged degenerate.
pub fn channel_disk(gates: &[Vec<f64>], paths: &PathTable) -> Result<ChannelDisk> {
    let k = paths.count();
    let mut channels = Vec::with_capacity(gates.len());
    let mut degenerate = Vec::with_capacity(gates.len());
    for g in gates {
        if g.len() != k {
            return Err(Error::ShapeMismatch { expected: vec![k], got: vec![g.len()] });
        }
        let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let flat = hi <= lo;
        degenerate.push(flat);
        let entries = paths
            .iter()
            .map(|(idx, p)| DiskEntry {
                path: *p,
                weight: if flat { 0.0 } else { (g[idx] - lo) / (hi - lo) },
            })
            .collect();
        channels.push(entries);
    }
    Ok(ChannelDisk { channels, degenerate })
}

/// Integrated gradients of a batched scalar function against an all-zero
/// baseline, midpoint rule over `steps` uniform subintervals.
///
/// The closure maps a (B, C, H, W) leaf to (B, 1) outputs and must be an
/// eval-mode (batch-independent) function.
pub fn integrated_gradients_fn<T, F>(mut f: F, x: &Tensor<T>, steps: usize) -> Result<Attribution<T>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    if steps < 1 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let dims = x.dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::Dims(format!("input must be (C, H, W), got {dims:?}")));
    }
    let numel = x.numel();
    let eval_single = |f: &mut F, input: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let mut bdims = vec![1];
        bdims.extend_from_slice(input.dims());
        let leaf = g.leaf(input.reshaped(&bdims)?, false)?;
        let out = f(&mut g, leaf)?;
        Ok(g.real(out)?.item()?.as_f64())
    };
    let f_x = eval_single(&mut f, x)?;
    let f_0 = eval_single(&mut f, &Tensor::zeros(&dims))?;

    let mut grad_sum = vec![0.0f64; numel];
    let chunk = 32usize;
    let mut s = 0;
    while s < steps {
        let b = chunk.min(steps - s);
        let mut data = Vec::with_capacity(b * numel);
        for i in 0..b {
            let alpha = T::of_f64((s as f64 + i as f64 + 0.5) / steps as f64);
            data.extend(x.data().iter().map(|&v| v * alpha));
        }
        let mut bdims = vec![b];
        bdims.extend_from_slice(&dims);
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::from_vec(&bdims, data)?, true)?;
        let out = f(&mut g, leaf)?;
        let total = g.sum(out)?;
        g.backward(total)?;
        let grads = g.grad(leaf)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite { op: "integrated_gradients" });
        }
        for row in 0..b {
            for i in 0..numel {
                grad_sum[i] += grads.data()[row * numel + i].as_f64();
            }
        }
        s += b;
    }
    let scores: Vec<T> = x
        .data()
        .iter()
        .zip(&grad_sum)
        .map(|(&xi, &gs)| xi * T::of_f64(gs / steps as f64))
        .collect();
    let total: f64 = scores.iter().map(|v| v.as_f64()).sum();
    let delta = f_x - f_0;
    Ok(Attribution {
        scores: Tensor::from_vec(&dims, scores)?,
        method: format!("integrated_gradients[steps={steps}]"),
        completeness_residual: (total - delta).abs(),
        delta,
    })
}

/// Integrated gradients of a frozen model's prediction for one input.
pub fn integrated_gradients<T: Real>(model: &mut Model<T>, x: &Tensor<T>, steps: usize) -> Result<Attribution<T>> {
    integrated_gradients_fn(
        |g, leaf| {
            let bind = GraphBinding::bind_all(g, &model.store)?;
            Ok(model.forward(g, &bind, leaf, false)?.0)
        },
        x,
        steps,
    )
}
