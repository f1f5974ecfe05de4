//! Network assembly: scattering front-end, per-channel attention modules,
//! task head, and the handcrafted convolutional baseline.
//!
//! The scattering filters are fixed, so the trainable surface is the C
//! attention modules plus a small head: pointwise conv to 16 maps, ReLU,
//! flatten, an 8-unit fully-connected layer with ReLU, and one linear
//! output. The baseline is three 3x3 conv + ReLU + 2x2 max-pool stages
//! with 8/16/32 filters, a 32-unit fully-connected layer and a linear
//! output.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_module, AttentionParams, NormStats};
use crate::data::tensor_file::{read_tensor, write_tensor};
use crate::data::{NormMeta, Task};
use crate::error::{Error, Result};
use crate::filterbank::{build_morlet_bank, FilterBank};
use crate::params::{GraphBinding, ParamId, ParamKind, ParamStore};
use crate::scattering::scatter_channel_graph;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub task: Task,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub scales: usize,
    pub orientations: usize,
    pub reduction: usize,
    pub pointwise_out: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn new(task: Task, channels: usize, height: usize, width: usize, scales: usize, orientations: usize) -> Self {
        ModelConfig {
            task,
            channels,
            height,
            width,
            scales,
            orientations,
            reduction: 16,
            pointwise_out: 16,
            hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::InvalidArgument("need at least one input channel".into()));
        }
        if 1usize << self.scales > self.height.min(self.width) {
            return Err(Error::InvalidArgument(format!(
                "2^J = {} exceeds min spatial extent {}",
                1usize << self.scales,
                self.height.min(self.width)
            )));
        }
        Ok(())
    }

    /// Coefficient resolution after decimation.
    pub fn coeff_spatial(&self) -> (usize, usize) {
        (self.height >> self.scales, self.width >> self.scales)
    }
}

/// One attention module's trainable and running state.
#[derive(Debug, Clone)]
pub struct ModuleState<T> {
    pub params: AttentionParams,
    pub stats: NormStats<T>,
}

pub struct ScatteringLayers<T> {
    pub bank: Arc<FilterBank<T>>,
    pub modules: Vec<ModuleState<T>>,
    pub pointwise_w: ParamId,
    pub pointwise_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub struct ConvLayers {
    pub conv_w: [ParamId; 3],
    pub conv_b: [ParamId; 3],
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub enum Layers<T> {
    Scattering(ScatteringLayers<T>),
    Conv(ConvLayers),
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layers: Layers<T>,
    /// Input/target normalization adopted from the training data; carried
    /// in checkpoints so inference can un-normalize predictions.
    pub data_norm: Option<NormMeta>,
}

/// Attention maps recorded during a forward pass, one entry per input
/// channel: the channel gate (B, K) and the spatial map (B, 1, Hs, Ws).
pub struct ForwardTrace {
    pub a_c: Vec<NodeId>,
    pub a_s: Vec<NodeId>,
    /// Fused module output per input channel (B, K, Hs, Ws).
    pub fused: Vec<NodeId>,
}

impl<T: Real> Model<T> {
    pub fn new_scattering(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bank = Arc::new(build_morlet_bank::<T>(config.scales, config.orientations, config.height, config.width)?);
        let paths = crate::scattering::PathTable::new(config.scales, config.orientations).count();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = Vec::with_capacity(config.channels);
        for c in 0..config.channels {
            let params = AttentionParams::init(&mut store, paths, config.reduction, &mut rng, &format!("ch{c}"))?;
            modules.push(ModuleState { params, stats: NormStats::new(paths) });
        }
        let (hs, ws) = config.coeff_spatial();
        let ck = config.channels * paths;
        let po = config.pointwise_out;
        let pointwise_w = store.register_uniform("head.pointwise.w", &[po, ck, 1, 1], ck, &mut rng);
        let pointwise_b = store.register("head.pointwise.b", Tensor::zeros(&[po]), ParamKind::Dense);
        let flat = po * hs * ws;
        let fc1_w = store.register_uniform("head.fc1.w", &[flat, config.hidden], flat, &mut rng);
        let fc1_b = store.register("head.fc1.b", Tensor::zeros(&[config.hidden]), ParamKind::Dense);
        let fc2_w = store.register_uniform("head.fc2.w", &[config.hidden, 1], config.hidden, &mut rng);
        let fc2_b = store.register("head.fc2.b", Tensor::zeros(&[1]), ParamKind::Dense);
        Ok(Model {
            config,
            store,
            layers: Layers::Scattering(ScatteringLayers {
                bank,
                modules,
                pointwise_w,
                pointwise_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            }),
            data_norm: None,
        })
    }

    /// Three conv/pool stages with 8, 16 and 32 filters, then FC 32 and a
    /// linear output.
    pub fn conv_baseline(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.height % 8 != 0 || config.width % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv baseline needs spatial dims divisible by 8, got {}x{}",
                config.height, config.width
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [8usize, 16, 32];
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut cin = config.channels;
        for (i, &cout) in widths.iter().enumerate() {
            conv_w.push(store.register_uniform(format!("conv{i}.w"), &[cout, cin, 3, 3], cin * 9, &mut rng));
            conv_b.push(store.register(format!("conv{i}.b"), Tensor::zeros(&[cout]), ParamKind::Dense));
            cin = cout;
        }
        let flat = 32 * (config.height / 8) * (config.width / 8);
        let fc1_w = store.register_uniform("fc1.w", &[flat, 32], flat, &mut rng);
        let fc1_b = store.register("fc1.b", Tensor::zeros(&[32]), ParamKind::Dense);
        let fc2_w = store.register_uniform("fc2.w", &[32, 1], 32, &mut rng);
        let fc2_b = store.register("fc2.b", Tensor::zeros(&[1]), ParamKind::Dense);
        Ok(Model {
            config,
            store,
            layers: Layers::Conv(ConvLayers {
                conv_w: [conv_w[0], conv_w[1], conv_w[2]],
                conv_b: [conv_b[0], conv_b[1], conv_b[2]],
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            }),
            data_norm: None,
        })
    }

    pub fn is_scattering(&self) -> bool {
        matches!(self.layers, Layers::Scattering(_))
    }

    pub fn bank(&self) -> Option<&Arc<FilterBank<T>>> {
        match &self.layers {
            Layers::Scattering(s) => Some(&s.bank),
            Layers::Conv(_) => None,
        }
    }

    pub fn path_count(&self) -> usize {
        crate::scattering::PathTable::new(self.config.scales, self.config.orientations).count()
    }

    /// Trainable element count; the scattering filters are fixed and do not
    /// contribute.
    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Forward from raw pixels (B, C, H, W). Differentiable end to end, so
    /// attribution methods can reach the input.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bind: &GraphBinding,
        x: NodeId,
        training: bool,
    ) -> Result<(NodeId, ForwardTrace)> {
        let dims = g.real(x)?.dims().to_vec();
        let (c, h, w) = match dims.as_slice() {
            [_, c, h, w] => (*c, *h, *w),
            other => return Err(Error::Dims(format!("forward expects (B, C, H, W), got {other:?}"))),
        };
        if c != self.config.channels || h != self.config.height || w != self.config.width {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.channels, self.config.height, self.config.width],
                got: vec![c, h, w],
            });
        }
        match &self.layers {
            Layers::Conv(_) => {
                let pred = self.forward_conv(g, bind, x)?;
                Ok((pred, ForwardTrace { a_c: Vec::new(), a_s: Vec::new(), fused: Vec::new() }))
            }
            Layers::Scattering(_) => {
                let bank = match &self.layers {
                    Layers::Scattering(s) => s.bank.clone(),
                    _ => unreachable!(),
                };
                let mut coeffs = Vec::with_capacity(c);
                for ci in 0..c {
                    let plane = g.slice_channel(x, ci)?;
                    coeffs.push(scatter_channel_graph(g, plane, &bank)?);
                }
                self.forward_from_coeffs(g, bind, &coeffs, training)
            }
        }
    }

    /// Forward from precomputed scattering coefficients, one (B, K, Hs, Ws)
    /// node per input channel.
    pub fn forward_from_coeffs(
        &mut self,
        g: &mut Graph<T>,
        bind: &GraphBinding,
        coeffs: &[NodeId],
        training: bool,
    ) -> Result<(NodeId, ForwardTrace)> {
        let layers = match &mut self.layers {
            Layers::Scattering(s) => s,
            Layers::Conv(_) => {
                return Err(Error::InvalidArgument("conv baseline takes pixels, not coefficients".into()))
            }
        };
        if coeffs.len() != self.config.channels {
            return Err(Error::ShapeMismatch { expected: vec![self.config.channels], got: vec![coeffs.len()] });
        }
        let mut fused = Vec::with_capacity(coeffs.len());
        let mut trace = ForwardTrace { a_c: Vec::new(), a_s: Vec::new(), fused: Vec::new() };
        for (ci, &cnode) in coeffs.iter().enumerate() {
            let m = &mut layers.modules[ci];
            let out = attention_module(g, cnode, &mut m.stats, &m.params, bind, training)?;
            trace.a_c.push(out.a_c);
            trace.a_s.push(out.a_s);
            trace.fused.push(out.fused);
            fused.push(out.fused);
        }
        let stacked = g.concat(1, &fused)?;
        let p = g.conv2d(stacked, bind.node(layers.pointwise_w), Some(bind.node(layers.pointwise_b)), 1)?;
        let p = g.relu(p)?;
        let pdims = g.real(p)?.dims().to_vec();
        let b = pdims[0];
        let flat = pdims[1] * pdims[2] * pdims[3];
        let f = g.reshape(p, &[b, flat])?;
        let h1 = g.matmul(f, bind.node(layers.fc1_w))?;
        let h1 = g.add_bias_row(h1, bind.node(layers.fc1_b))?;
        let h1 = g.relu(h1)?;
        let out = g.matmul(h1, bind.node(layers.fc2_w))?;
        let out = g.add_bias_row(out, bind.node(layers.fc2_b))?;
        Ok((out, trace))
    }

    fn forward_conv(&self, g: &mut Graph<T>, bind: &GraphBinding, x: NodeId) -> Result<NodeId> {
        let layers = match &self.layers {
            Layers::Conv(c) => c,
            _ => unreachable!(),
        };
        let mut cur = x;
        for i in 0..3 {
            cur = g.conv2d(cur, bind.node(layers.conv_w[i]), Some(bind.node(layers.conv_b[i])), 1)?;
            cur = g.relu(cur)?;
            cur = g.max_pool2(cur)?;
        }
        let dims = g.real(cur)?.dims().to_vec();
        let b = dims[0];
        let flat = dims[1] * dims[2] * dims[3];
        let f = g.reshape(cur, &[b, flat])?;
        let h1 = g.matmul(f, bind.node(layers.fc1_w))?;
        let h1 = g.add_bias_row(h1, bind.node(layers.fc1_b))?;
        let h1 = g.relu(h1)?;
        let out = g.matmul(h1, bind.node(layers.fc2_w))?;
        g.add_bias_row(out, bind.node(layers.fc2_b))
    }
}

// ── checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &str = "SCATNET-CKPT v1";

impl<T: Real> Model<T> {
    /// Header (key-value text block), then every registered parameter in
    /// registry order, then per-module running statistics, all in the
    /// tensor file format.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            writeln!(w, "{CKPT_MAGIC}")?;
            let c = &self.config;
            writeln!(w, "backbone={}", if self.is_scattering() { "scattering" } else { "conv" })?;
            writeln!(w, "task={}", c.task.as_str())?;
            writeln!(w, "channels={}", c.channels)?;
            writeln!(w, "height={}", c.height)?;
            writeln!(w, "width={}", c.width)?;
            writeln!(w, "scales={}", c.scales)?;
            writeln!(w, "orientations={}", c.orientations)?;
            writeln!(w, "reduction={}", c.reduction)?;
            writeln!(w, "pointwise_out={}", c.pointwise_out)?;
            writeln!(w, "hidden={}", c.hidden)?;
            writeln!(w, "dtype={}", T::DTYPE_CODE)?;
            writeln!(w, "params={}", self.store.len())?;
            if let Some(n) = &self.data_norm {
                let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                writeln!(w, "band_lo={}", join(&n.band_lo))?;
                writeln!(w, "band_hi={}", join(&n.band_hi))?;
                writeln!(w, "target_mu={}", n.target_mu)?;
                writeln!(w, "target_sigma={}", n.target_sigma)?;
            }
            writeln!(w, "end")?;
            for (_, p) in self.store.iter() {
                write_tensor(&mut w, &p.value)?;
            }
            if let Layers::Scattering(s) = &self.layers {
                for m in &s.modules {
                    write_tensor(&mut w, &Tensor::from_vec(&[m.stats.mean.len()], m.stats.mean.clone())?)?;
                    write_tensor(&mut w, &Tensor::from_vec(&[m.stats.var.len()], m.stats.var.clone())?)?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CKPT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint: `{}`", line.trim_end())));
        }
        let mut kv = HashMap::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint header missing `end`".into()));
            }
            let line = line.trim_end();
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k).ok_or_else(|| Error::Format(format!("checkpoint missing `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Format(format!("bad `{k}`: {e}")))
        };
        let config = ModelConfig {
            task: Task::parse(get("task")?)?,
            channels: parse_usize("channels")?,
            height: parse_usize("height")?,
            width: parse_usize("width")?,
            scales: parse_usize("scales")?,
            orientations: parse_usize("orientations")?,
            reduction: parse_usize("reduction")?,
            pointwise_out: parse_usize("pointwise_out")?,
            hidden: parse_usize("hidden")?,
        };
        let dtype: u8 = get("dtype")?.parse().map_err(|e| Error::Format(format!("bad dtype: {e}")))?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "checkpoint dtype code {dtype} does not match requested precision"
            )));
        }
        let backbone = get("backbone")?.clone();
        let mut model = match backbone.as_str() {
            "scattering" => Model::new_scattering(config, 0)?,
            "conv" => Model::conv_baseline(config, 0)?,
            other => return Err(Error::Format(format!("unknown backbone `{other}`"))),
        };
        let expect_params = parse_usize("params")?;
        if expect_params != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {expect_params} parameters, model expects {}",
                model.store.len()
            )));
        }
        let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = read_tensor(&mut r)?;
            let want = model.store.value(id).dims().to_vec();
            let got = match T::DTYPE_CODE {
                0 => t.to_f32().cast::<T>(),
                _ => t.to_f64().cast::<T>(),
            };
            if got.dims() != want.as_slice() {
                return Err(Error::Format(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    got.dims(),
                    want
                )));
            }
            *model.store.value_mut(id) = got;
        }
        if let Layers::Scattering(s) = &mut model.layers {
            for m in &mut s.modules {
                let mean = read_tensor(&mut r)?.to_f64();
                let var = read_tensor(&mut r)?.to_f64();
                m.stats.mean = mean.data().iter().map(|&v| T::of_f64(v)).collect();
                m.stats.var = var.data().iter().map(|&v| T::of_f64(v)).collect();
            }
        }
        if let (Some(lo), Some(hi), Some(mu), Some(sigma)) =
            (kv.get("band_lo"), kv.get("band_hi"), kv.get("target_mu"), kv.get("target_sigma"))
        {
            let parse_list = |s: &str| -> Result<Vec<f32>> {
                s.split(',')
                    .map(|x| x.parse::<f32>().map_err(|e| Error::Format(format!("bad norm value: {e}"))))
                    .collect()
            };
            model.data_norm = Some(NormMeta {
                band_lo: parse_list(lo)?,
                band_hi: parse_list(hi)?,
                target_mu: mu.parse().map_err(|e| Error::Format(format!("bad target_mu: {e}")))?,
                target_sigma: sigma.parse().map_err(|e| Error::Format(format!("bad target_sigma: {e}")))?,
            });
        }
        // reject trailing garbage
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(model)
    }
}

/// Assembles a pixel batch (B, C, H, W) from prepared dataset samples.
pub fn batch_from_samples<T: Real>(inputs: &[Tensor<f32>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let dims = first.dims().to_vec();
    let mut data = Vec::with_capacity(inputs.len() * first.numel());
    for t in inputs {
        if t.dims() != dims {
            return Err(Error::ShapeMismatch { expected: dims.clone(), got: t.dims().to_vec() });
        }
        data.extend(t.data().iter().map(|&v| T::of_f64(v as f64)));
    }
    let mut bdims = vec![inputs.len()];
    bdims.extend_from_slice(&dims);
    Tensor::from_vec(&bdims, data)
}
