//! Per-input-channel attention over scattering coefficients.
//!
//! Each input channel owns an independent module: per-path standardization,
//! squeeze-and-excitation channel attention, dilated-convolution spatial
//! attention, and a learnable convex fusion of the attended and plain
//! coefficients. The channel and spatial weight maps are kept addressable
//! for the explanation surfaces.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{GraphBinding, ParamId, ParamKind, ParamStore};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Per-path running statistics for coefficient standardization.
/// No learnable affine follows the standardization.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> NormStats<T> {
    pub fn new(paths: usize) -> Self {
        NormStats {
            mean: vec![T::zero(); paths],
            var: vec![T::one(); paths],
            eps: T::of_f64(1e-5),
            momentum: T::of_f64(0.1),
        }
    }
}

/// Trainable state of one attention module.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Squeeze matrix, K x floor(K/r) (min 1), no bias.
    pub v: ParamId,
    /// Excite matrix, floor(K/r) x K, no bias.
    pub w: ParamId,
    /// Pointwise conv K -> r with bias.
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    /// 3x3 convs r -> r with bias, dilations 1, 2, 3.
    pub dil_w: [ParamId; 3],
    pub dil_b: [ParamId; 3],
    /// Pointwise conv 4r -> 1 with bias.
    pub merge_w: ParamId,
    pub merge_b: ParamId,
    /// Fusion weight in [0, 1], initialized to 0.5.
    pub w1: ParamId,
}

impl AttentionParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        paths: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::InvalidArgument("reduction ratio must be at least 1".into()));
        }
        let bottleneck = (paths / reduction).max(1);
        let r = reduction;
        let v = store.register_uniform(format!("{prefix}.v"), &[paths, bottleneck], paths, rng);
        let w = store.register_uniform(format!("{prefix}.w"), &[bottleneck, paths], bottleneck, rng);
        let reduce_w = store.register_uniform(format!("{prefix}.reduce.w"), &[r, paths, 1, 1], paths, rng);
        let reduce_b = store.register(format!("{prefix}.reduce.b"), Tensor::zeros(&[r]), ParamKind::Dense);
        let mut dil_w = Vec::new();
        let mut dil_b = Vec::new();
        for d in 1..=3 {
            dil_w.push(store.register_uniform(format!("{prefix}.dil{d}.w"), &[r, r, 3, 3], r * 9, rng));
            dil_b.push(store.register(format!("{prefix}.dil{d}.b"), Tensor::zeros(&[r]), ParamKind::Dense));
        }
        let merge_w = store.register_uniform(format!("{prefix}.merge.w"), &[1, 4 * r, 1, 1], 4 * r, rng);
        let merge_b = store.register(format!("{prefix}.merge.b"), Tensor::zeros(&[1]), ParamKind::Dense);
        let w1 = store.register(format!("{prefix}.w1"), Tensor::scalar(T::of_f64(0.5)), ParamKind::FusionWeight);
        Ok(AttentionParams {
            v,
            w,
            reduce_w,
            reduce_b,
            dil_w: [dil_w[0], dil_w[1], dil_w[2]],
            dil_b: [dil_b[0], dil_b[1], dil_b[2]],
            merge_w,
            merge_b,
            w1,
        })
    }
}

/// Standardizes coefficients per path over the batch and spatial axes.
///
/// Training mode computes batch moments (differentiably) and refreshes the
/// running statistics with momentum; eval mode applies the stored running
/// statistics as constants.
pub fn normalize_coeffs<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    stats: &mut NormStats<T>,
    training: bool,
) -> Result<NodeId> {
    let k = match g.real(x)?.dims() {
        [_, k, _, _] => *k,
        other => return Err(Error::Dims(format!("normalize_coeffs expects (B, K, H, W), got {other:?}"))),
    };
    if k != stats.mean.len() {
        return Err(Error::ShapeMismatch { expected: vec![stats.mean.len()], got: vec![k] });
    }
    if training {
        let mu = g.mean_channels(x)?;
        let centered = g.sub_chan_vec(x, mu)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean_channels(sq)?;
        let inv_sd = g.rsqrt_eps(var, stats.eps)?;
        let out = g.mul_chan_vec(centered, inv_sd)?;
        let m = stats.momentum;
        let one_m = T::one() - m;
        let batch_mu = g.real(mu)?.data().to_vec();
        let batch_var = g.real(var)?.data().to_vec();
        for (s, b) in stats.mean.iter_mut().zip(&batch_mu) {
            *s = one_m * *s + m * *b;
        }
        for (s, b) in stats.var.iter_mut().zip(&batch_var) {
            *s = one_m * *s + m * *b;
        }
        Ok(out)
    } else {
        let mu = g.constant(Tensor::from_vec(&[k], stats.mean.clone())?)?;
        let inv_sd: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
        let inv_sd = g.constant(Tensor::from_vec(&[k], inv_sd)?)?;
        let centered = g.sub_chan_vec(x, mu)?;
        g.mul_chan_vec(centered, inv_sd)
    }
}

/// Squeeze-and-excitation: spatial mean per path, bottleneck with ReLU,
/// sigmoid gate, then per-path rescaling of the coefficients.
/// Returns the gate (B, K) and the reweighted coefficients.
pub fn channel_attention<T: Real>(
    g: &mut Graph<T>,
    s_tilde: NodeId,
    v: NodeId,
    w: NodeId,
) -> Result<(NodeId, NodeId)> {
    let z = g.global_avg_pool(s_tilde)?;
    let h = g.matmul(z, v)?;
    let h = g.relu(h)?;
    let logits = g.matmul(h, w)?;
    let gate = g.sigmoid(logits)?;
    let weighted = g.mul_channel_scalars(s_tilde, gate)?;
    Ok((gate, weighted))
}

/// Kernel and bias nodes for the spatial-attention stack.
pub struct SpatialKernels {
    pub reduce_w: NodeId,
    pub reduce_b: NodeId,
    pub dil_w: [NodeId; 3],
    pub dil_b: [NodeId; 3],
    pub merge_w: NodeId,
    pub merge_b: NodeId,
}

/// Saliency map from the normalized coefficients: pointwise reduction to r
/// maps, three dilated 3x3 convs at dilations 1..3 on the reduced maps,
/// then a pointwise merge of the 4r stacked maps down to one. The map
/// multiplies the channel-attended coefficients, broadcast over paths.
pub fn spatial_attention<T: Real>(
    g: &mut Graph<T>,
    s_tilde: NodeId,
    u_c: NodeId,
    k: &SpatialKernels,
) -> Result<(NodeId, NodeId)> {
    let m0 = g.conv2d(s_tilde, k.reduce_w, Some(k.reduce_b), 1)?;
    let mut maps = vec![m0];
    for d in 0..3 {
        maps.push(g.conv2d(m0, k.dil_w[d], Some(k.dil_b[d]), d + 1)?);
    }
    let stacked = g.concat(1, &maps)?;
    let a_s = g.conv2d(stacked, k.merge_w, Some(k.merge_b), 1)?;
    let u_s = g.mul_spatial_map(u_c, a_s)?;
    Ok((a_s, u_s))
}

/// Convex fusion of the attended and plain coefficients.
pub fn fuse<T: Real>(g: &mut Graph<T>, u_s: NodeId, s_tilde: NodeId, w1: NodeId) -> Result<NodeId> {
    g.convex_combo(u_s, s_tilde, w1)
}

/// Everything a forward pass exposes per module.
pub struct ModuleOutput {
    pub fused: NodeId,
    pub s_tilde: NodeId,
    /// Channel attention gate (B, K).
    pub a_c: NodeId,
    /// Spatial attention map (B, 1, Hs, Ws).
    pub a_s: NodeId,
}

/// Full module: normalize, channel attention, spatial attention, fusion.
pub fn attention_module<T: Real>(
    g: &mut Graph<T>,
    coeffs: NodeId,
    stats: &mut NormStats<T>,
    params: &AttentionParams,
    bind: &GraphBinding,
    training: bool,
) -> Result<ModuleOutput> {
    let s_tilde = normalize_coeffs(g, coeffs, stats, training)?;
    let (a_c, u_c) = channel_attention(g, s_tilde, bind.node(params.v), bind.node(params.w))?;
    let kernels = SpatialKernels {
        reduce_w: bind.node(params.reduce_w),
        reduce_b: bind.node(params.reduce_b),
        dil_w: [bind.node(params.dil_w[0]), bind.node(params.dil_w[1]), bind.node(params.dil_w[2])],
        dil_b: [bind.node(params.dil_b[0]), bind.node(params.dil_b[1]), bind.node(params.dil_b[2])],
        merge_w: bind.node(params.merge_w),
        merge_b: bind.node(params.merge_b),
    };
    let (a_s, u_s) = spatial_attention(g, s_tilde, u_c, &kernels)?;
    let fused = fuse(g, u_s, s_tilde, bind.node(params.w1))?;
    Ok(ModuleOutput { fused, s_tilde, a_c, a_s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn random_coeffs(b: usize, k: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * k * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(&[b, k, h, w], data).unwrap()
    }

    #[test]
    fn normalize_zero_batch_stays_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 4, 4]), false).unwrap();
        let mut stats = NormStats::new(3);
        let out = normalize_coeffs(&mut g, x, &mut stats, true).unwrap();
        assert!(g.real(out).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_training_moments()  {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(random_coeffs(4, 5, 6, 6, 3), false).unwrap();
        let mut stats = NormStats::new(5);
        let out = normalize_coeffs(&mut g, x, &mut stats, true).unwrap();
        let t = g.real(out).unwrap();
        let (b, k, hw) = (4, 5, 36);
        for ki in 0..k {
            let mut mean = 0.0;
            let mut sq = 0.0;
            for bi in 0..b {
                let base = (bi * k + ki) * hw;
                for &v in &t.data()[base..base + hw] {
                    mean += v;
                    sq += v * v;
                }
            }
            mean /= (b * hw) as f64;
            let std = (sq / (b * hw) as f64 - mean * mean).sqrt();
            assert!(mean.abs() <= 1e-5, "path {ki} mean {mean}");
            assert!((std - 1.0).abs() <= 1e-3, "path {ki} std {std}");
        }
    }

    #[test]
    fn normalize_eval_with_unit_stats_is_identity() {
        let mut g = Graph::<f64>::new();
        let xt = random_coeffs(2, 3, 4, 4, 9);
        let x = g.leaf(xt.clone(), false).unwrap();
        let mut stats = NormStats::new(3);
        stats.eps = 0.0;
        let out = normalize_coeffs(&mut g, x, &mut stats, false).unwrap();
        for (a, b) in g.real(out).unwrap().data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_zero_input_gives_half_gates() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(&mut store, 6, 4, &mut rng, "m").unwrap();
        let mut g = Graph::new();
        let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
        let x = g.leaf(Tensor::zeros(&[2, 6, 4, 4]), false).unwrap();
        let (a_c, u_c) = channel_attention(&mut g, x, bind.node(p.v), bind.node(p.w)).unwrap();
        assert!(g.real(a_c).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(g.real(u_c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_squeeze_is_spatial_mean() {
        // constant path values pass straight through the pooling
        let mut g = Graph::<f64>::new();
        let mut xt = Tensor::zeros(&[1, 2, 3, 3]);
        for i in 0..9 {
            xt.data_mut()[i] = 1.5;
            xt.data_mut()[9 + i] = -0.25;
        }
        let x = g.leaf(xt, false).unwrap();
        let z = g.global_avg_pool(x).unwrap();
        assert_eq!(g.real(z).unwrap().data(), &[1.5, -0.25]);
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::init(&mut store, 9, 4, &mut rng, "m").unwrap();
        for trial in 0..20 {
            let mut g = Graph::new();
            let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
            let x = g.leaf(random_coeffs(1, 9, 4, 4, 100 + trial), false).unwrap();
            let (a_c, _) = channel_attention(&mut g, x, bind.node(p.v), bind.node(p.w)).unwrap();
            for &v in g.real(a_c).unwrap().data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn spatial_attention_shapes_and_zero_case() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::init(&mut store, 6, 2, &mut rng, "m").unwrap();
        let mut g = Graph::new();
        let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
        let x = g.leaf(Tensor::zeros(&[2, 6, 4, 4]), false).unwrap();
        let uc = g.leaf(Tensor::zeros(&[2, 6, 4, 4]), false).unwrap();
        let kernels = SpatialKernels {
            reduce_w: bind.node(p.reduce_w),
            reduce_b: bind.node(p.reduce_b),
            dil_w: [bind.node(p.dil_w[0]), bind.node(p.dil_w[1]), bind.node(p.dil_w[2])],
            dil_b: [bind.node(p.dil_b[0]), bind.node(p.dil_b[1]), bind.node(p.dil_b[2])],
            merge_w: bind.node(p.merge_w),
            merge_b: bind.node(p.merge_b),
        };
        let (a_s, u_s) = spatial_attention(&mut g, x, uc, &kernels).unwrap();
        assert_eq!(g.real(a_s).unwrap().dims(), &[2, 1, 4, 4]);
        assert_eq!(g.real(u_s).unwrap().dims(), &[2, 6, 4, 4]);
        // zero input and zero biases: the map is exactly zero
        assert!(g.real(a_s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.real(u_s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_attention_receptive_field_probe() {
        // the dilation-3 branch sees a pixel 3 steps from the center; no
        // branch reaches 7 steps out
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::init(&mut store, 4, 2, &mut rng, "m").unwrap();
        let n = 15;
        let center = n / 2;
        let run = |hot: Option<(usize, usize)>| -> f64 {
            let mut g = Graph::new();
            let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
            let mut xt = random_coeffs(1, 4, n, n, 55);
            if let Some((i, j)) = hot {
                for k in 0..4 {
                    let idx = k * n * n + i * n + j;
                    xt.data_mut()[idx] += 1.0;
                }
            }
            let x = g.leaf(xt.clone(), false).unwrap();
            let uc = g.leaf(xt, false).unwrap();
            let kernels = SpatialKernels {
                reduce_w: bind.node(p.reduce_w),
                reduce_b: bind.node(p.reduce_b),
                dil_w: [bind.node(p.dil_w[0]), bind.node(p.dil_w[1]), bind.node(p.dil_w[2])],
                dil_b: [bind.node(p.dil_b[0]), bind.node(p.dil_b[1]), bind.node(p.dil_b[2])],
                merge_w: bind.node(p.merge_w),
                merge_b: bind.node(p.merge_b),
            };
            let (a_s, _) = spatial_attention(&mut g, x, uc, &kernels).unwrap();
            g.real(a_s).unwrap().data()[center * n + center]
        };
        let base = run(None);
        assert_ne!(run(Some((center + 3, center))), base);
        assert_eq!(run(Some((center + 7, center))), base);
    }

    #[test]
    fn fuse_midpoint() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::filled(&[1, 1, 2, 2], 2.0), false).unwrap();
        let b = g.leaf(Tensor::zeros(&[1, 1, 2, 2]), false).unwrap();
        let w = g.leaf(Tensor::scalar(0.5), false).unwrap();
        let f = fuse(&mut g, a, b, w).unwrap();
        assert!(g.real(f).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn module_zero_input_zero_biases_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(&mut store, 5, 2, &mut rng, "m").unwrap();
        let mut stats = NormStats::new(5);
        let mut g = Graph::new();
        let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
        let x = g.leaf(Tensor::zeros(&[2, 5, 4, 4]), false).unwrap();
        let out = attention_module(&mut g, x, &mut stats, &p, &bind, true).unwrap();
        assert!(g.real(out.fused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn w1_zero_detaches_attention_parameters() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::init(&mut store, 5, 2, &mut rng, "m").unwrap();
        store.value_mut(p.w1).data_mut()[0] = 0.0;
        let mut stats = NormStats::new(5);
        let mut g = Graph::new();
        let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
        let x = g.leaf(random_coeffs(2, 5, 4, 4, 77), false).unwrap();
        let out = attention_module(&mut g, x, &mut stats, &p, &bind, true).unwrap();
        // the fused output equals the normalized coefficients bit for bit
        let fused = g.real(out.fused).unwrap().clone();
        let s_tilde = g.real(out.s_tilde).unwrap().clone();
        assert_eq!(fused.data(), s_tilde.data());
        // and no gradient reaches the attention parameters
        let s = g.sum(out.fused).unwrap();
        g.backward(s).unwrap();
        for id in [p.v, p.w, p.reduce_w, p.merge_w, p.dil_w[0], p.dil_w[1], p.dil_w[2]] {
            let grad = g.grad(bind.node(id)).unwrap();
            assert!(grad.data().iter().all(|&v| v == 0.0), "param {id:?}");
        }
    }

    #[test]
    fn all_parameters_receive_gradient_for_interior_w1() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::init(&mut store, 5, 2, &mut rng, "m").unwrap();
        let mut stats = NormStats::new(5);
        let mut g = Graph::new();
        let bind = GraphBinding::bind_all(&mut g, &store).unwrap();
        let x = g.leaf(random_coeffs(2, 5, 4, 4, 88), false).unwrap();
        let out = attention_module(&mut g, x, &mut stats, &p, &bind, true).unwrap();
        let sq = g.mul(out.fused, out.fused).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        for (id, param) in store.iter() {
            let grad = g.grad(bind.node(id)).unwrap();
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "dead branch at {}",
                param.name
            );
        }
    }
}
