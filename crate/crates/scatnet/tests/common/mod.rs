//! Shared test oracles.
//!
//! The scattering oracle below never touches the FFT-based cascade: spatial
//! filters come from a direct inverse DFT sum and every convolution is the
//! O(N^4) periodic definition.

#![allow(dead_code)]

use num_complex::Complex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use scatnet::filterbank::FilterBank;
use scatnet::scattering::{Path, PathTable};
use scatnet::tensor::gradcheck::{grad_check, DEFAULT_EPS};
use scatnet::tensor::graph::{Graph, NodeId};
use scatnet::tensor::Tensor;
use scatnet::Result;

fn rnd(dims: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(dims, (0..dims.iter().product()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type OpBuilder = Box<dyn FnMut(&mut Graph<f64>, NodeId) -> Result<NodeId>>;

/// Max relative finite-difference error for every registered primitive op,
/// each scalarized through a random weighted square.
pub fn primitive_gradient_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let wsq = |g: &mut Graph<f64>, y: NodeId, w: &Tensor<f64>| -> Result<NodeId> {
        let wn = g.constant(w.clone())?;
        let yw = g.mul(y, wn)?;
        let sq = g.mul(yw, yw)?;
        g.sum(sq)
    };

    let x44 = rnd(&[3, 4], &mut rng, -1.0, 1.0);
    let w44 = rnd(&[3, 4], &mut rng, 0.5, 1.5);
    let c44 = rnd(&[3, 4], &mut rng, -1.0, 1.0);
    let xk = Tensor::from_vec(&[3, 4], x44.data().iter().map(|v| v.signum() * (v.abs() + 0.05)).collect()).unwrap();
    let xpos = rnd(&[3, 4], &mut rng, 0.1, 2.0);
    let a34 = rnd(&[3, 4], &mut rng, -1.0, 1.0);
    let b42 = rnd(&[4, 2], &mut rng, -1.0, 1.0);
    let w32 = rnd(&[3, 2], &mut rng, 0.5, 1.5);
    let x4d = rnd(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
    let w4d = rnd(&[2, 3, 4, 4], &mut rng, 0.5, 1.5);
    let w23 = rnd(&[2, 3], &mut rng, 0.5, 1.5);
    let v3 = rnd(&[3], &mut rng, 0.5, 1.5);
    let s23 = rnd(&[2, 3], &mut rng, -1.0, 1.0);
    let m4d = rnd(&[2, 1, 4, 4], &mut rng, -1.0, 1.0);
    let cx = rnd(&[2, 2, 8, 8], &mut rng, -1.0, 1.0);
    let cw = rnd(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
    let cwq = rnd(&[2, 3, 8, 8], &mut rng, 0.5, 1.5);
    let x3d = rnd(&[2, 8, 8], &mut rng, -1.0, 1.0);
    let w3d = rnd(&[2, 8, 8], &mut rng, 0.5, 1.5);
    let w3s = rnd(&[2, 4, 4], &mut rng, 0.5, 1.5);
    let wup = rnd(&[2, 9, 7], &mut rng, 0.5, 1.5);
    let labels = Tensor::from_vec(&[4, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let target = rnd(&[4, 1], &mut rng, -1.0, 1.0);
    let xz = rnd(&[4, 1], &mut rng, -2.0, 2.0);
    let (wq, cq, x2q) = (w4d.clone(), x4d.clone(), rnd(&[2, 3, 4, 4], &mut rng, -1.0, 1.0));
    let wv3 = rnd(&[3], &mut rng, 0.5, 1.5);
    let wvs = rnd(&[2, 3], &mut rng, 0.5, 1.5);

    let mut cases: Vec<(&str, Tensor<f64>, OpBuilder)> = Vec::new();
    macro_rules! case {
        ($name:expr, $x:expr, $f:expr) => {
            cases.push(($name, $x, Box::new($f)));
        };
    }
    {
        let (c, w) = (c44.clone(), w44.clone());
        case!("add", x44.clone(), move |g, x| { let k = g.constant(c.clone())?; let y = g.add(x, k)?; wsq(g, y, &w) });
    }
    {
        let (c, w) = (c44.clone(), w44.clone());
        case!("sub", x44.clone(), move |g, x| { let k = g.constant(c.clone())?; let y = g.sub(x, k)?; wsq(g, y, &w) });
    }
    {
        let (c, w) = (c44.clone(), w44.clone());
        case!("mul", x44.clone(), move |g, x| { let k = g.constant(c.clone())?; let y = g.mul(x, k)?; wsq(g, y, &w) });
    }
    {
        let w = w44.clone();
        case!("scale", x44.clone(), move |g, x| { let y = g.scale(x, -1.75)?; wsq(g, y, &w) });
    }
    {
        let w = w44.clone();
        case!("relu", xk, move |g, x| { let y = g.relu(x)?; wsq(g, y, &w) });
    }
    {
        let w = w44.clone();
        case!("sigmoid", x44.clone(), move |g, x| { let y = g.sigmoid(x)?; wsq(g, y, &w) });
    }
    case!("sum", x44.clone(), move |g, x| { let s = g.sum(x)?; let q = g.mul(s, s)?; g.sum(q) });
    {
        let w = w44.clone();
        case!("rsqrt_eps", xpos, move |g, x| { let y = g.rsqrt_eps(x, 1e-5)?; wsq(g, y, &w) });
    }
    {
        let (b, w) = (b42.clone(), w32.clone());
        case!("matmul", a34, move |g, x| { let k = g.constant(b.clone())?; let y = g.matmul(x, k)?; wsq(g, y, &w) });
    }
    {
        let w = w23.clone();
        case!("global_avg_pool", x4d.clone(), move |g, x| { let y = g.global_avg_pool(x)?; wsq(g, y, &w) });
    }
    {
        let w = wv3.clone();
        case!("mean_channels", x4d.clone(), move |g, x| { let y = g.mean_channels(x)?; wsq(g, y, &w) });
    }
    {
        let (v, w) = (v3.clone(), w4d.clone());
        case!("sub_chan_vec", x4d.clone(), move |g, x| { let k = g.constant(v.clone())?; let y = g.sub_chan_vec(x, k)?; wsq(g, y, &w) });
    }
    {
        let (v, w) = (v3.clone(), w4d.clone());
        case!("mul_chan_vec", x4d.clone(), move |g, x| { let k = g.constant(v.clone())?; let y = g.mul_chan_vec(x, k)?; wsq(g, y, &w) });
    }
    {
        let (x, w) = (x4d.clone(), wvs.clone());
        case!("mul_channel_scalars", s23, move |g, s| { let k = g.constant(x.clone())?; let y = g.mul_channel_scalars(k, s)?; let z = g.global_avg_pool(y)?; wsq(g, z, &w) });
    }
    {
        let (x, w) = (x4d.clone(), w4d.clone());
        case!("mul_spatial_map", m4d, move |g, m| { let k = g.constant(x.clone())?; let y = g.mul_spatial_map(k, m)?; wsq(g, y, &w) });
    }
    {
        let (a, b, w) = (cq.clone(), x2q.clone(), wq.clone());
        case!("convex_combo", Tensor::from_vec(&[1], vec![0.35]).unwrap(), move |g, wn| {
            let an = g.constant(a.clone())?;
            let bn = g.constant(b.clone())?;
            let y = g.convex_combo(an, bn, wn)?;
            wsq(g, y, &w)
        });
    }
    for d in 1..=3usize {
        let (w, b, q) = (cw.clone(), rnd(&[3], &mut rng, -0.5, 0.5), cwq.clone());
        let name: &'static str = ["conv2d d1", "conv2d d2", "conv2d d3"][d - 1];
        case!(name, cx.clone(), move |g, x| {
            let wk = g.constant(w.clone())?;
            let bk = g.constant(b.clone())?;
            let y = g.conv2d(x, wk, Some(bk), d)?;
            wsq(g, y, &q)
        });
        let (xx, b2, q2) = (cx.clone(), rnd(&[3], &mut rng, -0.5, 0.5), cwq.clone());
        let namew: &'static str = ["conv2d-w d1", "conv2d-w d2", "conv2d-w d3"][d - 1];
        case!(namew, cw.clone(), move |g, w| {
            let xk = g.constant(xx.clone())?;
            let bk = g.constant(b2.clone())?;
            let y = g.conv2d(xk, w, Some(bk), d)?;
            wsq(g, y, &q2)
        });
    }
    {
        let w = rnd(&[2, 3, 3, 3], &mut rng, 0.5, 1.5);
        case!("max_pool2", rnd(&[2, 3, 6, 6], &mut rng, -1.0, 1.0), move |g, x| { let y = g.max_pool2(x)?; wsq(g, y, &w) });
    }
    {
        let w = rnd(&[2, 48], &mut rng, 0.5, 1.5);
        case!("reshape", x4d.clone(), move |g, x| { let y = g.reshape(x, &[2, 48])?; wsq(g, y, &w) });
    }
    {
        let (other, w) = (rnd(&[2, 2, 4, 4], &mut rng, -1.0, 1.0), rnd(&[2, 5, 4, 4], &mut rng, 0.5, 1.5));
        case!("concat", x4d.clone(), move |g, x| { let k = g.constant(other.clone())?; let y = g.concat(1, &[x, k])?; wsq(g, y, &w) });
    }
    {
        let w = rnd(&[2, 4, 4], &mut rng, 0.5, 1.5);
        case!("slice_channel", x4d.clone(), move |g, x| { let y = g.slice_channel(x, 1)?; wsq(g, y, &w) });
    }
    {
        let w = w3s.clone();
        case!("subsample", x3d.clone(), move |g, x| { let y = g.subsample(x, 2)?; wsq(g, y, &w) });
    }
    {
        let w = wup.clone();
        case!("bilinear_upsample", rnd(&[2, 4, 4], &mut rng, -1.0, 1.0), move |g, x| { let y = g.bilinear_upsample(x, 9, 7)?; wsq(g, y, &w) });
    }
    {
        let w = w3d.clone();
        case!("fft2+modulus", x3d.clone(), move |g, x| { let s = g.fft2(x)?; let m = g.modulus(s)?; wsq(g, m, &w) });
    }
    {
        let w = w3d.clone();
        case!("ifft2+real_part", x3d.clone(), move |g, x| { let s = g.fft2(x)?; let b = g.ifft2(s)?; let r = g.real_part(b)?; wsq(g, r, &w) });
    }
    {
        let bank = scatnet::filterbank::build_morlet_bank::<f64>(1, 2, 8, 8).unwrap();
        let psi = bank.psi(0, 0).clone();
        let w = w3d.clone();
        case!("spectral_mul_const", x3d.clone(), move |g, x| {
            let s = g.fft2(x)?;
            let bp = g.spectral_mul_const(s, psi.clone())?;
            let u = g.ifft2(bp)?;
            let m = g.modulus(u)?;
            wsq(g, m, &w)
        });
    }
    {
        let labels = labels.clone();
        case!("bce_with_logits", xz, move |g, z| g.bce_with_logits(z, &labels));
    }
    {
        let t = target.clone();
        case!("mse", rnd(&[4, 1], &mut rng, -1.0, 1.0), move |g, p| g.mse_against(p, &t));
    }
    {
        let w = rnd(&[4, 1], &mut rng, 0.5, 1.5);
        case!("add_bias_row", rnd(&[4, 1], &mut rng, -1.0, 1.0), move |g, x| {
            let bv = g.constant(Tensor::from_vec(&[1], vec![0.4])?)?;
            let y = g.add_bias_row(x, bv)?;
            wsq(g, y, &w)
        });
    }

    cases
        .into_iter()
        .map(|(name, x, mut f)| {
            let err = grad_check(&mut f, &x, DEFAULT_EPS).unwrap();
            (name.to_string(), err)
        })
        .collect()
}

pub type CPlane = Vec<Complex<f64>>;

/// Inverse DFT by direct summation: h[u] = (1/HW) sum_k H[k] e^{+2pi i k.u/N}.
pub fn inverse_dft(spec: &[f64], h: usize, w: usize) -> CPlane {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u1 in 0..h {
        for u2 in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for k1 in 0..h {
                for k2 in 0..w {
                    let ang = 2.0 * std::f64::consts::PI
                        * (k1 as f64 * u1 as f64 / h as f64 + k2 as f64 * u2 as f64 / w as f64);
                    acc += Complex::new(ang.cos(), ang.sin()) * spec[k1 * w + k2];
                }
            }
            out[u1 * w + u2] = acc / (h * w) as f64;
        }
    }
    out
}

/// Periodic convolution by the definition: (x * h)[n] = sum_m x[m] h[n - m mod N].
pub fn periodic_conv(x: &CPlane, filt: &CPlane, h: usize, w: usize) -> CPlane {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for n1 in 0..h {
        for n2 in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for m1 in 0..h {
                for m2 in 0..w {
                    let d1 = (n1 + h - m1) % h;
                    let d2 = (n2 + w - m2) % w;
                    acc += x[m1 * w + m2] * filt[d1 * w + d2];
                }
            }
            out[n1 * w + n2] = acc;
        }
    }
    out
}

fn modulus(x: &CPlane) -> CPlane {
    x.iter().map(|z| Complex::new(z.norm(), 0.0)).collect()
}

fn subsample_real(x: &CPlane, h: usize, w: usize, step: usize) -> Vec<f64> {
    let (oh, ow) = (h / step, w / step);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            out.push(x[i * step * w + j * step].re);
        }
    }
    out
}

/// Direct spatial second-order scattering of one (H, W) plane; outputs are
/// ordered by the canonical path table.
pub fn scatter_direct(plane: &[f64], h: usize, w: usize, bank: &FilterBank<f64>) -> Vec<Vec<f64>> {
    let (jn, ln) = (bank.scales(), bank.orientations());
    let step = 1usize << jn;
    let paths = PathTable::new(jn, ln);
    let phi = inverse_dft(
        &bank.phi().data().iter().map(|&v| v).collect::<Vec<f64>>(),
        h,
        w,
    );
    let psi: Vec<CPlane> = (0..jn)
        .flat_map(|j| (0..ln).map(move |t| (j, t)))
        .map(|(j, t)| inverse_dft(&bank.psi(j, t).data().to_vec(), h, w))
        .collect();
    let x: CPlane = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();

    let mut out = vec![Vec::new(); paths.count()];
    out[0] = subsample_real(&periodic_conv(&x, &phi, h, w), h, w, step);
    for j1 in 0..jn {
        for t1 in 0..ln {
            let u1 = periodic_conv(&x, &psi[j1 * ln + t1], h, w);
            let m1 = modulus(&u1);
            let k1 = paths.index(Path::Order1 { j1, theta1: t1 }).unwrap();
            out[k1] = subsample_real(&periodic_conv(&m1, &phi, h, w), h, w, step);
            for j2 in j1 + 1..jn {
                for t2 in 0..ln {
                    let u2 = periodic_conv(&m1, &psi[j2 * ln + t2], h, w);
                    let m2 = modulus(&u2);
                    let k2 = paths.index(Path::Order2 { j1, theta1: t1, j2, theta2: t2 }).unwrap();
                    out[k2] = subsample_real(&periodic_conv(&m2, &phi, h, w), h, w, step);
                }
            }
        }
    }
    out
}
