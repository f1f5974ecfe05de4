//! Second-order scattering cascade.
//!
//! Order 0 is the lowpassed input; order 1 lowpasses the modulus of each
//! bandpass response; order 2 repeats the wavelet/modulus step on the
//! order-1 modulus for every coarser scale, over all orientation pairs.
//! All convolutions are periodic via the FFT and every output is decimated
//! by 2^J after the final lowpass.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::tensor::fft::fft2_planes;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// One coefficient channel of the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Order0,
    Order1 { j1: usize, theta1: usize },
    Order2 { j1: usize, theta1: usize, j2: usize, theta2: usize },
}

impl Path {
    pub fn order(&self) -> usize {
        match self {
            Path::Order0 => 0,
            Path::Order1 { .. } => 1,
            Path::Order2 { .. } => 2,
        }
    }
}

/// Bijection between valid paths and channel indices `0..K`.
///
/// Ordering: order 0 first, then order 1 sorted by (j1, theta1), then
/// order 2 sorted by (j1, theta1, j2, theta2); order 2 requires j1 < j2.
#[derive(Debug, Clone)]
pub struct PathTable {
    scales: usize,
    orientations: usize,
    paths: Vec<Path>,
}

impl PathTable {
    pub fn new(scales: usize, orientations: usize) -> Self {
        let (j, l) = (scales, orientations);
        let mut paths = Vec::with_capacity(1 + l * j + j * (j - 1) / 2 * l * l);
        paths.push(Path::Order0);
        for j1 in 0..j {
            for t1 in 0..l {
                paths.push(Path::Order1 { j1, theta1: t1 });
            }
        }
        for j1 in 0..j {
            for t1 in 0..l {
                for j2 in j1 + 1..j {
                    for t2 in 0..l {
                        paths.push(Path::Order2 { j1, theta1: t1, j2, theta2: t2 });
                    }
                }
            }
        }
        PathTable { scales, orientations, paths }
    }

    /// Total channel count: 1 + L*J + J*(J-1)/2 * L^2.
    pub fn count(&self) -> usize {
        self.paths.len()
    }

    pub fn get(&self, k: usize) -> &Path {
        &self.paths[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Path)> {
        self.paths.iter().enumerate()
    }

    /// Channel index of a path; closed form, the inverse of `get`.
    pub fn index(&self, path: Path) -> Result<usize> {
        let (j, l) = (self.scales, self.orientations);
        match path {
            Path::Order0 => Ok(0),
            Path::Order1 { j1, theta1 } => {
                if j1 >= j || theta1 >= l {
                    return Err(Error::InvalidArgument(format!(
                        "order-1 path (j1={j1}, theta1={theta1}) out of range for J={j}, L={l}"
                    )));
                }
                Ok(1 + j1 * l + theta1)
            }
            Path::Order2 { j1, theta1, j2, theta2 } => {
                if j1 >= j || j2 >= j || theta1 >= l || theta2 >= l {
                    return Err(Error::InvalidArgument(format!(
                        "order-2 path ({j1},{theta1},{j2},{theta2}) out of range for J={j}, L={l}"
                    )));
                }
                if j1 >= j2 {
                    return Err(Error::InvalidArgument(format!(
                        "order-2 path requires j1 < j2, got j1={j1}, j2={j2}"
                    )));
                }
                // second-order blocks sorted by (j1, theta1, j2, theta2)
                let per_t1 = |jj: usize| (j - 1 - jj) * l;
                let mut base = 1 + j * l;
                for jj in 0..j1 {
                    base += l * per_t1(jj);
                }
                Ok(base + theta1 * per_t1(j1) + (j2 - j1 - 1) * l + theta2)
            }
        }
    }
}

/// Scattering coefficients (B, C, K, H/2^J, W/2^J) plus the path table
/// mapping each of the K channels to its wavelet indices.
#[derive(Debug, Clone)]
pub struct ScatteringCoeffs<T> {
    pub values: Tensor<T>,
    pub paths: PathTable,
}

/// Scratch buffers for one cascade over one (H, W) plane.
struct PlaneScratch<T> {
    spec: Vec<Complex<T>>,    // spectrum of the input plane
    work: Vec<Complex<T>>,    // bandpass/lowpass products
    m1_spec: Vec<Complex<T>>, // spectrum of the first-order modulus
    work2: Vec<Complex<T>>,
}

impl<T: Real> PlaneScratch<T> {
    fn new(n: usize) -> Self {
        let z = Complex::new(T::zero(), T::zero());
        PlaneScratch { spec: vec![z; n], work: vec![z; n], m1_spec: vec![z; n], work2: vec![z; n] }
    }
}

#[inline]
fn spectral_mul_into<T: Real>(src: &[Complex<T>], filt: &[T], dst: &mut [Complex<T>]) {
    for ((d, &s), &f) in dst.iter_mut().zip(src).zip(filt) {
        *d = Complex::new(s.re * f, s.im * f);
    }
}

/// Lowpass `src` (a spectrum), invert, take the real part and decimate into
/// the `k`-th channel slot of `out`.
fn lowpass_decimate<T: Real>(
    src: &[Complex<T>],
    phi: &[T],
    work: &mut [Complex<T>],
    h: usize,
    w: usize,
    step: usize,
    out: &mut [T],
) -> Result<()> {
    spectral_mul_into(src, phi, work);
    fft2_planes(work, h, w, true)?;
    let (oh, ow) = (h / step, w / step);
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = work[i * step * w + j * step].re;
        }
    }
    Ok(())
}

/// Second-order scattering transform of a real (B, C, H, W) batch.
/// Channels are processed independently.
pub fn scatter2d<T: Real>(x: &Tensor<T>, bank: &FilterBank<T>) -> Result<ScatteringCoeffs<T>> {
    let (b, c, h, w) = match x.dims() {
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => return Err(Error::Dims(format!("scatter2d expects (B, C, H, W), got {:?}", x.dims()))),
    };
    if (h, w) != bank.spatial() {
        return Err(Error::ShapeMismatch { expected: vec![bank.spatial().0, bank.spatial().1], got: vec![h, w] });
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "scatter2d input" });
    }
    let (jn, ln) = (bank.scales(), bank.orientations());
    let paths = PathTable::new(jn, ln);
    let k = paths.count();
    let step = 1usize << jn;
    let (oh, ow) = (h / step, w / step);
    let mut values = Tensor::zeros(&[b, c, k, oh, ow]);

    let mut scratch = PlaneScratch::new(h * w);
    let phi = bank.phi().data();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let out = &mut values.data_mut()[(bi * c + ci) * k * oh * ow..(bi * c + ci + 1) * k * oh * ow];
            scatter_plane(plane, h, w, bank, &paths, &mut scratch, phi, out)?;
        }
    }
    if !values.all_finite() {
        return Err(Error::NonFinite { op: "scatter2d" });
    }
    Ok(ScatteringCoeffs { values, paths })
}

#[allow(clippy::too_many_arguments)]
fn scatter_plane<T: Real>(
    plane: &[T],
    h: usize,
    w: usize,
    bank: &FilterBank<T>,
    paths: &PathTable,
    s: &mut PlaneScratch<T>,
    phi: &[T],
    out: &mut [T],
) -> Result<()> {
    let (jn, ln) = (bank.scales(), bank.orientations());
    let step = 1usize << jn;
    let slot = (h / step) * (w / step);
    for (z, &v) in s.spec.iter_mut().zip(plane) {
        *z = Complex::new(v, T::zero());
    }
    fft2_planes(&mut s.spec, h, w, false)?;

    // order 0
    lowpass_decimate(&s.spec, phi, &mut s.work, h, w, step, &mut out[..slot])?;

    for j1 in 0..jn {
        for t1 in 0..ln {
            // first-order modulus |x * psi_{j1,t1}|
            spectral_mul_into(&s.spec, bank.psi(j1, t1).data(), &mut s.work);
            fft2_planes(&mut s.work, h, w, true)?;
            for (m, z) in s.m1_spec.iter_mut().zip(&s.work) {
                *m = Complex::new(z.norm(), T::zero());
            }
            fft2_planes(&mut s.m1_spec, h, w, false)?;

            let k1 = paths.index(Path::Order1 { j1, theta1: t1 })?;
            lowpass_decimate(&s.m1_spec, phi, &mut s.work, h, w, step, &mut out[k1 * slot..(k1 + 1) * slot])?;

            for j2 in j1 + 1..jn {
                for t2 in 0..ln {
                    spectral_mul_into(&s.m1_spec, bank.psi(j2, t2).data(), &mut s.work);
                    fft2_planes(&mut s.work, h, w, true)?;
                    for (m, z) in s.work2.iter_mut().zip(&s.work) {
                        *m = Complex::new(z.norm(), T::zero());
                    }
                    fft2_planes(&mut s.work2, h, w, false)?;
                    let k2 = paths.index(Path::Order2 { j1, theta1: t1, j2, theta2: t2 })?;
                    lowpass_decimate(&s.work2, phi, &mut s.work, h, w, step, &mut out[k2 * slot..(k2 + 1) * slot])?;
                }
            }
        }
    }
    Ok(())
}

/// Records the cascade on a graph for one input channel: (B, H, W) real
/// node in, (B, K, H/2^J, W/2^J) node out, differentiable w.r.t. the input.
pub fn scatter_channel_graph<T: Real>(g: &mut Graph<T>, x: NodeId, bank: &FilterBank<T>) -> Result<NodeId> {
    let dims = match g.real(x)?.dims() {
        [b, h, w] => (*b, *h, *w),
        other => return Err(Error::Dims(format!("scatter_channel_graph expects (B, H, W), got {other:?}"))),
    };
    let (b, h, w) = dims;
    if (h, w) != bank.spatial() {
        return Err(Error::ShapeMismatch { expected: vec![bank.spatial().0, bank.spatial().1], got: vec![h, w] });
    }
    let (jn, ln) = (bank.scales(), bank.orientations());
    let paths = PathTable::new(jn, ln);
    let step = 1usize << jn;
    let (oh, ow) = (h / step, w / step);
    let mut slots: Vec<Option<NodeId>> = vec![None; paths.count()];

    let spec = g.fft2(x)?;
    let lowpass = |g: &mut Graph<T>, spec_node: NodeId| -> Result<NodeId> {
        let smoothed = g.spectral_mul_const(spec_node, bank.phi().clone())?;
        let back = g.ifft2(smoothed)?;
        let re = g.real_part(back)?;
        let dec = g.subsample(re, step)?;
        g.reshape(dec, &[b, 1, oh, ow])
    };

    slots[0] = Some(lowpass(g, spec)?);
    for j1 in 0..jn {
        for t1 in 0..ln {
            let band = g.spectral_mul_const(spec, bank.psi(j1, t1).clone())?;
            let u = g.ifft2(band)?;
            let m1 = g.modulus(u)?;
            let m1_spec = g.fft2(m1)?;
            let k1 = paths.index(Path::Order1 { j1, theta1: t1 })?;
            slots[k1] = Some(lowpass(g, m1_spec)?);
            for j2 in j1 + 1..jn {
                for t2 in 0..ln {
                    let band2 = g.spectral_mul_const(m1_spec, bank.psi(j2, t2).clone())?;
                    let u2 = g.ifft2(band2)?;
                    let m2 = g.modulus(u2)?;
                    let m2_spec = g.fft2(m2)?;
                    let k2 = paths.index(Path::Order2 { j1, theta1: t1, j2, theta2: t2 })?;
                    slots[k2] = Some(lowpass(g, m2_spec)?);
                }
            }
        }
    }
    let parts: Vec<NodeId> = slots.into_iter().map(|s| s.expect("every path filled")).collect();
    g.concat(1, &parts)
}
