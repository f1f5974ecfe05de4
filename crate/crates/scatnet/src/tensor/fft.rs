//! Radix-2 FFT over the last two axes.
//!
//! Spatial extents are restricted to powers of two, which covers every input
//! this library accepts and keeps the transform a plain iterative
//! Cooley-Tukey. Forward is the unnormalized DFT; inverse carries the 1/(HW)
//! factor, so `ifft2(fft2(x)) == x`.

use num_complex::Complex;

use super::{is_power_of_two, CTensor, Real, Tensor};
use crate::error::{Error, Result};

/// Twiddle tables for one transform length.
struct Twiddles<T> {
    n: usize,
    // exp(-2*pi*i*k/n) for k in 0..n/2
    forward: Vec<Complex<T>>,
}

impl<T: Real> Twiddles<T> {
    fn new(n: usize) -> Self {
        let half = n / 2;
        let mut forward = Vec::with_capacity(half);
        for k in 0..half {
            let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            forward.push(Complex::new(T::of_f64(ang.cos()), T::of_f64(ang.sin())));
        }
        Twiddles { n, forward }
    }

    #[inline]
    fn tw(&self, k: usize, inverse: bool) -> Complex<T> {
        let w = self.forward[k];
        if inverse {
            w.conj()
        } else {
            w
        }
    }
}

fn fft1d_inplace<T: Real>(buf: &mut [Complex<T>], tw: &Twiddles<T>, inverse: bool) {
    let n = buf.len();
    debug_assert_eq!(n, tw.n);
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        let mut base = 0;
        while base < n {
            for k in 0..half {
                let w = tw.tw(k * step, inverse);
                let u = buf[base + k];
                let v = buf[base + k + half] * w;
                buf[base + k] = u + v;
                buf[base + k + half] = u - v;
            }
            base += len;
        }
        len <<= 1;
    }
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !is_power_of_two(h) || !is_power_of_two(w) {
        return Err(Error::NotPowerOfTwo(h, w));
    }
    Ok(())
}

/// In-place 2D FFT of every (H, W) plane in a batched buffer.
pub fn fft2_planes<T: Real>(data: &mut [Complex<T>], h: usize, w: usize, inverse: bool) -> Result<()> {
    check_pow2(h, w)?;
    let plane = h * w;
    debug_assert_eq!(data.len() % plane, 0);
    let tw_w = Twiddles::new(w);
    let tw_h = Twiddles::new(h);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for p in data.chunks_mut(plane) {
        for row in p.chunks_mut(w) {
            fft1d_inplace(row, &tw_w, inverse);
        }
        for c in 0..w {
            for r in 0..h {
                col[r] = p[r * w + c];
            }
            fft1d_inplace(&mut col, &tw_h, inverse);
            for r in 0..h {
                p[r * w + c] = col[r];
            }
        }
        if inverse {
            let scale = T::one() / T::of_usize(plane);
            for v in p.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    Ok(())
}

/// Forward 2D FFT of a real tensor; the last two axes are spatial.
pub fn fft2<T: Real>(x: &Tensor<T>) -> Result<CTensor<T>> {
    let (h, w) = x.spatial()?;
    let mut out = CTensor::from_real(x);
    fft2_planes(out.data_mut(), h, w, false)?;
    Ok(out)
}

/// Forward 2D FFT of a complex tensor.
pub fn fft2_c<T: Real>(x: &CTensor<T>) -> Result<CTensor<T>> {
    let (h, w) = x.spatial()?;
    let mut out = x.clone();
    fft2_planes(out.data_mut(), h, w, false)?;
    Ok(out)
}

/// Inverse 2D FFT (complex to complex, normalized by 1/(HW)).
pub fn ifft2_c<T: Real>(x: &CTensor<T>) -> Result<CTensor<T>> {
    let (h, w) = x.spatial()?;
    let mut out = x.clone();
    fft2_planes(out.data_mut(), h, w, true)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_signal_has_only_dc() {
        let x = Tensor::<f64>::filled(&[4, 4], 1.0);
        let spec = fft2(&x).unwrap();
        assert!((spec.data()[0].re - 16.0).abs() < 1e-12);
        assert!(spec.data()[0].im.abs() < 1e-12);
        for z in &spec.data()[1..] {
            assert!(z.norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let mut x = Tensor::<f64>::zeros(&[8, 8]);
        x.data_mut()[0] = 1.0;
        let spec = fft2(&x).unwrap();
        for z in spec.data() {
            assert!((z.re - 1.0).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = Tensor::<f32>::zeros(&[3, 4]);
        assert!(matches!(fft2(&x), Err(Error::NotPowerOfTwo(3, 4))));
    }

    #[test]
    fn round_trip_f32_within_tolerance() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[8, 8], data).unwrap();
        let back = ifft2_c(&fft2(&x).unwrap()).unwrap().real_part();
        let num = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(num / x.l2_norm() < 1e-5);
    }

    #[test]
    fn parseval_holds() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[16, 16], data).unwrap();
        let spec = fft2(&x).unwrap();
        let sig: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = spec.data().iter().map(|z| z.norm_sqr()).sum::<f64>() / 256.0;
        assert!((sig - freq).abs() / sig < 1e-10);
    }
}
