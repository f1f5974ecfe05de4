//! Fourier-domain Morlet filter bank.
//!
//! Bandpass filters are oriented complex exponentials under an anisotropic
//! Gaussian window, minus a Gaussian-weighted correction that forces an
//! exactly zero mean; the lowpass is an isotropic Gaussian with unit DC
//! gain. All spectra are real-valued and sampled from the analytic Fourier
//! expression with aliases summed over two periods in each direction, which
//! matches periodic convolution on the grid.
//!
//! Mother-wavelet parameters follow the common convention for this family:
//! center frequency 3*pi/4, Gaussian width 0.8, ellipse slant 4/L. Scale j
//! dilates the envelope by 2^j and shrinks the center frequency by the same
//! factor; the lowpass uses width 0.8 * 2^(J-1).

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{is_power_of_two, Real, Tensor};

const XI: f64 = 3.0 * PI / 4.0;
const SIGMA0: f64 = 0.8;
/// Alias periods summed on each side when sampling a spectrum.
const ALIASES: i64 = 2;

#[derive(Debug, Clone)]
pub struct FilterBank<T> {
    scales: usize,
    orientations: usize,
    height: usize,
    width: usize,
    /// Bandpass spectra, indexed by j * L + theta.
    psi_hat: Vec<Arc<Tensor<T>>>,
    phi_hat: Arc<Tensor<T>>,
}

/// Samples the periodized spectrum of a rotated anisotropic Gaussian bump
/// centered at radius `xi` along direction `theta`.
fn gaussian_spectrum(h: usize, w: usize, sigma: f64, slant: f64, theta: f64, xi: f64) -> Vec<f64> {
    let (ct, st) = (theta.cos(), theta.sin());
    let (cx, cy) = (xi * ct, xi * st);
    let q1 = sigma * sigma;
    let q2 = sigma * sigma / (slant * slant);
    let mut out = vec![0.0f64; h * w];
    for ki in 0..h {
        let base_i = 2.0 * PI * wrap_index(ki, h) / h as f64;
        for kj in 0..w {
            let base_j = 2.0 * PI * wrap_index(kj, w) / w as f64;
            let mut acc = 0.0;
            for a1 in -ALIASES..=ALIASES {
                let w1 = base_i + 2.0 * PI * a1 as f64 - cx;
                for a2 in -ALIASES..=ALIASES {
                    let w2 = base_j + 2.0 * PI * a2 as f64 - cy;
                    // coordinates in the wavelet frame
                    let b1 = ct * w1 + st * w2;
                    let b2 = -st * w1 + ct * w2;
                    acc += (-0.5 * (q1 * b1 * b1 + q2 * b2 * b2)).exp();
                }
            }
            out[ki * w + kj] = acc;
        }
    }
    out
}

fn wrap_index(k: usize, n: usize) -> f64 {
    if k < n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Builds the Morlet bandpass bank and Gaussian lowpass for `J` scales and
/// `L` orientations on an `H` x `W` grid.
pub fn build_morlet_bank<T: Real>(j_scales: usize, l_orients: usize, h: usize, w: usize) -> Result<FilterBank<T>> {
    if j_scales < 1 || l_orients < 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least one scale and one orientation, got J={j_scales}, L={l_orients}"
        )));
    }
    if !is_power_of_two(h) || !is_power_of_two(w) {
        return Err(Error::NotPowerOfTwo(h, w));
    }
    if 1usize << j_scales > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "2^J = {} exceeds min spatial extent {}",
            1usize << j_scales,
            h.min(w)
        )));
    }
    let slant = 4.0 / l_orients as f64;
    let mut psi: Vec<Vec<f64>> = Vec::with_capacity(j_scales * l_orients);
    for j in 0..j_scales {
        let sigma = SIGMA0 * f64::powi(2.0, j as i32);
        let xi = XI / f64::powi(2.0, j as i32);
        for l in 0..l_orients {
            let theta = l as f64 * PI / l_orients as f64;
            let bump = gaussian_spectrum(h, w, sigma, slant, theta, xi);
            let center = gaussian_spectrum(h, w, sigma, slant, theta, 0.0);
            // correction ratio that zeroes the DC bin exactly
            let k = bump[0] / center[0];
            let spec: Vec<f64> = bump.iter().zip(&center).map(|(&b, &c)| b - k * c).collect();
            psi.push(spec);
        }
    }
    let sigma_phi = SIGMA0 * f64::powi(2.0, j_scales as i32 - 1);
    let mut phi = gaussian_spectrum(h, w, sigma_phi, 1.0, 0.0, 0.0);
    let dc = phi[0];
    for v in &mut phi {
        *v /= dc;
    }

    // Frame normalization: shrink the bandpass energies just enough that the
    // Littlewood-Paley sum stays at or below one everywhere.
    let psi_sum = littlewood_psi_sum(&psi, h, w);
    let mut c = f64::INFINITY;
    for (idx, &s) in psi_sum.iter().enumerate() {
        if s > 1e-12 {
            let headroom = 1.0 - phi[idx] * phi[idx];
            c = c.min(headroom / s);
        }
    }
    let scale = if c < 1.0 { c.sqrt() } else { 1.0 };
    let psi_hat = psi
        .into_iter()
        .map(|spec| {
            Arc::new(
                Tensor::from_vec(&[h, w], spec.iter().map(|&v| T::of_f64(v * scale)).collect())
                    .expect("spectrum shape"),
            )
        })
        .collect();
    let phi_hat = Arc::new(Tensor::from_vec(&[h, w], phi.iter().map(|&v| T::of_f64(v)).collect())?);
    Ok(FilterBank { scales: j_scales, orientations: l_orients, height: h, width: w, psi_hat, phi_hat })
}

/// Half-sum of bandpass energies over +/- frequencies, per bin.
fn littlewood_psi_sum(psi: &[Vec<f64>], h: usize, w: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; h * w];
    for spec in psi {
        for ki in 0..h {
            let mi = (h - ki) % h;
            for kj in 0..w {
                let mj = (w - kj) % w;
                let v = spec[ki * w + kj];
                let vm = spec[mi * w + mj];
                sum[ki * w + kj] += 0.5 * (v * v + vm * vm);
            }
        }
    }
    sum
}

impl<T: Real> FilterBank<T> {
    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bandpass_count(&self) -> usize {
        self.psi_hat.len()
    }

    pub fn psi(&self, j: usize, theta: usize) -> &Arc<Tensor<T>> {
        &self.psi_hat[j * self.orientations + theta]
    }

    pub fn phi(&self) -> &Arc<Tensor<T>> {
        &self.phi_hat
    }

    /// All spectra stacked as (J*L + 1, H, W), bandpass filters first.
    pub fn export_spectra(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity((self.psi_hat.len() + 1) * plane);
        for p in &self.psi_hat {
            data.extend_from_slice(p.data());
        }
        data.extend_from_slice(self.phi_hat.data());
        Tensor::from_vec(&[self.psi_hat.len() + 1, self.height, self.width], data).expect("stacked spectra")
    }

    /// Littlewood-Paley sum per frequency bin.
    pub fn lp_map(&self) -> Tensor<f64> {
        let (h, w) = (self.height, self.width);
        let psi: Vec<Vec<f64>> = self
            .psi_hat
            .iter()
            .map(|p| p.data().iter().map(|&v| v.as_f64()).collect())
            .collect();
        let mut sum = littlewood_psi_sum(&psi, h, w);
        for (s, &p) in sum.iter_mut().zip(self.phi_hat.data()) {
            let pv = p.as_f64();
            *s += pv * pv;
        }
        Tensor::from_vec(&[h, w], sum).expect("lp map shape")
    }
}

/// Pointwise extrema of the Littlewood-Paley sum over all frequencies.
pub fn littlewood_paley<T: Real>(bank: &FilterBank<T>) -> (f64, f64) {
    let map = bank.lp_map();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Minimum of the Littlewood-Paley sum over bins with |omega| in
/// [r_lo, r_hi] (radians).
pub fn littlewood_paley_annulus_min<T: Real>(bank: &FilterBank<T>, r_lo: f64, r_hi: f64) -> f64 {
    let map = bank.lp_map();
    let (h, w) = bank.spatial();
    let mut lo = f64::INFINITY;
    for ki in 0..h {
        let w1 = 2.0 * PI * wrap_index(ki, h) / h as f64;
        for kj in 0..w {
            let w2 = 2.0 * PI * wrap_index(kj, w) / w as f64;
            let r = (w1 * w1 + w2 * w2).sqrt();
            if r >= r_lo && r <= r_hi {
                lo = lo.min(map.data()[ki * w + kj]);
            }
        }
    }
    lo
}
