//! The FFT cascade against the direct spatial implementation, plus the
//! stability properties that make scattering features useful.

mod common;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use scatnet::filterbank::build_morlet_bank;
use scatnet::scattering::scatter2d;
use scatnet::tensor::Tensor;

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(&[1, 1, n, n], (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn fft_cascade_matches_direct_spatial_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 8;
    let bank = build_morlet_bank::<f64>(1, 2, n, n).unwrap();
    for trial in 0..5 {
        let x = random_image(n, &mut rng);
        let fft_out = scatter2d(&x, &bank).unwrap();
        let direct = common::scatter_direct(&x.data()[..n * n], n, n, &bank);
        let k = fft_out.paths.count();
        let slot = fft_out.values.numel() / k;
        let peak = direct
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        for ki in 0..k {
            for (a, b) in fft_out.values.data()[ki * slot..(ki + 1) * slot].iter().zip(&direct[ki]) {
                assert!(
                    (a - b).abs() / peak <= 1e-5,
                    "trial {trial} path {ki}: {a} vs {b} (peak {peak})"
                );
            }
        }
    }
}

#[test]
fn circular_shift_equivariance_of_the_undecimated_lowpass() {
    // shifting the input by the decimation step shifts S0 by one pixel
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 16;
    let bank = build_morlet_bank::<f64>(1, 2, n, n).unwrap();
    let x = random_image(n, &mut rng);
    let mut shifted = Tensor::<f64>::zeros(&[1, 1, n, n]);
    for i in 0..n {
        for j in 0..n {
            shifted.data_mut()[((i + 2) % n) * n + j] = x.data()[i * n + j];
        }
    }
    let a = scatter2d(&x, &bank).unwrap();
    let b = scatter2d(&shifted, &bank).unwrap();
    let k = a.paths.count();
    let (oh, ow) = (n / 2, n / 2);
    for ki in 0..k {
        for i in 0..oh {
            for j in 0..ow {
                let av = a.values.data()[ki * oh * ow + i * ow + j];
                let bv = b.values.data()[ki * oh * ow + ((i + 1) % oh) * ow + j];
                assert!((av - bv).abs() < 1e-10, "path {ki} ({i},{j})");
            }
        }
    }
}

#[test]
fn small_shift_distance_shrinks_with_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 64;
    let bank1 = build_morlet_bank::<f64>(1, 6, n, n).unwrap();
    let bank3 = build_morlet_bank::<f64>(3, 6, n, n).unwrap();
    for trial in 0..3 {
        let x = random_image(n, &mut rng);
        let mut shifted = Tensor::<f64>::zeros(&[1, 1, n, n]);
        for i in 0..n {
            for j in 0..n {
                shifted.data_mut()[i * n + (j + 1) % n] = x.data()[i * n + j];
            }
        }
        let rel_dist = |bank: &scatnet::filterbank::FilterBank<f64>| {
            let a = scatter2d(&x, bank).unwrap().values;
            let b = scatter2d(&shifted, bank).unwrap().values;
            let d: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            d / a.l2_norm()
        };
        let (d1, d3) = (rel_dist(&bank1), rel_dist(&bank3));
        assert!(d3 < d1, "trial {trial}: J=3 distance {d3} not below J=1 distance {d1}");
    }
}

#[test]
fn non_expansive_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 16;
    let bank = build_morlet_bank::<f64>(2, 3, n, n).unwrap();
    for trial in 0..20 {
        let x = random_image(n, &mut rng);
        let y = random_image(n, &mut rng);
        let sx = scatter2d(&x, &bank).unwrap().values;
        let sy = scatter2d(&y, &bank).unwrap().values;
        let ds: f64 = sx
            .data()
            .iter()
            .zip(sy.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dx: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(ds <= 1.001 * dx, "trial {trial}: {ds} vs {dx}");
    }
}
