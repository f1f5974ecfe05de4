//! Seeded synthetic datasets for desk-scale training and evaluation.
//!
//! Cyclones: three 64x64 frames of a rotating spiral whose contrast and arm
//! tightness grow with a scalar intensity in [15, 185]; the intensity is the
//! regression target and the frames advance in rotation like consecutive
//! timesteps. Storms: four 64x64 bands over a smooth textured background;
//! positives carry a localized cell that is cold (dark) on bands 0, 2 and 3
//! and inverted (bright) on band 1. Labels follow the cell.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample, SampleMeta, SplitRole, Task};
use crate::tensor::Tensor;

pub const SYNTH_SIZE: usize = 64;
pub const CYCLONE_FRAMES: usize = 3;
pub const STORM_BANDS: usize = 4;
/// Positive fraction of the storm dataset.
pub const STORM_POSITIVE_FRACTION: f64 = 0.6349;

/// Rotating-spiral regression set; target = intensity in [15, 185].
pub fn gen_synthetic_cyclones(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = SYNTH_SIZE;
    // stratified intensities cover the range evenly, in shuffled order
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(n);
    for slot in slots {
        let u: f64 = rng.random_range(0.0..1.0);
        let intensity = 15.0 + (slot as f64 + u) / n as f64 * 170.0;
        let q = (intensity - 15.0) / 170.0; // 0..1
        let cy = 32.0 + rng.random_range(-4.0..4.0);
        let cx = 32.0 + rng.random_range(-4.0..4.0);
        let phase0: f64 = rng.random_range(0.0..2.0 * PI);
        let arm_tightness = 2.0 + 5.0 * q;
        let amplitude = 0.12 + 0.75 * q;
        let envelope = 0.32 + 0.1 * rng.random_range(-1.0..1.0);
        let noise_seed: u64 = rng.random();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut data = Vec::with_capacity(CYCLONE_FRAMES * size * size);
        for frame in 0..CYCLONE_FRAMES {
            let phase = phase0 + frame as f64 * 0.45;
            for i in 0..size {
                for j in 0..size {
                    let dy = (i as f64 - cy) / 32.0;
                    let dx = (j as f64 - cx) / 32.0;
                    let rho = (dx * dx + dy * dy).sqrt();
                    let ang = dy.atan2(dx);
                    let spiral = (2.0 * ang + arm_tightness * rho * 6.0 - phase).cos();
                    let env = (-rho * rho / (2.0 * envelope * envelope)).exp();
                    let v = 0.45 + amplitude * env * (0.55 * spiral + 0.45)
                        + 0.02 * noise_rng.random_range(-1.0..1.0);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        samples.push(Sample {
            input: Tensor::from_vec(&[CYCLONE_FRAMES, size, size], data).expect("cyclone shape"),
            target: intensity as f32,
            meta: SampleMeta::None,
        });
    }
    Dataset::new(Task::Regression, SplitRole::Train, samples)
}

/// Convective-cell classification set; label 1 when a cell is present.
pub fn gen_synthetic_storms(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = SYNTH_SIZE;
    let n_pos = (STORM_POSITIVE_FRACTION * n as f64).round() as usize;
    let mut labels = vec![true; n_pos];
    labels.extend(vec![false; n - n_pos]);
    labels.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(n);
    for positive in labels {
        let mut band_data = Vec::with_capacity(STORM_BANDS * size * size);
        // smooth background shared across bands with per-band offsets, plus
        // medium-frequency texture to make raw-pixel fits less trivial
        let k1: f64 = rng.random_range(0.5..1.7);
        let k2: f64 = rng.random_range(0.5..1.7);
        let ph1: f64 = rng.random_range(0.0..2.0 * PI);
        let ph2: f64 = rng.random_range(0.0..2.0 * PI);
        let tex_k: f64 = rng.random_range(5.0..9.0);
        let tex_ph: f64 = rng.random_range(0.0..2.0 * PI);
        let tex_dir: f64 = rng.random_range(0.0..PI);
        let band_offsets: Vec<f64> = (0..STORM_BANDS).map(|_| rng.random_range(-0.06..0.06)).collect();
        let (cell_r, cell_c, radius, depth) = (
            rng.random_range(14.0..50.0),
            rng.random_range(14.0..50.0),
            rng.random_range(4.0..9.0),
            rng.random_range(0.28..0.5),
        );
        for (b, off) in band_offsets.iter().enumerate() {
            for i in 0..size {
                for j in 0..size {
                    let y = i as f64 / size as f64;
                    let x = j as f64 / size as f64;
                    let mut v = 0.62
                        + off
                        + 0.08 * (2.0 * PI * k1 * y + ph1).sin()
                        + 0.08 * (2.0 * PI * k2 * x + ph2).sin()
                        + 0.035 * (2.0 * PI * tex_k * (x * tex_dir.cos() + y * tex_dir.sin()) + tex_ph).sin();
                    if positive {
                        let d2 = (i as f64 - cell_r).powi(2) + (j as f64 - cell_c).powi(2);
                        let bump = depth * (-d2 / (2.0 * radius * radius)).exp();
                        // band 1 inverts relative to its neighbors
                        if b == 1 {
                            v += bump;
                        } else {
                            v -= bump;
                        }
                    }
                    band_data.push(v.clamp(0.02, 0.98) as f32);
                }
            }
        }
        samples.push(Sample {
            input: Tensor::from_vec(&[STORM_BANDS, size, size], band_data).expect("storm shape"),
            target: if positive { 1.0 } else { 0.0 },
            meta: SampleMeta::StormCell {
                present: positive,
                row: cell_r.round() as usize,
                col: cell_c.round() as usize,
                radius,
            },
        });
    }
    Dataset::new(Task::Classification, SplitRole::Train, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = gen_synthetic_cyclones(8, 5);
        let b = gen_synthetic_cyclones(8, 5);
        for i in 0..8 {
            assert_eq!(a.sample(i).input.data(), b.sample(i).input.data());
            assert_eq!(a.sample(i).target, b.sample(i).target);
        }
        let a = gen_synthetic_storms(8, 5);
        let b = gen_synthetic_storms(8, 5);
        for i in 0..8 {
            assert_eq!(a.sample(i).input.data(), b.sample(i).input.data());
        }
    }

    #[test]
    fn cyclone_targets_cover_all_deciles_evenly() {
        let n = 1000;
        let ds = gen_synthetic_cyclones(n, 9);
        let mut counts = [0usize; 10];
        for t in ds.targets() {
            let d = (((t - 15.0) / 170.0) * 10.0) as usize;
            counts[d.min(9)] += 1;
        }
        for (d, &c) in counts.iter().enumerate() {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.1).abs() <= 0.005, "decile {d}: {frac}");
        }
    }

    #[test]
    fn storm_class_balance_matches_design() {
        let ds = gen_synthetic_storms(1000, 4);
        let pos = ds.targets().filter(|&t| t > 0.5).count();
        assert_eq!(pos, 635);
    }

    #[test]
    fn storm_labels_recoverable_by_cell_region_oracle() {
        // Ring-minus-disk brightness contrast at the true cell location,
        // combined across bands with the band-1 inversion, cancels the
        // shared background and leaves only the cell signal. Negatives
        // probe their (unused) random disk.
        let ds = gen_synthetic_storms(400, 13);
        let size = SYNTH_SIZE;
        let mut correct = 0;
        for i in 0..ds.len() {
            let s = ds.sample(i);
            let (row, col, radius, label) = match s.meta {
                SampleMeta::StormCell { present, row, col, radius } => (row, col, radius, present),
                _ => unreachable!(),
            };
            let band_contrast = |b: usize| {
                let (mut inside, mut ring) = ((0.0f64, 0usize), (0.0f64, 0usize));
                for pi in 0..size {
                    for pj in 0..size {
                        let d = ((pi as f64 - row as f64).powi(2) + (pj as f64 - col as f64).powi(2)).sqrt();
                        let v = s.input.data()[b * size * size + pi * size + pj] as f64;
                        if d <= radius {
                            inside.0 += v;
                            inside.1 += 1;
                        } else if d > 1.8 * radius && d <= 2.8 * radius {
                            ring.0 += v;
                            ring.1 += 1;
                        }
                    }
                }
                ring.0 / ring.1 as f64 - inside.0 / inside.1 as f64
            };
            let score = (band_contrast(0) + band_contrast(2) + band_contrast(3)) / 3.0 - band_contrast(1);
            if (score > 0.15) == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "oracle accuracy {acc}");
    }

    #[test]
    fn cyclone_contrast_grows_with_intensity() {
        let ds = gen_synthetic_cyclones(200, 3);
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for i in 0..ds.len() {
            let s = ds.sample(i);
            let std = {
                let d = s.sample_std();
                d
            };
            if s.target < 60.0 {
                lo.push(std);
            } else if s.target > 140.0 {
                hi.push(std);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&hi) > 1.5 * mean(&lo), "{} vs {}", mean(&hi), mean(&lo));
    }
}

#[cfg(test)]
impl super::Sample {
    fn sample_std(&self) -> f64 {
        let n = self.input.numel() as f64;
        let mean = self.input.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        (self.input.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}
