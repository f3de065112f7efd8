//! Seeded toy-model and calibration-data generation.
//!
//! All randomness flows from one 64-bit seed through a named, versioned
//! PRNG (ChaCha12) so every artifact is reproducible byte for byte.

use crate::block::{BlockDims, BlockWeights};
use crate::nonlinear::NormParams;
use crate::tensor::FloatTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// PRNG identifier recorded in manifests.
pub const PRNG_NAME: &str = "chacha12";

/// Channel and token outlier multipliers injected into calibration data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    /// (channel index, multiplier)
    pub channels: Vec<(usize, f32)>,
    /// (token index, multiplier)
    pub tokens: Vec<(usize, f32)>,
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> FloatTensor {
    let data: Vec<f32> = (0..rows * cols).map(|_| (gaussian(rng) * std) as f32).collect();
    FloatTensor::new(vec![rows, cols], data).expect("finite")
}

/// Deterministic toy block: Gaussian weights at 1/sqrt(fan_in) scale with
/// unit-ish norm gains.
pub fn gen_block(seed: u64, dims: &BlockDims) -> BlockWeights {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = dims.d_model;
    let f = dims.d_ffn;
    let ws = 1.0 / (d as f64).sqrt();
    let fs = 1.0 / (f as f64).sqrt();
    let gamma = |rng: &mut ChaCha12Rng| -> Vec<f32> {
        (0..d).map(|_| (1.0 + 0.05 * gaussian(rng)) as f32).collect()
    };
    BlockWeights {
        dims: *dims,
        w_q: gaussian_tensor(&mut rng, d, d, ws),
        w_k: gaussian_tensor(&mut rng, d, d, ws),
        w_v: gaussian_tensor(&mut rng, d, d, ws),
        w_o: gaussian_tensor(&mut rng, d, d, ws),
        w_gate: gaussian_tensor(&mut rng, d, f, ws),
        b_gate: vec![0.0; f],
        w_up: gaussian_tensor(&mut rng, d, f, ws),
        b_up: vec![0.0; f],
        w_down: gaussian_tensor(&mut rng, f, d, fs),
        norm1: NormParams::rms(gamma(&mut rng)),
        norm2: NormParams::rms(gamma(&mut rng)),
    }
}

/// Deterministic calibration/evaluation samples: standard normal tokens
/// with the requested channel and token outliers multiplied in.
pub fn gen_calib(
    seed: u64,
    dims: &BlockDims,
    samples: usize,
    tokens: usize,
    spec: &OutlierSpec,
) -> Vec<FloatTensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let d = dims.d_model;
    (0..samples)
        .map(|_| {
            let mut x = gaussian_tensor(&mut rng, tokens, d, 1.0);
            for &(ch, mult) in &spec.channels {
                if ch < d {
                    for t in 0..tokens {
                        x.as_mut_slice()[t * d + ch] *= mult;
                    }
                }
            }
            for &(tok, mult) in &spec.tokens {
                if tok < tokens {
                    for v in &mut x.as_mut_slice()[tok * d..(tok + 1) * d] {
                        *v *= mult;
                    }
                }
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> BlockDims {
        BlockDims {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_block(42, &dims());
        let b = gen_block(42, &dims());
        assert_eq!(a.w_q.as_slice(), b.w_q.as_slice());
        let ca = gen_calib(42, &dims(), 3, 4, &OutlierSpec::default());
        let cb = gen_calib(42, &dims(), 3, 4, &OutlierSpec::default());
        assert_eq!(ca[2].as_slice(), cb[2].as_slice());
        let other = gen_block(43, &dims());
        assert_ne!(a.w_q.as_slice(), other.w_q.as_slice());
    }

    #[test]
    fn channel_outlier_dominates_absmax() {
        let spec = OutlierSpec {
            channels: vec![(3, 100.0)],
            tokens: vec![],
        };
        let calib = gen_calib(7, &dims(), 16, 8, &spec);
        let d = 8;
        let mut absmax = vec![0f64; d];
        for x in &calib {
            for (i, &v) in x.as_slice().iter().enumerate() {
                absmax[i % d] = absmax[i % d].max(v.abs() as f64);
            }
        }
        let mut others: Vec<f64> = absmax
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 3)
            .map(|(_, &v)| v)
            .collect();
        others.sort_by(f64::total_cmp);
        let median = others[others.len() / 2];
        let ratio = absmax[3] / median;
        assert!((50.0..200.0).contains(&ratio), "outlier ratio {ratio}");
    }
}
