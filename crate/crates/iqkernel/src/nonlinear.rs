//! Integer-only nonlinear operators: clipped softmax, RMS/layer
//! normalization and the sigmoid-gated linear unit, all built on the
//! shift-only exponential and integer square root.

use crate::error::{Error, Result};
use crate::intmath::{di_exp, i_sqrt, i_sqrt_wide, int_div, round_div_i128, round_div_u128};
use crate::quant::{DyadicScale, Granularity, QuantTensor, WIDE_BITS};
use crate::trace;

/// Clipping bound `c = c_m / 2^c_k` for the softmax quantization range,
/// expressed in pre-softmax value units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClipConfig {
    pub c_m: u32,
    pub c_k: u32,
}

impl ClipConfig {
    /// The tuned default bound c = 15.
    pub const DEFAULT: ClipConfig = ClipConfig { c_m: 15, c_k: 0 };

    pub fn from_int(c: u32) -> Self {
        ClipConfig { c_m: c, c_k: 0 }
    }

    pub fn value(self) -> f64 {
        self.c_m as f64 / 2f64.powi(self.c_k as i32)
    }
}

/// Float normalization parameters. `beta` distinguishes LayerNorm from
/// RMSNorm; the integer path has no epsilon.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormParams {
    pub gamma: Vec<f32>,
    pub beta: Option<Vec<f32>>,
}

impl NormParams {
    pub fn rms(gamma: Vec<f32>) -> Self {
        NormParams { gamma, beta: None }
    }
}

/// Fixed-point precision of β mantissas.
const BETA_K: u32 = 16;

/// Integer-ready normalization coefficients: per-channel dyadic |γ| with
/// sign, and β as fixed-point mantissas folded into output zero-points.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntNormParams {
    pub gamma: Vec<DyadicScale>,
    pub sign: Vec<i64>,
    pub beta_m: Option<Vec<i64>>,
}

impl IntNormParams {
    pub fn from_float(p: &NormParams) -> Result<Self> {
        trace::count_float(2 * p.gamma.len());
        let mut gamma = Vec::with_capacity(p.gamma.len());
        let mut sign = Vec::with_capacity(p.gamma.len());
        for &g in &p.gamma {
            let mag = (g.abs() as f64 * 2f64.powi(40)).round() as u64;
            gamma.push(crate::intmath::fit_dyadic(mag, 1 << 40)?);
            sign.push(if g < 0.0 { -1 } else { 1 });
        }
        let beta_m = p.beta.as_ref().map(|bs| {
            bs.iter()
                .map(|&b| (b as f64 * 2f64.powi(BETA_K as i32)).round() as i64)
                .collect()
        });
        Ok(IntNormParams {
            gamma,
            sign,
            beta_m,
        })
    }
}

/// Divisors for the smoothed sigmoid argument, per gate channel, in Q16
/// fixed point.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmaPrimeSpec {
    pub alpha_q16: Vec<i64>,
}

impl SigmaPrimeSpec {
    pub fn from_factors(s: &[f32]) -> Result<Self> {
        trace::count_float(s.len());
        let mut alpha_q16 = Vec::with_capacity(s.len());
        for (i, &v) in s.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveSmoothing(i));
            }
            alpha_q16.push((v as f64 * 65536.0).round() as i64);
        }
        Ok(SigmaPrimeSpec { alpha_q16 })
    }

    /// Identity smoothing (α = 1 everywhere).
    pub fn identity(n: usize) -> Self {
        SigmaPrimeSpec {
            alpha_q16: vec![1 << 16; n],
        }
    }
}

fn row_scale(t: &QuantTensor, row: usize) -> Result<DyadicScale> {
    match t.axis() {
        Granularity::PerTensor => Ok(t.scales()[0]),
        Granularity::PerToken => Ok(t.scales()[row]),
        Granularity::PerChannel(_) => Err(Error::InvalidGranularity(
            "row-wise operator needs per-token or per-tensor scales".into(),
        )),
    }
}

/// Clip bound in input integer units: `⌊c_m · 2^(k_in - c_k) / m_in⌉`,
/// floored at one step.
fn clip_steps(clip: ClipConfig, scale: DyadicScale) -> u128 {
    let num = (clip.c_m as u128) << scale.k;
    let den = (scale.m as u128) << clip.c_k;
    round_div_u128(num, den).max(1)
}

/// Bit-width of the softmax input grid. Nonlinear operators keep their
/// activations at 8 bits regardless of the linear-path configuration.
const SOFTMAX_IN_BITS: u8 = 8;

/// Integer-only softmax over rows with range clipping.
///
/// Per row, the quantization range is clipped to length ≤ c below the row
/// maximum and the row is quantized to 8 bits over that clipped range
/// only (values below it clamp to the floor). The shifted residuals then
/// go through the shift-only exponential at the clipped grid's scale, and
/// outputs are fixed-point ratios with scale `1 / 2^(out_bits - 1)`.
pub fn di_clipped_softmax(x: &QuantTensor, clip: ClipConfig, out_bits: u8) -> Result<QuantTensor> {
    if ![4, 6, 8].contains(&out_bits) {
        return Err(Error::InvalidBits(out_bits));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = vec![0i64; rows * cols];
    let uniform = round_div_u128(1u128 << (out_bits - 1), cols as u128) as i64;
    let mut grid = vec![0i64; cols];
    for i in 0..rows {
        let scale = row_scale(x, i)?;
        let out_row = &mut data[i * cols..(i + 1) * cols];
        let p: Vec<i64> = (0..cols).map(|j| x.centered(i, j)).collect();
        let p_max = *p.iter().max().expect("non-empty row");
        let p_min = *p.iter().min().expect("non-empty row");
        if scale.is_zero() || p_max == p_min {
            // Constant row: probability mass splits evenly.
            out_row.fill(uniform);
            continue;
        }
        let c_int = clip_steps(clip, scale);
        let floor = p_max.saturating_sub(i64::try_from(c_int.min(i64::MAX as u128)).unwrap());
        let p_min_eff = p_min.max(floor);
        // Quantize the clipped range to the 8-bit nonlinear input grid.
        let values: Vec<i128> = p
            .iter()
            .map(|&v| v.max(p_min_eff) as i128 * scale.m as i128)
            .collect();
        let sq = crate::matmul::requantize_slice(&values, scale.k, SOFTMAX_IN_BITS, &mut grid)?;
        if sq.degenerate {
            out_row.fill(uniform);
            continue;
        }
        let grid_max = *grid.iter().max().expect("non-empty row");
        let shifted: Vec<i64> = grid.iter().map(|&v| v - grid_max).collect();
        let exps = di_exp(&shifted, sq.scale)?;
        let sum: u64 = exps.values.iter().sum();
        for (o, &e) in out_row.iter_mut().zip(&exps.values) {
            *o = int_div(e, sum, out_bits as u32)? as i64;
        }
    }
    QuantTensor::new(
        vec![rows, cols],
        data,
        out_bits,
        vec![DyadicScale {
            m: 1,
            k: out_bits as u32 - 1,
        }],
        vec![0],
        Granularity::PerTensor,
        false,
    )
}

/// Shared mantissa alignment for per-channel norm inputs.
fn norm_aligned(x: &QuantTensor) -> Result<Vec<i64>> {
    if !matches!(x.axis(), Granularity::PerChannel(_)) {
        return Err(Error::InvalidGranularity(
            "normalization expects per-channel input scales".into(),
        ));
    }
    let k_max = x.scales().iter().map(|s| s.k).max().unwrap_or(0);
    let mut m = Vec::with_capacity(x.scales().len());
    for s in x.scales() {
        let shift = k_max - s.k;
        if shift > 24 {
            return Err(Error::ShiftOverflow {
                ctx: "norm channel mantissa alignment",
                shift,
                limit: 24,
            });
        }
        m.push((s.m as i64) << shift);
    }
    Ok(m)
}

/// √n in Q8 fixed point via the integer square root.
fn sqrt_dim_q8(n: usize) -> u64 {
    i_sqrt((n as u64) << 16)
}

enum NormKind {
    Rms,
    Layer,
}

fn di_norm_impl(
    x: &QuantTensor,
    params: &IntNormParams,
    out_bits: u8,
    kind: NormKind,
) -> Result<QuantTensor> {
    if ![4, 6, 8].contains(&out_bits) {
        return Err(Error::InvalidBits(out_bits));
    }
    let (rows, cols) = (x.rows(), x.cols());
    if params.gamma.len() != cols {
        return Err(Error::ShapeMismatch(format!(
            "gamma length {} vs {} channels",
            params.gamma.len(),
            cols
        )));
    }
    let m_in = norm_aligned(x)?;
    let p = out_bits as u32;
    let dsq = sqrt_dim_q8(cols) as i128;
    let mut data = vec![0i64; rows * cols];
    let mut degenerate = false;

    for i in 0..rows {
        let a: Vec<i128> = (0..cols)
            .map(|c| x.centered(i, c) as i128 * m_in[c] as i128)
            .collect();
        // LayerNorm centers on the integer mean, scaled by n to stay exact.
        let centered: Vec<i128> = match kind {
            NormKind::Rms => a.clone(),
            NormKind::Layer => {
                let sum: i128 = a.iter().sum();
                a.iter().map(|&v| v * cols as i128 - sum).collect()
            }
        };
        let ss: u128 = centered.iter().map(|&v| (v * v) as u128).sum();
        if ss == 0 {
            degenerate = true;
            continue; // zeros; β still lands through the zero-point
        }
        let std = i_sqrt_wide(ss) as i128;
        for c in 0..cols {
            let num = (centered[c] * dsq) << (p - 1);
            let y = round_div_i128(num, std << 8);
            data[i * cols + c] = params.sign[c] * y as i64;
        }
    }

    let mut scales = Vec::with_capacity(cols);
    let mut zps = Vec::with_capacity(cols);
    for c in 0..cols {
        let g = params.gamma[c];
        scales.push(DyadicScale {
            m: g.m,
            k: g.k + p - 1,
        });
        let zp = match &params.beta_m {
            Some(bm) if bm[c] != 0 => {
                if g.m == 0 {
                    return Err(Error::ZeroScale("norm gamma with nonzero beta"));
                }
                // zp = -⌊β / s_out⌉ with s_out = m_γ / 2^(k_γ + p - 1).
                let num = (bm[c] as i128) << (g.k + p - 1);
                -round_div_i128(num, (g.m as i128) << BETA_K) as i64
            }
            _ => 0,
        };
        zps.push(zp);
    }
    QuantTensor::new(
        vec![rows, cols],
        data,
        WIDE_BITS,
        scales,
        zps,
        Granularity::PerChannel(1),
        degenerate,
    )
}

/// Integer-only RMS normalization over per-channel-quantized tokens.
///
/// Channel scales are aligned onto a common shift, the root mean square
/// comes from the bit-check integer square root over the aligned sum of
/// squares, and γ folds into the per-channel output scale.
pub fn di_rmsnorm(x: &QuantTensor, params: &NormParams, out_bits: u8) -> Result<QuantTensor> {
    di_rmsnorm_prepared(x, &IntNormParams::from_float(params)?, out_bits)
}

/// [`di_rmsnorm`] with pre-converted integer parameters (the pure integer
/// path prepares them once at calibration).
pub fn di_rmsnorm_prepared(
    x: &QuantTensor,
    params: &IntNormParams,
    out_bits: u8,
) -> Result<QuantTensor> {
    di_norm_impl(x, params, out_bits, NormKind::Rms)
}

/// Integer-only LayerNorm: integer mean subtraction on scale-aligned
/// values, then the RMS pipeline; β lands in the output zero-points.
pub fn di_layernorm(x: &QuantTensor, params: &NormParams, out_bits: u8) -> Result<QuantTensor> {
    di_layernorm_prepared(x, &IntNormParams::from_float(params)?, out_bits)
}

pub fn di_layernorm_prepared(
    x: &QuantTensor,
    params: &IntNormParams,
    out_bits: u8,
) -> Result<QuantTensor> {
    di_norm_impl(x, params, out_bits, NormKind::Layer)
}

/// Integer-only sigmoid-gated linear unit.
///
/// The gate is divided by the per-channel smoothing factors (Q16 fixed
/// point), shifted against the row maximum, run through the shift-only
/// exponential twice (residuals and negated maximum), and combined as
/// `gate · σ · up`. The output keeps the exact product scale
/// `m_g·m_u / 2^(k_g + k_u + out_bits - 1)`.
pub fn di_swiglu(
    gate: &QuantTensor,
    up: &QuantTensor,
    smooth: &SigmaPrimeSpec,
    out_bits: u8,
) -> Result<QuantTensor> {
    if ![4, 6, 8].contains(&out_bits) {
        return Err(Error::InvalidBits(out_bits));
    }
    if gate.shape() != up.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gate {:?} vs up {:?}",
            gate.shape(),
            up.shape()
        )));
    }
    let (rows, cols) = (gate.rows(), gate.cols());
    if smooth.alpha_q16.len() != cols {
        return Err(Error::ShapeMismatch(format!(
            "smoothing length {} vs {} channels",
            smooth.alpha_q16.len(),
            cols
        )));
    }
    if let Some(i) = smooth.alpha_q16.iter().position(|&a| a <= 0) {
        return Err(Error::NonPositiveSmoothing(i));
    }
    let p = out_bits as u32;
    let mut data = vec![0i64; rows * cols];
    let mut scales = Vec::with_capacity(rows);
    for i in 0..rows {
        let sg = row_scale(gate, i)?;
        let su = row_scale(up, i)?;
        let k_out = sg.k + su.k + p - 1;
        if k_out > 63 {
            return Err(Error::OutputShiftOverflow {
                ctx: "di_swiglu output scale",
                k: k_out,
            });
        }
        if sg.is_zero() || su.is_zero() {
            // A degenerate operand sits at its zero-point: the product row
            // is exactly zero.
            scales.push(DyadicScale::ZERO);
            continue;
        }
        let g: Vec<i64> = (0..cols).map(|c| gate.centered(i, c)).collect();
        let x_sg: Vec<i64> = g
            .iter()
            .enumerate()
            .map(|(c, &v)| round_div_i128((v as i128) << 16, smooth.alpha_q16[c] as i128) as i64)
            .collect();
        // Per-element reference max(x, 0): σ(x) = e^(x-M) / (e^(x-M) + e^(-M))
        // with one of the two exponents always at zero, so the denominator
        // never underflows.
        let shifted: Vec<i64> = x_sg.iter().map(|&v| v.min(0)).collect();
        let neg_ref: Vec<i64> = x_sg.iter().map(|&v| -v.max(0)).collect();
        let exps = di_exp(&shifted, sg)?;
        let floors = di_exp(&neg_ref, sg)?;
        for c in 0..cols {
            let e = exps.values[c];
            let ratio = int_div(e, e + floors.values[c], p)? as i128;
            let y = g[c] as i128 * ratio * up.centered(i, c) as i128;
            data[i * cols + c] = i64::try_from(y).map_err(|_| Error::OutputShiftOverflow {
                ctx: "di_swiglu value overflow",
                k: k_out,
            })?;
        }
        scales.push(DyadicScale {
            m: sg.m * su.m,
            k: k_out,
        });
    }
    QuantTensor::new(
        vec![rows, cols],
        data,
        WIDE_BITS,
        scales,
        vec![0; rows],
        Granularity::PerToken,
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize};
    use crate::tensor::FloatTensor;

    fn splitmix(state: &mut u64) -> u64 {
        *state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    fn uniform(state: &mut u64, lo: f64, hi: f64) -> f64 {
        let u = (splitmix(state) >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    fn softmax_f(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|&v| v / s).collect()
    }

    fn qt_row(vals: &[i64], scale: DyadicScale) -> QuantTensor {
        QuantTensor::new(
            vec![1, vals.len()],
            vals.to_vec(),
            WIDE_BITS,
            vec![scale],
            vec![0],
            Granularity::PerTensor,
            false,
        )
        .unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let x = qt_row(&[10, 10, 10, 10], DyadicScale { m: 128, k: 10 });
        let y = di_clipped_softmax(&x, ClipConfig::DEFAULT, 8).unwrap();
        assert_eq!(y.data(), &[32, 32, 32, 32]);
        assert_eq!(y.scales()[0], DyadicScale { m: 1, k: 7 });
    }

    #[test]
    fn softmax_winner_saturates() {
        // One logit 25 value-units above the rest (scale 1/8).
        let x = qt_row(&[200, 0, 0, 0], DyadicScale { m: 128, k: 10 });
        let y = di_clipped_softmax(&x, ClipConfig::DEFAULT, 8).unwrap();
        assert_eq!(y.data()[0], 128);
        assert!(y.data()[1..].iter().all(|&v| v == 0));
    }

    #[test]
    fn softmax_clipping_zeroes_far_logits() {
        // Scale 1/8: c = 15 → 120 integer steps. Values below the clip
        // floor (-200, -90 → -25.0, -11.25 in value units... -200 is 25
        // units below max) contribute exactly zero; a logit 2.5 units
        // below the max stays positive.
        let scale = DyadicScale { m: 128, k: 10 };
        let x = qt_row(&[0, -20, -200, -130], scale);
        let y = di_clipped_softmax(&x, ClipConfig::DEFAULT, 8).unwrap();
        assert_eq!(y.data()[2], 0);
        assert_eq!(y.data()[3], 0);
        assert!(y.data()[1] > 0);
    }

    #[test]
    fn softmax_rows_sum_and_argmax_match_oracle() {
        let mut st = 5u64;
        let mut worst = 0f64;
        for _ in 0..500 {
            let d = 2 + (splitmix(&mut st) % 15) as usize;
            let vals: Vec<i64> = (0..d)
                .map(|_| uniform(&mut st, -128.0, 127.0) as i64)
                .collect();
            let scale = DyadicScale {
                m: 128 + (splitmix(&mut st) % 128) as u32,
                k: 9 + (splitmix(&mut st) % 4) as u32,
            };
            let x = qt_row(&vals, scale);
            let y = di_clipped_softmax(&x, ClipConfig::DEFAULT, 8).unwrap();
            let sum: i64 = y.data().iter().sum();
            assert!((sum - 128).abs() <= d as i64, "sum {sum}");
            let fx: Vec<f64> = vals.iter().map(|&v| v as f64 * scale.value()).collect();
            let want = softmax_f(&fx);
            let got = dequantize(&y);
            let argmax_w = want
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            let argmax_g = y
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(argmax_w, argmax_g);
            for (g, w) in got.as_slice().iter().zip(&want) {
                worst = worst.max((*g as f64 - w).abs());
            }
        }
        assert!(worst <= 0.047, "softmax envelope {worst}");
    }

    fn per_channel_input(x: &FloatTensor) -> QuantTensor {
        quantize(x, 8, Granularity::PerChannel(1)).unwrap()
    }

    #[test]
    fn rmsnorm_constant_token_is_unit() {
        // One constant positive token: x/rms(x) = 1 in every channel.
        let q = QuantTensor::new(
            vec![1, 8],
            vec![96; 8],
            8,
            vec![DyadicScale { m: 128, k: 12 }; 8],
            vec![0; 8],
            Granularity::PerChannel(1),
            false,
        )
        .unwrap();
        let params = NormParams::rms(vec![1.0; 8]);
        let y = di_rmsnorm(&q, &params, 8).unwrap();
        let out = dequantize(&y);
        for &v in out.as_slice() {
            assert!((v - 1.0).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn rmsnorm_zero_token_is_zero() {
        let q = QuantTensor::new(
            vec![1, 4],
            vec![5, 5, 5, 5],
            8,
            vec![DyadicScale { m: 130, k: 9 }; 4],
            vec![5; 4],
            Granularity::PerChannel(1),
            false,
        )
        .unwrap();
        let y = di_rmsnorm(&q, &NormParams::rms(vec![1.0; 4]), 8).unwrap();
        assert!(y.is_degenerate());
        assert!(dequantize(&y).as_slice().iter().all(|&v| v == 0.0));
    }

    fn rmsnorm_oracle(x: &FloatTensor, gamma: &[f32]) -> FloatTensor {
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0f32; r * c];
        for i in 0..r {
            let row = x.row(i);
            let ms: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c as f64;
            let rms = ms.sqrt();
            for j in 0..c {
                out[i * c + j] = if rms == 0.0 {
                    0.0
                } else {
                    (row[j] as f64 / rms * gamma[j] as f64) as f32
                };
            }
        }
        FloatTensor::new(vec![r, c], out).unwrap()
    }

    #[test]
    fn rmsnorm_envelope_with_channel_spread() {
        let mut st = 9u64;
        let mut worst = 0f64;
        for _ in 0..100 {
            let c = 16usize;
            let mut vals = Vec::with_capacity(4 * c);
            for _ in 0..4 {
                for ch in 0..c {
                    let amp = if ch == 3 { 100.0 } else { 1.0 };
                    vals.push(uniform(&mut st, -amp, amp) as f32);
                }
            }
            let x = FloatTensor::new(vec![4, c], vals).unwrap();
            let q = per_channel_input(&x);
            let gamma: Vec<f32> = (0..c).map(|_| uniform(&mut st, 0.5, 1.5) as f32).collect();
            let y = di_rmsnorm(&q, &NormParams::rms(gamma.clone()), 8).unwrap();
            let oracle = rmsnorm_oracle(&dequantize(&q), &gamma);
            worst = worst.max(dequantize(&y).max_abs_diff(&oracle));
        }
        // Target: < 2 · 2^-(p-1) · max|γ| = 2/128 · 1.5
        assert!(worst < 2.0 / 128.0 * 1.5, "rmsnorm envelope {worst}");
    }

    #[test]
    fn rmsnorm_scale_equivariance() {
        let x = FloatTensor::new(vec![1, 6], vec![0.5, -1.25, 2.0, 0.75, -0.375, 1.5]).unwrap();
        let q = per_channel_input(&x);
        let params = NormParams::rms(vec![1.0; 6]);
        let y1 = di_rmsnorm(&q, &params, 8).unwrap();
        // Double every integer and halve every scale: same values.
        let doubled = QuantTensor::new(
            q.shape().to_vec(),
            q.data().iter().map(|&v| v * 2).collect(),
            WIDE_BITS,
            q.scales()
                .iter()
                .map(|s| DyadicScale { m: s.m, k: s.k + 1 })
                .collect(),
            q.zero_points().iter().map(|&z| z * 2).collect(),
            q.axis(),
            false,
        )
        .unwrap();
        let y2 = di_rmsnorm(&doubled, &params, 8).unwrap();
        let step = 2.0 / 128.0;
        assert!(dequantize(&y1).max_abs_diff(&dequantize(&y2)) <= step);
    }

    #[test]
    fn layernorm_constant_token_returns_beta() {
        let x = FloatTensor::new(vec![1, 4], vec![2.5; 4]).unwrap();
        let q = per_channel_input(&x);
        let params = NormParams {
            gamma: vec![1.0; 4],
            beta: Some(vec![0.25, -0.5, 0.0, 1.0]),
        };
        let y = di_layernorm(&q, &params, 8).unwrap();
        assert!(y.is_degenerate());
        let out = dequantize(&y);
        for (got, want) in out.as_slice().iter().zip([0.25f32, -0.5, 0.0, 1.0]) {
            assert!(
                (got - want).abs() <= 1.0 / 128.0 / 2.0 + 1e-6,
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn layernorm_alternating_pattern() {
        // Token [a, -a, a, -a] normalizes to the ±1 pattern.
        let q = QuantTensor::new(
            vec![1, 4],
            vec![192, -192, 192, -192],
            WIDE_BITS,
            vec![DyadicScale { m: 128, k: 14 }; 4],
            vec![0; 4],
            Granularity::PerChannel(1),
            false,
        )
        .unwrap();
        let params = NormParams {
            gamma: vec![1.0; 4],
            beta: Some(vec![0.0; 4]),
        };
        let y = di_layernorm(&q, &params, 8).unwrap();
        let out = dequantize(&y);
        for (j, &v) in out.as_slice().iter().enumerate() {
            let want = if j % 2 == 0 { 1.0 } else { -1.0 };
            assert!((v - want).abs() < 0.05, "{v} vs {want}");
        }
    }

    fn layernorm_oracle(x: &FloatTensor, gamma: &[f32], beta: &[f32]) -> FloatTensor {
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0f32; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let sd = var.sqrt();
            for j in 0..c {
                let z = if sd == 0.0 {
                    0.0
                } else {
                    (row[j] as f64 - mean) / sd
                };
                out[i * c + j] = (z * gamma[j] as f64 + beta[j] as f64) as f32;
            }
        }
        FloatTensor::new(vec![r, c], out).unwrap()
    }

    #[test]
    fn layernorm_envelope_random() {
        let mut st = 13u64;
        let mut worst = 0f64;
        for _ in 0..100 {
            let c = 12usize;
            let vals: Vec<f32> = (0..3 * c)
                .map(|_| uniform(&mut st, -2.0, 2.0) as f32)
                .collect();
            let x = FloatTensor::new(vec![3, c], vals).unwrap();
            let q = per_channel_input(&x);
            let gamma: Vec<f32> = (0..c).map(|_| uniform(&mut st, 0.5, 1.5) as f32).collect();
            let beta: Vec<f32> = (0..c).map(|_| uniform(&mut st, -0.5, 0.5) as f32).collect();
            let params = NormParams {
                gamma: gamma.clone(),
                beta: Some(beta.clone()),
            };
            let y = di_layernorm(&q, &params, 8).unwrap();
            let oracle = layernorm_oracle(&dequantize(&q), &gamma, &beta);
            worst = worst.max(dequantize(&y).max_abs_diff(&oracle));
        }
        assert!(worst < 2.0 / 128.0 * 1.5, "layernorm envelope {worst}");
    }

    fn silu_oracle(g: &FloatTensor, u: &FloatTensor, s: &[f32]) -> FloatTensor {
        let out: Vec<f32> = g
            .as_slice()
            .iter()
            .zip(u.as_slice())
            .enumerate()
            .map(|(i, (&gv, &uv))| {
                let a = gv as f64 / s[i % s.len()] as f64;
                let sig = 1.0 / (1.0 + (-a).exp());
                (gv as f64 * sig * uv as f64) as f32
            })
            .collect();
        FloatTensor::new(g.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn swiglu_zero_gate_annihilates() {
        let g = FloatTensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let u = FloatTensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let qg = quantize(&g, 8, Granularity::PerToken).unwrap();
        let qu = quantize(&u, 8, Granularity::PerToken).unwrap();
        let y = di_swiglu(&qg, &qu, &SigmaPrimeSpec::identity(4), 8).unwrap();
        let out = dequantize(&y);
        for &v in &out.as_slice()[..3] {
            assert!(v.abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn swiglu_saturated_gate_passes_product() {
        // gate values ≈ 30: σ ≈ 1, output ≈ gate · up.
        let g = FloatTensor::new(vec![1, 4], vec![30.0, 29.0, 31.0, 28.0]).unwrap();
        let u = FloatTensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 1.5]).unwrap();
        let qg = quantize(&g, 8, Granularity::PerToken).unwrap();
        let qu = quantize(&u, 8, Granularity::PerToken).unwrap();
        let y = di_swiglu(&qg, &qu, &SigmaPrimeSpec::identity(4), 8).unwrap();
        let out = dequantize(&y);
        let want = [15.0f32, -29.0, 62.0, 42.0];
        for (got, want) in out.as_slice().iter().zip(want) {
            assert!((got - want).abs() / want.abs() < 0.06, "{got} vs {want}");
        }
    }

    #[test]
    fn swiglu_envelope_random_with_smoothing() {
        let mut st = 21u64;
        let mut worst = 0f64;
        for _ in 0..100 {
            let c = 12usize;
            let gv: Vec<f32> = (0..2 * c)
                .map(|_| uniform(&mut st, -4.0, 4.0) as f32)
                .collect();
            let uv: Vec<f32> = (0..2 * c)
                .map(|_| uniform(&mut st, -2.0, 2.0) as f32)
                .collect();
            let s: Vec<f32> = (0..c).map(|_| uniform(&mut st, 0.25, 4.0) as f32).collect();
            let g = FloatTensor::new(vec![2, c], gv).unwrap();
            let u = FloatTensor::new(vec![2, c], uv).unwrap();
            let qg = quantize(&g, 8, Granularity::PerToken).unwrap();
            let qu = quantize(&u, 8, Granularity::PerToken).unwrap();
            let spec = SigmaPrimeSpec::from_factors(&s).unwrap();
            let y = di_swiglu(&qg, &qu, &spec, 8).unwrap();
            let oracle = silu_oracle(&dequantize(&qg), &dequantize(&qu), &s);
            worst = worst.max(dequantize(&y).max_abs_diff(&oracle));
        }
        // |g| ≤ 4, |u| ≤ 2: sigmoid ratio steps plus exp interpolation stay
        // inside a few percent of the |g·u| ≤ 8 output range.
        assert!(worst < 0.5, "swiglu envelope {worst}");
    }

    #[test]
    fn swiglu_rejects_bad_smoothing() {
        let g = FloatTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let qg = quantize(&g, 8, Granularity::PerToken).unwrap();
        assert!(SigmaPrimeSpec::from_factors(&[1.0, -2.0]).is_err());
        let neg = SigmaPrimeSpec {
            alpha_q16: vec![65536, 0],
        };
        assert!(di_swiglu(&qg, &qg, &neg, 8).is_err());
    }
}
