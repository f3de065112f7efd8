//! Dynamic integer-only matrix multiplication: exact integer GEMM with
//! runtime output-range discovery and closed-form dyadic requantization.
//!
//! The requantizer solves, per output slice, for the output scale
//! `m_y / 2^(k_y)` by pinning the mantissa upper bound at 256 and taking
//! the floor-log2 of the shifted level count, then derives the zero-point
//! and output integers from exact rational rounding over the slice range.
//! The same solver performs standalone dynamic requantization and the
//! scale-aligned residual addition.

use crate::error::{Error, Result};
use crate::intmath::{floor_log2_u128, round_div_i128, round_div_u128};
use crate::quant::{DyadicScale, Granularity, QuantTensor, WIDE_BITS};

/// Exact signed accumulator `P[i,j] = Σ_l (x1[i,l]-zp1)(x2[l,j]-zp2)`.
#[derive(Debug, Clone)]
pub struct IntAccumulator {
    pub shape: [usize; 2],
    pub data: Vec<i64>,
}

fn check_operand_axes(x1: &QuantTensor, x2: &QuantTensor) -> Result<()> {
    if matches!(x1.axis(), Granularity::PerChannel(_)) {
        return Err(Error::InvalidGranularity(
            "left operand cannot be per-channel along the contraction axis".into(),
        ));
    }
    if matches!(x2.axis(), Granularity::PerToken) && x2.rows() > 1 {
        return Err(Error::InvalidGranularity(
            "right operand cannot carry per-row scales along the contraction axis".into(),
        ));
    }
    Ok(())
}

/// Zero-point-centered integer GEMM, exact in 64 bits.
pub fn accumulate(x1: &QuantTensor, x2: &QuantTensor) -> Result<IntAccumulator> {
    if x1.cols() != x2.rows() {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims {} vs {}",
            x1.cols(),
            x2.rows()
        )));
    }
    check_operand_axes(x1, x2)?;
    let (r, inner, c) = (x1.rows(), x1.cols(), x2.cols());
    let mut data = vec![0i64; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut acc: i64 = 0;
            for l in 0..inner {
                acc += x1.centered(i, l) * x2.centered(l, j);
            }
            data[i * c + j] = acc;
        }
    }
    Ok(IntAccumulator {
        shape: [r, c],
        data,
    })
}

/// Mantissas of each scale group left-shifted onto the common shift
/// `K = max(k)`, so that `value = v · m' / 2^K` uniformly.
pub(crate) fn aligned_mantissas(t: &QuantTensor) -> Result<(Vec<i64>, u32)> {
    let k_max = t.scales().iter().map(|s| s.k).max().unwrap_or(0);
    let mut out = Vec::with_capacity(t.scales().len());
    for s in t.scales() {
        let shift = k_max - s.k;
        if shift > 32 {
            return Err(Error::ShiftOverflow {
                ctx: "scale mantissa alignment",
                shift,
                limit: 32,
            });
        }
        out.push((s.m as i64) << shift);
    }
    Ok((out, k_max))
}

/// One requantized slice: output integers plus (scale, zero_point).
pub(crate) struct SliceQuant {
    pub(crate) scale: DyadicScale,
    pub(crate) zero_point: i64,
    pub(crate) degenerate: bool,
}

/// Encode a constant slice value `c = vmin / 2^K` exactly: a unit data
/// step against a dyadic scale equal to |c|, signed via the zero-point.
/// A zero constant keeps the all-zero / zero-scale form.
fn encode_constant(vmin: i128, k_total: u32, out: &mut [i64]) -> Result<SliceQuant> {
    if vmin == 0 {
        out.fill(0);
        return Ok(SliceQuant {
            scale: DyadicScale::ZERO,
            zero_point: 0,
            degenerate: true,
        });
    }
    let mag = vmin.unsigned_abs();
    let lg = floor_log2_u128(mag)?;
    // Aim the mantissa into [128, 255]; clamp the shift at zero for
    // constants larger than 128.
    let mut k_c = (k_total as i64 + 7 - lg as i64).max(0) as u32;
    let mut m_c = if k_c >= k_total {
        round_div_u128(mag << (k_c - k_total), 1)
    } else {
        round_div_u128(mag, 1u128 << (k_total - k_c))
    };
    if m_c > 255 && k_c > 0 {
        k_c -= 1;
        m_c = round_div_u128(mag, 1u128 << (k_total - k_c));
    }
    if m_c > 255 {
        return Err(Error::ScaleOutOfRange {
            num: m_c.min(u64::MAX as u128) as u64,
            den: 1,
        });
    }
    let (data, zp) = if vmin > 0 { (1, 0) } else { (0, 1) };
    out.fill(data);
    Ok(SliceQuant {
        scale: DyadicScale {
            m: m_c as u32,
            k: k_c,
        },
        zero_point: zp,
        degenerate: true,
    })
}

/// Closed-form dynamic requantization of one slice of value-mantissas
/// (uniform scale `1 / 2^k_total`) to `out_bits` integers.
pub(crate) fn requantize_slice(
    values: &[i128],
    k_total: u32,
    out_bits: u8,
    out: &mut [i64],
) -> Result<SliceQuant> {
    let n = ((1u32 << out_bits) - 1) as i128;
    let vmax = *values.iter().max().expect("non-empty slice");
    let vmin = *values.iter().min().expect("non-empty slice");
    if vmax == vmin {
        return encode_constant(vmin, k_total, out);
    }
    if k_total > 110 {
        return Err(Error::ShiftOverflow {
            ctx: "requantize accumulated shift",
            shift: k_total,
            limit: 110,
        });
    }
    let range = (vmax - vmin) as u128;
    let shifted_levels = (n as u128) << (k_total + 8);
    if shifted_levels < range {
        // The output step would exceed the 8-bit dyadic operating range.
        return Err(Error::ScaleOutOfRange {
            num: (range >> k_total).min(u64::MAX as u128) as u64,
            den: n as u64,
        });
    }
    let mut k_y = floor_log2_u128(shifted_levels / range)?;
    let m_of = |k_y: u32| -> u128 {
        if k_total >= k_y {
            round_div_u128(range, (n as u128) << (k_total - k_y))
        } else {
            // Negative effective shift: shift the range left instead.
            round_div_u128(range << (k_y - k_total), n as u128)
        }
    };
    let mut m_y = m_of(k_y);
    if m_y > 255 {
        k_y -= 1;
        m_y = m_of(k_y);
    }
    let zero_point = round_div_i128(-vmin * n, (vmax - vmin) as i128) as i64;
    for (o, &v) in out.iter_mut().zip(values) {
        *o = round_div_i128((v - vmin) * n, (vmax - vmin) as i128) as i64;
    }
    Ok(SliceQuant {
        scale: DyadicScale {
            m: m_y as u32,
            k: k_y,
        },
        zero_point,
        degenerate: false,
    })
}

/// Fold the accumulator into value-mantissas `v = P · m1' · m2'` with the
/// uniform scale `1 / 2^(K1+K2)`.
fn folded_values(
    acc: &IntAccumulator,
    m1: &[i64],
    axis1: Granularity,
    m2: &[i64],
    axis2: Granularity,
) -> Result<Vec<i128>> {
    let [r, c] = acc.shape;
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        let f1 = match axis1 {
            Granularity::PerToken => m1[i],
            _ => m1[0],
        };
        for j in 0..c {
            let f2 = match axis2 {
                Granularity::PerChannel(_) => m2[j],
                _ => m2[0],
            };
            v.push(acc.data[i * c + j] as i128 * f1 as i128 * f2 as i128);
        }
    }
    Ok(v)
}

fn assemble(
    shape: Vec<usize>,
    out_bits: u8,
    data: Vec<i64>,
    slices: Vec<SliceQuant>,
    axis: Granularity,
) -> Result<QuantTensor> {
    let degenerate = slices.iter().any(|s| s.degenerate);
    let scales = slices.iter().map(|s| s.scale).collect();
    let zps = slices.iter().map(|s| s.zero_point).collect();
    QuantTensor::new(shape, data, out_bits, scales, zps, axis, degenerate)
}

/// Requantize a matrix of value-mantissas per row or whole-tensor.
fn requantize_values(
    shape: Vec<usize>,
    values: &[i128],
    rows: usize,
    cols: usize,
    k_total: u32,
    out_bits: u8,
    granularity: Granularity,
) -> Result<QuantTensor> {
    let mut data = vec![0i64; values.len()];
    let slices = match granularity {
        Granularity::PerTensor => {
            vec![requantize_slice(values, k_total, out_bits, &mut data)?]
        }
        Granularity::PerToken => {
            let mut s = Vec::with_capacity(rows);
            for i in 0..rows {
                s.push(requantize_slice(
                    &values[i * cols..(i + 1) * cols],
                    k_total,
                    out_bits,
                    &mut data[i * cols..(i + 1) * cols],
                )?);
            }
            s
        }
        Granularity::PerChannel(_) => {
            return Err(Error::InvalidGranularity(
                "dynamic requantization is per-tensor or per-token".into(),
            ))
        }
    };
    assemble(shape, out_bits, data, slices, granularity)
}

/// Integer matmul with dynamic closed-form output quantization.
pub fn di_matmul(
    x1: &QuantTensor,
    x2: &QuantTensor,
    out_bits: u8,
    granularity: Granularity,
) -> Result<QuantTensor> {
    if ![4, 6, 8].contains(&out_bits) {
        return Err(Error::InvalidBits(out_bits));
    }
    let acc = accumulate(x1, x2)?;
    let (m1, k1) = aligned_mantissas(x1)?;
    let (m2, k2) = aligned_mantissas(x2)?;
    let values = folded_values(&acc, &m1, x1.axis(), &m2, x2.axis())?;
    let k_total = k1 + k2;
    let [r, c] = acc.shape;
    requantize_values(vec![r, c], &values, r, c, k_total, out_bits, granularity)
}

/// Integer matmul returning the exact folded accumulator as a wide tensor
/// with unit mantissa and shift `K1 + K2`. Used where the producing range
/// should reach the consumer unquantized (attention scores feeding the
/// clipped softmax).
pub fn di_matmul_raw(x1: &QuantTensor, x2: &QuantTensor) -> Result<QuantTensor> {
    let acc = accumulate(x1, x2)?;
    let (m1, k1) = aligned_mantissas(x1)?;
    let (m2, k2) = aligned_mantissas(x2)?;
    let k_total = k1 + k2;
    if k_total > 60 {
        return Err(Error::OutputShiftOverflow {
            ctx: "di_matmul_raw",
            k: k_total,
        });
    }
    let values = folded_values(&acc, &m1, x1.axis(), &m2, x2.axis())?;
    let data: Vec<i64> = values
        .iter()
        .map(|&v| {
            i64::try_from(v).map_err(|_| Error::OutputShiftOverflow {
                ctx: "di_matmul_raw value overflow",
                k: k_total,
            })
        })
        .collect::<Result<_>>()?;
    let [r, c] = acc.shape;
    QuantTensor::new(
        vec![r, c],
        data,
        WIDE_BITS,
        vec![DyadicScale { m: 1, k: k_total }],
        vec![0],
        Granularity::PerTensor,
        false,
    )
}

/// Value-mantissa view of any quantized tensor: `(v, K)` with
/// `value[i] = v[i] / 2^K`.
pub(crate) fn to_value_mantissas(t: &QuantTensor) -> Result<(Vec<i128>, u32)> {
    let (m, k) = aligned_mantissas(t)?;
    let (rows, cols) = (t.rows(), t.cols());
    let mut v = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            v.push(t.centered(i, j) as i128 * m[t.group_of(i, j)] as i128);
        }
    }
    Ok((v, k))
}

/// Dynamically requantize any tensor (wide or affine) to `out_bits`.
pub fn requantize(t: &QuantTensor, out_bits: u8, granularity: Granularity) -> Result<QuantTensor> {
    if ![4, 6, 8].contains(&out_bits) {
        return Err(Error::InvalidBits(out_bits));
    }
    let (values, k_total) = to_value_mantissas(t)?;
    requantize_values(
        t.shape().to_vec(),
        &values,
        t.rows(),
        t.cols(),
        k_total,
        out_bits,
        granularity,
    )
}

/// Integer residual addition: both addends are aligned onto the finer of
/// the two scale grids and summed exactly into a wide tensor.
pub fn residual_add(a: &QuantTensor, b: &QuantTensor) -> Result<QuantTensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (va, ka) = to_value_mantissas(a)?;
    let (vb, kb) = to_value_mantissas(b)?;
    let k = ka.max(kb);
    if k - ka.min(kb) > 32 {
        return Err(Error::ShiftOverflow {
            ctx: "residual scale alignment",
            shift: k - ka.min(kb),
            limit: 32,
        });
    }
    let data: Vec<i64> = va
        .iter()
        .zip(&vb)
        .map(|(&x, &y)| {
            let s = (x << (k - ka)) + (y << (k - kb));
            i64::try_from(s).map_err(|_| Error::OutputShiftOverflow {
                ctx: "residual_add value overflow",
                k,
            })
        })
        .collect::<Result<_>>()?;
    QuantTensor::new(
        a.shape().to_vec(),
        data,
        WIDE_BITS,
        vec![DyadicScale { m: 1, k }],
        vec![0],
        Granularity::PerTensor,
        false,
    )
}

/// Add a per-channel bias held as integer mantissas `b / 2^k_bias` onto a
/// wide unit-mantissa tensor, shifting onto the tensor's grid.
pub fn add_channel_bias(t: &QuantTensor, mantissas: &[i64], k_bias: u32) -> Result<QuantTensor> {
    if !t.is_wide() || t.scales().len() != 1 || t.scales()[0].m != 1 {
        return Err(Error::InvalidGranularity(
            "bias add expects a wide unit-mantissa tensor".into(),
        ));
    }
    if mantissas.len() != t.cols() {
        return Err(Error::ShapeMismatch(format!(
            "bias length {} vs {} columns",
            mantissas.len(),
            t.cols()
        )));
    }
    let k = t.scales()[0].k;
    let cols = t.cols();
    let data: Vec<i64> = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = mantissas[i % cols] as i128;
            let shifted = if k >= k_bias {
                b << (k - k_bias)
            } else {
                round_div_i128(b, 1i128 << (k_bias - k))
            };
            v + shifted as i64
        })
        .collect();
    QuantTensor::new(
        t.shape().to_vec(),
        data,
        WIDE_BITS,
        vec![DyadicScale { m: 1, k }],
        vec![0],
        Granularity::PerTensor,
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

    fn uniform(state: &mut u64, lo: f32, hi: f32) -> f32 {
        let u = (splitmix(state) >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u as f32
    }

    fn random_tensor(state: &mut u64, r: usize, c: usize, amp: f32) -> FloatTensor {
        let data: Vec<f32> = (0..r * c).map(|_| uniform(state, -amp, amp)).collect();
        FloatTensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn one_by_one_exact_product() {
        let x1 = QuantTensor::new(
            vec![1, 1],
            vec![2],
            8,
            vec![DyadicScale::ONE],
            vec![0],
            Granularity::PerTensor,
            false,
        )
        .unwrap();
        let x2 = QuantTensor::new(
            vec![1, 1],
            vec![3],
            8,
            vec![DyadicScale::ONE],
            vec![0],
            Granularity::PerTensor,
            false,
        )
        .unwrap();
        let y = di_matmul(&x1, &x2, 8, Granularity::PerTensor).unwrap();
        assert!(y.is_degenerate());
        let out = dequantize(&y);
        assert_eq!(out.as_slice(), &[6.0]);
    }

    #[test]
    fn zero_point_annihilation() {
        let x1 = QuantTensor::new(
            vec![2, 2],
            vec![7, 7, 7, 7],
            8,
            vec![DyadicScale { m: 128, k: 8 }],
            vec![7],
            Granularity::PerTensor,
            false,
        )
        .unwrap();
        let x2 = QuantTensor::new(
            vec![2, 2],
            vec![1, 2, 3, 4],
            8,
            vec![DyadicScale { m: 200, k: 9 }],
            vec![0],
            Granularity::PerTensor,
            false,
        )
        .unwrap();
        let y = di_matmul(&x1, &x2, 8, Granularity::PerTensor).unwrap();
        assert!(y.is_degenerate());
        assert!(dequantize(&y).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulator_matches_wide_oracle() {
        let mut st = 7u64;
        for _ in 0..20 {
            let a = random_tensor(&mut st, 5, 9, 4.0);
            let b = random_tensor(&mut st, 9, 4, 4.0);
            let qa = quantize(&a, 8, Granularity::PerToken).unwrap();
            let qb = quantize(&b, 8, Granularity::PerChannel(1)).unwrap();
            let acc = accumulate(&qa, &qb).unwrap();
            for i in 0..5 {
                for j in 0..4 {
                    let mut want: i128 = 0;
                    for l in 0..9 {
                        want += qa.centered(i, l) as i128 * qb.centered(l, j) as i128;
                    }
                    assert_eq!(acc.data[i * 4 + j] as i128, want);
                }
            }
        }
    }

    /// Element-wise requantization bound against a double-precision oracle.
    fn check_instance(state: &mut u64, granularity: Granularity) {
        let a = random_tensor(state, 8, 16, 3.0);
        let b = random_tensor(state, 16, 8, 2.0);
        let qa = quantize(&a, 8, Granularity::PerToken).unwrap();
        let qb = quantize(&b, 8, Granularity::PerChannel(1)).unwrap();
        let y = di_matmul(&qa, &qb, 8, granularity).unwrap();
        let oracle = dequantize(&qa).matmul(&dequantize(&qb)).unwrap();
        let got = dequantize(&y);
        for i in 0..8 {
            // Value range of the row (or tensor) in the oracle.
            let idx: Vec<usize> = match granularity {
                Granularity::PerToken => (i * 8..(i + 1) * 8).collect(),
                _ => (0..64).collect(),
            };
            let vals: Vec<f64> = idx.iter().map(|&t| oracle.as_slice()[t] as f64).collect();
            let vrange = vals.iter().cloned().fold(f64::MIN, f64::max)
                - vals.iter().cloned().fold(f64::MAX, f64::min);
            let g = match granularity {
                Granularity::PerToken => i,
                _ => 0,
            };
            let s_y = y.scales()[g].value();
            let bound = s_y + 2f64.powi(-8) * vrange + 1e-12;
            for j in 0..8 {
                let d = (got.as_slice()[i * 8 + j] as f64 - oracle.as_slice()[i * 8 + j] as f64)
                    .abs();
                assert!(d <= bound, "err {d} > bound {bound}");
            }
        }
    }

    #[test]
    fn requantization_bound_random_instances() {
        let mut st = 42u64;
        for _ in 0..50 {
            check_instance(&mut st, Granularity::PerTensor);
            check_instance(&mut st, Granularity::PerToken);
        }
    }

    #[test]
    fn per_token_isolates_row_magnitudes() {
        let mut st = 3u64;
        let mut a = random_tensor(&mut st, 2, 16, 1.0);
        for v in &mut a.as_mut_slice()[16..] {
            *v *= 100.0;
        }
        let b = random_tensor(&mut st, 16, 8, 1.0);
        let qa = quantize(&a, 8, Granularity::PerToken).unwrap();
        let qb = quantize(&b, 8, Granularity::PerChannel(1)).unwrap();
        let oracle = dequantize(&qa).matmul(&dequantize(&qb)).unwrap();

        let yt = di_matmul(&qa, &qb, 8, Granularity::PerToken).unwrap();
        let yg = di_matmul(&qa, &qb, 8, Granularity::PerTensor).unwrap();
        assert!(yt.scales()[1].value() > yt.scales()[0].value() * 10.0);
        let mse_t = dequantize(&yt).mse(&oracle);
        let mse_g = dequantize(&yg).mse(&oracle);
        assert!(mse_t < mse_g);
    }

    #[test]
    fn full_range_is_used() {
        let mut st = 11u64;
        let a = random_tensor(&mut st, 4, 8, 2.0);
        let b = random_tensor(&mut st, 8, 4, 2.0);
        let qa = quantize(&a, 8, Granularity::PerToken).unwrap();
        let qb = quantize(&b, 8, Granularity::PerChannel(1)).unwrap();
        let y = di_matmul(&qa, &qb, 8, Granularity::PerToken).unwrap();
        for i in 0..4 {
            let row = &y.data()[i * 4..(i + 1) * 4];
            assert_eq!(*row.iter().min().unwrap(), 0);
            assert_eq!(*row.iter().max().unwrap(), 255);
        }
        // One closed-form solve per row.
        assert_eq!(y.scales().len(), 4);
    }

    #[test]
    fn requantize_and_residual_roundtrip() {
        let mut st = 19u64;
        let a = random_tensor(&mut st, 4, 6, 2.0);
        let b = random_tensor(&mut st, 4, 6, 2.0);
        let qa = quantize(&a, 8, Granularity::PerToken).unwrap();
        let qb = quantize(&b, 8, Granularity::PerToken).unwrap();
        let sum = residual_add(&qa, &qb).unwrap();
        let want: Vec<f32> = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x + y)
            .collect();
        let wantt = FloatTensor::new(vec![4, 6], want).unwrap();
        // The wide sum is exact up to the two inputs' quantization error.
        assert!(dequantize(&sum).max_abs_diff(&wantt) < 4.0 / 255.0 * 2.5);
        let rq = requantize(&sum, 8, Granularity::PerToken).unwrap();
        assert!(dequantize(&rq).max_abs_diff(&dequantize(&sum)) < 0.05);
    }

    #[test]
    fn raw_matmul_dequantizes_exactly() {
        let mut st = 23u64;
        let a = random_tensor(&mut st, 3, 5, 2.0);
        let b = random_tensor(&mut st, 5, 3, 2.0);
        let qa = quantize(&a, 8, Granularity::PerToken).unwrap();
        let qb = quantize(&b, 8, Granularity::PerChannel(1)).unwrap();
        let raw = di_matmul_raw(&qa, &qb).unwrap();
        let oracle = dequantize(&qa).matmul(&dequantize(&qb)).unwrap();
        // Raw output re-scales the exact accumulator: only f32 casting noise.
        assert!(dequantize(&raw).max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn bias_add_shifts_onto_grid() {
        let t = QuantTensor::new(
            vec![2, 2],
            vec![0, 0, 0, 0],
            WIDE_BITS,
            vec![DyadicScale { m: 1, k: 8 }],
            vec![0],
            Granularity::PerTensor,
            false,
        )
        .unwrap();
        let biased = add_channel_bias(&t, &[256, -512], 4).unwrap();
        // b/2^4 shifted onto k=8: 256 << 4 = 4096 → 16.0, -512 << 4 → -32.0
        let out = dequantize(&biased);
        assert_eq!(out.as_slice(), &[16.0, -32.0, 16.0, -32.0]);
    }
}
