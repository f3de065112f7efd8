//! Tensor containers and uniform affine quantization.
//!
//! Quantized storage is unsigned with an explicit zero-point; scales are
//! dyadic rationals `m / 2^k` so that all downstream arithmetic stays in
//! integers. Fitted scales keep `m, k` within 8 bits; composite scales
//! produced by operator output rules (e.g. the gated-unit product) may
//! carry wider mantissas and shifts.

use crate::error::{Error, Result};
use crate::intmath::fit_dyadic;
use crate::tensor::FloatTensor;
use crate::trace;
use serde::{Deserialize, Serialize};

/// A non-negative rational `m / 2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicScale {
    pub m: u32,
    pub k: u32,
}

impl DyadicScale {
    pub const ZERO: DyadicScale = DyadicScale { m: 0, k: 0 };
    pub const ONE: DyadicScale = DyadicScale { m: 1, k: 0 };

    pub fn value(self) -> f64 {
        self.m as f64 / 2f64.powi(self.k as i32)
    }

    pub fn is_zero(self) -> bool {
        self.m == 0
    }
}

/// Scale/zero-point granularity. `PerChannel` carries the axis index of
/// the channel dimension (the trailing axis for activations and the
/// output axis for weights).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel(usize),
}

/// Integer tensor with dyadic scale(s) and zero-point(s).
///
/// `bits` in {4, 6, 8} marks affine storage: values lie in
/// [0, 2^bits - 1]. `bits == WIDE_BITS` marks a wide intermediate
/// (signed values, zero-points allowed for bias folding).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
    bits: u8,
    scales: Vec<DyadicScale>,
    zero_points: Vec<i64>,
    axis: Granularity,
    degenerate: bool,
}

/// Marker bit-width for wide integer intermediates.
pub const WIDE_BITS: u8 = 32;

impl QuantTensor {
    pub fn new(
        shape: Vec<usize>,
        data: Vec<i64>,
        bits: u8,
        scales: Vec<DyadicScale>,
        zero_points: Vec<i64>,
        axis: Granularity,
        degenerate: bool,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::EmptyTensor(format!("shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        if bits != WIDE_BITS && ![4, 6, 8].contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        let t = Self {
            shape,
            data,
            bits,
            scales,
            zero_points,
            axis,
            degenerate,
        };
        let groups = t.group_count()?;
        if t.scales.len() != groups || t.zero_points.len() != groups {
            return Err(Error::ShapeMismatch(format!(
                "{groups} groups want {groups} scales/zero-points, got {}/{}",
                t.scales.len(),
                t.zero_points.len()
            )));
        }
        if t.bits != WIDE_BITS {
            let max = (1i64 << t.bits) - 1;
            if t.data.iter().any(|&v| v < 0 || v > max) {
                return Err(Error::ShapeMismatch(format!(
                    "affine data out of [0, {max}]"
                )));
            }
            if t.scales.iter().any(|s| s.m > 255 || s.k > 255) {
                return Err(Error::InvalidGranularity(
                    "affine scales must fit 8-bit dyadics".into(),
                ));
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_wide(&self) -> bool {
        self.bits == WIDE_BITS
    }

    pub fn axis(&self) -> Granularity {
        self.axis
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn scales(&self) -> &[DyadicScale] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn group_count(&self) -> Result<usize> {
        match self.axis {
            Granularity::PerTensor => Ok(1),
            Granularity::PerToken => Ok(self.rows()),
            Granularity::PerChannel(ax) => {
                if ax + 1 != self.shape.len() {
                    return Err(Error::InvalidGranularity(format!(
                        "per-channel axis {ax} must be the trailing axis of {:?}",
                        self.shape
                    )));
                }
                Ok(self.cols())
            }
        }
    }

    /// Scale group index for element (row, col).
    #[inline]
    pub fn group_of(&self, row: usize, col: usize) -> usize {
        match self.axis {
            Granularity::PerTensor => 0,
            Granularity::PerToken => row,
            Granularity::PerChannel(_) => col,
        }
    }

    #[inline]
    pub fn scale_at(&self, row: usize, col: usize) -> DyadicScale {
        self.scales[self.group_of(row, col)]
    }

    #[inline]
    pub fn zero_point_at(&self, row: usize, col: usize) -> i64 {
        self.zero_points[self.group_of(row, col)]
    }

    /// Zero-point-centered value at (row, col).
    #[inline]
    pub fn centered(&self, row: usize, col: usize) -> i64 {
        self.data[row * self.cols() + col] - self.zero_point_at(row, col)
    }

    /// 2-D transpose. Per-token scales become per-channel and vice versa.
    pub fn transpose2(&self) -> Result<QuantTensor> {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0i64; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        let axis = match self.axis {
            Granularity::PerTensor => Granularity::PerTensor,
            Granularity::PerToken => Granularity::PerChannel(1),
            Granularity::PerChannel(_) => Granularity::PerToken,
        };
        QuantTensor::new(
            vec![c, r],
            data,
            self.bits,
            self.scales.clone(),
            self.zero_points.clone(),
            axis,
            self.degenerate,
        )
    }

    /// Extract columns [start, start+len) keeping row-wise metadata.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<QuantTensor> {
        let (r, c) = (self.rows(), self.cols());
        if start + len > c {
            return Err(Error::ShapeMismatch(format!(
                "column slice {start}+{len} out of {c}"
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        let (scales, zero_points) = match self.axis {
            Granularity::PerChannel(_) => (
                self.scales[start..start + len].to_vec(),
                self.zero_points[start..start + len].to_vec(),
            ),
            _ => (self.scales.clone(), self.zero_points.clone()),
        };
        QuantTensor::new(
            vec![r, len],
            data,
            self.bits,
            scales,
            zero_points,
            self.axis,
            self.degenerate,
        )
    }
}

fn round_f64(x: f64) -> i64 {
    x.round() as i64
}

/// Visit each element index of group `g` for a 2-D view under `axis`.
#[inline]
fn for_group(rows: usize, cols: usize, axis: Granularity, g: usize, mut f: impl FnMut(usize)) {
    match axis {
        Granularity::PerTensor => (0..rows * cols).for_each(f),
        Granularity::PerToken => (g * cols..(g + 1) * cols).for_each(f),
        Granularity::PerChannel(_) => {
            let mut i = g;
            for _ in 0..rows {
                f(i);
                i += cols;
            }
        }
    }
}

/// Uniform affine quantization to `bits` with the given granularity.
///
/// The float scale `(max - min) / (2^bits - 1)` is snapped to the nearest
/// 8-bit dyadic for storage; data is quantized against the float scale.
/// Degenerate groups (zero range) map every value to the zero-point with
/// a zero scale mantissa.
pub fn quantize(x: &FloatTensor, bits: u8, axis: Granularity) -> Result<QuantTensor> {
    if ![4, 6, 8].contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let groups = match axis {
        Granularity::PerTensor => 1,
        Granularity::PerToken => rows,
        Granularity::PerChannel(ax) => {
            if ax + 1 != x.shape().len() {
                return Err(Error::InvalidGranularity(format!(
                    "per-channel axis {ax} must be the trailing axis of {:?}",
                    x.shape()
                )));
            }
            cols
        }
    };
    let n_levels = (1i64 << bits) - 1;
    let mut data = vec![0i64; x.len()];
    let mut scales = Vec::with_capacity(groups);
    let mut zero_points = Vec::with_capacity(groups);
    let mut degenerate = false;
    trace::count_float(2 * x.len());

    let xs = x.as_slice();
    for g in 0..groups {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for_group(rows, cols, axis, g, |i| {
            let v = xs[i] as f64;
            lo = lo.min(v);
            hi = hi.max(v);
        });
        if hi <= lo {
            degenerate = true;
            scales.push(DyadicScale::ZERO);
            zero_points.push(0);
            continue;
        }
        let step = (hi - lo) / n_levels as f64;
        let scale = fit_dyadic(round_f64(step * 2f64.powi(40)) as u64, 1u64 << 40)?;
        if scale.is_zero() {
            degenerate = true;
        }
        let zp = round_f64(-lo / step);
        for_group(rows, cols, axis, g, |i| {
            let q = round_f64(xs[i] as f64 / step) + zp;
            data[i] = q.clamp(0, n_levels);
        });
        scales.push(scale);
        zero_points.push(zp);
    }
    QuantTensor::new(
        x.shape().to_vec(),
        data,
        bits,
        scales,
        zero_points,
        axis,
        degenerate,
    )
}

/// Affine dequantization `(data - zp) · m / 2^k`, broadcast along the
/// granularity axis.
pub fn dequantize(q: &QuantTensor) -> FloatTensor {
    let (rows, cols) = (q.rows(), q.cols());
    trace::count_float(q.data().len());
    let mut out = vec![0.0f32; q.data().len()];
    for r in 0..rows {
        for c in 0..cols {
            let s = q.scale_at(r, c);
            out[r * cols + c] = (q.centered(r, c) as f64 * s.value()) as f32;
        }
    }
    FloatTensor::new(q.shape().to_vec(), out).expect("finite by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ft(shape: Vec<usize>, data: Vec<f32>) -> FloatTensor {
        FloatTensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_ramp_full_range() {
        let q = quantize(&ft(vec![3], vec![0.0, 0.5, 1.0]), 8, Granularity::PerTensor).unwrap();
        assert_eq!(q.data(), &[0, 128, 255]);
        assert_eq!(q.zero_points(), &[0]);
        let s = q.scales()[0].value();
        let want = 1.0 / 255.0;
        assert!((s - want).abs() / want <= 2f64.powi(-8));
        assert!(!q.is_degenerate());
    }

    #[test]
    fn constant_tensor_is_degenerate() {
        let q = quantize(&ft(vec![4], vec![0.0; 4]), 8, Granularity::PerTensor).unwrap();
        assert!(q.is_degenerate());
        assert_eq!(q.data(), &[0, 0, 0, 0]);
        assert!(q.scales()[0].is_zero());
        let back = dequantize(&q);
        assert_eq!(back.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn dequantize_direct_formula() {
        let q = QuantTensor::new(
            vec![3],
            vec![0, 128, 255],
            8,
            vec![DyadicScale { m: 1, k: 8 }],
            vec![0],
            Granularity::PerTensor,
            false,
        )
        .unwrap();
        let x = dequantize(&q);
        assert_eq!(x.as_slice(), &[0.0, 0.5, 0.99609375]);
    }

    #[test]
    fn random_range_roundtrip_bound() {
        // Uniform values in [-3, 3]: symmetric range keeps the worst-case
        // |q - zp| near half range, so the dyadic-fit slack stays within
        // one 2^-8 fraction of a step.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut vals = Vec::with_capacity(1000);
        for _ in 0..998 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vals.push(((state >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0) as f32);
        }
        vals.push(-3.0);
        vals.push(3.0);
        let x = ft(vec![1000], vals);
        let q = quantize(&x, 8, Granularity::PerTensor).unwrap();
        let back = dequantize(&q);
        let bound = 6.0 / 255.0 * (1.0 + 2f64.powi(-8));
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((*a as f64 - *b as f64).abs() <= bound);
        }
    }

    #[test]
    fn per_token_groups() {
        let x = ft(vec![2, 2], vec![0.0, 1.0, 0.0, 100.0]);
        let q = quantize(&x, 8, Granularity::PerToken).unwrap();
        assert_eq!(q.scales().len(), 2);
        assert!(q.scales()[1].value() > q.scales()[0].value() * 50.0);
    }

    #[test]
    fn transpose_swaps_axis() {
        let x = ft(vec![2, 3], vec![0., 1., 2., 0., 10., 20.]);
        let q = quantize(&x, 8, Granularity::PerToken).unwrap();
        let t = q.transpose2().unwrap();
        assert_eq!(t.axis(), Granularity::PerChannel(1));
        assert_eq!(t.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(t.data()[j * 2 + i], q.data()[i * 3 + j]);
                assert_eq!(t.scale_at(j, i), q.scale_at(i, j));
            }
        }
    }

    fn arb_tensor() -> impl Strategy<Value = FloatTensor> {
        (2usize..6, 2usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-100.0f32..100.0, r * c)
                .prop_map(move |v| ft(vec![r, c], v))
        })
    }

    /// Larger tensors with enough non-outlier mass for MSE comparisons.
    fn arb_wide_tensor() -> impl Strategy<Value = FloatTensor> {
        (4usize..8, 8usize..16).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-100.0f32..100.0, r * c)
                .prop_map(move |v| ft(vec![r, c], v))
        })
    }

    proptest! {
        #[test]
        fn roundtrip_within_exact_budget(x in arb_tensor(), bits in prop::sample::select(vec![4u8, 6, 8])) {
            let q = quantize(&x, bits, Granularity::PerTensor).unwrap();
            prop_assume!(!q.is_degenerate());
            let back = dequantize(&q);
            let s = q.scales()[0];
            // Exact per-element budget: half a float step of rounding plus
            // the dyadic-fit drift |q - zp| · ulp(m)/2^k, capped at a step.
            let ulp = 0.5 / 2f64.powi(s.k as i32);
            let n = (1i64 << bits) - 1;
            let lo = x.as_slice().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = x.as_slice().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let step = (hi - lo) / n as f64;
            for (i, (a, b)) in x.as_slice().iter().zip(back.as_slice()).enumerate() {
                let qv = (q.data()[i] - q.zero_points()[0]).unsigned_abs() as f64;
                let budget = step * 0.5 + qv * ulp + 1e-9;
                prop_assert!((*a as f64 - *b as f64).abs() <= budget);
            }
        }

        #[test]
        fn quantize_idempotent(x in arb_tensor(), bits in prop::sample::select(vec![4u8, 6, 8])) {
            let q1 = quantize(&x, bits, Granularity::PerTensor).unwrap();
            prop_assume!(!q1.is_degenerate());
            let q2 = quantize(&dequantize(&q1), bits, Granularity::PerTensor).unwrap();
            prop_assert_eq!(q1.data(), q2.data());
            prop_assert_eq!(q1.scales(), q2.scales());
            prop_assert_eq!(q1.zero_points(), q2.zero_points());
        }

        #[test]
        fn per_token_error_within_per_tensor_envelope(
            x in arb_tensor(),
            bits in prop::sample::select(vec![4u8, 6, 8]),
        ) {
            // Per-token errors stay inside the per-tensor worst-case
            // envelope: half a step of rounding plus a full step of
            // dyadic-fit drift against the coarser global step.
            let qt = quantize(&x, bits, Granularity::PerToken).unwrap();
            let qg = quantize(&x, bits, Granularity::PerTensor).unwrap();
            prop_assume!(!qg.is_degenerate());
            let s_g = qg.scales()[0].value();
            let err = dequantize(&qt).max_abs_diff(&x);
            prop_assert!(err <= 1.5 * s_g + 1e-9);
        }

        #[test]
        fn per_token_mse_not_worse_on_token_outliers(
            x in arb_wide_tensor(),
            bits in prop::sample::select(vec![4u8, 6, 8]),
        ) {
            // One row 50x louder than the rest: the global grid coarsens
            // every other row, so the per-token MSE ordering is strict.
            let mut y = x.clone();
            let c = y.cols();
            for v in &mut y.as_mut_slice()[c..] {
                *v /= 50.0;
            }
            let qt = quantize(&y, bits, Granularity::PerToken).unwrap();
            let qg = quantize(&y, bits, Granularity::PerTensor).unwrap();
            prop_assume!(!qt.is_degenerate() && !qg.is_degenerate());
            let mt = dequantize(&qt).mse(&y);
            let mg = dequantize(&qg).mse(&y);
            prop_assert!(mt <= mg + 1e-12);
        }
    }
}
