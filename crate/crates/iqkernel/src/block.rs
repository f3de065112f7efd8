//! Toy decoder block (RMSNorm → causal attention → residual → RMSNorm →
//! gated FFN → residual) with three forward paths: float reference,
//! fake-quantized float (for reconstruction), and fully integer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fsbr::{apply_smoothing, fsbr_reconstruct, ReconstructionConfig, ReconstructionResult, SmoothingSet};
use crate::intmath::round_div_i128;
use crate::matmul::{
    add_channel_bias, di_matmul, di_matmul_raw, requantize, residual_add, to_value_mantissas,
};
use crate::nonlinear::{
    di_clipped_softmax, di_rmsnorm_prepared, di_swiglu, ClipConfig, IntNormParams, NormParams,
    SigmaPrimeSpec,
};
use crate::quant::{dequantize, quantize, DyadicScale, Granularity, QuantTensor, WIDE_BITS};
use crate::tensor::FloatTensor;
use crate::trace;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl BlockDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::ShapeMismatch("zero block dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Weight/activation bit-widths (e.g. W8A8, W4A4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub wbits: u8,
    pub abits: u8,
}

impl QuantConfig {
    pub fn new(wbits: u8, abits: u8) -> Result<Self> {
        if ![4, 6, 8].contains(&wbits) {
            return Err(Error::InvalidBits(wbits));
        }
        if ![4, 6, 8].contains(&abits) {
            return Err(Error::InvalidBits(abits));
        }
        Ok(QuantConfig { wbits, abits })
    }
}

/// Float block parameters. Weights are stored (input, output); biases
/// exist only on the gate/up projections, matching the gated-unit form.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub dims: BlockDims,
    pub w_q: FloatTensor,
    pub w_k: FloatTensor,
    pub w_v: FloatTensor,
    pub w_o: FloatTensor,
    pub w_gate: FloatTensor,
    pub b_gate: Vec<f32>,
    pub w_up: FloatTensor,
    pub b_up: Vec<f32>,
    pub w_down: FloatTensor,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl BlockWeights {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = self.dims.d_model;
        let f = self.dims.d_ffn;
        for (name, w, r, c) in [
            ("w_q", &self.w_q, d, d),
            ("w_k", &self.w_k, d, d),
            ("w_v", &self.w_v, d, d),
            ("w_o", &self.w_o, d, d),
            ("w_gate", &self.w_gate, d, f),
            ("w_up", &self.w_up, d, f),
            ("w_down", &self.w_down, f, d),
        ] {
            if w.rows() != r || w.cols() != c {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}x{}, want {r}x{c}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        if self.b_gate.len() != f || self.b_up.len() != f {
            return Err(Error::ShapeMismatch("bias length".into()));
        }
        if self.norm1.gamma.len() != d || self.norm2.gamma.len() != d {
            return Err(Error::ShapeMismatch("norm gamma length".into()));
        }
        Ok(())
    }
}

fn rmsnorm_f(x: &FloatTensor, params: &NormParams) -> FloatTensor {
    let (r, c) = (x.rows(), x.cols());
    trace::count_float(2 * r * c);
    let mut out = vec![0f32; r * c];
    for i in 0..r {
        let row = x.row(i);
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / c as f64;
        let rms = ms.sqrt();
        for j in 0..c {
            out[i * c + j] = if rms == 0.0 {
                0.0
            } else {
                (row[j] as f64 / rms * params.gamma[j] as f64) as f32
            };
        }
    }
    FloatTensor::new(x.shape().to_vec(), out).expect("finite")
}

/// Row softmax with a causal mask (column j > row i excluded).
fn causal_softmax_f(scores: &FloatTensor) -> FloatTensor {
    let (r, c) = (scores.rows(), scores.cols());
    trace::count_float(3 * r * c);
    let mut out = vec![0f32; r * c];
    for i in 0..r {
        let row = scores.row(i);
        let lim = (i + 1).min(c);
        let m = row[..lim].iter().cloned().fold(f32::MIN, f32::max);
        let mut sum = 0f64;
        let mut e = vec![0f64; lim];
        for j in 0..lim {
            e[j] = ((row[j] - m) as f64).exp();
            sum += e[j];
        }
        for j in 0..lim {
            out[i * c + j] = (e[j] / sum) as f32;
        }
    }
    FloatTensor::new(scores.shape().to_vec(), out).expect("finite")
}

fn add_bias(x: &FloatTensor, b: &[f32]) -> FloatTensor {
    trace::count_float(x.len());
    let c = x.cols();
    let data: Vec<f32> = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[i % c])
        .collect();
    FloatTensor::new(x.shape().to_vec(), data).expect("finite")
}

fn silu_gate(g: &FloatTensor, u: &FloatTensor, sigma_div: &[f32]) -> FloatTensor {
    trace::count_float(4 * g.len());
    let c = g.cols();
    let data: Vec<f32> = g
        .as_slice()
        .iter()
        .zip(u.as_slice())
        .enumerate()
        .map(|(i, (&gv, &uv))| {
            let a = gv as f64 / sigma_div[i % c] as f64;
            let sig = 1.0 / (1.0 + (-a).exp());
            (gv as f64 * sig * uv as f64) as f32
        })
        .collect();
    FloatTensor::new(g.shape().to_vec(), data).expect("finite")
}

/// Attention with per-head slicing over already-projected q/k/v.
fn attention_f(
    q: &FloatTensor,
    k: &FloatTensor,
    v: &FloatTensor,
    dims: &BlockDims,
) -> Result<FloatTensor> {
    let (t, d) = (q.rows(), q.cols());
    let dh = dims.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0f32; t * d];
    for h in 0..dims.n_heads {
        let sel = |m: &FloatTensor, i: usize, j: usize| m.as_slice()[i * d + h * dh + j];
        let mut scores = vec![0f32; t * t];
        trace::count_float(t * t * dh);
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0f64;
                for e in 0..dh {
                    acc += sel(q, i, e) as f64 * sel(k, j, e) as f64;
                }
                scores[i * t + j] = (acc * inv_sqrt) as f32;
            }
        }
        let probs = causal_softmax_f(&FloatTensor::new(vec![t, t], scores)?);
        trace::count_float(t * t * dh);
        for i in 0..t {
            for e in 0..dh {
                let mut acc = 0f64;
                for j in 0..t {
                    acc += probs.as_slice()[i * t + j] as f64 * sel(v, j, e) as f64;
                }
                ctx[i * d + h * dh + e] = acc as f32;
            }
        }
    }
    FloatTensor::new(vec![t, d], ctx)
}

/// Reference float forward pass.
pub fn float_forward(block: &BlockWeights, x: &FloatTensor) -> Result<FloatTensor> {
    Ok(float_probe(block, x)?.output)
}

/// Float forward with per-channel sigmoid divisors (the folded block's
/// semantics: σ'(x) = σ(x ⊘ s)).
pub fn float_forward_sigma(
    block: &BlockWeights,
    sigma_div: &[f32],
    x: &FloatTensor,
) -> Result<FloatTensor> {
    Ok(float_probe_sigma(block, sigma_div, x)?.output)
}

/// Intermediate activations captured on the float path.
pub struct FloatProbe {
    pub norm1_out: FloatTensor,
    pub norm2_out: FloatTensor,
    pub gate_preact: FloatTensor,
    pub residual1: FloatTensor,
    pub output: FloatTensor,
}

pub fn float_probe(block: &BlockWeights, x: &FloatTensor) -> Result<FloatProbe> {
    let ones = vec![1.0f32; block.dims.d_ffn];
    float_probe_sigma(block, &ones, x)
}

fn float_probe_sigma(
    block: &BlockWeights,
    sigma_div: &[f32],
    x: &FloatTensor,
) -> Result<FloatProbe> {
    block.validate()?;
    if x.cols() != block.dims.d_model {
        return Err(Error::ShapeMismatch(format!(
            "input width {} vs d_model {}",
            x.cols(),
            block.dims.d_model
        )));
    }
    let h1 = rmsnorm_f(x, &block.norm1);
    let q = h1.matmul(&block.w_q)?;
    let k = h1.matmul(&block.w_k)?;
    let v = h1.matmul(&block.w_v)?;
    let ctx = attention_f(&q, &k, &v, &block.dims)?;
    let attn = ctx.matmul(&block.w_o)?;
    trace::count_float(x.len());
    let r1 = FloatTensor::new(
        x.shape().to_vec(),
        x.as_slice()
            .iter()
            .zip(attn.as_slice())
            .map(|(a, b)| a + b)
            .collect(),
    )?;
    let h2 = rmsnorm_f(&r1, &block.norm2);
    let g = add_bias(&h2.matmul(&block.w_gate)?, &block.b_gate);
    let u = add_bias(&h2.matmul(&block.w_up)?, &block.b_up);
    let sw = silu_gate(&g, &u, sigma_div);
    let ffn = sw.matmul(&block.w_down)?;
    trace::count_float(x.len());
    let out = FloatTensor::new(
        x.shape().to_vec(),
        r1.as_slice()
            .iter()
            .zip(ffn.as_slice())
            .map(|(a, b)| a + b)
            .collect(),
    )?;
    Ok(FloatProbe {
        norm1_out: h1,
        norm2_out: h2,
        gate_preact: g,
        residual1: r1,
        output: out,
    })
}

/// Fake quantization: quantize then dequantize on the float path.
fn fq(x: &FloatTensor, bits: u8, axis: Granularity) -> Result<FloatTensor> {
    Ok(dequantize(&quantize(x, bits, axis)?))
}

/// Snap probabilities onto the fixed 1/2^(bits-1) output grid of the
/// integer softmax.
fn fq_prob(p: &FloatTensor, bits: u8) -> FloatTensor {
    trace::count_float(2 * p.len());
    let unit = 2f32.powi(bits as i32 - 1);
    let data: Vec<f32> = p.as_slice().iter().map(|&v| (v * unit).round() / unit).collect();
    FloatTensor::new(p.shape().to_vec(), data).expect("finite")
}

/// Fake-quantized float forward mirroring the integer pipeline's
/// quantization seams. Used as the reconstruction objective.
pub fn sim_quant_forward(
    block: &BlockWeights,
    sigma_div: &[f32],
    x: &FloatTensor,
    qc: QuantConfig,
    softmax_unquantized: bool,
) -> Result<FloatTensor> {
    block.validate()?;
    let per_out = Granularity::PerChannel(1);
    let wq = fq(&block.w_q, qc.wbits, per_out)?;
    let wk = fq(&block.w_k, qc.wbits, per_out)?;
    let wv = fq(&block.w_v, qc.wbits, per_out)?;
    let wo = fq(&block.w_o, qc.wbits, per_out)?;
    let wg = fq(&block.w_gate, qc.wbits, per_out)?;
    let wu = fq(&block.w_up, qc.wbits, per_out)?;
    let wd = fq(&block.w_down, qc.wbits, per_out)?;

    let xq = fq(x, 8, per_out)?;
    let h1 = rmsnorm_f(&xq, &block.norm1);
    let a = fq(&h1, qc.abits, Granularity::PerToken)?;
    let q = a.matmul(&wq)?;
    let k = a.matmul(&wk)?;
    let v8 = fq(&a.matmul(&wv)?, qc.abits, Granularity::PerTensor)?;

    let (t, d) = (x.rows(), x.cols());
    let dims = &block.dims;
    let dh = dims.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0f32; t * d];
    for hd in 0..dims.n_heads {
        let sel = |m: &FloatTensor, i: usize, j: usize| m.as_slice()[i * d + hd * dh + j];
        let mut scores = vec![0f32; t * t];
        trace::count_float(t * t * dh);
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0f64;
                for e in 0..dh {
                    acc += sel(&q, i, e) as f64 * sel(&k, j, e) as f64;
                }
                scores[i * t + j] = (acc * inv_sqrt) as f32;
            }
        }
        let mut st = FloatTensor::new(vec![t, t], scores)?;
        if !softmax_unquantized {
            st = fq(&st, 8, Granularity::PerToken)?;
        }
        let probs = fq_prob(&causal_softmax_f(&st), 8);
        trace::count_float(t * t * dh);
        for i in 0..t {
            for e in 0..dh {
                let mut acc = 0f64;
                for j in 0..t {
                    acc += probs.as_slice()[i * t + j] as f64 * sel(&v8, j, e) as f64;
                }
                ctx[i * d + hd * dh + e] = acc as f32;
            }
        }
    }
    let ctxq = fq(&FloatTensor::new(vec![t, d], ctx)?, qc.abits, Granularity::PerToken)?;
    let attn = ctxq.matmul(&wo)?;
    trace::count_float(x.len());
    let r1 = FloatTensor::new(
        x.shape().to_vec(),
        xq.as_slice()
            .iter()
            .zip(attn.as_slice())
            .map(|(a, b)| a + b)
            .collect(),
    )?;
    let n2in = fq(&r1, 8, per_out)?;
    let h2 = fq(&rmsnorm_f(&n2in, &block.norm2), qc.abits, Granularity::PerToken)?;
    let g = fq(
        &add_bias(&h2.matmul(&wg)?, &block.b_gate),
        8,
        Granularity::PerToken,
    )?;
    let u = fq(
        &add_bias(&h2.matmul(&wu)?, &block.b_up),
        8,
        Granularity::PerToken,
    )?;
    let sw = fq(&silu_gate(&g, &u, sigma_div), qc.abits, Granularity::PerToken)?;
    let ffn = sw.matmul(&wd)?;
    trace::count_float(x.len());
    FloatTensor::new(
        x.shape().to_vec(),
        r1.as_slice()
            .iter()
            .zip(ffn.as_slice())
            .map(|(a, b)| a + b)
            .collect(),
    )
}

/// Fixed per-channel affine grid (8-bit) for a norm input, frozen at
/// calibration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGrid {
    pub scales: Vec<DyadicScale>,
    pub zero_points: Vec<i64>,
}

impl ChannelGrid {
    /// Build from per-channel calibration extrema; constant channels are
    /// widened so the grid never degenerates.
    pub fn from_extrema(lo: &[f64], hi: &[f64]) -> Result<ChannelGrid> {
        trace::count_float(4 * lo.len());
        let mut scales = Vec::with_capacity(lo.len());
        let mut zps = Vec::with_capacity(lo.len());
        for (&l, &h) in lo.iter().zip(hi) {
            let (l, h) = if h > l {
                (l, h)
            } else {
                let half = (l.abs() * 0.5).max(0.5);
                (l - half, l + half)
            };
            let step = (h - l) / 255.0;
            let scale = crate::intmath::fit_dyadic((step * 2f64.powi(40)).round() as u64, 1 << 40)?;
            scales.push(scale);
            zps.push((-l / step).round() as i64);
        }
        Ok(ChannelGrid {
            scales,
            zero_points: zps,
        })
    }
}

/// Boundary quantization of a float tensor onto a fixed channel grid.
fn quantize_to_grid(x: &FloatTensor, grid: &ChannelGrid) -> Result<QuantTensor> {
    let (r, c) = (x.rows(), x.cols());
    trace::count_float(2 * x.len());
    let mut data = vec![0i64; r * c];
    for i in 0..r {
        for j in 0..c {
            let s = grid.scales[j].value();
            let q = (x.as_slice()[i * c + j] as f64 / s).round() as i64 + grid.zero_points[j];
            data[i * c + j] = q.clamp(0, 255);
        }
    }
    QuantTensor::new(
        x.shape().to_vec(),
        data,
        8,
        grid.scales.clone(),
        grid.zero_points.clone(),
        Granularity::PerChannel(1),
        false,
    )
}

/// Integer-only requantization of a wide tensor onto a fixed channel grid.
fn snap_to_grid(t: &QuantTensor, grid: &ChannelGrid) -> Result<QuantTensor> {
    let (values, k_total) = to_value_mantissas(t)?;
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0i64; r * c];
    for i in 0..r {
        for j in 0..c {
            let s = grid.scales[j];
            if s.m == 0 {
                return Err(Error::ZeroScale("norm input grid"));
            }
            // q = round(v · 2^k_c / (m_c · 2^K)) + zp
            let num = values[i * c + j] << s.k;
            let den = (s.m as i128) << k_total;
            let q = round_div_i128(num, den) as i64 + grid.zero_points[j];
            data[i * c + j] = q.clamp(0, 255);
        }
    }
    QuantTensor::new(
        t.shape().to_vec(),
        data,
        8,
        grid.scales.clone(),
        grid.zero_points.clone(),
        Granularity::PerChannel(1),
        false,
    )
}

/// Column-wise concatenation of quantized tensors into one wide tensor
/// with a shared unit-mantissa scale.
fn concat_cols_wide(parts: &[QuantTensor]) -> Result<QuantTensor> {
    let rows = parts[0].rows();
    let mut mantissas = Vec::with_capacity(parts.len());
    let mut k_max = 0u32;
    for p in parts {
        let (v, k) = to_value_mantissas(p)?;
        k_max = k_max.max(k);
        mantissas.push((v, k));
    }
    let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = vec![0i64; rows * total_cols];
    let mut off = 0;
    for (p, (v, k)) in parts.iter().zip(&mantissas) {
        let shift = k_max - k;
        if shift > 32 {
            return Err(Error::ShiftOverflow {
                ctx: "head concat alignment",
                shift,
                limit: 32,
            });
        }
        let c = p.cols();
        for i in 0..rows {
            for j in 0..c {
                data[i * total_cols + off + j] =
                    i64::try_from(v[i * c + j] << shift).map_err(|_| Error::OutputShiftOverflow {
                        ctx: "head concat overflow",
                        k: k_max,
                    })?;
            }
        }
        off += c;
    }
    QuantTensor::new(
        vec![rows, total_cols],
        data,
        WIDE_BITS,
        vec![DyadicScale { m: 1, k: k_max }],
        vec![0],
        Granularity::PerTensor,
        false,
    )
}

/// Integer-calibrated block: per-channel quantized weights, frozen norm
/// input grids, integer norm coefficients and gate divisors.
#[derive(Debug, Clone)]
pub struct CalibratedBlock {
    pub dims: BlockDims,
    pub qconfig: QuantConfig,
    pub clip: ClipConfig,
    pub smoothing: SmoothingSet,
    pub w_q: QuantTensor,
    pub w_k: QuantTensor,
    pub w_v: QuantTensor,
    pub w_o: QuantTensor,
    pub w_gate: QuantTensor,
    pub w_up: QuantTensor,
    pub w_down: QuantTensor,
    pub b_gate_m: Vec<i64>,
    pub b_up_m: Vec<i64>,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub grid1: ChannelGrid,
    pub grid2: ChannelGrid,
    pub sigma: Vec<f32>,
    // Prepared integer-side parameters (derived, not serialized).
    pub(crate) norm1_int: IntNormParams,
    pub(crate) norm2_int: IntNormParams,
    pub(crate) sigma_spec: SigmaPrimeSpec,
}

/// Fixed-point shift for bias mantissas.
pub const BIAS_K: u32 = 16;

impl CalibratedBlock {
    /// Re-derive the prepared integer parameters after field construction.
    pub fn prepare(mut self) -> Result<Self> {
        self.norm1_int = IntNormParams::from_float(&self.norm1)?;
        self.norm2_int = IntNormParams::from_float(&self.norm2)?;
        self.sigma_spec = SigmaPrimeSpec::from_factors(&self.sigma)?;
        Ok(self)
    }
}

/// Calibrate a float block: learn smoothing, fold it (plus the attention
/// scale) into the weights, quantize weights per-channel, and freeze the
/// norm input grids from calibration statistics.
pub fn calibrate(
    block: &BlockWeights,
    calib: &[FloatTensor],
    qconfig: QuantConfig,
    rconfig: &ReconstructionConfig,
    clip: ClipConfig,
    use_fsbr: bool,
) -> Result<(CalibratedBlock, ReconstructionResult)> {
    block.validate()?;
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let recon = if use_fsbr {
        fsbr_reconstruct(block, calib, qconfig, rconfig)?
    } else {
        let set = SmoothingSet::identity(block.dims.d_model, block.dims.d_ffn);
        ReconstructionResult {
            smoothing: set,
            initial_loss: 0.0,
            final_loss: 0.0,
        }
    };
    let (mut folded, sigma) = apply_smoothing(block, &recon.smoothing)?;

    // Attention scale folds into the query projection.
    let inv_sqrt = (1.0 / (block.dims.head_dim() as f64).sqrt()) as f32;
    trace::count_float(folded.w_q.len());
    folded.w_q = FloatTensor::new(
        folded.w_q.shape().to_vec(),
        folded.w_q.as_slice().iter().map(|&v| v * inv_sqrt).collect(),
    )?;

    // Norm input extrema over the calibration set.
    let d = block.dims.d_model;
    let mut lo1 = vec![f64::INFINITY; d];
    let mut hi1 = vec![f64::NEG_INFINITY; d];
    let mut lo2 = vec![f64::INFINITY; d];
    let mut hi2 = vec![f64::NEG_INFINITY; d];
    for x in calib {
        let probe = float_probe(&folded, x)?;
        for (i, &v) in x.as_slice().iter().enumerate() {
            lo1[i % d] = lo1[i % d].min(v as f64);
            hi1[i % d] = hi1[i % d].max(v as f64);
        }
        for (i, &v) in probe.residual1.as_slice().iter().enumerate() {
            lo2[i % d] = lo2[i % d].min(v as f64);
            hi2[i % d] = hi2[i % d].max(v as f64);
        }
    }
    let grid1 = ChannelGrid::from_extrema(&lo1, &hi1)?;
    let grid2 = ChannelGrid::from_extrema(&lo2, &hi2)?;

    let per_out = Granularity::PerChannel(1);
    let wq = qconfig.wbits;
    trace::count_float(2 * (folded.b_gate.len() + folded.b_up.len()));
    let to_bias = |b: &[f32]| -> Vec<i64> {
        b.iter()
            .map(|&v| (v as f64 * 2f64.powi(BIAS_K as i32)).round() as i64)
            .collect()
    };
    let cb = CalibratedBlock {
        dims: block.dims,
        qconfig,
        clip,
        smoothing: recon.smoothing.clone(),
        w_q: quantize(&folded.w_q, wq, per_out)?,
        w_k: quantize(&folded.w_k, wq, per_out)?,
        w_v: quantize(&folded.w_v, wq, per_out)?,
        w_o: quantize(&folded.w_o, wq, per_out)?,
        w_gate: quantize(&folded.w_gate, wq, per_out)?,
        w_up: quantize(&folded.w_up, wq, per_out)?,
        w_down: quantize(&folded.w_down, wq, per_out)?,
        b_gate_m: to_bias(&folded.b_gate),
        b_up_m: to_bias(&folded.b_up),
        norm1: folded.norm1.clone(),
        norm2: folded.norm2.clone(),
        grid1,
        grid2,
        sigma,
        norm1_int: IntNormParams::from_float(&folded.norm1)?,
        norm2_int: IntNormParams::from_float(&folded.norm2)?,
        sigma_spec: SigmaPrimeSpec::from_factors(&recon.smoothing.gate_up.s)?,
    };
    Ok((cb, recon))
}

/// Ablation switches for the integer path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntOptions {
    /// Disable the softmax range clip (c becomes effectively infinite).
    pub ablate_clip: bool,
    /// Run normalization in float (mixed pipeline, for ablation only).
    pub float_norm: bool,
}

/// Per-operator error metrics collected by the probing integer forward.
#[derive(Debug, Clone, Default)]
pub struct OpErrors {
    pub per_op: BTreeMap<String, crate::report::OpStat>,
}

impl OpErrors {
    fn record(&mut self, name: &str, got: &FloatTensor, want: &FloatTensor) {
        let e = self.per_op.entry(name.to_string()).or_default();
        e.max_abs = e.max_abs.max(got.max_abs_diff(want));
        let n = got.len();
        e.sq_sum += got.mse(want) * n as f64;
        e.count += n;
        e.ref_absmax = e.ref_absmax.max(
            want.as_slice()
                .iter()
                .map(|v| v.abs() as f64)
                .fold(0.0, f64::max),
        );
    }
}

/// Pure integer forward pass: one boundary quantization in, one boundary
/// dequantization out, everything in between on integer arithmetic.
pub fn int_forward(cb: &CalibratedBlock, x: &FloatTensor) -> Result<FloatTensor> {
    int_forward_opts(cb, x, IntOptions::default(), None)
}

pub fn int_forward_opts(
    cb: &CalibratedBlock,
    x: &FloatTensor,
    opts: IntOptions,
    mut probe: Option<&mut OpErrors>,
) -> Result<FloatTensor> {
    if x.cols() != cb.dims.d_model {
        return Err(Error::ShapeMismatch(format!(
            "input width {} vs d_model {}",
            x.cols(),
            cb.dims.d_model
        )));
    }
    let abits = cb.qconfig.abits;
    let clip = if opts.ablate_clip {
        ClipConfig {
            c_m: u32::MAX,
            c_k: 0,
        }
    } else {
        cb.clip
    };
    let xq = quantize_to_grid(x, &cb.grid1)?;

    let run = |probe: &mut Option<&mut OpErrors>| -> Result<QuantTensor> {
        // norm1 → per-token activации → q/k/v projections
        let n1 = if opts.float_norm {
            float_norm_bridge(&xq, &cb.norm1)?
        } else {
            di_rmsnorm_prepared(&xq, &cb.norm1_int, 8)?
        };
        if let Some(p) = probe.as_deref_mut() {
            p.record("di_rmsnorm", &dequantize(&n1), &rmsnorm_f(&dequantize(&xq), &cb.norm1));
        }
        let a = requantize(&n1, abits, Granularity::PerToken)?;
        let q8 = di_matmul(&a, &cb.w_q, abits, Granularity::PerToken)?;
        let k8 = di_matmul(&a, &cb.w_k, abits, Granularity::PerToken)?;
        let v8 = di_matmul(&a, &cb.w_v, abits, Granularity::PerTensor)?;
        if let Some(p) = probe.as_deref_mut() {
            let aref = dequantize(&a);
            p.record(
                "di_matmul",
                &dequantize(&q8),
                &aref.matmul(&dequantize(&cb.w_q))?,
            );
        }

        let (t, d) = (x.rows(), x.cols());
        let dh = cb.dims.head_dim();
        let mut heads = Vec::with_capacity(cb.dims.n_heads);
        for h in 0..cb.dims.n_heads {
            let qh = q8.slice_cols(h * dh, dh)?;
            let kh = k8.slice_cols(h * dh, dh)?;
            let vh = v8.slice_cols(h * dh, dh)?;
            let scores = di_matmul_raw(&qh, &kh.transpose2()?)?;
            let masked = apply_causal_floor(&scores, clip)?;
            let probs = di_clipped_softmax(&masked, clip, 8)?;
            if let Some(p) = probe.as_deref_mut() {
                p.record(
                    "di_clipped_softmax",
                    &dequantize(&probs),
                    &causal_softmax_f(&dequantize(&scores)),
                );
            }
            heads.push(di_matmul_raw(&probs, &vh)?);
        }
        let _ = (t, d);
        // The attention output feeds an exact integer residual add, so it
        // stays at the raw accumulator scale; only GEMM inputs are
        // narrowed to the activation width.
        let ctx = requantize(&concat_cols_wide(&heads)?, abits, Granularity::PerToken)?;
        let attn = di_matmul_raw(&ctx, &cb.w_o)?;
        let r1 = residual_add(&xq, &attn)?;

        // norm2 → gated FFN
        let n2in = snap_to_grid(&r1, &cb.grid2)?;
        let n2 = if opts.float_norm {
            float_norm_bridge(&n2in, &cb.norm2)?
        } else {
            di_rmsnorm_prepared(&n2in, &cb.norm2_int, 8)?
        };
        if let Some(p) = probe.as_deref_mut() {
            p.record("di_rmsnorm", &dequantize(&n2), &rmsnorm_f(&dequantize(&n2in), &cb.norm2));
        }
        let h2 = requantize(&n2, abits, Granularity::PerToken)?;
        let mut g_raw = di_matmul_raw(&h2, &cb.w_gate)?;
        if cb.b_gate_m.iter().any(|&b| b != 0) {
            g_raw = add_channel_bias(&g_raw, &cb.b_gate_m, BIAS_K)?;
        }
        let g8 = requantize(&g_raw, 8, Granularity::PerToken)?;
        let mut u_raw = di_matmul_raw(&h2, &cb.w_up)?;
        if cb.b_up_m.iter().any(|&b| b != 0) {
            u_raw = add_channel_bias(&u_raw, &cb.b_up_m, BIAS_K)?;
        }
        let u8t = requantize(&u_raw, 8, Granularity::PerToken)?;
        let sw = di_swiglu(&g8, &u8t, &cb.sigma_spec, 8)?;
        if let Some(p) = probe.as_deref_mut() {
            p.record(
                "di_swiglu",
                &dequantize(&sw),
                &silu_gate(&dequantize(&g8), &dequantize(&u8t), &cb.sigma),
            );
        }
        let sq = requantize(&sw, abits, Granularity::PerToken)?;
        let ffn = di_matmul_raw(&sq, &cb.w_down)?;
        residual_add(&r1, &ffn)
    };

    let r2 = if probe.is_some() || opts.float_norm {
        // Probing interleaves float references with the integer ops, so
        // purity tracing is meaningless here.
        run(&mut probe)?
    } else {
        let (res, violations) = trace::strict_scope(|| run(&mut probe));
        debug_assert_eq!(violations, 0, "float arithmetic on the integer path");
        res?
    };
    Ok(dequantize(&r2))
}

/// Float-norm ablation bridge: dequantize, normalize in float, requantize
/// per-channel onto a wide grid equivalent.
fn float_norm_bridge(xq: &QuantTensor, params: &NormParams) -> Result<QuantTensor> {
    let normed = rmsnorm_f(&dequantize(xq), params);
    let q = quantize(&normed, 8, Granularity::PerChannel(1))?;
    Ok(q)
}

/// Set causally-masked score entries below the clip floor so the softmax
/// assigns them zero mass (the integer analogue of -inf).
fn apply_causal_floor(scores: &QuantTensor, clip: ClipConfig) -> Result<QuantTensor> {
    let (t, c) = (scores.rows(), scores.cols());
    let scale = scores.scales()[0];
    let c_int = {
        let num = (clip.c_m as u128) << scale.k;
        let den = (scale.m as u128) << clip.c_k;
        crate::intmath::round_div_u128(num, den).max(1)
    };
    let c_int = i64::try_from(c_int.min(i64::MAX as u128 / 4)).unwrap();
    let mut data = scores.data().to_vec();
    for i in 0..t {
        let row = &mut data[i * c..(i + 1) * c];
        let lim = (i + 1).min(c);
        if lim == c {
            continue;
        }
        let unmasked_max = *row[..lim].iter().max().expect("non-empty");
        let floor = unmasked_max.saturating_sub(c_int).saturating_sub(c_int.max(1));
        for v in &mut row[lim..] {
            *v = floor;
        }
    }
    QuantTensor::new(
        scores.shape().to_vec(),
        data,
        scores.bits(),
        scores.scales().to_vec(),
        scores.zero_points().to_vec(),
        scores.axis(),
        scores.is_degenerate(),
    )
}
