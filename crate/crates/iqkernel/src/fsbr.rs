//! Channel smoothing and block reconstruction.
//!
//! Four float-exact reparameterizations move quantization difficulty
//! between adjacent parameter pairs: norm→linear, linear→linear through a
//! channel-preserving composition, parallel linears whose outputs contract
//! together, and the gated activation (where the sigmoid argument keeps a
//! per-channel divisor). The reconstruction optimizer learns the smoothing
//! vectors by projected finite-difference descent on log(s), minimizing
//! the quantized block's output error against the float block.

use crate::block::{float_forward, sim_quant_forward, BlockWeights, QuantConfig};
use crate::error::{Error, Result};
use crate::nonlinear::{NormParams, SigmaPrimeSpec};
use crate::tensor::FloatTensor;
use crate::trace;
use serde::{Deserialize, Serialize};

/// Which reparameterization a smoothing vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothSite {
    SerialLinearNorm,
    SerialLinearLinear,
    ParallelLinearLinear,
    NonLinearActSmooth,
}

/// Per-channel positive smoothing factors for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingVector {
    pub s: Vec<f32>,
    pub site: SmoothSite,
}

impl SmoothingVector {
    pub fn identity(n: usize, site: SmoothSite) -> Self {
        SmoothingVector {
            s: vec![1.0; n],
            site,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self.s.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonPositiveSmoothing(i));
        }
        Ok(())
    }
}

/// The block's five smoothing sites, in pipeline order:
/// norm1→{q,k,v}, norm2→{gate,up}, v→o, q∥k, and the gated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSet {
    pub norm1_qkv: SmoothingVector,
    pub norm2_ffn: SmoothingVector,
    pub v_out: SmoothingVector,
    pub query_key: SmoothingVector,
    pub gate_up: SmoothingVector,
}

impl SmoothingSet {
    pub fn identity(d_model: usize, d_ffn: usize) -> Self {
        SmoothingSet {
            norm1_qkv: SmoothingVector::identity(d_model, SmoothSite::SerialLinearNorm),
            norm2_ffn: SmoothingVector::identity(d_model, SmoothSite::SerialLinearNorm),
            v_out: SmoothingVector::identity(d_model, SmoothSite::SerialLinearLinear),
            query_key: SmoothingVector::identity(d_model, SmoothSite::ParallelLinearLinear),
            gate_up: SmoothingVector::identity(d_ffn, SmoothSite::NonLinearActSmooth),
        }
    }

    fn vectors(&self) -> [&SmoothingVector; 5] {
        [
            &self.norm1_qkv,
            &self.norm2_ffn,
            &self.v_out,
            &self.query_key,
            &self.gate_up,
        ]
    }

    fn from_flat(dims: &[usize; 5], flat: &[f64]) -> SmoothingSet {
        let mut out = SmoothingSet::identity(dims[0], dims[4]);
        let mut off = 0;
        for (i, vec) in [
            &mut out.norm1_qkv,
            &mut out.norm2_ffn,
            &mut out.v_out,
            &mut out.query_key,
            &mut out.gate_up,
        ]
        .into_iter()
        .enumerate()
        {
            vec.s = flat[off..off + dims[i]]
                .iter()
                .map(|&v| v.exp() as f32)
                .collect();
            off += dims[i];
        }
        out
    }
}

fn scale_rows(w: &FloatTensor, s: &[f32], invert: bool) -> Result<FloatTensor> {
    if w.rows() != s.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} factors",
            w.rows(),
            s.len()
        )));
    }
    trace::count_float(w.len());
    let c = w.cols();
    let data: Vec<f32> = w
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = s[i / c];
            if invert {
                v / f
            } else {
                v * f
            }
        })
        .collect();
    FloatTensor::new(w.shape().to_vec(), data)
}

fn scale_cols(w: &FloatTensor, s: &[f32], invert: bool) -> Result<FloatTensor> {
    if w.cols() != s.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cols vs {} factors",
            w.cols(),
            s.len()
        )));
    }
    trace::count_float(w.len());
    let c = w.cols();
    let data: Vec<f32> = w
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = s[i % c];
            if invert {
                v / f
            } else {
                v * f
            }
        })
        .collect();
    FloatTensor::new(w.shape().to_vec(), data)
}

fn scale_slice(b: &[f32], s: &[f32], invert: bool) -> Vec<f32> {
    trace::count_float(b.len());
    b.iter()
        .zip(s)
        .map(|(&v, &f)| if invert { v / f } else { v * f })
        .collect()
}

/// Fold a smoothing vector through a norm→linear pair: `γ' = γ ⊘ s`
/// (and β' = β ⊘ s), `W' = s ⊗ W` row-wise. The composed float function
/// is unchanged.
pub fn fold_serial_linear_norm(
    norm: &NormParams,
    w_next: &FloatTensor,
    s: &SmoothingVector,
) -> Result<(NormParams, FloatTensor)> {
    s.validate()?;
    if norm.gamma.len() != s.s.len() || w_next.rows() != s.s.len() {
        return Err(Error::ShapeMismatch(format!(
            "smoothing length {} vs {} channels / {} rows",
            s.s.len(),
            norm.gamma.len(),
            w_next.rows()
        )));
    }
    let folded_norm = NormParams {
        gamma: scale_slice(&norm.gamma, &s.s, true),
        beta: norm.beta.as_ref().map(|b| scale_slice(b, &s.s, true)),
    };
    Ok((folded_norm, scale_rows(w_next, &s.s, false)?))
}

/// Fold through a linear→linear composition with no intervening
/// nonlinearity: `W1' = W1 ⊘ s` column-wise, `b1' = b1 ⊘ s`,
/// `W2' = s ⊗ W2` row-wise.
pub fn fold_serial_linear_linear(
    w1: &FloatTensor,
    b1: Option<&[f32]>,
    w2: &FloatTensor,
    s: &SmoothingVector,
) -> Result<(FloatTensor, Option<Vec<f32>>, FloatTensor)> {
    s.validate()?;
    if w1.cols() != s.s.len() || w2.rows() != s.s.len() {
        return Err(Error::ShapeMismatch(format!(
            "smoothing length {} vs {} out-channels / {} in-channels",
            s.s.len(),
            w1.cols(),
            w2.rows()
        )));
    }
    Ok((
        scale_cols(w1, &s.s, true)?,
        b1.map(|b| scale_slice(b, &s.s, true)),
        scale_rows(w2, &s.s, false)?,
    ))
}

/// Fold across two parallel linears whose output channels contract
/// against each other (query/key scores, gate/up products): one absorbs
/// `s`, the other `1/s`, column-wise over the shared channels.
pub fn fold_parallel_linear_linear(
    w_a: &FloatTensor,
    w_b: &FloatTensor,
    s: &SmoothingVector,
) -> Result<(FloatTensor, FloatTensor)> {
    s.validate()?;
    if w_a.cols() != s.s.len() || w_b.cols() != s.s.len() {
        return Err(Error::ShapeMismatch(format!(
            "smoothing length {} vs {}/{} shared channels",
            s.s.len(),
            w_a.cols(),
            w_b.cols()
        )));
    }
    Ok((scale_cols(w_a, &s.s, false)?, scale_cols(w_b, &s.s, true)?))
}

/// Fold into the gated unit: `W' = W ⊗ s`, `b' = b ⊗ s`, `V' = V ⊘ s`,
/// `c' = c ⊘ s`, and the sigmoid argument picks up the divisor
/// `σ'(x) = σ(x ⊘ s)`. Float output is unchanged:
/// `(x1 ⊗ s) ⊗ (x2 ⊘ s) ⊗ σ(x1) = x1 ⊗ x2 ⊗ σ(x1)`.
pub fn fold_swiglu_nonlinear(
    w: &FloatTensor,
    v: &FloatTensor,
    b: &[f32],
    c: &[f32],
    s: &SmoothingVector,
) -> Result<(FloatTensor, FloatTensor, Vec<f32>, Vec<f32>, SigmaPrimeSpec)> {
    s.validate()?;
    let n = s.s.len();
    if w.cols() != n || v.cols() != n || b.len() != n || c.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "smoothing length {n} vs gate/up width {}",
            w.cols()
        )));
    }
    Ok((
        scale_cols(w, &s.s, false)?,
        scale_cols(v, &s.s, true)?,
        scale_slice(b, &s.s, false),
        scale_slice(c, &s.s, true),
        SigmaPrimeSpec::from_factors(&s.s)?,
    ))
}

/// Apply all five site folds to a block, returning the folded weights and
/// the gate divisors for the integer gated unit.
pub fn apply_smoothing(
    block: &BlockWeights,
    set: &SmoothingSet,
) -> Result<(BlockWeights, Vec<f32>)> {
    for v in set.vectors() {
        v.validate()?;
    }
    let mut b = block.clone();
    // norm1 → q, k, v
    let (n1, wq) = fold_serial_linear_norm(&b.norm1, &b.w_q, &set.norm1_qkv)?;
    let (_, wk) = fold_serial_linear_norm(&b.norm1, &b.w_k, &set.norm1_qkv)?;
    let (_, wv) = fold_serial_linear_norm(&b.norm1, &b.w_v, &set.norm1_qkv)?;
    b.norm1 = n1;
    b.w_q = wq;
    b.w_k = wk;
    b.w_v = wv;
    // norm2 → gate, up
    let (n2, wg) = fold_serial_linear_norm(&b.norm2, &b.w_gate, &set.norm2_ffn)?;
    let (_, wu) = fold_serial_linear_norm(&b.norm2, &b.w_up, &set.norm2_ffn)?;
    b.norm2 = n2;
    b.w_gate = wg;
    b.w_up = wu;
    // v → o through the attention mix
    let (wv, _, wo) = fold_serial_linear_linear(&b.w_v, None, &b.w_o, &set.v_out)?;
    b.w_v = wv;
    b.w_o = wo;
    // q ∥ k over the score contraction
    let (wq, wk) = fold_parallel_linear_linear(&b.w_q, &b.w_k, &set.query_key)?;
    b.w_q = wq;
    b.w_k = wk;
    // gated unit
    let (wg, wu, bg, bu, _) =
        fold_swiglu_nonlinear(&b.w_gate, &b.w_up, &b.b_gate, &b.b_up, &set.gate_up)?;
    b.w_gate = wg;
    b.w_up = wu;
    b.b_gate = bg;
    b.b_up = bu;
    Ok((b, set.gate_up.s.clone()))
}

/// Reconstruction hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    /// Calibration rows used for the loss (MSE over block outputs).
    pub samples: usize,
    /// Log-space gradient step.
    pub learning_rate: f64,
    /// Optimizer iteration budget.
    pub steps: usize,
    /// Central-difference half-step on log(s).
    pub epsilon_fd: f64,
    /// Keep the softmax input unquantized during reconstruction.
    pub softmax_unquantized: bool,
    /// Start from the absmax-equalizing factors instead of s = 1.
    pub warm_start: bool,
    /// Calibration rows used for gradient estimation (loss acceptance
    /// always checks the full set).
    pub grad_samples: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            samples: 128,
            learning_rate: 5e-3,
            steps: 16,
            epsilon_fd: 1e-3,
            softmax_unquantized: true,
            warm_start: false,
            grad_samples: 16,
        }
    }
}

/// Outcome of a reconstruction run.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub smoothing: SmoothingSet,
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct LossEval<'a> {
    block: &'a BlockWeights,
    refs: &'a [FloatTensor],
    calib: &'a [FloatTensor],
    qconfig: QuantConfig,
    softmax_unquantized: bool,
    site_dims: [usize; 5],
}

impl LossEval<'_> {
    fn loss(&self, flat: &[f64], n_samples: usize) -> Result<f64> {
        let set = SmoothingSet::from_flat(&self.site_dims, flat);
        let (folded, sigma) = apply_smoothing(self.block, &set)?;
        let mut total = 0.0;
        let n = n_samples.min(self.calib.len());
        for (x, r) in self.calib.iter().take(n).zip(self.refs) {
            let out =
                sim_quant_forward(&folded, &sigma, x, self.qconfig, self.softmax_unquantized)?;
            total += out.mse(r);
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(0));
        }
        Ok(loss)
    }
}

/// Absmax-equalizing warm start: `s_i = sqrt(absmax_act,i / absmax_w,i)`
/// per site, from the calibration activations and the consumer weights.
fn warm_start_logs(
    block: &BlockWeights,
    calib: &[FloatTensor],
    site_dims: &[usize; 5],
) -> Result<Vec<f64>> {
    let d = site_dims[0];
    let ffn = site_dims[4];
    let mut n1_out = vec![0f64; d];
    let mut n2_out = vec![0f64; d];
    let mut gate_abs = vec![0f64; ffn];
    for x in calib {
        let probe = crate::block::float_probe(block, x)?;
        for (acc, v) in [
            (&mut n1_out, &probe.norm1_out),
            (&mut n2_out, &probe.norm2_out),
            (&mut gate_abs, &probe.gate_preact),
        ] {
            let c = v.cols();
            for (i, &val) in v.as_slice().iter().enumerate() {
                acc[i % c] = acc[i % c].max(val.abs() as f64);
            }
        }
    }
    let col_absmax = |w: &FloatTensor| -> Vec<f64> {
        let c = w.cols();
        let mut m = vec![0f64; c];
        for (i, &v) in w.as_slice().iter().enumerate() {
            m[i % c] = m[i % c].max(v.abs() as f64);
        }
        m
    };
    let row_absmax = |w: &FloatTensor| -> Vec<f64> {
        let c = w.cols();
        let mut m = vec![0f64; w.rows()];
        for (i, &v) in w.as_slice().iter().enumerate() {
            m[i / c] = m[i / c].max(v.abs() as f64);
        }
        m
    };
    let mut qkv_w = vec![0f64; d];
    for w in [&block.w_q, &block.w_k, &block.w_v] {
        for (i, v) in row_absmax(w).into_iter().enumerate() {
            qkv_w[i] = qkv_w[i].max(v);
        }
    }
    let mut ffn_w = vec![0f64; d];
    for w in [&block.w_gate, &block.w_up] {
        for (i, v) in row_absmax(w).into_iter().enumerate() {
            ffn_w[i] = ffn_w[i].max(v);
        }
    }
    let up_w = col_absmax(&block.w_up);

    let eq = |act: &[f64], wgt: &[f64]| -> Vec<f64> {
        act.iter()
            .zip(wgt)
            .map(|(&a, &w)| {
                if a <= 0.0 || w <= 0.0 {
                    0.0
                } else {
                    0.5 * (a.ln() - w.ln())
                }
            })
            .collect()
    };
    let mut flat = Vec::new();
    // The norm sites divide their output by s, so channels with loud
    // activations relative to consumer weights want s > 1.
    flat.extend(eq(&n1_out, &qkv_w));
    flat.extend(eq(&n2_out, &ffn_w));
    // v→o and q∥k imbalances are second-order; start at identity.
    flat.extend(vec![0.0; d]);
    flat.extend(vec![0.0; d]);
    flat.extend(eq(&gate_abs, &up_w));
    Ok(flat)
}

/// Learn smoothing vectors minimizing the quantized block's output MSE.
///
/// Projected gradient descent on log(s) with central finite differences;
/// candidate steps backtrack on the full-set loss and the result falls
/// back to identity smoothing whenever no improvement was found.
pub fn fsbr_reconstruct(
    block: &BlockWeights,
    calib: &[FloatTensor],
    qconfig: QuantConfig,
    rconfig: &ReconstructionConfig,
) -> Result<ReconstructionResult> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let calib = &calib[..rconfig.samples.min(calib.len()).max(1)];
    let d = block.dims.d_model;
    let ffn = block.dims.d_ffn;
    let site_dims = [d, d, d, d, ffn];
    let n_params: usize = site_dims.iter().sum();

    // The reference consumes the same boundary-quantized input as the
    // quantized path: reconstruction then minimizes in-block quantization
    // error rather than the irreducible input rounding.
    let refs: Vec<FloatTensor> = calib
        .iter()
        .map(|x| {
            let xq = crate::quant::dequantize(&crate::quant::quantize(
                x,
                8,
                crate::quant::Granularity::PerChannel(1),
            )?);
            float_forward(block, &xq)
        })
        .collect::<Result<_>>()?;
    let eval = LossEval {
        block,
        refs: &refs,
        calib,
        qconfig,
        softmax_unquantized: rconfig.softmax_unquantized,
        site_dims,
    };

    let identity = vec![0f64; n_params];
    let identity_loss = eval.loss(&identity, calib.len())?;

    let mut logs = if rconfig.warm_start {
        warm_start_logs(block, calib, &site_dims)?
    } else {
        identity.clone()
    };
    let mut cur = eval.loss(&logs, calib.len())?;
    if cur > identity_loss {
        logs = identity.clone();
        cur = identity_loss;
    }

    let grad_n = rconfig.grad_samples.max(1).min(calib.len());
    let mut grad = vec![0f64; n_params];
    // log(s) stays within [ln 0.01, ln 100].
    let lim = 100f64.ln();
    'outer: for step in 0..rconfig.steps {
        let eps = rconfig.epsilon_fd;
        for g in grad.iter_mut().take(n_params) {
            *g = 0.0;
        }
        for i in 0..n_params {
            let orig = logs[i];
            logs[i] = orig + eps;
            let up = eval.loss(&logs, grad_n)?;
            logs[i] = orig - eps;
            let down = eval.loss(&logs, grad_n)?;
            logs[i] = orig;
            grad[i] = (up - down) / (2.0 * eps);
        }
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        // Line search along the gradient ray: the learning rate seeds the
        // step, growing while the full-set loss keeps improving and
        // backtracking otherwise. Acceptance stays monotone either way.
        let try_step = |scale: f64| -> Result<(Vec<f64>, f64)> {
            let cand: Vec<f64> = logs
                .iter()
                .zip(&grad)
                .map(|(&l, &g)| (l - scale * g).clamp(-lim, lim))
                .collect();
            let loss = eval.loss(&cand, calib.len())?;
            Ok((cand, loss))
        };
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut scale = rconfig.learning_rate;
        for _ in 0..10 {
            let (cand, loss) = try_step(scale)?;
            match &best {
                Some((_, b)) if loss >= *b => break,
                _ if loss >= cur => break,
                _ => best = Some((cand, loss)),
            }
            scale *= 2.0;
        }
        if best.is_none() {
            for halving in 1..=3 {
                let (cand, loss) = try_step(rconfig.learning_rate / f64::powi(2.0, halving))?;
                if loss < cur {
                    best = Some((cand, loss));
                    break;
                }
            }
        }
        match best {
            Some((cand, loss)) => {
                let rel = (cur - loss) / cur.max(f64::MIN_POSITIVE);
                logs = cand;
                cur = loss;
                if rel < 1e-6 {
                    break 'outer;
                }
            }
            None => {
                if step > 0 {
                    break;
                }
            }
        }
    }
    let smoothing = if cur > identity_loss {
        cur = identity_loss;
        SmoothingSet::identity(d, ffn)
    } else {
        SmoothingSet::from_flat(&site_dims, &logs)
    };
    Ok(ReconstructionResult {
        smoothing,
        initial_loss: identity_loss,
        final_loss: cur,
    })
}
