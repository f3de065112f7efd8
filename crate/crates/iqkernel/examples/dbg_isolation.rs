// Scratch: token-isolation behavior at several outlier magnitudes.
use iqkernel::block::*;
use iqkernel::fsbr::ReconstructionConfig;
use iqkernel::gen::{gen_block, gen_calib, OutlierSpec};
use iqkernel::matmul::di_matmul;
use iqkernel::nonlinear::ClipConfig;
use iqkernel::quant::{quantize, Granularity};

fn main() {
    // Stage-level: scaling one row leaves other rows bit-identical.
    let dims = BlockDims { d_model: 16, n_heads: 2, d_ffn: 24 };
    let block = gen_block(31, &dims);
    let w = quantize(&block.w_q, 8, Granularity::PerChannel(1)).unwrap();
    let x = gen_calib(41, &dims, 1, 6, &OutlierSpec::default()).remove(0);
    let mut loud = x.clone();
    for v in &mut loud.as_mut_slice()[..16] { *v *= 50.0; }
    let qa = quantize(&x, 8, Granularity::PerToken).unwrap();
    let qb = quantize(&loud, 8, Granularity::PerToken).unwrap();
    let ya = di_matmul(&qa, &w, 8, Granularity::PerToken).unwrap();
    let yb = di_matmul(&qb, &w, 8, Granularity::PerToken).unwrap();
    let ident = ya.data()[16..] == yb.data()[16..];
    println!("matmul rows 1.. bit-identical: {ident}");

    for mult in [2.0f32, 4.0, 8.0] {
        let spec = OutlierSpec { channels: vec![], tokens: vec![(0, mult)] };
        let calib = gen_calib(37, &dims, 8, 6, &spec);
        let qc = QuantConfig::new(8, 8).unwrap();
        let rc = ReconstructionConfig { steps: 0, ..Default::default() };
        let (cb, _) = calibrate(&block, &calib, qc, &rc, ClipConfig::DEFAULT, false).unwrap();
        let plain = gen_calib(41, &dims, 1, 6, &OutlierSpec::default()).remove(0);
        let mut loud = plain.clone();
        for v in &mut loud.as_mut_slice()[..16] { *v *= mult; }
        let base = int_forward(&cb, &plain).unwrap();
        let bump = int_forward(&cb, &loud).unwrap();
        let e2e = base.max_abs_diff(&float_forward(&block, &plain).unwrap());
        let mut delta = 0f64;
        for i in 16..96 {
            delta = delta.max((base.as_slice()[i] as f64 - bump.as_slice()[i] as f64).abs());
        }
        println!("mult {mult}: other-token delta {delta:.4}, e2e err {e2e:.4}");
    }
}
