// Scratch: stage-level deltas between plain and loud-token runs.
use iqkernel::block::*;
use iqkernel::fsbr::ReconstructionConfig;
use iqkernel::gen::{gen_block, gen_calib, OutlierSpec};
use iqkernel::nonlinear::ClipConfig;
use iqkernel::quant::dequantize;

fn main() {
    let dims = BlockDims { d_model: 16, n_heads: 2, d_ffn: 24 };
    let block = gen_block(31, &dims);
    let spec = OutlierSpec { channels: vec![], tokens: vec![(0, 2.0)] };
    let calib = gen_calib(37, &dims, 8, 6, &spec);
    let qc = QuantConfig::new(8, 8).unwrap();
    let rc = ReconstructionConfig { steps: 0, ..Default::default() };
    let (cb, _) = calibrate(&block, &calib, qc, &rc, ClipConfig::DEFAULT, false).unwrap();
    let plain = gen_calib(41, &dims, 1, 6, &OutlierSpec::default()).remove(0);
    let mut loud = plain.clone();
    for v in &mut loud.as_mut_slice()[..16] { *v *= 2.0; }

    // Probe both runs and compare dequantized intermediates per stage on rows 1..
    let mut pa = OpErrors::default();
    let mut pb = OpErrors::default();
    let ya = int_forward_opts(&cb, &plain, IntOptions::default(), Some(&mut pa)).unwrap();
    let yb = int_forward_opts(&cb, &loud, IntOptions::default(), Some(&mut pb)).unwrap();
    let d = 16;
    let rows_delta = |a: &iqkernel::FloatTensor, b: &iqkernel::FloatTensor| -> f64 {
        let mut w = 0f64;
        for i in d..a.len() { w = w.max((a.as_slice()[i] as f64 - b.as_slice()[i] as f64).abs()); }
        w
    };
    println!("out delta rows1.. {:.4}", rows_delta(&ya, &yb));
    // per-op aggregated errors for both runs
    for (k, v) in &pa.per_op { println!("plain {k}: max_abs {:.4}", v.max_abs); }
    for (k, v) in &pb.per_op { println!("loud  {k}: max_abs {:.4}", v.max_abs); }
    let _ = dequantize; 
}
