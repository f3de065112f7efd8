// Scratch: FSBR ratio at the default toy dims, with reconstruction.
use iqkernel::block::*;
use iqkernel::fsbr::*;
use iqkernel::gen::{gen_block, gen_calib, OutlierSpec};
use iqkernel::quant::{dequantize, quantize, Granularity};
use iqkernel::FloatTensor;
use std::time::Instant;

fn main() {
    let dims = BlockDims { d_model: 64, n_heads: 4, d_ffn: 172 };
    let qc = QuantConfig::new(4, 4).unwrap();
    let block = gen_block(10, &dims);
    let spec = OutlierSpec { channels: vec![(3, 100.0)], tokens: vec![] };
    let calib = gen_calib(11, &dims, 32, 8, &spec);

    let refs: Vec<FloatTensor> = calib.iter().map(|x| {
        let xq = dequantize(&quantize(x, 8, Granularity::PerChannel(1)).unwrap());
        float_forward(&block, &xq).unwrap()
    }).collect();
    let loss_of = |set: &SmoothingSet| -> f64 {
        let (folded, sigma) = apply_smoothing(&block, set).unwrap();
        let mut t = 0.0;
        for (x, r) in calib.iter().zip(&refs) {
            t += sim_quant_forward(&folded, &sigma, x, qc, true).unwrap().mse(r);
        }
        t / calib.len() as f64
    };
    let t0 = Instant::now();
    let ident = loss_of(&SmoothingSet::identity(64, 172));
    println!("one loss eval: {:?}", t0.elapsed() / 1);
    println!("identity loss {ident:.6}");

    let t1 = Instant::now();
    let rc = ReconstructionConfig { steps: 8, samples: 32, grad_samples: 8, warm_start: true, ..Default::default() };
    let res = fsbr_reconstruct(&block, &calib, qc, &rc).unwrap();
    println!("reconstruct {:.6} -> {:.6} ratio {:.3} in {:?}",
        res.initial_loss, res.final_loss, res.final_loss / res.initial_loss, t1.elapsed());
}
