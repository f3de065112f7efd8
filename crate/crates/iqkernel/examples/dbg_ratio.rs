// Scratch: FSBR halving-ratio feasibility across outlier sizes and
// reference definitions.
use iqkernel::block::*;
use iqkernel::fsbr::*;
use iqkernel::gen::{gen_block, gen_calib, OutlierSpec};
use iqkernel::quant::{dequantize, quantize, Granularity};
use iqkernel::FloatTensor;

fn main() {
    let dims = BlockDims { d_model: 12, n_heads: 2, d_ffn: 16 };
    let qc = QuantConfig::new(4, 4).unwrap();
    for mult in [5.0f32, 10.0, 30.0, 100.0] {
        let block = gen_block(10, &dims);
        let spec = OutlierSpec { channels: vec![(3, mult)], tokens: vec![] };
        let calib = gen_calib(11, &dims, 16, 6, &spec);
        // Reference on raw x vs boundary-quantized x
        for use_xq in [false, true] {
            let refs: Vec<FloatTensor> = calib.iter().map(|x| {
                let input = if use_xq {
                    dequantize(&quantize(x, 8, Granularity::PerChannel(1)).unwrap())
                } else { x.clone() };
                float_forward(&block, &input).unwrap()
            }).collect();
            let loss_of = |set: &SmoothingSet| -> f64 {
                let (folded, sigma) = apply_smoothing(&block, set).unwrap();
                let mut t = 0.0;
                for (x, r) in calib.iter().zip(&refs) {
                    t += sim_quant_forward(&folded, &sigma, x, qc, true).unwrap().mse(r);
                }
                t / calib.len() as f64
            };
            let ident = loss_of(&SmoothingSet::identity(12, 16));
            // best alpha equalizer on norm sites
            let mut best = f64::INFINITY;
            for alpha in [0.25f32, 0.5, 0.75, 1.0] {
                let mut n1 = vec![0f32; 12];
                let mut n2 = vec![0f32; 12];
                let mut ga = vec![0f32; 16];
                for x in &calib {
                    let p = float_probe(&block, x).unwrap();
                    for (i, &v) in p.norm1_out.as_slice().iter().enumerate() { n1[i%12] = n1[i%12].max(v.abs()); }
                    for (i, &v) in p.norm2_out.as_slice().iter().enumerate() { n2[i%12] = n2[i%12].max(v.abs()); }
                    for (i, &v) in p.gate_preact.as_slice().iter().enumerate() { ga[i%16] = ga[i%16].max(v.abs()); }
                }
                let eqz = |a: &[f32], alpha: f32| -> Vec<f32> {
                    let gm = (a.iter().map(|v| (*v as f64).max(1e-9).ln()).sum::<f64>() / a.len() as f64).exp() as f32;
                    a.iter().map(|&v| ((v / gm).powf(alpha)).clamp(0.01, 100.0)).collect()
                };
                let mut set = SmoothingSet::identity(12, 16);
                set.norm1_qkv.s = eqz(&n1, alpha);
                set.norm2_ffn.s = eqz(&n2, alpha);
                set.gate_up.s = eqz(&ga, alpha);
                best = best.min(loss_of(&set));
            }
            println!("mult {mult:>5} ref_xq {use_xq}: ident {ident:.6} best-eq {best:.6} ratio {:.3}", best/ident);
        }
    }
}
