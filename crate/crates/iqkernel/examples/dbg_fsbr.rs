// Scratch: inspect FSBR loss landscape for outlier calibration.
use iqkernel::block::*;
use iqkernel::fsbr::*;
use iqkernel::gen::{gen_block, gen_calib, OutlierSpec};

fn main() {
    let dims = BlockDims { d_model: 12, n_heads: 2, d_ffn: 16 };
    let block = gen_block(10, &dims);
    let spec = OutlierSpec { channels: vec![(3, 100.0)], tokens: vec![] };
    let calib = gen_calib(11, &dims, 16, 6, &spec);
    let qc = QuantConfig::new(4, 4).unwrap();

    let loss_of = |set: &SmoothingSet| -> f64 {
        let (folded, sigma) = apply_smoothing(&block, set).unwrap();
        let mut total = 0.0;
        for x in &calib {
            let want = float_forward(&block, x).unwrap();
            let got = sim_quant_forward(&folded, &sigma, x, qc, true).unwrap();
            total += got.mse(&want);
        }
        total / calib.len() as f64
    };

    let ident = SmoothingSet::identity(12, 16);
    println!("identity loss {:.6}", loss_of(&ident));

    // Hand-built equalizer on norm1 site: s_c = absmax(h1_c) variants
    for alpha in [0.25f32, 0.5, 0.75, 1.0] {
        let mut n1 = vec![0f32; 12];
        for x in &calib {
            let p = float_probe(&block, x).unwrap();
            for (i, &v) in p.norm1_out.as_slice().iter().enumerate() {
                n1[i % 12] = n1[i % 12].max(v.abs());
            }
        }
        let gm = (n1.iter().map(|v| (*v as f64).ln()).sum::<f64>() / 12.0).exp() as f32;
        let mut set = SmoothingSet::identity(12, 16);
        set.norm1_qkv.s = n1.iter().map(|&a| ((a / gm).powf(alpha)).max(1e-3)).collect();
        println!("alpha {alpha} norm1-equalized loss {:.6}", loss_of(&set));
    }

    // Full run with warm start + line search
    let rc = ReconstructionConfig { steps: 8, samples: 16, grad_samples: 8, warm_start: true, ..Default::default() };
    let res = fsbr_reconstruct(&block, &calib, qc, &rc).unwrap();
    println!("reconstruct: {:.6} -> {:.6}", res.initial_loss, res.final_loss);
    println!("norm1 s: {:?}", &res.smoothing.norm1_qkv.s[..6]);
}
