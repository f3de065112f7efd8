// Scratch: find worst softmax rows
use iqkernel::quant::{QuantTensor, DyadicScale, Granularity, dequantize};
use iqkernel::nonlinear::{di_clipped_softmax, ClipConfig};

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

fn main() {
    let mut st = 5u64;
    let mut worst = 0f64;
    let mut worst_info = String::new();
    for trial in 0..500 {
        let d = 2 + (splitmix(&mut st) % 15) as usize;
        let vals: Vec<i64> = (0..d).map(|_| uniform(&mut st, -128.0, 127.0) as i64).collect();
        let scale = DyadicScale { m: 128 + (splitmix(&mut st) % 128) as u32, k: 9 + (splitmix(&mut st) % 4) as u32 };
        let x = QuantTensor::new(vec![1, d], vals.clone(), 32, vec![scale], vec![0], Granularity::PerTensor, false).unwrap();
        let y = di_clipped_softmax(&x, ClipConfig::DEFAULT, 8).unwrap();
        let fx: Vec<f64> = vals.iter().map(|&v| v as f64 * scale.value()).collect();
        let want = softmax_f(&fx);
        let got = dequantize(&y);
        for (j, (g, w)) in got.as_slice().iter().zip(&want).enumerate() {
            let e = (*g as f64 - w).abs();
            if e > worst {
                worst = e;
                worst_info = format!("trial {trial} d={d} scale={}/2^{} s={:.4} vals={vals:?}\n  logits={:?}\n  want={:?}\n  got={:?} elem {j}",
                    scale.m, scale.k, scale.value(), fx.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>(),
                    want.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(),
                    got.as_slice(), );
            }
        }
    }
    println!("worst {worst}\n{worst_info}");
}
