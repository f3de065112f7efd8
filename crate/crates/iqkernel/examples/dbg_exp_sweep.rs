// Scratch: pin the DI-Exp envelope for the acceptance sweep.
use iqkernel::intmath::{di_exp, fit_dyadic};

fn main() {
    let mut worst_abs = 0f64; // |result/|t| - e^(x s)| normalized to e^0 = 1
    let mut worst_rel = 0f64; // relative, over x·s in [-8, 0]
    let mut violations = 0u64;
    for pow in 1..=4u32 {
        let scale = fit_dyadic(1, 1 << pow).unwrap();
        let s = scale.value();
        let xs: Vec<i64> = (-(1i64 << 12)..=0).collect();
        let out = di_exp(&xs, scale).unwrap();
        let mut prev = 0u64;
        for (i, &x) in xs.iter().enumerate() {
            let got = out.values[i] as f64 / out.unit as f64;
            let want = (x as f64 * s).exp();
            worst_abs = worst_abs.max((got - want).abs());
            if x as f64 * s >= -4.0 {
                worst_rel = worst_rel.max((got - want).abs() / want);
            }
            if i > 0 && out.values[i] < prev {
                violations += 1;
            }
            prev = out.values[i];
        }
        println!("scale 2^-{pow} = {s}: m={} k={} unit={}", scale.m, scale.k, out.unit);
    }
    println!("worst_abs {worst_abs}");
    println!("worst_rel(x·s ≥ -4) {worst_rel}");
    println!("monotonicity violations {violations}");
}
