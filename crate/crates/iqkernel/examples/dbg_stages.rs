// Scratch: which quantization seam dominates the W4A4 loss?
use iqkernel::block::*;
use iqkernel::fsbr::*;
use iqkernel::gen::{gen_block, gen_calib, OutlierSpec};
use iqkernel::quant::{quantize, dequantize, Granularity};
use iqkernel::FloatTensor;

fn fq(x: &FloatTensor, bits: u8, g: Granularity) -> FloatTensor {
    dequantize(&quantize(x, bits, g).unwrap())
}

// Manual sim forward with switchable stages.
#[allow(clippy::too_many_arguments)]
fn sim(block: &BlockWeights, x: &FloatTensor, w_on: bool, a_on: bool, v_on: bool,
       ctx_on: bool, h2_on: bool, sw_on: bool) -> FloatTensor {
    let qw = |w: &FloatTensor| if w_on { fq(w, 4, Granularity::PerChannel(1)) } else { w.clone() };
    let wq = qw(&block.w_q); let wk = qw(&block.w_k); let wv = qw(&block.w_v);
    let wo = qw(&block.w_o); let wg = qw(&block.w_gate); let wu = qw(&block.w_up); let wd = qw(&block.w_down);
    let dims = &block.dims; let (t, d) = (x.rows(), x.cols());
    let xq = fq(x, 8, Granularity::PerChannel(1));
    let rms = |v: &FloatTensor, p: &iqkernel::nonlinear::NormParams| -> FloatTensor {
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0f32; r * c];
        for i in 0..r {
            let row = v.row(i);
            let ms: f64 = row.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>() / c as f64;
            let rm = ms.sqrt();
            for j in 0..c { out[i*c+j] = if rm == 0.0 { 0.0 } else { (row[j] as f64 / rm * p.gamma[j] as f64) as f32 }; }
        }
        FloatTensor::new(v.shape().to_vec(), out).unwrap()
    };
    let h1 = rms(&xq, &block.norm1);
    let a = if a_on { fq(&h1, 4, Granularity::PerToken) } else { h1 };
    let q = a.matmul(&wq).unwrap(); let k = a.matmul(&wk).unwrap();
    let v = a.matmul(&wv).unwrap();
    let v8 = if v_on { fq(&v, 4, Granularity::PerTensor) } else { v };
    let dh = dims.head_dim(); let inv = 1.0/(dh as f64).sqrt();
    let mut ctx = vec![0f32; t*d];
    for hd in 0..dims.n_heads {
        let sel = |m: &FloatTensor, i: usize, j: usize| m.as_slice()[i*d+hd*dh+j];
        for i in 0..t {
            let lim = i+1;
            let mut sc = vec![0f64; lim];
            for j in 0..lim { let mut acc=0f64; for e in 0..dh { acc += sel(&q,i,e) as f64 * sel(&k,j,e) as f64; } sc[j]=acc*inv; }
            let m = sc.iter().cloned().fold(f64::MIN, f64::max);
            let es: Vec<f64> = sc.iter().map(|&s|(s-m).exp()).collect();
            let sum: f64 = es.iter().sum();
            for e in 0..dh {
                let mut acc = 0f64;
                for j in 0..lim { acc += es[j]/sum * sel(&v8,j,e) as f64; }
                ctx[i*d+hd*dh+e] = acc as f32;
            }
        }
    }
    let ctxt = FloatTensor::new(vec![t,d], ctx).unwrap();
    let ctxq = if ctx_on { fq(&ctxt, 4, Granularity::PerToken) } else { ctxt };
    let attn = ctxq.matmul(&wo).unwrap();
    let r1 = FloatTensor::new(x.shape().to_vec(), xq.as_slice().iter().zip(attn.as_slice()).map(|(a,b)|a+b).collect()).unwrap();
    let n2 = fq(&r1, 8, Granularity::PerChannel(1));
    let h2f = rms(&n2, &block.norm2);
    let h2 = if h2_on { fq(&h2f, 4, Granularity::PerToken) } else { h2f };
    let g = h2.matmul(&wg).unwrap(); let u = h2.matmul(&wu).unwrap();
    let g8 = fq(&g, 8, Granularity::PerToken); let u8t = fq(&u, 8, Granularity::PerToken);
    let swv: Vec<f32> = g8.as_slice().iter().zip(u8t.as_slice()).map(|(&gv,&uv)| {
        let s = 1.0/(1.0+(-(gv as f64)).exp()); (gv as f64 * s * uv as f64) as f32 }).collect();
    let swt = FloatTensor::new(g8.shape().to_vec(), swv).unwrap();
    let sw = if sw_on { fq(&swt, 4, Granularity::PerToken) } else { swt };
    let ffn = sw.matmul(&wd).unwrap();
    FloatTensor::new(x.shape().to_vec(), r1.as_slice().iter().zip(ffn.as_slice()).map(|(a,b)|a+b).collect()).unwrap()
}

fn main() {
    let dims = BlockDims { d_model: 12, n_heads: 2, d_ffn: 16 };
    let block = gen_block(10, &dims);
    let spec = OutlierSpec { channels: vec![(3, 100.0)], tokens: vec![] };
    let calib = gen_calib(11, &dims, 16, 6, &spec);
    let loss = |w:bool,a:bool,v:bool,c:bool,h:bool,s:bool| -> f64 {
        let mut t = 0.0;
        for x in &calib {
            let want = float_forward(&block, x).unwrap();
            t += sim(&block, x, w,a,v,c,h,s).mse(&want);
        }
        t / calib.len() as f64
    };
    println!("all on      {:.6}", loss(true,true,true,true,true,true));
    println!("no wquant   {:.6}", loss(false,true,true,true,true,true));
    println!("no a-quant  {:.6}", loss(true,false,true,true,true,true));
    println!("no v-quant  {:.6}", loss(true,true,false,true,true,true));
    println!("no ctxquant {:.6}", loss(true,true,true,false,true,true));
    println!("no h2quant  {:.6}", loss(true,true,true,true,false,true));
    println!("no swquant  {:.6}", loss(true,true,true,true,true,false));
    println!("only wquant {:.6}", loss(true,false,false,false,false,false));
    println!("only aquant {:.6}", loss(false,true,false,false,false,false));
    println!("none        {:.6}", loss(false,false,false,false,false,false));
}
