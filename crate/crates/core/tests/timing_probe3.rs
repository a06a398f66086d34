use std::time::Instant;
use styldiff_core::tensor::random::{rng_from_seed, uniform};
use styldiff_core::tensor::{Precision, Tape};

#[test]
fn batched_shapes() {
    let mut rng = rng_from_seed(0);
    // res0 conv1 at B=8: x [32, 8, 32, 32], w [16, 32, 3, 3]
    let x = uniform(&[32, 8, 32, 32], -1.0, 1.0, &mut rng);
    let w = uniform(&[16, 32, 3, 3], -0.2, 0.2, &mut rng);
    let b = uniform(&[16], -0.1, 0.1, &mut rng);
    for prec in [Precision::Full, Precision::Reduced] {
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut t = Tape::with_precision(prec);
            let (xv, wv, bv) = (t.constant(x.clone()), t.input(w.clone()), t.input(b.clone()));
            t.conv2d(xv, wv, bv, 1, 1).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64 * 1000.0;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut t = Tape::with_precision(prec);
            let (xv, wv, bv) = (t.constant(x.clone()), t.input(w.clone()), t.input(b.clone()));
            let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
            let l = t.mean_all(y).unwrap();
            t.grad(l, &[wv]).unwrap();
        }
        let fb = t0.elapsed().as_secs_f64() / reps as f64 * 1000.0;
        // 8x res0c1 37.7M MAC fwd
        eprintln!("{prec:?} res0c1 B=8: fwd {fwd:.2} ms ({:.1} G), fwd+bwd {fb:.2} ms ({:.1} G)",
            37.7 / fwd, 113.2 / fb);
    }
    // raw GEMM [16,288]x[288,8192]
    let a = uniform(&[16, 288], -1.0, 1.0, &mut rng);
    let bmat = uniform(&[288, 8192], -1.0, 1.0, &mut rng);
    for prec in [Precision::Full, Precision::Reduced] {
        let reps = 30;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut t = Tape::with_precision(prec);
            let (av, bv) = (t.constant(a.clone()), t.constant(bmat.clone()));
            t.matmul(av, bv).unwrap();
        }
        let ms = t0.elapsed().as_secs_f64() / reps as f64 * 1000.0;
        eprintln!("{prec:?} gemm 16x288x8192: {ms:.2} ms ({:.1} GMAC/s)", 37.7 / ms);
    }
    // elementwise at batched size
    let big = uniform(&[32, 8, 32, 32], -1.0, 1.0, &mut rng);
    let t0 = Instant::now();
    for _ in 0..100 {
        let mut t = Tape::new();
        let v = t.constant(big.clone());
        t.leaky_relu(v, 0.2);
    }
    eprintln!("leaky on [32,8,32,32]: {:.3} ms (incl 2MB clone)", t0.elapsed().as_secs_f64() / 100.0 * 1000.0);
}
