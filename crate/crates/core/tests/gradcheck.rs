//! Finite-difference verification of every differentiable tape primitive.
//! The numeric oracle never touches the backward pass it checks.

use styldiff_core::tensor::gradcheck::{finite_diff, rel_error};
use styldiff_core::tensor::random::{rng_from_seed, uniform};
use styldiff_core::{NdArray, Result, Tape, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Scalar probe: sum(op_output ∘ fixed_weight). The weight keeps gradients
/// non-uniform so transposition bugs cannot cancel out.
fn probe(tape: &mut Tape, out: Var, weight: &NdArray) -> Result<Var> {
    let w = tape.input(weight.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

fn check_op<F>(name: &str, inputs: &[NdArray], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // One fixed weight per op, sized from a dry run.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = build(&mut tape, &vars).expect(name);
    let weight = uniform(
        tape.value(out).shape(),
        0.3,
        1.3,
        &mut rng_from_seed(0xABCD),
    );
    let loss = probe(&mut tape, out, &weight).expect(name);
    let analytic = tape.grad(loss, &vars).expect(name);

    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff(
            |xx| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| t.input(if j == i { xx.clone() } else { inp.clone() }))
                    .collect();
                let o = build(&mut t, &vs)?;
                let l = probe(&mut t, o, &weight)?;
                t.value(l).scalar_value()
            },
            x,
            H,
        )
        .expect(name);
        let err = rel_error(&analytic[i], &numeric);
        assert!(
            err <= TOL,
            "{name}: input {i} gradient off by {err:.3e} (tol {TOL:.0e})"
        );
    }
}

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> NdArray {
    uniform(shape, lo, hi, &mut rng_from_seed(seed))
}

#[test]
fn elementwise_primitives() {
    let a = rand(&[4, 5], -1.0, 1.0, 1);
    let b = rand(&[4, 5], -1.0, 1.0, 2);
    check_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -2.5)));
    check_op("add_scalar", &[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7)));
    check_op("abs", &[a.clone()], |t, v| Ok(t.abs(v[0])));
    check_op("leaky_relu", &[a], |t, v| Ok(t.leaky_relu(v[0], 0.2)));
    let pos = rand(&[6], 0.5, 2.0, 3);
    check_op("sqrt", &[pos], |t, v| t.sqrt(v[0]));
    // Keep values far from the clamp edges so FD stays exact.
    let inner = rand(&[8], -0.4, 0.4, 4);
    check_op("clamp", &[inner], |t, v| t.clamp(v[0], -0.5, 0.5));
}

#[test]
fn matmul_primitive() {
    let a = rand(&[3, 4], -1.0, 1.0, 5);
    let b = rand(&[4, 2], -1.0, 1.0, 6);
    check_op("matmul", &[a, b], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn conv_primitives() {
    let x = rand(&[2, 6, 6], -1.0, 1.0, 7);
    let w = rand(&[3, 2, 3, 3], -0.5, 0.5, 8);
    let b = rand(&[3], -0.5, 0.5, 9);
    check_op("conv2d s1p1", &[x.clone(), w.clone(), b.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    });
    check_op("conv2d s2p1", &[x.clone(), w, b.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 1)
    });
    let wt = rand(&[2, 3, 2, 2], -0.5, 0.5, 10);
    check_op("conv2d_transpose s2", &[x, wt, b], |t, v| {
        t.conv2d_transpose(v[0], v[1], v[2], 2, 0)
    });
}

#[test]
fn channel_primitives() {
    let x = rand(&[3, 4, 4], -1.0, 1.0, 11);
    let g = rand(&[3], 0.5, 1.5, 12);
    let b = rand(&[3], -0.3, 0.3, 13);
    check_op("channel_affine", &[x.clone(), g, b], |t, v| {
        t.channel_affine(v[0], v[1], v[2])
    });
    let ss = rand(&[6], -0.3, 0.3, 14);
    check_op("scale_shift", &[x.clone(), ss], |t, v| {
        t.scale_shift(v[0], v[1])
    });
    let y = rand(&[2, 4, 4], -1.0, 1.0, 15);
    check_op("concat_channels", &[x.clone(), y], |t, v| {
        t.concat_channels(v[0], v[1])
    });
    check_op("channel_mean", &[x.clone()], |t, v| t.channel_mean(v[0]));
    check_op("channel_std", &[x.clone()], |t, v| t.channel_std(v[0]));
    check_op("reshape", &[x], |t, v| t.reshape(v[0], &[4, 12]));
}

#[test]
fn reduction_and_vector_primitives() {
    let a = rand(&[7], -1.0, 1.0, 16);
    let b = rand(&[5], -1.0, 1.0, 17);
    check_op("concat_vecs", &[a.clone(), b.clone()], |t, v| {
        t.concat_vecs(&[v[0], v[1]])
    });
    check_op("mean_all", &[a.clone()], |t, v| t.mean_all(v[0]));
    check_op("sum_all", &[a.clone()], |t, v| Ok(t.sum_all(v[0])));
    let c = rand(&[7], 0.2, 1.0, 18);
    check_op("cosine_sim", &[a, c], |t, v| t.cosine_sim(v[0], v[1]));
}

/// Purity: replaying the same recorded computation is bit-identical.
#[test]
fn tape_evaluation_is_deterministic() {
    let x = rand(&[3, 8, 8], -1.0, 1.0, 19);
    let w = rand(&[4, 3, 3, 3], -0.5, 0.5, 20);
    let b = rand(&[4], -0.5, 0.5, 21);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.input(x.clone()), t.input(w.clone()), t.input(b.clone()));
        let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
        let y = t.leaky_relu(y, 0.2);
        let l = t.mean_all(y).unwrap();
        let g = t.grad(l, &[wv]).unwrap();
        (t.value(l).scalar_value().unwrap(), g[0].clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
