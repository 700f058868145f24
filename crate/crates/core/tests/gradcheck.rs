mod common;

use common::{param_gradcheck, rel_err, tiny_model, FD_STEP};
use melbert::heads::Variant;
use melbert::rng::{stream, Domain, StreamRng};
use melbert::tensor::{Tape, Tensor, Var};
use melbert::training::TrainConfig;
use melbert::Result;
use rand::Rng;

const PROBES: usize = 100;
const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any output into a scalar.
fn contract(tape: &mut Tape, out: Var, r: &Tensor) -> Var {
    let w = tape.constant(r.reshape(tape.value(out).shape()).unwrap());
    let m = tape.mul(out, w).unwrap();
    tape.sum(m)
}

fn eval(inputs: &[Tensor], r: &Tensor, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = contract(&mut tape, out, r);
    tape.value(l).item()
}

/// Worst relative error over `PROBES` random (input draw, element) probes.
fn check_op(id: u64, make: &dyn Fn(&mut StreamRng) -> Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut worst: f64 = 0.0;
    for probe in 0..PROBES as u64 {
        let mut rng = stream(id, Domain::Test, probe, 0);
        let mut inputs = make(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let r = uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
        let l = contract(&mut tape, out, &r);
        let grads = tape.backward(l).unwrap();

        let which = rng.random_range(0..inputs.len());
        let idx = rng.random_range(0..inputs[which].len());
        let analytic = grads.get(vars[which]).unwrap().data()[idx];
        let orig = inputs[which].data()[idx];
        inputs[which].data_mut()[idx] = orig + FD_STEP;
        let up = eval(&inputs, &r, f);
        inputs[which].data_mut()[idx] = orig - FD_STEP;
        let down = eval(&inputs, &r, f);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

macro_rules! op_test {
    ($name:ident, $id:expr, $make:expr, $f:expr) => {
        #[test]
        fn $name() {
            let worst = check_op($id, &$make, &$f);
            assert!(worst < TOL, "{} max relative error {worst:e}", stringify!($name));
        }
    };
}

op_test!(grad_matmul, 1, |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r)], |t, v| t.matmul(v[0], v[1]));
op_test!(grad_matmul_nt, 2, |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[2, 4], -1.0, 1.0, r)], |t, v| t
    .matmul_nt(v[0], v[1]));
op_test!(grad_add, 3, |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], |t, v| t.add(v[0], v[1]));
op_test!(grad_add_row, 4, |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)], |t, v| t
    .add_row(v[0], v[1]));
op_test!(grad_mul, 5, |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], |t, v| t.mul(v[0], v[1]));
op_test!(grad_scale, 6, |r| vec![uniform(&[3, 4], -1.0, 1.0, r)], |t, v| Ok(t.scale(v[0], -1.7)));
op_test!(grad_sum, 7, |r| vec![uniform(&[3, 4], -1.0, 1.0, r)], |t, v| Ok(t.sum(v[0])));
op_test!(grad_mean, 8, |r| vec![uniform(&[3, 4], -1.0, 1.0, r)], |t, v| Ok(t.mean(v[0])));
op_test!(grad_softmax_rows, 9, |r| vec![uniform(&[3, 4], -2.0, 2.0, r)], |t, v| t.softmax(v[0], 1));
op_test!(grad_softmax_cols, 10, |r| vec![uniform(&[3, 4], -2.0, 2.0, r)], |t, v| t.softmax(v[0], 0));
op_test!(
    grad_layer_norm,
    11,
    |r| vec![uniform(&[3, 5], -2.0, 2.0, r), uniform(&[5], 0.5, 1.5, r), uniform(&[5], -0.5, 0.5, r)],
    |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12)
);
op_test!(grad_gelu, 12, |r| vec![uniform(&[3, 4], -3.0, 3.0, r)], |t, v| Ok(t.gelu(v[0])));
op_test!(grad_sigmoid, 13, |r| vec![uniform(&[3, 4], -4.0, 4.0, r)], |t, v| Ok(t.sigmoid(v[0])));
op_test!(grad_dropout_fixed_mask, 14, |r| vec![uniform(&[4, 5], -1.0, 1.0, r)], |t, v| {
    let mut rng = stream(5, Domain::Dropout, 0, 0);
    t.dropout(v[0], 0.3, true, &mut rng)
});
op_test!(grad_gather_rows, 15, |r| vec![uniform(&[6, 3], -1.0, 1.0, r)], |t, v| t.gather_rows(v[0], &[0, 2, 2, 5]));
op_test!(grad_slice_rows, 16, |r| vec![uniform(&[4, 3], -1.0, 1.0, r)], |t, v| t.slice_rows(v[0], 1, 3));
op_test!(grad_slice_cols, 17, |r| vec![uniform(&[3, 5], -1.0, 1.0, r)], |t, v| t.slice_cols(v[0], 1, 4));
op_test!(grad_concat_rows, 18, |r| vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[1, 3], -1.0, 1.0, r)], |t, v| t
    .concat(&[v[0], v[1]], 0));
op_test!(grad_concat_cols, 19, |r| vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 2], -1.0, 1.0, r)], |t, v| t
    .concat(&[v[0], v[1]], 1));
op_test!(grad_mean_rows, 20, |r| vec![uniform(&[5, 3], -1.0, 1.0, r)], |t, v| t.mean_rows(v[0], 1, 4));
op_test!(grad_reshape, 21, |r| vec![uniform(&[3, 4], -1.0, 1.0, r)], |t, v| t.reshape(v[0], &[4, 3]));
op_test!(grad_bce_weighted, 22, |r| vec![uniform(&[6], 0.05, 0.95, r)], |t, v| t.bce(
    v[0],
    &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
    &[10.0, 1.0, 10.0, 1.0, 1.0, 10.0]
));
op_test!(grad_mse, 23, |r| vec![uniform(&[5], -1.0, 1.0, r)], |t, v| t.mse(v[0], &[0.1, -0.3, 0.5, 0.9, 0.0]));

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = stream(31, Domain::Test, 0, 0);
    let inputs = vec![
        uniform(&[5, 4], -1.0, 1.0, &mut rng),
        uniform(&[4, 6], -0.8, 0.8, &mut rng),
        uniform(&[6], -0.2, 0.2, &mut rng),
        uniform(&[6, 1], -0.8, 0.8, &mut rng),
        uniform(&[1], -0.2, 0.2, &mut rng),
    ];
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.gelu(h);
        let z = t.matmul(h, v[3])?;
        let z = t.add_row(z, v[4])?;
        let p = t.sigmoid(z);
        t.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0], &[1.0; 5])
    };
    let r = Tensor::scalar(1.0);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let l = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    // every parameter element, not just a sample
    for which in 1..inputs.len() {
        for idx in 0..inputs[which].len() {
            let mut x = inputs.clone();
            let orig = x[which].data()[idx];
            x[which].data_mut()[idx] = orig + FD_STEP;
            let up = eval(&x, &r, &f);
            x[which].data_mut()[idx] = orig - FD_STEP;
            let down = eval(&x, &r, &f);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.get(vars[which]).unwrap().data()[idx], numeric));
        }
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

/// Random graph over shared leaves, returning two scalar losses.
fn random_graph(tape: &mut Tape, leaves: &[Var], rng: &mut StreamRng) -> (Var, Var) {
    let mut nodes: Vec<Var> = leaves.to_vec();
    for _ in 0..12 {
        let a = nodes[rng.random_range(0..nodes.len())];
        let b = nodes[rng.random_range(0..nodes.len())];
        let n = match rng.random_range(0..7) {
            0 => tape.add(a, b).unwrap(),
            1 => tape.mul(a, b).unwrap(),
            2 => tape.matmul(a, b).unwrap(),
            3 => tape.gelu(a),
            4 => tape.sigmoid(a),
            5 => tape.softmax(a, 1).unwrap(),
            _ => tape.scale(a, 0.5),
        };
        nodes.push(n);
    }
    let x = nodes[rng.random_range(leaves.len()..nodes.len())];
    let y = nodes[rng.random_range(leaves.len()..nodes.len())];
    let l1 = tape.sum(x);
    let l2 = tape.mean(y);
    (l1, l2)
}

#[test]
fn backward_is_linear_in_the_loss() {
    for g in 0..20 {
        let mut rng = stream(41, Domain::Test, g, 0);
        let leaves_t: Vec<Tensor> = (0..3).map(|_| uniform(&[3, 3], -1.0, 1.0, &mut rng)).collect();
        let build = |rng_seed: u64| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = leaves_t.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let mut r = stream(rng_seed, Domain::Test, g, 1);
            let (l1, l2) = random_graph(&mut tape, &leaves, &mut r);
            (tape, leaves, l1, l2)
        };
        let (mut tape, leaves, l1, l2) = build(42);
        let total = tape.add(l1, l2).unwrap();
        let g_total = tape.backward(total).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        for &v in &leaves {
            let (gt, a, b) = (g_total.get(v).unwrap(), g1.get(v).unwrap(), g2.get(v).unwrap());
            for i in 0..gt.len() {
                let want = a.data()[i] + b.data()[i];
                assert!((gt.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0), "graph {g}");
            }
        }
    }
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let (model, data) = tiny_model(Variant::Melbert, 1, 8, 3);
    let inputs = model.prepare_all(&data[..4]).unwrap();
    let batch: Vec<_> = inputs.iter().collect();
    let cfg = TrainConfig { pos_weight: 3.0, ..Default::default() };
    let run = || {
        let mut s = melbert::params::Session::train(&model.params, melbert::params::Mode::Train, stream(9, Domain::Dropout, 0, 0));
        let l = melbert::training::batch_objective(&mut s, &model.config, &batch, &cfg).unwrap();
        s.param_grads(l).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn one_layer_encoder_end_to_end() {
    for variant in [Variant::Melbert, Variant::BaseAll2All, Variant::Seq] {
        let (model, data) = tiny_model(variant, 1, 8, 5);
        let inputs = model.prepare_all(&data[..3]).unwrap();
        let batch: Vec<_> = inputs.iter().collect();
        let cfg = TrainConfig { pos_weight: 2.0, ..Default::default() };
        let (worst, at) = param_gradcheck(&model, &batch, &cfg, 150, 11);
        assert!(worst < TOL, "{variant}: {worst:e} at {at}");
    }
}
