use maskcap::numkern::kernels::{masked_softmax, softmax};
use maskcap::numkern::{grad_check, lstm_cell, CellParams, CellVars, Tape, Tensor, Var};
use maskcap::Result;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative gradient error of `Σ w ⊙ op(inputs)` with fixed random `w`, so
/// that outputs with a constant sum (softmax) still have non-trivial gradients.
fn op_error<F>(seed: u64, inputs: Vec<Tensor>, op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let f = |p: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|t| tape.leaf(t)).collect();
        let out = op(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let w = tape.constant_vec((0..n).map(|_| wr.random_range(-1.0..1.0)).collect());
        let flat = tape.reshape(out, &[n])?;
        let prod = tape.mul(flat, w)?;
        let loss = tape.sum(prod);
        let g = tape.backward(loss)?;
        let grads = vars.iter().zip(p).map(|(v, t)| g.tensor(*v, t)).collect();
        Ok((tape.scalar(loss), grads))
    };
    grad_check(f, &inputs, EPS).unwrap().max_rel_error
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = dims(&mut r);
        let inputs = vec![rand_tensor(&mut r, &[m, k], -1.0, 1.0), rand_tensor(&mut r, &[k, n], -1.0, 1.0)];
        prop_assert!(op_error(seed, inputs, |t, v| t.matmul(v[0], v[1])) <= TOL);
    }

    #[test]
    fn matvec_and_vecmat_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut r);
        let inputs = vec![rand_tensor(&mut r, &[m, n], -1.0, 1.0), rand_tensor(&mut r, &[n], -1.0, 1.0)];
        prop_assert!(op_error(seed, inputs, |t, v| t.matvec(v[0], v[1])) <= TOL);
        let inputs = vec![rand_tensor(&mut r, &[m], -1.0, 1.0), rand_tensor(&mut r, &[m, n], -1.0, 1.0)];
        prop_assert!(op_error(seed, inputs, |t, v| t.vecmat(v[0], v[1])) <= TOL);
    }

    #[test]
    fn transpose_reshape_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut r);
        let inputs = vec![rand_tensor(&mut r, &[m, n], -1.0, 1.0)];
        let err = op_error(seed, inputs, |t, v| {
            let x = t.transpose(v[0])?;
            let y = t.tanh(x);
            t.reshape(y, &[n * m])
        });
        prop_assert!(err <= TOL);
    }

    #[test]
    fn elementwise_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, _, _) = dims(&mut r);
        let ab = || vec![rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[n], -2.0, 2.0),
                         rand_tensor(&mut ChaCha8Rng::seed_from_u64(!seed), &[n], -2.0, 2.0)];
        prop_assert!(op_error(seed, ab(), |t, v| t.add(v[0], v[1])) <= TOL);
        prop_assert!(op_error(seed, ab(), |t, v| t.sub(v[0], v[1])) <= TOL);
        prop_assert!(op_error(seed, ab(), |t, v| t.mul(v[0], v[1])) <= TOL);
        prop_assert!(op_error(seed, ab(), |t, v| Ok(t.scale(v[0], -1.7))) <= TOL);
        prop_assert!(op_error(seed, ab(), |t, v| Ok(t.sigmoid(v[0]))) <= TOL);
        prop_assert!(op_error(seed, ab(), |t, v| Ok(t.tanh(v[1]))) <= TOL);
        prop_assert!(op_error(seed, ab(), |t, v| Ok(t.sum(v[0]))) <= TOL);
    }

    #[test]
    fn add_rows_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut r);
        let inputs = vec![rand_tensor(&mut r, &[m, n], -1.0, 1.0), rand_tensor(&mut r, &[n], -1.0, 1.0)];
        prop_assert!(op_error(seed, inputs, |t, v| t.add_rows(v[0], v[1])) <= TOL);
    }

    #[test]
    fn concat_slice_gather_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, rows) = dims(&mut r);
        let row = r.random_range(0..rows);
        let start = r.random_range(0..a + b);
        let len = r.random_range(1..=a + b - start);
        let inputs = vec![rand_tensor(&mut r, &[a], -1.0, 1.0), rand_tensor(&mut r, &[b], -1.0, 1.0)];
        let err = op_error(seed, inputs, |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            t.slice(c, start, len)
        });
        prop_assert!(err <= TOL);
        let table = vec![rand_tensor(&mut r, &[rows, a], -1.0, 1.0)];
        prop_assert!(op_error(seed, table, |t, v| t.gather_row(v[0], row)) <= TOL);
    }

    #[test]
    fn softmax_family_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.random_range(1..6);
        let target = r.random_range(0..n);
        let x = rand_tensor(&mut r, &[n], -3.0, 3.0);
        prop_assert!(op_error(seed, vec![x.clone()], |t, v| t.softmax(v[0])) <= TOL);
        prop_assert!(op_error(seed, vec![x.clone()], |t, v| t.softmax_nll(v[0], target)) <= TOL);
        // Mask entries away from zero keep the pass out of the degenerate branch.
        let m = rand_tensor(&mut r, &[n], 0.05, 1.0);
        prop_assert!(op_error(seed, vec![x, m], |t, v| Ok(t.masked_softmax(v[0], v[1])?.0)) <= TOL);
    }

    #[test]
    fn bce_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.random_range(1..6);
        let target: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..2u8))).collect();
        let p = rand_tensor(&mut r, &[n], 0.05, 0.95);
        prop_assert!(op_error(seed, vec![p], |t, v| t.bce(v[0], &target)) <= TOL);
    }

    #[test]
    fn lstm_cell_gradients(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (input, hidden, _) = dims(&mut r);
        let cell = CellParams::init(input, hidden, &mut r);
        let inputs = vec![
            rand_tensor(&mut r, &[4 * hidden, input], -0.8, 0.8),
            rand_tensor(&mut r, &[4 * hidden, hidden], -0.8, 0.8),
            rand_tensor(&mut r, &[4 * hidden], -0.8, 0.8),
            rand_tensor(&mut r, &[input], -1.0, 1.0),
            rand_tensor(&mut r, &[hidden], -1.0, 1.0),
            rand_tensor(&mut r, &[hidden], -1.0, 1.0),
        ];
        prop_assert_eq!(cell.w_input.shape(), inputs[0].shape());
        let err = op_error(seed, inputs, |t, v| {
            let p = CellVars { w_input: v[0], w_hidden: v[1], bias: v[2], hidden };
            let (h, c) = lstm_cell(t, v[3], v[4], v[5], &p)?;
            t.concat(&[h, c])
        });
        prop_assert!(err <= TOL);
    }

    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        x in prop::collection::vec(-50.0..50.0f64, 1..12),
        seed in any::<u64>(),
    ) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let pp = softmax(&px);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((pp[k] - p[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn masked_softmax_scale_covariance(
        e in prop::collection::vec(-5.0..5.0f64, 1..8),
        raw in prop::collection::vec(0.0..1.0f64, 8),
        ci in 0usize..3,
    ) {
        let c = [0.1, 3.0, 100.0][ci];
        let m: Vec<f64> = raw[..e.len()].iter().map(|v| v + 0.01).collect();
        let cm: Vec<f64> = m.iter().map(|v| v * c).collect();
        let a = masked_softmax(&e, &m);
        let b = masked_softmax(&e, &cm);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn masked_softmax_examples() {
    let r = masked_softmax(&[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0]);
    assert!(!r.degenerate);
    assert_eq!(r.weights[2], 0.0);
    assert!((r.weights[0] - 0.5).abs() < 1e-15 && (r.weights[1] - 0.5).abs() < 1e-15);

    let r = masked_softmax(&[0.0, 0.0], &[0.5, 1.0]);
    assert!((r.weights[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.weights[1] - 2.0 / 3.0).abs() < 1e-15);

    let e = [0.3, -1.2, 2.0];
    let ones = masked_softmax(&e, &[1.0; 3]);
    let plain = softmax(&e);
    assert!(ones.weights.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-12));

    let zero = masked_softmax(&e, &[0.0; 3]);
    assert!(zero.degenerate);
    assert_eq!(zero.weights, plain);
}

#[test]
fn tape_masked_softmax_matches_kernel_and_flags_degeneracy() {
    let mut tape = Tape::new();
    let e = tape.constant_vec(vec![1.0, 2.0, -1.0]);
    let m = tape.constant_vec(vec![0.2, 0.0, 1.0]);
    let (w, degenerate) = tape.masked_softmax(e, m).unwrap();
    assert!(!degenerate);
    assert_eq!(tape.value(w), masked_softmax(&[1.0, 2.0, -1.0], &[0.2, 0.0, 1.0]).weights.as_slice());
    let z = tape.constant_vec(vec![0.0; 3]);
    assert!(tape.masked_softmax(e, z).unwrap().1);
}
