//! Finite-difference checks of every differentiable tape operation.
//!
//! The network code is generic over the float type; these checks run it in
//! f64 so that central differences are accurate to well below the 1e-3
//! relative-error budget.

use diffcore::{
    gradient_check, gradient_check_params, BatchNormStats, NormMode, ParamStore, Result, Tape,
    Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const POINTS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Reduces `y` to a scalar through fixed pseudo-random weights so that every
/// output coordinate contributes a distinct amount.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 + 13) % 17) as f64 / 8.0 - 1.0).collect();
    let w = tape.constant_values(&shape, w)?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn store(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.insert(format!("p{i}"), t).unwrap();
    }
    s
}

fn check_all<F>(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> ParamStore<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = make(&mut rng);
        let err = gradient_check_params(f, &params, H).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn matmul_gradients() {
    // bilinear in each argument, so h = 1e-3 has no truncation error
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = store(vec![random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3])]);
        let err = gradient_check_params(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y)
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < TOL, "matmul seed {seed}: relative error {err}");
    }
}

#[test]
fn elementwise_gradients() {
    check_all(
        "unary",
        |r| store(vec![random(r, &[3, 4])]),
        |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.tanh(v[0]);
            let c = t.relu(v[0]);
            let s = t.add(a, b)?;
            let s = t.add(s, c)?;
            project(t, s)
        },
    );
    check_all(
        "binary",
        |r| store(vec![random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[1, 3])]),
        |t, v| {
            let m = t.mul(v[0], v[1])?;
            let a = t.add(m, v[0])?;
            let a = t.add_row(a, v[2])?;
            let a = t.affine(a, -0.7, 0.2);
            let s = t.square(a);
            project(t, s)
        },
    );
}

#[test]
fn sigmoid_at_one_matches_closed_form() {
    let x = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let y = tape.sigmoid(v);
    let l = tape.affine(y, 3.0, 0.0);
    let g = tape.backward(l).unwrap();
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.get(v).unwrap()[0] - 3.0 * s * (1.0 - s)).abs() < 1e-12);
    assert!(gradient_check(|t, v| {
        let y = t.sigmoid(v);
        Ok(t.affine(y, 3.0, 0.0))
    }, &x, H)
    .unwrap()
        < 1e-6);
}

#[test]
fn reduction_and_softmax_gradients() {
    check_all(
        "softmax",
        |r| store(vec![random(r, &[3, 5])]),
        |t, v| {
            let s = t.softmax_rows(v[0])?;
            let l = t.log_softmax_rows(v[0])?;
            let m = t.mean(l);
            let p = project(t, s)?;
            t.add(p, m)
        },
    );
}

#[test]
fn indexing_gradients() {
    check_all(
        "embed/pick/scale",
        |r| store(vec![random(r, &[5, 3])]),
        |t, v| {
            let e = t.embed_lookup(v[0], &[1, 3, 1])?;
            let p = t.pick(e, &[0, 2, 1])?;
            let s = t.scale_rows(p, &[0.5, -2.0, 1.5])?;
            let q = project(t, e)?;
            let s = t.sum(s);
            t.add(q, s)
        },
    );
    check_all(
        "slice/concat/repeat/reshape",
        |r| store(vec![random(r, &[2, 4]), random(r, &[2, 2])]),
        |t, v| {
            let a = t.slice_cols(v[0], 1, 2)?;
            let c = t.concat_cols(&[a, v[1], v[0]])?;
            let r = t.repeat_rows(c, 3)?;
            let r = t.reshape(r, &[4, 12])?;
            let r = t.tanh(r);
            project(t, r)
        },
    );
}

#[test]
fn grouped_gradients() {
    check_all(
        "group_weighted_sum/group_mean",
        |r| store(vec![random(r, &[2, 3]), random(r, &[6, 4])]),
        |t, v| {
            let w = t.softmax_rows(v[0])?;
            let s = t.group_weighted_sum(w, v[1])?;
            let m = t.group_mean(v[1], 3)?;
            let x = t.mul(s, m)?;
            project(t, x)
        },
    );
}

#[test]
fn conv_and_pool_gradients() {
    check_all(
        "conv_time",
        |r| store(vec![random(r, &[12, 4]), random(r, &[2, 12]), random(r, &[1, 2])]),
        |t, v| {
            let y = t.conv_time(v[0], v[1], v[2], 6, 3)?;
            let y = t.tanh(y);
            project(t, y)
        },
    );
    // Random continuous inputs are tie-free with probability one; the step is
    // small enough not to move the argmax.
    check_all(
        "max_over_time",
        |r| store(vec![random(r, &[10, 3])]),
        |t, v| {
            let m = t.max_over_time(v[0], 5)?;
            project(t, m)
        },
    );
}

#[test]
fn batch_norm_gradients() {
    for mode in [NormMode::Train, NormMode::Infer] {
        check_all(
            "batch_norm",
            |r| store(vec![random(r, &[8, 4]), random(r, &[1, 4]), random(r, &[1, 4])]),
            move |t, v| {
                let mut stats = BatchNormStats::new(4);
                stats.mean = vec![0.1, -0.2, 0.3, 0.0];
                stats.var = vec![0.5, 1.5, 2.0, 0.8];
                let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode)?;
                let y = t.tanh(y);
                project(t, y)
            },
        );
    }
}

#[test]
fn composite_lstm_step_gradient() {
    // One LSTM cell step written directly against the tape primitives.
    check_all(
        "lstm step",
        |r| {
            store(vec![
                random(r, &[2, 3]),  // input
                random(r, &[2, 4]),  // h
                random(r, &[2, 4]),  // c
                random(r, &[3, 16]), // W
                random(r, &[4, 16]), // H
                random(r, &[1, 16]), // b
            ])
        },
        |t, v| {
            let a = t.matmul(v[0], v[3])?;
            let b = t.matmul(v[1], v[4])?;
            let z = t.add(a, b)?;
            let z = t.add_row(z, v[5])?;
            let i = t.slice_cols(z, 0, 4)?;
            let f = t.slice_cols(z, 4, 4)?;
            let g = t.slice_cols(z, 8, 4)?;
            let o = t.slice_cols(z, 12, 4)?;
            let (i, f, g, o) = (t.sigmoid(i), t.sigmoid(f), t.tanh(g), t.sigmoid(o));
            let fc = t.mul(f, v[2])?;
            let ig = t.mul(i, g)?;
            let c = t.add(fc, ig)?;
            let tc = t.tanh(c);
            let h = t.mul(o, tc)?;
            let lp = t.log_softmax_rows(h)?;
            let p = t.pick(lp, &[1, 3])?;
            let l = t.sum(p);
            Ok(t.affine(l, -1.0, 0.0))
        },
    );
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Tensor<f32> = Tensor::from_fn(&[6, 7], |_| rng.random_range(-1.0..1.0));
        let b: Tensor<f32> = Tensor::from_fn(&[7, 3], |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::new();
        let (va, vb) = (t.param(&a), t.param(&b));
        let y = t.matmul(va, vb).unwrap();
        let y = t.log_softmax_rows(y).unwrap();
        let y = t.pick(y, &[0, 1, 2, 0, 1, 2]).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        (g.get(va).unwrap().to_vec(), g.get(vb).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn reachable_params_all_receive_gradients() {
    let mut s = ParamStore::<f32>::new();
    s.insert("a", Tensor::full(&[2, 2], 0.5)).unwrap();
    s.insert("unused", Tensor::full(&[3], 1.0)).unwrap();
    let mut t = Tape::new();
    let vars = s.bind(&mut t);
    let y = t.tanh(vars[0]);
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    s.accumulate(&vars, &g).unwrap();
    assert!(s.get("a").unwrap().grad().is_some());
    assert!(s.get("unused").unwrap().grad().is_none());
    // gradients accumulate until the caller zeroes them
    s.accumulate(&vars, &g).unwrap();
    let once = g.get(vars[0]).unwrap()[0];
    assert_eq!(s.get("a").unwrap().grad().unwrap()[0], 2.0 * once);
    s.zero_grad();
    assert_eq!(s.get("a").unwrap().grad().unwrap()[0], 0.0);
}
