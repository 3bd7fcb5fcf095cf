//! Optimizer trajectories against hand-stepped f64 recurrences.

use diffcore::{clip_params, Adam, AdamConfig, ParamStore, RmsProp, RmsPropConfig, Tensor};
use proptest::prelude::*;

fn quadratic_grad(store: &mut ParamStore) {
    let w = store.tensor(0).values()[0];
    store.zero_grad();
    store.tensor_mut(0).accumulate_grad(&[2.0 * w]).unwrap();
}

#[test]
fn adam_three_steps_on_square() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(1.0f32)).unwrap();
    let mut opt = Adam::new(AdamConfig::default());

    let (lr, b1, b2, eps) = (1e-4f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        quadratic_grad(&mut store);
        opt.step(&mut store).unwrap();

        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        w -= lr * m_hat / (v_hat.sqrt() + eps);

        let got = store.tensor(0).values()[0] as f64;
        assert!((got - w).abs() < 1e-6, "step {t}: {got} vs {w}");
    }
    assert_eq!(opt.steps(), 3);
}

#[test]
fn rmsprop_five_steps_on_square() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(1.0f32)).unwrap();
    let mut opt = RmsProp::new(RmsPropConfig::default());

    let (lr, rho, eps) = (5e-5f64, 0.9f64, 1e-8f64);
    let (mut w, mut v) = (1.0f64, 0.0f64);
    for t in 1..=5 {
        quadratic_grad(&mut store);
        opt.step(&mut store).unwrap();

        let g = 2.0 * w;
        v = rho * v + (1.0 - rho) * g * g;
        w -= lr * g / (v.sqrt() + eps);

        let got = store.tensor(0).values()[0] as f64;
        assert!((got - w).abs() < 1e-6, "step {t}: {got} vs {w}");
    }
    assert!(opt.square_avg()[0][0] >= 0.0);
}

fn store_from(values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
    s
}

proptest! {
    #[test]
    fn clip_is_idempotent_and_bounded(
        values in prop::collection::vec(-5.0f32..5.0, 1..64),
        bound in 0.001f32..2.0,
    ) {
        let mut s = store_from(&values);
        clip_params(&mut s, bound).unwrap();
        let once: Vec<u32> = s.tensor(0).values().iter().map(|v| v.to_bits()).collect();
        prop_assert!(s.tensor(0).values().iter().all(|v| v.abs() <= bound));
        clip_params(&mut s, bound).unwrap();
        let twice: Vec<u32> = s.tensor(0).values().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn zero_gradient_leaves_values_bitwise(values in prop::collection::vec(-5.0f32..5.0, 1..32)) {
        let mut s = store_from(&values);
        s.tensor_mut(0).accumulate_grad(&vec![0.0; values.len()]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        let mut rms = RmsProp::new(RmsPropConfig::default());
        rms.step(&mut s).unwrap();
        rms.step(&mut s).unwrap();
        for (a, b) in s.tensor(0).values().iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(adam.steps(), 1);
    }
}
