use lilac_autodiff::{Adam, AdamConfig, ParamStore, Parameter, StoreId, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        rows in 1usize..5,
        data in matrix(4, 6),
        mask_bits in prop::collection::vec(any::<bool>(), 24),
    ) {
        let cols = 6;
        let data = data[..rows * cols].to_vec();
        let mut mask = mask_bits[..rows * cols].to_vec();
        for r in 0..rows {
            mask[r * cols] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x, Some(&mask)).unwrap();
        for (r, row) in tape.value(y).data().chunks(cols).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                if !mask[r * cols + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_loss_scale(data in matrix(3, 4), k in 0.1f64..5.0) {
        let mut store = ParamStore::new(StoreId(3));
        let key = store.insert(Parameter::new("w", Tensor::new(vec![3, 4], data).unwrap(), true)).unwrap();
        let grad_of = |scale: f64| {
            let mut tape = Tape::new();
            let w = tape.param_from(&store, "w").unwrap();
            let t = tape.tanh(w).unwrap();
            let l = tape.sum(t).unwrap();
            let l = tape.scale(l, scale).unwrap();
            tape.backward(l).unwrap().get(&key).unwrap().data().to_vec()
        };
        let (g1, gk) = (grad_of(1.0), grad_of(k));
        for (a, b) in g1.iter().zip(&gk) {
            prop_assert!((a * k - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn f32_forward_tracks_f64(data in matrix(2, 5), kernel in matrix(5, 3)) {
        let run64 = {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![2, 5], data.clone()).unwrap());
            let w = tape.constant(Tensor::new(vec![5, 3], kernel.clone()).unwrap());
            let y = tape.matmul(x, w).unwrap();
            let y = tape.softmax(y, None).unwrap();
            tape.value(y).data().to_vec()
        };
        let run32 = {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::new(vec![2, 5], data).unwrap().cast());
            let w = tape.constant(Tensor::new(vec![5, 3], kernel).unwrap().cast());
            let y = tape.matmul(x, w).unwrap();
            let y = tape.softmax(y, None).unwrap();
            tape.value(y).data().to_vec()
        };
        for (a, b) in run64.iter().zip(&run32) {
            prop_assert!((a - *b as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn adam_never_moves_frozen_parameters(steps in 1usize..40, g in -5.0f64..5.0) {
        let mut store = ParamStore::new(StoreId(0));
        store.insert(Parameter::new("frozen", Tensor::full(vec![2], 0.25), false)).unwrap();
        store.insert(Parameter::new("live", Tensor::full(vec![2], 0.25), true)).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        for _ in 0..steps {
            for id in ["frozen", "live"] {
                store.get_mut(id).unwrap().accumulate_grad(&Tensor::full(vec![2], g)).unwrap();
            }
            opt.step(&mut [&mut store]);
        }
        prop_assert_eq!(store.get("frozen").unwrap().value.data(), &[0.25, 0.25]);
        if g.abs() > 1e-6 {
            prop_assert!(store.get("live").unwrap().value.data()[0] != 0.25);
        }
    }
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![2], 1e308));
    assert!(tape.scale(x, 1e10).is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![2], 1.0));
    assert!(tape.backward(x).is_err());
}
