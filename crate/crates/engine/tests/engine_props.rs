use kt_engine::suite::{check_op, OP_NAMES};
use kt_engine::{grad_check, Checkpoint, GradCheckConfig, ParamStore, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_passes_finite_differences() {
    let config = GradCheckConfig::default();
    for name in OP_NAMES {
        for seed in 0..8 {
            let report = check_op(name, seed, config).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{name} seed {seed}: {report:?}"
            );
        }
    }
}

#[test]
fn missing_adjoint_path_is_caught() {
    // The second term reads the parameter off-tape, so the tape's gradient
    // misses d(w²)/dw = 2w.
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(&[0.8, -0.4, 1.3])).unwrap();
    let report = grad_check(&mut store, &[w], GradCheckConfig::default(), |t| {
        let p = t.param(w)?;
        let s = t.sum(p)?;
        let squares: Vec<f64> = t.value(p).data().iter().map(|v| v * v).collect();
        let c = t.constant(Tensor::row(&squares))?;
        let cs = t.sum(c)?;
        t.add(s, cs)
    })
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let w = store.add_uniform("w", 5, 4, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(3, 5, 0.3)).unwrap();
        let wn = tape.param(w).unwrap();
        let y = tape.affine(x, wn, None).unwrap();
        let s = tape.softmax(y).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(y).clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row(&values)).unwrap();
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        prop_assert!((v.sum() - 1.0).abs() < 1e-9);
        prop_assert!(v.data().iter().all(|p| *p > 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        shapes in proptest::collection::vec((1usize..6, 1usize..6), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            store.add_uniform(format!("p{i}"), *r, *c, 1e3, &mut rng).unwrap();
        }
        let ck = Checkpoint::from_store("cfg-hash", &store);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        let mut fresh = store.clone();
        for (id, _) in store.iter() {
            fresh.value_mut(id).fill(0.0);
        }
        back.restore_into(&mut fresh).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
            let (ab, bb): (Vec<u64>, Vec<u64>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            prop_assert_eq!(ab, bb);
        }
    }
}
