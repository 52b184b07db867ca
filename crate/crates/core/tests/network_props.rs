use kt_core::dataset::InteractionRecord;
use kt_core::factors::{EncodedInstance, Encoder};
use kt_core::network::{interaction_pool, AblationFlags, Batch, Model, ModelDims, NetworkConfig};
use kt_core::pretrain::{DualPretrained, PretrainedQuestions};
use kt_core::question_graph::{compute_difficulty, DifficultyTable};
use kt_core::harness::check_full_loss;
use kt_engine::{Adagrad, GradCheckConfig, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: ModelDims = ModelDims {
    num_students: 3,
    num_questions: 4,
    num_concepts: 3,
};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

fn pretrained(dim: usize, seed: u64) -> DualPretrained {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sub = || PretrainedQuestions {
        table: random_tensor(&mut rng, DIMS.num_questions, dim),
        head: random_tensor(&mut rng, dim, 1),
        loss_trace: Vec::new(),
    };
    DualPretrained { f: sub(), j: sub() }
}

fn records() -> Vec<InteractionRecord> {
    let concepts = [vec![0, 1], vec![0, 1], vec![1, 2], vec![2]];
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in 0..3 {
        for step in 0..6 {
            let q = rng.gen_range(0..4);
            out.push(InteractionRecord {
                student: s,
                question: q,
                concepts: concepts[q].clone(),
                step,
                outcome: rng.gen_bool(0.6),
            });
        }
    }
    out
}

fn setup(config: NetworkConfig) -> (Model, Vec<EncodedInstance>, DifficultyTable) {
    let recs = records();
    let instances = Encoder::new(3, 4, 3).encode_log(&recs).unwrap();
    let diff = compute_difficulty(&recs, 4, 1).unwrap();
    let pt = pretrained(config.dim, 9);
    (Model::new(config, DIMS, Some(&pt), 3).unwrap(), instances, diff)
}

fn small(dim: usize) -> NetworkConfig {
    NetworkConfig {
        dim,
        attention_hidden: 6,
        dnn_hidden: vec![8, 4],
        ..NetworkConfig::default()
    }
}

#[test]
fn interaction_pool_matches_pairwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let rows: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, 1, 16)).collect();
        let mut t = Tape::new(&store);
        let ids: Vec<_> = rows.iter().map(|r| t.constant(r.clone()).unwrap()).collect();
        let v = interaction_pool(&mut t, &ids).unwrap();
        for k in 0..16 {
            let mut brute = 0.0;
            for i in 0..4 {
                for j in i + 1..4 {
                    brute += rows[i].get(0, k) * rows[j].get(0, k);
                }
            }
            worst = worst.max((t.value(v).get(0, k) - brute).abs());
        }
    }
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn full_loss_passes_gradient_check() {
    let cfg = GradCheckConfig {
        samples_per_param: 40,
        ..GradCheckConfig::default()
    };
    let report = check_full_loss(8, cfg).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn zeroed_head_predicts_one_half() {
    let (mut model, instances, _) = setup(small(8));
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.starts_with("dnn.2")).map(|(id, _)| id).collect();
    for id in ids {
        model.store.value_mut(id).fill(0.0);
    }
    for p in model.predict_probs(&instances).unwrap() {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn attention_scores_are_distributions() {
    let (model, instances, _) = setup(small(8));
    for out in model.predict(&instances).unwrap() {
        assert!(out.prob > 0.0 && out.prob < 1.0);
        for scores in [&out.acnn_f, &out.acnn_j, &out.pool_f, &out.pool_j] {
            assert!(scores.iter().all(|&a| a > 0.0));
            assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.acnn_f.len(), 3);
        assert_eq!(out.pool_f.len(), 4);
    }
}

#[test]
fn uniform_attention_and_reduced_attempts() {
    let flags = AblationFlags::parse("r_attention,r_recent").unwrap();
    let (model, instances, _) = setup(NetworkConfig { flags, ..small(8) });
    for out in model.predict(&instances).unwrap() {
        assert_eq!(out.acnn_f, [0.5, 0.5]);
        assert_eq!(out.pool_j, [0.25; 4]);
    }
}

#[test]
fn subspaces_are_isolated() {
    let (mut model, instances, _) = setup(small(8));
    let refs: Vec<&EncodedInstance> = instances.iter().collect();
    let batch = Batch::new(&refs, true).unwrap();
    let run = |m: &Model| {
        let mut t = Tape::new(&m.store);
        let fw = m.forward(&mut t, &batch, None).unwrap();
        (t.value(fw.v_f.unwrap()).clone(), t.value(fw.v_j.unwrap()).clone())
    };
    let (f0, j0) = run(&model);
    let j_ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.starts_with("J.")).map(|(id, _)| id).collect();
    for id in j_ids {
        model.store.value_mut(id).fill(0.0);
    }
    let (f1, j1) = run(&model);
    assert_eq!(f0.data(), f1.data());
    assert_ne!(j0.data(), j1.data());

    let (mut model, _, _) = setup(small(8));
    let f_ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.starts_with("F.")).map(|(id, _)| id).collect();
    for id in f_ids {
        model.store.value_mut(id).fill(0.0);
    }
    let (f2, j2) = run(&model);
    assert_eq!(j0.data(), j2.data());
    assert_ne!(f0.data(), f2.data());
}

#[test]
fn attempt_scores_follow_the_tables_not_positions() {
    let (mut model, instances, _) = setup(small(8));
    let before = model.predict(&instances).unwrap();
    for sub in 0..2 {
        let s = model.subspace_param(sub, "success").unwrap();
        let f = model.subspace_param(sub, "fail").unwrap();
        let sv = model.store.value(s).clone();
        let fv = model.store.value(f).clone();
        *model.store.value_mut(s) = fv;
        *model.store.value_mut(f) = sv;
    }
    // Swap the count inputs as well, so each factor's embedding moves to
    // the other position unchanged.
    let swapped: Vec<EncodedInstance> = instances
        .iter()
        .map(|i| EncodedInstance {
            success: i.fail.clone(),
            fail: i.success.clone(),
            ..i.clone()
        })
        .collect();
    let after = model.predict(&swapped).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!((a.acnn_f[0] - b.acnn_f[1]).abs() < 1e-12);
        assert!((a.acnn_f[1] - b.acnn_f[0]).abs() < 1e-12);
        assert!((a.acnn_j[2] - b.acnn_j[2]).abs() < 1e-12);
    }
}

#[test]
fn regularized_loss_matches_hand_sum() {
    let (model, instances, diff) = setup(small(8));
    let two: Vec<&EncodedInstance> = instances[0..2].iter().collect();
    let batch = Batch::new(&two, true).unwrap();
    let mut t = Tape::new(&model.store);
    let fw = model.forward(&mut t, &batch, None).unwrap();
    let total = model.total_loss(&mut t, &batch, &fw, Some(&diff), 0.7).unwrap();
    let total = t.value(total).item();
    let probs = t.value(fw.prob).data().to_vec();

    let mut bce = 0.0;
    for (p, inst) in probs.iter().zip(&two) {
        bce -= if inst.label { p.ln() } else { (1.0 - p).ln() };
    }
    let mut phi = 0.0;
    for sub in 0..2 {
        let table = model.store.value(model.subspace_param(sub, "question").unwrap());
        let head = model.store.value(model.subspace_param(sub, "head").unwrap());
        for inst in &two {
            let q = inst.question_index();
            let pred: f64 = table.row_slice(q).iter().zip(head.data()).map(|(a, b)| a * b).sum();
            phi += (pred - diff.get(q)).powi(2);
        }
    }
    assert!((total - (bce + 0.7 * phi)).abs() < 1e-12);

    let mut t = Tape::new(&model.store);
    let fw = model.forward(&mut t, &batch, None).unwrap();
    let plain = model.total_loss(&mut t, &batch, &fw, Some(&diff), 0.0).unwrap();
    assert!((t.value(plain).item() - bce).abs() < 1e-12);
}

#[test]
fn heads_stay_frozen_through_training() {
    let (mut model, instances, diff) = setup(small(8));
    let heads: Vec<Tensor> = model.heads().into_iter().cloned().collect();
    let refs: Vec<&EncodedInstance> = instances.iter().collect();
    let batch = Batch::new(&refs, true).unwrap();
    let opt = Adagrad::new(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let before_q = model.store.value(model.subspace_param(0, "question").unwrap()).clone();
    for _ in 0..20 {
        let grads = {
            let mut t = Tape::new(&model.store);
            let fw = model.forward(&mut t, &batch, Some(&mut rng)).unwrap();
            let loss = model.total_loss(&mut t, &batch, &fw, Some(&diff), 1.0).unwrap();
            t.backward(loss).unwrap()
        };
        model.store.accumulate(&grads);
        opt.step(&mut model.store);
    }
    for (h, before) in model.heads().into_iter().zip(&heads) {
        assert_eq!(h.data(), before.data());
    }
    let after_q = model.store.value(model.subspace_param(0, "question").unwrap());
    assert_ne!(after_q.data(), before_q.data());
}

#[test]
fn model_requires_pretraining_unless_ablated() {
    assert!(Model::new(small(4), DIMS, None, 0).is_err());
    let flags = AblationFlags::parse("r_pre").unwrap();
    assert!(Model::new(NetworkConfig { flags, ..small(4) }, DIMS, None, 0).is_ok());
    let flags = AblationFlags::parse("r_dual,r_dnn,r_feature").unwrap();
    let (model, instances, diff) = setup(NetworkConfig { flags, ..small(4) });
    assert!(model.param_names().iter().all(|n| !n.starts_with("J.")));
    let refs: Vec<&EncodedInstance> = instances.iter().collect();
    let batch = Batch::new(&refs, true).unwrap();
    let mut t = Tape::new(&model.store);
    let fw = model.forward(&mut t, &batch, None).unwrap();
    assert!(fw.v_f.is_none() && fw.v_j.is_some());
    model.total_loss(&mut t, &batch, &fw, Some(&diff), 1.0).unwrap();
}
