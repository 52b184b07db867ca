use kt_core::dataset::{replay_history, split_folds, InteractionRecord, Vocabulary};
use kt_core::factors::{encode_recent, encode_success_fail, forgetting};
use kt_core::question_graph::{build_similarity, concept_overlap_similarity, SimilarityMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vocab(seed: u64, questions: usize, concepts: usize) -> Vocabulary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vocabulary::default();
    for q in 0..questions {
        let k = rng.gen_range(1..=4);
        let mut set: Vec<String> = (0..k).map(|_| format!("c{}", rng.gen_range(0..concepts))).collect();
        set.sort();
        set.dedup();
        let refs: Vec<&str> = set.iter().map(String::as_str).collect();
        v.add_question(&format!("q{q}"), &refs).unwrap();
    }
    v
}

#[test]
fn similarity_matches_all_pairs_oracle() {
    for seed in 0..5 {
        let v = random_vocab(seed, 100, 25);
        let m = build_similarity(&v, SimilarityMode::Continuous).unwrap();
        let mut nonzero = 0;
        for i in 0..100 {
            for j in 0..100 {
                if i == j {
                    continue;
                }
                let expected = concept_overlap_similarity(v.concepts_of(i), v.concepts_of(j)).unwrap();
                assert_eq!(m.get(i, j), expected, "pair ({i}, {j})");
                assert_eq!(m.contains(i, j), expected > 0.0);
                nonzero += usize::from(expected > 0.0 && i < j);
            }
        }
        assert_eq!(m.num_pairs(), nonzero);
    }
}

fn random_sequence(seed: u64, len: usize, concepts: usize) -> Vec<InteractionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|t| {
            let mut cs: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..concepts)).collect();
            cs.sort_unstable();
            cs.dedup();
            InteractionRecord {
                student: 0,
                question: rng.gen_range(0..20),
                concepts: cs,
                step: t as u64,
                outcome: rng.gen_bool(0.6),
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn forgetting_is_monotone(theta in 0.001f64..5.0, dt in 0.001f64..50.0, bump in 0.001f64..2.0) {
        prop_assert!(forgetting(theta, dt + bump).unwrap() < forgetting(theta, dt).unwrap());
        prop_assert!(forgetting(theta + bump, dt).unwrap() < forgetting(theta, dt).unwrap());
        let f = forgetting(theta, dt).unwrap();
        prop_assert!(f > 0.0 && f <= 1.0);
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(seed in 0u64..1000) {
        let v = random_vocab(seed, 30, 8);
        let m = build_similarity(&v, SimilarityMode::Continuous).unwrap();
        for (i, j, s) in m.pairs() {
            prop_assert!(s > 0.0 && s <= 1.0);
            prop_assert_eq!(m.get(i, j), m.get(j, i));
        }
    }

    #[test]
    fn replay_is_causal_and_idempotent(seed in 0u64..1000, len in 1usize..40, cut in 0usize..40) {
        let log = random_sequence(seed, len, 6);
        let full: Vec<_> = replay_history(&log).unwrap().map(|(s, _)| s).collect();
        let again: Vec<_> = replay_history(&log).unwrap().map(|(s, _)| s).collect();
        prop_assert_eq!(&full, &again);
        let cut = cut.min(len);
        let prefix: Vec<_> = replay_history(&log[..cut]).unwrap().map(|(s, _)| s).collect();
        prop_assert_eq!(&full[..cut], &prefix[..]);
    }

    #[test]
    fn counts_match_brute_force_recount(seed in 0u64..1000, len in 1usize..40) {
        let log = random_sequence(seed, len, 6);
        for (t, (state, r)) in replay_history(&log).unwrap().enumerate() {
            let (s, f) = encode_success_fail(&state, &r.concepts, 6);
            let total: f64 = s.entries.iter().chain(&f.entries).map(|e| e.1).sum();
            let recount: usize = r
                .concepts
                .iter()
                .map(|c| log[..t].iter().filter(|p| p.concepts.contains(c)).count())
                .sum();
            prop_assert_eq!(total, recount as f64);
        }
    }

    #[test]
    fn encodings_ignore_unrelated_concepts(seed in 0u64..1000, len in 2usize..30) {
        // Dropping every earlier record's concepts outside the target set
        // must not change the target's encodings.
        let log = random_sequence(seed, len, 6);
        let target = log.last().unwrap().clone();
        let mut pruned: Vec<_> = log[..len - 1]
            .iter()
            .map(|r| InteractionRecord {
                concepts: r.concepts.iter().copied().filter(|c| target.concepts.contains(c)).collect(),
                ..r.clone()
            })
            .collect();
        pruned.push(target.clone());
        let (s1, _) = replay_history(&log).unwrap().last().unwrap();
        let (s2, _) = replay_history(&pruned).unwrap().last().unwrap();
        prop_assert_eq!(
            encode_success_fail(&s1, &target.concepts, 6),
            encode_success_fail(&s2, &target.concepts, 6)
        );
        let r1 = encode_recent(&s1, &target.concepts, 6, target.step).unwrap();
        let r2 = encode_recent(&s2, &target.concepts, 6, target.step).unwrap();
        prop_assert_eq!(&r1, &r2);
        // One slot region per target concept.
        prop_assert_eq!(r1.entries.len(), target.concepts.len());
    }

    #[test]
    fn folds_partition_students(seed in 0u64..1000, students in 5usize..40, k in 2usize..5) {
        let records: Vec<_> = (0..students)
            .flat_map(|s| (0..3).map(move |t| InteractionRecord {
                student: s,
                question: 0,
                concepts: vec![0],
                step: t,
                outcome: true,
            }))
            .collect();
        let split = split_folds(&records, k, seed).unwrap();
        let mut seen = vec![0; students];
        for fold in &split.test_students {
            for &s in fold {
                seen[s] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(split_folds(&records, k, seed).unwrap(), split);
    }
}

#[test]
fn pretraining_loss_only_transiently_rises() {
    use kt_core::harness::{generate_synthetic, SynthConfig};
    use kt_core::pretrain::{pretrain, PretrainConfig};
    use kt_core::question_graph::compute_difficulty;

    let data = generate_synthetic(&SynthConfig {
        num_students: 200,
        num_questions: 60,
        num_concepts: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let sim = build_similarity(&data.vocab, SimilarityMode::Continuous).unwrap();
    let diff = compute_difficulty(&data.records, 60, 1).unwrap();
    for seed in [1, 2] {
        let config = PretrainConfig {
            dim: 16,
            epochs: 200,
            learning_rate: 0.02,
            batch_size: 256,
            seed,
            ..PretrainConfig::default()
        };
        let trace = pretrain(&sim, &diff, &config).unwrap().loss_trace;
        let mut best = f64::INFINITY;
        for (epoch, &loss) in trace.iter().enumerate() {
            assert!(loss <= best * 1.02, "seed {seed} epoch {epoch}: {loss} after best {best}");
            best = best.min(loss);
        }
        assert!(trace[trace.len() - 1] < 0.5 * trace[0]);
    }
}
