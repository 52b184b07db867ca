//! Gradient check of the complete training loss on a tiny fixture.

use kt_engine::{grad_check, EngineError, GradCheckConfig, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::InteractionRecord;
use crate::error::{KtError, Result};
use crate::factors::{EncodedInstance, Encoder};
use crate::network::{Batch, Model, ModelDims, NetworkConfig};
use crate::pretrain::{DualPretrained, PretrainedQuestions};
use crate::question_graph::compute_difficulty;

const DIMS: ModelDims = ModelDims {
    num_students: 3,
    num_questions: 4,
    num_concepts: 3,
};

fn random_pretrained(dim: usize, seed: u64) -> DualPretrained {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = |rows: usize, cols: usize| {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .expect("shape matches data")
    };
    let f = PretrainedQuestions {
        table: table(DIMS.num_questions, dim),
        head: table(dim, 1),
        loss_trace: Vec::new(),
    };
    let j = PretrainedQuestions {
        table: table(DIMS.num_questions, dim),
        head: table(dim, 1),
        loss_trace: Vec::new(),
    };
    DualPretrained { f, j }
}

/// Eighteen records over three students, four questions and three concepts.
pub fn tiny_log(seed: u64) -> Vec<InteractionRecord> {
    let concepts = [vec![0, 1], vec![0, 1], vec![1, 2], vec![2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
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

fn to_engine(e: KtError) -> EngineError {
    match e {
        KtError::Engine(e) => e,
        other => EngineError::InvalidArgument(other.to_string()),
    }
}

/// Checks the gradient of BCE plus the difficulty regularizer with respect
/// to every trainable parameter, on a 3-record batch with embedding width
/// `dim`. Records 3..6 have both practiced and fresh concepts, so every
/// attempt slot is exercised.
pub fn check_full_loss(dim: usize, config: GradCheckConfig) -> Result<GradCheckReport> {
    let net = NetworkConfig {
        dim,
        attention_hidden: 6,
        dnn_hidden: vec![8, 4],
        ..NetworkConfig::default()
    };
    let records = tiny_log(5);
    let instances = Encoder::new(3, 4, 3).encode_log(&records)?;
    let difficulty = compute_difficulty(&records, 4, 1)?;
    let pretrained = random_pretrained(dim, 9);
    let mut model = Model::new(net.clone(), DIMS, Some(&pretrained), 3)?;
    // Separate the decay rates so each concept has its own gradient.
    let theta = model
        .subspace_param(0, "theta")
        .ok_or_else(|| KtError::InvalidInput("model has no decay rates".into()))?;
    model.store.value_mut(theta).data_mut().copy_from_slice(&[-1.0, -0.3, 0.4]);

    let three: Vec<&EncodedInstance> = instances[3..6].iter().collect();
    let batch = Batch::new(&three, net.log_counts)?;
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    // The closure needs the architecture only; values come from the store
    // under test.
    let shell = Model::new(net, DIMS, Some(&pretrained), 3)?;
    let report = grad_check(&mut model.store, &ids, config, |t| {
        let fw = shell.forward(t, &batch, None).map_err(to_engine)?;
        shell.total_loss(t, &batch, &fw, Some(&difficulty), 1.0).map_err(to_engine)
    })?;
    Ok(report)
}
