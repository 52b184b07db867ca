//! One-parameter item response baseline: `P(correct) = sigmoid(θ_s - d_q)`.

use kt_engine::{Adagrad, ParamId, ParamStore, SparseRows, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KtError, Result};
use crate::factors::EncodedInstance;
use crate::harness::metrics::auc;
use crate::harness::train::predict_labels;

#[derive(Clone, Debug, PartialEq)]
pub struct IrtConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of training rows that use the unknown-student ability.
    pub unknown_student_rate: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for IrtConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 256,
            unknown_student_rate: 0.2,
            patience: 5,
            seed: 1,
        }
    }
}

pub struct IrtModel {
    store: ParamStore,
    ability: ParamId,
    difficulty: ParamId,
}

impl IrtModel {
    /// Abilities and difficulties start at 0. Row `N_u` / `N_q` of each
    /// table is the unknown row.
    pub fn new(num_students: usize, num_questions: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let ability = store.add("irt.ability", Tensor::zeros(num_students + 1, 1))?;
        let difficulty = store.add("irt.difficulty", Tensor::zeros(num_questions + 1, 1))?;
        Ok(Self {
            store,
            ability,
            difficulty,
        })
    }

    pub fn ability(&self, student: usize) -> f64 {
        self.store.value(self.ability).get(student, 0)
    }

    pub fn difficulty(&self, question: usize) -> f64 {
        self.store.value(self.difficulty).get(question, 0)
    }

    pub fn predict(&self, instances: &[EncodedInstance]) -> Vec<f64> {
        instances
            .iter()
            .map(|i| {
                let z = self.ability(i.student_index()) - self.difficulty(i.question_index());
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }

    fn step(&mut self, batch: &[(usize, usize, f64)], opt: &Adagrad) -> Result<f64> {
        let mut s = SparseRows::new();
        let mut q = SparseRows::new();
        for &(si, qi, _) in batch {
            s.push_row([(si, 1.0)]);
            q.push_row([(qi, 1.0)]);
        }
        let labels: Vec<f64> = batch.iter().map(|b| b.2).collect();
        let grads = {
            let mut t = Tape::new(&self.store);
            let a = t.sparse_embed(self.ability, s, None)?;
            let d = t.sparse_embed(self.difficulty, q, None)?;
            let z = t.sub(a, d)?;
            let p = t.sigmoid(z)?;
            let loss = t.bce_loss(p, &labels)?;
            let value = t.value(loss).item();
            (t.backward(loss)?, value)
        };
        self.store.accumulate(&grads.0);
        opt.step(&mut self.store);
        Ok(grads.1)
    }
}

/// Fits by minibatch Adagrad on cross-entropy, keeping the parameters with
/// the best validation AUC when a validation set is given.
pub fn irt_baseline(
    fit: &[EncodedInstance],
    valid: &[EncodedInstance],
    config: &IrtConfig,
) -> Result<IrtModel> {
    let first = fit.first().ok_or_else(|| KtError::InvalidInput("empty training fold".into()))?;
    let (n_s, n_q) = (first.student.dim - 1, first.question.dim - 1);
    let mut model = IrtModel::new(n_s, n_q)?;
    let opt = Adagrad::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let valid_labels = predict_labels(valid);
    let can_validate = valid_labels.iter().any(|&l| l) && valid_labels.iter().any(|&l| !l);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(usize, usize, f64)> = chunk
                .iter()
                .map(|&i| {
                    let inst = &fit[i];
                    let s = if rng.gen_bool(config.unknown_student_rate) {
                        n_s
                    } else {
                        inst.student_index()
                    };
                    (s, inst.question_index(), f64::from(u8::from(inst.label)))
                })
                .collect();
            total += model.step(&batch, &opt)?;
        }
        if !total.is_finite() {
            return Err(KtError::Divergence(format!("IRT loss {total} at epoch {epoch}")));
        }
        if can_validate {
            let v = auc(&valid_labels, &model.predict(valid))?;
            if best.as_ref().map_or(true, |b| v > b.0) {
                best = Some((v, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        model.store.copy_values_from(&store)?;
    }
    Ok(model)
}
