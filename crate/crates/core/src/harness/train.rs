//! Fold preparation, minibatch training with early stopping, evaluation.

use std::collections::HashSet;

use kt_engine::{Adagrad, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionRecord, Vocabulary};
use crate::error::{KtError, Result};
use crate::factors::{EncodedInstance, Encoder};
use crate::harness::metrics::{auc, EvalReport};
use crate::network::{Batch, Model, ModelDims, NetworkConfig, UnknownMasking};
use crate::pretrain::{pretrain_dual, DualPretrained, PretrainConfig};
use crate::question_graph::{build_similarity, compute_difficulty, DifficultyTable, SimilarityMatrix, SimilarityMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reg_weight: f64,
    /// Epochs without a better validation AUC before stopping.
    pub patience: usize,
    /// Share of training students held out for early stopping.
    pub validation_fraction: f64,
    pub unknown: UnknownMasking,
    /// Answers a question needs before its own correct rate is used.
    pub min_count: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            pretrain: PretrainConfig::default(),
            epochs: 50,
            learning_rate: 0.001,
            batch_size: 2048,
            reg_weight: 1.0,
            patience: 5,
            validation_fraction: 0.1,
            unknown: UnknownMasking {
                student_rate: 0.2,
                question_rate: 0.02,
            },
            min_count: 1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Small widths and a larger step size for laptop-scale runs.
    pub fn desk() -> Self {
        let d = 16;
        Self {
            network: NetworkConfig {
                dim: d,
                attention_hidden: 16,
                dnn_hidden: vec![32, 16],
                ..NetworkConfig::default()
            },
            pretrain: PretrainConfig {
                dim: d,
                epochs: 30,
                learning_rate: 0.05,
                ..PretrainConfig::default()
            },
            epochs: 15,
            learning_rate: 0.02,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.pretrain.validate()?;
        if self.network.dim != self.pretrain.dim {
            return Err(KtError::Config("network and pre-training dims differ".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(KtError::Config("epochs, batch_size and learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || !(self.reg_weight >= 0.0) {
            return Err(KtError::Config("validation_fraction must lie in [0, 1), reg_weight >= 0".into()));
        }
        for r in [self.unknown.student_rate, self.unknown.question_rate] {
            if !(0.0..1.0).contains(&r) {
                return Err(KtError::Config("unknown-id rates must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Weight of the difficulty terms after ablation flags.
    pub fn effective_reg_weight(&self) -> f64 {
        let f = &self.network.flags;
        if f.r_reg || f.r_pre {
            0.0
        } else {
            self.reg_weight
        }
    }
}

/// Everything one fold needs, computed from its training students only.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub dims: ModelDims,
    pub fit: Vec<EncodedInstance>,
    pub valid: Vec<EncodedInstance>,
    pub test: Vec<EncodedInstance>,
    /// Positions in the input log of the test instances.
    pub test_positions: Vec<usize>,
    pub difficulty: DifficultyTable,
    pub similarity: SimilarityMatrix,
}

fn subset(records: &[InteractionRecord], students: &HashSet<usize>) -> (Vec<InteractionRecord>, Vec<usize>) {
    let mut out = Vec::new();
    let mut pos = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if students.contains(&r.student) {
            out.push(r.clone());
            pos.push(i);
        }
    }
    (out, pos)
}

/// Splits off validation students, computes difficulty on the rest and
/// encodes all three parts. Students and questions never seen in the fit
/// part are encoded as unknown.
pub fn prepare_fold(
    records: &[InteractionRecord],
    vocab: &Vocabulary,
    test_students: &[usize],
    config: &TrainConfig,
) -> Result<FoldData> {
    let test: HashSet<usize> = test_students.iter().copied().collect();
    let mut train_students: Vec<usize> = records
        .iter()
        .map(|r| r.student)
        .filter(|s| !test.contains(s))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    train_students.sort_unstable();
    if train_students.is_empty() || test.is_empty() {
        return Err(KtError::InvalidInput("fold has no training or no test students".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_students.shuffle(&mut rng);
    let n_valid = (train_students.len() as f64 * config.validation_fraction).round() as usize;
    let n_valid = n_valid.min(train_students.len() - 1);
    let valid: HashSet<usize> = train_students[..n_valid].iter().copied().collect();
    let fit: HashSet<usize> = train_students[n_valid..].iter().copied().collect();

    let (fit_records, _) = subset(records, &fit);
    let (valid_records, _) = subset(records, &valid);
    let (test_records, test_positions) = subset(records, &test);

    let difficulty = compute_difficulty(&fit_records, vocab.num_questions(), config.min_count)?;
    difficulty.check_no_leakage(test_students)?;
    let mode = if config.network.flags.r_binary {
        SimilarityMode::Binary
    } else {
        SimilarityMode::Continuous
    };
    let similarity = build_similarity(vocab, mode)?;
    let encoder = Encoder::new(vocab.num_students(), vocab.num_questions(), vocab.num_concepts())
        .with_known_from(&fit_records);
    Ok(FoldData {
        dims: ModelDims {
            num_students: vocab.num_students(),
            num_questions: vocab.num_questions(),
            num_concepts: vocab.num_concepts(),
        },
        fit: encoder.encode_log(&fit_records)?,
        valid: encoder.encode_log(&valid_records)?,
        test: encoder.encode_log(&test_records)?,
        test_positions,
        difficulty,
        similarity,
    })
}

/// Pre-trains both subspaces for a fold, or returns `None` under `r_pre`.
pub fn pretrain_fold(fold: &FoldData, config: &TrainConfig) -> Result<Option<DualPretrained>> {
    if config.network.flags.r_pre {
        return Ok(None);
    }
    let seed = config.pretrain.seed;
    pretrain_dual(&fold.similarity, &fold.difficulty, &config.pretrain, seed, seed.wrapping_add(1)).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss per training record.
    pub loss: f64,
    pub valid_auc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochStats>,
    pub best_epoch: usize,
}

pub fn predict_labels(instances: &[EncodedInstance]) -> Vec<bool> {
    instances.iter().map(|i| i.label).collect()
}

pub fn evaluate(model: &Model, instances: &[EncodedInstance]) -> Result<EvalReport> {
    let scores = model.predict_probs(instances)?;
    EvalReport::new(&predict_labels(instances), &scores)
}

fn validation_auc(model: &Model, valid: &[EncodedInstance]) -> Result<Option<f64>> {
    if valid.is_empty() {
        return Ok(None);
    }
    let labels = predict_labels(valid);
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Ok(None);
    }
    Ok(Some(auc(&labels, &model.predict_probs(valid)?)?))
}

/// One Adagrad pass over `instances` in shuffled minibatches.
pub fn train_epoch(
    model: &mut Model,
    instances: &[EncodedInstance],
    difficulty: &DifficultyTable,
    config: &TrainConfig,
    opt: &Adagrad,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    let reg = config.effective_reg_weight();
    let mut total = 0.0;
    for chunk in order.chunks(config.batch_size) {
        let refs: Vec<&EncodedInstance> = chunk.iter().map(|&i| &instances[i]).collect();
        let batch = Batch::with_masking(&refs, model.config.log_counts, config.unknown, Some(&mut *rng))?;
        let grads = {
            let mut t = Tape::new(&model.store);
            let fw = model.forward(&mut t, &batch, Some(&mut *rng))?;
            let loss = model.total_loss(&mut t, &batch, &fw, Some(difficulty), reg)?;
            let value = t.value(loss).item();
            if !value.is_finite() {
                return Err(KtError::Divergence(format!("batch loss {value}")));
            }
            total += value;
            t.backward(loss)?
        };
        model.store.accumulate(&grads);
        opt.step(&mut model.store);
    }
    Ok(total / instances.len() as f64)
}

/// Trains with early stopping on validation AUC and returns the model with
/// its best parameters restored.
pub fn train_model(fold: &FoldData, pretrained: Option<&DualPretrained>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if fold.fit.is_empty() {
        return Err(KtError::InvalidInput("empty training fold".into()));
    }
    let mut model = Model::new(config.network.clone(), fold.dims, pretrained, config.seed)?;
    let opt = Adagrad::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let loss = train_epoch(&mut model, &fold.fit, &fold.difficulty, config, &opt, &mut rng)?;
        let valid_auc = validation_auc(&model, &fold.valid)?;
        log::info!("epoch {epoch}: loss {loss:.5} valid auc {valid_auc:?}");
        trace.push(EpochStats { epoch, loss, valid_auc });
        let Some(v) = valid_auc else { continue };
        if best.as_ref().map_or(true, |b| v > b.0) {
            best = Some((v, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store.copy_values_from(&store)?;
            epoch
        }
        None => trace.len() - 1,
    };
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch,
    })
}

pub struct FoldResult {
    pub fold: usize,
    pub report: EvalReport,
    pub outcome: TrainOutcome,
    pub data: FoldData,
}

/// Prepares, pre-trains, trains and evaluates one fold.
pub fn run_fold(
    records: &[InteractionRecord],
    vocab: &Vocabulary,
    fold: usize,
    test_students: &[usize],
    config: &TrainConfig,
) -> Result<FoldResult> {
    let data = prepare_fold(records, vocab, test_students, config)?;
    let pretrained = pretrain_fold(&data, config)?;
    let outcome = train_model(&data, pretrained.as_ref(), config)?;
    let report = evaluate(&outcome.model, &data.test)?;
    Ok(FoldResult {
        fold,
        report,
        outcome,
        data,
    })
}

/// Runs `jobs` on up to `workers` threads, keeping input order.
pub fn run_parallel<T, F>(jobs: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || jobs <= 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..jobs).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let value = f(i);
                results.lock().expect("no panics while holding the lock")[i] = Some(value);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}
