//! Question-embedding pre-training from the question graph: cosine
//! similarity of embedding pairs is fitted to the graph weights and a linear
//! head on each embedding is fitted to the question's difficulty.

use std::collections::HashSet;
use std::io::Write;

use kt_engine::{cosine, Adagrad, Checkpoint, NodeId, ParamId, ParamStore, SparseRows, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Vocabulary;
use crate::error::{KtError, Result};
use crate::question_graph::{DifficultyTable, SimilarityMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub dim: usize,
    pub lambda_relation: f64,
    pub lambda_difficulty: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Zero-similarity pairs sampled per positive pair, every epoch.
    pub negative_ratio: f64,
    /// Pairs per minibatch.
    pub batch_size: usize,
    /// At most this many strongest neighbors per question become positives.
    pub max_positives: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            lambda_relation: 0.5,
            lambda_difficulty: 0.5,
            epochs: 20,
            learning_rate: 0.001,
            negative_ratio: 1.0,
            batch_size: 256,
            max_positives: 50,
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda_relation) || !unit.contains(&self.lambda_difficulty) {
            return Err(KtError::Config("pre-training weights must lie in [0, 1]".into()));
        }
        if self.dim == 0 || self.batch_size == 0 {
            return Err(KtError::Config("dim and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.negative_ratio >= 0.0) {
            return Err(KtError::Config("learning rate must be positive, negative ratio nonnegative".into()));
        }
        Ok(())
    }
}

/// One pre-trained subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedQuestions {
    /// `N_q x D`.
    pub table: Tensor,
    /// `D x 1`, no bias.
    pub head: Tensor,
    /// Objective after each epoch, averaged over the positive pairs, a
    /// fixed negative sample and every question.
    pub loss_trace: Vec<f64>,
}

impl PretrainedQuestions {
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        cosine(self.table.row_slice(i), self.table.row_slice(j))
    }

    pub fn difficulty(&self, q: usize) -> f64 {
        self.table.row_slice(q).iter().zip(self.head.data()).map(|(a, b)| a * b).sum()
    }

    pub fn push_into(&self, ckpt: &mut Checkpoint, subspace: &str) {
        ckpt.push(format!("pretrain.{subspace}.table"), self.table.clone());
        ckpt.push(format!("pretrain.{subspace}.head"), self.head.clone());
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, subspace: &str) -> Result<Self> {
        let get = |what: &str| {
            let name = format!("pretrain.{subspace}.{what}");
            ckpt.get(&name)
                .cloned()
                .ok_or_else(|| KtError::InvalidInput(format!("checkpoint lacks `{name}`")))
        };
        Ok(Self {
            table: get("table")?,
            head: get("head")?,
            loss_trace: Vec::new(),
        })
    }
}

/// Tables for the factor (F) and interaction (J) subspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPretrained {
    pub f: PretrainedQuestions,
    pub j: PretrainedQuestions,
}

impl DualPretrained {
    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ckpt = Checkpoint::new(config_hash);
        self.f.push_into(&mut ckpt, "F");
        self.j.push_into(&mut ckpt, "J");
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            f: PretrainedQuestions::from_checkpoint(ckpt, "F")?,
            j: PretrainedQuestions::from_checkpoint(ckpt, "J")?,
        })
    }
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

/// Stored pairs that are among the `cap` strongest neighbors of either
/// endpoint, minus `exclude`. Sorted, as `(i, j, A_ij)` with `i < j`.
pub fn positive_pairs(
    sim: &SimilarityMatrix,
    cap: usize,
    exclude: &HashSet<(usize, usize)>,
) -> Vec<(usize, usize, f64)> {
    let mut keep = HashSet::new();
    for (i, list) in sim.neighbors().iter().enumerate() {
        for &(j, _) in list.iter().take(cap) {
            keep.insert(ordered(i, j));
        }
    }
    sim.pairs()
        .filter(|&(i, j, _)| keep.contains(&(i, j)) && !exclude.contains(&(i, j)))
        .collect()
}

/// Draws up to `count` distinct-endpoint pairs that are not stored in `sim`.
/// Gives up after a bounded number of rejections on dense graphs.
pub fn sample_negatives<R: Rng>(sim: &SimilarityMatrix, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let n = sim.num_questions();
    let mut out = Vec::with_capacity(count);
    if n < 2 {
        return out;
    }
    let mut attempts = 0;
    while out.len() < count && attempts < 20 * count + 100 {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j && !sim.contains(i, j) {
            out.push(ordered(i, j));
        }
    }
    out
}

/// `Σ (cos(p_i, p_j) - A_ij)²`.
pub fn relation_loss(table: &Tensor, pairs: &[(usize, usize, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(i, j, a)| {
            let e = cosine(table.row_slice(i), table.row_slice(j)) - a;
            e * e
        })
        .sum()
}

/// `Σ (p_q · w - d_q)²`.
pub fn difficulty_loss(table: &Tensor, head: &Tensor, questions: &[usize], difficulty: &DifficultyTable) -> f64 {
    questions
        .iter()
        .map(|&q| {
            let pred: f64 = table.row_slice(q).iter().zip(head.data()).map(|(a, b)| a * b).sum();
            let e = pred - difficulty.get(q);
            e * e
        })
        .sum()
}

fn one_hot_rows(indices: impl Iterator<Item = usize>) -> SparseRows {
    let mut rows = SparseRows::new();
    for i in indices {
        rows.push_row([(i, 1.0)]);
    }
    rows
}

/// Records `λ1 · relation + λ2 · difficulty` for one minibatch.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    t: &mut Tape,
    table: ParamId,
    head: ParamId,
    pairs: &[(usize, usize, f64)],
    questions: &[usize],
    difficulty: &DifficultyTable,
    lambda_relation: f64,
    lambda_difficulty: f64,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    if !pairs.is_empty() && lambda_relation > 0.0 {
        let a = t.sparse_embed(table, one_hot_rows(pairs.iter().map(|p| p.0)), None)?;
        let b = t.sparse_embed(table, one_hot_rows(pairs.iter().map(|p| p.1)), None)?;
        let c = t.cosine_rows(a, b)?;
        let targets: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let l = t.squared_loss(c, &targets)?;
        terms.push(t.scale(l, lambda_relation)?);
    }
    if !questions.is_empty() && lambda_difficulty > 0.0 {
        let p = t.sparse_embed(table, one_hot_rows(questions.iter().copied()), None)?;
        let w = t.param(head)?;
        let d = t.affine(p, w, None)?;
        let targets: Vec<f64> = questions.iter().map(|&q| difficulty.get(q)).collect();
        let l = t.squared_loss(d, &targets)?;
        terms.push(t.scale(l, lambda_difficulty)?);
    }
    let mut total = match terms.first() {
        Some(&first) => first,
        None => t.constant(Tensor::scalar(0.0))?,
    };
    for &term in terms.iter().skip(1) {
        total = t.add(total, term)?;
    }
    Ok(total)
}

/// Fits one subspace. See [`pretrain_excluding`].
pub fn pretrain(
    sim: &SimilarityMatrix,
    difficulty: &DifficultyTable,
    config: &PretrainConfig,
) -> Result<PretrainedQuestions> {
    pretrain_excluding(sim, difficulty, config, &HashSet::new())
}

/// Fits one subspace while never training on the pairs in `held_out`.
pub fn pretrain_excluding(
    sim: &SimilarityMatrix,
    difficulty: &DifficultyTable,
    config: &PretrainConfig,
    held_out: &HashSet<(usize, usize)>,
) -> Result<PretrainedQuestions> {
    config.validate()?;
    let n = sim.num_questions();
    if difficulty.len() != n {
        return Err(KtError::InvalidInput(format!(
            "graph has {n} questions, difficulty table {}",
            difficulty.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (config.dim as f64).sqrt();
    let mut store = ParamStore::new();
    let table = store.add_uniform("table", n, config.dim, scale, &mut rng)?;
    let head = store.add_uniform("head", config.dim, 1, scale, &mut rng)?;
    let opt = Adagrad::new(config.learning_rate);

    let positives = positive_pairs(sim, config.max_positives, held_out);
    let num_negatives = (positives.len() as f64 * config.negative_ratio).round() as usize;
    let mut questions: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    // Tracking uses its own negatives so that the trace is free of
    // per-epoch sampling noise and the training stream is unchanged.
    let mut trace_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7ace);
    let mut trace_pairs = positives.clone();
    trace_pairs.extend(
        sample_negatives(sim, num_negatives, &mut trace_rng)
            .into_iter()
            .filter(|p| !held_out.contains(p))
            .map(|(i, j)| (i, j, 0.0)),
    );

    for epoch in 0..config.epochs {
        let mut pairs = positives.clone();
        pairs.extend(
            sample_negatives(sim, num_negatives, &mut rng)
                .into_iter()
                .filter(|p| !held_out.contains(p))
                .map(|(i, j)| (i, j, 0.0)),
        );
        pairs.shuffle(&mut rng);
        questions.shuffle(&mut rng);
        let batches = pairs.len().div_ceil(config.batch_size).max(1);
        for b in 0..batches {
            let pair_chunk = &pairs[b * pairs.len() / batches..(b + 1) * pairs.len() / batches];
            let q_chunk = &questions[b * n / batches..(b + 1) * n / batches];
            let grads = {
                let mut t = Tape::new(&store);
                let loss = objective(
                    &mut t,
                    table,
                    head,
                    pair_chunk,
                    q_chunk,
                    difficulty,
                    config.lambda_relation,
                    config.lambda_difficulty,
                )?;
                t.backward(loss)?
            };
            store.accumulate(&grads);
            opt.step(&mut store);
        }
        let (tv, hv) = (store.value(table), store.value(head));
        let total = config.lambda_relation * relation_loss(tv, &trace_pairs)
            + config.lambda_difficulty * difficulty_loss(tv, hv, &questions, difficulty);
        let mean = total / (trace_pairs.len() + n).max(1) as f64;
        if !mean.is_finite() {
            return Err(KtError::Divergence(format!("pre-training loss {mean} at epoch {epoch}")));
        }
        log::debug!("pretrain epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(PretrainedQuestions {
        table: store.value(table).clone(),
        head: store.value(head).clone(),
        loss_trace,
    })
}

/// Two independent fits, seeded `seed_f` and `seed_j`.
pub fn pretrain_dual(
    sim: &SimilarityMatrix,
    difficulty: &DifficultyTable,
    config: &PretrainConfig,
    seed_f: u64,
    seed_j: u64,
) -> Result<DualPretrained> {
    let f = pretrain(sim, difficulty, &PretrainConfig { seed: seed_f, ..config.clone() })?;
    let j = pretrain(sim, difficulty, &PretrainConfig { seed: seed_j, ..config.clone() })?;
    Ok(DualPretrained { f, j })
}

/// One text row per question: `question_id,v_0,...,v_{D-1}`.
pub fn write_embeddings<W: Write>(table: &Tensor, vocab: &Vocabulary, mut w: W) -> Result<()> {
    if table.rows() < vocab.num_questions() {
        return Err(KtError::InvalidInput("embedding table smaller than the vocabulary".into()));
    }
    for q in 0..vocab.num_questions() {
        write!(w, "{}", vocab.questions.name(q))?;
        for v in table.row_slice(q) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
