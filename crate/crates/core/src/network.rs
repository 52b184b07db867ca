//! The dual-subspace attentional predictor.
//!
//! Each subspace embeds the six factors, merges the success, fail and recent
//! embeddings into one attempt vector (attention over the attempt factors,
//! then a 1-d convolution), scores the student, question, concept and
//! attempt vectors with a second attention net, and pools the reweighted
//! vectors. The factor subspace is sum pooled, the interaction subspace is
//! pooled over pairwise products, and a small MLP maps both to a
//! probability.

use kt_engine::{Checkpoint, Conv1dSpec, NodeId, ParamId, ParamStore, SparseRows, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KtError, Result};
use crate::factors::EncodedInstance;
use crate::pretrain::{DualPretrained, PretrainedQuestions};
use crate::question_graph::DifficultyTable;

/// Components removed for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AblationFlags {
    pub r_recent: bool,
    pub r_pre: bool,
    pub r_reg: bool,
    pub r_interaction: bool,
    pub r_feature: bool,
    pub r_dual: bool,
    pub r_attention: bool,
    pub r_dnn: bool,
    pub r_binary: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 9] = [
        "r_recent",
        "r_pre",
        "r_reg",
        "r_interaction",
        "r_feature",
        "r_dual",
        "r_attention",
        "r_dnn",
        "r_binary",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "r_recent" => &mut self.r_recent,
            "r_pre" => &mut self.r_pre,
            "r_reg" => &mut self.r_reg,
            "r_interaction" => &mut self.r_interaction,
            "r_feature" => &mut self.r_feature,
            "r_dual" => &mut self.r_dual,
            "r_attention" => &mut self.r_attention,
            "r_dnn" => &mut self.r_dnn,
            "r_binary" => &mut self.r_binary,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        *self
            .slot(name)
            .ok_or_else(|| KtError::Config(format!("unknown ablation flag `{name}`")))? = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        let mut copy = *self;
        copy.slot(name).map(|b| *b)
    }

    /// Parses a comma-separated flag list; empty or `full` means none.
    pub fn parse(list: &str) -> Result<Self> {
        let mut flags = Self::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "full") {
            flags.set(name, true)?;
        }
        flags.validate()?;
        Ok(flags)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_interaction && self.r_feature {
            return Err(KtError::Config(
                "r_interaction and r_feature together leave nothing to pool".into(),
            ));
        }
        Ok(())
    }

    /// `full` or the `+`-joined active flags.
    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES.iter().copied().filter(|n| self.get(n) == Some(true)).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub dim: usize,
    pub attention_hidden: usize,
    pub dnn_hidden: Vec<usize>,
    pub dropout: f64,
    /// Feed `ln(1 + count)` instead of raw success and fail counts.
    pub log_counts: bool,
    pub conv_width: usize,
    pub conv_channels: usize,
    /// Effective decay rate at initialization.
    pub theta_init: f64,
    /// One set of decay rates for both subspaces.
    pub share_theta: bool,
    pub flags: AblationFlags,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            attention_hidden: 64,
            dnn_hidden: vec![128, 64],
            dropout: 0.2,
            log_counts: true,
            conv_width: 3,
            conv_channels: 1,
            theta_init: 0.1,
            share_theta: true,
            flags: AblationFlags::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.dim == 0 || self.attention_hidden == 0 || self.conv_channels == 0 {
            return Err(KtError::Config("network widths must be positive".into()));
        }
        if self.conv_width % 2 == 0 {
            return Err(KtError::Config("conv_width must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KtError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.theta_init > 0.0) {
            return Err(KtError::Config("theta_init must be positive".into()));
        }
        Ok(())
    }

    fn num_attempt_factors(&self) -> usize {
        if self.flags.r_recent {
            2
        } else {
            3
        }
    }
}

/// Vocabulary sizes the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub num_students: usize,
    pub num_questions: usize,
    pub num_concepts: usize,
}

/// Two-layer map from a factor embedding to one attention logit.
#[derive(Clone, Copy, Debug)]
struct AttentionNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Subspace {
    student: ParamId,
    question: ParamId,
    concept: ParamId,
    success: ParamId,
    fail: ParamId,
    recent: ParamId,
    acnn: AttentionNet,
    pool: AttentionNet,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    conv_out: Option<(ParamId, ParamId)>,
    theta: ParamId,
    head: ParamId,
}

pub struct Model {
    pub config: NetworkConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    subspaces: Vec<Subspace>,
    dnn: Vec<(ParamId, ParamId)>,
}

/// Sparse inputs of a minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub len: usize,
    student: SparseRows,
    question: SparseRows,
    concept: SparseRows,
    success: SparseRows,
    fail: SparseRows,
    recent: SparseRows,
    recent_concept: Vec<usize>,
    recent_dt: Vec<f64>,
    pub labels: Vec<f64>,
    /// Question id of each record for the difficulty terms; rows whose
    /// question is the unknown id are left out.
    difficulty_rows: Vec<usize>,
}

/// Per-batch replacement of known students and questions by the unknown
/// rows, so that those rows are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnknownMasking {
    pub student_rate: f64,
    pub question_rate: f64,
}

impl Batch {
    pub fn new(instances: &[&EncodedInstance], log_counts: bool) -> Result<Self> {
        Self::with_masking(instances, log_counts, UnknownMasking::default(), None)
    }

    pub fn with_masking(
        instances: &[&EncodedInstance],
        log_counts: bool,
        masking: UnknownMasking,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        let count = |v: f64| if log_counts { v.ln_1p() } else { v };
        let mut b = Batch {
            len: instances.len(),
            student: SparseRows::new(),
            question: SparseRows::new(),
            concept: SparseRows::new(),
            success: SparseRows::new(),
            fail: SparseRows::new(),
            recent: SparseRows::new(),
            recent_concept: Vec::new(),
            recent_dt: Vec::new(),
            labels: Vec::with_capacity(instances.len()),
            difficulty_rows: Vec::new(),
        };
        for inst in instances {
            if inst.student.entries.len() != 1 || inst.question.entries.len() != 1 {
                return Err(KtError::InvalidInput("student and question must be one-hot".into()));
            }
            let mut s = inst.student_index();
            let mut q = inst.question_index();
            let unknown_q = inst.question.dim - 1;
            if q != unknown_q {
                b.difficulty_rows.push(q);
            }
            if let Some(rng) = rng.as_deref_mut() {
                if masking.student_rate > 0.0 && rng.gen_bool(masking.student_rate) {
                    s = inst.student.dim - 1;
                }
                if masking.question_rate > 0.0 && rng.gen_bool(masking.question_rate) {
                    q = unknown_q;
                }
            }
            b.student.push_row([(s, 1.0)]);
            b.question.push_row([(q, 1.0)]);
            b.concept.push_row(inst.concepts.entries.iter().copied());
            b.success.push_row(inst.success.entries.iter().map(|&(i, v)| (i, count(v))));
            b.fail.push_row(inst.fail.entries.iter().map(|&(i, v)| (i, count(v))));
            b.recent.push_row(inst.recent.entries.iter().map(|&(slot, _)| (slot, 1.0)));
            for &(slot, dt) in &inst.recent.entries {
                b.recent_concept.push(inst.recent.concept_of(slot));
                b.recent_dt.push(dt as f64);
            }
            b.labels.push(if inst.label { 1.0 } else { 0.0 });
        }
        Ok(b)
    }
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub prob: NodeId,
    /// Attempt-factor scores per subspace, `n x N_a`.
    pub acnn_scores: Vec<NodeId>,
    /// Pooling scores per subspace, `n x 4`.
    pub pool_scores: Vec<NodeId>,
    pub v_f: Option<NodeId>,
    pub v_j: Option<NodeId>,
}

/// Scores of one predicted record.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    pub prob: f64,
    pub acnn_f: Vec<f64>,
    pub acnn_j: Vec<f64>,
    pub pool_f: Vec<f64>,
    pub pool_j: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Pre-trained table plus an unknown row set to the mean of the others.
fn with_unknown_row(table: &Tensor) -> Tensor {
    let (n, d) = (table.rows(), table.cols());
    let mut data = table.data().to_vec();
    for c in 0..d {
        data.push((0..n).map(|r| table.get(r, c)).sum::<f64>() / n.max(1) as f64);
    }
    Tensor::from_vec(n + 1, d, data).expect("shape")
}

/// The network input width and whether each pooling is used.
fn pooling_layout(flags: &AblationFlags) -> (bool, bool) {
    (!flags.r_feature, !flags.r_interaction)
}

impl Model {
    /// Builds a model. Question tables and difficulty heads come from
    /// `pretrained` unless the `r_pre` flag is set, in which case they are
    /// random.
    pub fn new(
        config: NetworkConfig,
        dims: ModelDims,
        pretrained: Option<&DualPretrained>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let pretrained = if config.flags.r_pre { None } else { pretrained };
        if pretrained.is_none() && !config.flags.r_pre {
            return Err(KtError::Config("pre-trained tables required unless r_pre is set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scale = 1.0 / (d as f64).sqrt();
        let raw_theta = config.theta_init.exp_m1().ln();
        let shared_theta = store.add(
            "theta",
            Tensor::filled(1, dims.num_concepts, raw_theta),
        )?;
        let names: &[&str] = if config.flags.r_dual { &["F"] } else { &["F", "J"] };
        let mut subspaces = Vec::new();
        for &name in names {
            let p = |what: &str| format!("{name}.{what}");
            let source: Option<&PretrainedQuestions> = pretrained.map(|pt| if name == "F" { &pt.f } else { &pt.j });
            let (question_table, head) = match source {
                Some(src) => {
                    if src.table.shape() != [dims.num_questions, d] || src.head.shape() != [d, 1] {
                        return Err(KtError::Config(format!(
                            "pre-trained subspace {name} has shape {:?}, expected [{}, {d}]",
                            src.table.shape(),
                            dims.num_questions
                        )));
                    }
                    (with_unknown_row(&src.table), src.head.clone())
                }
                None => (
                    uniform(&mut rng, dims.num_questions + 1, d, scale),
                    uniform(&mut rng, d, 1, scale),
                ),
            };
            let mut table = |store: &mut ParamStore, what: &str, rows: usize| {
                store.add(p(what), uniform(&mut rng, rows, d, scale))
            };
            let student = table(&mut store, "student", dims.num_students + 1)?;
            let concept = table(&mut store, "concept", dims.num_concepts)?;
            let success = table(&mut store, "success", dims.num_concepts)?;
            let fail = table(&mut store, "fail", dims.num_concepts)?;
            let recent = table(&mut store, "recent", 3 * dims.num_concepts)?;
            let question = store.add(p("question"), question_table)?;
            let head = store.add_frozen(p("head"), head)?;
            let mut net = |store: &mut ParamStore, what: &str| -> Result<AttentionNet> {
                let h = config.attention_hidden;
                Ok(AttentionNet {
                    w1: store.add(p(&format!("{what}.w1")), uniform(&mut rng, d, h, scale))?,
                    b1: store.add(p(&format!("{what}.b1")), uniform(&mut rng, 1, h, scale))?,
                    w2: store.add(
                        p(&format!("{what}.w2")),
                        uniform(&mut rng, h, 1, 1.0 / (h as f64).sqrt()),
                    )?,
                    b2: store.add(p(&format!("{what}.b2")), Tensor::zeros(1, 1))?,
                })
            };
            let acnn = net(&mut store, "acnn")?;
            let pool = net(&mut store, "pool")?;
            let na = config.num_attempt_factors();
            let (c, w) = (config.conv_channels, config.conv_width);
            let conv_kernel = store.add(
                p("conv.kernel"),
                uniform(&mut rng, c, na * w, 1.0 / ((na * w) as f64).sqrt()),
            )?;
            let conv_bias = store.add(p("conv.bias"), Tensor::zeros(1, c))?;
            let conv_out = if c > 1 {
                Some((
                    store.add(p("conv.out.w"), uniform(&mut rng, c * d, d, 1.0 / ((c * d) as f64).sqrt()))?,
                    store.add(p("conv.out.b"), Tensor::zeros(1, d))?,
                ))
            } else {
                None
            };
            let theta = if config.share_theta || name == "F" {
                shared_theta
            } else {
                store.add(p("theta"), Tensor::filled(1, dims.num_concepts, raw_theta))?
            };
            subspaces.push(Subspace {
                student,
                question,
                concept,
                success,
                fail,
                recent,
                acnn,
                pool,
                conv_kernel,
                conv_bias,
                conv_out,
                theta,
                head,
            });
        }
        let (use_f, use_j) = pooling_layout(&config.flags);
        let mut width = d * (usize::from(use_f) + usize::from(use_j));
        let mut layers: Vec<usize> = if config.flags.r_dnn { Vec::new() } else { config.dnn_hidden.clone() };
        layers.push(1);
        let mut dnn = Vec::new();
        for (k, &out) in layers.iter().enumerate() {
            let w = store.add(
                format!("dnn.{k}.w"),
                uniform(&mut rng, width, out, 1.0 / (width as f64).sqrt()),
            )?;
            let b = store.add(
                format!("dnn.{k}.b"),
                uniform(&mut rng, 1, out, 1.0 / (width as f64).sqrt()),
            )?;
            dnn.push((w, b));
            width = out;
        }
        Ok(Self {
            config,
            dims,
            store,
            subspaces,
            dnn,
        })
    }

    /// Frozen difficulty heads, one per subspace.
    pub fn heads(&self) -> Vec<&Tensor> {
        self.subspaces.iter().map(|s| self.store.value(s.head)).collect()
    }

    /// Effective decay rates of subspace 0.
    pub fn decay_rates(&self) -> Vec<f64> {
        self.store
            .value(self.subspaces[0].theta)
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint::from_store(config_hash, &self.store)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore_into(&mut self.store)?;
        Ok(())
    }

    fn attention_logits(&self, t: &mut Tape, net: &AttentionNet, inputs: &[NodeId]) -> Result<NodeId> {
        let (w1, b1, w2, b2) = (t.param(net.w1)?, t.param(net.b1)?, t.param(net.w2)?, t.param(net.b2)?);
        let mut logits = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let h = t.affine(x, w1, Some(b1))?;
            let h = t.relu(h)?;
            logits.push(t.affine(h, w2, Some(b2))?);
        }
        Ok(t.concat(&logits)?)
    }

    /// Scores `inputs` (each `n x D`) and returns the reweighted inputs with
    /// the `n x k` score matrix.
    fn reweight(
        &self,
        t: &mut Tape,
        net: &AttentionNet,
        inputs: &[NodeId],
        n: usize,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let k = inputs.len();
        if self.config.flags.r_attention {
            let scores = t.constant(Tensor::filled(n, k, 1.0 / k as f64))?;
            let out = inputs
                .iter()
                .map(|&x| t.scale(x, 1.0 / k as f64))
                .collect::<kt_engine::Result<Vec<_>>>()?;
            return Ok((out, scores));
        }
        let logits = self.attention_logits(t, net, inputs)?;
        let scores = t.softmax(logits)?;
        let mut out = Vec::with_capacity(k);
        for (i, &x) in inputs.iter().enumerate() {
            let a = t.column(scores, i)?;
            out.push(t.mul_column(x, a)?);
        }
        Ok((out, scores))
    }

    /// Returns the reweighted factor rows `[student, question, concept,
    /// attempt]` with both score matrices.
    fn subspace_forward(
        &self,
        t: &mut Tape,
        s: &Subspace,
        batch: &Batch,
    ) -> Result<(Vec<NodeId>, NodeId, NodeId)> {
        let n = batch.len;
        let d = self.config.dim;
        let student = t.sparse_embed(s.student, batch.student.clone(), None)?;
        let question = t.sparse_embed(s.question, batch.question.clone(), None)?;
        let concept = t.sparse_embed(s.concept, batch.concept.clone(), None)?;
        let success = t.sparse_embed(s.success, batch.success.clone(), None)?;
        let fail = t.sparse_embed(s.fail, batch.fail.clone(), None)?;
        let mut attempts = vec![success, fail];
        if !self.config.flags.r_recent {
            let raw = t.param(s.theta)?;
            let theta = t.softplus(raw)?;
            let decay = t.exp_decay(theta, batch.recent_concept.clone(), batch.recent_dt.clone())?;
            attempts.push(t.sparse_embed(s.recent, batch.recent.clone(), Some(decay))?);
        }
        let (reweighted, acnn_scores) = self.reweight(t, &s.acnn, &attempts, n)?;
        let stack = t.concat(&reweighted)?;
        let (kernel, bias) = (t.param(s.conv_kernel)?, t.param(s.conv_bias)?);
        let spec = Conv1dSpec {
            channels_in: attempts.len(),
            channels_out: self.config.conv_channels,
            len: d,
            width: self.config.conv_width,
        };
        let mut attempt = t.conv1d(stack, kernel, bias, spec)?;
        if let Some((w, b)) = s.conv_out {
            let (w, b) = (t.param(w)?, t.param(b)?);
            attempt = t.affine(attempt, w, Some(b))?;
        }
        let (g, pool_scores) = self.reweight(t, &s.pool, &[student, question, concept, attempt], n)?;
        Ok((g, acnn_scores, pool_scores))
    }

    /// Records the forward pass. `dropout_rng` switches on training mode.
    pub fn forward(&self, t: &mut Tape, batch: &Batch, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        if batch.len == 0 {
            return Err(KtError::InvalidInput("empty batch".into()));
        }
        let mut acnn_scores = Vec::new();
        let mut pool_scores = Vec::new();
        let mut rows = Vec::new();
        for s in &self.subspaces {
            let (g, a, p) = self.subspace_forward(t, s, batch)?;
            rows.push(g);
            acnn_scores.push(a);
            pool_scores.push(p);
        }
        let (use_f, use_j) = pooling_layout(&self.config.flags);
        let rows_j = rows.last().expect("at least one subspace");
        let v_f = if use_f { Some(sum_pool(t, &rows[0])?) } else { None };
        let v_j = if use_j { Some(interaction_pool(t, rows_j)?) } else { None };
        let parts: Vec<NodeId> = v_f.iter().chain(&v_j).copied().collect();
        let mut h = if parts.len() == 1 { parts[0] } else { t.concat(&parts)? };

        let mut rng = dropout_rng;
        let p = self.config.dropout;
        for (k, &(w, b)) in self.dnn.iter().enumerate() {
            let (w, b) = (t.param(w)?, t.param(b)?);
            h = t.affine(h, w, Some(b))?;
            if k + 1 < self.dnn.len() {
                h = t.relu(h)?;
                if let Some(rng) = rng.as_deref_mut() {
                    if p > 0.0 {
                        let len = t.value(h).len();
                        let mask = (0..len)
                            .map(|_| if rng.gen_bool(1.0 - p) { 1.0 / (1.0 - p) } else { 0.0 })
                            .collect();
                        h = t.dropout(h, mask)?;
                    }
                }
            }
        }
        let prob = t.sigmoid(h)?;
        Ok(Forward {
            prob,
            acnn_scores,
            pool_scores,
            v_f,
            v_j,
        })
    }

    /// `Σ (head · p_q - d_q)²` for one subspace over the batch questions.
    fn difficulty_term(&self, t: &mut Tape, s: &Subspace, batch: &Batch, difficulty: &DifficultyTable) -> Result<NodeId> {
        let mut rows = SparseRows::new();
        let mut targets = Vec::with_capacity(batch.difficulty_rows.len());
        for &q in &batch.difficulty_rows {
            if q >= difficulty.len() {
                return Err(KtError::InvalidInput(format!("no difficulty label for question {q}")));
            }
            rows.push_row([(q, 1.0)]);
            targets.push(difficulty.get(q));
        }
        let p = t.sparse_embed(s.question, rows, None)?;
        let w = t.param(s.head)?;
        let pred = t.affine(p, w, None)?;
        Ok(t.squared_loss(pred, &targets)?)
    }

    /// Summed cross-entropy plus `reg_weight` times the difficulty terms of
    /// the subspaces in use. The regularizer is skipped when the weight is 0
    /// or the heads were not pre-trained.
    pub fn total_loss(
        &self,
        t: &mut Tape,
        batch: &Batch,
        forward: &Forward,
        difficulty: Option<&DifficultyTable>,
        reg_weight: f64,
    ) -> Result<NodeId> {
        let mut loss = t.bce_loss(forward.prob, &batch.labels)?;
        let flags = &self.config.flags;
        if reg_weight > 0.0 && !flags.r_reg && !flags.r_pre && !batch.difficulty_rows.is_empty() {
            let difficulty = difficulty
                .ok_or_else(|| KtError::InvalidInput("difficulty labels required by the regularizer".into()))?;
            let (use_f, use_j) = pooling_layout(flags);
            let used: Vec<&Subspace> = if flags.r_dual {
                vec![&self.subspaces[0]]
            } else {
                self.subspaces
                    .iter()
                    .zip([use_f, use_j])
                    .filter(|(_, u)| *u)
                    .map(|(s, _)| s)
                    .collect()
            };
            for s in used {
                let phi = self.difficulty_term(t, s, batch, difficulty)?;
                let phi = t.scale(phi, reg_weight)?;
                loss = t.add(loss, phi)?;
            }
        }
        Ok(loss)
    }

    /// Predictions with attention scores, evaluated in chunks.
    pub fn predict(&self, instances: &[EncodedInstance]) -> Result<Vec<PredictionOutput>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(1024) {
            let refs: Vec<&EncodedInstance> = chunk.iter().collect();
            let batch = Batch::new(&refs, self.config.log_counts)?;
            let mut t = Tape::new(&self.store);
            let fw = self.forward(&mut t, &batch, None)?;
            let prob = t.value(fw.prob);
            let last = self.subspaces.len() - 1;
            for r in 0..batch.len {
                out.push(PredictionOutput {
                    prob: prob.get(r, 0),
                    acnn_f: t.value(fw.acnn_scores[0]).row_slice(r).to_vec(),
                    acnn_j: t.value(fw.acnn_scores[last]).row_slice(r).to_vec(),
                    pool_f: t.value(fw.pool_scores[0]).row_slice(r).to_vec(),
                    pool_j: t.value(fw.pool_scores[last]).row_slice(r).to_vec(),
                });
            }
        }
        Ok(out)
    }

    pub fn predict_probs(&self, instances: &[EncodedInstance]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(1024) {
            let refs: Vec<&EncodedInstance> = chunk.iter().collect();
            let batch = Batch::new(&refs, self.config.log_counts)?;
            let mut t = Tape::new(&self.store);
            let fw = self.forward(&mut t, &batch, None)?;
            out.extend_from_slice(t.value(fw.prob).data());
        }
        Ok(out)
    }

    #[doc(hidden)]
    pub fn subspace_param(&self, subspace: usize, what: &str) -> Option<ParamId> {
        let s = self.subspaces.get(subspace)?;
        Some(match what {
            "student" => s.student,
            "question" => s.question,
            "concept" => s.concept,
            "success" => s.success,
            "fail" => s.fail,
            "recent" => s.recent,
            "theta" => s.theta,
            "head" => s.head,
            _ => return None,
        })
    }
}

/// `Σ_i g_i`.
pub fn sum_pool(t: &mut Tape, rows: &[NodeId]) -> Result<NodeId> {
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = t.add(acc, r)?;
    }
    Ok(acc)
}

/// `Σ_{i<j} g_i ⊙ g_j` as `((Σ g)² - Σ g²) / 2`.
pub fn interaction_pool(t: &mut Tape, rows: &[NodeId]) -> Result<NodeId> {
    let s = sum_pool(t, rows)?;
    let s2 = t.mul(s, s)?;
    let mut sq = t.mul(rows[0], rows[0])?;
    for &r in &rows[1..] {
        let r2 = t.mul(r, r)?;
        sq = t.add(sq, r2)?;
    }
    let diff = t.sub(s2, sq)?;
    Ok(t.scale(diff, 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_and_label() {
        let f = AblationFlags::parse("r_recent, r_dnn").unwrap();
        assert!(f.r_recent && f.r_dnn && !f.r_pre);
        assert_eq!(f.label(), "r_recent+r_dnn");
        assert_eq!(AblationFlags::parse("").unwrap().label(), "full");
        assert!(AblationFlags::parse("r_interaction,r_feature").is_err());
        assert!(AblationFlags::parse("r_bogus").is_err());
    }

    #[test]
    fn pools_of_one_and_two_rows() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(Tensor::row(&[1.0, 2.0, -3.0])).unwrap();
        let b = t.constant(Tensor::row(&[0.5, -1.0, 2.0])).unwrap();
        let single = interaction_pool(&mut t, &[a]).unwrap();
        assert_eq!(t.value(single).data(), [0.0, 0.0, 0.0]);
        let pair = interaction_pool(&mut t, &[a, b]).unwrap();
        assert_eq!(t.value(pair).data(), [0.5, -2.0, -6.0]);
        let s = sum_pool(&mut t, &[a, b]).unwrap();
        assert_eq!(t.value(s).data(), [1.5, 1.0, -1.0]);
    }
}
