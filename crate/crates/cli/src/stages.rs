//! Pipeline stages. Each stage writes into `<work_dir>/<stage>-<hash>`,
//! where the hash covers the stage's own settings and its upstream hash.
//! A directory is complete once its `manifest.toml` exists; a manifest
//! whose hash disagrees with the directory is refused.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kt_core::dataset::{filter_short_sequences, parse_log, write_log, FoldSplit, InteractionRecord, ParseOptions, Vocabulary};
use kt_core::harness::{
    evaluate, generate_synthetic, prepare_fold, run_ablation_suite, summarize, train_model, write_explanations,
    write_metrics, FoldData, MetricRow,
};
use kt_core::network::{AblationFlags, Model};
use kt_core::pretrain::{pretrain_dual, write_embeddings, DualPretrained};
use kt_core::question_graph::{DifficultyTable, SimilarityMatrix};
use kt_engine::{Checkpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{
    file_hash, RunConfig, ABLATION_KEYS, GRAPH_KEYS, INGEST_KEYS, PRETRAIN_KEYS, TRAIN_KEYS,
};
use crate::Failure;

const MANIFEST: &str = "manifest.toml";
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    hash: String,
    upstream: String,
}

/// A content-addressed output directory.
pub struct Stage {
    pub name: &'static str,
    pub hash: String,
    pub upstream: String,
    pub dir: PathBuf,
}

impl Stage {
    fn new(config: &RunConfig, name: &'static str, upstream: &str, hash: String) -> Self {
        let dir = config.work_dir().join(format!("{name}-{}", &hash[..16]));
        Self {
            name,
            hash,
            upstream: upstream.to_string(),
            dir,
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Whether a finished artifact exists. A manifest that records a
    /// different stage or hash is an error, never a silent reuse.
    pub fn is_complete(&self) -> Result<bool, Failure> {
        let path = self.file(MANIFEST);
        if !path.exists() {
            return Ok(false);
        }
        let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
        let m: Manifest = toml::from_str(&text)
            .map_err(|e| Failure::Data(format!("{}: unreadable manifest: {e}", path.display())))?;
        if m.stage != self.name || m.hash != self.hash || m.upstream != self.upstream {
            return Err(Failure::Data(format!(
                "stale artifact in {}: recorded {} hash {}, expected {}; refusing to reuse it",
                self.dir.display(),
                m.stage,
                m.hash,
                self.hash
            )));
        }
        Ok(true)
    }

    /// Clears any previous content and writes the resolved config.
    fn begin(&self, config: &RunConfig) -> Result<(), Failure> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).map_err(|e| io_failure(&self.dir, e))?;
        }
        fs::create_dir_all(&self.dir).map_err(|e| io_failure(&self.dir, e))?;
        write_text(&self.file(RESOLVED_CONFIG), &config.to_toml())
    }

    fn finish(&self) -> Result<(), Failure> {
        let m = Manifest {
            stage: self.name.to_string(),
            hash: self.hash.clone(),
            upstream: self.upstream.clone(),
        };
        write_text(&self.file(MANIFEST), &toml::to_string(&m).expect("manifest serializes"))
    }

    fn require(&self, command: &str) -> Result<(), Failure> {
        if self.is_complete()? {
            Ok(())
        } else {
            Err(Failure::Data(format!(
                "no {} artifact for this configuration (expected {}); run `mfdakt {command}` first",
                self.name,
                self.dir.display()
            )))
        }
    }

    fn load_checkpoint(&self, name: &str) -> Result<Checkpoint, Failure> {
        let path = self.file(name);
        let ckpt = Checkpoint::load(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        if ckpt.config_hash != self.hash {
            return Err(Failure::Data(format!(
                "{} was written for configuration {}, expected {}; refusing stale checkpoint",
                path.display(),
                ckpt.config_hash,
                self.hash
            )));
        }
        Ok(ckpt)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| io_failure(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

// Stage identities.

pub fn ingest_stage(config: &RunConfig) -> Result<Stage, Failure> {
    let data = file_hash(Path::new(&config.data_path))?;
    let hash = config.stage_hash("ingest", &data, INGEST_KEYS, &[]);
    Ok(Stage::new(config, "ingest", &data, hash))
}

pub fn graph_stage(config: &RunConfig, ingest: &Stage) -> Result<Stage, Failure> {
    let mode = if config.flags()?.r_binary { "binary" } else { "continuous" };
    let hash = config.stage_hash("graph", &ingest.hash, GRAPH_KEYS, &[("similarity_mode", mode.to_string())]);
    Ok(Stage::new(config, "graph", &ingest.hash, hash))
}

pub fn pretrain_stage(config: &RunConfig, graph: &Stage) -> Stage {
    let hash = config.stage_hash("pretrain", &graph.hash, PRETRAIN_KEYS, &[]);
    Stage::new(config, "pretrain", &graph.hash, hash)
}

/// Under `r_pre` the model starts from the graph stage directly.
pub fn train_stage(config: &RunConfig, upstream: &Stage) -> Stage {
    let hash = config.stage_hash("train", &upstream.hash, TRAIN_KEYS, &[("dim", config.dim.to_string())]);
    Stage::new(config, "train", &upstream.hash, hash)
}

pub fn ablate_stage(config: &RunConfig, ingest: &Stage) -> Stage {
    let keys: Vec<&str> = [GRAPH_KEYS, PRETRAIN_KEYS, TRAIN_KEYS, ABLATION_KEYS].concat();
    let hash = config.stage_hash("ablate", &ingest.hash, &keys, &[]);
    Stage::new(config, "ablate", &ingest.hash, hash)
}

fn derived_stage(config: &RunConfig, name: &'static str, upstream: &Stage, extra: &str) -> Stage {
    let hash = config.stage_hash(name, &upstream.hash, &[], &[("source", extra.to_string())]);
    Stage::new(config, name, &upstream.hash, hash)
}

// Ingest.

pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    pub vocab: Vocabulary,
    pub split: FoldSplit,
}

pub fn run_synth(config: &RunConfig) -> Result<PathBuf, Failure> {
    let data = generate_synthetic(&config.synth_config()).map_err(Failure::from)?;
    let dir = PathBuf::from(&config.synth_dir);
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    write_log(&data.records, &data.vocab, create(&dir.join("log.csv"))?)?;
    data.write_truth(create(&dir.join("truth.csv"))?)?;
    write_text(&dir.join(RESOLVED_CONFIG), &config.to_toml())?;
    log::info!("{} records from {} students", data.records.len(), data.vocab.num_students());
    Ok(dir)
}

pub fn run_ingest(config: &RunConfig) -> Result<Stage, Failure> {
    let stage = ingest_stage(config)?;
    stage.begin(config)?;
    let parsed = parse_log(open(Path::new(&config.data_path))?, &config.parse_options())?;
    if !parsed.errors.is_empty() {
        let mut w = create(&stage.file("rejected.txt"))?;
        for e in &parsed.errors {
            writeln!(w, "line {}: {}", e.line, e.message).map_err(|e| io_failure(&stage.dir, e))?;
        }
        log::warn!("skipped {} malformed rows; see rejected.txt", parsed.errors.len());
    }
    let kept = filter_short_sequences(parsed.records, config.min_seq_len);
    if kept.is_empty() {
        return Err(Failure::Data(format!(
            "no student has more than {} records",
            config.min_seq_len
        )));
    }
    // Re-reading the normalized log drops vocabulary entries of filtered
    // students and fixes the index order for every later stage.
    let log_path = stage.file("log.csv");
    write_log(&kept, &parsed.vocab, create(&log_path)?)?;
    let dataset = read_log(&log_path)?;
    let split = kt_core::dataset::split_folds(&dataset.records, config.num_folds, config.fold_seed)?;
    split.write(&dataset.vocab, create(&stage.file("folds.csv"))?)?;
    log::info!(
        "{} records, {} students, {} questions, {} concepts",
        dataset.records.len(),
        dataset.vocab.num_students(),
        dataset.vocab.num_questions(),
        dataset.vocab.num_concepts()
    );
    stage.finish()?;
    Ok(stage)
}

struct LogOnly {
    records: Vec<InteractionRecord>,
    vocab: Vocabulary,
}

fn read_log(path: &Path) -> Result<LogOnly, Failure> {
    let parsed = parse_log(open(path)?, &ParseOptions::strict())?;
    Ok(LogOnly {
        records: parsed.records,
        vocab: parsed.vocab,
    })
}

fn load_dataset(stage: &Stage) -> Result<Dataset, Failure> {
    let LogOnly { records, vocab } = read_log(&stage.file("log.csv"))?;
    let split = FoldSplit::read(&vocab, open(&stage.file("folds.csv"))?)?;
    Ok(Dataset { records, vocab, split })
}

fn ensure_ingest(config: &RunConfig) -> Result<(Stage, Dataset), Failure> {
    let stage = ingest_stage(config)?;
    let stage = if stage.is_complete()? { stage } else { run_ingest(config)? };
    let data = load_dataset(&stage)?;
    Ok((stage, data))
}

// Graph and pre-training.

fn fold_data(config: &RunConfig, data: &Dataset) -> Result<FoldData, Failure> {
    let test = data
        .split
        .test_students
        .get(config.fold)
        .ok_or_else(|| Failure::Usage(format!("fold {} does not exist", config.fold)))?;
    Ok(prepare_fold(&data.records, &data.vocab, test, &config.train_config()?)?)
}

pub fn run_graph(config: &RunConfig) -> Result<Stage, Failure> {
    let (ingest, data) = ensure_ingest(config)?;
    let stage = graph_stage(config, &ingest)?;
    stage.begin(config)?;
    let fold = fold_data(config, &data)?;
    fold.similarity.write(&data.vocab, create(&stage.file("similarity.csv"))?)?;
    fold.difficulty.write(&data.vocab, create(&stage.file("difficulty.csv"))?)?;
    log::info!("{} similar pairs", fold.similarity.num_pairs());
    stage.finish()?;
    Ok(stage)
}

fn ensure_graph(config: &RunConfig) -> Result<(Stage, Dataset), Failure> {
    let ingest = ingest_stage(config)?;
    let stage = graph_stage(config, &ingest)?;
    if !(ingest.is_complete()? && stage.is_complete()?) {
        run_graph(config)?;
    }
    let data = load_dataset(&ingest)?;
    Ok((stage, data))
}

pub fn run_pretrain(config: &RunConfig) -> Result<Stage, Failure> {
    if config.flags()?.r_pre {
        return Err(Failure::Usage("pre-training is disabled by r_pre".into()));
    }
    let (graph, data) = ensure_graph(config)?;
    let stage = pretrain_stage(config, &graph);
    stage.begin(config)?;
    let similarity = SimilarityMatrix::read(&data.vocab, open(&graph.file("similarity.csv"))?)?;
    let difficulty = DifficultyTable::read(&data.vocab, open(&graph.file("difficulty.csv"))?)?;
    let pc = config.train_config()?.pretrain;
    // Same seeding as in-process fold runs.
    let dual = pretrain_dual(&similarity, &difficulty, &pc, pc.seed, pc.seed.wrapping_add(1))?;
    dual.to_checkpoint(&stage.hash).save(stage.file("pretrain.ckpt")).map_err(Failure::from_engine)?;
    let mut w = create(&stage.file("loss_trace.csv"))?;
    writeln!(w, "epoch,loss_f,loss_j").and_then(|_| {
        dual.f.loss_trace.iter().zip(&dual.j.loss_trace).enumerate().try_for_each(|(e, (f, j))| writeln!(w, "{e},{f},{j}"))
    })
    .map_err(|e| io_failure(&stage.dir, e))?;
    drop(w);
    stage.finish()?;
    Ok(stage)
}

/// The stage the model is initialized from, with its pre-trained tables.
fn ensure_init(config: &RunConfig, build: bool) -> Result<(Stage, Dataset, Option<DualPretrained>), Failure> {
    let (graph, data) = if build {
        ensure_graph(config)?
    } else {
        let ingest = ingest_stage(config)?;
        ingest.require("ingest")?;
        let graph = graph_stage(config, &ingest)?;
        graph.require("build-graph")?;
        (graph, load_dataset(&ingest)?)
    };
    if config.flags()?.r_pre {
        return Ok((graph, data, None));
    }
    let stage = pretrain_stage(config, &graph);
    if build && !stage.is_complete()? {
        run_pretrain(config)?;
    }
    stage.require("pretrain")?;
    let dual = DualPretrained::from_checkpoint(&stage.load_checkpoint("pretrain.ckpt")?)?;
    Ok((stage, data, Some(dual)))
}

// Training and evaluation.

fn metrics_row(flags: AblationFlags, fold: usize, report: kt_core::harness::EvalReport) -> MetricRow {
    MetricRow {
        variant: flags.label(),
        fold,
        report,
    }
}

pub fn run_train(config: &RunConfig) -> Result<Stage, Failure> {
    let (init, data, pretrained) = ensure_init(config, true)?;
    let stage = train_stage(config, &init);
    stage.begin(config)?;
    let tc = config.train_config()?;
    let fold = fold_data(config, &data)?;
    let outcome = train_model(&fold, pretrained.as_ref(), &tc)?;
    outcome
        .model
        .to_checkpoint(&stage.hash)
        .save(stage.file("model.ckpt"))
        .map_err(Failure::from_engine)?;
    let mut w = create(&stage.file("trace.csv"))?;
    let rows: std::io::Result<()> = writeln!(w, "epoch,loss,valid_auc").and_then(|_| {
        outcome.trace.iter().try_for_each(|s| {
            let v = s.valid_auc.map_or(String::new(), |v| format!("{v:.6}"));
            writeln!(w, "{},{:.6},{v}", s.epoch, s.loss)
        })
    });
    rows.map_err(|e| io_failure(&stage.dir, e))?;
    drop(w);
    let report = evaluate(&outcome.model, &fold.test)?;
    let row = metrics_row(tc.network.flags, config.fold, report);
    write_metrics(std::slice::from_ref(&row), create(&stage.file("metrics.csv"))?)?;
    println!("{} fold {}: auc {:.4} acc {:.4} (best epoch {})", row.variant, row.fold, report.auc, report.acc, outcome.best_epoch);
    stage.finish()?;
    Ok(stage)
}

struct Trained {
    stage: Stage,
    data: Dataset,
    fold: FoldData,
    model: Model,
}

fn load_trained(config: &RunConfig) -> Result<Trained, Failure> {
    let (init, data, pretrained) = ensure_init(config, false)?;
    let stage = train_stage(config, &init);
    stage.require("train")?;
    let ckpt = stage.load_checkpoint("model.ckpt")?;
    let tc = config.train_config()?;
    let fold = fold_data(config, &data)?;
    let mut model = Model::new(tc.network, fold.dims, pretrained.as_ref(), tc.seed)?;
    model.restore(&ckpt)?;
    Ok(Trained { stage, data, fold, model })
}

pub fn run_eval(config: &RunConfig) -> Result<Stage, Failure> {
    let t = load_trained(config)?;
    let stage = derived_stage(config, "eval", &t.stage, "test");
    stage.begin(config)?;
    let report = evaluate(&t.model, &t.fold.test)?;
    let row = metrics_row(t.model.config.flags, config.fold, report);
    write_metrics(std::slice::from_ref(&row), create(&stage.file("metrics.csv"))?)?;
    println!("{} fold {}: auc {:.4} acc {:.4} on {} records", row.variant, row.fold, report.auc, report.acc, report.count);
    stage.finish()?;
    Ok(stage)
}

pub fn run_explain(config: &RunConfig) -> Result<Stage, Failure> {
    let t = load_trained(config)?;
    let stage = derived_stage(config, "explain", &t.stage, "test");
    stage.begin(config)?;
    let outputs = t.model.predict(&t.fold.test)?;
    let records: Vec<&InteractionRecord> = t.fold.test_positions.iter().map(|&i| &t.data.records[i]).collect();
    write_explanations(&outputs, &records, &t.data.vocab, create(&stage.file("explanations.csv"))?)?;
    stage.finish()?;
    Ok(stage)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EmbeddingSource {
    /// Pre-trained question tables.
    Pretrain,
    /// Fine-tuned question tables of the trained model.
    Model,
}

pub fn run_export(config: &RunConfig, source: EmbeddingSource) -> Result<Stage, Failure> {
    let tables: Vec<(&str, Tensor)>;
    let (upstream, vocab) = match source {
        EmbeddingSource::Pretrain => {
            let (stage, data, dual) = ensure_init(config, false)?;
            let dual = dual.ok_or_else(|| Failure::Usage("no pre-trained tables under r_pre".into()))?;
            tables = vec![("F", dual.f.table), ("J", dual.j.table)];
            (stage, data.vocab)
        }
        EmbeddingSource::Model => {
            let t = load_trained(config)?;
            let mut found = Vec::new();
            for (name, sub) in [("F", 0), ("J", 1)] {
                if let Some(id) = t.model.subspace_param(sub, "question") {
                    found.push((name, t.model.store.value(id).clone()));
                }
            }
            tables = found;
            (t.stage, t.data.vocab)
        }
    };
    let label = match source {
        EmbeddingSource::Pretrain => "pretrain",
        EmbeddingSource::Model => "model",
    };
    let stage = derived_stage(config, "embeddings", &upstream, label);
    stage.begin(config)?;
    for (name, table) in &tables {
        write_embeddings(table, &vocab, create(&stage.file(&format!("questions_{name}.csv")))?)?;
    }
    stage.finish()?;
    Ok(stage)
}

pub fn run_ablate(config: &RunConfig) -> Result<Stage, Failure> {
    let (ingest, data) = ensure_ingest(config)?;
    let stage = ablate_stage(config, &ingest);
    stage.begin(config)?;
    let base = config.train_config()?;
    let mut variants = Vec::with_capacity(config.ablation_variants.len());
    for v in &config.ablation_variants {
        let mut flags = AblationFlags::parse(v)?;
        for name in AblationFlags::NAMES {
            if base.network.flags.get(name) == Some(true) {
                flags.set(name, true)?;
            }
        }
        variants.push(flags);
    }
    let rows = run_ablation_suite(
        &data.records,
        &data.vocab,
        &data.split,
        &config.ablation_folds,
        &base,
        &variants,
        config.workers,
    )?;
    write_metrics(&rows, create(&stage.file("metrics.csv"))?)?;
    let mut w = create(&stage.file("summary.csv"))?;
    let summary: std::io::Result<()> = writeln!(w, "variant,mean_auc,mean_acc").and_then(|_| {
        summarize(&rows).iter().try_for_each(|(v, auc, acc)| {
            println!("{v:<24} auc {auc:.4} acc {acc:.4}");
            writeln!(w, "{v},{auc:.6},{acc:.6}")
        })
    });
    summary.map_err(|e| io_failure(&stage.dir, e))?;
    drop(w);
    stage.finish()?;
    Ok(stage)
}
