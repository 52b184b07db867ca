//! Training, evaluation, the IRT baseline, ablations and synthetic data.

pub mod check;
pub mod irt;
pub mod metrics;
pub mod synth;
pub mod train;

use std::io::Write;

use crate::dataset::{FoldSplit, InteractionRecord, Vocabulary};
use crate::error::Result;
use crate::network::{AblationFlags, PredictionOutput};

pub use check::check_full_loss;
pub use irt::{irt_baseline, IrtConfig, IrtModel};
pub use metrics::{accuracy, auc, auc_pairwise, EvalReport};
pub use synth::{generate_synthetic, SynthConfig, SynthData};
pub use train::{evaluate, prepare_fold, run_fold, train_model, FoldData, TrainConfig, TrainOutcome};

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub fold: usize,
    pub report: EvalReport,
}

/// Writes `variant,fold,auc,acc` rows.
pub fn write_metrics<W: Write>(rows: &[MetricRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "fold", "auc", "acc"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.fold.to_string(),
            format!("{:.6}", r.report.auc),
            format!("{:.6}", r.report.acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean AUC and ACC per variant, in first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.0 == r.variant) {
            Some(o) => {
                o.1 += r.report.auc;
                o.2 += r.report.acc;
                o.3 += 1;
            }
            None => out.push((r.variant.clone(), r.report.auc, r.report.acc, 1)),
        }
    }
    out.into_iter()
        .map(|(v, a, c, n)| (v, a / n as f64, c / n as f64))
        .collect()
}

/// Trains and evaluates every variant on every listed fold. Variants are
/// applied on top of `base`; contradictory flag sets are rejected before
/// any training starts.
pub fn run_ablation_suite(
    records: &[InteractionRecord],
    vocab: &Vocabulary,
    split: &FoldSplit,
    folds: &[usize],
    base: &TrainConfig,
    variants: &[AblationFlags],
    workers: usize,
) -> Result<Vec<MetricRow>> {
    for v in variants {
        v.validate()?;
    }
    let jobs: Vec<(AblationFlags, usize)> = variants
        .iter()
        .flat_map(|&v| folds.iter().map(move |&f| (v, f)))
        .collect();
    let results = train::run_parallel(jobs.len(), workers, |i| {
        let (flags, fold) = jobs[i];
        let mut config = base.clone();
        config.network.flags = flags;
        run_fold(records, vocab, fold, &split.test_students[fold], &config).map(|r| MetricRow {
            variant: flags.label(),
            fold,
            report: r.report,
        })
    });
    results.into_iter().collect()
}

/// Writes one line per record: position, label, prediction, attempt
/// scores of both subspaces (success, fail, recent) and pooling scores of
/// both subspaces (student, question, concept, attempt).
pub fn write_explanations<W: Write>(
    outputs: &[PredictionOutput],
    records: &[&InteractionRecord],
    vocab: &Vocabulary,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["student", "question", "step", "outcome", "p"];
    header.extend(["acnn_f_success", "acnn_f_fail", "acnn_f_recent"]);
    header.extend(["acnn_j_success", "acnn_j_fail", "acnn_j_recent"]);
    header.extend(["pool_f_student", "pool_f_question", "pool_f_concept", "pool_f_attempt"]);
    header.extend(["pool_j_student", "pool_j_question", "pool_j_concept", "pool_j_attempt"]);
    w.write_record(&header)?;
    for (o, r) in outputs.iter().zip(records) {
        let mut row = vec![
            vocab.students.name(r.student).to_string(),
            vocab.questions.name(r.question).to_string(),
            r.step.to_string(),
            u8::from(r.outcome).to_string(),
            format!("{:.6}", o.prob),
        ];
        for scores in [&o.acnn_f, &o.acnn_j] {
            // Without the recent factor its score column stays empty.
            for k in 0..3 {
                row.push(scores.get(k).map_or(String::new(), |a| format!("{a:.6}")));
            }
        }
        for scores in [&o.pool_f, &o.pool_j] {
            row.extend(scores.iter().map(|a| format!("{a:.6}")));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
