//! Question relations from shared concepts, and empirical difficulty.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use crate::dataset::{InteractionRecord, Vocabulary};
use crate::error::{KtError, Result};

/// `|A ∩ B| / max(|A|, |B|)` for two concept sets.
pub fn concept_overlap_similarity(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(KtError::InvalidInput("similarity of an empty concept set".into()));
    }
    let shared = a.iter().filter(|c| b.contains(c)).count();
    Ok(shared as f64 / a.len().max(b.len()) as f64)
}

/// How overlap counts become edge weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Overlap over the larger concept set.
    #[default]
    Continuous,
    /// 1 for any overlap.
    Binary,
}

/// Sparse symmetric similarity over questions. Only pairs sharing at least
/// one concept are stored, each once with `i < j`; the diagonal is an
/// implicit 1 and is never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityMatrix {
    num_questions: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

impl SimilarityMatrix {
    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        self.entries.get(&ordered(i, j)).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i != j && self.entries.contains_key(&ordered(i, j))
    }

    pub fn num_pairs(&self) -> usize {
        self.entries.len()
    }

    /// Stored pairs as `(i, j, similarity)` with `i < j`, in index order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &s)| (i, j, s))
    }

    /// Neighbors of every question, strongest first (ties by index).
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.num_questions];
        for (i, j, s) in self.pairs() {
            out[i].push((j, s));
            out[j].push((i, s));
        }
        for list in &mut out {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        out
    }

    /// Writes `qi,qj,sim` rows with external question ids.
    pub fn write<W: Write>(&self, vocab: &Vocabulary, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["qi", "qj", "sim"])?;
        for (i, j, s) in self.pairs() {
            w.write_record([vocab.questions.name(i), vocab.questions.name(j), &s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(vocab: &Vocabulary, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |message: String| KtError::Row { line, message };
            let q = |k: usize| {
                let name = row.get(k).unwrap_or_default();
                vocab
                    .questions
                    .get(name)
                    .ok_or_else(|| bad(format!("unknown question `{name}`")))
            };
            let (i, j) = (q(0)?, q(1)?);
            let s: f64 = row
                .get(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad similarity".into()))?;
            if i == j || !(s > 0.0 && s <= 1.0) {
                return Err(bad(format!("invalid entry ({i}, {j}, {s})")));
            }
            entries.insert(ordered(i, j), s);
        }
        Ok(Self {
            num_questions: vocab.num_questions(),
            entries,
        })
    }
}

/// Builds the similarity matrix from the vocabulary's question concept sets,
/// visiting only pairs that share a concept.
pub fn build_similarity(vocab: &Vocabulary, mode: SimilarityMode) -> Result<SimilarityMatrix> {
    let mut by_concept: Vec<Vec<usize>> = vec![Vec::new(); vocab.num_concepts()];
    for (q, concepts) in vocab.question_concepts.iter().enumerate() {
        if concepts.is_empty() {
            return Err(KtError::InvalidInput(format!(
                "question `{}` has no concepts",
                vocab.questions.name(q)
            )));
        }
        for &c in concepts {
            by_concept[c].push(q);
        }
    }
    let mut overlap: HashMap<(usize, usize), usize> = HashMap::new();
    for bucket in &by_concept {
        for (a, &i) in bucket.iter().enumerate() {
            for &j in &bucket[a + 1..] {
                *overlap.entry(ordered(i, j)).or_default() += 1;
            }
        }
    }
    let entries = overlap
        .into_iter()
        .map(|((i, j), shared)| {
            let s = match mode {
                SimilarityMode::Continuous => {
                    let larger = vocab.question_concepts[i].len().max(vocab.question_concepts[j].len());
                    shared as f64 / larger as f64
                }
                SimilarityMode::Binary => 1.0,
            };
            ((i, j), s)
        })
        .collect();
    Ok(SimilarityMatrix {
        num_questions: vocab.num_questions(),
        entries,
    })
}

/// Correct-answer rate of every question on one training split.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyTable {
    values: Vec<f64>,
    counts: Vec<u32>,
    global_mean: f64,
    /// Students whose records produced the table, sorted. `None` when the
    /// table was loaded from a file and its origin is unknown.
    source_students: Option<Vec<usize>>,
}

impl DifficultyTable {
    pub fn get(&self, question: usize) -> f64 {
        self.values[question]
    }

    pub fn count(&self, question: usize) -> u32 {
        self.counts[question]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn source_students(&self) -> Option<&[usize]> {
        self.source_students.as_deref()
    }

    /// Fails if any of `test_students` contributed to the table, or if the
    /// table's origin is unknown.
    pub fn check_no_leakage(&self, test_students: &[usize]) -> Result<()> {
        let Some(src) = &self.source_students else {
            return Err(KtError::Leakage("difficulty table has no provenance".into()));
        };
        if let Some(s) = test_students.iter().find(|s| src.binary_search(s).is_ok()) {
            return Err(KtError::Leakage(format!(
                "test student {s} contributed to the difficulty table"
            )));
        }
        Ok(())
    }

    /// Writes `q,difficulty,count` rows.
    pub fn write<W: Write>(&self, vocab: &Vocabulary, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["q", "difficulty", "count"])?;
        for (q, (d, c)) in self.values.iter().zip(&self.counts).enumerate() {
            w.write_record([vocab.questions.name(q), &d.to_string(), &c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(vocab: &Vocabulary, reader: R) -> Result<Self> {
        let n = vocab.num_questions();
        let mut values = vec![f64::NAN; n];
        let mut counts = vec![0; n];
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |message: &str| KtError::Row {
                line,
                message: message.to_string(),
            };
            let q = vocab
                .questions
                .get(row.get(0).unwrap_or_default())
                .ok_or_else(|| bad("unknown question"))?;
            values[q] = row
                .get(1)
                .and_then(|v| v.parse().ok())
                .filter(|d: &f64| (0.0..=1.0).contains(d))
                .ok_or_else(|| bad("bad difficulty"))?;
            counts[q] = row
                .get(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad count"))?;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(KtError::InvalidInput("difficulty file misses questions".into()));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let correct: f64 = values.iter().zip(&counts).map(|(d, &c)| d * c as f64).sum();
        Ok(Self {
            values,
            counts,
            global_mean: if total > 0 { correct / total as f64 } else { 0.5 },
            source_students: None,
        })
    }
}

/// Correct-answer rate per question over `train`. Questions with fewer than
/// `min_count` answers get the global correct rate instead.
pub fn compute_difficulty(
    train: &[InteractionRecord],
    num_questions: usize,
    min_count: u32,
) -> Result<DifficultyTable> {
    if train.is_empty() {
        return Err(KtError::InvalidInput("difficulty from an empty training set".into()));
    }
    let mut correct = vec![0u32; num_questions];
    let mut counts = vec![0u32; num_questions];
    for r in train {
        if r.question >= num_questions {
            return Err(KtError::InvalidInput(format!("question {} out of range", r.question)));
        }
        counts[r.question] += 1;
        correct[r.question] += u32::from(r.outcome);
    }
    let global_mean =
        correct.iter().map(|&c| c as f64).sum::<f64>() / counts.iter().map(|&c| c as f64).sum::<f64>();
    let values = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| {
            if n < min_count.max(1) {
                global_mean
            } else {
                c as f64 / n as f64
            }
        })
        .collect();
    let mut source: Vec<usize> = train.iter().map(|r| r.student).collect();
    source.sort_unstable();
    source.dedup();
    Ok(DifficultyTable {
        values,
        counts,
        global_mean,
        source_students: Some(source),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(sets: &[&[&str]]) -> Vocabulary {
        let mut v = Vocabulary::default();
        for (i, set) in sets.iter().enumerate() {
            v.add_question(&format!("q{}", i + 1), set).unwrap();
        }
        v
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(concept_overlap_similarity(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(concept_overlap_similarity(&[1, 2], &[2, 3]).unwrap(), 0.5);
        assert_eq!(concept_overlap_similarity(&[1], &[2]).unwrap(), 0.0);
        assert_eq!(concept_overlap_similarity(&[1], &[1, 2, 3]).unwrap(), 1.0 / 3.0);
        assert!(concept_overlap_similarity(&[], &[1]).is_err());
    }

    #[test]
    fn question_graph_example_weights() {
        // q1 and q3 share both concepts; q1/q2 and q3/q2 share one of two.
        let v = vocab_of(&[&["c1", "c2"], &["c2", "c3"], &["c1", "c2"], &["c4"]]);
        let m = build_similarity(&v, SimilarityMode::Continuous).unwrap();
        assert_eq!(m.get(0, 2), 1.0);
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(m.get(1, 2), 0.5);
        assert_eq!(m.get(2, 1), 0.5);
        assert_eq!(m.get(3, 0), 0.0);
        assert_eq!(m.num_pairs(), 3);
        assert!(!m.contains(0, 0));

        let b = build_similarity(&v, SimilarityMode::Binary).unwrap();
        assert_eq!(b.get(0, 1), 1.0);
    }

    #[test]
    fn disjoint_questions_give_empty_matrix() {
        let v = vocab_of(&[&["a"], &["b"], &["c"]]);
        assert_eq!(build_similarity(&v, SimilarityMode::Continuous).unwrap().num_pairs(), 0);
    }

    #[test]
    fn question_without_concepts_is_rejected() {
        let mut v = vocab_of(&[&["a"]]);
        v.questions.intern("bare");
        v.question_concepts.push(Vec::new());
        assert!(build_similarity(&v, SimilarityMode::Continuous).is_err());
    }

    fn rec(student: usize, question: usize, outcome: bool) -> InteractionRecord {
        InteractionRecord {
            student,
            question,
            concepts: vec![0],
            step: 0,
            outcome,
        }
    }

    #[test]
    fn difficulty_rates_and_fallback() {
        // q0: 3/4 correct, q1: 2/2, q2 unseen. Global mean = 5/6.
        let train = vec![
            rec(0, 0, true),
            rec(1, 0, true),
            rec(2, 0, true),
            rec(3, 0, false),
            rec(0, 1, true),
            rec(1, 1, true),
        ];
        let t = compute_difficulty(&train, 3, 1).unwrap();
        assert_eq!(t.get(0), 0.75);
        assert_eq!(t.get(1), 1.0);
        assert_eq!(t.get(2), 5.0 / 6.0);
        assert_eq!(t.count(2), 0);
        assert!(compute_difficulty(&[], 3, 1).is_err());
    }

    #[test]
    fn fallback_uses_hand_computed_global_mean() {
        // 50 answers, 31 correct -> 0.62.
        let mut train = Vec::new();
        for i in 0..50 {
            train.push(rec(i, i % 5, i < 31));
        }
        let t = compute_difficulty(&train, 6, 1).unwrap();
        assert!((t.get(5) - 0.62).abs() < 1e-15);
    }

    #[test]
    fn leakage_guard() {
        let train = vec![rec(0, 0, true), rec(1, 0, false)];
        let test = vec![rec(2, 0, true), rec(2, 0, true)];
        let clean = compute_difficulty(&train, 1, 1).unwrap();
        let all: Vec<_> = train.iter().chain(&test).cloned().collect();
        let leaky = compute_difficulty(&all, 1, 1).unwrap();
        assert_ne!(clean.get(0), leaky.get(0));
        assert!(clean.check_no_leakage(&[2]).is_ok());
        assert!(leaky.check_no_leakage(&[2]).is_err());
    }

    #[test]
    fn text_formats_round_trip() {
        let v = vocab_of(&[&["c1", "c2"], &["c2", "c3"], &["c1", "c2"]]);
        let m = build_similarity(&v, SimilarityMode::Continuous).unwrap();
        let mut buf = Vec::new();
        m.write(&v, &mut buf).unwrap();
        assert_eq!(SimilarityMatrix::read(&v, buf.as_slice()).unwrap(), m);

        let train = vec![rec(0, 0, true), rec(0, 1, false), rec(1, 1, true)];
        let t = compute_difficulty(&train, 3, 1).unwrap();
        let mut buf = Vec::new();
        t.write(&v, &mut buf).unwrap();
        let back = DifficultyTable::read(&v, buf.as_slice()).unwrap();
        assert_eq!(back.values(), t.values());
        assert!(back.check_no_leakage(&[]).is_err());
    }
}
