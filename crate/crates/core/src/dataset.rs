//! Interaction logs: parsing, vocabularies, filtering, fold splits and
//! per-student history replay.
//!
//! The log format is a UTF-8 CSV with header
//! `student,question,concepts,step,outcome` and an optional integer
//! `timestamp` column. `concepts` is a `|`-joined list of concept ids and
//! `outcome` is `0` or `1`. Rows are sorted per student by
//! `(timestamp, step)`; after sorting, steps are renumbered to sequence
//! positions `0, 1, 2, ...` so that intervals are counted in practice steps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KtError, Result};

pub const CONCEPT_SEPARATOR: char = '|';

/// Default sequence-length threshold: students with this many records or
/// fewer are dropped.
pub const DEFAULT_MIN_LEN: usize = 3;

/// One answered question. Ids are dense vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub student: usize,
    pub question: usize,
    pub concepts: Vec<usize>,
    pub step: u64,
    pub outcome: bool,
}

/// Bijection between external string ids and dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interner {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub students: Interner,
    pub questions: Interner,
    pub concepts: Interner,
    /// Concept set of each question, indexed by question.
    pub question_concepts: Vec<Vec<usize>>,
}

impl Vocabulary {
    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn concepts_of(&self, question: usize) -> &[usize] {
        &self.question_concepts[question]
    }

    /// Registers a question with its concept set. A question seen before
    /// must carry the same set.
    pub fn add_question(&mut self, question: &str, concepts: &[&str]) -> Result<usize> {
        if let Some(q) = self.questions.get(question) {
            let known: Option<Vec<usize>> = concepts.iter().map(|c| self.concepts.get(c)).collect();
            return match known {
                Some(idx) if same_set(&self.question_concepts[q], &idx) => Ok(q),
                _ => Err(KtError::InvalidInput(format!(
                    "question `{question}` listed with different concept sets"
                ))),
            };
        }
        let concept_idx: Vec<usize> = concepts.iter().map(|c| self.concepts.intern(c)).collect();
        let q = self.questions.intern(question);
        self.question_concepts.push(concept_idx);
        Ok(q)
    }
}

fn same_set(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

#[derive(Clone, Debug, Default)]
pub struct ParseOptions {
    /// Abort on the first malformed row. When false, malformed rows are
    /// skipped and reported.
    pub strict: bool,
    /// Concept ids dropped before anything else (unnamed or dummy tags).
    pub deny_concepts: HashSet<String>,
}

impl ParseOptions {
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::default()
        }
    }

    pub fn lenient() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub records: Vec<InteractionRecord>,
    pub vocab: Vocabulary,
    pub errors: Vec<RowError>,
}

struct RawRow {
    line: u64,
    student: String,
    question: String,
    concepts: Vec<String>,
    step: u64,
    timestamp: i64,
    outcome: bool,
}

struct Columns {
    student: usize,
    question: usize,
    concepts: usize,
    step: usize,
    outcome: usize,
    timestamp: Option<usize>,
}

impl Columns {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let find = |name: &'static str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or(KtError::MissingColumn(name))
        };
        Ok(Self {
            student: find("student")?,
            question: find("question")?,
            concepts: find("concepts")?,
            step: find("step")?,
            outcome: find("outcome")?,
            timestamp: find("timestamp").ok(),
        })
    }
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &Columns,
    line: u64,
    options: &ParseOptions,
) -> std::result::Result<RawRow, String> {
    let field = |i: usize, name: &str| {
        row.get(i)
            .map(str::trim)
            .ok_or_else(|| format!("missing field `{name}`"))
    };
    let student = field(cols.student, "student")?;
    let question = field(cols.question, "question")?;
    if student.is_empty() || question.is_empty() {
        return Err("empty student or question id".into());
    }
    let mut concepts: Vec<String> = Vec::new();
    for c in field(cols.concepts, "concepts")?.split(CONCEPT_SEPARATOR) {
        let c = c.trim();
        if c.is_empty() {
            return Err("empty concept id".into());
        }
        if options.deny_concepts.contains(c) || concepts.iter().any(|x| x == c) {
            continue;
        }
        concepts.push(c.to_string());
    }
    if concepts.is_empty() {
        return Err("empty concept list".into());
    }
    let step_text = field(cols.step, "step")?;
    let step = step_text
        .parse::<u64>()
        .map_err(|_| format!("step `{step_text}` is not a nonnegative integer"))?;
    let outcome = match field(cols.outcome, "outcome")? {
        "0" => false,
        "1" => true,
        other => return Err(format!("outcome `{other}` is not 0 or 1")),
    };
    let timestamp = match cols.timestamp {
        Some(i) => {
            let t = field(i, "timestamp")?;
            t.parse::<i64>()
                .map_err(|_| format!("timestamp `{t}` is not an integer"))?
        }
        None => 0,
    };
    Ok(RawRow {
        line,
        student: student.to_string(),
        question: question.to_string(),
        concepts,
        step,
        timestamp,
        outcome,
    })
}

/// Parses a log in the CSV form described in the module docs.
pub fn parse_log<R: Read>(reader: R, options: &ParseOptions) -> Result<ParsedLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let Some(headers) = rows.next().transpose()? else {
        return Ok(ParsedLog {
            records: Vec::new(),
            vocab: Vocabulary::default(),
            errors: Vec::new(),
        });
    };
    let cols = Columns::from_headers(&headers)?;

    let mut errors = Vec::new();
    let mut report = |line: u64, message: String| -> Result<()> {
        if options.strict {
            return Err(KtError::Row { line, message });
        }
        log::warn!("skipping line {line}: {message}");
        errors.push(RowError { line, message });
        Ok(())
    };

    let mut raw = Vec::new();
    let mut seen_steps: HashSet<(String, u64)> = HashSet::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        match parse_row(&row, &cols, line, options) {
            Ok(r) => {
                if !seen_steps.insert((r.student.clone(), r.step)) {
                    report(
                        line,
                        format!("duplicate step {} for student `{}`", r.step, r.student),
                    )?;
                    continue;
                }
                raw.push(r);
            }
            Err(message) => report(line, message)?,
        }
    }

    // Vocabulary in file order; questions must keep one concept set.
    let mut vocab = Vocabulary::default();
    let mut accepted = Vec::with_capacity(raw.len());
    for r in raw {
        let concept_refs: Vec<&str> = r.concepts.iter().map(String::as_str).collect();
        match vocab.add_question(&r.question, &concept_refs) {
            Ok(q) => {
                let s = vocab.students.intern(&r.student);
                let concepts = vocab.question_concepts[q].clone();
                accepted.push((s, r.timestamp, r.step, q, concepts, r.outcome));
            }
            Err(e) => report(r.line, e.to_string())?,
        }
    }

    let mut by_student: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for a in accepted {
        by_student.entry(a.0).or_default().push(a);
    }
    let mut records = Vec::new();
    for (_, mut rows) in by_student {
        rows.sort_by_key(|r| (r.1, r.2));
        for (pos, (s, _, _, q, concepts, outcome)) in rows.into_iter().enumerate() {
            records.push(InteractionRecord {
                student: s,
                question: q,
                concepts,
                step: pos as u64,
                outcome,
            });
        }
    }
    Ok(ParsedLog {
        records,
        vocab,
        errors,
    })
}

/// Writes records in the log format, with external ids from `vocab`.
pub fn write_log<W: Write>(records: &[InteractionRecord], vocab: &Vocabulary, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["student", "question", "concepts", "step", "outcome"])?;
    for r in records {
        let concepts: Vec<&str> = r.concepts.iter().map(|&c| vocab.concepts.name(c)).collect();
        w.write_record([
            vocab.students.name(r.student),
            vocab.questions.name(r.question),
            &concepts.join("|"),
            &r.step.to_string(),
            if r.outcome { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Groups records by student, preserving order within each student.
pub fn group_by_student(records: &[InteractionRecord]) -> BTreeMap<usize, Vec<&InteractionRecord>> {
    let mut out: BTreeMap<usize, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.student).or_default().push(r);
    }
    out
}

/// Drops every student whose sequence has `min_len` records or fewer.
pub fn filter_short_sequences(records: Vec<InteractionRecord>, min_len: usize) -> Vec<InteractionRecord> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in &records {
        *counts.entry(r.student).or_default() += 1;
    }
    records
        .into_iter()
        .filter(|r| counts[&r.student] > min_len)
        .collect()
}

/// Student-level k-fold partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    /// Test students of each fold; every student is in exactly one.
    pub test_students: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn is_test(&self, fold: usize, student: usize) -> bool {
        self.test_students[fold].binary_search(&student).is_ok()
    }

    /// Splits records into `(train, test)` for one fold.
    pub fn partition(
        &self,
        records: &[InteractionRecord],
        fold: usize,
    ) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
        records
            .iter()
            .cloned()
            .partition(|r| !self.is_test(fold, r.student))
    }

    /// Sidecar CSV: one `fold,student` line per test student.
    pub fn write<W: Write>(&self, vocab: &Vocabulary, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fold", "student"])?;
        for (fold, students) in self.test_students.iter().enumerate() {
            for &s in students {
                w.write_record([fold.to_string().as_str(), vocab.students.name(s)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(vocab: &Vocabulary, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut folds: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let fold: usize = row
                .get(0)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| KtError::Row {
                    line,
                    message: "bad fold number".into(),
                })?;
            let name = row.get(1).unwrap_or_default();
            let s = vocab.students.get(name).ok_or_else(|| KtError::Row {
                line,
                message: format!("unknown student `{name}`"),
            })?;
            folds.entry(fold).or_default().push(s);
        }
        let k = folds.len();
        if folds.keys().copied().ne(0..k) {
            return Err(KtError::InvalidInput("fold numbers are not contiguous".into()));
        }
        let test_students = folds
            .into_values()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        Ok(Self { k, test_students })
    }
}

/// Shuffles the students with `seed` and deals them into `k` folds of
/// near-equal size.
pub fn split_folds(records: &[InteractionRecord], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(KtError::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    let mut students: Vec<usize> = records.iter().map(|r| r.student).collect();
    students.sort_unstable();
    students.dedup();
    if students.len() < k {
        return Err(KtError::InvalidInput(format!(
            "{} students cannot fill {k} folds",
            students.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);
    let n = students.len();
    let mut test_students = Vec::with_capacity(k);
    for fold in 0..k {
        let (lo, hi) = (fold * n / k, (fold + 1) * n / k);
        let mut part = students[lo..hi].to_vec();
        part.sort_unstable();
        test_students.push(part);
    }
    Ok(FoldSplit { k, test_students })
}

/// What one student has done so far on one concept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConceptHistory {
    pub success_count: u32,
    pub fail_count: u32,
    pub last_step: Option<u64>,
    pub last_outcome: Option<bool>,
}

/// Per-concept history of one student; concepts never practiced are absent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StudentHistoryState {
    concepts: BTreeMap<usize, ConceptHistory>,
}

impl StudentHistoryState {
    pub fn concept(&self, concept: usize) -> Option<&ConceptHistory> {
        self.concepts.get(&concept)
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Folds one answered record into the state.
    pub fn observe(&mut self, record: &InteractionRecord) {
        for &c in &record.concepts {
            let h = self.concepts.entry(c).or_default();
            if record.outcome {
                h.success_count += 1;
            } else {
                h.fail_count += 1;
            }
            h.last_step = Some(record.step);
            h.last_outcome = Some(record.outcome);
        }
    }
}

fn check_sequence<R: std::borrow::Borrow<InteractionRecord>>(records: &[R]) -> Result<()> {
    for w in records.windows(2) {
        let (a, b) = (w[0].borrow(), w[1].borrow());
        if a.student != b.student {
            return Err(KtError::InvalidInput(format!(
                "replay mixes students {} and {}",
                a.student, b.student
            )));
        }
        if b.step <= a.step {
            return Err(KtError::InvalidInput(format!(
                "steps not strictly increasing for student {} ({} then {})",
                a.student, a.step, b.step
            )));
        }
    }
    Ok(())
}

/// Yields `(state before record, record)` for one student's sequence.
pub struct Replay<'a, R> {
    records: &'a [R],
    pos: usize,
    state: StudentHistoryState,
}

impl<'a, R: std::borrow::Borrow<InteractionRecord>> Iterator for Replay<'a, R> {
    type Item = (StudentHistoryState, &'a InteractionRecord);

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.get(self.pos)?.borrow();
        let before = self.state.clone();
        self.state.observe(record);
        self.pos += 1;
        Some((before, record))
    }
}

/// Replays one student's records, which must be sorted by step.
pub fn replay_history<R: std::borrow::Borrow<InteractionRecord>>(records: &[R]) -> Result<Replay<'_, R>> {
    check_sequence(records)?;
    Ok(Replay {
        records,
        pos: 0,
        state: StudentHistoryState::default(),
    })
}

/// Like [`replay_history`] but lends the state instead of cloning it.
pub fn replay_with<R, F>(records: &[R], mut f: F) -> Result<()>
where
    R: std::borrow::Borrow<InteractionRecord>,
    F: FnMut(&StudentHistoryState, &InteractionRecord) -> Result<()>,
{
    check_sequence(records)?;
    let mut state = StudentHistoryState::default();
    for r in records {
        let r = r.borrow();
        f(&state, r)?;
        state.observe(r);
    }
    Ok(())
}
