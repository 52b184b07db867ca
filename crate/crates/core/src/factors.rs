//! Sparse factor encodings of a prediction instance: student, question,
//! concept, success counts, fail counts and most recent practice.

use std::io::{Read, Write};

use crate::dataset::{replay_with, InteractionRecord, StudentHistoryState};
use crate::error::{KtError, Result};

/// Index/value pairs over a logical dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseFactorVector {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseFactorVector {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }
}

/// Slots of the recent factor with their practice intervals. Slot `k` is a
/// last success on concept `k`, slot `N_c + k` a last failure and
/// `2 N_c + k` no practice yet (always with interval 0).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecentEncoding {
    pub num_concepts: usize,
    pub entries: Vec<(usize, u64)>,
}

impl RecentEncoding {
    pub fn dim(&self) -> usize {
        3 * self.num_concepts
    }

    /// Concept that a slot belongs to.
    pub fn concept_of(&self, slot: usize) -> usize {
        slot % self.num_concepts
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedInstance {
    pub student: SparseFactorVector,
    pub question: SparseFactorVector,
    pub concepts: SparseFactorVector,
    pub success: SparseFactorVector,
    pub fail: SparseFactorVector,
    pub recent: RecentEncoding,
    pub label: bool,
}

impl EncodedInstance {
    pub fn student_index(&self) -> usize {
        self.student.entries[0].0
    }

    pub fn question_index(&self) -> usize {
        self.question.entries[0].0
    }
}

pub fn encode_one_hot(index: usize, dim: usize) -> Result<SparseFactorVector> {
    if index >= dim {
        return Err(KtError::InvalidInput(format!("index {index} out of range for {dim}")));
    }
    Ok(SparseFactorVector {
        dim,
        entries: vec![(index, 1.0)],
    })
}

pub fn encode_concepts(concepts: &[usize], num_concepts: usize) -> Result<SparseFactorVector> {
    if concepts.is_empty() {
        return Err(KtError::InvalidInput("empty concept set".into()));
    }
    if let Some(&c) = concepts.iter().find(|&&c| c >= num_concepts) {
        return Err(KtError::InvalidInput(format!("concept {c} out of range")));
    }
    Ok(SparseFactorVector {
        dim: num_concepts,
        entries: concepts.iter().map(|&c| (c, 1.0)).collect(),
    })
}

/// Raw success and fail counts on the target concepts. Zero counts are not
/// stored.
pub fn encode_success_fail(
    state: &StudentHistoryState,
    concepts: &[usize],
    num_concepts: usize,
) -> (SparseFactorVector, SparseFactorVector) {
    let mut s = SparseFactorVector {
        dim: num_concepts,
        entries: Vec::new(),
    };
    let mut f = s.clone();
    for &c in concepts {
        if let Some(h) = state.concept(c) {
            if h.success_count > 0 {
                s.entries.push((c, h.success_count as f64));
            }
            if h.fail_count > 0 {
                f.entries.push((c, h.fail_count as f64));
            }
        }
    }
    (s, f)
}

pub fn encode_recent(
    state: &StudentHistoryState,
    concepts: &[usize],
    num_concepts: usize,
    step: u64,
) -> Result<RecentEncoding> {
    let mut entries = Vec::with_capacity(concepts.len());
    for &c in concepts {
        let last = state.concept(c).and_then(|h| Some((h.last_step?, h.last_outcome?)));
        entries.push(match last {
            None => (2 * num_concepts + c, 0),
            Some((last_step, _)) if last_step >= step => {
                return Err(KtError::Causality(format!(
                    "concept {c} last practiced at step {last_step}, predicting step {step}"
                )))
            }
            Some((last_step, true)) => (c, step - last_step),
            Some((last_step, false)) => (num_concepts + c, step - last_step),
        });
    }
    Ok(RecentEncoding {
        num_concepts,
        entries,
    })
}

/// `exp(-theta · delta_t)`.
pub fn forgetting(theta: f64, delta_t: f64) -> Result<f64> {
    if !(theta >= 0.0) || !(delta_t >= 0.0) {
        return Err(KtError::InvalidInput(format!(
            "forgetting needs nonnegative inputs, got theta {theta}, delta_t {delta_t}"
        )));
    }
    Ok((-theta * delta_t).exp())
}

/// Vocabulary sizes plus the students and questions that count as known.
/// Unknown ids are encoded as the extra index `N_u` (students) or `N_q`
/// (questions), so one-hot dimensions are `N_u + 1` and `N_q + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub num_students: usize,
    pub num_questions: usize,
    pub num_concepts: usize,
    pub known_students: Option<Vec<bool>>,
    pub known_questions: Option<Vec<bool>>,
}

impl Encoder {
    pub fn new(num_students: usize, num_questions: usize, num_concepts: usize) -> Self {
        Self {
            num_students,
            num_questions,
            num_concepts,
            known_students: None,
            known_questions: None,
        }
    }

    /// Only the students and questions seen in `train` are known.
    pub fn with_known_from(mut self, train: &[InteractionRecord]) -> Self {
        let mut students = vec![false; self.num_students];
        let mut questions = vec![false; self.num_questions];
        for r in train {
            students[r.student] = true;
            questions[r.question] = true;
        }
        self.known_students = Some(students);
        self.known_questions = Some(questions);
        self
    }

    pub fn unknown_student(&self) -> usize {
        self.num_students
    }

    pub fn unknown_question(&self) -> usize {
        self.num_questions
    }

    fn map(known: &Option<Vec<bool>>, index: usize, unknown: usize) -> usize {
        match known {
            Some(k) if !k.get(index).copied().unwrap_or(false) => unknown,
            _ => index,
        }
    }

    pub fn encode(&self, state: &StudentHistoryState, record: &InteractionRecord) -> Result<EncodedInstance> {
        if record.student >= self.num_students || record.question >= self.num_questions {
            return Err(KtError::InvalidInput(format!(
                "record ({}, {}) outside the vocabulary",
                record.student, record.question
            )));
        }
        let student = Self::map(&self.known_students, record.student, self.unknown_student());
        let question = Self::map(&self.known_questions, record.question, self.unknown_question());
        let (success, fail) = encode_success_fail(state, &record.concepts, self.num_concepts);
        Ok(EncodedInstance {
            student: encode_one_hot(student, self.num_students + 1)?,
            question: encode_one_hot(question, self.num_questions + 1)?,
            concepts: encode_concepts(&record.concepts, self.num_concepts)?,
            success,
            fail,
            recent: encode_recent(state, &record.concepts, self.num_concepts, record.step)?,
            label: record.outcome,
        })
    }

    /// Encodes every record of a log grouped by student, in order.
    pub fn encode_log(&self, records: &[InteractionRecord]) -> Result<Vec<EncodedInstance>> {
        let mut out = Vec::with_capacity(records.len());
        let mut start = 0;
        while start < records.len() {
            let student = records[start].student;
            let end = start + records[start..].iter().take_while(|r| r.student == student).count();
            replay_with(&records[start..end], |state, r| {
                out.push(self.encode(state, r)?);
                Ok(())
            })?;
            start = end;
        }
        Ok(out)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"KTEI";

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_list<W: Write>(w: &mut W, entries: impl ExactSizeIterator<Item = (usize, f64)>) -> Result<()> {
    put_u64(w, entries.len() as u64)?;
    for (i, v) in entries {
        put_u64(w, i as u64)?;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_list<R: Read>(r: &mut R) -> Result<Vec<(usize, f64)>> {
    let n = get_u64(r)?;
    if n > 1 << 20 {
        return Err(KtError::InvalidInput(format!("implausible list length {n} in cache")));
    }
    (0..n)
        .map(|_| Ok((get_u64(r)? as usize, f64::from_bits(get_u64(r)?))))
        .collect()
}

/// Writes instances as: magic `KTEI`, then `N_u+1`, `N_q+1`, `N_c` and the
/// instance count as u64; per instance six lists (student, question,
/// concepts, success, fail, recent), each a u64 length followed by
/// `(u64 index, f64 value)` pairs, then a label byte. Recent values are the
/// intervals. All integers little-endian.
pub fn write_cache<W: Write>(instances: &[EncodedInstance], mut w: W) -> Result<()> {
    let Some(first) = instances.first() else {
        w.write_all(CACHE_MAGIC)?;
        for _ in 0..4 {
            put_u64(&mut w, 0)?;
        }
        return Ok(());
    };
    w.write_all(CACHE_MAGIC)?;
    put_u64(&mut w, first.student.dim as u64)?;
    put_u64(&mut w, first.question.dim as u64)?;
    put_u64(&mut w, first.concepts.dim as u64)?;
    put_u64(&mut w, instances.len() as u64)?;
    for inst in instances {
        for v in [&inst.student, &inst.question, &inst.concepts, &inst.success, &inst.fail] {
            put_list(&mut w, v.entries.iter().copied())?;
        }
        put_list(&mut w, inst.recent.entries.iter().map(|&(s, dt)| (s, dt as f64)))?;
        w.write_all(&[u8::from(inst.label)])?;
    }
    Ok(())
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Vec<EncodedInstance>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(KtError::InvalidInput("not an encoded-instance cache".into()));
    }
    let dims = [get_u64(&mut r)?, get_u64(&mut r)?, get_u64(&mut r)?].map(|d| d as usize);
    let n = get_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let mut lists = Vec::with_capacity(6);
        for _ in 0..6 {
            lists.push(get_list(&mut r)?);
        }
        let mut label = [0u8; 1];
        r.read_exact(&mut label)?;
        let mut it = lists.into_iter();
        let mut next = |dim| SparseFactorVector {
            dim,
            entries: it.next().unwrap_or_default(),
        };
        let student = next(dims[0]);
        let question = next(dims[1]);
        let concepts = next(dims[2]);
        let success = next(dims[2]);
        let fail = next(dims[2]);
        let recent = next(3 * dims[2]);
        let inst = EncodedInstance {
            student,
            question,
            concepts,
            success,
            fail,
            recent: RecentEncoding {
                num_concepts: dims[2],
                entries: recent.entries.iter().map(|&(s, dt)| (s, dt as u64)).collect(),
            },
            label: label[0] == 1,
        };
        validate(&inst)?;
        out.push(inst);
    }
    Ok(out)
}

fn validate(inst: &EncodedInstance) -> Result<()> {
    let vectors = [&inst.student, &inst.question, &inst.concepts, &inst.success, &inst.fail];
    let ok = vectors
        .iter()
        .all(|v| v.entries.iter().all(|&(i, x)| i < v.dim && x.is_finite()))
        && inst.student.entries.len() == 1
        && inst.question.entries.len() == 1
        && inst.recent.entries.iter().all(|&(s, _)| s < inst.recent.dim());
    if ok {
        Ok(())
    } else {
        Err(KtError::InvalidInput("corrupt encoded instance in cache".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::replay_history;

    fn rec(question: usize, concepts: &[usize], step: u64, outcome: bool) -> InteractionRecord {
        InteractionRecord {
            student: 0,
            question,
            concepts: concepts.to_vec(),
            step,
            outcome,
        }
    }

    /// q1 on {c1,c2} wrong, q2 on {c1,c2} right, then q3 on {c2,c3}.
    fn practice_example() -> Vec<InteractionRecord> {
        vec![rec(0, &[0, 1], 0, false), rec(1, &[0, 1], 1, true), rec(2, &[1, 2], 2, false)]
    }

    #[test]
    fn one_hot_and_concepts() {
        assert_eq!(encode_one_hot(0, 4).unwrap().to_dense(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode_one_hot(3, 4).unwrap().entries, [(3, 1.0)]);
        assert!(encode_one_hot(4, 4).is_err());
        assert_eq!(encode_concepts(&[0, 1], 3).unwrap().to_dense(), [1.0, 1.0, 0.0]);
        assert_eq!(encode_concepts(&[0, 1, 2, 3, 4, 5], 6).unwrap().entries.len(), 6);
        assert!(encode_concepts(&[], 3).is_err());
    }

    #[test]
    fn success_fail_rows_of_practice_example() {
        let log = practice_example();
        let expected = [
            ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            ([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
            ([0.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
        ];
        for ((state, r), (s_exp, f_exp)) in replay_history(&log).unwrap().zip(expected) {
            let (s, f) = encode_success_fail(&state, &r.concepts, 3);
            assert_eq!(s.to_dense(), s_exp);
            assert_eq!(f.to_dense(), f_exp);
        }
    }

    #[test]
    fn recent_slot_rules() {
        let nc = 4;
        let mut state = StudentHistoryState::default();
        // Never practiced.
        let r = encode_recent(&state, &[1], nc, 0).unwrap();
        assert_eq!(r.entries, [(2 * nc + 1, 0)]);

        // Success on c1 at T-1.
        state.observe(&rec(0, &[1], 4, true));
        assert_eq!(encode_recent(&state, &[1], nc, 5).unwrap().entries, [(1, 1)]);

        // c1 last failed two steps ago, c2 never: (N_c+1, 2) and (2N_c+2, 0).
        state.observe(&rec(0, &[1], 5, false));
        let r = encode_recent(&state, &[1, 2], nc, 7).unwrap();
        assert_eq!(r.entries, [(nc + 1, 2), (2 * nc + 2, 0)]);
        assert_eq!(r.concept_of(nc + 1), 1);

        assert!(matches!(
            encode_recent(&state, &[1], nc, 5),
            Err(KtError::Causality(_))
        ));
    }

    #[test]
    fn forgetting_values() {
        assert_eq!(forgetting(0.5, 2.0).unwrap(), (-1.0f64).exp());
        assert!((forgetting(0.5, 2.0).unwrap() - 0.36788).abs() < 1e-5);
        assert_eq!(forgetting(3.0, 0.0).unwrap(), 1.0);
        assert_eq!(forgetting(0.0, 9.0).unwrap(), 1.0);
        assert!(forgetting(-0.1, 1.0).is_err());
        assert!(forgetting(0.1, -1.0).is_err());
    }

    #[test]
    fn encoder_maps_unknown_ids() {
        let train = vec![rec(0, &[0], 0, true)];
        let enc = Encoder::new(2, 2, 1).with_known_from(&train);
        let state = StudentHistoryState::default();
        let mut r = rec(1, &[0], 0, true);
        r.student = 1;
        let inst = enc.encode(&state, &r).unwrap();
        assert_eq!(inst.student_index(), 2);
        assert_eq!(inst.question_index(), 2);
        assert_eq!(inst.student.dim, 3);
        let inst = enc.encode(&state, &train[0]).unwrap();
        assert_eq!((inst.student_index(), inst.question_index()), (0, 0));
    }

    #[test]
    fn cache_round_trip() {
        let mut log = practice_example();
        log.push(InteractionRecord {
            student: 1,
            ..rec(1, &[2], 0, true)
        });
        let enc = Encoder::new(2, 3, 3);
        let instances = enc.encode_log(&log).unwrap();
        assert_eq!(instances.len(), 4);
        let mut buf = Vec::new();
        write_cache(&instances, &mut buf).unwrap();
        assert_eq!(read_cache(buf.as_slice()).unwrap(), instances);

        buf.truncate(buf.len() - 3);
        assert!(read_cache(buf.as_slice()).is_err());
    }
}
