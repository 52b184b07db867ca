//! Simulated students with known response probabilities.
//!
//! Every student has a base ability and a fixed offset per concept. Each
//! practice on a concept adds `mastery_gain` to a learned component that
//! decays as `exp(-forgetting_rate · idle steps)`. A response is correct
//! with probability `sigmoid(mean over the question's concepts of
//! (ability + offset + learned) - difficulty)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{InteractionRecord, Vocabulary};
use crate::error::{KtError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_students: usize,
    pub num_questions: usize,
    pub num_concepts: usize,
    /// Concepts per question are uniform in `1..=max_concepts_per_question`.
    pub max_concepts_per_question: usize,
    pub mastery_gain: f64,
    pub forgetting_rate: f64,
    /// Standard deviation of question difficulty.
    pub difficulty_spread: f64,
    /// Standard deviation of student base ability.
    pub ability_spread: f64,
    /// Standard deviation of per-student concept offsets.
    pub concept_spread: f64,
    /// Sequence lengths are uniform in `min_length..=2 * mean_length - min_length`.
    pub mean_length: usize,
    pub min_length: usize,
    /// Chance that the next question shares a concept with the previous one.
    pub focus: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_students: 2000,
            num_questions: 300,
            num_concepts: 30,
            max_concepts_per_question: 2,
            mastery_gain: 0.5,
            forgetting_rate: 0.02,
            difficulty_spread: 0.8,
            ability_spread: 0.0,
            concept_spread: 0.3,
            mean_length: 40,
            min_length: 10,
            focus: 0.8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KtError::Config(format!("synthetic config: {m}")));
        if self.num_students == 0 || self.num_questions == 0 || self.num_concepts == 0 {
            return bad("counts must be positive");
        }
        if self.max_concepts_per_question == 0 || self.max_concepts_per_question > self.num_concepts {
            return bad("max_concepts_per_question must lie in 1..=num_concepts");
        }
        if self.min_length == 0 || self.min_length > self.mean_length {
            return bad("need 0 < min_length <= mean_length");
        }
        let rates = [
            self.mastery_gain,
            self.forgetting_rate,
            self.difficulty_spread,
            self.ability_spread,
            self.concept_spread,
        ];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return bad("rates and spreads must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.focus) {
            return bad("focus must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A generated log with the probability each outcome was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub records: Vec<InteractionRecord>,
    pub vocab: Vocabulary,
    pub truth: Vec<f64>,
    pub difficulty: Vec<f64>,
}

impl SynthData {
    /// Writes `student,step,p` rows aligned with the records.
    pub fn write_truth<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["student", "step", "p"])?;
        for (r, p) in self.records.iter().zip(&self.truth) {
            w.write_record([self.vocab.students.name(r.student), &r.step.to_string(), &p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("validated spread")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nc = config.num_concepts;

    let mut vocab = Vocabulary::default();
    let concept_names: Vec<String> = (0..nc).map(|k| format!("c{k}")).collect();
    let mut by_concept: Vec<Vec<usize>> = vec![Vec::new(); nc];
    let mut difficulty = Vec::with_capacity(config.num_questions);
    let difficulty_dist = normal(config.difficulty_spread);
    for q in 0..config.num_questions {
        let k = rng.gen_range(1..=config.max_concepts_per_question);
        let mut concepts: Vec<usize> = (0..nc).collect::<Vec<_>>().choose_multiple(&mut rng, k).copied().collect();
        concepts.sort_unstable();
        let names: Vec<&str> = concepts.iter().map(|&c| concept_names[c].as_str()).collect();
        let index = vocab.add_question(&format!("q{q}"), &names)?;
        for &c in vocab.concepts_of(index) {
            by_concept[c].push(index);
        }
        difficulty.push(difficulty_dist.sample(&mut rng));
    }

    let ability_dist = normal(config.ability_spread);
    let offset_dist = normal(config.concept_spread);
    let mut records = Vec::new();
    let mut truth = Vec::new();
    let max_len = 2 * config.mean_length - config.min_length;
    for s in 0..config.num_students {
        let student = vocab.students.intern(&format!("s{s}"));
        let ability = ability_dist.sample(&mut rng);
        let offsets: Vec<f64> = (0..nc).map(|_| offset_dist.sample(&mut rng)).collect();
        let mut learned = vec![0.0; nc];
        let mut last = vec![0u64; nc];
        let len = rng.gen_range(config.min_length..=max_len);
        let mut prev: Option<usize> = None;
        for step in 0..len as u64 {
            let q = match prev {
                Some(p) if rng.gen_bool(config.focus) => {
                    let c = *vocab.concepts_of(p).choose(&mut rng).expect("nonempty");
                    *by_concept[c].choose(&mut rng).expect("concept has a question")
                }
                _ => rng.gen_range(0..config.num_questions),
            };
            let concepts = vocab.concepts_of(q).to_vec();
            let mut mastery = 0.0;
            for &c in &concepts {
                learned[c] *= (-config.forgetting_rate * (step - last[c]) as f64).exp();
                last[c] = step;
                mastery += ability + offsets[c] + learned[c];
            }
            mastery /= concepts.len() as f64;
            let p = 1.0 / (1.0 + (difficulty[q] - mastery).exp());
            let outcome = rng.gen_bool(p);
            for &c in &concepts {
                learned[c] += config.mastery_gain;
            }
            records.push(InteractionRecord {
                student,
                question: q,
                concepts,
                step,
                outcome,
            });
            truth.push(p);
            prev = Some(q);
        }
    }
    Ok(SynthData {
        records,
        vocab,
        truth,
        difficulty,
    })
}
