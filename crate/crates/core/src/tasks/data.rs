//! Synthetic keyed sequence-classification tasks.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

/// Reserved id never emitted by a generator; prepending it carries no label
/// information.
pub const NEUTRAL_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label 1 iff the key occurs at least `threshold` times.
    KeyedCount,
    /// Label 1 iff the key occurs at all.
    KeyedPresence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub key: usize,
    pub threshold: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    /// First id of the content pool; ids below it are reserved (neutral and
    /// task-indicator tokens).
    pub content_start: usize,
    /// Indicator token placed in front of every sequence, if any.
    pub task_token: Option<usize>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn presence(key: usize, task_token: Option<usize>, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::KeyedPresence,
            key,
            threshold: 1,
            min_len: 8,
            max_len: 16,
            vocab: 64,
            content_start: 8,
            task_token,
            seed,
        }
    }

    pub fn count(key: usize, threshold: usize, task_token: Option<usize>, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::KeyedCount,
            threshold,
            ..Self::presence(key, task_token, seed)
        }
    }

    /// Longest sequence the task emits, indicator token included.
    pub fn max_sequence_len(&self) -> usize {
        self.max_len + usize::from(self.task_token.is_some())
    }

    pub fn validate(&self, max_content_len: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Argument(msg));
        if self.content_start <= NEUTRAL_TOKEN || self.content_start + 2 > self.vocab {
            return fail(format!(
                "task.content_start {} must leave a reserved neutral id and >= 2 content ids below vocab {}",
                self.content_start, self.vocab
            ));
        }
        if self.key < self.content_start || self.key >= self.vocab {
            return fail(format!(
                "task.key {} must lie in the content pool [{}, {})",
                self.key, self.content_start, self.vocab
            ));
        }
        if let Some(t) = self.task_token {
            if t == NEUTRAL_TOKEN || t >= self.content_start {
                return fail(format!("task.task_token {t} must be a reserved id in [1, {})", self.content_start));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("task.min_len {} / max_len {} invalid", self.min_len, self.max_len));
        }
        if self.max_sequence_len() > max_content_len {
            return fail(format!(
                "task sequences of up to {} tokens exceed backbone max_content_len {max_content_len}",
                self.max_sequence_len()
            ));
        }
        if self.threshold == 0 || self.threshold > self.min_len {
            return fail(format!("task.threshold {} must be in [1, min_len]", self.threshold));
        }
        Ok(())
    }

    /// Label of a content sequence (indicator token excluded).
    pub fn label_of(&self, content: &[usize]) -> usize {
        let count = content.iter().filter(|&&t| t == self.key).count();
        let need = match self.kind {
            TaskKind::KeyedPresence => 1,
            TaskKind::KeyedCount => self.threshold,
        };
        usize::from(count >= need)
    }

    fn sample_content(&self, rng: &mut LabRng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let need = match self.kind {
            TaskKind::KeyedPresence => 1.0,
            TaskKind::KeyedCount => self.threshold as f64,
        };
        // puts the label boundary near the median of the key count
        let p = match self.kind {
            TaskKind::KeyedPresence => 1.0 - 0.5f64.powf(1.0 / len as f64),
            TaskKind::KeyedCount => ((need - 0.3) / len as f64).clamp(0.01, 0.99),
        };
        (0..len)
            .map(|_| {
                if rng.gen_bool(p) {
                    self.key
                } else {
                    loop {
                        let t = rng.gen_range(self.content_start..self.vocab);
                        if t != self.key {
                            break t;
                        }
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Examples in generation order; the splits are consecutive index ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        let (a, b) = match split {
            Split::Train => (0, self.train),
            Split::Valid => (self.train, self.train + self.valid),
            Split::Test => (self.train + self.valid, self.examples.len()),
        };
        &self.examples[a..b]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Fraction of label-1 examples.
pub fn positive_rate(examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples.iter().filter(|e| e.label == 1).count() as f64 / examples.len() as f64
}

/// Generates `n >= 10` examples. Labels alternate within each split (then the
/// split is shuffled), and each example is rejection-sampled until its label
/// matches, so every split is balanced to within one example.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Argument(format!("dataset size must be >= 10, got {n}")));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len || spec.key >= spec.vocab || spec.content_start >= spec.vocab {
        return Err(Error::Argument("invalid task spec".into()));
    }
    let held_out = (((n / 10) / 2) * 2).max(2);
    let train = n - 2 * held_out;
    let mut rng = rng::derived(spec.seed, 4);
    let mut attempts = 0usize;
    let budget = 100 * n;
    let mut examples = Vec::with_capacity(n);
    for size in [train, held_out, held_out] {
        let mut part = Vec::with_capacity(size);
        for i in 0..size {
            let want = usize::from(i % 2 == 0);
            let content = loop {
                attempts += 1;
                if attempts > budget {
                    return Err(Error::Generation(format!(
                        "could not balance labels within {budget} attempts"
                    )));
                }
                let c = spec.sample_content(&mut rng);
                if spec.label_of(&c) == want {
                    break c;
                }
            };
            let ids = spec.task_token.into_iter().chain(content).collect();
            part.push(Example { ids, label: want });
        }
        part.shuffle(&mut rng);
        examples.extend(part);
    }
    Ok(Dataset {
        examples,
        train,
        valid: held_out,
        test: held_out,
    })
}

pub fn write_jsonl(examples: &[Example], mut out: impl Write) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)?;
        if ex.label > 1 {
            return Err(Error::Argument(format!("label {} is not 0 or 1", ex.label)));
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presence_label_definition() {
        let spec = TaskSpec::presence(12, None, 0);
        assert_eq!(spec.label_of(&[9, 12, 30]), 1);
        assert_eq!(spec.label_of(&[9, 13, 30]), 0);
        let count = TaskSpec::count(12, 2, None, 0);
        assert_eq!(count.label_of(&[12, 9, 30]), 0);
        assert_eq!(count.label_of(&[12, 9, 12]), 1);
    }

    #[test]
    fn generated_labels_match_definition() {
        let spec = TaskSpec::count(20, 2, Some(3), 5);
        let ds = generate(&spec, 200).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.ids[0], 3);
            assert_eq!(spec.label_of(&ex.ids[1..]), ex.label);
            assert!(!ex.ids[1..].contains(&NEUTRAL_TOKEN));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = TaskSpec::presence(10, None, 42);
        assert_eq!(generate(&spec, 50).unwrap(), generate(&spec, 50).unwrap());
        let other = TaskSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate(&spec, 50).unwrap(), generate(&other, 50).unwrap());
    }

    #[test]
    fn splits_are_balanced() {
        let ds = generate(&TaskSpec::presence(10, None, 1), 1000).unwrap();
        assert_eq!((ds.train, ds.valid, ds.test), (800, 100, 100));
        for split in [Split::Train, Split::Valid, Split::Test] {
            let rate = positive_rate(ds.split(split));
            assert!((0.45..=0.55).contains(&rate), "{split:?}: {rate}");
        }
    }

    #[test]
    fn small_and_impossible_requests() {
        assert!(generate(&TaskSpec::presence(10, None, 1), 9).is_err());
        let ds = generate(&TaskSpec::presence(10, None, 1), 10).unwrap();
        assert_eq!(ds.len(), 10);
        // a threshold above the sequence length can never yield label 1
        let spec = TaskSpec {
            threshold: 20,
            ..TaskSpec::count(10, 2, None, 1)
        };
        assert!(matches!(generate(&spec, 10), Err(Error::Generation(_))));
    }

    #[test]
    fn validation_against_backbone() {
        assert!(TaskSpec::presence(10, Some(1), 0).validate(32).is_ok());
        assert!(TaskSpec::presence(10, Some(1), 0).validate(16).is_err());
        assert!(TaskSpec::presence(3, None, 0).validate(32).is_err());
        assert!(TaskSpec::presence(10, Some(0), 0).validate(32).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate(&TaskSpec::presence(10, None, 1), 20).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds.examples, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.starts_with("{\"ids\":["));
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), ds.examples);
    }
}
