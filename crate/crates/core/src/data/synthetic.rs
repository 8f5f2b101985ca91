//! Seeded synthetic corpora and tasks with known ground truth.
//!
//! Residues are drawn from the 20 standard amino acids at natural background
//! frequencies. Each generator is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::STANDARD_RESIDUES;

use super::fasta::FastaRecord;
use super::task::{Dataset, Label, Record, Splits, TaskKind, TaskSpec};

pub const MOTIF: &str = "WWW";

/// Percent composition of reviewed protein sequences, in `STANDARD_RESIDUES` order.
pub const BACKGROUND_PERCENT: [f64; 20] = [
    8.25, 1.37, 5.45, 6.75, 3.86, 7.07, 2.27, 5.96, 5.84, 9.66, //
    2.42, 4.06, 4.70, 3.93, 5.53, 6.56, 5.34, 6.87, 1.08, 2.92,
];

fn random_residue(rng: &mut Rng) -> u8 {
    let total: f64 = BACKGROUND_PERCENT.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, &p) in BACKGROUND_PERCENT.iter().enumerate() {
        if u < p {
            return STANDARD_RESIDUES[i];
        }
        u -= p;
    }
    STANDARD_RESIDUES[STANDARD_RESIDUES.len() - 1]
}

fn random_sequence(rng: &mut Rng, len: usize) -> Vec<u8> {
    (0..len).map(|_| random_residue(rng)).collect()
}

fn random_len(rng: &mut Rng, min_len: usize, max_len: usize) -> usize {
    min_len + rng.below(max_len - min_len + 1)
}

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::invalid(format!(
            "bad length range {min_len}..={max_len}"
        )));
    }
    Ok(())
}

/// Sequences from `families` random ancestors; each member substitutes every
/// position with probability `mutation_rate`. Members are truncated to a
/// random length in `min_len..=max_len`, keeping a shared start.
pub fn family_corpus(
    n: usize,
    families: usize,
    min_len: usize,
    max_len: usize,
    mutation_rate: f64,
    seed: u64,
) -> Result<Vec<FastaRecord>> {
    check_lengths(min_len, max_len)?;
    if families == 0 || !(0.0..=1.0).contains(&mutation_rate) {
        return Err(Error::invalid("need at least one family and a mutation rate in [0, 1]"));
    }
    let mut rng = Rng::new(seed);
    let ancestors: Vec<Vec<u8>> = (0..families).map(|_| random_sequence(&mut rng, max_len)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let fam = i % families;
        let len = random_len(&mut rng, min_len, max_len);
        let seq: Vec<u8> = ancestors[fam][..len]
            .iter()
            .map(|&c| {
                if rng.bernoulli(mutation_rate) {
                    random_residue(&mut rng)
                } else {
                    c
                }
            })
            .collect();
        out.push(FastaRecord::new(
            format!("syn_{i} family={fam}"),
            String::from_utf8(seq).expect("ascii"),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// `n` records split 80/10/10 (floor for valid and test).
    pub fn with_total(kind: TaskKind, n: usize, seed: u64) -> Self {
        let n_valid = n / 10;
        let n_test = n / 10;
        Self {
            kind,
            n_train: n - n_valid - n_test,
            n_valid,
            n_test,
            min_len: 20,
            max_len: 40,
            seed,
        }
    }

    pub fn spec(&self) -> TaskSpec {
        match self.kind {
            TaskKind::SequenceClassification => {
                TaskSpec::new("synthetic_motif", self.kind, Some(2)).expect("valid")
            }
            TaskKind::TokenClassification => {
                TaskSpec::new("synthetic_residue_window", self.kind, Some(2)).expect("valid")
            }
            TaskKind::SequenceRegression => {
                TaskSpec::new("synthetic_composition", self.kind, None).expect("valid")
            }
        }
    }

    /// Records are generated i.i.d. and assigned train, valid, test in order.
    pub fn generate(&self) -> Result<Dataset> {
        check_lengths(self.min_len, self.max_len)?;
        let n = self.n_train + self.n_valid + self.n_test;
        if n == 0 {
            return Err(Error::invalid("synthetic task with no records"));
        }
        let mut rng = Rng::new(self.seed);
        let records = (0..n)
            .map(|i| match self.kind {
                TaskKind::SequenceClassification => motif_record(&mut rng, i % 2 == 1, self.min_len, self.max_len),
                TaskKind::TokenClassification => window_record(&mut rng, self.min_len, self.max_len),
                TaskKind::SequenceRegression => composition_record(&mut rng, self.min_len, self.max_len),
            })
            .collect::<Result<Vec<_>>>()?;
        let a = self.n_train;
        let b = a + self.n_valid;
        let splits = Splits {
            train: (0..a).collect(),
            valid: (a..b).collect(),
            test: (b..n).collect(),
        };
        Dataset::with_splits(self.spec(), records, splits)
    }
}

/// Class 1 iff the sequence contains `WWW`.
fn motif_record(rng: &mut Rng, positive: bool, min_len: usize, max_len: usize) -> Result<Record> {
    if min_len < MOTIF.len() {
        return Err(Error::invalid("motif sequences need at least 3 residues"));
    }
    loop {
        let len = random_len(rng, min_len, max_len);
        let mut seq = random_sequence(rng, len);
        if positive {
            let at = rng.below(len - MOTIF.len() + 1);
            seq[at..at + MOTIF.len()].copy_from_slice(MOTIF.as_bytes());
        }
        let s = String::from_utf8(seq).expect("ascii");
        // reject accidental motifs in negatives
        if s.contains(MOTIF) == positive {
            return Ok(Record {
                sequence: s,
                label: Label::Class(usize::from(positive)),
            });
        }
    }
}

/// Position i is labelled 1 iff K or R occurs at i-1, i or i+1.
pub fn window_labels(sequence: &[u8]) -> Vec<u8> {
    let basic = |c: u8| c == b'K' || c == b'R';
    (0..sequence.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(sequence.len());
            u8::from(sequence[lo..hi].iter().any(|&c| basic(c)))
        })
        .collect()
}

fn window_record(rng: &mut Rng, min_len: usize, max_len: usize) -> Result<Record> {
    let len = random_len(rng, min_len, max_len);
    let seq = random_sequence(rng, len);
    let labels = window_labels(&seq);
    Ok(Record {
        sequence: String::from_utf8(seq).expect("ascii"),
        label: Label::Tokens(labels),
    })
}

/// Label is the fraction of `A`, with the per-sequence `A` rate drawn from U(0, 0.5).
fn composition_record(rng: &mut Rng, min_len: usize, max_len: usize) -> Result<Record> {
    let len = random_len(rng, min_len, max_len);
    let p_a = 0.5 * rng.uniform();
    let seq: Vec<u8> = (0..len)
        .map(|_| {
            if rng.bernoulli(p_a) {
                return b'A';
            }
            loop {
                let c = random_residue(rng);
                if c != b'A' {
                    return c;
                }
            }
        })
        .collect();
    let frac = seq.iter().filter(|&&c| c == b'A').count() as f64 / len as f64;
    Ok(Record {
        sequence: String::from_utf8(seq).expect("ascii"),
        label: Label::Value(frac),
    })
}
