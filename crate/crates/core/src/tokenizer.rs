//! Protein vocabulary, sequence encoding and masked-LM corruption.
//!
//! The vocabulary has 30 entries: five specials followed by 25 residue
//! letters (the 20 standard amino acids, the ambiguity code `X` and the rare
//! letters `U B Z O`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const VOCAB_SIZE: usize = 30;
pub const FIRST_RESIDUE: usize = 5;
pub const IGNORE_INDEX: i64 = -100;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const RESIDUES: &[u8; 25] = b"ACDEFGHIKLMNPQRSTVWYXUBZO";
pub const STANDARD_RESIDUES: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// The fixed protein vocabulary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn token(&self, id: usize) -> Option<String> {
        match id {
            0..=4 => Some(SPECIALS[id].to_string()),
            5..=29 => Some((RESIDUES[id - FIRST_RESIDUE] as char).to_string()),
            _ => None,
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        if let Some(i) = SPECIALS.iter().position(|s| *s == token) {
            return Some(i);
        }
        match token.as_bytes() {
            [b] => self.residue_id(*b),
            _ => None,
        }
    }

    /// Id of an uppercase residue letter.
    pub fn residue_id(&self, letter: u8) -> Option<usize> {
        RESIDUES
            .iter()
            .position(|&r| r == letter)
            .map(|p| p + FIRST_RESIDUE)
    }

    pub fn is_residue(&self, id: usize) -> bool {
        (FIRST_RESIDUE..VOCAB_SIZE).contains(&id)
    }

    /// Id for any input character: uppercased, unknown letters map to `X`.
    pub fn normalize(&self, c: u8) -> usize {
        self.residue_id(c.to_ascii_uppercase())
            .unwrap_or(FIRST_RESIDUE + 20)
    }

    /// The table as text, one `id<TAB>token` line per entry. This is the
    /// form stored inside checkpoints.
    pub fn to_text(&self) -> String {
        (0..VOCAB_SIZE)
            .map(|i| format!("{i}\t{}\n", self.token(i).expect("in range")))
            .collect()
    }

    /// Check that a stored table matches this vocabulary exactly.
    pub fn verify_text(&self, text: &str) -> Result<()> {
        if text != self.to_text() {
            return Err(Error::invalid("vocabulary table does not match the protein vocabulary"));
        }
        Ok(())
    }
}

/// One encoded sequence: `[CLS] residues [SEP] [PAD]...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of residue positions (excludes the two specials).
    pub fn residue_count(&self) -> usize {
        self.true_length - 2
    }

    /// Same tokens with the padding changed to `len` (must fit the sequence).
    pub fn repadded(&self, len: usize) -> Result<TokenSequence> {
        if len < self.true_length {
            return Err(Error::shape(format!(
                "cannot pad sequence of {} tokens to {len}",
                self.true_length
            )));
        }
        let mut ids = self.ids[..self.true_length].to_vec();
        ids.resize(len, PAD);
        let mut attention_mask = vec![1u8; self.true_length];
        attention_mask.resize(len, 0);
        Ok(TokenSequence {
            ids,
            attention_mask,
            true_length: self.true_length,
        })
    }
}

/// Encode a residue string, truncating to `max_len - 2` residues.
pub fn encode(sequence: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::invalid(format!("max_len must be at least 3, got {max_len}")));
    }
    if sequence.is_empty() {
        return Err(Error::invalid("cannot encode an empty sequence"));
    }
    let vocab = Vocabulary;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        sequence
            .bytes()
            .take(max_len - 2)
            .map(|c| vocab.normalize(c)),
    );
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; true_length];
    attention_mask.resize(max_len, 0);
    Ok(TokenSequence {
        ids,
        attention_mask,
        true_length,
    })
}

/// Residue letters of `ids`, skipping specials and padding.
pub fn decode(ids: &[usize]) -> Result<String> {
    let vocab = Vocabulary;
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id >= VOCAB_SIZE {
            return Err(Error::invalid(format!("token id {id} outside vocabulary")));
        }
        if vocab.is_residue(id) {
            out.push(RESIDUES[id - FIRST_RESIDUE] as char);
        }
    }
    Ok(out)
}

/// BERT-style corruption rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingPolicy {
    pub select_rate: f64,
    pub mask_rate: f64,
    pub random_rate: f64,
    pub keep_rate: f64,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_rate: 0.8,
            random_rate: 0.1,
            keep_rate: 0.1,
            seed: 0,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let total = self.mask_rate + self.random_rate + self.keep_rate;
        let rates = [self.mask_rate, self.random_rate, self.keep_rate];
        if (total - 1.0).abs() > 1e-9 || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config(format!(
                "mask/random/keep rates must be in [0, 1] and sum to 1, got {total}"
            )));
        }
        if !(0.0..1.0).contains(&self.select_rate) {
            return Err(Error::config(format!(
                "select_rate must be in [0, 1), got {}",
                self.select_rate
            )));
        }
        Ok(())
    }
}

/// Corrupted ids plus labels (`IGNORE_INDEX` where nothing was selected).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTokens {
    pub ids: Vec<usize>,
    pub labels: Vec<i64>,
}

impl MaskedTokens {
    pub fn selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Corrupt with the policy's own seed.
pub fn apply_mlm_mask(tokens: &TokenSequence, policy: &MaskingPolicy) -> MaskedTokens {
    apply_mlm_mask_with(tokens, policy, &mut Rng::new(policy.seed))
}

/// Corrupt using an explicit generator. Only residue positions are
/// selectable; each is selected with `select_rate`, then replaced by
/// `[MASK]`, a uniformly random residue, or left unchanged.
pub fn apply_mlm_mask_with(tokens: &TokenSequence, policy: &MaskingPolicy, rng: &mut Rng) -> MaskedTokens {
    let vocab = Vocabulary;
    let mut ids = tokens.ids.clone();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for (i, id) in ids.iter_mut().enumerate() {
        if !vocab.is_residue(*id) || tokens.attention_mask[i] == 0 {
            continue;
        }
        if !rng.bernoulli(policy.select_rate) {
            continue;
        }
        labels[i] = *id as i64;
        let u = rng.uniform();
        if u < policy.mask_rate {
            *id = MASK;
        } else if u < policy.mask_rate + policy.random_rate {
            *id = FIRST_RESIDUE + rng.below(RESIDUES.len());
        }
    }
    MaskedTokens { ids, labels }
}
