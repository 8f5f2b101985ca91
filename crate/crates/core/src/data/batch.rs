use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{encode, TokenSequence};

use super::task::{Dataset, Label, SplitName};

/// A padded batch. Every `tokens[i]` has the same length `seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<TokenSequence>,
    /// Token labels are truncated along with their sequence.
    pub labels: Vec<Label>,
    /// Dataset record index of each row.
    pub indices: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    /// Encode sequences and pad them to the longest one (capped at `max_len`).
    pub fn from_sequences<'a>(
        sequences: impl IntoIterator<Item = &'a str>,
        max_len: usize,
    ) -> Result<(Vec<TokenSequence>, usize)> {
        let encoded = sequences
            .into_iter()
            .map(|s| encode(s, max_len))
            .collect::<Result<Vec<_>>>()?;
        if encoded.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let len = encoded.iter().map(|t| t.true_length).max().unwrap_or(0);
        let tokens = encoded
            .iter()
            .map(|t| t.repadded(len))
            .collect::<Result<Vec<_>>>()?;
        Ok((tokens, len))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row-major `[B, L]` token ids.
    pub fn flat_ids(&self) -> Vec<usize> {
        self.tokens.iter().flat_map(|t| t.ids.iter().copied()).collect()
    }

    /// Row-major `[B, L]` attention flags.
    pub fn flat_mask(&self) -> Vec<bool> {
        self.tokens
            .iter()
            .flat_map(|t| t.attention_mask.iter().map(|&m| m == 1))
            .collect()
    }
}

/// Iterates one epoch over a split in padded batches.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    max_len: usize,
}

/// Batches over `split`. With `shuffle_seed = None` items come in dataset
/// order; otherwise the order is a seeded permutation.
pub fn batch_iter(
    dataset: &Dataset,
    split: SplitName,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    let mut order = dataset.splits.get(split).to_vec();
    if order.is_empty() {
        return Err(Error::invalid(format!("split {} is empty", split.as_str())));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if max_len < 3 {
        return Err(Error::invalid(format!("max_len must be at least 3, got {max_len}")));
    }
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(BatchIter {
        dataset,
        order,
        pos: 0,
        batch_size,
        max_len,
    })
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn build(&self, indices: &[usize]) -> Result<Batch> {
        let records: Vec<_> = indices.iter().map(|&i| &self.dataset.records[i]).collect();
        let (tokens, seq_len) =
            Batch::from_sequences(records.iter().map(|r| r.sequence.as_str()), self.max_len)?;
        let labels = records
            .iter()
            .zip(&tokens)
            .map(|(r, t)| match &r.label {
                Label::Tokens(flags) => Label::Tokens(flags[..t.residue_count()].to_vec()),
                other => other.clone(),
            })
            .collect();
        Ok(Batch {
            tokens,
            labels,
            indices: indices.to_vec(),
            seq_len,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build(&indices))
    }
}
