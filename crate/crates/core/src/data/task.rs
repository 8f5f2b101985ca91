use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SequenceClassification,
    TokenClassification,
    SequenceRegression,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::SequenceClassification,
        TaskKind::TokenClassification,
        TaskKind::SequenceRegression,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::SequenceClassification => "sequence-classification",
            TaskKind::TokenClassification => "token-classification",
            TaskKind::SequenceRegression => "sequence-regression",
        }
    }

    /// The metric reported for this kind of task.
    pub fn metric(&self) -> Metric {
        match self {
            TaskKind::SequenceClassification => Metric::Accuracy,
            TaskKind::TokenClassification => Metric::AucRoc,
            TaskKind::SequenceRegression => Metric::Spearman,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::SequenceRegression)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Present for the classification kinds.
    pub num_classes: Option<usize>,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, num_classes: Option<usize>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            kind,
            num_classes,
            metric: kind.metric(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metric != self.kind.metric() {
            return Err(Error::config(format!(
                "metric {} does not fit a {} task",
                self.metric.name(),
                self.kind
            )));
        }
        match (self.kind, self.num_classes) {
            (TaskKind::SequenceClassification, Some(c)) if c >= 2 => Ok(()),
            (TaskKind::TokenClassification, Some(2)) => Ok(()),
            (TaskKind::SequenceRegression, None) => Ok(()),
            (kind, n) => Err(Error::config(format!("{kind} task cannot have num_classes {n:?}"))),
        }
    }

    /// Output width of the task head.
    pub fn outputs(&self) -> usize {
        self.num_classes.unwrap_or(1)
    }

    /// Cellular compartment prediction (10 compartments).
    pub fn subcellular_localization() -> Self {
        Self::new("subcellular_localization", TaskKind::SequenceClassification, Some(10)).expect("valid")
    }

    /// Soluble vs membrane-bound.
    pub fn membrane_solubility() -> Self {
        Self::new("membrane_solubility", TaskKind::SequenceClassification, Some(2)).expect("valid")
    }

    /// Per-residue epitope membership.
    pub fn epitope_region() -> Self {
        Self::new("epitope_region", TaskKind::TokenClassification, Some(2)).expect("valid")
    }

    /// Fitness of multi-mutation variants.
    pub fn gb1_fitness() -> Self {
        Self::new("gb1_fitness", TaskKind::SequenceRegression, None).expect("valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// One 0/1 flag per residue.
    Tokens(Vec<u8>),
    Value(f64),
}

impl Label {
    pub fn parse(text: &str, spec: &TaskSpec, residues: usize) -> std::result::Result<Self, String> {
        match spec.kind {
            TaskKind::SequenceClassification => {
                let c: usize = text
                    .parse()
                    .map_err(|_| format!("class label {text:?} is not a non-negative integer"))?;
                if let Some(n) = spec.num_classes {
                    if c >= n {
                        return Err(format!("class {c} outside [0, {n})"));
                    }
                }
                Ok(Label::Class(c))
            }
            TaskKind::TokenClassification => {
                let flags = text
                    .bytes()
                    .map(|b| match b {
                        b'0' => Ok(0),
                        b'1' => Ok(1),
                        _ => Err(format!("token label {text:?} must contain only 0 and 1")),
                    })
                    .collect::<std::result::Result<Vec<u8>, String>>()?;
                if flags.len() != residues {
                    return Err(format!(
                        "token label has {} flags for a {residues}-residue sequence",
                        flags.len()
                    ));
                }
                Ok(Label::Tokens(flags))
            }
            TaskKind::SequenceRegression => {
                let v: f64 = text
                    .parse()
                    .map_err(|_| format!("regression label {text:?} is not a number"))?;
                if !v.is_finite() {
                    return Err(format!("regression label {text:?} is not finite"));
                }
                Ok(Label::Value(v))
            }
        }
    }

    pub fn to_field(&self) -> String {
        match self {
            Label::Class(c) => c.to_string(),
            Label::Tokens(t) => t.iter().map(|f| if *f == 1 { '1' } else { '0' }).collect(),
            Label::Value(v) => v.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub sequence: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    fn get_mut(&mut self, name: SplitName) -> &mut Vec<usize> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Valid => &mut self.valid,
            SplitName::Test => &mut self.test,
        }
    }
}

/// A task's records plus a disjoint train/valid/test cover of their indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub records: Vec<Record>,
    pub splits: Splits,
}

impl Dataset {
    /// Build from records with every index in the training split.
    pub fn new(spec: TaskSpec, records: Vec<Record>) -> Result<Self> {
        let splits = Splits {
            train: (0..records.len()).collect(),
            ..Default::default()
        };
        Self::with_splits(spec, records, splits)
    }

    pub fn with_splits(spec: TaskSpec, records: Vec<Record>, splits: Splits) -> Result<Self> {
        let ds = Self {
            spec,
            records,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_records(&self, name: SplitName) -> impl Iterator<Item = &Record> {
        self.splits.get(name).iter().map(|&i| &self.records[i])
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let mut seen = vec![false; self.records.len()];
        for name in [SplitName::Train, SplitName::Valid, SplitName::Test] {
            for &i in self.splits.get(name) {
                if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!(
                        "split index {i} is out of range or repeated"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("splits do not cover every record"));
        }
        for (i, r) in self.records.iter().enumerate() {
            let ok = match (&r.label, self.spec.kind) {
                (Label::Class(c), TaskKind::SequenceClassification) => Some(*c) < self.spec.num_classes,
                (Label::Tokens(t), TaskKind::TokenClassification) => t.len() == r.sequence.len(),
                (Label::Value(v), TaskKind::SequenceRegression) => v.is_finite(),
                _ => false,
            };
            if !ok || r.sequence.is_empty() {
                return Err(Error::invalid(format!(
                    "record {i} does not fit a {} task",
                    self.spec.kind
                )));
            }
        }
        Ok(())
    }

    /// Reassign splits by a seeded shuffle. `fractions` are (train, valid,
    /// test); valid and test get `floor(n * f)` items, train the remainder.
    pub fn split(mut self, fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        self.splits = split_indices(self.records.len(), fractions, seed)?;
        Ok(self)
    }
}

pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f > 0.0)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    // the small slack absorbs representation error such as 0.1 * 30
    let n_valid = (n as f64 * fv + 1e-9).floor() as usize;
    let n_test = (n as f64 * fs + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.valid.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Read a task CSV with header `sequence,label[,split]`.
///
/// Row numbers in errors are 1-based file line numbers (the header is line 1).
/// Without a split column the records are split 80/10/10 with `seed`.
pub fn load_task_csv<R: BufRead>(reader: R, spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Format {
                line: 1,
                message: "missing header row".into(),
            })
        }
    };
    let header = header.trim_end_matches('\r');
    let has_split = match header {
        "sequence,label" => false,
        "sequence,label,split" => true,
        other => {
            return Err(Error::Format {
                line: 1,
                message: format!("expected header `sequence,label[,split]`, got {other:?}"),
            })
        }
    };
    let mut records = Vec::new();
    let mut splits = Splits::default();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let want = if has_split { 3 } else { 2 };
        if fields.len() != want {
            return Err(Error::Row {
                row,
                message: format!("expected {want} fields, found {}", fields.len()),
            });
        }
        let sequence = fields[0].trim();
        if sequence.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty sequence".into(),
            });
        }
        let label = Label::parse(fields[1].trim(), spec, sequence.len())
            .map_err(|message| Error::Row { row, message })?;
        if has_split {
            let name: SplitName = fields[2].trim().parse().map_err(|e: Error| Error::Row {
                row,
                message: e.to_string(),
            })?;
            splits.get_mut(name).push(records.len());
        }
        records.push(Record {
            sequence: sequence.to_string(),
            label,
        });
    }
    if records.is_empty() {
        return Err(Error::invalid("task file has no records"));
    }
    if !has_split {
        splits = split_indices(records.len(), DEFAULT_SPLIT, seed)?;
    }
    Dataset::with_splits(spec.clone(), records, splits)
}

pub fn load_task_csv_file(path: &Path, spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    load_task_csv(std::io::BufReader::new(file), spec, seed).map_err(|e| e.in_file(path))
}

/// Write a dataset as CSV, including the split column.
pub fn write_task_csv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let mut split_of = vec![SplitName::Train; dataset.len()];
    for name in [SplitName::Valid, SplitName::Test] {
        for &i in dataset.splits.get(name) {
            split_of[i] = name;
        }
    }
    writeln!(out, "sequence,label,split")?;
    for (r, s) in dataset.records.iter().zip(split_of) {
        writeln!(out, "{},{},{}", r.sequence, r.label.to_field(), s.as_str())?;
    }
    out.flush()?;
    Ok(())
}
