//! Corpus and task-dataset ingestion.

pub mod batch;
pub mod fasta;
pub mod synthetic;
pub mod task;

pub use batch::{batch_iter, Batch, BatchIter};
pub use fasta::{filter_by_length, parse_fasta, read_fasta_file, write_fasta, FastaReader, FastaRecord};
pub use synthetic::{family_corpus, SyntheticTask};
pub use task::{
    load_task_csv, load_task_csv_file, split_indices, write_task_csv, Dataset, Label, Record, SplitName, Splits,
    TaskKind, TaskSpec, DEFAULT_SPLIT,
};
