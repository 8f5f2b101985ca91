use serde::{Deserialize, Serialize};

use super::nn::Linear;
use crate::data::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Var};

/// Shape description of a [`TaskHead`], stored alongside checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub outputs: usize,
    pub seed: u64,
}

impl HeadConfig {
    /// Hidden width equals the input width.
    pub fn for_task(spec: &TaskSpec, input_dim: usize, seed: u64) -> Self {
        Self {
            kind: spec.kind,
            input_dim,
            hidden_dim: input_dim,
            outputs: spec.outputs(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.outputs == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        let ok = match self.kind {
            TaskKind::SequenceRegression => self.outputs == 1,
            _ => self.outputs >= 2,
        };
        if !ok {
            return Err(Error::config(format!(
                "a {} head cannot have {} outputs",
                self.kind, self.outputs
            )));
        }
        Ok(())
    }
}

/// `input -> Linear -> GELU -> Linear`. Regression output is unsquashed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub config: HeadConfig,
    pub params: ParamStore,
    hidden: Linear,
    output: Linear,
}

pub const HEAD_PREFIX: &str = "head.";

impl TaskHead {
    pub fn new(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, "head.hidden", config.input_dim, config.hidden_dim, &mut rng);
        let output = Linear::new(&mut params, "head.output", config.hidden_dim, config.outputs, &mut rng);
        Ok(Self {
            config,
            params,
            hidden,
            output,
        })
    }

    pub fn from_params(config: HeadConfig, params: ParamStore) -> Result<Self> {
        let mut head = Self::new(config)?;
        head.params.copy_values_from(&params)?;
        Ok(head)
    }

    /// Sequence kinds take pooled `[B, d]` and return `[B, C]` (or `[B, 1]`);
    /// the token kind takes `[B, L, d]` and returns `[B, L, C]`.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        let want_rank = match self.config.kind {
            TaskKind::TokenClassification => 3,
            _ => 2,
        };
        if s.len() != want_rank || s[s.len() - 1] != self.config.input_dim {
            return Err(Error::shape(format!(
                "{} head expects rank-{want_rank} input ending in {}, got {s:?}",
                self.config.kind, self.config.input_dim
            )));
        }
        let h = self.hidden.forward(tape, &self.params, input)?;
        let h = tape.gelu(h);
        self.output.forward(tape, &self.params, h)
    }
}
