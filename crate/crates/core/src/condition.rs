//! Visual dense recap: the denoiser condition is
//! `[BOS, class token, recapped patch tokens…, EOS]`.

use std::fmt;
use std::str::FromStr;

use crate::encoder::TokenSequence;
use crate::error::{DivaError, Result};
use crate::rng::{sample_gaussian, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Seed for the frozen sentinel embeddings; constant across runs.
const SENTINEL_SEED: u64 = 0x05e1_71e7_a1b0_5e05;

/// How many patch tokens accompany the class token.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RecapStrategy {
    ClassOnly,
    /// Each patch token kept independently with probability `p`.
    RandomSubset(f64),
    /// Consecutive runs of `k` patch tokens (row-major order) averaged.
    PooledWindow(usize),
    All,
}

impl Default for RecapStrategy {
    fn default() -> Self {
        RecapStrategy::RandomSubset(0.15)
    }
}

impl RecapStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RecapStrategy::RandomSubset(p) if !(p > 0.0 && p <= 1.0) => Err(DivaError::Strategy(
                format!("subset probability must be in (0, 1], got {p}"),
            )),
            RecapStrategy::PooledWindow(0) => {
                Err(DivaError::Strategy("window size must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Expected number of patch-derived tokens in the condition.
    pub fn expected_density(&self, num_patches: usize) -> f64 {
        match *self {
            RecapStrategy::ClassOnly => 0.0,
            RecapStrategy::RandomSubset(p) => p * num_patches as f64,
            RecapStrategy::PooledWindow(k) => num_patches.div_ceil(k.max(1)) as f64,
            RecapStrategy::All => num_patches as f64,
        }
    }

    /// Draws the token selection for one condition.
    pub fn plan(&self, num_patches: usize, rng: &mut RngStream) -> Result<RecapPlan> {
        self.validate()?;
        Ok(match *self {
            RecapStrategy::ClassOnly => RecapPlan::Select(Vec::new()),
            RecapStrategy::RandomSubset(p) => {
                RecapPlan::Select((0..num_patches).filter(|_| rng.bernoulli(p)).collect())
            }
            RecapStrategy::PooledWindow(k) => RecapPlan::Pool(
                (0..num_patches)
                    .step_by(k)
                    .map(|s| (s, (s + k).min(num_patches)))
                    .collect(),
            ),
            RecapStrategy::All => RecapPlan::Select((0..num_patches).collect()),
        })
    }
}

impl fmt::Display for RecapStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecapStrategy::ClassOnly => write!(f, "class"),
            RecapStrategy::RandomSubset(p) => write!(f, "random:{p}"),
            RecapStrategy::PooledWindow(k) => write!(f, "pool:{k}"),
            RecapStrategy::All => write!(f, "all"),
        }
    }
}

impl From<RecapStrategy> for String {
    fn from(s: RecapStrategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for RecapStrategy {
    type Error = DivaError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parses `class`, `all`, `random:P`, `pool:K`, or a bare probability.
impl FromStr for RecapStrategy {
    type Err = DivaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || DivaError::Strategy(format!("cannot parse recap strategy `{s}`"));
        let strategy = match s {
            "class" | "class_only" => RecapStrategy::ClassOnly,
            "all" => RecapStrategy::All,
            _ => {
                if let Some(p) = s.strip_prefix("random:") {
                    RecapStrategy::RandomSubset(p.parse().map_err(|_| bad())?)
                } else if let Some(k) = s.strip_prefix("pool:") {
                    RecapStrategy::PooledWindow(k.parse().map_err(|_| bad())?)
                } else {
                    RecapStrategy::RandomSubset(s.parse().map_err(|_| bad())?)
                }
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Concrete token selection for one condition.
#[derive(Clone, Debug, PartialEq)]
pub enum RecapPlan {
    /// Patch indices kept verbatim, ascending.
    Select(Vec<usize>),
    /// Half-open patch ranges, each averaged into one token.
    Pool(Vec<(usize, usize)>),
}

impl RecapPlan {
    pub fn patch_token_count(&self) -> usize {
        match self {
            RecapPlan::Select(v) => v.len(),
            RecapPlan::Pool(w) => w.len(),
        }
    }
}

/// Frozen begin/end embeddings framing every condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentinels {
    pub bos: Tensor,
    pub eos: Tensor,
}

impl Sentinels {
    pub fn new(embed_dim: usize) -> Self {
        let mut rng = RngStream::new(SENTINEL_SEED, embed_dim as u64);
        Self {
            bos: sample_gaussian(&[1, embed_dim], &mut rng),
            eos: sample_gaussian(&[1, embed_dim], &mut rng),
        }
    }
}

/// Ordered condition sequence consumed by the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    tokens: Tensor,
}

impl Condition {
    pub fn new(tokens: Tensor) -> Result<Self> {
        match tokens.shape() {
            [n, _] if *n >= 3 => Ok(Self { tokens }),
            s => Err(DivaError::InvalidShape(
                s.to_vec(),
                "condition needs two sentinels and a class token".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// Same condition with the recapped patch segment reordered by `perm`.
    pub fn permute_patch_segment(&self, perm: &[usize]) -> Result<Condition> {
        let n = self.len() - 3;
        if perm.len() != n {
            return Err(DivaError::InvalidArgument(format!(
                "permutation of length {} for {n} patch tokens",
                perm.len()
            )));
        }
        let mut rows: Vec<Vec<f64>> = (0..self.len())
            .map(|i| self.tokens.row(i).to_vec())
            .collect();
        let seg: Vec<Vec<f64>> = perm.iter().map(|&j| rows[2 + j].clone()).collect();
        rows.splice(2..2 + n, seg);
        Condition::new(Tensor::from_rows(&rows)?)
    }
}

/// Records the condition for `tokens` (`[1 + N, D]`, class first).
pub fn condition_on_tape(
    tape: &mut Tape,
    tokens: Var,
    plan: &RecapPlan,
    sentinels: &Sentinels,
) -> Result<Var> {
    let d = tape.value(tokens).shape()[1];
    if sentinels.bos.shape() != [1, d] {
        return Err(DivaError::ShapeMismatch {
            left: sentinels.bos.shape().to_vec(),
            right: vec![1, d],
            context: "sentinel width vs token width",
        });
    }
    let n = tape.value(tokens).shape()[0] - 1;
    let mut parts = vec![tape.constant(sentinels.bos.clone())];
    parts.push(tape.slice_rows(tokens, 0, 1)?);
    match plan {
        RecapPlan::Select(idx) if !idx.is_empty() => {
            let rows: Vec<usize> = idx.iter().map(|i| i + 1).collect();
            parts.push(tape.gather_rows(tokens, &rows)?);
        }
        RecapPlan::Select(_) => {}
        RecapPlan::Pool(windows) => {
            let mut pool = vec![0.0; windows.len() * n];
            for (w, &(s, e)) in windows.iter().enumerate() {
                let inv = 1.0 / (e - s) as f64;
                for j in s..e {
                    pool[w * n + j] = inv;
                }
            }
            let pool = tape.constant(Tensor::new(&[windows.len(), n], pool)?);
            let patches = tape.slice_rows(tokens, 1, n)?;
            parts.push(tape.matmul(pool, patches)?);
        }
    }
    parts.push(tape.constant(sentinels.eos.clone()));
    tape.concat_rows(&parts)
}

/// Assembles the condition for an encoded image.
pub fn build_condition(
    ts: &TokenSequence,
    strategy: RecapStrategy,
    rng: &mut RngStream,
) -> Result<Condition> {
    let plan = strategy.plan(ts.num_patches(), rng)?;
    let mut tape = Tape::new();
    let tokens = tape.constant(ts.tokens().clone());
    let c = condition_on_tape(&mut tape, tokens, &plan, &Sentinels::new(ts.embed_dim()))?;
    Condition::new(tape.value(c).clone())
}
