//! Embedding similarity and the combined detection score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{FrameReadout, LOG_ZERO};
use crate::vocab::{KeywordTokens, TokenId, Vocabulary};

/// Vectors with a smaller L2 norm are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// Mixing weight used when none is given.
pub const DEFAULT_LAMBDA: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("readout is not valid (pad_end unreachable)")]
    InvalidReadout,
    #[error("expected {expected} token embeddings, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("{what} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("keyword has no tokens to compare")]
    NoScorableTokens,
    #[error("lambda must be finite, got {0}")]
    BadLambda(f64),
    #[error("unknown level {0:?} (expected character, word or phrase)")]
    UnknownLevel(String),
}

/// Cosine similarity, or `None` when either vector's norm is below [`MIN_NORM`].
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < MIN_NORM || nb < MIN_NORM {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Granularity at which acoustic and text embeddings are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Character,
    Word,
    Phrase,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Character, Level::Word, Level::Phrase];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Character => "character",
            Level::Word => "word",
            Level::Phrase => "phrase",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "character" | "char" => Ok(Level::Character),
            "word" => Ok(Level::Word),
            "phrase" => Ok(Level::Phrase),
            _ => Err(ScoreError::UnknownLevel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentOptions {
    /// Pool space tokens with their preceding word (or as their own character
    /// group) instead of dropping them.
    #[serde(default)]
    pub include_spaces: bool,
    /// Divide `z_ctc` by the number of frames on the winning path.
    #[serde(default)]
    pub normalize_ctc: bool,
}

/// Partition of token indices into comparison groups.
pub fn token_groups(tokens: &[TokenId], space: Option<TokenId>, level: Level, include_spaces: bool) -> Vec<Vec<usize>> {
    let is_space = |u: usize| Some(tokens[u]) == space;
    match level {
        Level::Character => (0..tokens.len())
            .filter(|&u| include_spaces || !is_space(u))
            .map(|u| vec![u])
            .collect(),
        Level::Phrase => {
            let all: Vec<usize> = (0..tokens.len()).filter(|&u| include_spaces || !is_space(u)).collect();
            if all.is_empty() {
                Vec::new()
            } else {
                vec![all]
            }
        }
        Level::Word => {
            let mut groups = Vec::new();
            let mut current = Vec::new();
            for u in 0..tokens.len() {
                if is_space(u) {
                    if include_spaces {
                        current.push(u);
                    }
                    if !current.is_empty() {
                        groups.push(std::mem::take(&mut current));
                    }
                } else {
                    current.push(u);
                }
            }
            if !current.is_empty() {
                groups.push(current);
            }
            groups
        }
    }
}

/// An enrolled keyword: tokens, their text embeddings and how to compare them.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    keyword: KeywordTokens,
    token_te: Vec<Vec<f64>>,
    level: Level,
    lambda: f64,
    options: EnrollmentOptions,
    groups: Vec<Vec<usize>>,
    group_te: Vec<Vec<f64>>,
}

impl Enrollment {
    pub fn new(
        vocab: &Vocabulary,
        keyword: KeywordTokens,
        token_te: Vec<Vec<f64>>,
        level: Level,
        lambda: f64,
        options: EnrollmentOptions,
    ) -> Result<Self, ScoreError> {
        if token_te.len() != keyword.len() {
            return Err(ScoreError::CountMismatch {
                expected: keyword.len(),
                actual: token_te.len(),
            });
        }
        let dim = token_te[0].len();
        if dim == 0 {
            return Err(ScoreError::ZeroDimension);
        }
        if let Some(bad) = token_te.iter().find(|v| v.len() != dim) {
            return Err(ScoreError::DimensionMismatch {
                what: "token text embedding",
                expected: dim,
                actual: bad.len(),
            });
        }
        if !lambda.is_finite() {
            return Err(ScoreError::BadLambda(lambda));
        }
        let groups = token_groups(keyword.tokens(), vocab.space_id(), level, options.include_spaces);
        if groups.is_empty() {
            return Err(ScoreError::NoScorableTokens);
        }
        let group_te: Vec<Vec<f64>> = groups.iter().map(|g| mean_of(g.iter().map(|&u| &token_te[u][..]), dim)).collect();
        for (g, te) in groups.iter().zip(&group_te) {
            if cosine(te, te).is_none() {
                log::warn!(
                    "text embedding for tokens {:?} of {:?} has near-zero norm; its similarity will read as 0",
                    g,
                    keyword.text()
                );
            }
        }
        Ok(Self {
            keyword,
            token_te,
            level,
            lambda,
            options,
            groups,
            group_te,
        })
    }

    pub fn keyword(&self) -> &KeywordTokens {
        &self.keyword
    }

    pub fn token_te(&self) -> &[Vec<f64>] {
        &self.token_te
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn options(&self) -> EnrollmentOptions {
        self.options
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn dim(&self) -> usize {
        self.token_te[0].len()
    }

    /// Group-level text embeddings (unweighted mean of member tokens).
    pub fn group_te(&self) -> &[Vec<f64>] {
        &self.group_te
    }
}

fn mean_of<'a>(vs: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Group-level acoustic embeddings: frame-weighted mean over each group's
/// absorbed frames.
pub fn pool_groups(readout: &FrameReadout, groups: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, ScoreError> {
    if !readout.valid {
        return Err(ScoreError::InvalidReadout);
    }
    Ok(groups
        .iter()
        .map(|g| {
            let mut out = vec![0.0; readout.dim()];
            pool_into(readout, g, &mut out);
            out
        })
        .collect())
}

fn pool_into(readout: &FrameReadout, group: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    let mut frames = 0u64;
    for &u in group {
        for (o, s) in out.iter_mut().zip(readout.token_sum(u)) {
            *o += s;
        }
        frames += readout.count(u) as u64;
    }
    if frames > 0 {
        out.iter_mut().for_each(|x| *x /= frames as f64);
    }
}

/// Group-level text embeddings for an enrollment.
pub fn pool_te(enrollment: &Enrollment) -> Vec<Vec<f64>> {
    enrollment.group_te.clone()
}

/// Per-frame detection score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub t: u64,
    pub z_ctc: f64,
    pub z_embed: f64,
    pub z: f64,
    pub valid: bool,
    /// Groups whose acoustic or text embedding had near-zero norm.
    pub zero_norm_groups: u32,
}

impl DetectionScore {
    pub fn invalid(t: u64) -> Self {
        Self {
            t,
            z_ctc: LOG_ZERO,
            z_embed: 0.0,
            z: LOG_ZERO,
            valid: false,
            zero_norm_groups: 0,
        }
    }
}

/// Scores a readout against an enrollment.
pub fn score(readout: &FrameReadout, enrollment: &Enrollment) -> Result<DetectionScore, ScoreError> {
    let mut scratch = Vec::new();
    score_with(readout, enrollment, &mut scratch)
}

/// [`score`] with a caller-owned scratch buffer, for per-frame use.
pub fn score_with(readout: &FrameReadout, enrollment: &Enrollment, scratch: &mut Vec<f64>) -> Result<DetectionScore, ScoreError> {
    let dim = enrollment.dim();
    if readout.dim() != dim {
        return Err(ScoreError::DimensionMismatch {
            what: "readout embedding",
            expected: dim,
            actual: readout.dim(),
        });
    }
    if readout.token_count() != enrollment.keyword.len() {
        return Err(ScoreError::CountMismatch {
            expected: enrollment.keyword.len(),
            actual: readout.token_count(),
        });
    }
    if !readout.valid {
        return Ok(DetectionScore::invalid(readout.t));
    }
    scratch.resize(dim, 0.0);
    let mut total = 0.0;
    let mut zero_norm = 0u32;
    for (g, te) in enrollment.groups.iter().zip(&enrollment.group_te) {
        pool_into(readout, g, scratch);
        match cosine(scratch, te) {
            Some(c) => total += c,
            None => zero_norm += 1,
        }
    }
    let z_embed = total / enrollment.groups.len() as f64;
    let z_ctc = if enrollment.options.normalize_ctc {
        readout.z_ctc / readout.path_len() as f64
    } else {
        readout.z_ctc
    };
    Ok(DetectionScore {
        t: readout.t,
        z_ctc,
        z_embed,
        z: z_ctc + enrollment.lambda * z_embed,
        valid: true,
        zero_norm_groups: zero_norm,
    })
}
