//! Enrollment documents (JSON) and plain-text token embedding tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{Enrollment, EnrollmentOptions, Level, ScoreError};
use crate::vocab::{VocabError, Vocabulary};

pub const ENROLLMENT_FORMAT: &str = "ctcat-enrollment";
pub const ENROLLMENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnrollmentFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed enrollment document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not an enrollment document (format {0:?})")]
    BadFormat(String),
    #[error("unsupported enrollment version {0}")]
    BadVersion(u32),
    #[error("vocabulary hash {found} does not match engine vocabulary {expected}")]
    VocabularyMismatch { expected: String, found: String },
    #[error("declared U = {declared} but keyword has {actual} tokens")]
    TokenCountMismatch { declared: usize, actual: usize },
    #[error("declared D = {declared} but embeddings have dimension {actual}")]
    DimMismatch { declared: usize, actual: usize },
    #[error("line {line}: {message}")]
    TeParse { line: usize, message: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentFile {
    pub format: String,
    pub version: u32,
    pub keyword: String,
    pub vocab_hash: String,
    pub level: Level,
    pub lambda: f64,
    pub u: usize,
    pub d: usize,
    pub token_te: Vec<Vec<f64>>,
    #[serde(default)]
    pub include_spaces: bool,
    #[serde(default)]
    pub normalize_ctc: bool,
}

impl EnrollmentFile {
    pub fn from_enrollment(enrollment: &Enrollment, vocab: &Vocabulary) -> Self {
        let options = enrollment.options();
        Self {
            format: ENROLLMENT_FORMAT.to_string(),
            version: ENROLLMENT_VERSION,
            keyword: enrollment.keyword().text().to_string(),
            vocab_hash: vocab.hash_hex(),
            level: enrollment.level(),
            lambda: enrollment.lambda(),
            u: enrollment.keyword().len(),
            d: enrollment.dim(),
            token_te: enrollment.token_te().to_vec(),
            include_spaces: options.include_spaces,
            normalize_ctc: options.normalize_ctc,
        }
    }

    /// Validates the document against `vocab` and builds the enrollment.
    pub fn to_enrollment(&self, vocab: &Vocabulary) -> Result<Enrollment, EnrollmentFileError> {
        if self.format != ENROLLMENT_FORMAT {
            return Err(EnrollmentFileError::BadFormat(self.format.clone()));
        }
        if self.version != ENROLLMENT_VERSION {
            return Err(EnrollmentFileError::BadVersion(self.version));
        }
        let expected = vocab.hash_hex();
        if self.vocab_hash != expected {
            return Err(EnrollmentFileError::VocabularyMismatch {
                expected,
                found: self.vocab_hash.clone(),
            });
        }
        let keyword = vocab.tokenize(&self.keyword)?;
        if keyword.len() != self.u {
            return Err(EnrollmentFileError::TokenCountMismatch {
                declared: self.u,
                actual: keyword.len(),
            });
        }
        if let Some(bad) = self.token_te.iter().find(|r| r.len() != self.d) {
            return Err(EnrollmentFileError::DimMismatch {
                declared: self.d,
                actual: bad.len(),
            });
        }
        Ok(Enrollment::new(
            vocab,
            keyword,
            self.token_te.clone(),
            self.level,
            self.lambda,
            EnrollmentOptions {
                include_spaces: self.include_spaces,
                normalize_ctc: self.normalize_ctc,
            },
        )?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("enrollment serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, EnrollmentFileError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, EnrollmentFileError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EnrollmentFileError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Tokenizes `text`, pairs it with `token_te` and produces an enrollment document.
pub fn enroll(
    vocab: &Vocabulary,
    text: &str,
    token_te: Vec<Vec<f64>>,
    level: Level,
    lambda: f64,
    options: EnrollmentOptions,
) -> Result<(Enrollment, EnrollmentFile), EnrollmentFileError> {
    let keyword = vocab.tokenize(text)?;
    let enrollment = Enrollment::new(vocab, keyword, token_te, level, lambda, options)?;
    let file = EnrollmentFile::from_enrollment(&enrollment, vocab);
    Ok((enrollment, file))
}

/// Parses a table of reals: one row per line, values separated by commas or
/// whitespace. Blank lines and lines starting with `#` are skipped.
pub fn parse_te_rows(text: &str) -> Result<Vec<Vec<f64>>, EnrollmentFileError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|e| EnrollmentFileError::TeParse {
                    line: i + 1,
                    message: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_te_rows(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>, EnrollmentFileError> {
    parse_te_rows(&fs::read_to_string(path)?)
}

/// Formats rows so that [`parse_te_rows`] reads them back exactly.
pub fn format_te_rows(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn te(u: usize, d: usize) -> Vec<Vec<f64>> {
        (0..u).map(|i| (0..d).map(|j| (i * d + j) as f64 * 0.1 - 0.3).collect()).collect()
    }

    #[test]
    fn enroll_examples() {
        let v = Vocabulary::english();
        let (e, f) = enroll(&v, "cat", te(3, 4), Level::Phrase, 6.0, Default::default()).unwrap();
        assert_eq!(e.groups(), &[vec![0, 1, 2]]);
        assert_eq!((f.u, f.d, f.lambda), (3, 4, 6.0));

        let (e, _) = enroll(&v, "said the king", te(13, 2), Level::Word, 6.0, Default::default()).unwrap();
        assert_eq!(e.groups().iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 4]);

        assert!(matches!(
            enroll(&v, "cat", te(2, 4), Level::Phrase, 6.0, Default::default()),
            Err(EnrollmentFileError::Score(ScoreError::CountMismatch { expected: 3, actual: 2 }))
        ));
        assert!(matches!(
            enroll(&v, "c4t", te(3, 4), Level::Phrase, 6.0, Default::default()),
            Err(EnrollmentFileError::Vocab(VocabError::UnsupportedSymbol { .. }))
        ));
    }

    #[test]
    fn document_validation() {
        let v = Vocabulary::english();
        let (_, f) = enroll(&v, "cat", te(3, 2), Level::Character, 6.0, Default::default()).unwrap();
        let other = Vocabulary::new("abct".chars()).unwrap();
        assert!(matches!(
            f.to_enrollment(&other),
            Err(EnrollmentFileError::VocabularyMismatch { .. })
        ));

        let mut bad = f.clone();
        bad.u = 4;
        assert!(matches!(bad.to_enrollment(&v), Err(EnrollmentFileError::TokenCountMismatch { .. })));
        let mut bad = f.clone();
        bad.d = 3;
        assert!(matches!(bad.to_enrollment(&v), Err(EnrollmentFileError::DimMismatch { .. })));
        let mut bad = f.clone();
        bad.format = "other".into();
        assert!(matches!(bad.to_enrollment(&v), Err(EnrollmentFileError::BadFormat(_))));
        assert!(matches!(EnrollmentFile::from_json("{"), Err(EnrollmentFileError::Json(_))));
    }

    #[test]
    fn optional_flags_default_off() {
        let v = Vocabulary::english();
        let (_, f) = enroll(&v, "a", te(1, 1), Level::Phrase, 6.0, Default::default()).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
        json.as_object_mut().unwrap().remove("include_spaces");
        json.as_object_mut().unwrap().remove("normalize_ctc");
        let back: EnrollmentFile = serde_json::from_value(json).unwrap();
        assert!(!back.include_spaces && !back.normalize_ctc);
    }

    #[test]
    fn te_table_parsing() {
        let rows = parse_te_rows("# header\n1, 2.5 3\n\n-1e-3\t4,5\n").unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.5, 3.0], vec![-1e-3, 4.0, 5.0]]);
        assert!(matches!(
            parse_te_rows("1,2\n3,x\n"),
            Err(EnrollmentFileError::TeParse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn document_round_trip_is_exact(
            vals in proptest::collection::vec(-1e6f64..1e6, 3 * 5),
            lambda in -20.0f64..20.0,
            spaces: bool,
            norm: bool,
        ) {
            let v = Vocabulary::english();
            let rows: Vec<Vec<f64>> = vals.chunks(5).map(<[f64]>::to_vec).collect();
            let opts = EnrollmentOptions { include_spaces: spaces, normalize_ctc: norm };
            let (e, f) = enroll(&v, "a b", rows.clone(), Level::Word, lambda, opts).unwrap();
            let back = EnrollmentFile::from_json(&f.to_json()).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.to_enrollment(&v).unwrap(), e);
            prop_assert_eq!(parse_te_rows(&format_te_rows(&rows)).unwrap(), rows);
        }
    }
}
