//! Streaming open-vocabulary keyword spotting.
//!
//! A keyword given as text is compiled into a left-to-right decoding graph.
//! Frames of CTC log-posteriors and acoustic embeddings are pushed through a
//! Viterbi aligner one at a time; at every frame the aligner reports the best
//! path ending after the keyword along with per-token pooled embeddings, which
//! are compared with the keyword's text embeddings to give a detection score.
//!
//! ```
//! use ctcat::{enroll, Detector, Level, Vocabulary};
//!
//! let vocab = Vocabulary::english();
//! let te = vec![vec![1.0, 0.0]];
//! let (enrollment, _) = enroll(&vocab, "a", te, Level::Phrase, 6.0, Default::default()).unwrap();
//! let mut det = Detector::new(&vocab, enrollment).unwrap();
//!
//! let a = vocab.id_of('a').unwrap().index();
//! let pad = vocab.padding_id().index();
//! let row = |k: usize| (0..vocab.total_len()).map(|i| if i == k { 0.0 } else { -30.0 }).collect::<Vec<_>>();
//! det.push(&row(pad), &[0.0, 1.0]).unwrap();
//! det.push(&row(a), &[2.0, 0.0]).unwrap();
//! let s = det.push(&row(pad), &[0.0, 1.0]).unwrap();
//! assert!(s.valid);
//! assert_eq!(s.z, 6.0);
//! ```

pub mod aligner;
pub mod detector;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod reference;
pub mod scoring;
pub mod selftest;
pub mod synth;
pub mod vocab;

pub use aligner::{AlignError, AlignerBank, Frame, FrameReadout, LOG_ZERO};
pub use detector::{DetectError, Detector};
pub use graph::{DecodingGraph, GraphOptions};
pub use io::enrollment::{enroll, EnrollmentFile, EnrollmentFileError};
pub use io::stream::{FormatError, StreamFile, StreamHeader, StreamReader, StreamWriter};
pub use metrics::{eer, roc_auc, Label, MetricsError, Trial};
pub use scoring::{DetectionScore, Enrollment, EnrollmentOptions, Level, ScoreError, DEFAULT_LAMBDA};
pub use vocab::{KeywordTokens, TokenId, VocabError, Vocabulary};
