//! A keyword detector: one enrolled keyword bound to one aligner bank.

use thiserror::Error;

use crate::aligner::{AlignError, AlignerBank, FrameReadout};
use crate::graph::{DecodingGraph, GraphOptions};
use crate::scoring::{score_with, DetectionScore, Enrollment, ScoreError};
use crate::vocab::Vocabulary;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Streams frames through the aligner and scores every frame.
#[derive(Debug, Clone)]
pub struct Detector {
    enrollment: Enrollment,
    bank: AlignerBank,
    readout: FrameReadout,
    scratch: Vec<f64>,
}

impl Detector {
    pub fn new(vocab: &Vocabulary, enrollment: Enrollment) -> Result<Self, DetectError> {
        Self::with_graph_options(vocab, enrollment, GraphOptions::default())
    }

    pub fn with_graph_options(vocab: &Vocabulary, enrollment: Enrollment, options: GraphOptions) -> Result<Self, DetectError> {
        let graph = DecodingGraph::with_options(enrollment.keyword(), vocab, options);
        let bank = AlignerBank::new(graph, vocab.total_len(), enrollment.dim())?;
        let readout = FrameReadout::new(enrollment.keyword().len(), enrollment.dim());
        Ok(Self {
            enrollment,
            bank,
            readout,
            scratch: Vec::new(),
        })
    }

    pub fn enrollment(&self) -> &Enrollment {
        &self.enrollment
    }

    pub fn bank(&self) -> &AlignerBank {
        &self.bank
    }

    /// Readout from the most recent frame.
    pub fn last_readout(&self) -> &FrameReadout {
        &self.readout
    }

    pub fn current_t(&self) -> u64 {
        self.bank.current_t()
    }

    pub fn vocab_len(&self) -> usize {
        self.bank.vocab_len()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    /// Consumes the next frame and returns its score.
    pub fn push(&mut self, log_posteriors: &[f64], embedding: &[f64]) -> Result<DetectionScore, DetectError> {
        self.bank.step_into(log_posteriors, embedding, &mut self.readout)?;
        Ok(score_with(&self.readout, &self.enrollment, &mut self.scratch)?)
    }

    pub fn reset(&mut self) {
        self.bank.reset();
        self.readout = FrameReadout::new(self.enrollment.keyword().len(), self.enrollment.dim());
    }
}
