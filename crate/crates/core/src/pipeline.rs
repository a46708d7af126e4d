//! Stream detection and manifest-driven evaluation.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::LOG_ZERO;
use crate::detector::{DetectError, Detector};
use crate::io::enrollment::{EnrollmentFile, EnrollmentFileError};
use crate::io::stream::{FormatError, StreamReader};
use crate::metrics::{eer, roc_auc, Label, MetricsError, Trial};
use crate::scoring::DetectionScore;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stream has V* = {actual} but the enrollment vocabulary has {expected}")]
    HeaderMismatch { expected: usize, actual: usize },
    #[error("stream has D = {actual} but the enrollment has D = {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Enrollment(#[from] EnrollmentFileError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("trial {id}: {source}")]
    Trial {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("manifest has a duplicate trial id {0:?}")]
    DuplicateTrial(String),
}

impl PipelineError {
    fn at(self, path: &Path) -> Self {
        PipelineError::File {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }

    /// The innermost error, past file and trial context.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::File { source, .. } | PipelineError::Trial { source, .. } => source.root(),
            e => e,
        }
    }
}

/// One row of the per-frame score table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub t: u64,
    pub z_ctc: f64,
    pub z_embed: f64,
    pub z: f64,
    pub valid: bool,
}

impl From<&DetectionScore> for ScoreRow {
    fn from(s: &DetectionScore) -> Self {
        Self {
            t: s.t,
            z_ctc: s.z_ctc,
            z_embed: s.z_embed,
            z: s.z,
            valid: s.valid,
        }
    }
}

/// Best frame seen during a detection pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectSummary {
    pub frames: u64,
    pub best: Option<DetectionScore>,
}

impl DetectSummary {
    /// Max-over-frames score; an empty stream scores as log-zero.
    pub fn score(&self) -> f64 {
        self.best.map_or(LOG_ZERO, |b| b.z)
    }
}

/// Loads an enrollment document and builds a detector for it.
pub fn load_detector(vocab: &Vocabulary, path: &Path, normalize_ctc: bool) -> Result<Detector, PipelineError> {
    let mut doc = EnrollmentFile::read(path).map_err(|e| PipelineError::from(e).at(path))?;
    doc.normalize_ctc |= normalize_ctc;
    let enrollment = doc.to_enrollment(vocab).map_err(|e| PipelineError::from(e).at(path))?;
    Ok(Detector::new(vocab, enrollment)?)
}

/// Runs every frame of `reader` through `detector`, handing each score to
/// `sink`. The detector is not reset, so consecutive calls continue one
/// stream across several files.
pub fn detect_stream<R: Read>(
    reader: StreamReader<R>,
    detector: &mut Detector,
    mut sink: impl FnMut(&DetectionScore) -> Result<(), PipelineError>,
) -> Result<DetectSummary, PipelineError> {
    let mut reader = reader;
    let h = *reader.header();
    if h.vocab_len as usize != detector.vocab_len() {
        return Err(PipelineError::HeaderMismatch {
            expected: detector.vocab_len(),
            actual: h.vocab_len as usize,
        });
    }
    if h.dim as usize != detector.dim() {
        return Err(PipelineError::DimensionMismatch {
            expected: detector.dim(),
            actual: h.dim as usize,
        });
    }
    let mut lp = vec![0.0; detector.vocab_len()];
    let mut emb = vec![0.0; detector.dim()];
    let mut summary = DetectSummary { frames: 0, best: None };
    while reader.next_frame(&mut lp, &mut emb)? {
        let s = detector.push(&lp, &emb)?;
        summary.frames += 1;
        if summary.best.is_none_or(|b| s.z > b.z) {
            summary.best = Some(s);
        }
        sink(&s)?;
    }
    reader.finish()?;
    Ok(summary)
}

/// CSV writer for per-frame score tables (`t,z_ctc,z_embed,z,valid`).
pub struct ScoreTableWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ScoreTableWriter<W> {
    pub fn new(w: W) -> Result<Self, PipelineError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(["t", "z_ctc", "z_embed", "z", "valid"])?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, s: &DetectionScore) -> Result<(), PipelineError> {
        self.inner.serialize(ScoreRow::from(s))?;
        Ok(())
    }

    pub fn finish(self) -> Result<W, PipelineError> {
        self.inner.into_inner().map_err(|e| PipelineError::Io(e.into_error()))
    }
}

/// Reads a score table produced by [`ScoreTableWriter`].
pub fn read_score_table<R: Read>(r: R) -> Result<Vec<ScoreRow>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

/// Detects over a stream file, writing the score table to `out`.
pub fn detect_file<W: Write>(detector: &mut Detector, stream: &Path, out: W) -> Result<(DetectSummary, W), PipelineError> {
    let reader = StreamReader::open(stream).map_err(|e| PipelineError::from(e).at(stream))?;
    let mut table = ScoreTableWriter::new(out)?;
    let summary = detect_stream(reader, detector, |s| table.write(s)).map_err(|e| match e {
        e @ (PipelineError::Format(_) | PipelineError::HeaderMismatch { .. } | PipelineError::DimensionMismatch { .. }) => e.at(stream),
        e => e,
    })?;
    Ok((summary, table.finish()?))
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ManifestRow {
    pub trial_id: String,
    pub stream_path: PathBuf,
    pub enrollment_path: PathBuf,
    pub label: Label,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::from(e).at(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    rdr.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::from(e).at(path))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Base for relative stream paths; defaults to the manifest's directory.
    pub streams_dir: Option<PathBuf>,
    /// Base for relative enrollment paths; defaults to the manifest's directory.
    pub enrollments_dir: Option<PathBuf>,
    /// Drop failing trials instead of aborting.
    pub skip_bad: bool,
    pub normalize_ctc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial_id: String,
    pub label: Label,
    pub score: f64,
    pub best_t: Option<u64>,
    pub valid: bool,
}

/// Scores one trial: the max over frames of the detection score.
pub fn run_trial(
    vocab: &Vocabulary,
    row: &ManifestRow,
    streams_dir: &Path,
    enrollments_dir: &Path,
    normalize_ctc: bool,
) -> Result<TrialResult, PipelineError> {
    let enrollment = enrollments_dir.join(&row.enrollment_path);
    let stream = streams_dir.join(&row.stream_path);
    let mut detector = load_detector(vocab, &enrollment, normalize_ctc)?;
    let (summary, _) = detect_file(&mut detector, &stream, std::io::sink())?;
    Ok(TrialResult {
        trial_id: row.trial_id.clone(),
        label: row.label,
        score: summary.score(),
        best_t: summary.best.map(|b| b.t),
        valid: summary.best.is_some_and(|b| b.valid),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRun {
    /// Successful trials, sorted by id.
    pub results: Vec<TrialResult>,
    /// Failed trials with their error text, sorted by id.
    pub skipped: Vec<(String, String)>,
}

/// Runs every trial of a manifest in parallel; output order is by trial id.
pub fn run_manifest(vocab: &Vocabulary, manifest: &Path, options: &EvalOptions) -> Result<TrialRun, PipelineError> {
    let mut rows = read_manifest(manifest)?;
    rows.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    if let Some(w) = rows.windows(2).find(|w| w[0].trial_id == w[1].trial_id) {
        return Err(PipelineError::DuplicateTrial(w[0].trial_id.clone()));
    }
    let base = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    let streams = options.streams_dir.clone().unwrap_or_else(|| base.clone());
    let enrollments = options.enrollments_dir.clone().unwrap_or(base);

    let outcomes: Vec<Result<TrialResult, PipelineError>> = rows
        .par_iter()
        .map(|row| {
            run_trial(vocab, row, &streams, &enrollments, options.normalize_ctc).map_err(|e| PipelineError::Trial {
                id: row.trial_id.clone(),
                source: Box::new(e),
            })
        })
        .collect();

    let mut run = TrialRun {
        results: Vec::with_capacity(outcomes.len()),
        skipped: Vec::new(),
    };
    for outcome in outcomes {
        match outcome {
            Ok(r) => run.results.push(r),
            Err(e) if options.skip_bad => {
                log::warn!("skipping {e}");
                let PipelineError::Trial { id, source } = e else { unreachable!() };
                run.skipped.push((id, source.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

/// Writes `trial_id,label,score,best_t,valid`.
pub fn write_trial_scores<W: Write>(w: W, results: &[TrialResult]) -> Result<W, PipelineError> {
    let mut csv = csv::Writer::from_writer(w);
    for r in results {
        csv.serialize(r)?;
    }
    csv.into_inner().map_err(|e| PipelineError::Io(e.into_error()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trials: usize,
    pub positives: usize,
    pub negatives: usize,
    pub skipped: Vec<(String, String)>,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
}

impl EvalReport {
    pub fn from_run(run: &TrialRun) -> Result<Self, MetricsError> {
        let trials: Vec<Trial> = run
            .results
            .iter()
            .map(|r| Trial::new(r.trial_id.clone(), r.score, r.label))
            .collect();
        let auc = roc_auc(&trials)?;
        let (eer, eer_threshold) = eer(&trials)?;
        let positives = trials.iter().filter(|t| t.label == Label::Positive).count();
        Ok(Self {
            trials: trials.len(),
            positives,
            negatives: trials.len() - positives,
            skipped: run.skipped.clone(),
            auc,
            eer,
            eer_threshold,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "trials: {}\npositives: {}\nnegatives: {}\nskipped: {}\nauc: {}\neer: {}\neer_threshold: {}\n",
            self.trials,
            self.positives,
            self.negatives,
            self.skipped.len(),
            self.auc,
            self.eer,
            self.eer_threshold
        );
        for (id, why) in &self.skipped {
            s.push_str(&format!("skipped {id}: {why}\n"));
        }
        s
    }
}
