//! Deterministic synthetic frame streams with a planted keyword.
//!
//! Frames are addressed 1-based. Each keyword token owns an inclusive span of
//! frames; frames before the first span and after the last are padding
//! filler, frames between two spans are blank filler that continues the
//! previous token.

use std::io::{self, Read};

use byteorder::{ByteOrder, LittleEndian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::stream::{FormatError, StreamFile, StreamHeader, DEFAULT_FRAME_RATE_HZ};
use crate::vocab::{KeywordTokens, TokenId, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("spans {first} and {second} overlap or are out of order")]
    SpanOverlap { first: usize, second: usize },
    #[error("span {index} ({start}..={end}) is outside frames 1..={total}")]
    SpanOutOfRange { index: usize, start: u32, end: u32, total: u32 },
    #[error("keyword has {tokens} tokens but {spans} spans were given")]
    SpanCount { tokens: usize, spans: usize },
    #[error("gamma must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("sigma must be finite and >= 0, got {0}")]
    BadSigma(f64),
    #[error("expected {expected} token embeddings, got {actual}")]
    TeCount { expected: usize, actual: usize },
    #[error("token embedding {index} has dimension {actual}, expected {expected}")]
    TeDim { index: usize, expected: usize, actual: usize },
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Inclusive, 1-based frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: u32,
    pub end: u32,
}

impl Span {
    pub fn len(&self) -> u32 {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

fn default_frame_rate() -> f32 {
    DEFAULT_FRAME_RATE_HZ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub keyword: String,
    pub spans: Vec<Span>,
    pub total_frames: u32,
    pub gamma: f64,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f32,
}

impl AlignmentSpec {
    /// Lays tokens out back to back after `lead` filler frames, with one
    /// blank frame between identical neighbours (without it a repeated token
    /// could not be told apart from one long token), then `trail` filler.
    #[allow(clippy::too_many_arguments)]
    pub fn planted(keyword: &KeywordTokens, durations: &[u32], lead: u32, trail: u32, gamma: f64, sigma: f64, seed: u64) -> Self {
        let mut spans = Vec::with_capacity(durations.len());
        let mut next = lead + 1;
        for (u, &d) in durations.iter().enumerate() {
            if u > 0 && keyword.tokens().get(u) == keyword.tokens().get(u - 1) {
                next += 1;
            }
            let d = d.max(1);
            spans.push(Span {
                start: next,
                end: next + d - 1,
            });
            next += d;
        }
        Self {
            keyword: keyword.text().to_string(),
            spans,
            total_frames: next - 1 + trail,
            gamma,
            sigma,
            seed,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes") + "\n"
    }

    pub fn lead_frames(&self) -> u32 {
        self.spans.first().map_or(self.total_frames, |s| s.start - 1)
    }

    pub fn trail_frames(&self) -> u32 {
        self.spans.last().map_or(0, |s| self.total_frames - s.end)
    }

    pub fn validate(&self, token_count: usize) -> Result<(), SynthError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SynthError::BadGamma(self.gamma));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(SynthError::BadSigma(self.sigma));
        }
        if self.spans.len() != token_count {
            return Err(SynthError::SpanCount {
                tokens: token_count,
                spans: self.spans.len(),
            });
        }
        for (i, s) in self.spans.iter().enumerate() {
            if s.start == 0 || s.is_empty() || s.end > self.total_frames {
                return Err(SynthError::SpanOutOfRange {
                    index: i,
                    start: s.start,
                    end: s.end,
                    total: self.total_frames,
                });
            }
        }
        for (i, w) in self.spans.windows(2).enumerate() {
            if w[1].start <= w[0].end {
                return Err(SynthError::SpanOverlap { first: i, second: i + 1 });
            }
        }
        Ok(())
    }
}

/// Sidecar describing where the keyword was planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub keyword: String,
    pub vocab_hash: String,
    pub spans: Vec<Span>,
    pub keyword_start: u32,
    pub keyword_end: u32,
    pub lead_frames: u32,
    pub trail_frames: u32,
    pub total_frames: u32,
    pub gamma: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl GroundTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Filler,
    Token(usize),
    Gap(usize),
}

/// Lazily generates the frames of a synthetic stream, one at a time.
#[derive(Debug, Clone)]
pub struct SynthFrames {
    spec: AlignmentSpec,
    tokens: Vec<TokenId>,
    te: Vec<Vec<f64>>,
    vocab_len: usize,
    blank: TokenId,
    padding: TokenId,
    on_log: f64,
    off_log: f64,
    rng: ChaCha8Rng,
    t: u32,
    span_idx: usize,
}

impl SynthFrames {
    pub fn new(vocab: &Vocabulary, spec: &AlignmentSpec, token_te: &[Vec<f64>]) -> Result<Self, SynthError> {
        let keyword = vocab.tokenize(&spec.keyword)?;
        spec.validate(keyword.len())?;
        if token_te.len() != keyword.len() {
            return Err(SynthError::TeCount {
                expected: keyword.len(),
                actual: token_te.len(),
            });
        }
        let d = token_te[0].len();
        if d == 0 {
            return Err(SynthError::ZeroDimension);
        }
        if let Some((index, r)) = token_te.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(SynthError::TeDim {
                index,
                expected: d,
                actual: r.len(),
            });
        }
        let tokens = keyword.tokens().to_vec();
        for (u, w) in spec.spans.windows(2).enumerate() {
            if tokens[u] == tokens[u + 1] && w[1].start == w[0].end + 1 && spec.gamma == 1.0 {
                log::warn!("tokens {u} and {} repeat without a gap; no path can realise this alignment", u + 1);
            }
        }
        let v = vocab.total_len();
        let off = (1.0 - spec.gamma) / (v - 1) as f64;
        Ok(Self {
            tokens,
            te: token_te.to_vec(),
            vocab_len: v,
            blank: vocab.blank_id(),
            padding: vocab.padding_id(),
            on_log: spec.gamma.ln(),
            off_log: if off > 0.0 { off.ln() } else { f64::NEG_INFINITY },
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            t: 0,
            span_idx: 0,
            spec: spec.clone(),
        })
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader {
            vocab_len: self.vocab_len as u16,
            dim: self.te[0].len() as u16,
            frames: self.spec.total_frames,
            frame_rate_hz: self.spec.frame_rate_hz,
        }
    }

    pub fn dim(&self) -> usize {
        self.te[0].len()
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn remaining(&self) -> u32 {
        self.spec.total_frames - self.t
    }

    fn role(&mut self, t: u32) -> Role {
        let spans = &self.spec.spans;
        while self.span_idx < spans.len() && spans[self.span_idx].end < t {
            self.span_idx += 1;
        }
        match spans.get(self.span_idx) {
            Some(s) if s.start <= t => Role::Token(self.span_idx),
            Some(_) if self.span_idx > 0 => Role::Gap(self.span_idx - 1),
            _ => Role::Filler,
        }
    }

    /// Writes the next frame into the buffers; returns false once exhausted.
    pub fn next_frame(&mut self, log_posteriors: &mut [f32], embedding: &mut [f32]) -> bool {
        if self.t >= self.spec.total_frames {
            return false;
        }
        self.t += 1;
        let role = self.role(self.t);
        let target = match role {
            Role::Filler => self.padding,
            Role::Token(u) => self.tokens[u],
            Role::Gap(_) => self.blank,
        };
        for (k, lp) in log_posteriors.iter_mut().enumerate() {
            *lp = if k == target.index() { self.on_log } else { self.off_log } as f32;
        }
        match role {
            Role::Filler => {
                for e in embedding.iter_mut() {
                    *e = self.rng.sample::<f64, _>(StandardNormal) as f32;
                }
            }
            Role::Token(u) | Role::Gap(u) => {
                for (e, &c) in embedding.iter_mut().zip(&self.te[u]) {
                    let n: f64 = self.rng.sample(StandardNormal);
                    *e = (c + self.spec.sigma * n) as f32;
                }
            }
        }
        true
    }
}

/// `Read` adapter that serializes a [`SynthFrames`] as a stream file on the fly.
pub struct SynthReader {
    frames: SynthFrames,
    buf: Vec<u8>,
    pos: usize,
    lp: Vec<f32>,
    emb: Vec<f32>,
}

impl SynthReader {
    pub fn new(frames: SynthFrames) -> Self {
        let h = frames.header();
        let mut buf = Vec::new();
        h.write_to(&mut buf).expect("writing to a Vec cannot fail");
        let (v, d) = (frames.vocab_len(), frames.dim());
        Self {
            frames,
            buf,
            pos: 0,
            lp: vec![0.0; v],
            emb: vec![0.0; d],
        }
    }
}

impl Read for SynthReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.pos == self.buf.len() {
            if !self.frames.next_frame(&mut self.lp, &mut self.emb) {
                return Ok(0);
            }
            let n = self.lp.len() + self.emb.len();
            self.buf.resize(n * 4, 0);
            let (a, b) = self.buf.split_at_mut(self.lp.len() * 4);
            LittleEndian::write_f32_into(&self.lp, a);
            LittleEndian::write_f32_into(&self.emb, b);
            self.pos = 0;
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// Generates the whole stream in memory along with its ground truth.
pub fn synth(vocab: &Vocabulary, spec: &AlignmentSpec, token_te: &[Vec<f64>]) -> Result<(StreamFile, GroundTruth), SynthError> {
    let mut frames = SynthFrames::new(vocab, spec, token_te)?;
    let header = frames.header();
    let (v, d) = (frames.vocab_len(), frames.dim());
    let t = spec.total_frames as usize;
    let mut log_posteriors = vec![0.0f32; t * v];
    let mut embeddings = vec![0.0f32; t * d];
    for (lp, emb) in log_posteriors.chunks_mut(v).zip(embeddings.chunks_mut(d)) {
        frames.next_frame(lp, emb);
    }
    let truth = GroundTruth {
        keyword: spec.keyword.clone(),
        vocab_hash: vocab.hash_hex(),
        spans: spec.spans.clone(),
        keyword_start: spec.spans[0].start,
        keyword_end: spec.spans[spec.spans.len() - 1].end,
        lead_frames: spec.lead_frames(),
        trail_frames: spec.trail_frames(),
        total_frames: spec.total_frames,
        gamma: spec.gamma,
        sigma: spec.sigma,
        seed: spec.seed,
    };
    Ok((
        StreamFile {
            header,
            log_posteriors,
            embeddings,
        },
        truth,
    ))
}

/// `n` vectors of dimension `d` drawn uniformly from the unit sphere.
pub fn random_unit_vectors<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn te(u: usize, d: usize) -> Vec<Vec<f64>> {
        random_unit_vectors(&mut ChaCha8Rng::seed_from_u64(1), u, d)
    }

    fn cat_spec(gamma: f64, sigma: f64) -> AlignmentSpec {
        let v = Vocabulary::english();
        AlignmentSpec::planted(&v.tokenize("cat").unwrap(), &[2, 3, 1], 2, 3, gamma, sigma, 9)
    }

    #[test]
    fn planted_layout() {
        let v = Vocabulary::english();
        let s = cat_spec(1.0, 0.0);
        assert_eq!(
            s.spans,
            vec![Span { start: 3, end: 4 }, Span { start: 5, end: 7 }, Span { start: 8, end: 8 }]
        );
        assert_eq!((s.total_frames, s.lead_frames(), s.trail_frames()), (11, 2, 3));
        let s = AlignmentSpec::planted(&v.tokenize("all").unwrap(), &[1, 1, 1], 1, 1, 1.0, 0.0, 0);
        assert_eq!(s.spans[2], Span { start: 5, end: 5 });
        assert_eq!(s.total_frames, 6);
    }

    #[test]
    fn frames_follow_roles() {
        let v = Vocabulary::english();
        let s = AlignmentSpec::planted(&v.tokenize("aa").unwrap(), &[1, 2], 1, 1, 0.9, 0.0, 3);
        let te = te(2, 3);
        let (f, truth) = synth(&v, &s, &te).unwrap();
        assert_eq!(f.frames(), 6);
        assert_eq!((truth.keyword_start, truth.keyword_end), (2, 5));
        let argmax = |t: usize| {
            let row = f.log_posterior_row(t);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
        };
        let a = v.id_of('a').unwrap().index();
        let roles: Vec<usize> = (0..6).map(argmax).collect();
        assert_eq!(roles, vec![29, a, 28, a, a, 29]);
        // rows are normalized
        for t in 0..6 {
            let lse = f.log_posterior_row(t).iter().map(|&x| (x as f64).exp()).sum::<f64>();
            assert!((lse - 1.0).abs() < 1e-6);
        }
        // sigma 0: token and gap frames carry the token embedding
        for (t, u) in [(1, 0), (2, 0), (3, 1), (4, 1)] {
            let row: Vec<f64> = f.embedding_row(t).iter().map(|&x| x as f64).collect();
            for (x, y) in row.iter().zip(&te[u]) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gamma_one_puts_no_mass_elsewhere() {
        let v = Vocabulary::english();
        let (f, _) = synth(&v, &cat_spec(1.0, 0.0), &te(3, 2)).unwrap();
        let row = f.log_posterior_row(0);
        assert_eq!(row[29], 0.0);
        assert!(row[..29].iter().all(|x| *x == f32::NEG_INFINITY));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let v = Vocabulary::english();
        let a = synth(&v, &cat_spec(0.8, 0.3), &te(3, 4)).unwrap().0.to_bytes();
        let b = synth(&v, &cat_spec(0.8, 0.3), &te(3, 4)).unwrap().0.to_bytes();
        assert_eq!(a, b);
        let mut s = cat_spec(0.8, 0.3);
        s.seed = 10;
        assert_ne!(a, synth(&v, &s, &te(3, 4)).unwrap().0.to_bytes());
    }

    #[test]
    fn lazy_reader_matches_in_memory() {
        let v = Vocabulary::english();
        let s = cat_spec(0.7, 0.5);
        let (f, _) = synth(&v, &s, &te(3, 5)).unwrap();
        let mut bytes = Vec::new();
        SynthReader::new(SynthFrames::new(&v, &s, &te(3, 5)).unwrap())
            .read_to_end(&mut bytes)
            .unwrap();
        assert_eq!(bytes, f.to_bytes());
    }

    #[test]
    fn validation_errors() {
        let v = Vocabulary::english();
        let mut s = cat_spec(1.0, 0.0);
        s.spans[1].start = 4;
        assert!(matches!(
            synth(&v, &s, &te(3, 2)),
            Err(SynthError::SpanOverlap { first: 0, second: 1 })
        ));
        let mut s = cat_spec(1.0, 0.0);
        s.total_frames = 7;
        assert!(matches!(synth(&v, &s, &te(3, 2)), Err(SynthError::SpanOutOfRange { index: 2, .. })));
        let mut s = cat_spec(1.0, 0.0);
        s.spans[0].start = 0;
        assert!(matches!(synth(&v, &s, &te(3, 2)), Err(SynthError::SpanOutOfRange { index: 0, .. })));
        assert!(matches!(synth(&v, &cat_spec(0.0, 0.0), &te(3, 2)), Err(SynthError::BadGamma(_))));
        assert!(matches!(synth(&v, &cat_spec(1.0, -1.0), &te(3, 2)), Err(SynthError::BadSigma(_))));
        assert!(matches!(synth(&v, &cat_spec(1.0, 0.0), &te(2, 2)), Err(SynthError::TeCount { .. })));
        let mut s = cat_spec(1.0, 0.0);
        s.spans.pop();
        assert!(matches!(synth(&v, &s, &te(3, 2)), Err(SynthError::SpanCount { .. })));
    }

    #[test]
    fn spec_json_round_trip() {
        let s = cat_spec(0.8, 0.3);
        assert_eq!(AlignmentSpec::from_json(&s.to_json()).unwrap(), s);
        let minimal = r#"{"keyword":"a","spans":[{"start":2,"end":3}],"total_frames":4,"gamma":1.0,"sigma":0.0}"#;
        let m = AlignmentSpec::from_json(minimal).unwrap();
        assert_eq!((m.seed, m.frame_rate_hz), (0, 100.0));
    }
}
