//! Streaming Viterbi CTC aligner.
//!
//! One [`AlignerBank`] tracks, for every state of a keyword's decoding graph,
//! the best path ending in that state at the current frame: its accumulated
//! log-score, the frame each keyword token was entered, and the per-token
//! embedding sums along the path.
//!
//! Per-token accumulators are stored as a persistent list. Each state owns
//! only the accumulator of the token it is currently in (the "head"); the
//! closed accumulators of earlier tokens live in a ref-counted node arena and
//! are shared between states whose best paths agree on them. Inheriting from
//! a source state therefore copies one `D`-vector instead of `U` of them, which
//! keeps a step at `O(U * D)`. The arena is sized once at `U * U` nodes, the
//! maximum number of closed accumulators reachable from all states at once.

use thiserror::Error;

use crate::graph::{DecodingGraph, StateKind};

/// Log-zero sentinel. Finite so that sentinel arithmetic never yields NaN.
pub const LOG_ZERO: f64 = -1e30;

const NIL: u32 = u32::MAX;

#[inline]
fn clamp_log(x: f64) -> f64 {
    // also maps NaN to LOG_ZERO
    if x > LOG_ZERO {
        x
    } else {
        LOG_ZERO
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("{what} has length {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("frame index {actual} does not follow {previous}")]
    NonMonotonicTime { previous: u64, actual: u64 },
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
}

/// One time step of encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// 1-based frame index.
    pub t: u64,
    /// Natural-log scores over the extended vocabulary.
    pub log_posteriors: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Embedding accumulator for one keyword token along a path.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAccumulator {
    pub sum: Vec<f64>,
    pub count: u32,
    pub start_time: Option<u64>,
}

impl TokenAccumulator {
    pub fn empty(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            count: 0,
            start_time: None,
        }
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|x| x / self.count as f64).collect())
    }
}

/// Snapshot of one graph state, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerStateView {
    pub score: f64,
    /// Frame at which the path sat in `pad_start`; 0 when unreachable.
    pub origin: u64,
    pub accumulators: Vec<TokenAccumulator>,
}

/// What the `pad_end` state holds after a step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReadout {
    pub t: u64,
    pub z_ctc: f64,
    pub valid: bool,
    /// Frame at which the winning path entered `pad_start`.
    pub path_start: u64,
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
    start_times: Vec<u64>,
}

impl FrameReadout {
    pub fn new(token_count: usize, dim: usize) -> Self {
        Self {
            t: 0,
            z_ctc: LOG_ZERO,
            valid: false,
            path_start: 0,
            dim,
            sums: vec![0.0; token_count * dim],
            counts: vec![0; token_count],
            start_times: vec![0; token_count],
        }
    }

    pub fn token_count(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_sum(&self, u: usize) -> &[f64] {
        &self.sums[u * self.dim..(u + 1) * self.dim]
    }

    pub fn count(&self, u: usize) -> u32 {
        self.counts[u]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn start_time(&self, u: usize) -> Option<u64> {
        (self.counts[u] > 0).then_some(self.start_times[u])
    }

    pub fn start_times(&self) -> Vec<Option<u64>> {
        (0..self.token_count()).map(|u| self.start_time(u)).collect()
    }

    /// Mean frame embedding absorbed by token `u`.
    pub fn token_mean(&self, u: usize) -> Option<Vec<f64>> {
        let c = self.counts[u];
        (c > 0).then(|| self.token_sum(u).iter().map(|x| x / c as f64).collect())
    }

    pub fn token_means(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.token_count()).map(|u| self.token_mean(u)).collect()
    }

    /// Number of frames on the winning path, padding included.
    pub fn path_len(&self) -> u64 {
        if self.valid {
            self.t + 1 - self.path_start
        } else {
            0
        }
    }

    pub fn accumulators(&self) -> Vec<TokenAccumulator> {
        (0..self.token_count())
            .map(|u| TokenAccumulator {
                sum: self.token_sum(u).to_vec(),
                count: self.counts[u],
                start_time: self.start_time(u),
            })
            .collect()
    }
}

/// Ref-counted store of closed token accumulators. Each node links to the
/// accumulator of the previous token on the same path.
#[derive(Debug, Clone)]
struct NodeArena {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
    starts: Vec<u64>,
    parents: Vec<u32>,
    refs: Vec<u32>,
    free: Vec<u32>,
}

impl NodeArena {
    fn new(capacity: usize, dim: usize) -> Self {
        Self {
            dim,
            sums: vec![0.0; capacity * dim],
            counts: vec![0; capacity],
            starts: vec![0; capacity],
            parents: vec![NIL; capacity],
            refs: vec![0; capacity],
            free: (0..capacity as u32).rev().collect(),
        }
    }

    fn clear(&mut self) {
        self.refs.iter_mut().for_each(|r| *r = 0);
        self.parents.iter_mut().for_each(|p| *p = NIL);
        self.free.clear();
        self.free.extend((0..self.refs.len() as u32).rev());
    }

    fn alloc(&mut self, sum: &[f64], count: u32, start: u64, parent: u32) -> u32 {
        let id = self.free.pop().expect("node arena exhausted; live accumulators exceed U*U");
        let i = id as usize;
        self.sums[i * self.dim..(i + 1) * self.dim].copy_from_slice(sum);
        self.counts[i] = count;
        self.starts[i] = start;
        self.parents[i] = parent;
        self.refs[i] = 1;
        self.retain(parent);
        id
    }

    #[inline]
    fn retain(&mut self, id: u32) {
        if id != NIL {
            self.refs[id as usize] += 1;
        }
    }

    fn release(&mut self, mut id: u32) {
        while id != NIL {
            let i = id as usize;
            self.refs[i] -= 1;
            if self.refs[i] > 0 {
                break;
            }
            self.free.push(id);
            id = self.parents[i];
        }
    }

    fn sum(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.sums[i * self.dim..(i + 1) * self.dim]
    }

    fn live(&self) -> usize {
        self.refs.len() - self.free.len()
    }

    fn footprint_bytes(&self) -> usize {
        use std::mem::size_of;
        self.sums.capacity() * size_of::<f64>()
            + self.counts.capacity() * size_of::<u32>()
            + self.starts.capacity() * size_of::<u64>()
            + self.parents.capacity() * size_of::<u32>()
            + self.refs.capacity() * size_of::<u32>()
            + self.free.capacity() * size_of::<u32>()
    }
}

/// Streaming aligner for one keyword over one audio stream.
#[derive(Debug, Clone)]
pub struct AlignerBank {
    graph: DecodingGraph,
    dim: usize,
    vocab_len: usize,
    current_t: u64,
    tokens: Vec<usize>,
    scores: Vec<f64>,
    origins: Vec<u64>,
    head_sums: Vec<f64>,
    head_counts: Vec<u32>,
    head_starts: Vec<u64>,
    prefixes: Vec<u32>,
    arena: NodeArena,
}

impl AlignerBank {
    /// `vocab_len` is `|V*|`, the expected length of every log-posterior row.
    pub fn new(graph: DecodingGraph, vocab_len: usize, dim: usize) -> Result<Self, AlignError> {
        if dim == 0 {
            return Err(AlignError::ZeroDimension);
        }
        let n = graph.len();
        let u_len = graph.token_count();
        let tokens = graph.states().iter().map(|s| s.token.index()).collect();
        Ok(Self {
            dim,
            vocab_len,
            current_t: 0,
            tokens,
            scores: vec![LOG_ZERO; n],
            origins: vec![0; n],
            head_sums: vec![0.0; n * dim],
            head_counts: vec![0; n],
            head_starts: vec![0; n],
            prefixes: vec![NIL; n],
            arena: NodeArena::new(u_len * u_len, dim),
            graph,
        })
    }

    pub fn graph(&self) -> &DecodingGraph {
        &self.graph
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn token_count(&self) -> usize {
        self.graph.token_count()
    }

    pub fn current_t(&self) -> u64 {
        self.current_t
    }

    /// Score of the `pad_end` state.
    pub fn best_score(&self) -> f64 {
        self.scores[self.graph.pad_end()]
    }

    pub fn reset(&mut self) {
        self.current_t = 0;
        self.scores.iter_mut().for_each(|s| *s = LOG_ZERO);
        self.origins.iter_mut().for_each(|o| *o = 0);
        self.head_sums.iter_mut().for_each(|x| *x = 0.0);
        self.head_counts.iter_mut().for_each(|c| *c = 0);
        self.head_starts.iter_mut().for_each(|s| *s = 0);
        self.prefixes.iter_mut().for_each(|p| *p = NIL);
        self.arena.clear();
    }

    /// Bytes held by the bank's state buffers. Fixed at construction.
    pub fn footprint_bytes(&self) -> usize {
        use std::mem::size_of;
        self.tokens.capacity() * size_of::<usize>()
            + self.scores.capacity() * size_of::<f64>()
            + self.origins.capacity() * size_of::<u64>()
            + self.head_sums.capacity() * size_of::<f64>()
            + self.head_counts.capacity() * size_of::<u32>()
            + self.head_starts.capacity() * size_of::<u64>()
            + self.prefixes.capacity() * size_of::<u32>()
            + self.arena.footprint_bytes()
    }

    /// Closed accumulators currently referenced by some state.
    pub fn live_nodes(&self) -> usize {
        self.arena.live()
    }

    pub fn step(&mut self, frame: &Frame) -> Result<FrameReadout, AlignError> {
        if frame.t != self.current_t + 1 {
            return Err(AlignError::NonMonotonicTime {
                previous: self.current_t,
                actual: frame.t,
            });
        }
        let mut out = FrameReadout::new(self.token_count(), self.dim);
        self.step_into(&frame.log_posteriors, &frame.embedding, &mut out)?;
        Ok(out)
    }

    /// Advances one frame (index `current_t + 1`) and writes the `pad_end`
    /// readout into `out`, reusing its buffers.
    pub fn step_into(&mut self, log_posteriors: &[f64], embedding: &[f64], out: &mut FrameReadout) -> Result<(), AlignError> {
        self.advance(log_posteriors, embedding)?;
        self.readout_into(out);
        Ok(())
    }

    /// Advances one frame without producing a readout.
    pub fn advance(&mut self, log_posteriors: &[f64], embedding: &[f64]) -> Result<(), AlignError> {
        if log_posteriors.len() != self.vocab_len {
            return Err(AlignError::DimensionMismatch {
                what: "log-posterior row",
                expected: self.vocab_len,
                actual: log_posteriors.len(),
            });
        }
        if embedding.len() != self.dim {
            return Err(AlignError::DimensionMismatch {
                what: "embedding",
                expected: self.dim,
                actual: embedding.len(),
            });
        }
        let t = self.current_t + 1;
        let d = self.dim;

        // Right to left: every source of l has index <= l and is still at t-1.
        for l in (1..self.graph.len()).rev() {
            let sources = self.graph.allowed_sources(l);
            let mut best = sources[0];
            for &s in &sources[1..] {
                if self.scores[s] > self.scores[best] {
                    best = s;
                }
            }
            let prev = self.scores[best];
            let score = if prev > LOG_ZERO {
                clamp_log(prev + log_posteriors[self.tokens[l]])
            } else {
                LOG_ZERO
            };
            if score == LOG_ZERO {
                self.clear_state(l);
                continue;
            }

            match self.graph.state(l).kind {
                StateKind::NonBlank => {
                    if best == l {
                        self.absorb(l, embedding);
                    } else {
                        let closed = if best == self.graph.pad_start() {
                            NIL
                        } else {
                            self.arena.alloc(
                                &self.head_sums[best * d..(best + 1) * d],
                                self.head_counts[best],
                                self.head_starts[best],
                                self.prefixes[best],
                            )
                        };
                        self.arena.release(self.prefixes[l]);
                        self.prefixes[l] = closed;
                        self.head_sums[l * d..(l + 1) * d].copy_from_slice(embedding);
                        self.head_counts[l] = 1;
                        self.head_starts[l] = t;
                    }
                }
                StateKind::Blank => {
                    if best != l {
                        self.inherit(l, best);
                    }
                    self.absorb(l, embedding);
                }
                StateKind::PadEnd => {
                    if best != l {
                        self.inherit(l, best);
                    }
                }
                StateKind::PadStart => unreachable!("pad_start has no sources"),
            }
            self.scores[l] = score;
            self.origins[l] = self.origins[best];
        }

        let ps = self.graph.pad_start();
        self.scores[ps] = clamp_log(log_posteriors[self.tokens[ps]]);
        self.origins[ps] = if self.scores[ps] > LOG_ZERO { t } else { 0 };
        self.current_t = t;
        Ok(())
    }

    /// Writes the current `pad_end` state into `out`.
    pub fn readout_into(&self, out: &mut FrameReadout) {
        let u_len = self.token_count();
        if out.counts.len() != u_len || out.dim != self.dim {
            *out = FrameReadout::new(u_len, self.dim);
        }
        let pe = self.graph.pad_end();
        out.t = self.current_t;
        out.z_ctc = self.scores[pe];
        out.valid = self.scores[pe] > LOG_ZERO;
        if !out.valid {
            out.path_start = 0;
            out.sums.iter_mut().for_each(|x| *x = 0.0);
            out.counts.iter_mut().for_each(|c| *c = 0);
            out.start_times.iter_mut().for_each(|s| *s = 0);
            return;
        }
        out.path_start = self.origins[pe];
        self.write_chain(pe, u_len, &mut out.sums, &mut out.counts, &mut out.start_times);
    }

    pub fn readout(&self) -> FrameReadout {
        let mut out = FrameReadout::new(self.token_count(), self.dim);
        self.readout_into(&mut out);
        out
    }

    pub fn state_view(&self, l: usize) -> AlignerStateView {
        let u_len = self.token_count();
        let d = self.dim;
        let mut sums = vec![0.0; u_len * d];
        let mut counts = vec![0; u_len];
        let mut starts = vec![0; u_len];
        if self.scores[l] > LOG_ZERO {
            if let Some(owner) = self.graph.state(l).owner {
                self.write_chain(l, owner + 1, &mut sums, &mut counts, &mut starts);
            }
        }
        AlignerStateView {
            score: self.scores[l],
            origin: self.origins[l],
            accumulators: (0..u_len)
                .map(|u| TokenAccumulator {
                    sum: sums[u * d..(u + 1) * d].to_vec(),
                    count: counts[u],
                    start_time: (counts[u] > 0).then_some(starts[u]),
                })
                .collect(),
        }
    }

    /// Fills token slots `0..upto` from state `l`'s head (token `upto - 1`)
    /// and its chain of closed accumulators.
    fn write_chain(&self, l: usize, upto: usize, sums: &mut [f64], counts: &mut [u32], starts: &mut [u64]) {
        let d = self.dim;
        let last = upto - 1;
        sums[last * d..upto * d].copy_from_slice(&self.head_sums[l * d..(l + 1) * d]);
        counts[last] = self.head_counts[l];
        starts[last] = self.head_starts[l];
        let mut node = self.prefixes[l];
        for u in (0..last).rev() {
            debug_assert_ne!(node, NIL, "accumulator chain shorter than token index");
            let i = node as usize;
            sums[u * d..(u + 1) * d].copy_from_slice(self.arena.sum(node));
            counts[u] = self.arena.counts[i];
            starts[u] = self.arena.starts[i];
            node = self.arena.parents[i];
        }
        for u in upto..counts.len() {
            sums[u * d..(u + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            counts[u] = 0;
            starts[u] = 0;
        }
    }

    #[inline]
    fn absorb(&mut self, l: usize, embedding: &[f64]) {
        let d = self.dim;
        for (acc, x) in self.head_sums[l * d..(l + 1) * d].iter_mut().zip(embedding) {
            *acc += x;
        }
        self.head_counts[l] += 1;
    }

    /// Takes over `src`'s path history; `src` keeps its own copy.
    fn inherit(&mut self, l: usize, src: usize) {
        let d = self.dim;
        self.arena.retain(self.prefixes[src]);
        self.arena.release(self.prefixes[l]);
        self.prefixes[l] = self.prefixes[src];
        self.head_sums.copy_within(src * d..(src + 1) * d, l * d);
        self.head_counts[l] = self.head_counts[src];
        self.head_starts[l] = self.head_starts[src];
    }

    fn clear_state(&mut self, l: usize) {
        self.scores[l] = LOG_ZERO;
        self.origins[l] = 0;
        if self.head_counts[l] != 0 || self.prefixes[l] != NIL {
            let d = self.dim;
            self.arena.release(self.prefixes[l]);
            self.prefixes[l] = NIL;
            self.head_sums[l * d..(l + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            self.head_counts[l] = 0;
            self.head_starts[l] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    fn bank(text: &str, dim: usize) -> (Vocabulary, AlignerBank) {
        let v = Vocabulary::english();
        let g = DecodingGraph::build(&v.tokenize(text).unwrap(), &v);
        let b = AlignerBank::new(g, v.total_len(), dim).unwrap();
        (v, b)
    }

    /// Log-posterior row with probability `p` on `token`, rest spread evenly.
    fn peaked(v: &Vocabulary, token: usize, p: f64) -> Vec<f64> {
        let n = v.total_len();
        let rest = ((1.0 - p) / (n - 1) as f64).ln();
        (0..n).map(|k| if k == token { p.ln() } else { rest }).collect()
    }

    #[test]
    fn init_shapes() {
        let (_, b) = bank("cat", 4);
        assert_eq!(b.graph().len(), 7);
        for l in 0..7 {
            let s = b.state_view(l);
            assert_eq!(s.accumulators.len(), 3);
            assert!(s.accumulators.iter().all(|a| a.count == 0 && a.start_time.is_none()));
            assert_eq!(s.score, LOG_ZERO);
        }
        assert_eq!(b.best_score(), LOG_ZERO);

        let (_, b) = bank("a", 1);
        assert_eq!(b.graph().len(), 3);
        assert_eq!(b.state_view(1).accumulators.len(), 1);
        assert_eq!(b.best_score(), LOG_ZERO);
    }

    #[test]
    fn zero_dim_rejected() {
        let v = Vocabulary::english();
        let g = DecodingGraph::build(&v.tokenize("a").unwrap(), &v);
        assert_eq!(AlignerBank::new(g, 30, 0).unwrap_err(), AlignError::ZeroDimension);
    }

    #[test]
    fn single_frame_cannot_reach_pad_end() {
        let (v, mut b) = bank("a", 2);
        let a = v.id_of('a').unwrap().index();
        let r = b
            .step(&Frame {
                t: 1,
                log_posteriors: peaked(&v, a, 0.9),
                embedding: vec![1.0, 0.0],
            })
            .unwrap();
        assert!(!r.valid);
        assert_eq!(r.z_ctc, LOG_ZERO);
    }

    #[test]
    fn three_frame_single_token() {
        let (v, mut b) = bank("a", 2);
        let p = 0.7;
        let pad = v.padding_id().index();
        let a = v.id_of('a').unwrap().index();
        let frames = [(pad, [1.0, 2.0]), (a, [3.0, -1.0]), (pad, [5.0, 5.0])];
        let mut last = None;
        for (i, (tok, emb)) in frames.iter().enumerate() {
            last = Some(
                b.step(&Frame {
                    t: i as u64 + 1,
                    log_posteriors: peaked(&v, *tok, p),
                    embedding: emb.to_vec(),
                })
                .unwrap(),
            );
            if i < 2 {
                assert!(!last.as_ref().unwrap().valid);
            }
        }
        let r = last.unwrap();
        assert!(r.valid);
        assert!((r.z_ctc - 3.0 * p.ln()).abs() < 1e-12);
        assert_eq!(r.token_mean(0).unwrap(), vec![3.0, -1.0]);
        assert_eq!(r.start_time(0), Some(2));
        assert_eq!(r.path_start, 1);
        assert_eq!(r.path_len(), 3);
    }

    #[test]
    fn rejects_bad_frames() {
        let (v, mut b) = bank("ab", 3);
        let row = peaked(&v, 0, 0.5);
        assert!(matches!(
            b.step(&Frame {
                t: 2,
                log_posteriors: row.clone(),
                embedding: vec![0.0; 3]
            }),
            Err(AlignError::NonMonotonicTime { previous: 0, actual: 2 })
        ));
        assert!(matches!(
            b.step(&Frame {
                t: 1,
                log_posteriors: row[..5].to_vec(),
                embedding: vec![0.0; 3]
            }),
            Err(AlignError::DimensionMismatch {
                expected: 30,
                actual: 5,
                ..
            })
        ));
        assert!(matches!(
            b.step(&Frame {
                t: 1,
                log_posteriors: row,
                embedding: vec![0.0; 2]
            }),
            Err(AlignError::DimensionMismatch {
                expected: 3,
                actual: 2,
                ..
            })
        ));
        assert_eq!(b.current_t(), 0);
    }

    #[test]
    fn reset_restores_fresh_state() {
        let (v, mut b) = bank("cab", 2);
        let fresh = b.clone();
        let rows: Vec<_> = [29, 2, 0, 28, 1, 29, 29].iter().map(|&k| peaked(&v, k, 0.6)).collect();
        let run = |b: &mut AlignerBank| {
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    b.step(&Frame {
                        t: i as u64 + 1,
                        log_posteriors: r.clone(),
                        embedding: vec![i as f64, 1.0],
                    })
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        let first = run(&mut b);
        assert!(first.last().unwrap().valid);
        b.reset();
        assert_eq!(b.best_score(), LOG_ZERO);
        assert_eq!(b.live_nodes(), 0);
        for l in 0..b.graph().len() {
            assert_eq!(b.state_view(l), fresh.state_view(l));
        }
        assert_eq!(run(&mut b), first);
    }

    #[test]
    fn negative_infinity_posteriors_are_unreachable() {
        let (v, mut b) = bank("a", 1);
        let mut row = vec![f64::NEG_INFINITY; v.total_len()];
        row[v.padding_id().index()] = 0.0;
        let r = b
            .step(&Frame {
                t: 1,
                log_posteriors: row.clone(),
                embedding: vec![1.0],
            })
            .unwrap();
        assert!(!r.valid);
        let r = b
            .step(&Frame {
                t: 2,
                log_posteriors: row,
                embedding: vec![1.0],
            })
            .unwrap();
        assert!(!r.valid);
        assert!(r.z_ctc == LOG_ZERO);
        assert!(b.state_view(1).score == LOG_ZERO);
    }

    #[test]
    fn footprint_fixed_across_steps() {
        let (v, mut b) = bank("hello", 4);
        let before = b.footprint_bytes();
        for t in 1..200u64 {
            let row = peaked(&v, (t % 30) as usize, 0.5);
            b.step(&Frame {
                t,
                log_posteriors: row,
                embedding: vec![t as f64; 4],
            })
            .unwrap();
            assert!(b.live_nodes() <= 25);
        }
        assert_eq!(b.footprint_bytes(), before);
    }
}
