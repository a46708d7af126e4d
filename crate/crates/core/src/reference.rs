//! Reference numerics and exhaustive oracles.
//!
//! Everything here favours obviously-correct over fast. The enumerators cap
//! their instance size and refuse larger inputs.

use thiserror::Error;

use crate::aligner::LOG_ZERO;
use crate::graph::{DecodingGraph, StateKind};
use crate::scoring::cosine;

/// Largest `T` accepted by [`brute_force_best_path`].
pub const ORACLE_MAX_FRAMES: usize = 10;
/// Largest graph accepted by [`brute_force_best_path`].
pub const ORACLE_MAX_STATES: usize = 9;
/// Largest number of paths `|V'|^T` that [`ctc_label_logprob_enumerated`] will walk.
pub const ENUMERATION_MAX_PATHS: u64 = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("label is empty")]
    EmptyLabel,
    #[error("label token {0} is the blank or outside the posterior row")]
    BadLabelToken(usize),
    #[error("posterior rows have inconsistent lengths")]
    RaggedPosteriors,
    #[error("blank index {0} outside the posterior row")]
    BadBlank(usize),
    #[error("instance too large for exhaustive enumeration: {0}")]
    InstanceTooLarge(String),
    #[error("{what} has length {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    /// With fewer than two tuples no anchor has a positive or a negative.
    #[error("batch has {0} tuples; at least 2 are required")]
    BatchTooSmall(usize),
}

fn check_rows(log_posteriors: &[Vec<f64>]) -> Result<usize, KernelError> {
    let width = log_posteriors.first().map_or(0, Vec::len);
    if log_posteriors.iter().any(|r| r.len() != width) {
        return Err(KernelError::RaggedPosteriors);
    }
    Ok(width)
}

fn logsumexp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// A single frame-level path and its log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PathScore {
    pub path: Vec<usize>,
    pub log_prob: f64,
}

/// `ln p(pi | X)`: sum of the per-frame log-posteriors along `path`.
pub fn path_logprob(log_posteriors: &[Vec<f64>], path: &[usize]) -> PathScore {
    let log_prob = path.iter().zip(log_posteriors).map(|(&k, row)| row[k]).sum();
    PathScore {
        path: path.to_vec(),
        log_prob,
    }
}

/// The collapse map: merge repeated tokens, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn check_label(label: &[usize], blank: usize, width: usize) -> Result<(), KernelError> {
    if label.is_empty() {
        return Err(KernelError::EmptyLabel);
    }
    if blank >= width {
        return Err(KernelError::BadBlank(blank));
    }
    if let Some(&k) = label.iter().find(|&&k| k == blank || k >= width) {
        return Err(KernelError::BadLabelToken(k));
    }
    Ok(())
}

/// `ln p(l | X)` by the CTC forward recursion over the blank-interleaved label.
///
/// `log_posteriors` is `T x |V'|`. Returns `-inf` when no path can emit the
/// label in `T` frames; the CTC loss is the negation.
pub fn ctc_label_logprob(log_posteriors: &[Vec<f64>], label: &[usize], blank: usize) -> Result<f64, KernelError> {
    let width = check_rows(log_posteriors)?;
    if log_posteriors.is_empty() {
        check_label(label, blank, usize::MAX)?;
        return Ok(f64::NEG_INFINITY);
    }
    check_label(label, blank, width)?;

    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &k in label {
        ext.push(k);
        ext.push(blank);
    }
    let s_len = ext.len();

    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = log_posteriors[0][ext[0]];
    alpha[1] = log_posteriors[0][ext[1]];
    let mut next = vec![f64::NEG_INFINITY; s_len];
    for row in &log_posteriors[1..] {
        for s in 0..s_len {
            let mut a = alpha[s];
            if s >= 1 {
                a = log_add(a, alpha[s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                a = log_add(a, alpha[s - 2]);
            }
            next[s] = a + row[ext[s]];
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    Ok(log_add(alpha[s_len - 1], alpha[s_len - 2]))
}

/// `ln p(l | X)` by literally summing `p(pi | X)` over every `pi` in `V'^T`
/// whose collapse equals `l`.
pub fn ctc_label_logprob_enumerated(log_posteriors: &[Vec<f64>], label: &[usize], blank: usize) -> Result<f64, KernelError> {
    let width = check_rows(log_posteriors)?;
    let t_len = log_posteriors.len();
    if t_len == 0 {
        check_label(label, blank, usize::MAX)?;
        return Ok(f64::NEG_INFINITY);
    }
    check_label(label, blank, width)?;
    let total = (width as u64).checked_pow(t_len as u32).filter(|&n| n <= ENUMERATION_MAX_PATHS);
    let Some(total) = total else {
        return Err(KernelError::InstanceTooLarge(format!("{width}^{t_len} paths")));
    };

    let mut path = vec![0usize; t_len];
    let mut acc = f64::NEG_INFINITY;
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = (c % width as u64) as usize;
            c /= width as u64;
        }
        if collapse(&path, blank) == label {
            acc = log_add(acc, path_logprob(log_posteriors, &path).log_prob);
        }
    }
    Ok(acc)
}

/// Result of exhaustively searching the decoding graph.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReadout {
    pub end_t: u64,
    pub valid: bool,
    pub score: f64,
    /// Frame at which the best path sat in `pad_start`.
    pub path_start: u64,
    /// State index per frame, `path_start..=end_t`.
    pub path: Vec<usize>,
    pub start_times: Vec<Option<u64>>,
    pub counts: Vec<u32>,
    pub token_means: Vec<Option<Vec<f64>>>,
    /// Gap between the best and second-best legal path scores.
    pub margin: f64,
}

impl OracleReadout {
    /// True when no other legal path comes within `1e-9` of the best.
    pub fn unique(&self) -> bool {
        self.margin > 1e-9
    }
}

/// Best legal state sequence that starts in `pad_start` at some frame and sits
/// in `pad_end` at `end_t` (1-based), found by enumerating every such sequence.
pub fn brute_force_best_path(
    log_posteriors: &[Vec<f64>],
    frame_embeddings: &[Vec<f64>],
    graph: &DecodingGraph,
    end_t: u64,
) -> Result<OracleReadout, KernelError> {
    let t_len = log_posteriors.len();
    if t_len > ORACLE_MAX_FRAMES || graph.len() > ORACLE_MAX_STATES {
        return Err(KernelError::InstanceTooLarge(format!(
            "T = {t_len}, {} states (limits {ORACLE_MAX_FRAMES}, {ORACLE_MAX_STATES})",
            graph.len()
        )));
    }
    if frame_embeddings.len() != t_len {
        return Err(KernelError::DimensionMismatch {
            what: "embedding rows",
            expected: t_len,
            actual: frame_embeddings.len(),
        });
    }
    check_rows(log_posteriors)?;
    let end = end_t as usize;
    let u_len = graph.token_count();
    let dim = frame_embeddings.first().map_or(0, Vec::len);

    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    let mut second = f64::NEG_INFINITY;

    if (1..=t_len).contains(&end) {
        // path[i] is the state at frame t0 + i
        let mut path = Vec::with_capacity(end);
        for t0 in 1..=end {
            path.clear();
            path.push(graph.pad_start());
            let s0 = log_posteriors[t0 - 1][graph.state(graph.pad_start()).token.index()];
            enumerate(graph, log_posteriors, t0, end, s0, &mut path, &mut |score, p| match &best {
                Some((b, _, _)) if score <= *b => second = second.max(score),
                _ => {
                    if let Some((b, _, _)) = &best {
                        second = second.max(*b);
                    }
                    best = Some((score, p.to_vec(), t0));
                }
            });
        }
    }

    let Some((score, path, t0)) = best.filter(|(s, _, _)| *s > LOG_ZERO) else {
        return Ok(OracleReadout {
            end_t,
            valid: false,
            score: LOG_ZERO,
            path_start: 0,
            path: Vec::new(),
            start_times: vec![None; u_len],
            counts: vec![0; u_len],
            token_means: vec![None; u_len],
            margin: f64::INFINITY,
        });
    };

    let mut start_times = vec![None; u_len];
    let mut counts = vec![0u32; u_len];
    let mut sums = vec![vec![0.0; dim]; u_len];
    for (i, &l) in path.iter().enumerate() {
        let t = t0 + i;
        let st = graph.state(l);
        let owner = match st.kind {
            StateKind::NonBlank | StateKind::Blank => st.owner.unwrap(),
            StateKind::PadStart | StateKind::PadEnd => continue,
        };
        if st.kind == StateKind::NonBlank && start_times[owner].is_none() {
            start_times[owner] = Some(t as u64);
        }
        counts[owner] += 1;
        for (a, x) in sums[owner].iter_mut().zip(&frame_embeddings[t - 1]) {
            *a += x;
        }
    }
    let token_means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|x| x / c as f64).collect()))
        .collect();

    Ok(OracleReadout {
        end_t,
        valid: true,
        score,
        path_start: t0 as u64,
        path,
        start_times,
        counts,
        token_means,
        margin: score - second,
    })
}

fn enumerate(
    graph: &DecodingGraph,
    log_posteriors: &[Vec<f64>],
    t: usize,
    end: usize,
    score: f64,
    path: &mut Vec<usize>,
    visit: &mut dyn FnMut(f64, &[usize]),
) {
    let here = *path.last().unwrap();
    if t == end {
        if here == graph.pad_end() {
            visit(score, path);
        }
        return;
    }
    for next in 0..graph.len() {
        if !graph.allowed_sources(next).contains(&here) {
            continue;
        }
        let tok = graph.state(next).token.index();
        path.push(next);
        enumerate(graph, log_posteriors, t + 1, end, score + log_posteriors[t][tok], path, visit);
        path.pop();
    }
}

/// Frame (1-based) with the highest score; ties go to the earliest frame.
pub fn find_best_end_frame(per_frame_scores: &[f64]) -> Option<u64> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in per_frame_scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i as u64 + 1)
}

/// One speech/text pair in a metric-learning batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchTuple {
    pub ae: Vec<f64>,
    pub te: Vec<f64>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    tuples: Vec<MiniBatchTuple>,
}

impl MiniBatch {
    pub fn new(tuples: Vec<MiniBatchTuple>) -> Result<Self, KernelError> {
        if tuples.len() < 2 {
            return Err(KernelError::BatchTooSmall(tuples.len()));
        }
        let dim = tuples[0].ae.len();
        for t in &tuples {
            for (what, v) in [("ae", &t.ae), ("te", &t.te)] {
                if v.len() != dim {
                    return Err(KernelError::DimensionMismatch {
                        what,
                        expected: dim,
                        actual: v.len(),
                    });
                }
            }
        }
        Ok(Self { tuples })
    }

    pub fn tuples(&self) -> &[MiniBatchTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Hyper-parameters of the asymmetric-proxy multi-view loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiViewParams {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for MultiViewParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            margin: 0.1,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Extended log-sum-exp: `ln(1 + sum_j exp(g_j))`; zero for an empty set.
pub fn extended_logsumexp(g: &[f64]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    logsumexp(std::iter::once(0.0).chain(g.iter().copied()))
}

/// Mean softplus: `(1/n) sum_k ln(1 + exp(g_k))`; zero for an empty set.
pub fn mean_softplus(g: &[f64]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.iter().map(|&x| softplus(x)).sum::<f64>() / g.len() as f64
}

/// Anchor-positive plus anchor-negative loss averaged over the batch.
///
/// Positives of anchor `i` are the other tuples with the same label; the
/// positive term compares text `t_i` against speech `a_j`, the negative term
/// compares speech `a_i` against text `t_k`.
pub fn multi_view_loss(batch: &MiniBatch, params: MultiViewParams) -> f64 {
    let tuples = batch.tuples();
    let n = tuples.len();
    let sim = |a: &[f64], b: &[f64]| cosine(a, b).unwrap_or(0.0);
    let mut total = 0.0;
    for (i, anchor) in tuples.iter().enumerate() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (j, other) in tuples.iter().enumerate() {
            if j == i {
                continue;
            }
            if other.label == anchor.label {
                pos.push(params.alpha * (params.margin - sim(&anchor.te, &other.ae)));
            } else {
                neg.push(params.beta * (sim(&anchor.ae, &other.te) - params.margin));
            }
        }
        total += extended_logsumexp(&pos) / params.alpha + mean_softplus(&neg);
    }
    total / n as f64
}

/// Total training objective: CTC loss plus multi-view loss.
pub fn training_objective(ctc_loss: f64, multi_view: f64) -> f64 {
    ctc_loss + multi_view
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    #[test]
    fn ctc_single_frame() {
        let lp = vec![vec![0.6f64.ln(), 0.4f64.ln()]];
        let got = ctc_label_logprob(&lp, &[0], 1).unwrap();
        assert!((got - 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_by_hand() {
        let (p1a, p1b) = (0.3f64, 0.7f64);
        let (p2a, p2b) = (0.8f64, 0.2f64);
        let lp = vec![vec![p1a.ln(), p1b.ln()], vec![p2a.ln(), p2b.ln()]];
        let expected = (p1a * p2a + p1a * p2b + p1b * p2a).ln();
        let got = ctc_label_logprob(&lp, &[0], 1).unwrap();
        let enumerated = ctc_label_logprob_enumerated(&lp, &[0], 1).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((enumerated - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_label_too_long() {
        let lp = vec![vec![0.5f64.ln(); 3]; 2];
        // "aa" needs a - a: three frames
        assert_eq!(ctc_label_logprob(&lp, &[0, 0], 2).unwrap(), f64::NEG_INFINITY);
        assert_eq!(ctc_label_logprob_enumerated(&lp, &[0, 0], 2).unwrap(), f64::NEG_INFINITY);
        assert!(ctc_label_logprob(&lp, &[0, 1], 2).unwrap().is_finite());
    }

    #[test]
    fn ctc_errors() {
        let lp = vec![vec![0.0; 3]];
        assert_eq!(ctc_label_logprob(&lp, &[], 2), Err(KernelError::EmptyLabel));
        assert_eq!(ctc_label_logprob(&lp, &[2], 2), Err(KernelError::BadLabelToken(2)));
        assert_eq!(ctc_label_logprob(&lp, &[5], 2), Err(KernelError::BadLabelToken(5)));
        let ragged = vec![vec![0.0; 3], vec![0.0; 2]];
        assert_eq!(ctc_label_logprob(&ragged, &[0], 2), Err(KernelError::RaggedPosteriors));
        let big = vec![vec![0.0; 30]; 10];
        assert!(matches!(
            ctc_label_logprob_enumerated(&big, &[0], 29),
            Err(KernelError::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn collapse_map() {
        assert_eq!(collapse(&[0, 0, 2, 0, 1, 1, 2], 2), vec![0, 0, 1]);
        assert_eq!(collapse(&[2, 2], 2), Vec::<usize>::new());
    }

    fn small_graph(text: &str) -> (Vocabulary, DecodingGraph) {
        let v = Vocabulary::new("abc".chars()).unwrap();
        let g = DecodingGraph::build(&v.tokenize(text).unwrap(), &v);
        (v, g)
    }

    #[test]
    fn oracle_single_token_three_frames() {
        let (v, g) = small_graph("a");
        let p: f64 = 0.8;
        let rest = ((1.0 - p) / 4.0).ln();
        let row = |k: usize| (0..5).map(|i| if i == k { p.ln() } else { rest }).collect::<Vec<_>>();
        let pad = v.padding_id().index();
        let lp = vec![row(pad), row(0), row(pad)];
        let emb = vec![vec![1.0, 1.0], vec![2.0, -3.0], vec![9.0, 9.0]];
        let r = brute_force_best_path(&lp, &emb, &g, 3).unwrap();
        assert!(r.valid);
        assert!((r.score - 3.0 * p.ln()).abs() < 1e-12);
        assert_eq!(r.path, vec![0, 1, 2]);
        assert_eq!(r.start_times, vec![Some(2)]);
        assert_eq!(r.token_means, vec![Some(vec![2.0, -3.0])]);
        // single feasible path
        assert_eq!(r.margin, f64::INFINITY);

        let early = brute_force_best_path(&lp, &emb, &g, 2).unwrap();
        assert!(!early.valid);
        assert_eq!(early.score, LOG_ZERO);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let (_, g) = small_graph("abcab");
        let lp = vec![vec![0.0; 5]; 3];
        let emb = vec![vec![0.0]; 3];
        assert!(matches!(
            brute_force_best_path(&lp, &emb, &g, 3),
            Err(KernelError::InstanceTooLarge(_))
        ));
        let (_, g) = small_graph("a");
        let lp = vec![vec![0.0; 5]; 11];
        let emb = vec![vec![0.0]; 11];
        assert!(matches!(
            brute_force_best_path(&lp, &emb, &g, 5),
            Err(KernelError::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn best_end_frame() {
        assert_eq!(find_best_end_frame(&[-5.0, -2.0, -3.0]), Some(2));
        assert_eq!(find_best_end_frame(&[-1.0, -1.0, -1.0]), Some(1));
        assert_eq!(find_best_end_frame(&[]), None);
    }

    fn tuple(ae: &[f64], te: &[f64], label: u32) -> MiniBatchTuple {
        MiniBatchTuple {
            ae: ae.to_vec(),
            te: te.to_vec(),
            label,
        }
    }

    #[test]
    fn multi_view_positive_only() {
        let e = [1.0, 0.0];
        let batch = MiniBatch::new(vec![tuple(&e, &e, 7), tuple(&e, &e, 7)]).unwrap();
        let loss = multi_view_loss(&batch, MultiViewParams::default());
        // (1/2) ln(1 + e^{2 (0.1 - 1)})
        let expected = 0.5 * (1.0 + (-1.8f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.076_489).abs() < 1e-5);
    }

    #[test]
    fn multi_view_negative_only() {
        let batch = MiniBatch::new(vec![tuple(&[1.0, 0.0], &[1.0, 0.0], 1), tuple(&[0.0, 1.0], &[0.0, 1.0], 2)]).unwrap();
        let loss = multi_view_loss(&batch, MultiViewParams::default());
        let expected = (1.0 + (-5.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.00671).abs() < 1e-5);
    }

    #[test]
    fn batch_validation() {
        assert_eq!(MiniBatch::new(vec![tuple(&[1.0], &[1.0], 0)]), Err(KernelError::BatchTooSmall(1)));
        assert!(matches!(
            MiniBatch::new(vec![tuple(&[1.0], &[1.0], 0), tuple(&[1.0, 2.0], &[1.0], 0)]),
            Err(KernelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn objective_sums() {
        assert_eq!(training_objective(1.0, 0.5), 1.5);
        assert_eq!(training_objective(0.0, 0.0), 0.0);
        let lp = vec![vec![0.6f64.ln(), 0.4f64.ln()]];
        let ctc = -ctc_label_logprob(&lp, &[0], 1).unwrap();
        let e = [1.0, 0.0];
        let mv = multi_view_loss(
            &MiniBatch::new(vec![tuple(&e, &e, 0), tuple(&e, &e, 0)]).unwrap(),
            MultiViewParams::default(),
        );
        let expected = -(0.6f64.ln()) + 0.5 * (1.0 + (-1.8f64).exp()).ln();
        assert!((training_objective(ctc, mv) - expected).abs() < 1e-12);
    }

    #[test]
    fn extended_logsumexp_and_softplus_are_stable() {
        assert_eq!(extended_logsumexp(&[]), 0.0);
        assert!((extended_logsumexp(&[800.0]) - 800.0).abs() < 1e-9);
        assert!((mean_softplus(&[1000.0, -1000.0]) - 500.0).abs() < 1e-9);
        assert_eq!(mean_softplus(&[]), 0.0);
    }
}
