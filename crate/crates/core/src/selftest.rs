//! Randomized equivalence checks of the streaming engine against the
//! exhaustive reference kernels.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aligner::{AlignerBank, FrameReadout};
use crate::graph::DecodingGraph;
use crate::reference::{brute_force_best_path, ctc_label_logprob, ctc_label_logprob_enumerated};
use crate::vocab::{KeywordTokens, TokenId, Vocabulary};

pub const SCORE_TOLERANCE: f64 = 1e-9;
pub const MEAN_TOLERANCE: f64 = 1e-7;

/// Random small aligner instance.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub vocab: Vocabulary,
    pub keyword: KeywordTokens,
    pub log_posteriors: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Row-normalized log-softmax of Gaussian logits with a random temperature.
fn random_log_rows<R: Rng>(rng: &mut R, t_len: usize, width: usize) -> Vec<Vec<f64>> {
    (0..t_len)
        .map(|_| {
            let scale = rng.random_range(0.5..4.0);
            let logits: Vec<f64> = (0..width).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            logits.iter().map(|x| x - lse).collect()
        })
        .collect()
}

impl OracleInstance {
    /// `T <= 8`, `U <= 3`, `V* <= 5`, `D <= 4`.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let base = rng.random_range(1..=3usize);
        let vocab = Vocabulary::new("abc".chars().take(base)).expect("valid inventory");
        let u_len = rng.random_range(1..=3usize);
        let ids: Vec<TokenId> = (0..u_len).map(|_| TokenId(rng.random_range(0..base) as u16)).collect();
        let keyword = KeywordTokens::from_ids(&vocab, ids).expect("base tokens");
        let t_len = rng.random_range(1..=8usize);
        let dim = rng.random_range(1..=4usize);
        let log_posteriors = random_log_rows(rng, t_len, vocab.total_len());
        let embeddings = (0..t_len).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        Self {
            vocab,
            keyword,
            log_posteriors,
            embeddings,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub frames: usize,
    pub valid_frames: usize,
    pub unique_frames: usize,
    pub max_score_error: f64,
    pub max_mean_error: f64,
    pub failures: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instances, {} frames ({} valid, {} unique): max |dz| = {:.3e}, max |dmean| = {:.3e}, {} failures",
            self.instances,
            self.frames,
            self.valid_frames,
            self.unique_frames,
            self.max_score_error,
            self.max_mean_error,
            self.failures.len()
        )
    }
}

/// Compares every per-frame readout of one instance with the oracle.
pub fn check_instance(inst: &OracleInstance, report: &mut OracleReport, label: &str) {
    let graph = DecodingGraph::build(&inst.keyword, &inst.vocab);
    let dim = inst.embeddings[0].len();
    let mut bank = AlignerBank::new(graph.clone(), inst.vocab.total_len(), dim).expect("positive dimension");
    let mut readout = FrameReadout::new(inst.keyword.len(), dim);
    report.instances += 1;
    for (i, (lp, emb)) in inst.log_posteriors.iter().zip(&inst.embeddings).enumerate() {
        let t = i as u64 + 1;
        bank.step_into(lp, emb, &mut readout).expect("well-formed frame");
        let oracle = brute_force_best_path(&inst.log_posteriors, &inst.embeddings, &graph, t).expect("instance within limits");
        report.frames += 1;
        let mut fail = |what: String| report.failures.push(format!("{label} t={t}: {what}"));
        if oracle.valid != readout.valid {
            fail(format!("valid {} vs oracle {}", readout.valid, oracle.valid));
            continue;
        }
        if !oracle.valid {
            continue;
        }
        report.valid_frames += 1;
        let dz = (readout.z_ctc - oracle.score).abs();
        report.max_score_error = report.max_score_error.max(dz);
        if dz > SCORE_TOLERANCE {
            fail(format!("z_ctc {} vs oracle {}", readout.z_ctc, oracle.score));
        }
        let unique = oracle.unique();
        for u in 0..inst.keyword.len() {
            match (readout.token_mean(u), &oracle.token_means[u]) {
                (Some(a), Some(b)) => {
                    let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    report.max_mean_error = report.max_mean_error.max(err);
                    if err > MEAN_TOLERANCE {
                        fail(format!("token {u} mean differs by {err:.3e}"));
                    }
                }
                (a, b) => fail(format!("token {u} mean presence {} vs oracle {}", a.is_some(), b.is_some())),
            }
        }
        if unique {
            report.unique_frames += 1;
            if readout.start_times() != oracle.start_times {
                fail(format!(
                    "start times {:?} vs oracle {:?}",
                    readout.start_times(),
                    oracle.start_times
                ));
            }
            if readout.counts() != oracle.counts.as_slice() {
                fail(format!("counts {:?} vs oracle {:?}", readout.counts(), oracle.counts));
            }
            if readout.path_start != oracle.path_start {
                fail(format!("path start {} vs oracle {}", readout.path_start, oracle.path_start));
            }
        }
    }
}

/// Runs `instances` random aligner instances against the brute-force oracle.
pub fn run_aligner_suite(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport::default();
    for i in 0..instances {
        let inst = OracleInstance::random(&mut rng);
        check_instance(&inst, &mut report, &format!("instance {i} ({:?})", inst.keyword.text()));
    }
    report
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CtcReport {
    pub instances: usize,
    pub finite: usize,
    pub max_error: f64,
    pub failures: Vec<String>,
}

impl CtcReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for CtcReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instances ({} feasible): max |d ln p| = {:.3e}, {} failures",
            self.instances,
            self.finite,
            self.max_error,
            self.failures.len()
        )
    }
}

/// Runs the forward recursion against literal path enumeration.
pub fn run_ctc_suite(instances: usize, seed: u64) -> CtcReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CtcReport::default();
    for i in 0..instances {
        let width = rng.random_range(2..=4usize);
        let t_len = rng.random_range(1..=7usize);
        let blank = rng.random_range(0..width);
        let label_len = rng.random_range(1..=3usize);
        let label: Vec<usize> = (0..label_len)
            .map(|_| {
                let k = rng.random_range(0..width - 1);
                if k >= blank {
                    k + 1
                } else {
                    k
                }
            })
            .collect();
        let lp = random_log_rows(&mut rng, t_len, width);
        let fwd = ctc_label_logprob(&lp, &label, blank).expect("valid instance");
        let enumerated = ctc_label_logprob_enumerated(&lp, &label, blank).expect("valid instance");
        report.instances += 1;
        if fwd == f64::NEG_INFINITY && enumerated == f64::NEG_INFINITY {
            continue;
        }
        report.finite += 1;
        let err = (fwd - enumerated).abs();
        report.max_error = report.max_error.max(if err.is_nan() { f64::INFINITY } else { err });
        // NaN counts as a failure
        if err.is_nan() || err > SCORE_TOLERANCE {
            report.failures.push(format!(
                "instance {i}: forward {fwd} vs enumeration {enumerated} (label {label:?}, T={t_len})"
            ));
        }
    }
    report
}
