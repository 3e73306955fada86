//! Navigation and instruction-quality metrics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{EnvironmentGraph, Route, Split};

/// Success threshold and nDTW scale, in graph hops.
pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub ne: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

/// Dynamic time warping cost between two node sequences with graph
/// distance as the ground cost.
pub fn dtw(env: &EnvironmentGraph, a: &[usize], b: &[usize]) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Data("DTW of an empty path".into()));
    }
    let mut acc = vec![f64::INFINITY; (n + 1) * (m + 1)];
    acc[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let cost = env.shortest_distance(a[i - 1], b[j - 1])? as f64;
            let best = acc[(i - 1) * (m + 1) + j]
                .min(acc[i * (m + 1) + j - 1])
                .min(acc[(i - 1) * (m + 1) + j - 1]);
            acc[i * (m + 1) + j] = cost + best;
        }
    }
    Ok(acc[n * (m + 1) + m])
}

/// Scores a predicted route against the reference route of the same
/// episode. With a zero threshold nDTW is 1 for a zero-cost alignment and 0
/// otherwise.
pub fn episode_metrics(
    env: &EnvironmentGraph,
    predicted: &Route,
    reference: &Route,
    threshold: f64,
) -> Result<EpisodeMetrics> {
    if predicted.env_id != reference.env_id || reference.env_id != env.id() {
        return Err(Error::Data(format!(
            "episode mixes environments `{}` and `{}` (scored in `{}`)",
            predicted.env_id,
            reference.env_id,
            env.id()
        )));
    }
    if predicted.nodes.is_empty() || reference.nodes.is_empty() {
        return Err(Error::Data("episode with an empty path".into()));
    }
    let end = *predicted.nodes.last().unwrap();
    let ne = env.shortest_distance(end, reference.goal)? as f64;
    let success = ne <= threshold;
    let shortest = env.shortest_distance(reference.start(), reference.goal)? as f64;
    let taken = predicted.hops() as f64;
    let spl = if !success {
        0.0
    } else if shortest.max(taken) == 0.0 {
        1.0
    } else {
        shortest / shortest.max(taken)
    };
    let cost = dtw(env, &predicted.nodes, &reference.nodes)?;
    let ndtw = if threshold > 0.0 {
        (-cost / (reference.nodes.len() as f64 * threshold)).exp()
    } else {
        f64::from(u8::from(cost == 0.0))
    };
    let sdtw = if success { ndtw } else { 0.0 };
    Ok(EpisodeMetrics {
        success,
        ne,
        spl,
        ndtw,
        sdtw,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sr: f64,
    pub ne: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: Split,
    pub count: usize,
    pub mean: Aggregate,
    pub episodes: Vec<EpisodeMetrics>,
}

impl EvalResult {
    pub fn new(split: Split, episodes: Vec<EpisodeMetrics>) -> Self {
        let n = episodes.len().max(1) as f64;
        let sum = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        let mean = Aggregate {
            sr: sum(|e| f64::from(u8::from(e.success))),
            ne: sum(|e| e.ne),
            spl: sum(|e| e.spl),
            ndtw: sum(|e| e.ndtw),
            sdtw: sum(|e| e.sdtw),
        };
        Self {
            split,
            count: episodes.len(),
            mean,
            episodes,
        }
    }

    /// One table row: rates as percentages and NE in hops, all to one
    /// decimal place.
    pub fn summary_line(&self) -> String {
        format!(
            "{:<10} n={:<4} SR {:>5.1}  NE {:>4.1}  SPL {:>5.1}  nDTW {:>5.1}  sDTW {:>5.1}",
            self.split.as_str(),
            self.count,
            100.0 * self.mean.sr,
            self.mean.ne,
            100.0 * self.mean.spl,
            100.0 * self.mean.ndtw,
            100.0 * self.mean.sdtw
        )
    }
}

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU in `[0, 100]` with uniform 1- to 4-gram weights, clipped
/// counts over all references, and a brevity penalty against the closest
/// reference length (shorter wins ties). Without smoothing the score is 0
/// as soon as one n-gram order has no match; `smooth` adds one to the
/// numerator and denominator of orders above 1.
pub fn corpus_bleu(
    references: &[Vec<Vec<usize>>],
    hypotheses: &[Vec<usize>],
    smooth: bool,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::Data(format!(
            "{} reference sets for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (refs, hyp) in references.iter().zip(hypotheses) {
        if refs.is_empty() {
            return Err(Error::Data("hypothesis without a reference".into()));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        for n in 1..=4 {
            let counts = ngrams(hyp, n);
            let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_p += 0.25 * (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Counts of `|reference| - |hypothesis|` grouped into buckets of
/// `bucket_width`. Bucket `k` holds differences in `[k, k + width)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bucket_width: usize,
    pub counts: BTreeMap<i64, usize>,
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `(bucket, count)` pairs in bucket order.
    pub fn pairs(&self) -> Vec<(i64, usize)> {
        self.counts.iter().map(|(&k, &v)| (k, v)).collect()
    }
}

pub fn length_histogram(
    references: &[Vec<usize>],
    hypotheses: &[Vec<usize>],
    bucket_width: usize,
) -> Result<LengthHistogram> {
    if references.len() != hypotheses.len() {
        return Err(Error::Data(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let w = bucket_width.max(1) as i64;
    let mut counts = BTreeMap::new();
    for (r, h) in references.iter().zip(hypotheses) {
        let diff = r.len() as i64 - h.len() as i64;
        *counts.entry(diff.div_euclid(w) * w).or_insert(0) += 1;
    }
    Ok(LengthHistogram {
        bucket_width: w as usize,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![vec![vec![1, 2, 3, 4, 5]], vec![vec![6, 7, 8, 9]]];
        let hyps = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert!((corpus_bleu(&refs, &hyps, false).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_corpus_scores_0() {
        let refs = vec![vec![vec![1, 2, 3, 4]]];
        let hyps = vec![vec![5, 6, 7, 8]];
        assert_eq!(corpus_bleu(&refs, &hyps, false).unwrap(), 0.0);
        assert!(corpus_bleu(&[], &[], false).is_err());
    }

    #[test]
    fn histogram_basics() {
        let refs = vec![vec![1, 2, 3], vec![1]];
        let h = length_histogram(&refs, &refs, 1).unwrap();
        assert_eq!(h.pairs(), vec![(0, 2)]);
        let shorter = vec![vec![1], vec![]];
        let h2 = length_histogram(&refs, &shorter, 1).unwrap();
        assert_eq!(h2.total(), 2);
        assert_eq!(h2.pairs(), vec![(1, 1), (2, 1)]);
    }
}
