//! Sample-based predictive uncertainty.
//!
//! A prompt is sampled `n` times. Each item's weight is the number of lists
//! it appears in; normalizing those counts gives a distribution whose
//! Shannon entropy (nats) is reported next to two stability statistics.
//! Entropy alone cannot tell a deterministic model from a varied one (a
//! fixed list of `k` items already has entropy `ln k`), which is why the
//! exact-match rate and mean pairwise Jaccard are always reported with it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::metrics::jaccard_at_k;
use crate::parser::RankedList;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UncertaintyError {
    #[error("sample set is empty")]
    NoSamples,
    #[error("all sampled lists are empty")]
    AllListsEmpty,
    #[error("sampled lists disagree on k ({0} vs {1})")]
    MixedK(usize, usize),
    #[error("need at least 3 paired observations, got {0}")]
    InsufficientPairs(usize),
    #[error("rank correlation undefined: one side is constant")]
    ConstantSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub instance_id: String,
    lists: Vec<RankedList>,
}

impl SampleSet {
    pub fn new(
        instance_id: impl Into<String>,
        lists: Vec<RankedList>,
    ) -> Result<Self, UncertaintyError> {
        let first = lists.first().ok_or(UncertaintyError::NoSamples)?;
        if let Some(other) = lists.iter().find(|l| l.k_requested != first.k_requested) {
            return Err(UncertaintyError::MixedK(
                first.k_requested,
                other.k_requested,
            ));
        }
        Ok(Self {
            instance_id: instance_id.into(),
            lists,
        })
    }

    pub fn lists(&self) -> &[RankedList] {
        &self.lists
    }

    pub fn n(&self) -> usize {
        self.lists.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub instance_id: String,
    pub n: usize,
    pub distinct_items: usize,
    pub entropy_nats: f64,
    pub normalized_entropy: f64,
    /// Absent when `n == 1`.
    pub exact_match_rate: Option<f64>,
    /// Absent when `n == 1`.
    pub mean_pairwise_jaccard: Option<f64>,
    pub degenerate: bool,
}

impl EntropyReport {
    /// `1 - mean_pairwise_jaccard`, if defined.
    pub fn instability(&self) -> Option<f64> {
        self.mean_pairwise_jaccard.map(|j| 1.0 - j)
    }
}

/// Share of list appearances per item (sums to 1).
pub fn item_frequency_distribution(
    samples: &SampleSet,
) -> Result<BTreeMap<String, f64>, UncertaintyError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for list in samples.lists() {
        for item in list.items() {
            *counts.entry(item.clone()).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(UncertaintyError::AllListsEmpty);
    }
    Ok(counts
        .into_iter()
        .map(|(item, c)| (item, c as f64 / total as f64))
        .collect())
}

pub fn predictive_entropy(samples: &SampleSet) -> Result<EntropyReport, UncertaintyError> {
    let dist = item_frequency_distribution(samples)?;
    let entropy: f64 = dist
        .values()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .sum();
    let distinct = dist.len();
    let normalized = if distinct >= 2 {
        (entropy / (distinct as f64).ln()).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let lists = samples.lists();
    let n = lists.len();
    let (exact, jaccard) = if n >= 2 {
        let mut pairs = 0usize;
        let mut exact = 0usize;
        let mut jac = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                pairs += 1;
                if lists[i].items() == lists[j].items() {
                    exact += 1;
                }
                let k = lists[i].len().max(lists[j].len()).max(1);
                jac += jaccard_at_k(lists[i].items(), lists[j].items(), k).value;
            }
        }
        (Some(exact as f64 / pairs as f64), Some(jac / pairs as f64))
    } else {
        (None, None)
    };

    Ok(EntropyReport {
        instance_id: samples.instance_id.clone(),
        n,
        distinct_items: distinct,
        entropy_nats: entropy.max(0.0),
        normalized_entropy: normalized,
        exact_match_rate: exact,
        mean_pairwise_jaccard: jaccard,
        degenerate: n < 2,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, UncertaintyError> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(UncertaintyError::InsufficientPairs(x.len().min(y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or(UncertaintyError::ConstantSeries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedObservation {
    pub instance_id: String,
    pub instability: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub spearman: f64,
    pub pairs: Vec<PairedObservation>,
}

/// Rank correlation between instability and a per-instance reliability
/// score. Reports without stability statistics and ids without a score are
/// left out of the pairing.
pub fn entropy_reliability_join(
    reports: &[EntropyReport],
    scores: &HashMap<String, f64>,
) -> Result<CorrelationSummary, UncertaintyError> {
    let mut pairs: Vec<PairedObservation> = reports
        .iter()
        .filter_map(|r| {
            let instability = r.instability()?;
            let score = *scores.get(&r.instance_id)?;
            Some(PairedObservation {
                instance_id: r.instance_id.clone(),
                instability,
                score,
            })
        })
        .collect();
    pairs.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    if pairs.len() < 3 {
        return Err(UncertaintyError::InsufficientPairs(pairs.len()));
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.instability).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    Ok(CorrelationSummary {
        spearman: spearman(&x, &y)?,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(items: &[&str]) -> RankedList {
        RankedList::new(items.iter().copied(), items.len().max(2))
    }

    fn set(lists: Vec<RankedList>) -> SampleSet {
        SampleSet::new("i", lists).unwrap()
    }

    #[test]
    fn frequency_examples() {
        let s = set(vec![list(&["a", "b", "c"]); 3]);
        let d = item_frequency_distribution(&s).unwrap();
        assert!(d.values().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));

        let d =
            item_frequency_distribution(&set(vec![list(&["a", "b"]), list(&["c", "d"])])).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.values().all(|&q| q == 0.25));

        let d =
            item_frequency_distribution(&set(vec![list(&["a", "b"]), list(&["a", "c"])])).unwrap();
        assert_eq!(d["a"], 0.5);
        assert_eq!(d["b"], 0.25);
        assert_eq!(d["c"], 0.25);
    }

    #[test]
    fn deterministic_model_n3_k2() {
        let r = predictive_entropy(&set(vec![list(&["a", "b"]); 3])).unwrap();
        assert!((r.entropy_nats - 2f64.ln()).abs() < 1e-15);
        assert!((r.normalized_entropy - 1.0).abs() < 1e-15);
        assert_eq!(r.exact_match_rate, Some(1.0));
        assert_eq!(r.mean_pairwise_jaccard, Some(1.0));
        assert!(!r.degenerate);
    }

    #[test]
    fn disjoint_and_single_samples() {
        let r = predictive_entropy(&set(vec![list(&["a", "b"]), list(&["c", "d"])])).unwrap();
        assert_eq!(r.exact_match_rate, Some(0.0));
        assert_eq!(r.mean_pairwise_jaccard, Some(0.0));

        let r = predictive_entropy(&set(vec![list(&["a", "b"])])).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.exact_match_rate, None);
        assert_eq!(r.mean_pairwise_jaccard, None);
    }

    #[test]
    fn sample_set_errors() {
        assert_eq!(
            SampleSet::new("x", vec![]).unwrap_err(),
            UncertaintyError::NoSamples
        );
        let a = RankedList::new(["a"], 2);
        let b = RankedList::new(["a"], 3);
        assert!(matches!(
            SampleSet::new("x", vec![a, b]),
            Err(UncertaintyError::MixedK(2, 3))
        ));
        let empty = set(vec![RankedList::new(Vec::<String>::new(), 3)]);
        assert_eq!(
            predictive_entropy(&empty).unwrap_err(),
            UncertaintyError::AllListsEmpty
        );
    }

    fn report(id: &str, mpj: f64) -> EntropyReport {
        EntropyReport {
            instance_id: id.into(),
            n: 5,
            distinct_items: 10,
            entropy_nats: 1.0,
            normalized_entropy: 0.5,
            exact_match_rate: Some(0.0),
            mean_pairwise_jaccard: Some(mpj),
            degenerate: false,
        }
    }

    #[test]
    fn join_correlations() {
        let reports = vec![
            report("a", 1.0),
            report("b", 0.7),
            report("c", 0.2),
            report("d", 0.1),
        ];
        let up: HashMap<String, f64> = [("a", 0.0), ("b", 1.0), ("c", 2.0), ("d", 5.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let s = entropy_reliability_join(&reports, &up).unwrap();
        assert!((s.spearman - 1.0).abs() < 1e-12);
        assert_eq!(s.pairs.len(), 4);
        let down: HashMap<String, f64> = up.iter().map(|(k, v)| (k.clone(), -v)).collect();
        assert!((entropy_reliability_join(&reports, &down).unwrap().spearman + 1.0).abs() < 1e-12);
        let few: HashMap<String, f64> = up.into_iter().take(2).collect();
        assert!(matches!(
            entropy_reliability_join(&reports, &few),
            Err(UncertaintyError::InsufficientPairs(2))
        ));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(UncertaintyError::ConstantSeries)
        );
    }

    fn lists_strategy() -> impl Strategy<Value = Vec<Vec<u8>>> {
        proptest::collection::vec(
            proptest::sample::subsequence((0u8..10).collect::<Vec<_>>(), 1..=5).prop_shuffle(),
            1..6,
        )
    }

    fn to_set(lists: &[Vec<u8>]) -> SampleSet {
        set(lists
            .iter()
            .map(|l| RankedList::new(l.iter().map(|x| format!("t{x}")), 5))
            .collect())
    }

    proptest! {
        #[test]
        fn report_invariants(lists in lists_strategy(), rot in 0usize..6) {
            let r = predictive_entropy(&to_set(&lists)).unwrap();
            prop_assert!(r.entropy_nats >= 0.0);
            prop_assert!(r.entropy_nats <= (r.distinct_items as f64).ln() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.normalized_entropy));

            let mut rotated = lists.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            let r2 = predictive_entropy(&to_set(&rotated)).unwrap();
            prop_assert_eq!(r.distinct_items, r2.distinct_items);
            prop_assert!((r.entropy_nats - r2.entropy_nats).abs() < 1e-12);
            prop_assert_eq!(r.exact_match_rate, r2.exact_match_rate);
            match (r.mean_pairwise_jaccard, r2.mean_pairwise_jaccard) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn duplicating_modal_list_never_lowers_exact_match(lists in lists_strategy()) {
            prop_assume!(lists.len() >= 2);
            let before = predictive_entropy(&to_set(&lists)).unwrap();
            let mut counts: BTreeMap<&Vec<u8>, usize> = BTreeMap::new();
            for l in &lists {
                *counts.entry(l).or_insert(0) += 1;
            }
            let modal = (*counts.iter().max_by_key(|(_, c)| **c).unwrap().0).clone();
            let mut more = lists.clone();
            more.push(modal);
            let after = predictive_entropy(&to_set(&more)).unwrap();
            prop_assert!(after.exact_match_rate.unwrap() + 1e-12 >= before.exact_match_rate.unwrap());
        }

        #[test]
        fn uniform_distribution_maximizes_entropy(lists in lists_strategy()) {
            let s = to_set(&lists);
            let d = item_frequency_distribution(&s).unwrap();
            let r = predictive_entropy(&s).unwrap();
            let uniform = d.values().all(|q| (q - d.values().next().unwrap()).abs() < 1e-15);
            let max = (r.distinct_items as f64).ln();
            if uniform {
                prop_assert!((r.entropy_nats - max).abs() < 1e-12);
            } else {
                prop_assert!(r.entropy_nats < max - 1e-12);
            }
        }
    }
}
