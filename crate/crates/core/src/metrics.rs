//! Top-K similarity between a reference (neutral) list and a candidate list.
//!
//! | Metric | Measures |
//! |--------|----------|
//! | Jaccard@K | set overlap of the two top-K prefixes |
//! | SERP*@K | overlap weighted by the item's rank in the reference |
//! | PRAG*@K | share of reference-ordered pairs whose order survives |
//!
//! All three return values in `[0, 1]`, `1` for identical lists and `0`
//! for disjoint ones. Only Jaccard is symmetric.
//!
//! Ranks are 1-based. When the reference prefix is shorter than `k` the
//! SERP* and PRAG* normalizers use its actual length `n`, so a list always
//! scores `1` against itself.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::parser::RankedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Jaccard,
    SerpStar,
    PragStar,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::Jaccard,
        MetricKind::SerpStar,
        MetricKind::PragStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Jaccard => "jaccard",
            MetricKind::SerpStar => "serp_star",
            MetricKind::PragStar => "prag_star",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s
            .to_ascii_lowercase()
            .replace(['-', '*'], "_")
            .trim_end_matches('_')
        {
            "jaccard" => Ok(MetricKind::Jaccard),
            "serp_star" | "serp" => Ok(MetricKind::SerpStar),
            "prag_star" | "prag" => Ok(MetricKind::PragStar),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub metric: MetricKind,
    pub k: usize,
    pub value: f64,
}

fn prefix<T>(list: &[T], k: usize) -> &[T] {
    &list[..list.len().min(k)]
}

pub fn jaccard_at_k<T: Eq + Hash>(reference: &[T], candidate: &[T], k: usize) -> SimilarityScore {
    let a: HashSet<&T> = prefix(reference, k).iter().collect();
    let b: HashSet<&T> = prefix(candidate, k).iter().collect();
    let union = a.union(&b).count();
    let value = if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    };
    SimilarityScore {
        metric: MetricKind::Jaccard,
        k,
        value,
    }
}

pub fn serp_star_at_k<T: Eq + Hash>(reference: &[T], candidate: &[T], k: usize) -> SimilarityScore {
    let reference = prefix(reference, k);
    let candidate: HashSet<&T> = prefix(candidate, k).iter().collect();
    let n = reference.len();
    let value = if n == 0 {
        if candidate.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        let hit: usize = reference
            .iter()
            .enumerate()
            .filter(|(_, v)| candidate.contains(v))
            .map(|(i, _)| n - i)
            .sum();
        hit as f64 / (n * (n + 1) / 2) as f64
    };
    SimilarityScore {
        metric: MetricKind::SerpStar,
        k,
        value,
    }
}

/// `None` when the reference prefix holds fewer than two items: there are
/// no pairs to agree on and the score is undefined (not zero).
pub fn prag_star_at_k<T: Eq + Hash>(
    reference: &[T],
    candidate: &[T],
    k: usize,
) -> Option<SimilarityScore> {
    let reference = prefix(reference, k);
    let n = reference.len();
    if n < 2 {
        return None;
    }
    let cand_rank: HashMap<&T, usize> = prefix(candidate, k)
        .iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let mut agree = 0usize;
    for (i, hi) in reference.iter().enumerate() {
        let Some(&r_hi) = cand_rank.get(hi) else {
            continue;
        };
        for lo in &reference[i + 1..] {
            match cand_rank.get(lo) {
                None => agree += 1,
                Some(&r_lo) if r_hi < r_lo => agree += 1,
                Some(_) => {}
            }
        }
    }
    Some(SimilarityScore {
        metric: MetricKind::PragStar,
        k,
        value: agree as f64 / (n * (n - 1) / 2) as f64,
    })
}

/// Dispatches on `metric`; `None` only for undefined PRAG*.
pub fn similarity<T: Eq + Hash>(
    metric: MetricKind,
    reference: &[T],
    candidate: &[T],
    k: usize,
) -> Option<SimilarityScore> {
    match metric {
        MetricKind::Jaccard => Some(jaccard_at_k(reference, candidate, k)),
        MetricKind::SerpStar => Some(serp_star_at_k(reference, candidate, k)),
        MetricKind::PragStar => prag_star_at_k(reference, candidate, k),
    }
}

pub fn list_similarity(
    metric: MetricKind,
    reference: &RankedList,
    candidate: &RankedList,
    k: usize,
) -> Option<SimilarityScore> {
    similarity(metric, reference.items(), candidate.items(), k)
}

/// Every metric at every cutoff in `ks`, metric-major. Undefined PRAG*
/// cutoffs are omitted.
pub fn k_sweep<T: Eq + Hash>(
    reference: &[T],
    candidate: &[T],
    ks: &[usize],
) -> Vec<SimilarityScore> {
    MetricKind::ALL
        .iter()
        .flat_map(|&m| {
            ks.iter()
                .filter_map(move |&k| similarity(m, reference, candidate, k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn jaccard_examples() {
        let a: Vec<u32> = (0..25).collect();
        let b: Vec<u32> = (100..125).collect();
        assert_eq!(jaccard_at_k(&a, &a, 25).value, 1.0);
        assert_eq!(jaccard_at_k(&a, &b, 25).value, 0.0);
        assert_eq!(jaccard_at_k(&v("abc"), &v("bcd"), 3).value, 0.5);
        assert_eq!(jaccard_at_k::<u8>(&[], &[], 3).value, 1.0);
        assert_eq!(jaccard_at_k(&[], &v("a"), 3).value, 0.0);
    }

    #[test]
    fn serp_examples() {
        let a: Vec<u32> = (0..25).collect();
        let b: Vec<u32> = (100..125).collect();
        assert_eq!(serp_star_at_k(&a, &a, 25).value, 1.0);
        assert_eq!(serp_star_at_k(&a, &b, 25).value, 0.0);
        assert_eq!(serp_star_at_k(&v("abc"), &v("cbx"), 3).value, 0.5);
        assert_eq!(serp_star_at_k::<u8>(&[], &[], 3).value, 1.0);
        assert_eq!(serp_star_at_k(&[], &v("a"), 3).value, 0.0);
    }

    #[test]
    fn prag_examples() {
        let a: Vec<u32> = (0..25).collect();
        let b: Vec<u32> = (100..125).collect();
        assert_eq!(prag_star_at_k(&a, &a, 25).unwrap().value, 1.0);
        assert_eq!(prag_star_at_k(&a, &b, 25).unwrap().value, 0.0);
        let s = prag_star_at_k(&v("abc"), &v("bac"), 3).unwrap().value;
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        assert!(prag_star_at_k(&v("a"), &v("a"), 3).is_none());
        assert!(prag_star_at_k(&v("abc"), &v("abc"), 1).is_none());
    }

    #[test]
    fn order_sensitive_metrics_are_asymmetric() {
        let (a, b) = (v("abc"), v("cbx"));
        assert_eq!(jaccard_at_k(&a, &b, 3).value, jaccard_at_k(&b, &a, 3).value);
        // reference-rank weighting: a→b keeps b,c (weights 2+1), b→a keeps c,b (3+2)
        assert_ne!(
            serp_star_at_k(&a, &b, 3).value,
            serp_star_at_k(&b, &a, 3).value
        );
        let (a, b) = (v("abcd"), v("ba"));
        assert_ne!(
            prag_star_at_k(&a, &b, 4).unwrap().value,
            prag_star_at_k(&b, &a, 4).unwrap().value
        );
    }

    #[test]
    fn sweep_matches_single_k() {
        let a = v("abcdefghij");
        let b = v("bacdxfghyj");
        let sweep = k_sweep(&a, &b, &[10]);
        assert_eq!(sweep.len(), 3);
        assert_eq!(sweep[0], jaccard_at_k(&a, &b, 10));
        assert_eq!(sweep[1], serp_star_at_k(&a, &b, 10));
        assert_eq!(sweep[2], prag_star_at_k(&a, &b, 10).unwrap());
        assert!(k_sweep(&a, &a, &[5, 10, 25]).iter().all(|s| s.value == 1.0));
    }

    fn distinct_list(max: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::sample::subsequence((0u8..12).collect::<Vec<_>>(), 0..=max).prop_shuffle()
    }

    proptest! {
        #[test]
        fn bounds_and_identity(a in distinct_list(10), b in distinct_list(10), k in 1usize..12) {
            for m in MetricKind::ALL {
                if let Some(s) = similarity(m, &a, &b, k) {
                    prop_assert!((0.0..=1.0).contains(&s.value));
                }
                if let Some(s) = similarity(m, &a, &a, k) {
                    prop_assert_eq!(s.value, 1.0);
                }
            }
            prop_assert_eq!(jaccard_at_k(&a, &b, k).value, jaccard_at_k(&b, &a, k).value);
        }

        #[test]
        fn jaccard_ignores_candidate_order(a in distinct_list(8), b in distinct_list(8), seed in any::<u64>()) {
            let k = 8;
            let mut shuffled = b.clone();
            let n = shuffled.len();
            if n > 1 {
                shuffled.rotate_left((seed as usize) % n);
                shuffled.swap(0, n - 1);
            }
            prop_assert_eq!(jaccard_at_k(&a, &b, k).value, jaccard_at_k(&a, &shuffled, k).value);
        }

        #[test]
        fn disjoint_lists_score_zero(a in distinct_list(6), k in 1usize..8) {
            prop_assume!(!a.is_empty());
            let b: Vec<u8> = a.iter().map(|x| x + 100).collect();
            for m in MetricKind::ALL {
                if let Some(s) = similarity(m, &a, &b, k) {
                    prop_assert_eq!(s.value, 0.0);
                }
            }
        }
    }
}
