//! Disparity statistics over per-value similarity means.
//!
//! For one attribute with values `A`, let `m_a` be the mean similarity
//! between the neutral list and the list produced for value `a`:
//!
//! ```text
//! SNSR = max_a m_a - min_a m_a
//! SNSV = sqrt( (1/|A|) Σ_a (m_a - mean(m))² )
//! PAFS = 1 - (1/|P|) Σ_p |sim(p) - mean(sim)|
//! ```
//!
//! Higher SNSR/SNSV means less fair; higher PAFS means more uniform across
//! personality profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::SensitiveAttribute;
use crate::metrics::MetricKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FairnessError {
    #[error("disparity needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("no similarity rows for value `{value}` of `{attribute}` ({metric}@{k})")]
    MissingValue {
        attribute: String,
        value: String,
        metric: String,
        k: usize,
    },
    #[error("empty personality profile set")]
    EmptyProfileSet,
    #[error("no anchor has a complete set of values for `{attribute}` ({metric}@{k})")]
    NoCompleteAnchor {
        attribute: String,
        metric: String,
        k: usize,
    },
}

/// The score a table row carries: a list similarity or a PAFS computed on
/// top of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ScoreKind {
    Similarity(MetricKind),
    Pafs,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Similarity(m) => m.as_str(),
            ScoreKind::Pafs => "pafs",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<ScoreKind> for String {
    fn from(s: ScoreKind) -> Self {
        s.as_str().to_string()
    }
}

impl TryFrom<String> for ScoreKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "pafs" {
            Ok(ScoreKind::Pafs)
        } else {
            s.parse().map(ScoreKind::Similarity)
        }
    }
}

impl PartialOrd for ScoreKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScoreKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// Provider refused or returned nothing.
    ContentError,
    /// Output had no parseable list entries.
    EmptyParse,
    /// The anchor's neutral list is unavailable.
    ReferenceUnavailable,
    /// Metric undefined for this pair (PRAG* with < 2 reference items).
    UndefinedMetric,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::ContentError => "content_error",
            ExclusionReason::EmptyParse => "empty_parse",
            ExclusionReason::ReferenceUnavailable => "reference_unavailable",
            ExclusionReason::UndefinedMetric => "undefined_metric",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub anchor: String,
    pub attribute: String,
    pub value: String,
    pub metric: ScoreKind,
    pub k: usize,
    /// `None` exactly when the row is excluded.
    pub similarity: Option<f64>,
    pub exclusion: Option<ExclusionReason>,
}

impl SimilarityRow {
    pub fn scored(
        anchor: &str,
        attribute: &str,
        value: &str,
        metric: ScoreKind,
        k: usize,
        similarity: f64,
    ) -> Self {
        Self {
            anchor: anchor.to_string(),
            attribute: attribute.to_string(),
            value: value.to_string(),
            metric,
            k,
            similarity: Some(similarity),
            exclusion: None,
        }
    }

    pub fn excluded(
        anchor: &str,
        attribute: &str,
        value: &str,
        metric: ScoreKind,
        k: usize,
        reason: ExclusionReason,
    ) -> Self {
        Self {
            anchor: anchor.to_string(),
            attribute: attribute.to_string(),
            value: value.to_string(),
            metric,
            k,
            similarity: None,
            exclusion: Some(reason),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityTable {
    pub fn push(&mut self, row: SimilarityRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = SimilarityRow>) {
        self.rows.extend(rows);
    }

    fn select<'a>(
        &'a self,
        metric: ScoreKind,
        k: usize,
        attribute: &'a str,
    ) -> impl Iterator<Item = &'a SimilarityRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.metric == metric && r.k == k && r.attribute == attribute)
    }

    pub fn exclusion_counts(&self) -> BTreeMap<ExclusionReason, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            if let Some(reason) = r.exclusion {
                *out.entry(reason).or_insert(0) += 1;
            }
        }
        out
    }

    /// Sorts rows by (metric, k, attribute, value, anchor).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.metric, a.k, &a.attribute, &a.value, &a.anchor).cmp(&(
                b.metric,
                b.k,
                &b.attribute,
                &b.value,
                &b.anchor,
            ))
        });
    }

    pub fn ks(&self) -> BTreeSet<usize> {
        self.rows.iter().map(|r| r.k).collect()
    }
}

/// Per-value means in the attribute's value order.
pub type ValueMeans = Vec<(String, f64)>;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean over anchors of the non-excluded similarities of each value.
pub fn mean_similarity_per_value(
    table: &SimilarityTable,
    metric: ScoreKind,
    k: usize,
    attribute: &SensitiveAttribute,
) -> Result<ValueMeans, FairnessError> {
    let mut by_value: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in table.select(metric, k, &attribute.name) {
        if let Some(s) = r.similarity {
            by_value.entry(r.value.as_str()).or_default().push(s);
        }
    }
    attribute
        .values
        .iter()
        .map(|v| match by_value.get(v.as_str()) {
            Some(xs) if !xs.is_empty() => Ok((v.clone(), mean(xs))),
            _ => Err(FairnessError::MissingValue {
                attribute: attribute.name.clone(),
                value: v.clone(),
                metric: metric.to_string(),
                k,
            }),
        })
        .collect()
}

/// Range of the per-value means.
pub fn snsr(means: &[f64]) -> Result<f64, FairnessError> {
    if means.len() < 2 {
        return Err(FairnessError::TooFewValues(means.len()));
    }
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Population standard deviation of the per-value means.
pub fn snsv(means: &[f64]) -> Result<f64, FairnessError> {
    if means.len() < 2 {
        return Err(FairnessError::TooFewValues(means.len()));
    }
    if means.iter().all(|&m| m == means[0]) {
        return Ok(0.0);
    }
    let mu = mean(means);
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64;
    Ok(var.sqrt())
}

/// One minus the mean absolute deviation of similarities across profiles.
pub fn pafs(sims_over_profiles: &[f64]) -> Result<f64, FairnessError> {
    if sims_over_profiles.is_empty() {
        return Err(FairnessError::EmptyProfileSet);
    }
    // equal scores give exactly 1 rather than 1 - rounding error
    if sims_over_profiles
        .iter()
        .all(|&s| s == sims_over_profiles[0])
    {
        return Ok(1.0);
    }
    let mu = mean(sims_over_profiles);
    let mad = sims_over_profiles
        .iter()
        .map(|s| (s - mu).abs())
        .sum::<f64>()
        / sims_over_profiles.len() as f64;
    Ok(1.0 - mad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Mean per value over anchors, then disparity across value means.
    #[default]
    MeansThenDisparity,
    /// Disparity per anchor, then mean across anchors.
    PerAnchorDisparity,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::MeansThenDisparity => "means_then_disparity",
            AggregationMode::PerAnchorDisparity => "per_anchor_disparity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub metric: ScoreKind,
    pub k: usize,
    pub attribute: String,
    pub per_value_mean: ValueMeans,
    pub snsr: f64,
    pub snsv: f64,
    pub mode: AggregationMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    pub entries: Vec<AttributeSummary>,
}

impl FairnessSummary {
    pub fn get(&self, metric: ScoreKind, k: usize, attribute: &str) -> Option<&AttributeSummary> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.k == k && e.attribute == attribute)
    }

    pub fn metrics(&self) -> BTreeSet<ScoreKind> {
        self.entries.iter().map(|e| e.metric).collect()
    }
}

/// SNSR/SNSV for one attribute under the chosen aggregation order.
pub fn summarize_attribute(
    table: &SimilarityTable,
    metric: ScoreKind,
    k: usize,
    attribute: &SensitiveAttribute,
    mode: AggregationMode,
) -> Result<AttributeSummary, FairnessError> {
    let per_value_mean = mean_similarity_per_value(table, metric, k, attribute)?;
    let means: Vec<f64> = per_value_mean.iter().map(|(_, m)| *m).collect();
    let (range, std) = match mode {
        AggregationMode::MeansThenDisparity => (snsr(&means)?, snsv(&means)?),
        AggregationMode::PerAnchorDisparity => {
            let mut per_anchor: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
            for r in table.select(metric, k, &attribute.name) {
                if let Some(s) = r.similarity {
                    per_anchor.entry(&r.anchor).or_default().insert(&r.value, s);
                }
            }
            let mut ranges = Vec::new();
            let mut stds = Vec::new();
            for sims in per_anchor.values() {
                let row: Option<Vec<f64>> = attribute
                    .values
                    .iter()
                    .map(|v| sims.get(v.as_str()).copied())
                    .collect();
                if let Some(row) = row {
                    ranges.push(snsr(&row)?);
                    stds.push(snsv(&row)?);
                }
            }
            if ranges.is_empty() {
                return Err(FairnessError::NoCompleteAnchor {
                    attribute: attribute.name.clone(),
                    metric: metric.to_string(),
                    k,
                });
            }
            (mean(&ranges), mean(&stds))
        }
    };
    Ok(AttributeSummary {
        metric,
        k,
        attribute: attribute.name.clone(),
        per_value_mean,
        snsr: range,
        snsv: std,
        mode,
    })
}

/// Summaries for every (metric, attribute) pair at cutoff `k`.
pub fn summarize(
    table: &SimilarityTable,
    attributes: &[SensitiveAttribute],
    metrics: &[ScoreKind],
    k: usize,
    mode: AggregationMode,
) -> Result<FairnessSummary, FairnessError> {
    let mut entries = Vec::new();
    for &metric in metrics {
        for attr in attributes {
            entries.push(summarize_attribute(table, metric, k, attr, mode)?);
        }
    }
    Ok(FairnessSummary { entries })
}

/// Orders attribute names by SNSV, largest first; ties by name.
pub fn rank_by_snsv<S: AsRef<str>>(snsv_by_attribute: &[(S, f64)]) -> Vec<String> {
    let mut pairs: Vec<(&str, f64)> = snsv_by_attribute
        .iter()
        .map(|(n, v)| (n.as_ref(), *v))
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    pairs.into_iter().map(|(n, _)| n.to_string()).collect()
}

pub fn rank_attributes_by_snsv(
    summary: &FairnessSummary,
    metric: ScoreKind,
    k: usize,
) -> Vec<String> {
    let pairs: Vec<(&str, f64)> = summary
        .entries
        .iter()
        .filter(|e| e.metric == metric && e.k == k)
        .map(|e| (e.attribute.as_str(), e.snsv))
        .collect();
    rank_by_snsv(&pairs)
}

/// Similarity of one (profile, attribute value) prompt to the anchor's
/// neutral list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalityRow {
    pub anchor: String,
    pub attribute: String,
    pub value: String,
    pub profile: String,
    pub metric: MetricKind,
    pub k: usize,
    pub similarity: Option<f64>,
}

/// PAFS per (anchor, value) over profiles, as table rows with metric `pafs`.
///
/// An (anchor, value) pair with no usable profile similarity becomes an
/// excluded row.
pub fn pafs_table(
    rows: &[PersonalityRow],
    metric: MetricKind,
    k: usize,
    attribute: &SensitiveAttribute,
) -> Result<Vec<SimilarityRow>, FairnessError> {
    let mut grouped: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    let mut anchors = BTreeSet::new();
    for r in rows
        .iter()
        .filter(|r| r.metric == metric && r.k == k && r.attribute == attribute.name)
    {
        anchors.insert(r.anchor.as_str());
        let entry = grouped.entry((&r.anchor, &r.value)).or_default();
        if let Some(s) = r.similarity {
            entry.push(s);
        }
    }
    let mut out = Vec::new();
    for anchor in anchors {
        for value in &attribute.values {
            match grouped.get(&(anchor, value.as_str())) {
                Some(sims) if !sims.is_empty() => out.push(SimilarityRow::scored(
                    anchor,
                    &attribute.name,
                    value,
                    ScoreKind::Pafs,
                    k,
                    pafs(sims)?,
                )),
                _ => out.push(SimilarityRow::excluded(
                    anchor,
                    &attribute.name,
                    value,
                    ScoreKind::Pafs,
                    k,
                    ExclusionReason::UndefinedMetric,
                )),
            }
        }
    }
    Ok(out)
}

/// PAFS treated as a similarity: per-value mean PAFS plus its SNSR/SNSV.
pub fn pafs_fairness_rows(
    rows: &[PersonalityRow],
    metric: MetricKind,
    k: usize,
    attribute: &SensitiveAttribute,
    mode: AggregationMode,
) -> Result<AttributeSummary, FairnessError> {
    let table = SimilarityTable {
        rows: pafs_table(rows, metric, k, attribute)?,
    };
    summarize_attribute(&table, ScoreKind::Pafs, k, attribute, mode)
}
