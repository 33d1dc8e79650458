//! Deterministic offline recommender with a tunable bias.
//!
//! For each anchor the mock shuffles a synthetic catalog with a seeded RNG
//! and recommends the first `k` titles. If the prompt carries a value from
//! `biased_values`, `⌈β·k⌉` of those slots are filled from a sub-catalog
//! that shares no titles with the main one. Replaced slots are spread so
//! that every prefix of length `k'` holds exactly `⌈β·k'⌉` of them, which
//! keeps truncated-K measurements predictable.
//!
//! `noise_temperature` swaps each slot with a random catalog position with
//! probability `1 - exp(-τ)`, keyed by the sample index. The noise stream
//! depends on the anchor only, so with `β = 0` a sensitive prompt gets the
//! same list as the neutral one at every sample index.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Domain;
use crate::hashing::{seeded_rng, short_hash};
use crate::prompt::PromptInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockModelConfig {
    pub seed: u64,
    #[serde(default = "default_catalog_size")]
    pub catalog_size: usize,
    /// β in [0, 1].
    #[serde(default)]
    pub bias_strength: f64,
    #[serde(default)]
    pub biased_values: BTreeSet<String>,
    #[serde(default)]
    pub noise_temperature: f64,
}

fn default_catalog_size() -> usize {
    500
}

impl MockModelConfig {
    pub fn unbiased(seed: u64) -> Self {
        Self {
            seed,
            catalog_size: default_catalog_size(),
            bias_strength: 0.0,
            biased_values: BTreeSet::new(),
            noise_temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MockError> {
        if self.catalog_size == 0 {
            return Err(MockError::InvalidConfig(
                "catalog_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(MockError::InvalidConfig(format!(
                "bias_strength {} outside [0, 1]",
                self.bias_strength
            )));
        }
        if !(self.noise_temperature >= 0.0 && self.noise_temperature.is_finite()) {
            return Err(MockError::InvalidConfig(format!(
                "noise_temperature {} must be finite and >= 0",
                self.noise_temperature
            )));
        }
        Ok(())
    }

    /// Provider tag that changes whenever any mock parameter changes.
    pub fn provider_tag(&self) -> String {
        let json = serde_json::to_vec(self).expect("mock config serializes");
        format!("mock-{}", short_hash(&[&json]))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MockError {
    #[error("mock catalog of {catalog} titles is smaller than k = {k}")]
    CatalogTooSmall { catalog: usize, k: usize },
    #[error("invalid mock config: {0}")]
    InvalidConfig(String),
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        v.swap(i, j);
    }
    v
}

/// Number of replaced slots among the first `len` positions.
pub fn replaced_in_prefix(beta: f64, len: usize) -> usize {
    if beta <= 0.0 {
        return 0;
    }
    // the epsilon absorbs products such as 0.2 * 15 = 3.0000000000000004
    ((beta * len as f64 - 1e-9).ceil().max(0.0) as usize).min(len)
}

fn noun(domain: Domain) -> &'static str {
    match domain {
        Domain::Movie => "Movie",
        Domain::Music => "Song",
    }
}

fn title(domain: Domain, id: usize) -> String {
    match domain {
        Domain::Movie => format!("Mock Movie {id} ({})", 1950 + id % 70),
        Domain::Music => format!("\"Mock Song {id}\""),
    }
}

fn special_title(domain: Domain, value: &str, id: usize) -> String {
    format!("Special {value} {} {id}", noun(domain))
}

/// The mock's raw completion for one prompt sample.
pub fn mock_recommend(
    instance: &PromptInstance,
    config: &MockModelConfig,
    sample_index: u32,
) -> Result<String, MockError> {
    config.validate()?;
    let k = instance.k;
    if config.catalog_size < k {
        return Err(MockError::CatalogTooSmall {
            catalog: config.catalog_size,
            k,
        });
    }
    let anchor = instance.anchor.as_bytes();
    let mut perm = shuffled(
        config.catalog_size,
        &mut seeded_rng(config.seed, &[b"catalog", anchor]),
    );

    if config.noise_temperature > 0.0 {
        let p = 1.0 - (-config.noise_temperature).exp();
        let mut rng = seeded_rng(
            config.seed,
            &[b"noise", anchor, &sample_index.to_le_bytes()],
        );
        for i in 0..k {
            if rng.gen::<f64>() < p {
                let j = rng.gen_range(0..config.catalog_size as u64) as usize;
                perm.swap(i, j);
            }
        }
    }

    let mut titles: Vec<String> = perm[..k]
        .iter()
        .map(|&id| title(instance.domain, id))
        .collect();

    let biased = instance
        .condition
        .values()
        .into_iter()
        .find(|v| config.biased_values.contains(&v.value));
    if let Some(av) = biased {
        let sub = shuffled(
            config.catalog_size,
            &mut seeded_rng(config.seed, &[b"sub", anchor, av.value.as_bytes()]),
        );
        let mut next_sub = sub.iter();
        for (i, slot) in titles.iter_mut().enumerate() {
            if replaced_in_prefix(config.bias_strength, i + 1)
                > replaced_in_prefix(config.bias_strength, i)
            {
                let id = *next_sub
                    .next()
                    .expect("sub-catalog holds at least k titles");
                *slot = special_title(instance.domain, &av.value, id);
            }
        }
    }

    let mut out = format!(
        "Here are {k} {} titles you might enjoy:\n\n",
        instance.domain.item_noun()
    );
    for (i, t) in titles.iter().enumerate() {
        out.push_str(&format!("{}. {t}\n", i + 1));
    }
    Ok(out)
}
