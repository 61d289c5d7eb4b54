//! Seeded synthetic multi-domain benchmark with planted topic structure.
//!
//! Every item carries a latent topic. Attribute values are tied to topics,
//! users prefer one topic, and text labels are item topics, so a model that
//! reads item attributes can recover what users and labels depend on.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bench::{Benchmark, DomainTasks, InteractionSplits, TextExample, TextTask};
use super::{build_multidomain_kg, DomainSource, FeatureTable, RawTriple};
use crate::autodiff::RngStream;
use crate::error::{Error, Result};

/// Share of an item's triples drawn from its own topic's attribute values.
const TOPIC_TRIPLE_SHARE: f64 = 0.7;
/// Log-odds boost for interacting with an item of the preferred topic.
const PREFERENCE_STRENGTH: f64 = 2.5;
const CUE_PROBABILITY: f64 = 0.3;
const FILLER_VOCAB: usize = 40;
const FILLER_TOKENS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub items_per_domain: usize,
    pub attrs_per_domain: usize,
    pub shared_attr_fraction: f64,
    pub triples_per_item: usize,
    pub n_users: usize,
    pub interactions_per_user: usize,
    pub text_examples_per_domain: usize,
    pub n_labels: usize,
    pub seed: u64,
    pub feature_dim: usize,
}

fn default_feature_dim() -> usize {
    super::bench::DEFAULT_FEATURE_DIM
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_domains: 3,
            items_per_domain: 100,
            attrs_per_domain: 20,
            shared_attr_fraction: 0.3,
            triples_per_item: 6,
            n_users: 50,
            interactions_per_user: 20,
            text_examples_per_domain: 200,
            n_labels: 5,
            seed: 7,
            feature_dim: default_feature_dim(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_domains", self.n_domains),
            ("items_per_domain", self.items_per_domain),
            ("attrs_per_domain", self.attrs_per_domain),
            ("triples_per_item", self.triples_per_item),
            ("n_users", self.n_users),
            ("interactions_per_user", self.interactions_per_user),
            ("text_examples_per_domain", self.text_examples_per_domain),
            ("n_labels", self.n_labels),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.shared_attr_fraction) {
            return Err(Error::Config(format!(
                "shared_attr_fraction {} outside [0, 1]",
                self.shared_attr_fraction
            )));
        }
        if self.interactions_per_user > self.items_per_domain {
            return Err(Error::Config(format!(
                "interactions_per_user ({}) exceeds items_per_domain ({})",
                self.interactions_per_user, self.items_per_domain
            )));
        }
        if self.triples_per_item > self.attrs_per_domain {
            return Err(Error::Config(format!(
                "triples_per_item ({}) exceeds attrs_per_domain ({})",
                self.triples_per_item, self.attrs_per_domain
            )));
        }
        if self.n_labels < 2 {
            return Err(Error::Config("n_labels must be at least 2".into()));
        }
        Ok(())
    }

    fn shared_slots(&self) -> usize {
        (self.shared_attr_fraction * self.attrs_per_domain as f64).round() as usize
    }
}

/// Draws `k` distinct indices with probability proportional to `weights`.
fn weighted_sample(weights: &[f64], k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let mut x = rng.uniform() * total;
        let mut pick = w.iter().rposition(|&v| v > 0.0).expect("weights remain");
        for (i, &v) in w.iter().enumerate() {
            if v > 0.0 && x < v {
                pick = i;
                break;
            }
            x -= v;
        }
        w[pick] = 0.0;
        out.push(pick);
    }
    out
}

fn split_counts(n: usize) -> (usize, usize) {
    let tenth = (n / 10).max(1);
    let test = if n >= 2 { tenth } else { 0 };
    let valid = if n >= 3 { tenth } else { 0 };
    (valid, test)
}

/// Generates the benchmark; identical specs give identical output.
pub fn generate_synthetic_benchmark(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let topics = spec.n_labels;
    let shared = spec.shared_slots();
    let root = RngStream::new(spec.seed);
    let mut sources = Vec::with_capacity(spec.n_domains);
    let mut tasks = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let mut rng = root.fork(d as u64);
        let slot_value = |j: usize| {
            if j < shared {
                format!("v{j}")
            } else {
                format!("d{d}_v{j}")
            }
        };
        let slot_rel = |j: usize| {
            let rt = j / topics;
            if j < shared {
                format!("rel{rt}")
            } else {
                format!("d{d}_rel{rt}")
            }
        };

        let mut item_topic = Vec::with_capacity(spec.items_per_domain);
        let mut triples = Vec::new();
        let mut items = Vec::new();
        for i in 0..spec.items_per_domain {
            let topic = rng.below(topics);
            let name = format!("d{d}_item{i}");
            let mut own: Vec<usize> = (0..spec.attrs_per_domain).filter(|j| j % topics == topic).collect();
            let mut other: Vec<usize> = (0..spec.attrs_per_domain).filter(|j| j % topics != topic).collect();
            for _ in 0..spec.triples_per_item {
                let from_own = (rng.uniform() < TOPIC_TRIPLE_SHARE && !own.is_empty()) || other.is_empty();
                let pool = if from_own { &mut own } else { &mut other };
                let j = pool.remove(rng.below(pool.len()));
                triples.push(RawTriple {
                    head: name.clone(),
                    relation: slot_rel(j),
                    tail: slot_value(j),
                });
            }
            item_topic.push(topic);
            items.push(name);
        }

        let mut inter = InteractionSplits::default();
        for u in 0..spec.n_users {
            let user = format!("d{d}_user{u}");
            let pref = rng.below(topics);
            let weights: Vec<f64> = item_topic
                .iter()
                .map(|&t| if t == pref { PREFERENCE_STRENGTH.exp() } else { 1.0 })
                .collect();
            let mut chosen = weighted_sample(&weights, spec.interactions_per_user, &mut rng);
            chosen.shuffle(&mut rng);
            let (n_valid, n_test) = split_counts(chosen.len());
            for (k, &i) in chosen.iter().enumerate() {
                let row = (user.clone(), items[i].clone());
                if k < n_test {
                    inter.test.push(row);
                } else if k < n_test + n_valid {
                    inter.valid.push(row);
                } else {
                    inter.train.push(row);
                }
            }
        }

        let mut examples = Vec::with_capacity(spec.text_examples_per_domain);
        for _ in 0..spec.text_examples_per_domain {
            let i = rng.below(spec.items_per_domain);
            let label = item_topic[i];
            let mut words: Vec<String> = (0..FILLER_TOKENS)
                .map(|_| format!("w{}", rng.below(FILLER_VOCAB)))
                .collect();
            if rng.uniform() < CUE_PROBABILITY {
                let at = rng.below(words.len() + 1);
                words.insert(at, format!("cue{label}"));
            }
            examples.push(TextExample {
                label,
                item: items[i].clone(),
                text: words.join(" "),
            });
        }
        let (n_valid, n_test) = split_counts(examples.len());
        let test = examples.split_off(examples.len() - n_test);
        let valid = examples.split_off(examples.len() - n_valid);

        sources.push(DomainSource {
            name: format!("d{d}"),
            triples,
            items,
        });
        tasks.push(DomainTasks {
            domain: format!("d{d}"),
            interactions: Some(inter),
            text: Some(TextTask {
                n_labels: spec.n_labels,
                train: examples,
                valid,
                test,
            }),
        });
    }
    let kg = build_multidomain_kg(&sources)?;
    let features = FeatureTable::hashed(kg.entities().names(), spec.feature_dim, spec.seed);
    Ok(Benchmark { kg, features, tasks })
}
