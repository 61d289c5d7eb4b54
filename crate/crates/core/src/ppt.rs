//! Prefix prompt tuning: a trainable per-item token, projected to the model
//! width and added to the head token of a frozen encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, RngStream, Tensor, Var};
use crate::encoder::{Encoder, SequenceBatch};
use crate::error::{Error, Result};
use crate::kg::{FeatureTable, MultiDomainKG, Neighborhood};
use crate::params::{normal_tensor, Bindings, ParamStore};

pub const PREFIX_TOKENS: &str = "ppt.tokens";
pub const PREFIX_PROJ: &str = "ppt.W_p";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub d_p: usize,
    /// Std of the projection initialization; tokens start at zero.
    pub init_std: f64,
    /// Run the frozen encoder in train mode (dropout on) while tuning.
    pub dropout: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            d_p: 16,
            init_std: 0.02,
            dropout: false,
        }
    }
}

/// Prefix rows for the items of one tuning domain plus the projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTable<T: Real = f32> {
    items: Vec<usize>,
    rows: HashMap<usize, usize>,
    pub params: ParamStore<T>,
}

impl<T: Real> PrefixTable<T> {
    pub fn new(items: &[usize], d_model: usize, config: &PromptConfig, rng: &mut RngStream) -> Result<Self> {
        if config.d_p == 0 {
            return Err(Error::Config("prefix dimension must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        params.insert(PREFIX_TOKENS, Tensor::zeros(vec![items.len(), config.d_p]), true)?;
        params.insert(
            PREFIX_PROJ,
            normal_tensor(vec![config.d_p, d_model], config.init_std, rng),
            true,
        )?;
        Ok(PrefixTable {
            items: items.to_vec(),
            rows: items.iter().enumerate().map(|(r, &i)| (i, r)).collect(),
            params,
        })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn d_p(&self) -> usize {
        self.params.get(PREFIX_TOKENS).map(|t| t.shape()[1]).unwrap_or(0)
    }

    pub fn row(&self, item: usize) -> Result<usize> {
        self.rows
            .get(&item)
            .copied()
            .ok_or_else(|| Error::Config(format!("item {item} has no prefix row")))
    }

    /// `[B, d_model]` head-token offsets for `items`.
    pub fn head_offsets(&self, g: &mut Graph<T>, b: &Bindings, items: &[usize]) -> Result<Var> {
        let idx = items
            .iter()
            .map(|&i| self.row(i).map(Some))
            .collect::<Result<Vec<_>>>()?;
        let p = g.embedding_lookup(b.get(PREFIX_TOKENS)?, &idx)?;
        g.matmul(p, b.get(PREFIX_PROJ)?)
    }
}

/// Prompted item representations `[B, d_model]` for a prepared batch.
#[allow(clippy::too_many_arguments)]
pub fn prompted_representations<T: Real>(
    g: &mut Graph<T>,
    b: &Bindings,
    encoder: &Encoder<T>,
    prefix: &PrefixTable<T>,
    features: &FeatureTable,
    batch: &SequenceBatch,
    rng: &mut RngStream,
    train: bool,
) -> Result<Var> {
    let offsets = prefix.head_offsets(g, b, &batch.items)?;
    let tokens = encoder.input_tokens(g, b, features, batch, Some(offsets))?;
    let out = encoder.encode_tokens(g, b, tokens, &batch.mask, batch.seq_len, rng, train)?;
    g.embedding_lookup(out, &batch.head_rows())
}

/// Single-item convenience: samples a neighborhood and returns the prompted
/// representation.
pub fn prompted_item_representation<T: Real>(
    encoder: &Encoder<T>,
    prefix: &PrefixTable<T>,
    kg: &MultiDomainKG,
    features: &FeatureTable,
    item: usize,
    rng: &mut RngStream,
    train: bool,
) -> Result<Vec<T>> {
    prefix.row(item)?;
    let batch = SequenceBatch::sample(kg, &[item], encoder.config.n_triples, rng)?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    encoder.bind_frozen(&mut g, &mut b);
    for e in prefix.params.iter() {
        let v = g.constant(e.value.clone());
        b.insert(e.name.clone(), v);
    }
    let h = prompted_representations(&mut g, &b, encoder, prefix, features, &batch, rng, train)?;
    Ok(g.value(h).row(0).to_vec())
}

/// Frozen encoder plus prefix table over a fixed set of tuning items, each
/// with a neighborhood sampled once up front.
#[derive(Clone, Debug)]
pub struct PromptModule<T: Real = f32> {
    pub encoder: Encoder<T>,
    pub prefix: PrefixTable<T>,
    pub config: PromptConfig,
    neighborhoods: HashMap<usize, Neighborhood>,
}

impl<T: Real> PromptModule<T> {
    /// Freezes every encoder tensor and creates zero prefixes for `items`.
    pub fn new(
        mut encoder: Encoder<T>,
        kg: &MultiDomainKG,
        items: &[usize],
        config: PromptConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        encoder.params.set_all_trainable(false);
        let prefix = PrefixTable::new(items, encoder.config.d_model, &config, &mut rng.fork(0))?;
        let mut sample_rng = rng.fork(1);
        let mut neighborhoods = HashMap::with_capacity(items.len());
        for &i in items {
            neighborhoods.insert(
                i,
                kg.sample_item_neighborhood(i, encoder.config.n_triples, &mut sample_rng)?,
            );
        }
        Ok(PromptModule {
            encoder,
            prefix,
            config,
            neighborhoods,
        })
    }

    /// Adds encoder and prefix tensors to `g`, honoring trainable flags.
    pub fn bind(&self, g: &mut Graph<T>, b: &mut Bindings) {
        self.encoder.params.bind(g, b);
        self.prefix.params.bind(g, b);
    }

    pub fn batch(&self, items: &[usize]) -> Result<SequenceBatch> {
        let nbs = items
            .iter()
            .map(|i| {
                self.neighborhoods
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("item {i} has no prefix row")))
            })
            .collect::<Result<Vec<_>>>()?;
        SequenceBatch::from_neighborhoods(items, &nbs)
    }

    /// Prompted representations of `items` as `[items, d_model]`.
    pub fn represent(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        features: &FeatureTable,
        items: &[usize],
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let batch = self.batch(items)?;
        let dropout = train && self.config.dropout;
        prompted_representations(g, b, &self.encoder, &self.prefix, features, &batch, rng, dropout)
    }

    /// Eval-mode prompted representations without gradient tracking.
    pub fn represent_values(&self, features: &FeatureTable, items: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.encoder.bind_frozen(&mut g, &mut b);
        for e in self.prefix.params.iter() {
            let v = g.constant(e.value.clone());
            b.insert(e.name.clone(), v);
        }
        let h = self.represent(&mut g, &b, features, items, &mut RngStream::new(0), false)?;
        Ok(g.value(h).clone())
    }
}

/// Fails naming every tensor of `after` that differs bitwise from `before`.
pub fn verify_frozen_backbone<T: Real>(before: &ParamStore<T>, after: &ParamStore<T>) -> Result<()> {
    let changed = after.changed_since(before);
    if changed.is_empty() {
        Ok(())
    } else {
        Err(Error::FrozenTensorChanged(changed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kg::{build_multidomain_kg, DomainSource, RawTriple};

    fn setup() -> (MultiDomainKG, FeatureTable, Encoder<f64>) {
        let triples = (0..3)
            .flat_map(|i| {
                (0..4).map(move |j| RawTriple {
                    head: format!("item{i}"),
                    relation: format!("r{j}"),
                    tail: format!("v{}", j % 2),
                })
            })
            .collect();
        let kg = build_multidomain_kg(&[DomainSource {
            name: "d".into(),
            triples,
            items: (0..3).map(|i| format!("item{i}")).collect(),
        }])
        .unwrap();
        let features = FeatureTable::hashed(kg.entities().names(), 16, 0);
        let cfg = EncoderConfig {
            d_feat: 16,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            n_triples: 4,
            init_std: 0.2,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, kg.num_relations(), &mut RngStream::new(1)).unwrap();
        (kg, features, enc)
    }

    #[test]
    fn zero_prefix_is_identity() {
        let (kg, features, enc) = setup();
        let prefix = PrefixTable::new(kg.items(), 8, &PromptConfig::default(), &mut RngStream::new(2)).unwrap();
        for &item in kg.items() {
            let plain = enc
                .item_representation(&kg, &features, item, &mut RngStream::new(3), false)
                .unwrap();
            let prompted =
                prompted_item_representation(&enc, &prefix, &kg, &features, item, &mut RngStream::new(3), false)
                    .unwrap();
            assert_eq!(plain, prompted);
        }
    }

    #[test]
    fn projection_has_model_width() {
        let cfg = PromptConfig::default();
        let prefix = PrefixTable::<f32>::new(&[0, 1], 128, &cfg, &mut RngStream::new(0)).unwrap();
        assert_eq!(prefix.params.get(PREFIX_PROJ).unwrap().shape(), &[16, 128]);
        let mut g = Graph::new();
        let mut b = Bindings::new();
        prefix.params.bind(&mut g, &mut b);
        let off = prefix.head_offsets(&mut g, &b, &[1, 0]).unwrap();
        assert_eq!(g.value(off).shape(), &[2, 128]);
    }

    #[test]
    fn distinct_prefixes_separate_identical_items() {
        let (kg, _, enc) = setup();
        // with blank features items sharing all attributes look the same
        let features = FeatureTable::zeros(kg.num_entities(), 16);
        let mut prefix = PrefixTable::new(kg.items(), 8, &PromptConfig::default(), &mut RngStream::new(2)).unwrap();
        let rep = |p: &PrefixTable<f64>, i| {
            prompted_item_representation(&enc, p, &kg, &features, kg.items()[i], &mut RngStream::new(3), false).unwrap()
        };
        let before = (rep(&prefix, 0), rep(&prefix, 1));
        let tokens = prefix.params.get_mut(PREFIX_TOKENS).unwrap();
        tokens.row_mut(0).iter_mut().for_each(|v| *v = 1.0);
        tokens.row_mut(1).iter_mut().for_each(|v| *v = -1.0);
        let after = (rep(&prefix, 0), rep(&prefix, 1));
        let gap = |(a, b): &(Vec<f64>, Vec<f64>)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        assert_eq!(gap(&before), 0.0);
        assert!(gap(&after) > 1e-3);
    }

    #[test]
    fn missing_prefix_row_is_an_error() {
        let (kg, features, enc) = setup();
        let prefix = PrefixTable::new(&kg.items()[..1], 8, &PromptConfig::default(), &mut RngStream::new(2)).unwrap();
        let r = prompted_item_representation(
            &enc,
            &prefix,
            &kg,
            &features,
            kg.items()[2],
            &mut RngStream::new(0),
            false,
        );
        assert!(r.is_err());
    }

    #[test]
    fn frozen_check_names_changed_tensor() {
        let (_, _, enc) = setup();
        let before = enc.params.clone();
        assert!(verify_frozen_backbone(&before, &enc.params).is_ok());
        let mut after = enc.params.clone();
        after.get_mut("encoder.W_proj").unwrap().data_mut()[0] += 1.0;
        let err = verify_frozen_backbone(&before, &after).unwrap_err();
        assert!(err.to_string().contains("W_proj"));
    }
}
