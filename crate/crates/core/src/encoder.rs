//! Item-centric transformer encoder without positional embeddings.
//!
//! A sequence is one item (head token) followed by `n` of its
//! `(relation, tail)` triples. Tokens are projected frozen entity features;
//! tail tokens also get their relation embedding added.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::{FeatureTable, MultiDomainKG, Neighborhood, PAD};
use crate::params::{normal_tensor, Bindings, ParamStore};

pub const W_PROJ: &str = "encoder.W_proj";
pub const RELATIONS: &str = "encoder.relations";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Triples per sequence.
    pub n_triples: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_feat: 768,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            layers: 2,
            n_triples: 8,
            dropout: 0.1,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

fn layer_name(l: usize, part: &str) -> String {
    format!("encoder.layer{l}.{part}")
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_feat", self.d_feat),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("n_triples", self.n_triples),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.init_std < 0.0 || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("init_std must be >= 0 and layer_norm_eps > 0".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.n_triples + 1
    }

    /// Name and shape of every encoder tensor, in storage order.
    pub fn param_specs(&self, n_relations: usize) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut specs = vec![
            (W_PROJ.to_string(), vec![self.d_feat, d]),
            (RELATIONS.to_string(), vec![n_relations, d]),
        ];
        for l in 0..self.layers {
            for part in ["W_q", "W_k", "W_v", "W_o"] {
                specs.push((layer_name(l, part), vec![d, d]));
            }
            specs.push((layer_name(l, "ffn.W1"), vec![d, f]));
            specs.push((layer_name(l, "ffn.b1"), vec![f]));
            specs.push((layer_name(l, "ffn.W2"), vec![f, d]));
            specs.push((layer_name(l, "ffn.b2"), vec![d]));
            for ln in ["ln1", "ln2"] {
                specs.push((layer_name(l, &format!("{ln}.gamma")), vec![d]));
                specs.push((layer_name(l, &format!("{ln}.beta")), vec![d]));
            }
        }
        specs
    }

    /// Closed-form element count of the encoder tensors.
    pub fn param_count(&self, n_relations: usize) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
        self.d_feat * d + n_relations * d + self.layers * per_layer
    }
}

/// One item's token matrix and validity mask, head first.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Several item sequences of equal length stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub items: Vec<usize>,
    pub seq_len: usize,
    /// Entity per token row; `None` for padding.
    pub entity_rows: Vec<Option<usize>>,
    /// Relation per token row; `None` for heads and padding.
    pub relation_rows: Vec<Option<usize>>,
    pub mask: Vec<bool>,
}

impl SequenceBatch {
    pub fn from_neighborhoods(items: &[usize], neighborhoods: &[Neighborhood]) -> Result<Self> {
        let Some(first) = neighborhoods.first() else {
            return Err(Error::Config("empty sequence batch".into()));
        };
        let seq_len = first.len() + 1;
        if items.len() != neighborhoods.len() || neighborhoods.iter().any(|nb| nb.len() + 1 != seq_len) {
            return Err(Error::Config(
                "neighborhoods must be one per item and of equal length".into(),
            ));
        }
        let rows = items.len() * seq_len;
        let mut batch = SequenceBatch {
            items: items.to_vec(),
            seq_len,
            entity_rows: Vec::with_capacity(rows),
            relation_rows: Vec::with_capacity(rows),
            mask: Vec::with_capacity(rows),
        };
        for (&item, nb) in items.iter().zip(neighborhoods) {
            batch.entity_rows.push(Some(item));
            batch.relation_rows.push(None);
            batch.mask.push(true);
            for (&(rel, tail), &valid) in nb.pairs.iter().zip(&nb.mask) {
                let keep = valid && rel != PAD && tail != PAD;
                batch.entity_rows.push(keep.then_some(tail));
                batch.relation_rows.push(keep.then_some(rel));
                batch.mask.push(keep);
            }
        }
        Ok(batch)
    }

    /// Samples a fresh neighborhood per item.
    pub fn sample(kg: &MultiDomainKG, items: &[usize], n: usize, rng: &mut RngStream) -> Result<Self> {
        let nbs = items
            .iter()
            .map(|&i| kg.sample_item_neighborhood(i, n, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_neighborhoods(items, &nbs)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Row of each sequence's head token.
    pub fn head_rows(&self) -> Vec<Option<usize>> {
        (0..self.len()).map(|b| Some(b * self.seq_len)).collect()
    }

    /// Rows of all tail positions, `n` per item.
    pub fn tail_rows(&self) -> Vec<Option<usize>> {
        (0..self.len())
            .flat_map(|b| (1..self.seq_len).map(move |j| Some(b * self.seq_len + j)))
            .collect()
    }

    pub fn tail_mask(&self) -> Vec<bool> {
        (0..self.len())
            .flat_map(|b| (1..self.seq_len).map(move |j| self.mask[b * self.seq_len + j]))
            .collect()
    }

    pub fn tail_relations(&self) -> Vec<Option<usize>> {
        (0..self.len())
            .flat_map(|b| (1..self.seq_len).map(move |j| self.relation_rows[b * self.seq_len + j]))
            .collect()
    }
}

/// Encoder configuration plus its named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real = f32> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Encoder<T> {
    /// Weights `N(0, init_std²)`, layer-norm scale 1 and shift 0, biases 0.
    pub fn new(config: EncoderConfig, n_relations: usize, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_specs(n_relations) {
            let value = if name.ends_with(".gamma") {
                Tensor::new(shape.clone(), vec![T::one(); shape[0]])?
            } else if name.ends_with(".beta") || name.contains(".b1") || name.contains(".b2") {
                Tensor::zeros(shape)
            } else {
                normal_tensor(shape, config.init_std, rng)
            };
            params.insert(name, value, true)?;
        }
        Ok(Encoder { config, params })
    }

    /// Wraps loaded tensors, checking every expected name and shape.
    pub fn from_params(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let n_rel = params.get(RELATIONS)?.shape().first().copied().unwrap_or(0);
        for (name, shape) in config.param_specs(n_rel) {
            let found = params.get(&name)?.shape();
            if found != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: found.to_vec(),
                });
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn n_relations(&self) -> usize {
        self.params.get(RELATIONS).map(|t| t.shape()[0]).unwrap_or(0)
    }

    /// Token matrix `[B·S, d_model]`. `head_offset`, when given, is a
    /// `[B, d_model]` term added to each head token.
    pub fn input_tokens(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        features: &FeatureTable,
        batch: &SequenceBatch,
        head_offset: Option<Var>,
    ) -> Result<Var> {
        if features.dim() != self.config.d_feat {
            return Err(Error::shape(
                "input_tokens",
                format!(
                    "feature dim {} but encoder expects {}",
                    features.dim(),
                    self.config.d_feat
                ),
            ));
        }
        let feats = g.constant(features.gather(&batch.entity_rows)?);
        let proj = g.matmul(feats, b.get(W_PROJ)?)?;
        let rel = g.embedding_lookup(b.get(RELATIONS)?, &batch.relation_rows)?;
        let mut tokens = g.add(proj, rel)?;
        if let Some(off) = head_offset {
            let idx: Vec<Option<usize>> = (0..batch.entity_rows.len())
                .map(|r| (r % batch.seq_len == 0).then_some(r / batch.seq_len))
                .collect();
            let spread = g.embedding_lookup(off, &idx)?;
            tokens = g.add(tokens, spread)?;
        }
        Ok(tokens)
    }

    /// Runs every layer over stacked sequences; padding rows come out zero.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_tokens(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        tokens: Var,
        mask: &[bool],
        seq_len: usize,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let c = &self.config;
        let mut x = tokens;
        for l in 0..c.layers {
            let p = |part: &str| b.get(&layer_name(l, part));
            let q = g.matmul(x, p("W_q")?)?;
            let k = g.matmul(x, p("W_k")?)?;
            let v = g.matmul(x, p("W_v")?)?;
            let att = g.attention(q, k, v, mask, seq_len, c.heads, c.dropout, rng, train)?;
            let o = g.matmul(att, p("W_o")?)?;
            let res = g.add(x, o)?;
            let ln = g.layer_norm(res, p("ln1.gamma")?, p("ln1.beta")?, c.layer_norm_eps)?;
            x = g.mask_rows(ln, mask)?;

            let h = g.matmul(x, p("ffn.W1")?)?;
            let h = g.add_bias(h, p("ffn.b1")?)?;
            let h = g.relu(h)?;
            let h = g.dropout(h, c.dropout, rng, train)?;
            let f = g.matmul(h, p("ffn.W2")?)?;
            let f = g.add_bias(f, p("ffn.b2")?)?;
            let res = g.add(x, f)?;
            let ln = g.layer_norm(res, p("ln2.gamma")?, p("ln2.beta")?, c.layer_norm_eps)?;
            x = g.mask_rows(ln, mask)?;
        }
        Ok(x)
    }

    /// Builds the token matrix of a single item.
    pub fn build_input_sequence(
        &self,
        features: &FeatureTable,
        item: usize,
        neighborhood: &Neighborhood,
    ) -> Result<InputSequence<T>> {
        let batch = SequenceBatch::from_neighborhoods(&[item], std::slice::from_ref(neighborhood))?;
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.bind_frozen(&mut g, &mut b);
        let tokens = self.input_tokens(&mut g, &b, features, &batch, None)?;
        Ok(InputSequence {
            tokens: g.value(tokens).clone(),
            mask: batch.mask,
        })
    }

    /// Encodes one prepared sequence; row 0 of the result is the item
    /// representation.
    pub fn encode(&self, seq: &InputSequence<T>, rng: &mut RngStream, train: bool) -> Result<Tensor<T>> {
        if seq.tokens.shape() != [seq.mask.len(), self.config.d_model] {
            return Err(Error::shape(
                "encode",
                format!("tokens {:?} with mask of length {}", seq.tokens.shape(), seq.mask.len()),
            ));
        }
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.bind_frozen(&mut g, &mut b);
        let t = g.constant(seq.tokens.clone());
        let out = self.encode_tokens(&mut g, &b, t, &seq.mask, seq.mask.len(), rng, train)?;
        Ok(g.value(out).clone())
    }

    /// Samples a neighborhood, then builds and encodes it.
    pub fn item_representation(
        &self,
        kg: &MultiDomainKG,
        features: &FeatureTable,
        item: usize,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Vec<T>> {
        let nb = kg.sample_item_neighborhood(item, self.config.n_triples, rng)?;
        let seq = self.build_input_sequence(features, item, &nb)?;
        let out = self.encode(&seq, rng, train)?;
        Ok(out.row(0).to_vec())
    }

    /// Item representations `[items, d_model]` for a prepared batch, without
    /// gradient tracking.
    pub fn represent(
        &self,
        features: &FeatureTable,
        batch: &SequenceBatch,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.bind_frozen(&mut g, &mut b);
        let tokens = self.input_tokens(&mut g, &b, features, batch, None)?;
        let out = self.encode_tokens(&mut g, &b, tokens, &batch.mask, batch.seq_len, rng, train)?;
        let heads = g.embedding_lookup(out, &batch.head_rows())?;
        Ok(g.value(heads).clone())
    }

    /// Binds every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>, b: &mut Bindings) {
        for e in self.params.iter() {
            let v = g.constant(e.value.clone());
            b.insert(e.name.clone(), v);
        }
    }
}
