//! Multi-domain knowledge graphs: vocabularies, domain-tagged triples and
//! item neighborhoods.

pub mod bench;
mod features;
mod parse;
pub mod synth;

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;

use crate::autodiff::RngStream;
use crate::error::{Error, Result};

pub use features::{hash_featurize, FeatureTable};
pub(crate) use features::{read_row_file, write_row_file};
pub use parse::{parse_items_file, parse_triple_file, parse_triples, RawTriple};

/// Sentinel index used for padding slots of a [`Neighborhood`].
pub const PAD: usize = usize::MAX;

/// Insertion-ordered string vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
    pub domain: usize,
}

/// Per-domain sub-vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub name: String,
    pub entities: BTreeSet<usize>,
    pub relations: BTreeSet<usize>,
    /// Item entity indices in declaration order.
    pub items: Vec<usize>,
}

/// One domain's raw input to [`build_multidomain_kg`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSource {
    pub name: String,
    pub triples: Vec<RawTriple>,
    pub items: Vec<String>,
}

/// Union of several domain KGs over shared entity and relation vocabularies.
///
/// Immutable once built; safe to share across threads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiDomainKG {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    domains: Vec<Domain>,
    items: Vec<usize>,
    is_item: Vec<bool>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

/// Merges domains; identical strings map to one index. Entity and relation
/// indices follow first appearance over domains in order.
pub fn build_multidomain_kg(sources: &[DomainSource]) -> Result<MultiDomainKG> {
    if sources.is_empty() {
        return Err(Error::InvalidGraph("at least one domain is required".into()));
    }
    let mut entities = Vocab::default();
    let mut relations = Vocab::default();
    let mut triples = Vec::new();
    let mut domains = Vec::with_capacity(sources.len());
    for (d, src) in sources.iter().enumerate() {
        if sources[..d].iter().any(|s| s.name == src.name) {
            return Err(Error::InvalidGraph(format!("duplicate domain name {:?}", src.name)));
        }
        let mut dom = Domain {
            name: src.name.clone(),
            entities: BTreeSet::new(),
            relations: BTreeSet::new(),
            items: Vec::new(),
        };
        for t in &src.triples {
            let head = entities.intern(&t.head);
            let rel = relations.intern(&t.relation);
            let tail = entities.intern(&t.tail);
            dom.entities.extend([head, tail]);
            dom.relations.insert(rel);
            triples.push(Triple {
                head,
                rel,
                tail,
                domain: d,
            });
        }
        domains.push(dom);
    }
    let mut is_item = vec![false; entities.len()];
    for (d, src) in sources.iter().enumerate() {
        for name in &src.items {
            let idx = entities.get(name).ok_or_else(|| {
                Error::InvalidGraph(format!(
                    "item {name:?} declared in domain {:?} never appears in a triple",
                    src.name
                ))
            })?;
            if !domains[d].items.contains(&idx) {
                domains[d].items.push(idx);
            }
            domains[d].entities.insert(idx);
            is_item[idx] = true;
        }
    }
    let items = (0..entities.len()).filter(|&i| is_item[i]).collect();
    let mut kg = MultiDomainKG {
        entities,
        relations,
        triples,
        domains,
        items,
        is_item,
        adjacency: Vec::new(),
    };
    kg.rebuild_adjacency();
    Ok(kg)
}

impl MultiDomainKG {
    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.entities.len()];
        for t in &self.triples {
            adj[t.head].push((t.rel, t.tail));
        }
        self.adjacency = adj;
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    /// All item entity indices, ascending.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn is_item(&self, e: usize) -> bool {
        self.is_item.get(e).copied().unwrap_or(false)
    }

    /// `(relation, tail)` pairs of the triples headed by `item`, in triple order.
    pub fn item_adjacency(&self, item: usize) -> &[(usize, usize)] {
        self.adjacency.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, item: usize) -> usize {
        self.item_adjacency(item).len()
    }

    /// Same vocabularies, restricted to the triples and items of `keep`.
    /// Excluded domains remain listed but hold no triples or items.
    pub fn restrict_to_domains(&self, keep: &[usize]) -> Result<MultiDomainKG> {
        if keep.is_empty() {
            return Err(Error::Config("empty domain selection".into()));
        }
        if let Some(&d) = keep.iter().find(|&&d| d >= self.domains.len()) {
            return Err(Error::Config(format!("domain index {d} out of range")));
        }
        let triples: Vec<Triple> = self
            .triples
            .iter()
            .filter(|t| keep.contains(&t.domain))
            .copied()
            .collect();
        let domains: Vec<Domain> = self
            .domains
            .iter()
            .enumerate()
            .map(|(d, dom)| {
                if keep.contains(&d) {
                    dom.clone()
                } else {
                    Domain {
                        name: dom.name.clone(),
                        entities: BTreeSet::new(),
                        relations: BTreeSet::new(),
                        items: Vec::new(),
                    }
                }
            })
            .collect();
        let mut is_item = vec![false; self.entities.len()];
        for d in keep {
            for &i in &self.domains[*d].items {
                is_item[i] = true;
            }
        }
        let items = (0..self.entities.len()).filter(|&i| is_item[i]).collect();
        let mut kg = MultiDomainKG {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            triples,
            domains,
            items,
            is_item,
            adjacency: Vec::new(),
        };
        kg.rebuild_adjacency();
        Ok(kg)
    }

    /// Raw per-domain triples and item declarations; building from them
    /// reproduces this graph exactly.
    pub fn to_sources(&self) -> Vec<DomainSource> {
        self.domains
            .iter()
            .enumerate()
            .map(|(d, dom)| DomainSource {
                name: dom.name.clone(),
                triples: self
                    .triples
                    .iter()
                    .filter(|t| t.domain == d)
                    .map(|t| RawTriple {
                        head: self.entities.name(t.head).to_string(),
                        relation: self.relations.name(t.rel).to_string(),
                        tail: self.entities.name(t.tail).to_string(),
                    })
                    .collect(),
                items: dom.items.iter().map(|&i| self.entities.name(i).to_string()).collect(),
            })
            .collect()
    }

    /// Draws up to `n` of the item's triples without replacement and pads the
    /// rest. Items with fewer than `n` triples contribute all of them in order.
    pub fn sample_item_neighborhood(&self, item: usize, n: usize, rng: &mut RngStream) -> Result<Neighborhood> {
        if !self.is_item(item) {
            return Err(Error::InvalidGraph(format!("entity {item} is not an item")));
        }
        let adj = self.item_adjacency(item);
        let mut pairs = Vec::with_capacity(n);
        if adj.len() > n {
            for i in index::sample(rng, adj.len(), n) {
                pairs.push(adj[i]);
            }
        } else {
            pairs.extend_from_slice(adj);
        }
        let valid = pairs.len();
        pairs.resize(n, (PAD, PAD));
        let mask = (0..n).map(|i| i < valid).collect();
        Ok(Neighborhood { pairs, mask })
    }
}

/// Fixed-length list of `(relation, tail)` pairs with a validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub pairs: Vec<(usize, usize)>,
    pub mask: Vec<bool>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
