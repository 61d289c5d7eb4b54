//! Recommendation adapter: user/item embeddings, optional graph propagation,
//! injection of prompted item representations, and BPR training.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, RngStream, SparseMatrix, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::bench::InteractionSplits;
use crate::kg::{FeatureTable, MultiDomainKG};
use crate::metrics::{ranking_metrics, RankingMetrics};
use crate::params::{normal_tensor, Adam, AdamConfig, Bindings, ParamStore};
use crate::ppt::PromptModule;

pub const USER_EMB: &str = "rec.user_emb";
pub const ITEM_EMB: &str = "rec.item_emb";
pub const PROJ: &str = "rec.proj";

const NEGATIVE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

/// User–item interactions of one domain, split per user.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub n_users: usize,
    /// KG entity index of each item.
    pub item_entities: Vec<usize>,
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    train_pos: Vec<BTreeSet<usize>>,
}

impl InteractionGraph {
    pub fn new(
        n_users: usize,
        item_entities: Vec<usize>,
        train: Vec<(usize, usize)>,
        valid: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n_items = item_entities.len();
        let mut seen: HashMap<(usize, usize), &str> = HashMap::new();
        for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
            for &(u, i) in split.iter() {
                if u >= n_users || i >= n_items {
                    return Err(Error::Config(format!("{name} edge ({u}, {i}) out of range")));
                }
                if let Some(prev) = seen.insert((u, i), name) {
                    return Err(Error::Config(format!(
                        "edge ({u}, {i}) appears in both {prev} and {name}"
                    )));
                }
            }
        }
        let mut train_pos = vec![BTreeSet::new(); n_users];
        for &(u, i) in &train {
            train_pos[u].insert(i);
        }
        Ok(InteractionGraph {
            n_users,
            item_entities,
            train,
            valid,
            test,
            train_pos,
        })
    }

    /// Maps string splits onto the domain's item list. Users are numbered in
    /// order of first appearance.
    pub fn from_splits(kg: &MultiDomainKG, domain: usize, splits: &InteractionSplits) -> Result<Self> {
        let dom = kg
            .domains()
            .get(domain)
            .ok_or_else(|| Error::Config(format!("domain index {domain} out of range")))?;
        let item_entities = dom.items.clone();
        let item_index: HashMap<&str, usize> = item_entities
            .iter()
            .enumerate()
            .map(|(i, &e)| (kg.entities().name(e), i))
            .collect();
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut map = |rows: &[(String, String)]| -> Result<Vec<(usize, usize)>> {
            rows.iter()
                .map(|(u, i)| {
                    let n = users.len();
                    let uid = *users.entry(u.clone()).or_insert(n);
                    let iid = *item_index.get(i.as_str()).ok_or_else(|| {
                        Error::Config(format!("interaction item {i:?} is not an item of {:?}", dom.name))
                    })?;
                    Ok((uid, iid))
                })
                .collect()
        };
        let train = map(&splits.train)?;
        let valid = map(&splits.valid)?;
        let test = map(&splits.test)?;
        InteractionGraph::new(users.len(), item_entities, train, valid, test)
    }

    pub fn n_items(&self) -> usize {
        self.item_entities.len()
    }

    pub fn train_positives(&self, user: usize) -> &BTreeSet<usize> {
        &self.train_pos[user]
    }

    pub fn held_out(&self, split: Split) -> Vec<Vec<usize>> {
        let edges = match split {
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        let mut out = vec![Vec::new(); self.n_users];
        for &(u, i) in edges {
            out[u].push(i);
        }
        out
    }

    /// Symmetric-normalized adjacency over `users ++ items` built from train
    /// edges, with coefficient `1 / sqrt(deg_u * deg_i)`.
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        let nu = self.n_users;
        let n = nu + self.n_items();
        let mut deg = vec![0usize; n];
        for &(u, i) in &self.train {
            deg[u] += 1;
            deg[nu + i] += 1;
        }
        let mut entries = Vec::with_capacity(2 * self.train.len());
        for &(u, i) in &self.train {
            let w = 1.0 / ((deg[u] * deg[nu + i]) as f64).sqrt();
            entries.push((u, nu + i, w));
            entries.push((nu + i, u, w));
        }
        SparseMatrix::from_entries(n, n, entries)
    }
}

/// Uniform item with no train interaction for `user`.
pub fn sample_negative(graph: &InteractionGraph, user: usize, rng: &mut RngStream) -> Result<usize> {
    let pos = graph.train_positives(user);
    for _ in 0..NEGATIVE_ATTEMPTS {
        let i = rng.below(graph.n_items());
        if !pos.contains(&i) {
            return Ok(i);
        }
    }
    let free: Vec<usize> = (0..graph.n_items()).filter(|i| !pos.contains(i)).collect();
    if free.is_empty() {
        return Err(Error::NegativeSampling {
            user,
            attempts: NEGATIVE_ATTEMPTS,
        });
    }
    Ok(free[rng.below(free.len())])
}

/// Items by descending score, ties broken by lower index, with `exclude`
/// removed.
pub fn rank_items<T: Real>(scores: &[T], exclude: &BTreeSet<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Mf,
    GraphProp { layers: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecConfig {
    pub d_rec: usize,
    pub backbone: Backbone,
    /// L2 weight on the batch's user and item embeddings.
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
}

impl Default for RecConfig {
    fn default() -> Self {
        RecConfig {
            d_rec: 32,
            backbone: Backbone::Mf,
            mu: 1e-4,
            learning_rate: 5e-3,
            batch_size: 256,
            epochs: 30,
            init_std: 0.1,
        }
    }
}

/// Embedding tables plus, when prompted, the `d_model → d_rec` projection.
#[derive(Clone, Debug)]
pub struct RecModel<T: Real = f32> {
    pub config: RecConfig,
    pub params: ParamStore<T>,
    adjacency: Arc<SparseMatrix>,
    n_users: usize,
}

impl<T: Real> RecModel<T> {
    pub fn new(
        config: RecConfig,
        graph: &InteractionGraph,
        prompt_dim: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if config.d_rec == 0 || config.batch_size == 0 {
            return Err(Error::Config("d_rec and batch_size must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        params.insert(
            USER_EMB,
            normal_tensor(vec![graph.n_users, config.d_rec], config.init_std, rng),
            true,
        )?;
        params.insert(
            ITEM_EMB,
            normal_tensor(vec![graph.n_items(), config.d_rec], config.init_std, rng),
            true,
        )?;
        // zero projection: the untuned model scores exactly like the plain backbone
        if let Some(d_model) = prompt_dim {
            params.insert(PROJ, Tensor::zeros(vec![d_model, config.d_rec]), true)?;
        }
        Ok(RecModel {
            config,
            params,
            adjacency: Arc::new(graph.normalized_adjacency()),
            n_users: graph.n_users,
        })
    }

    /// Final `(users, items)` embeddings. `prompted` is `[items, d_model]`;
    /// it is scaled by `1/√d_model`, projected and added to the item table
    /// before propagation.
    pub fn propagate(&self, g: &mut Graph<T>, b: &Bindings, prompted: Option<Var>) -> Result<(Var, Var)> {
        let users = b.get(USER_EMB)?;
        let mut items = b.get(ITEM_EMB)?;
        if let Some(h) = prompted {
            let d_model = g.value(h).cols();
            let h = g.scale(h, 1.0 / (d_model as f64).sqrt())?;
            let p = g.matmul(h, b.get(PROJ)?)?;
            items = g.add(items, p)?;
        }
        match self.config.backbone {
            Backbone::Mf => Ok((users, items)),
            Backbone::GraphProp { layers } => {
                if layers == 0 {
                    return Ok((users, items));
                }
                let e0 = g.concat_rows(&[users, items])?;
                let mut layer = e0;
                let mut acc = e0;
                for _ in 0..layers {
                    layer = g.spmm(&self.adjacency, layer)?;
                    acc = g.add(acc, layer)?;
                }
                let mean = g.scale(acc, 1.0 / (layers + 1) as f64)?;
                let n = g.value(mean).rows();
                let u: Vec<Option<usize>> = (0..self.n_users).map(Some).collect();
                let i: Vec<Option<usize>> = (self.n_users..n).map(Some).collect();
                Ok((g.embedding_lookup(mean, &u)?, g.embedding_lookup(mean, &i)?))
            }
        }
    }

    /// BPR objective over `(user, positive, negative)` triples.
    pub fn bpr_loss(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        prompted: Option<Var>,
        triples: &[(usize, usize, usize)],
    ) -> Result<BprLoss> {
        let (users, items) = self.propagate(g, b, prompted)?;
        let (u_idx, p_idx, n_idx) = split_triples(triples);
        bpr_objective(
            g,
            users,
            items,
            b.get(USER_EMB)?,
            b.get(ITEM_EMB)?,
            &u_idx,
            &p_idx,
            &n_idx,
            self.config.mu,
        )
    }

    /// Score matrix `[users, items]` as plain values.
    pub fn scores(&self, prompted: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        for e in self.params.iter() {
            let v = g.constant(e.value.clone());
            b.insert(e.name.clone(), v);
        }
        let p = prompted.map(|t| g.constant(t.clone()));
        let (u, i) = self.propagate(&mut g, &b, p)?;
        let s = g.matmul_nt(u, i)?;
        Ok(g.value(s).clone())
    }
}

type Idx = Vec<Option<usize>>;

fn split_triples(triples: &[(usize, usize, usize)]) -> (Idx, Idx, Idx) {
    (
        triples.iter().map(|t| Some(t.0)).collect(),
        triples.iter().map(|t| Some(t.1)).collect(),
        triples.iter().map(|t| Some(t.2)).collect(),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct BprLoss {
    /// `Σ -log σ(y_pos - y_neg) + mu · Σ ‖ego rows‖²`.
    pub sum: Var,
    /// `sum / B`, the stepped objective.
    pub mean: Var,
}

/// BPR with L2 on the ego (pre-propagation) rows used by the batch.
#[allow(clippy::too_many_arguments)]
pub fn bpr_objective<T: Real>(
    g: &mut Graph<T>,
    users: Var,
    items: Var,
    user_ego: Var,
    item_ego: Var,
    u: &[Option<usize>],
    pos: &[Option<usize>],
    neg: &[Option<usize>],
    mu: f64,
) -> Result<BprLoss> {
    let ub = g.embedding_lookup(users, u)?;
    let vb = g.embedding_lookup(items, pos)?;
    let wb = g.embedding_lookup(items, neg)?;
    let uv = g.mul(ub, vb)?;
    let uw = g.mul(ub, wb)?;
    let y_pos = g.row_sums(uv)?;
    let y_neg = g.row_sums(uw)?;
    let diff = g.sub(y_pos, y_neg)?;
    let ls = g.log_sigmoid(diff)?;
    let s = g.sum(ls)?;
    let mut sum = g.scale(s, -1.0)?;
    if mu != 0.0 {
        let mut reg_terms = Vec::with_capacity(3);
        for (table, idx) in [(user_ego, u), (item_ego, pos), (item_ego, neg)] {
            let rows = g.embedding_lookup(table, idx)?;
            let sq = g.mul(rows, rows)?;
            reg_terms.push(g.sum(sq)?);
        }
        let r01 = g.add(reg_terms[0], reg_terms[1])?;
        let reg = g.add(r01, reg_terms[2])?;
        let reg = g.scale(reg, mu)?;
        sum = g.add(sum, reg)?;
    }
    let mean = g.scale(sum, 1.0 / u.len().max(1) as f64)?;
    Ok(BprLoss { sum, mean })
}

/// BPR training of a [`RecModel`], optionally enhanced by prompted item
/// representations from a frozen encoder.
#[derive(Debug)]
pub struct RecTrainer<T: Real = f32> {
    pub graph: InteractionGraph,
    pub model: RecModel<T>,
    pub prompt: Option<PromptModule<T>>,
    adam: Adam<T>,
    rng: RngStream,
    steps: usize,
}

impl<T: Real> RecTrainer<T> {
    pub fn new(graph: InteractionGraph, config: RecConfig, prompt: Option<PromptModule<T>>, seed: u64) -> Result<Self> {
        if graph.train.is_empty() {
            return Err(Error::Config("no training interactions".into()));
        }
        let root = RngStream::new(seed);
        if let Some(p) = &prompt {
            for &e in &graph.item_entities {
                p.prefix.row(e)?;
            }
        }
        let dim = prompt.as_ref().map(|p| p.encoder.config.d_model);
        let model = RecModel::new(config.clone(), &graph, dim, &mut root.fork(0))?;
        Ok(RecTrainer {
            adam: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            graph,
            model,
            prompt,
            rng: root.fork(1),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Prompted rows for the items a batch touches; other rows are zero.
    fn prompted_var(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        features: &FeatureTable,
        items: &[usize],
        rng: &mut RngStream,
    ) -> Result<Option<Var>> {
        let Some(p) = &self.prompt else { return Ok(None) };
        let needed: Vec<usize> = match self.model.config.backbone {
            Backbone::Mf => items.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            Backbone::GraphProp { .. } => (0..self.graph.n_items()).collect(),
        };
        let entities: Vec<usize> = needed.iter().map(|&i| self.graph.item_entities[i]).collect();
        let reps = p.represent(g, b, features, &entities, rng, true)?;
        let mut at = vec![None; self.graph.n_items()];
        for (r, &i) in needed.iter().enumerate() {
            at[i] = Some(r);
        }
        Ok(Some(g.embedding_lookup(reps, &at)?))
    }

    /// One BPR step on `(user, positive)` pairs; returns the summed loss.
    pub fn step(&mut self, features: &FeatureTable, pairs: &[(usize, usize)]) -> Result<f64> {
        let mut triples = Vec::with_capacity(pairs.len());
        for &(u, i) in pairs {
            triples.push((u, i, sample_negative(&self.graph, u, &mut self.rng)?));
        }
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.model.params.bind(&mut g, &mut b);
        if let Some(p) = &self.prompt {
            p.bind(&mut g, &mut b);
        }
        let touched: Vec<usize> = triples.iter().flat_map(|t| [t.1, t.2]).collect();
        let mut rng = self.rng.clone();
        let prompted = self.prompted_var(&mut g, &b, features, &touched, &mut rng)?;
        self.rng = rng;
        let loss = self.model.bpr_loss(&mut g, &b, prompted, &triples)?;
        let value = g.value(loss.sum).item().f64();
        g.backward(loss.mean)?;
        match &mut self.prompt {
            Some(p) => self.adam.step(
                &mut [&mut self.model.params, &mut p.prefix.params, &mut p.encoder.params],
                &b,
                &g,
            )?,
            None => self.adam.step(&mut [&mut self.model.params], &b, &g)?,
        }
        self.steps += 1;
        Ok(value)
    }

    /// One shuffled pass over the train edges; returns the mean per-pair loss.
    pub fn train_epoch(&mut self, features: &FeatureTable) -> Result<f64> {
        let mut edges = self.graph.train.clone();
        edges.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in edges.chunks(self.model.config.batch_size) {
            total += self.step(features, chunk)?;
        }
        Ok(total / edges.len() as f64)
    }

    pub fn scores(&self, features: &FeatureTable) -> Result<Tensor<T>> {
        let prompted = match &self.prompt {
            Some(p) => Some(p.represent_values(features, &self.graph.item_entities)?),
            None => None,
        };
        self.model.scores(prompted.as_ref())
    }

    /// Full ranking over all items minus each user's train positives.
    pub fn evaluate(&self, features: &FeatureTable, split: Split) -> Result<RankingMetrics> {
        let scores = self.scores(features)?;
        let rankings: Vec<Vec<usize>> = (0..self.graph.n_users)
            .into_par_iter()
            .map(|u| rank_items(scores.row(u), self.graph.train_positives(u)))
            .collect();
        Ok(ranking_metrics(&rankings, &self.graph.held_out(split)))
    }
}

#[cfg(test)]
mod tests;
