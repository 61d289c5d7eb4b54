//! Text classification adapter: a pluggable pooled text encoder, fusion with
//! prompted item representations, and a softmax classifier.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::bench::{TextExample, TextTask};
use crate::kg::{hash_featurize, read_row_file, write_row_file, FeatureTable, MultiDomainKG};
use crate::metrics::{binary_metrics, multiclass_metrics, BinaryMetrics, MulticlassMetrics};
use crate::params::{normal_tensor, Adam, AdamConfig, Bindings, ParamStore};
use crate::ppt::PromptModule;

pub const TEXT_W: &str = "text.W_t";
pub const TEXT_B: &str = "text.b_t";
pub const FUSE: &str = "text.fuse";
pub const CLS_W: &str = "text.W_c";
pub const CLS_B: &str = "text.b_c";

const POOLED_MAGIC: &[u8; 4] = b"MDKP";

/// What a pooled encoder sees of one example.
#[derive(Clone, Copy, Debug)]
pub struct TextInput<'a> {
    /// Position of the example in train ++ valid ++ test order.
    pub row: usize,
    pub text: &'a str,
    pub item_text: &'a str,
}

/// Produces one pooled vector per example.
pub trait PooledEncoder<T: Real> {
    fn dim(&self) -> usize;
    /// Registers the encoder's trainable tensors, if any.
    fn init_params(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()>;
    /// `[inputs, dim]` pooled vectors.
    fn pooled(&self, g: &mut Graph<T>, b: &Bindings, inputs: &[TextInput<'_>]) -> Result<Var>;
}

/// Hashes `text + " " + item_text` and applies one trainable ReLU layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashingEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl<T: Real> PooledEncoder<T> for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        let std = 1.0 / (self.dim as f64).sqrt();
        store.insert(TEXT_W, normal_tensor(vec![self.dim, self.dim], std, rng), true)?;
        store.insert(TEXT_B, Tensor::zeros(vec![self.dim]), true)
    }

    fn pooled(&self, g: &mut Graph<T>, b: &Bindings, inputs: &[TextInput<'_>]) -> Result<Var> {
        let mut data = Vec::with_capacity(inputs.len() * self.dim);
        for x in inputs {
            let joined = format!("{} {}", x.text, x.item_text);
            data.extend(
                hash_featurize(&joined, self.dim, self.seed)
                    .into_iter()
                    .map(|v| T::of(v as f64)),
            );
        }
        let x = g.constant(Tensor::new(vec![inputs.len(), self.dim], data)?);
        let h = g.matmul(x, b.get(TEXT_W)?)?;
        let h = g.add_bias(h, b.get(TEXT_B)?)?;
        g.relu(h)
    }
}

/// Pooled vectors supplied from a file, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEncoder {
    vectors: FeatureTable,
}

impl PrecomputedEncoder {
    pub fn new(vectors: FeatureTable) -> Self {
        PrecomputedEncoder { vectors }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, dim, data) = read_row_file(&bytes, POOLED_MAGIC, "pooled-vector")?;
        Ok(PrecomputedEncoder {
            vectors: FeatureTable::new(dim, data)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = (0..self.vectors.rows())
            .flat_map(|r| self.vectors.row(r).to_vec())
            .collect();
        let bytes = write_row_file(POOLED_MAGIC, self.vectors.rows(), self.vectors.dim(), &data);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn rows(&self) -> usize {
        self.vectors.rows()
    }
}

impl<T: Real> PooledEncoder<T> for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.vectors.dim()
    }

    fn init_params(&self, _: &mut ParamStore<T>, _: &mut RngStream) -> Result<()> {
        Ok(())
    }

    fn pooled(&self, g: &mut Graph<T>, _: &Bindings, inputs: &[TextInput<'_>]) -> Result<Var> {
        let idx: Vec<Option<usize>> = inputs.iter().map(|x| Some(x.row)).collect();
        Ok(g.constant(self.vectors.gather(&idx)?))
    }
}

/// Classifier head: `(O + (h/√d_model) · fuse) · W_c + b_c`.
#[derive(Clone, Debug)]
pub struct TextHead;

impl TextHead {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        d_text: usize,
        n_labels: usize,
        prompt_dim: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<()> {
        if n_labels < 2 {
            return Err(Error::Config("at least 2 labels are required".into()));
        }
        if let Some(d_model) = prompt_dim {
            store.insert(FUSE, Tensor::zeros(vec![d_model, d_text]), true)?;
        }
        store.insert(
            CLS_W,
            normal_tensor(vec![d_text, n_labels], 1.0 / (d_text as f64).sqrt(), rng),
            true,
        )?;
        store.insert(CLS_B, Tensor::zeros(vec![n_labels]), true)
    }

    /// Logits `[B, |C|]`.
    pub fn logits<T: Real>(g: &mut Graph<T>, b: &Bindings, pooled: Var, prompted: Option<Var>) -> Result<Var> {
        let mut x = pooled;
        if let Some(h) = prompted {
            let d_model = g.value(h).cols();
            let h = g.scale(h, 1.0 / (d_model as f64).sqrt())?;
            let f = g.matmul(h, b.get(FUSE)?)?;
            x = g.add(x, f)?;
        }
        let z = g.matmul(x, b.get(CLS_W)?)?;
        g.add_bias(z, b.get(CLS_B)?)
    }

    /// Mean cross-entropy.
    pub fn loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = g.log_softmax_rows(logits, None)?;
        let picked = g.pick(logp, labels)?;
        let m = g.mean(picked)?;
        g.scale(m, -1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub d_text: usize,
    pub hash_seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            d_text: 64,
            hash_seed: 0,
            learning_rate: 5e-3,
            batch_size: 64,
            epochs: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextSplit {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub loss: f64,
    pub multiclass: MulticlassMetrics,
    /// Present for two-label tasks.
    pub binary: Option<BinaryMetrics>,
}

/// Trains the head (and a trainable pooled encoder), optionally fused with
/// prompted item representations.
pub struct TextTrainer<T: Real, E: PooledEncoder<T>> {
    pub task: TextTask,
    pub encoder: E,
    pub params: ParamStore<T>,
    pub prompt: Option<PromptModule<T>>,
    pub warnings: Vec<String>,
    config: TextConfig,
    item_entities: HashMap<String, usize>,
    adam: Adam<T>,
    rng: RngStream,
    steps: usize,
}

impl<T: Real, E: PooledEncoder<T>> TextTrainer<T, E> {
    pub fn new(
        kg: &MultiDomainKG,
        task: TextTask,
        encoder: E,
        config: TextConfig,
        prompt: Option<PromptModule<T>>,
        seed: u64,
    ) -> Result<Self> {
        if task.train.is_empty() {
            return Err(Error::Config("text task has no training examples".into()));
        }
        let mut item_entities = HashMap::new();
        for e in task.train.iter().chain(&task.valid).chain(&task.test) {
            if e.label >= task.n_labels {
                return Err(Error::Config(format!("label {} out of range", e.label)));
            }
            let ent = kg
                .entities()
                .get(&e.item)
                .filter(|&i| kg.is_item(i))
                .ok_or_else(|| Error::Config(format!("text example refers to unknown item {:?}", e.item)))?;
            if let Some(p) = &prompt {
                p.prefix.row(ent)?;
            }
            item_entities.insert(e.item.clone(), ent);
        }
        let present: BTreeSet<usize> = task.train.iter().map(|e| e.label).collect();
        let warnings = (0..task.n_labels)
            .filter(|c| !present.contains(c))
            .map(|c| format!("class {c} is absent from the training split"))
            .collect();
        let root = RngStream::new(seed);
        let mut params = ParamStore::new();
        encoder.init_params(&mut params, &mut root.fork(0))?;
        let dim = prompt.as_ref().map(|p| p.encoder.config.d_model);
        TextHead::init(&mut params, encoder.dim(), task.n_labels, dim, &mut root.fork(1))?;
        Ok(TextTrainer {
            adam: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            task,
            encoder,
            params,
            prompt,
            warnings,
            config,
            item_entities,
            rng: root.fork(2),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn examples(&self, split: TextSplit) -> (&[TextExample], usize) {
        let (ntr, nva) = (self.task.train.len(), self.task.valid.len());
        match split {
            TextSplit::Train => (&self.task.train, 0),
            TextSplit::Valid => (&self.task.valid, ntr),
            TextSplit::Test => (&self.task.test, ntr + nva),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        features: &FeatureTable,
        split: TextSplit,
        rows: &[usize],
        train: bool,
        rng: &mut RngStream,
    ) -> Result<(Var, Vec<usize>)> {
        let (examples, offset) = self.examples(split);
        let inputs: Vec<TextInput<'_>> = rows
            .iter()
            .map(|&r| TextInput {
                row: offset + r,
                text: &examples[r].text,
                item_text: &examples[r].item,
            })
            .collect();
        let pooled = self.encoder.pooled(g, b, &inputs)?;
        let prompted = match &self.prompt {
            Some(p) => {
                let ents: Vec<usize> = rows.iter().map(|&r| self.item_entities[&examples[r].item]).collect();
                let uniq: Vec<usize> = ents.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                let reps = p.represent(g, b, features, &uniq, rng, train)?;
                let at: Vec<Option<usize>> = ents.iter().map(|e| uniq.binary_search(e).ok()).collect();
                Some(g.embedding_lookup(reps, &at)?)
            }
            None => None,
        };
        let logits = TextHead::logits(g, b, pooled, prompted)?;
        Ok((logits, rows.iter().map(|&r| examples[r].label).collect()))
    }

    fn bind(&self, g: &mut Graph<T>, b: &mut Bindings, frozen: bool) {
        if frozen {
            for e in self.params.iter() {
                let v = g.constant(e.value.clone());
                b.insert(e.name.clone(), v);
            }
            if let Some(p) = &self.prompt {
                p.encoder.bind_frozen(g, b);
                for e in p.prefix.params.iter() {
                    let v = g.constant(e.value.clone());
                    b.insert(e.name.clone(), v);
                }
            }
        } else {
            self.params.bind(g, b);
            if let Some(p) = &self.prompt {
                p.bind(g, b);
            }
        }
    }

    /// One step on the given train rows; returns the mean loss.
    pub fn step(&mut self, features: &FeatureTable, rows: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.bind(&mut g, &mut b, false);
        let mut rng = self.rng.clone();
        let (logits, labels) = self.forward(&mut g, &b, features, TextSplit::Train, rows, true, &mut rng)?;
        self.rng = rng;
        let loss = TextHead::loss(&mut g, logits, &labels)?;
        let value = g.value(loss).item().f64();
        g.backward(loss)?;
        match &mut self.prompt {
            Some(p) => self.adam.step(
                &mut [&mut self.params, &mut p.prefix.params, &mut p.encoder.params],
                &b,
                &g,
            )?,
            None => self.adam.step(&mut [&mut self.params], &b, &g)?,
        }
        self.steps += 1;
        Ok(value)
    }

    pub fn train_epoch(&mut self, features: &FeatureTable) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.task.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            total += self.step(features, chunk)? * chunk.len() as f64;
        }
        Ok(total / order.len() as f64)
    }

    /// Class probabilities `[examples, |C|]` for a split.
    pub fn probabilities(&self, features: &FeatureTable, split: TextSplit) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.examples(split).0.len();
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.bind(&mut g, &mut b, true);
        let rows: Vec<usize> = (0..n).collect();
        let (logits, labels) = self.forward(&mut g, &b, features, split, &rows, false, &mut RngStream::new(0))?;
        let p = g.softmax_rows(logits)?;
        Ok((g.value(p).clone(), labels))
    }

    pub fn evaluate(&self, features: &FeatureTable, split: TextSplit) -> Result<TextMetrics> {
        let (probs, gold) = self.probabilities(features, split)?;
        if gold.is_empty() {
            return Ok(TextMetrics {
                loss: 0.0,
                multiclass: MulticlassMetrics::default(),
                binary: None,
            });
        }
        let mut pred = Vec::with_capacity(gold.len());
        let mut loss = 0.0;
        for (r, &y) in gold.iter().enumerate() {
            let row = probs.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            pred.push(best);
            loss -= row[y].f64().ln();
        }
        Ok(TextMetrics {
            loss: loss / gold.len() as f64,
            multiclass: multiclass_metrics(&pred, &gold, self.task.n_labels),
            binary: (self.task.n_labels == 2).then(|| binary_metrics(&pred, &gold)),
        })
    }
}

#[cfg(test)]
mod tests;
