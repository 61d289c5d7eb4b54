//! Dual-objective pre-training: in-batch contrastive loss over two dropout
//! views plus a triple-plausibility loss over each item's own tails.

pub mod census;
pub mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, RngStream, Var};
use crate::encoder::{Encoder, EncoderConfig, SequenceBatch, RELATIONS};
use crate::error::{Error, Result};
use crate::kg::{FeatureTable, MultiDomainKG};
use crate::params::{Adam, AdamConfig, Bindings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the triple loss.
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// When false only the weighted triple loss is optimized.
    pub contrastive: bool,
    /// Draw triple-loss negatives from every tail in the batch instead of the
    /// item's own sequence.
    pub cross_batch_negatives: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            batch_size: 1024,
            tau: 0.1,
            lambda: 0.5,
            epochs: 5,
            learning_rate: 5e-4,
            contrastive: true,
            cross_batch_negatives: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !self.contrastive && self.lambda == 0.0 {
            return Err(Error::Config("both losses are disabled".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Sum over the batch of `-log softmax_j(cos(h1_i, h2_j) / tau)` at `j = i`.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, h1: Var, h2: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let b = g.value(h1).rows();
    let sim = g.cosine_similarity(h1, h2)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let logp = g.log_softmax_rows(logits, None)?;
    let diag = g.pick(logp, &(0..b).collect::<Vec<_>>())?;
    let s = g.sum(diag)?;
    g.scale(s, -1.0)
}

/// Plausibility of `(h, r, t)`: elementwise `h ⊙ r` dotted with `t`.
pub fn triple_score(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum()
}

/// Sum over valid triples of `-log softmax_k S(h_i, r_ij, t_ik)` at `k = j`.
///
/// `heads` is `[B, d]`; `relations`, `tails` and `tail_mask` cover `n` slots
/// per item. Negatives are the item's own valid tails, or every valid tail in
/// the batch when `cross_batch` is set. Triples with no negative contribute 0.
pub fn kg_triple_loss<T: Real>(
    g: &mut Graph<T>,
    heads: Var,
    relations: Var,
    tails: Var,
    tail_mask: &[bool],
    n: usize,
    cross_batch: bool,
) -> Result<Var> {
    let b = g.value(heads).rows();
    let rows = b * n;
    if tail_mask.len() != rows || g.value(tails).rows() != rows {
        return Err(Error::shape(
            "kg_triple_loss",
            format!(
                "{b} items × {n} slots vs {} tails, mask {}",
                g.value(tails).rows(),
                tail_mask.len()
            ),
        ));
    }
    let spread: Vec<Option<usize>> = (0..rows).map(|r| Some(r / n)).collect();
    let h = g.embedding_lookup(heads, &spread)?;
    let hr = g.mul(h, relations)?;
    let (scores, mask, target, weights) = if cross_batch {
        let scores = g.matmul_nt(hr, tails)?;
        let mask: Vec<bool> = (0..rows).flat_map(|_| tail_mask.iter().copied()).collect();
        let pool = tail_mask.iter().filter(|&&m| m).count();
        let w: Vec<f64> = tail_mask
            .iter()
            .map(|&m| if m && pool >= 2 { -1.0 } else { 0.0 })
            .collect();
        (scores, mask, (0..rows).collect::<Vec<_>>(), w)
    } else {
        let scores = g.block_matmul_nt(hr, tails, n)?;
        let mask: Vec<bool> = (0..rows)
            .flat_map(|r| {
                let blk = r / n;
                tail_mask[blk * n..(blk + 1) * n].iter().copied()
            })
            .collect();
        let w: Vec<f64> = (0..rows)
            .map(|r| {
                let blk = r / n;
                let pool = tail_mask[blk * n..(blk + 1) * n].iter().filter(|&&m| m).count();
                if tail_mask[r] && pool >= 2 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        (scores, mask, (0..rows).map(|r| r % n).collect(), w)
    };
    let logp = g.log_softmax_rows(scores, Some(&mask))?;
    let picked = g.pick(logp, &target)?;
    g.weighted_sum(picked, &weights)
}

/// `l_con + lambda * l_kg`.
pub fn total_loss(l_con: f64, l_kg: f64, lambda: f64) -> f64 {
    l_con + lambda * l_kg
}

/// Graph handles of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    /// Mean objective the optimizer steps on.
    pub total: Var,
    pub l_con: Option<Var>,
    pub l_kg: Var,
}

/// Records the batch objective: `(l_con + lambda * l_kg) / B`, or
/// `lambda * l_kg / B` without the contrastive term. Both dropout views
/// draw from `rng` one after the other.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_objective<T: Real>(
    g: &mut Graph<T>,
    b: &Bindings,
    encoder: &Encoder<T>,
    config: &PretrainConfig,
    features: &FeatureTable,
    batch: &SequenceBatch,
    rng: &mut RngStream,
    train: bool,
) -> Result<Objective> {
    let tokens = encoder.input_tokens(g, b, features, batch, None)?;
    let out1 = encoder.encode_tokens(g, b, tokens, &batch.mask, batch.seq_len, rng, train)?;
    let h1 = g.embedding_lookup(out1, &batch.head_rows())?;
    let tails = g.embedding_lookup(out1, &batch.tail_rows())?;
    let rel = g.embedding_lookup(b.get(RELATIONS)?, &batch.tail_relations())?;
    let l_kg = kg_triple_loss(
        g,
        h1,
        rel,
        tails,
        &batch.tail_mask(),
        batch.seq_len - 1,
        config.cross_batch_negatives,
    )?;
    let scale = 1.0 / batch.len() as f64;
    let weighted_kg = g.scale(l_kg, config.lambda)?;
    let (total, l_con) = if config.contrastive {
        let out2 = encoder.encode_tokens(g, b, tokens, &batch.mask, batch.seq_len, rng, train)?;
        let h2 = g.embedding_lookup(out2, &batch.head_rows())?;
        let l_con = contrastive_loss(g, h1, h2, config.tau)?;
        let sum = g.add(l_con, weighted_kg)?;
        (g.scale(sum, scale)?, Some(l_con))
    } else {
        (g.scale(weighted_kg, scale)?, None)
    };
    Ok(Objective { total, l_con, l_kg })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub l_con: f64,
    pub l_kg: f64,
    /// Weighted sum before division by the batch size.
    pub total: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Per-item means.
    pub l_con: f64,
    pub l_kg: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub lambda: f64,
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
}

#[derive(Debug)]
pub struct Pretrainer<T: Real = f32> {
    pub config: PretrainConfig,
    pub encoder: Encoder<T>,
    adam: Adam<T>,
    rng: RngStream,
    epoch: usize,
}

impl<T: Real> Pretrainer<T> {
    /// Fresh encoder initialized from the configured seed.
    pub fn new(config: PretrainConfig, n_relations: usize) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed);
        let encoder = Encoder::new(config.encoder.clone(), n_relations, &mut root.fork(0))?;
        Self::from_encoder(config, encoder)
    }

    pub fn from_encoder(config: PretrainConfig, mut encoder: Encoder<T>) -> Result<Self> {
        config.validate()?;
        encoder.params.set_all_trainable(true);
        let rng = RngStream::new(config.seed).fork(1);
        Ok(Pretrainer {
            adam: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            config,
            encoder,
            rng,
            epoch: 0,
        })
    }

    /// One optimizer step on `items`, with freshly sampled neighborhoods.
    pub fn step(&mut self, kg: &MultiDomainKG, features: &FeatureTable, items: &[usize]) -> Result<StepReport> {
        let batch = SequenceBatch::sample(kg, items, self.config.encoder.n_triples, &mut self.rng)?;
        let mut g = Graph::new();
        let mut b = Bindings::new();
        self.encoder.params.bind(&mut g, &mut b);
        let diverged = |l_con: f64, l_kg: f64| Error::NonFiniteLoss {
            batch_items: items.to_vec(),
            l_con,
            l_kg,
        };
        let obj = match pretrain_objective(
            &mut g,
            &b,
            &self.encoder,
            &self.config,
            features,
            &batch,
            &mut self.rng,
            true,
        ) {
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN, f64::NAN)),
            other => other?,
        };
        let l_con = obj.l_con.map_or(0.0, |v| g.value(v).item().f64());
        let l_kg = g.value(obj.l_kg).item().f64();
        if !l_con.is_finite() || !l_kg.is_finite() {
            return Err(diverged(l_con, l_kg));
        }
        match g.backward(obj.total) {
            Err(Error::NonFinite { .. }) => return Err(diverged(l_con, l_kg)),
            other => other?,
        }
        self.adam.step(&mut [&mut self.encoder.params], &b, &g)?;
        Ok(StepReport {
            l_con,
            l_kg,
            total: total_loss(l_con, l_kg, self.config.lambda),
            batch: items.len(),
        })
    }

    /// One pass over the graph's items in a seeded shuffled order.
    pub fn train_epoch(
        &mut self,
        kg: &MultiDomainKG,
        features: &FeatureTable,
        log: &mut PretrainLog,
    ) -> Result<EpochReport> {
        use rand::seq::SliceRandom;
        if kg.items().is_empty() {
            return Err(Error::Config("no items to pre-train on".into()));
        }
        let start = Instant::now();
        let mut order = kg.items().to_vec();
        order.shuffle(&mut self.rng);
        let (mut con, mut kgl, mut tot, mut steps) = (0.0, 0.0, 0.0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let r = self.step(kg, features, chunk)?;
            con += r.l_con;
            kgl += r.l_kg;
            tot += r.total;
            steps += 1;
            log.steps.push(r);
        }
        let n = order.len() as f64;
        let report = EpochReport {
            epoch: self.epoch,
            steps,
            l_con: con / n,
            l_kg: kgl / n,
            total: tot / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        log.epochs.push(report.clone());
        Ok(report)
    }

    pub fn train(&mut self, kg: &MultiDomainKG, features: &FeatureTable) -> Result<PretrainLog> {
        let mut log = PretrainLog {
            lambda: self.config.lambda,
            ..PretrainLog::default()
        };
        for _ in 0..self.config.epochs {
            self.train_epoch(kg, features, &mut log)?;
        }
        Ok(log)
    }
}
