//! Experiment protocols over a loaded benchmark: pre-training, downstream
//! tuning, out-of-domain transfer, ablation and parameter census.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Graph, Real, RngStream, Var};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::kg::bench::Benchmark;
use crate::kg::MultiDomainKG;
use crate::metrics::RankingMetrics;
use crate::params::{Bindings, ParamStore};
use crate::ppt::{PromptConfig, PromptModule};
use crate::pretrain::census::{closed_form, Census, CensusSpec};
use crate::pretrain::{PretrainConfig, PretrainLog, Pretrainer};
use crate::rec::{InteractionGraph, RecConfig, RecTrainer, Split};
use crate::text::{
    HashingEncoder, PooledEncoder, PrecomputedEncoder, TextConfig, TextInput, TextMetrics, TextSplit, TextTrainer,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enhancement {
    Base,
    #[default]
    Mudok,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Randomly initialized backbone, prompts still tuned.
    #[serde(rename = "G3_no_pretrain")]
    NoPretrain,
    /// Triple loss only.
    #[serde(rename = "G4_no_Lcon")]
    NoContrastive,
    /// Contrastive loss only.
    #[serde(rename = "G5_no_Lkg")]
    NoTriple,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoPretrain,
        Ablation::NoContrastive,
        Ablation::NoTriple,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPretrain => "G3_no_pretrain",
            Ablation::NoContrastive => "G4_no_Lcon",
            Ablation::NoTriple => "G5_no_Lkg",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Rec,
    Text,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Rec => "rec",
            TaskKind::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    pub rec: RecConfig,
    pub text: TextConfig,
    /// Domains used for pre-training; empty means all.
    pub include_domains: Vec<String>,
    pub exclude_domains: Vec<String>,
    pub enhancement: Enhancement,
    pub ablation: Ablation,
    pub task: TaskKind,
    /// Downstream domain; defaults to the first domain carrying the task.
    pub target_domain: Option<String>,
    /// Pre-trained checkpoint used by the tuning commands.
    pub checkpoint: Option<PathBuf>,
    /// Precomputed pooled text vectors replacing the hashing text encoder.
    pub text_vectors: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: PathBuf::from("bench/manifest.json"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            pretrain: PretrainConfig::default(),
            prompt: PromptConfig::default(),
            rec: RecConfig::default(),
            text: TextConfig::default(),
            include_domains: Vec::new(),
            exclude_domains: Vec::new(),
            enhancement: Enhancement::default(),
            ablation: Ablation::default(),
            task: TaskKind::default(),
            target_domain: None,
            checkpoint: None,
            text_vectors: None,
        }
    }
}

impl ExperimentConfig {
    /// Pre-training settings with the experiment seed and ablation applied.
    pub fn pretrain_config(&self, ablation: Ablation) -> PretrainConfig {
        let mut p = self.pretrain.clone();
        p.seed = self.seed;
        match ablation {
            Ablation::NoContrastive => p.contrastive = false,
            Ablation::NoTriple => {
                p.contrastive = true;
                p.lambda = 0.0;
            }
            Ablation::Full | Ablation::NoPretrain => {}
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        for a in Ablation::ALL {
            self.pretrain_config(a).validate()?;
        }
        if self.prompt.d_p == 0 {
            return Err(Error::Config("prompt d_p must be at least 1".into()));
        }
        if self.rec.epochs == 0 || self.text.epochs == 0 || self.text.batch_size == 0 || self.text.d_text == 0 {
            return Err(Error::Config(
                "tuning epochs, batch size and d_text must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Target domain name for the configured task.
    pub fn target(&self, bench: &Benchmark) -> Result<String> {
        if let Some(t) = &self.target_domain {
            bench.task(t)?;
            return Ok(t.clone());
        }
        bench
            .tasks
            .iter()
            .find(|t| match self.task {
                TaskKind::Rec => t.interactions.is_some(),
                TaskKind::Text => t.text.is_some(),
            })
            .map(|t| t.domain.clone())
            .ok_or_else(|| Error::Config(format!("no domain carries a {} task", self.task.label())))
    }
}

/// Domain indices kept by include/exclude name filters.
pub fn select_domains(kg: &MultiDomainKG, include: &[String], exclude: &[String]) -> Result<Vec<usize>> {
    for name in include.iter().chain(exclude) {
        if kg.domain_index(name).is_none() {
            return Err(Error::Config(format!("unknown domain {name:?}")));
        }
    }
    let keep: Vec<usize> = kg
        .domains()
        .iter()
        .enumerate()
        .filter(|(_, d)| include.is_empty() || include.contains(&d.name))
        .filter(|(_, d)| !exclude.contains(&d.name))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::Config("domain selection is empty".into()));
    }
    Ok(keep)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: Encoder<f32>,
    pub log: PretrainLog,
    pub census: Census,
    pub domains: Vec<String>,
    pub ablation: Ablation,
}

impl PretrainOutcome {
    pub fn epoch_seconds(&self) -> Vec<f64> {
        self.log.epochs.iter().map(|e| e.seconds).collect()
    }

    pub fn report(&self, seed: u64) -> Report {
        let mut report = Report::new(
            "pretrain",
            seed,
            &["epoch", "steps", "l_con", "l_kg", "total", "seconds"],
        );
        for e in &self.log.epochs {
            report.push(
                format!("epoch {}", e.epoch),
                [
                    ("epoch", e.epoch as f64),
                    ("steps", e.steps as f64),
                    ("l_con", e.l_con),
                    ("l_kg", e.l_kg),
                    ("total", e.total),
                    ("seconds", round_tenth(e.seconds)),
                ],
            );
        }
        report.details = json!({
            "domains": self.domains,
            "ablation": self.ablation.label(),
            "lambda": self.log.lambda,
            "census": {
                "total": self.census.total,
                "trainable": self.census.trainable,
                "ratio": self.census.ratio,
                "epoch_seconds": self.epoch_seconds().into_iter().map(round_tenth).collect::<Vec<_>>(),
            },
        });
        report
    }
}

fn round_tenth(s: f64) -> f64 {
    (s * 10.0).round() / 10.0
}

/// Encoder used when pre-training is skipped.
pub fn random_encoder(bench: &Benchmark, cfg: &ExperimentConfig) -> Result<Encoder<f32>> {
    let pc = cfg.pretrain_config(Ablation::NoPretrain);
    pc.validate()?;
    Encoder::new(
        pc.encoder,
        bench.kg.num_relations(),
        &mut RngStream::new(cfg.seed).fork(7),
    )
}

/// Pre-trains on the domains `keep` under `ablation`. The no-pretrain
/// ablation returns a random encoder with an empty log.
pub fn pretrain_on(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    keep: &[usize],
    ablation: Ablation,
) -> Result<PretrainOutcome> {
    let kg = bench.kg.restrict_to_domains(keep)?;
    let domains = keep.iter().map(|&d| kg.domains()[d].name.clone()).collect();
    let pc = cfg.pretrain_config(ablation);
    let (encoder, log) = if ablation == Ablation::NoPretrain {
        let log = PretrainLog {
            lambda: pc.lambda,
            ..PretrainLog::default()
        };
        (random_encoder(bench, cfg)?, log)
    } else {
        let mut trainer = Pretrainer::<f32>::new(pc, kg.num_relations())?;
        let log = trainer.train(&kg, &bench.features)?;
        (trainer.encoder, log)
    };
    let census = Census::walk(&bench.features, &[&encoder.params]);
    Ok(PretrainOutcome {
        encoder,
        log,
        census,
        domains,
        ablation,
    })
}

/// Pre-training over the configured domain filters.
pub fn run_pretrain(bench: &Benchmark, cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let keep = select_domains(&bench.kg, &cfg.include_domains, &cfg.exclude_domains)?;
    pretrain_on(bench, cfg, &keep, cfg.ablation)
}

pub type MetricMap = BTreeMap<String, f64>;

fn ranking_map(m: &RankingMetrics) -> MetricMap {
    [
        ("recall@5", m.recall_5),
        ("recall@20", m.recall_20),
        ("ndcg@5", m.ndcg_5),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn text_map(m: &TextMetrics) -> MetricMap {
    let mut out: MetricMap = [
        ("accuracy", m.multiclass.accuracy),
        ("macro_f1", m.multiclass.macro_f1),
        ("micro_f1", m.multiclass.micro_f1),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    if let Some(b) = &m.binary {
        out.insert("precision".into(), b.precision);
        out.insert("recall".into(), b.recall);
        out.insert("f1".into(), b.f1);
    }
    out
}

/// Metric names reported for a task, in table order.
pub fn metric_names(task: TaskKind, n_labels: usize) -> Vec<&'static str> {
    match task {
        TaskKind::Rec => vec!["recall@5", "recall@20", "ndcg@5"],
        TaskKind::Text if n_labels == 2 => vec!["accuracy", "precision", "recall", "f1", "macro_f1", "micro_f1"],
        TaskKind::Text => vec!["accuracy", "macro_f1", "micro_f1"],
    }
}

/// Result of one downstream tuning run. Test metrics are taken at the epoch
/// with the best validation score.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub task: TaskKind,
    pub domain: String,
    pub valid: MetricMap,
    pub test: MetricMap,
    pub best_epoch: usize,
    pub losses: Vec<f64>,
    pub steps: usize,
    pub census: Census,
    pub warnings: Vec<String>,
    /// Every tensor of the tuned model at the selected epoch.
    pub state: ParamStore<f32>,
}

fn merge(stores: &[&ParamStore<f32>]) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for s in stores {
        for e in s.iter() {
            out.insert(e.name.clone(), e.value.clone(), e.trainable)?;
        }
    }
    Ok(out)
}

/// Overwrites every tensor of `store` that `state` also holds.
pub fn restore(store: &mut ParamStore<f32>, state: &ParamStore<f32>) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        if let Ok(v) = state.get(&name) {
            let t = store.get_mut(&name)?;
            if t.shape() != v.shape() {
                return Err(Error::TensorShape {
                    name,
                    expected: t.shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            *t = v.clone();
        }
    }
    Ok(())
}

/// Tensors of `store` whose names start with `prefix`.
pub fn subset(store: &ParamStore<f32>, prefix: &str) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for e in store.iter().filter(|e| e.name.starts_with(prefix)) {
        out.insert(e.name.clone(), e.value.clone(), e.trainable)?;
    }
    Ok(out)
}

fn prompt_for(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    encoder: Option<Encoder<f32>>,
    items: &[usize],
) -> Result<Option<PromptModule<f32>>> {
    match (cfg.enhancement, encoder) {
        (Enhancement::Base, _) => Ok(None),
        (Enhancement::Mudok, None) => Err(Error::Config(
            "the mudok enhancement needs a backbone checkpoint".into(),
        )),
        (Enhancement::Mudok, Some(enc)) => {
            if bench.features.dim() != enc.config.d_feat {
                return Err(Error::Config(format!(
                    "feature dim {} does not match encoder d_feat {}",
                    bench.features.dim(),
                    enc.config.d_feat
                )));
            }
            let mut rng = RngStream::new(cfg.seed).fork(2);
            Ok(Some(PromptModule::new(
                enc,
                &bench.kg,
                items,
                cfg.prompt.clone(),
                &mut rng,
            )?))
        }
    }
}

fn check_features(bench: &Benchmark, items: &[usize]) -> Result<()> {
    if let Some(&i) = items.iter().find(|&&i| i >= bench.features.rows()) {
        return Err(Error::Config(format!(
            "item {:?} has no feature row",
            bench.kg.entities().name(i)
        )));
    }
    Ok(())
}

/// Builds the recommendation trainer for the target domain.
pub fn rec_trainer(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    encoder: Option<Encoder<f32>>,
) -> Result<(String, RecTrainer<f32>)> {
    let domain = cfg.target(bench)?;
    let splits = bench
        .task(&domain)?
        .interactions
        .as_ref()
        .ok_or_else(|| Error::Config(format!("domain {domain:?} has no interactions")))?;
    let d = bench
        .kg
        .domain_index(&domain)
        .ok_or_else(|| Error::Config(format!("unknown domain {domain:?}")))?;
    let graph = InteractionGraph::from_splits(&bench.kg, d, splits)?;
    check_features(bench, &graph.item_entities)?;
    let prompt = prompt_for(bench, cfg, encoder, &graph.item_entities)?;
    Ok((domain, RecTrainer::new(graph, cfg.rec.clone(), prompt, cfg.seed)?))
}

fn rec_state(t: &RecTrainer<f32>) -> Result<ParamStore<f32>> {
    match &t.prompt {
        Some(p) => merge(&[&p.encoder.params, &p.prefix.params, &t.model.params]),
        None => merge(&[&t.model.params]),
    }
}

/// BPR tuning with best-validation model selection.
pub fn tune_rec(bench: &Benchmark, cfg: &ExperimentConfig, encoder: Option<Encoder<f32>>) -> Result<TaskOutcome> {
    cfg.validate()?;
    let (domain, mut trainer) = rec_trainer(bench, cfg, encoder)?;
    let mut losses = Vec::with_capacity(cfg.rec.epochs);
    let mut best: Option<(f64, usize, MetricMap, MetricMap, ParamStore<f32>)> = None;
    for epoch in 0..cfg.rec.epochs {
        losses.push(trainer.train_epoch(&bench.features)?);
        let valid = trainer.evaluate(&bench.features, Split::Valid)?;
        let score = valid.recall_20 + valid.ndcg_5;
        if best.as_ref().is_none_or(|b| score > b.0) {
            let test = trainer.evaluate(&bench.features, Split::Test)?;
            best = Some((
                score,
                epoch,
                ranking_map(&valid),
                ranking_map(&test),
                rec_state(&trainer)?,
            ));
        }
    }
    let (_, best_epoch, valid, test, state) = best.expect("at least one epoch");
    let census = match &trainer.prompt {
        Some(p) => Census::walk(
            &bench.features,
            &[&p.encoder.params, &p.prefix.params, &trainer.model.params],
        ),
        None => Census::walk(&bench.features, &[&trainer.model.params]),
    };
    Ok(TaskOutcome {
        task: TaskKind::Rec,
        domain,
        valid,
        test,
        best_epoch,
        losses,
        steps: trainer.steps(),
        census,
        warnings: Vec::new(),
        state,
    })
}

/// Either pooled text encoder behind one type.
#[derive(Clone, Debug)]
pub enum AnyPooled {
    Hashing(HashingEncoder),
    Precomputed(PrecomputedEncoder),
}

impl<T: Real> PooledEncoder<T> for AnyPooled {
    fn dim(&self) -> usize {
        match self {
            AnyPooled::Hashing(e) => PooledEncoder::<T>::dim(e),
            AnyPooled::Precomputed(e) => PooledEncoder::<T>::dim(e),
        }
    }

    fn init_params(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        match self {
            AnyPooled::Hashing(e) => e.init_params(store, rng),
            AnyPooled::Precomputed(e) => e.init_params(store, rng),
        }
    }

    fn pooled(&self, g: &mut Graph<T>, b: &Bindings, inputs: &[TextInput<'_>]) -> Result<Var> {
        match self {
            AnyPooled::Hashing(e) => e.pooled(g, b, inputs),
            AnyPooled::Precomputed(e) => e.pooled(g, b, inputs),
        }
    }
}

/// Builds the text trainer for the target domain. `base_dir` resolves a
/// relative `text_vectors` path.
pub fn text_trainer(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    encoder: Option<Encoder<f32>>,
    base_dir: &Path,
) -> Result<(String, TextTrainer<f32, AnyPooled>)> {
    let domain = cfg.target(bench)?;
    let task = bench
        .task(&domain)?
        .text
        .clone()
        .ok_or_else(|| Error::Config(format!("domain {domain:?} has no text task")))?;
    let pooled = match &cfg.text_vectors {
        Some(p) => {
            let enc = PrecomputedEncoder::read(&base_dir.join(p))?;
            let n = task.train.len() + task.valid.len() + task.test.len();
            if enc.rows() != n {
                return Err(Error::Config(format!(
                    "{} pooled vectors for {n} text examples",
                    enc.rows()
                )));
            }
            AnyPooled::Precomputed(enc)
        }
        None => AnyPooled::Hashing(HashingEncoder {
            dim: cfg.text.d_text,
            seed: cfg.text.hash_seed,
        }),
    };
    let d = bench
        .kg
        .domain_index(&domain)
        .ok_or_else(|| Error::Config(format!("unknown domain {domain:?}")))?;
    let items = bench.kg.domains()[d].items.clone();
    check_features(bench, &items)?;
    let prompt = prompt_for(bench, cfg, encoder, &items)?;
    let trainer = TextTrainer::new(&bench.kg, task, pooled, cfg.text.clone(), prompt, cfg.seed)?;
    Ok((domain, trainer))
}

fn text_state(t: &TextTrainer<f32, AnyPooled>) -> Result<ParamStore<f32>> {
    match &t.prompt {
        Some(p) => merge(&[&p.encoder.params, &p.prefix.params, &t.params]),
        None => merge(&[&t.params]),
    }
}

/// Cross-entropy tuning with best-validation model selection.
pub fn tune_text(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    encoder: Option<Encoder<f32>>,
    base_dir: &Path,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    let (domain, mut trainer) = text_trainer(bench, cfg, encoder, base_dir)?;
    let mut losses = Vec::with_capacity(cfg.text.epochs);
    let mut best: Option<(f64, usize, MetricMap, MetricMap, ParamStore<f32>)> = None;
    for epoch in 0..cfg.text.epochs {
        losses.push(trainer.train_epoch(&bench.features)?);
        let valid = trainer.evaluate(&bench.features, TextSplit::Valid)?;
        let score = valid.multiclass.accuracy + valid.multiclass.macro_f1;
        if best.as_ref().is_none_or(|b| score > b.0) {
            let test = trainer.evaluate(&bench.features, TextSplit::Test)?;
            best = Some((score, epoch, text_map(&valid), text_map(&test), text_state(&trainer)?));
        }
    }
    let (_, best_epoch, valid, test, state) = best.expect("at least one epoch");
    let census = match &trainer.prompt {
        Some(p) => Census::walk(&bench.features, &[&p.encoder.params, &p.prefix.params, &trainer.params]),
        None => Census::walk(&bench.features, &[&trainer.params]),
    };
    Ok(TaskOutcome {
        task: TaskKind::Text,
        domain,
        valid,
        test,
        best_epoch,
        losses,
        steps: trainer.steps(),
        census,
        warnings: trainer.warnings.clone(),
        state,
    })
}

/// Tunes the configured task.
pub fn tune(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    encoder: Option<Encoder<f32>>,
    base_dir: &Path,
) -> Result<TaskOutcome> {
    match cfg.task {
        TaskKind::Rec => tune_rec(bench, cfg, encoder),
        TaskKind::Text => tune_text(bench, cfg, encoder, base_dir),
    }
}

/// Rebuilds the tuned model from `state` and evaluates one split.
pub fn evaluate_state(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    state: &ParamStore<f32>,
    split: Split,
    base_dir: &Path,
) -> Result<MetricMap> {
    let encoder = match cfg.enhancement {
        Enhancement::Mudok => Some(Encoder::from_params(
            cfg.pretrain.encoder.clone(),
            subset(state, "encoder.")?,
        )?),
        Enhancement::Base => None,
    };
    match cfg.task {
        TaskKind::Rec => {
            let (_, mut t) = rec_trainer(bench, cfg, encoder)?;
            restore(&mut t.model.params, state)?;
            if let Some(p) = &mut t.prompt {
                restore(&mut p.prefix.params, state)?;
            }
            Ok(ranking_map(&t.evaluate(&bench.features, split)?))
        }
        TaskKind::Text => {
            let (_, mut t) = text_trainer(bench, cfg, encoder, base_dir)?;
            restore(&mut t.params, state)?;
            if let Some(p) = &mut t.prompt {
                restore(&mut p.prefix.params, state)?;
            }
            let split = match split {
                Split::Valid => TextSplit::Valid,
                Split::Test => TextSplit::Test,
            };
            Ok(text_map(&t.evaluate(&bench.features, split)?))
        }
    }
}

impl TaskOutcome {
    pub fn report(&self, command: &str, seed: u64) -> Report {
        let columns: Vec<&str> = self.test.keys().map(String::as_str).collect();
        let mut report = Report::new(command, seed, &columns);
        report.push("valid", self.valid.iter().map(|(k, v)| (k.as_str(), *v)));
        report.push("test", self.test.iter().map(|(k, v)| (k.as_str(), *v)));
        report.details = json!({
            "task": self.task.label(),
            "domain": self.domain,
            "best_epoch": self.best_epoch,
            "steps": self.steps,
            "losses": self.losses,
            "census": {
                "total": self.census.total,
                "trainable": self.census.trainable,
                "ratio": self.census.ratio,
            },
            "warnings": self.warnings,
        });
        report
    }
}

/// One labeled tuning run inside a comparison.
#[derive(Clone, Debug)]
pub struct Run {
    pub label: String,
    pub pretrain: PretrainOutcome,
    pub outcome: TaskOutcome,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub command: String,
    pub seed: u64,
    pub runs: Vec<Run>,
}

impl Comparison {
    pub fn run(&self, label: &str) -> Option<&Run> {
        self.runs.iter().find(|r| r.label == label)
    }

    /// One row per run with its test metrics.
    pub fn report(&self) -> Report {
        let columns: Vec<&str> = self
            .runs
            .first()
            .map(|r| r.outcome.test.keys().map(String::as_str).collect())
            .unwrap_or_default();
        let mut report = Report::new(&self.command, self.seed, &columns);
        for r in &self.runs {
            report.push(r.label.clone(), r.outcome.test.iter().map(|(k, v)| (k.as_str(), *v)));
        }
        report.details = Value::Object(
            self.runs
                .iter()
                .map(|r| {
                    (
                        r.label.clone(),
                        json!({
                            "pretrain_domains": r.pretrain.domains,
                            "ablation": r.pretrain.ablation.label(),
                            "lambda": r.pretrain.log.lambda,
                            "pretrain_epochs": r.pretrain.log.epochs.len(),
                            "best_epoch": r.outcome.best_epoch,
                            "trainable_ratio": r.outcome.census.ratio,
                        }),
                    )
                })
                .collect(),
        );
        report
    }
}

pub const OOD: &str = "ood-pretrained";
pub const NO_PRETRAIN: &str = "no-pretrain";
pub const FULL: &str = "full-pretrain";

/// Pre-trains without the target domain, then tunes prompts on it; also runs
/// the no-pretrain control and, when `with_full`, the all-domain upper bound.
pub fn run_transfer(bench: &Benchmark, cfg: &ExperimentConfig, with_full: bool, base_dir: &Path) -> Result<Comparison> {
    cfg.validate()?;
    let target = cfg.target(bench)?;
    let t = bench
        .kg
        .domain_index(&target)
        .ok_or_else(|| Error::Config(format!("unknown domain {target:?}")))?;
    let others: Vec<usize> = (0..bench.kg.domains().len()).filter(|&d| d != t).collect();
    if others.len() < 2 {
        return Err(Error::Config(
            "transfer needs at least two domains besides the target".into(),
        ));
    }
    check_features(bench, &bench.kg.domains()[t].items)?;
    let mut tuned = cfg.clone();
    tuned.enhancement = Enhancement::Mudok;
    tuned.target_domain = Some(target);
    let all: Vec<usize> = (0..bench.kg.domains().len()).collect();
    let mut plan = vec![
        (OOD, others, Ablation::Full),
        (NO_PRETRAIN, all.clone(), Ablation::NoPretrain),
    ];
    if with_full {
        plan.push((FULL, all, Ablation::Full));
    }
    let mut runs = Vec::new();
    for (label, keep, ablation) in plan {
        let pretrain = pretrain_on(bench, &tuned, &keep, ablation)?;
        let outcome = tune(bench, &tuned, Some(pretrain.encoder.clone()), base_dir)?;
        runs.push(Run {
            label: label.into(),
            pretrain,
            outcome,
        });
    }
    Ok(Comparison {
        command: "transfer".into(),
        seed: cfg.seed,
        runs,
    })
}

/// Runs the full configuration and the three ablations with shared seeds.
pub fn run_ablation(bench: &Benchmark, cfg: &ExperimentConfig, base_dir: &Path) -> Result<Comparison> {
    cfg.validate()?;
    let keep = select_domains(&bench.kg, &cfg.include_domains, &cfg.exclude_domains)?;
    let mut tuned = cfg.clone();
    tuned.enhancement = Enhancement::Mudok;
    let mut runs = Vec::new();
    for ablation in Ablation::ALL {
        let pretrain = pretrain_on(bench, &tuned, &keep, ablation)?;
        let outcome = tune(bench, &tuned, Some(pretrain.encoder.clone()), base_dir)?;
        runs.push(Run {
            label: ablation.label().into(),
            pretrain,
            outcome,
        });
    }
    Ok(Comparison {
        command: "ablate".into(),
        seed: cfg.seed,
        runs,
    })
}

/// Census rows for the pre-training and tuning phases of a benchmark, or of
/// a projected size when `scale` gives `(entities, tuned items)`.
pub fn run_census(bench: &Benchmark, cfg: &ExperimentConfig, scale: Option<(usize, usize)>) -> Result<Report> {
    cfg.validate()?;
    let enc = &cfg.pretrain.encoder;
    let n_rel = bench.kg.num_relations();
    let (entities, items) = match scale {
        Some(s) => s,
        None => {
            let domain = cfg.target(bench)?;
            let d = bench.kg.domain_index(&domain).expect("target exists");
            (bench.kg.num_entities(), bench.kg.domains()[d].items.len())
        }
    };
    let head = match cfg.task {
        TaskKind::Rec => {
            let users = match (scale, cfg.target(bench).ok().and_then(|d| bench.task(&d).ok().cloned())) {
                (None, Some(t)) => t.interactions.as_ref().map_or(0, |i| {
                    i.train
                        .iter()
                        .chain(&i.valid)
                        .chain(&i.test)
                        .map(|(u, _)| u.as_str())
                        .collect::<std::collections::BTreeSet<_>>()
                        .len()
                }),
                _ => 0,
            };
            (users + items) * cfg.rec.d_rec + enc.d_model * cfg.rec.d_rec
        }
        TaskKind::Text => {
            let d = cfg.text.d_text;
            let labels = match cfg
                .target(bench)
                .ok()
                .and_then(|n| bench.task(&n).ok().and_then(|t| t.text.clone()))
            {
                Some(t) => t.n_labels,
                None => 2,
            };
            d * d + d + enc.d_model * d + d * labels + labels
        }
    };
    let pre = closed_form(&CensusSpec {
        n_entities: entities,
        n_relations: n_rel,
        encoder: enc.clone(),
        prefix: None,
        head_params: 0,
    });
    let prompt_spec = CensusSpec {
        n_entities: entities,
        n_relations: n_rel,
        encoder: enc.clone(),
        prefix: Some((items, cfg.prompt.d_p)),
        head_params: 0,
    };
    let prompt_only = closed_form(&prompt_spec);
    let tuned = closed_form(&CensusSpec {
        head_params: head,
        ..prompt_spec
    });
    let mut report = Report::new("census", cfg.seed, &["total", "trainable", "ratio"]);
    for (label, c) in [("pretrain", &pre), ("prompt", &prompt_only), ("tune", &tuned)] {
        report.push(
            label,
            [
                ("total", c.total as f64),
                ("trainable", c.trainable as f64),
                ("ratio", c.ratio),
            ],
        );
    }
    report.details = json!({
        "entities": entities,
        "tuned_items": items,
        "relations": n_rel,
        "task": cfg.task.label(),
        "pretrain": pre.breakdown,
        "tune": tuned.breakdown,
    });
    Ok(report)
}

/// Machine-readable report shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub details: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub values: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(command: &str, seed: u64, columns: &[&str]) -> Self {
        Report {
            command: command.into(),
            seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            details: Value::Null,
        }
    }

    pub fn push<'a>(&mut self, label: impl Into<String>, values: impl IntoIterator<Item = (&'a str, f64)>) {
        self.rows.push(ReportRow {
            label: label.into(),
            values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
    }

    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == row)?.values.get(column).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with right-aligned numeric columns.
    pub fn to_table(&self) -> String {
        let mut header = vec!["run".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut cells = vec![header];
        for r in &self.rows {
            let mut line = vec![r.label.clone()];
            line.extend(
                self.columns
                    .iter()
                    .map(|c| r.values.get(c).map_or("-".into(), |&v| format_value(v))),
            );
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|j| cells.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in cells.iter().enumerate() {
            let parts: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if j == 0 {
                        format!("{c:<w$}", w = widths[j])
                    } else {
                        format!("{c:>w$}", w = widths[j])
                    }
                })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}
