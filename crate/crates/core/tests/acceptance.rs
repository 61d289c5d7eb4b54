//! Acceptance criteria 1-10, one `criterion N: PASS|FAIL` line each.
//!
//! Runs without the libtest harness so every line is printed; exits non-zero
//! when any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mudok_core::autodiff::{grad_check, Graph, RngStream, Tensor, Var};
use mudok_core::encoder::{Encoder, EncoderConfig, SequenceBatch};
use mudok_core::experiment::{self, Enhancement, ExperimentConfig, FULL, NO_PRETRAIN, OOD};
use mudok_core::kg::bench::{load_benchmark, write_benchmark, Benchmark};
use mudok_core::kg::synth::{generate_synthetic_benchmark, SyntheticSpec};
use mudok_core::kg::{FeatureTable, MultiDomainKG};
use mudok_core::metrics::{binary_metrics, multiclass_metrics, ndcg_at_k, ranking_metrics, recall_at_k};
use mudok_core::params::{Bindings, ParamStore};
use mudok_core::ppt::{PrefixTable, PromptConfig, PromptModule, PREFIX_PROJ, PREFIX_TOKENS};
use mudok_core::pretrain::census::{closed_form, Census, CensusSpec};
use mudok_core::pretrain::{checkpoint, contrastive_loss, pretrain_objective, PretrainConfig, PretrainLog, Pretrainer};
use mudok_core::rec::{Backbone, InteractionGraph, RecConfig, RecModel, RecTrainer, ITEM_EMB, PROJ, USER_EMB};
use mudok_core::text::{
    HashingEncoder, PooledEncoder, TextConfig, TextHead, TextInput, TextTrainer, CLS_B, CLS_W, FUSE, TEXT_B, TEXT_W,
};

fn verdict(n: usize, what: &str, ok: bool, detail: &str) -> bool {
    println!("criterion {n}: {} {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let criteria: [(usize, fn() -> bool); 10] = [
        (1, criterion_01_gradient_fidelity),
        (2, criterion_02_permutation_invariance),
        (3, criterion_03_contrastive_identities),
        (4, criterion_04_freeze_integrity),
        (5, criterion_05_parameter_census),
        (6, criterion_06_metric_oracles),
        (7, criterion_07_learning_smoke_test),
        (8, criterion_08_transfer_smoke_test),
        (9, criterion_09_throughput),
        (10, criterion_10_round_trips),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, run) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        match std::panic::catch_unwind(run) {
            Ok(true) => {}
            Ok(false) => failed.push(n),
            Err(_) => {
                println!("criterion {n}: FAIL panicked");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn toy_bench(seed: u64) -> Benchmark {
    generate_synthetic_benchmark(&SyntheticSpec {
        n_domains: 1,
        items_per_domain: 4,
        attrs_per_domain: 6,
        triples_per_item: 5,
        n_users: 3,
        interactions_per_user: 3,
        text_examples_per_domain: 10,
        n_labels: 3,
        feature_dim: 10,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn toy_encoder(d_feat: usize, n_rel: usize, dropout: f64) -> Encoder<f64> {
    let cfg = EncoderConfig {
        d_feat,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        layers: 2,
        n_triples: 3,
        dropout,
        init_std: 0.3,
        ..EncoderConfig::default()
    };
    Encoder::new(cfg, n_rel, &mut RngStream::new(1)).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, name: &str, scale: f64, rng: &mut RngStream) {
    for v in store.get_mut(name).unwrap().data_mut() {
        *v = scale * (rng.uniform() - 0.5);
    }
}

fn bind_named(names: &[String], vars: &[Var]) -> Bindings {
    let mut b = Bindings::new();
    for (n, &v) in names.iter().zip(vars) {
        b.insert(n.clone(), v);
    }
    b
}

fn prompt_module(enc: Encoder<f64>, kg: &MultiDomainKG, rng: &mut RngStream) -> PromptModule<f64> {
    let items = kg.items().to_vec();
    let mut p = PromptModule::new(
        enc,
        kg,
        &items,
        PromptConfig {
            d_p: 3,
            ..PromptConfig::default()
        },
        rng,
    )
    .unwrap();
    randomize(&mut p.prefix.params, PREFIX_TOKENS, 1.0, rng);
    randomize(&mut p.prefix.params, PREFIX_PROJ, 1.0, rng);
    p
}

fn criterion_01_gradient_fidelity() -> bool {
    let start = Instant::now();
    let bench = toy_bench(3);
    let kg = &bench.kg;
    let features = &bench.features;
    let mut worst = Vec::new();

    // pre-training objective, train mode with dropout masks pinned by a fixed counter
    for cross_batch in [false, true] {
        let enc = toy_encoder(features.dim(), kg.num_relations(), 0.1);
        let cfg = PretrainConfig {
            encoder: enc.config.clone(),
            batch_size: 4,
            cross_batch_negatives: cross_batch,
            ..PretrainConfig::default()
        };
        let batch = SequenceBatch::sample(kg, kg.items(), 3, &mut RngStream::new(4)).unwrap();
        let names: Vec<String> = enc.params.names().map(str::to_string).collect();
        let mut values: Vec<Tensor<f64>> = enc.params.iter().map(|e| e.value.clone()).collect();
        let r = grad_check(
            |g, vars| {
                let b = bind_named(&names, vars);
                let obj = pretrain_objective(g, &b, &enc, &cfg, features, &batch, &mut RngStream::at(8, 0), true)?;
                Ok(obj.total)
            },
            &mut values,
            1e-5,
            1e-4,
        )
        .unwrap();
        worst.push(("pretrain", r.max_rel_err, r.passed));
    }

    // BPR through the prompt path on both backbones
    let domain = &kg.domains()[0];
    let graph = InteractionGraph::new(
        3,
        domain.items.clone(),
        vec![(0, 0), (0, 1), (1, 1), (2, 2), (2, 3)],
        vec![],
        vec![],
    )
    .unwrap();
    for backbone in [Backbone::Mf, Backbone::GraphProp { layers: 2 }] {
        let mut rng = RngStream::new(5);
        let p = prompt_module(toy_encoder(features.dim(), kg.num_relations(), 0.0), kg, &mut rng);
        let cfg = RecConfig {
            backbone,
            d_rec: 3,
            mu: 0.05,
            init_std: 0.5,
            ..RecConfig::default()
        };
        let mut model = RecModel::<f64>::new(cfg, &graph, Some(8), &mut rng).unwrap();
        randomize(&mut model.params, PROJ, 2.0, &mut rng);
        let trainable: Vec<&ParamStore<f64>> = vec![&model.params, &p.prefix.params];
        let names: Vec<String> = trainable.iter().flat_map(|s| s.names().map(str::to_string)).collect();
        let mut values: Vec<Tensor<f64>> = trainable
            .iter()
            .flat_map(|s| s.iter().map(|e| e.value.clone()))
            .collect();
        let triples = [(0, 0, 2), (1, 1, 3), (2, 3, 0), (0, 1, 3)];
        let r = grad_check(
            |g, vars| {
                let mut b = bind_named(&names, vars);
                p.encoder.bind_frozen(g, &mut b);
                let reps = p.represent(g, &b, features, &graph.item_entities, &mut RngStream::new(0), false)?;
                Ok(model.bpr_loss(g, &b, Some(reps), &triples)?.mean)
            },
            &mut values,
            1e-5,
            1e-4,
        )
        .unwrap();
        worst.push(("bpr", r.max_rel_err, r.passed));
    }

    // cross-entropy through the pooled encoder, fusion and prefix
    let task = bench.tasks[0].text.clone().unwrap();
    let mut rng = RngStream::new(6);
    let p = prompt_module(toy_encoder(features.dim(), kg.num_relations(), 0.0), kg, &mut rng);
    let pooled_enc = HashingEncoder { dim: 6, seed: 2 };
    let mut head = ParamStore::<f64>::new();
    PooledEncoder::<f64>::init_params(&pooled_enc, &mut head, &mut rng).unwrap();
    TextHead::init(&mut head, 6, task.n_labels, Some(8), &mut rng).unwrap();
    randomize(&mut head, FUSE, 1.0, &mut rng);
    let examples: Vec<_> = task.train.iter().take(4).cloned().collect();
    let entities: Vec<usize> = examples.iter().map(|e| kg.entities().get(&e.item).unwrap()).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let trainable: Vec<&ParamStore<f64>> = vec![&head, &p.prefix.params];
    let names: Vec<String> = trainable.iter().flat_map(|s| s.names().map(str::to_string)).collect();
    let mut values: Vec<Tensor<f64>> = trainable
        .iter()
        .flat_map(|s| s.iter().map(|e| e.value.clone()))
        .collect();
    let r = grad_check(
        |g, vars| {
            let mut b = bind_named(&names, vars);
            p.encoder.bind_frozen(g, &mut b);
            let inputs: Vec<TextInput<'_>> = examples
                .iter()
                .enumerate()
                .map(|(row, e)| TextInput {
                    row,
                    text: &e.text,
                    item_text: &e.item,
                })
                .collect();
            let pooled = pooled_enc.pooled(g, &b, &inputs)?;
            let reps = p.represent(g, &b, features, &entities, &mut RngStream::new(0), false)?;
            let z = TextHead::logits(g, &b, pooled, Some(reps))?;
            TextHead::loss(g, z, &labels)
        },
        &mut values,
        1e-5,
        1e-4,
    )
    .unwrap();
    worst.push(("cross-entropy", r.max_rel_err, r.passed));

    let secs = start.elapsed().as_secs_f64();
    let ok = worst.iter().all(|w| w.2) && secs < 30.0;
    let detail = worst
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        1,
        "gradient fidelity",
        ok,
        &format!("max rel err {detail} (tol 1e-4); {secs:.1}s (limit 30s)"),
    )
}

fn criterion_02_permutation_invariance() -> bool {
    let bench = generate_synthetic_benchmark(&SyntheticSpec {
        seed: 11,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let kg = &bench.kg;
    let enc = Encoder::<f32>::new(EncoderConfig::default(), kg.num_relations(), &mut RngStream::new(2)).unwrap();
    let mut rng = RngStream::new(3);
    let items = kg.items();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let item = items[rng.below(items.len())];
        let nb = kg
            .sample_item_neighborhood(item, enc.config.n_triples, &mut rng)
            .unwrap();
        let valid = nb.valid_count();
        let mut perm = nb.clone();
        for i in (1..valid).rev() {
            perm.pairs.swap(i, rng.below(i + 1));
        }
        let a = SequenceBatch::from_neighborhoods(&[item], &[nb]).unwrap();
        let b = SequenceBatch::from_neighborhoods(&[item], &[perm]).unwrap();
        let ha = enc
            .represent(&bench.features, &a, &mut RngStream::new(0), false)
            .unwrap();
        let hb = enc
            .represent(&bench.features, &b, &mut RngStream::new(0), false)
            .unwrap();
        for (x, y) in ha.data().iter().zip(hb.data()) {
            worst = worst.max((f64::from(*x) - f64::from(*y)).abs());
        }
    }
    verdict(
        2,
        "permutation invariance",
        worst <= 1e-6,
        &format!("max |change| {worst:.2e} over 100 items (tol 1e-6)"),
    )
}

fn criterion_03_contrastive_identities() -> bool {
    let mut rng = RngStream::new(21);
    let loss = |h1: Tensor<f64>, h2: Tensor<f64>| {
        let mut g = Graph::new();
        let a = g.constant(h1);
        let b = g.constant(h2);
        let l = contrastive_loss(&mut g, a, b, 0.1).unwrap();
        g.value(l).item()
    };
    let mut single = 0.0f64;
    for _ in 0..10 {
        let v: Vec<f64> = (0..8).map(|_| rng.uniform() - 0.5).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.uniform() - 0.5).collect();
        single = single.max(loss(Tensor::matrix(1, 8, v).unwrap(), Tensor::matrix(1, 8, w).unwrap()).abs());
    }
    let mut identical = 0.0f64;
    for b in [2usize, 3, 8, 32] {
        let row: Vec<f64> = (0..8).map(|_| rng.uniform() - 0.5).collect();
        let m = Tensor::matrix(b, 8, row.repeat(b)).unwrap();
        let expect = b as f64 * (b as f64).ln();
        identical = identical.max((loss(m.clone(), m) - expect).abs());
    }
    verdict(
        3,
        "contrastive identities",
        single <= 1e-9 && identical <= 1e-6,
        &format!("B=1 |loss| {single:.1e} (tol 1e-9); identical rows |loss - B ln B| {identical:.1e} (tol 1e-6)"),
    )
}

fn tuning_setup() -> (Benchmark, Encoder<f32>) {
    let bench = generate_synthetic_benchmark(&SyntheticSpec {
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = EncoderConfig {
        d_feat: bench.features.dim(),
        d_model: 32,
        heads: 2,
        d_ff: 64,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, bench.kg.num_relations(), &mut RngStream::new(4)).unwrap();
    (bench, enc)
}

fn changed(pairs: &[(&ParamStore<f32>, &ParamStore<f32>)]) -> BTreeSet<String> {
    pairs
        .iter()
        .flat_map(|(after, before)| after.changed_since(before))
        .collect()
}

fn criterion_04_freeze_integrity() -> bool {
    let (bench, enc) = tuning_setup();
    let kg = &bench.kg;
    let features_before = bench.features.to_bytes();
    let snapshot = enc.params.clone();
    let domain = kg.domains()[0].clone();
    let prompt_cfg = PromptConfig {
        dropout: true,
        ..PromptConfig::default()
    };
    let mut details = Vec::new();
    let mut ok = true;

    let splits = bench.task(&domain.name).unwrap().interactions.clone().unwrap();
    let graph = InteractionGraph::from_splits(kg, 0, &splits).unwrap();
    let prompt = PromptModule::new(
        enc.clone(),
        kg,
        &domain.items,
        prompt_cfg.clone(),
        &mut RngStream::new(1),
    )
    .unwrap();
    let rec_cfg = RecConfig {
        batch_size: 32,
        ..RecConfig::default()
    };
    let mut rec = RecTrainer::new(graph, rec_cfg, Some(prompt), 2).unwrap();
    let model0 = rec.model.params.clone();
    let prefix0 = rec.prompt.as_ref().unwrap().prefix.params.clone();
    let edges = rec.graph.train.clone();
    for s in 0..500 {
        let at = (s * 32) % edges.len();
        let chunk: Vec<_> = edges.iter().cycle().skip(at).take(32).copied().collect();
        rec.step(&bench.features, &chunk).unwrap();
    }
    let p = rec.prompt.as_ref().unwrap();
    let backbone = p.encoder.params.changed_since(&snapshot);
    let set = changed(&[
        (&rec.model.params, &model0),
        (&p.prefix.params, &prefix0),
        (&p.encoder.params, &snapshot),
    ]);
    let expect: BTreeSet<String> = [PREFIX_TOKENS, PREFIX_PROJ, USER_EMB, ITEM_EMB, PROJ]
        .map(String::from)
        .into();
    ok &= backbone.is_empty() && set == expect && rec.steps() == 500;
    details.push(format!("rec: backbone changed {backbone:?}, changed set {set:?}"));

    let task = bench.task(&domain.name).unwrap().text.clone().unwrap();
    let prompt = PromptModule::new(enc.clone(), kg, &domain.items, prompt_cfg, &mut RngStream::new(3)).unwrap();
    let text_cfg = TextConfig {
        d_text: 32,
        batch_size: 16,
        ..TextConfig::default()
    };
    let pooled = HashingEncoder { dim: 32, seed: 0 };
    let mut text = TextTrainer::new(kg, task, pooled, text_cfg, Some(prompt), 4).unwrap();
    let head0 = text.params.clone();
    let prefix0 = text.prompt.as_ref().unwrap().prefix.params.clone();
    let n = text.task.train.len();
    for s in 0..500 {
        let rows: Vec<usize> = (0..16).map(|k| (s * 16 + k) % n).collect();
        text.step(&bench.features, &rows).unwrap();
    }
    let p = text.prompt.as_ref().unwrap();
    let backbone = p.encoder.params.changed_since(&snapshot);
    let set = changed(&[
        (&text.params, &head0),
        (&p.prefix.params, &prefix0),
        (&p.encoder.params, &snapshot),
    ]);
    let expect: BTreeSet<String> = [PREFIX_TOKENS, PREFIX_PROJ, TEXT_W, TEXT_B, FUSE, CLS_W, CLS_B]
        .map(String::from)
        .into();
    ok &= backbone.is_empty() && set == expect && text.steps() == 500;
    details.push(format!("text: backbone changed {backbone:?}, changed set {set:?}"));

    let features_same = bench.features.to_bytes() == features_before;
    ok &= features_same;
    details.push(format!("features bit-identical {features_same}"));
    verdict(
        4,
        "freeze integrity after 500 steps per adapter",
        ok,
        &details.join("; "),
    )
}

fn criterion_05_parameter_census() -> bool {
    let (entities, items, d_p, n_rel) = (500_000, 50_000, 16, 64);
    let enc_cfg = EncoderConfig {
        d_feat: 768,
        d_model: 128,
        layers: 2,
        ..EncoderConfig::default()
    };
    let features = FeatureTable::zeros(entities, enc_cfg.d_feat);
    let mut enc = Encoder::<f32>::new(enc_cfg.clone(), n_rel, &mut RngStream::new(0)).unwrap();
    enc.params.set_all_trainable(false);
    let tuned_items: Vec<usize> = (0..items).collect();
    let prefix_cfg = PromptConfig {
        d_p,
        ..PromptConfig::default()
    };
    let prefix = PrefixTable::<f32>::new(&tuned_items, enc_cfg.d_model, &prefix_cfg, &mut RngStream::new(1)).unwrap();
    let walked = Census::walk(&features, &[&enc.params, &prefix.params]);
    let closed = closed_form(&CensusSpec {
        n_entities: entities,
        n_relations: n_rel,
        encoder: enc_cfg,
        prefix: Some((items, d_p)),
        head_params: 0,
    });
    let same = (walked.total, walked.trainable) == (closed.total, closed.trainable);
    verdict(
        5,
        "parameter census",
        walked.ratio < 0.01 && same,
        &format!(
            "trainable {} / total {} = {:.4}% (limit 1%); walk == closed form {same}",
            walked.trainable,
            walked.total,
            walked.ratio * 100.0
        ),
    )
}

// brute-force oracles written without the library's helpers

fn recall_oracle(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for p in positives {
        if ranked.iter().take(k).any(|r| r == p) {
            hits += 1;
        }
    }
    if positives.is_empty() {
        0.0
    } else {
        hits as f64 / positives.len() as f64
    }
}

fn dcg(list: &[bool]) -> f64 {
    let mut s = 0.0;
    for (i, &rel) in list.iter().enumerate() {
        if rel {
            s += std::f64::consts::LN_2 / ((i + 2) as f64).ln();
        }
    }
    s
}

fn ndcg_oracle(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let got: Vec<bool> = ranked.iter().take(k).map(|r| positives.contains(r)).collect();
    let ideal: Vec<bool> = (0..k).map(|i| i < positives.len()).collect();
    dcg(&got) / dcg(&ideal)
}

fn class_f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    if 2 * tp + fp + fneg == 0 || tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

fn criterion_06_metric_oracles() -> bool {
    let mut rng = RngStream::new(31);
    let mut exact = true;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        // ranking: a shuffled catalog and a random positive set per user
        let n_items = 10 + rng.below(30);
        let users = 1 + rng.below(6);
        let mut rankings = Vec::new();
        let mut positives = Vec::new();
        for _ in 0..users {
            let mut ranked: Vec<usize> = (0..n_items).collect();
            for i in (1..n_items).rev() {
                ranked.swap(i, rng.below(i + 1));
            }
            let n_pos = rng.below(8);
            let mut pos: Vec<usize> = Vec::new();
            while pos.len() < n_pos {
                let c = rng.below(n_items);
                if !pos.contains(&c) {
                    pos.push(c);
                }
            }
            for k in [5, 20] {
                exact &= recall_at_k(&ranked, &pos, k) == recall_oracle(&ranked, &pos, k);
            }
            worst = worst.max((ndcg_at_k(&ranked, &pos, 5) - ndcg_oracle(&ranked, &pos, 5)).abs());
            rankings.push(ranked);
            positives.push(pos);
        }
        let m = ranking_metrics(&rankings, &positives);
        let counted: Vec<usize> = (0..users).filter(|&u| !positives[u].is_empty()).collect();
        exact &= m.users == counted.len();
        let mean = |f: &dyn Fn(usize) -> f64| {
            if counted.is_empty() {
                0.0
            } else {
                counted.iter().map(|&u| f(u)).sum::<f64>() / counted.len() as f64
            }
        };
        worst = worst.max((m.recall_5 - mean(&|u| recall_oracle(&rankings[u], &positives[u], 5))).abs());
        worst = worst.max((m.recall_20 - mean(&|u| recall_oracle(&rankings[u], &positives[u], 20))).abs());
        worst = worst.max((m.ndcg_5 - mean(&|u| ndcg_oracle(&rankings[u], &positives[u], 5))).abs());

        // classification
        let n = 1 + rng.below(40);
        let classes = 2 + rng.below(4);
        let gold: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let correct = gold.iter().zip(&pred).filter(|(g, p)| g == p).count();
        let mc = multiclass_metrics(&pred, &gold, classes);
        exact &= mc.accuracy == correct as f64 / n as f64;
        let mut macro_sum = 0.0;
        for c in 0..classes {
            let tp = (0..n).filter(|&i| pred[i] == c && gold[i] == c).count();
            let fp = (0..n).filter(|&i| pred[i] == c && gold[i] != c).count();
            let fneg = (0..n).filter(|&i| pred[i] != c && gold[i] == c).count();
            macro_sum += class_f1(tp, fp, fneg);
        }
        worst = worst.max((mc.macro_f1 - macro_sum / classes as f64).abs());
        // single-label micro-F1 equals accuracy
        worst = worst.max((mc.micro_f1 - correct as f64 / n as f64).abs());

        let gb: Vec<usize> = gold.iter().map(|&g| g % 2).collect();
        let pb: Vec<usize> = pred.iter().map(|&p| p % 2).collect();
        let tp = (0..n).filter(|&i| pb[i] == 1 && gb[i] == 1).count();
        let fp = (0..n).filter(|&i| pb[i] == 1 && gb[i] == 0).count();
        let fneg = (0..n).filter(|&i| pb[i] == 0 && gb[i] == 1).count();
        let bm = binary_metrics(&pb, &gb);
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        exact &= bm.accuracy == frac((0..n).filter(|&i| pb[i] == gb[i]).count(), n);
        exact &= bm.precision == frac(tp, tp + fp);
        exact &= bm.recall == frac(tp, tp + fneg);
        worst = worst.max((bm.f1 - class_f1(tp, fp, fneg)).abs());
    }
    verdict(
        6,
        "metric oracles",
        exact && worst <= 1e-10,
        &format!("count-based metrics exact {exact}; max ratio-metric error {worst:.1e} (tol 1e-10) over 50 instances"),
    )
}

/// Pre-training settings shared by the learning smoke tests.
fn smoke_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.pretrain.epochs = 5;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.learning_rate = 3e-3;
    cfg.pretrain.cross_batch_negatives = true;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_07_learning_smoke_test() -> bool {
    let start = Instant::now();
    let (mut base, mut full, mut g3) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let bench = generate_synthetic_benchmark(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!((bench.kg.domains().len(), bench.kg.domains()[0].items.len()), (3, 100));
        let cfg = smoke_config(seed);
        let pre = experiment::run_pretrain(&bench, &cfg).unwrap();
        assert_eq!(pre.log.epochs.len(), 5);
        let plain = ExperimentConfig {
            enhancement: Enhancement::Base,
            ..cfg.clone()
        };
        base.push(experiment::tune_rec(&bench, &plain, None).unwrap().test["recall@5"]);
        full.push(experiment::tune_rec(&bench, &cfg, Some(pre.encoder)).unwrap().test["recall@5"]);
        let random = experiment::random_encoder(&bench, &cfg).unwrap();
        g3.push(experiment::tune_rec(&bench, &cfg, Some(random)).unwrap().test["recall@5"]);
    }
    let secs = start.elapsed().as_secs_f64();
    let (b, f, r) = (mean(&base), mean(&full), mean(&g3));
    verdict(
        7,
        "learning smoke test",
        f >= b && r <= f && secs < 300.0,
        &format!("mean Recall@5 over 5 seeds: base MF {b:.4}, mudok MF {f:.4}, G3 no-pretrain {r:.4}; {secs:.0}s (limit 300s)"),
    )
}

fn criterion_08_transfer_smoke_test() -> bool {
    let start = Instant::now();
    let metrics = ["recall@5", "recall@20", "ndcg@5"];
    let mut rows: Vec<[Vec<f64>; 3]> = vec![Default::default(); metrics.len()];
    for seed in 0..5u64 {
        let spec = SyntheticSpec {
            seed,
            shared_attr_fraction: 0.5,
            ..SyntheticSpec::default()
        };
        let bench = generate_synthetic_benchmark(&spec).unwrap();
        let cmp = experiment::run_transfer(&bench, &smoke_config(seed), true, Path::new(".")).unwrap();
        for (m, row) in metrics.iter().zip(rows.iter_mut()) {
            for (k, label) in [OOD, NO_PRETRAIN, FULL].iter().enumerate() {
                row[k].push(cmp.run(label).unwrap().outcome.test[*m]);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut ok = secs < 600.0;
    let mut detail = Vec::new();
    for (m, row) in metrics.iter().zip(&rows) {
        let (ood, none, full) = (mean(&row[0]), mean(&row[1]), mean(&row[2]));
        ok &= ood >= none && full >= ood;
        detail.push(format!("{m} ood {ood:.4} none {none:.4} full {full:.4}"));
    }
    verdict(
        8,
        "transfer smoke test",
        ok,
        &format!("means over 5 seeds: {}; {secs:.0}s (limit 600s)", detail.join("; ")),
    )
}

fn criterion_09_throughput() -> bool {
    let bench = generate_synthetic_benchmark(&SyntheticSpec {
        n_domains: 4,
        items_per_domain: 2475,
        attrs_per_domain: 50,
        n_users: 10,
        interactions_per_user: 5,
        text_examples_per_domain: 10,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let entities = bench.kg.num_entities();
    assert!(entities >= 10_000, "{entities}");
    let cfg = PretrainConfig {
        encoder: EncoderConfig {
            d_feat: bench.features.dim(),
            ..EncoderConfig::default()
        },
        batch_size: 256,
        ..PretrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (secs, steps) = pool.install(|| {
        let mut t = Pretrainer::<f32>::new(cfg, bench.kg.num_relations()).unwrap();
        let mut log = PretrainLog::default();
        let start = Instant::now();
        let epoch = t.train_epoch(&bench.kg, &bench.features, &mut log).unwrap();
        (start.elapsed().as_secs_f64(), epoch.steps)
    });
    verdict(
        9,
        "throughput",
        secs < 60.0,
        &format!("one epoch over {entities} entities, {steps} steps of 256, one thread: {secs:.1}s (limit 60s)"),
    )
}

fn criterion_10_round_trips() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let enc = Encoder::<f32>::new(EncoderConfig::default(), 12, &mut RngStream::new(8)).unwrap();
    let first = dir.path().join("a.mdkc");
    let second = dir.path().join("b.mdkc");
    checkpoint::save(&first, &enc.params, &enc.config, serde_json::Value::Null).unwrap();
    let (store, side) = checkpoint::load(&first).unwrap();
    checkpoint::save(&second, &store, &side.encoder, side.extra.clone()).unwrap();
    let ckpt_same = fs::read(&first).unwrap() == fs::read(&second).unwrap()
        && fs::read(checkpoint::sidecar_path(&first)).unwrap() == fs::read(checkpoint::sidecar_path(&second)).unwrap()
        && store.changed_since(&enc.params).is_empty();

    let spec = SyntheticSpec {
        seed: 42,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic_benchmark(&spec).unwrap();
    let b = generate_synthetic_benchmark(&spec).unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    let ma = write_benchmark(&a, &da).unwrap();
    write_benchmark(&b, &db).unwrap();
    let mut files_same = a == b;
    let mut count = 0;
    let mut stack = vec![da.clone()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let twin = db.join(p.strip_prefix(&da).unwrap());
                files_same &= fs::read(&p).unwrap() == fs::read(&twin).unwrap();
                count += 1;
            }
        }
    }
    let reloaded = load_benchmark(&ma).unwrap() == a;
    let other = generate_synthetic_benchmark(&SyntheticSpec { seed: 43, ..spec }).unwrap() != a;
    verdict(
        10,
        "round trips",
        ckpt_same && files_same && reloaded && other,
        &format!(
            "checkpoint save/load/save byte-identical {ckpt_same}; {count} benchmark files identical {files_same}; reload equal {reloaded}; new seed differs {other}"
        ),
    )
}
