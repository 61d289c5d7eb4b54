use super::*;
use crate::autodiff::grad_check;
use crate::encoder::{Encoder, EncoderConfig};
use crate::kg::{build_multidomain_kg, DomainSource, RawTriple};
use crate::ppt::{PromptConfig, PREFIX_PROJ, PREFIX_TOKENS};

fn toy_kg() -> (MultiDomainKG, FeatureTable) {
    let triples = (0..3)
        .flat_map(|i| {
            (0..4).map(move |j| RawTriple {
                head: format!("item{i}"),
                relation: format!("r{j}"),
                tail: format!("v{}", (i + j) % 3),
            })
        })
        .collect();
    let kg = build_multidomain_kg(&[DomainSource {
        name: "d".into(),
        triples,
        items: (0..3).map(|i| format!("item{i}")).collect(),
    }])
    .unwrap();
    let features = FeatureTable::hashed(kg.entities().names(), 12, 0);
    (kg, features)
}

fn example(label: usize, item: usize, text: &str) -> TextExample {
    TextExample {
        label,
        item: format!("item{item}"),
        text: text.into(),
    }
}

fn toy_task(n_labels: usize) -> TextTask {
    let train = (0..8)
        .map(|k| example(k % n_labels, k % 3, &format!("w{k} cue{}", k % n_labels)))
        .collect();
    let valid = (0..3).map(|k| example(k % n_labels, k, "w1 w2")).collect();
    let test = (0..4)
        .map(|k| example((k + 1) % n_labels, k % 3, &format!("cue{k}")))
        .collect();
    TextTask {
        n_labels,
        train,
        valid,
        test,
    }
}

fn prompt_module(kg: &MultiDomainKG) -> PromptModule<f64> {
    let cfg = EncoderConfig {
        d_feat: 12,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        n_triples: 3,
        init_std: 0.3,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, kg.num_relations(), &mut RngStream::new(1)).unwrap();
    PromptModule::new(enc, kg, kg.items(), PromptConfig::default(), &mut RngStream::new(2)).unwrap()
}

fn text_config() -> TextConfig {
    TextConfig {
        d_text: 6,
        learning_rate: 0.05,
        batch_size: 4,
        ..TextConfig::default()
    }
}

fn hashing(cfg: &TextConfig) -> HashingEncoder {
    HashingEncoder {
        dim: cfg.d_text,
        seed: cfg.hash_seed,
    }
}

#[test]
fn zero_classifier_is_uniform() {
    let mut store = ParamStore::<f64>::new();
    TextHead::init(&mut store, 4, 5, None, &mut RngStream::new(0)).unwrap();
    store
        .get_mut(CLS_W)
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    store.bind(&mut g, &mut b);
    let pooled = g.constant(Tensor::matrix(2, 4, vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, 0.0, -4.0]).unwrap());
    let z = TextHead::logits(&mut g, &b, pooled, None).unwrap();
    let p = g.softmax_rows(z).unwrap();
    for v in g.value(p).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
    let loss = TextHead::loss(&mut g, z, &[0, 3]).unwrap();
    assert!((g.value(loss).item() - (-(0.2f64).ln())).abs() < 1e-12);
    assert!((g.value(loss).item() - 1.6094).abs() < 1e-4);
}

#[test]
fn too_few_labels_rejected() {
    let mut store = ParamStore::<f64>::new();
    assert!(TextHead::init(&mut store, 4, 1, None, &mut RngStream::new(0)).is_err());
}

#[test]
fn softmax_matches_scalar_oracle() {
    let mut rng = RngStream::new(9);
    let (n, d, c, dm) = (5, 4, 3, 6);
    let mut rand = |k: usize| (0..k).map(|_| rng.uniform() * 2.0 - 1.0).collect::<Vec<f64>>();
    let o = rand(n * d);
    let h = rand(n * dm);
    let fuse = rand(dm * d);
    let w = rand(d * c);
    let bias = rand(c);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    for (name, shape, data) in [
        (FUSE, vec![dm, d], &fuse),
        (CLS_W, vec![d, c], &w),
        (CLS_B, vec![c], &bias),
    ] {
        let v = g.constant(Tensor::new(shape, data.clone()).unwrap());
        b.insert(name, v);
    }
    let ov = g.constant(Tensor::matrix(n, d, o.clone()).unwrap());
    let hv = g.constant(Tensor::matrix(n, dm, h.clone()).unwrap());
    let z = TextHead::logits(&mut g, &b, ov, Some(hv)).unwrap();
    let p = g.softmax_rows(z).unwrap();
    let got = g.value(p).clone();
    for r in 0..n {
        let mut x = vec![0.0; d];
        for j in 0..d {
            x[j] = o[r * d + j];
            for k in 0..dm {
                x[j] += h[r * dm + k] / (dm as f64).sqrt() * fuse[k * d + j];
            }
        }
        let mut zs = vec![0.0; c];
        for k in 0..c {
            zs[k] = bias[k];
            for j in 0..d {
                zs[k] += x[j] * w[j * c + k];
            }
        }
        let denom: f64 = zs.iter().map(|z| z.exp()).sum();
        let mut total = 0.0;
        for (k, z) in zs.iter().enumerate() {
            let expect = z.exp() / denom;
            assert!((got.row(r)[k] - expect).abs() < 1e-12);
            total += got.row(r)[k];
        }
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn hashing_encoder_is_deterministic_and_zero_input_gives_bias() {
    let enc = HashingEncoder { dim: 8, seed: 3 };
    let mut store = ParamStore::<f64>::new();
    PooledEncoder::<f64>::init_params(&enc, &mut store, &mut RngStream::new(1)).unwrap();
    store
        .get_mut(TEXT_B)
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.5, -0.5, 0.0, 1.0, 2.0, -1.0, 0.25, 0.0]);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    store.bind(&mut g, &mut b);
    let inputs = [
        TextInput {
            row: 0,
            text: "good pen",
            item_text: "item1",
        },
        TextInput {
            row: 1,
            text: "good pen",
            item_text: "item1",
        },
        TextInput {
            row: 2,
            text: "",
            item_text: "",
        },
    ];
    let o = enc.pooled(&mut g, &b, &inputs).unwrap();
    let v = g.value(o);
    assert_eq!(v.row(0), v.row(1));
    assert_eq!(v.row(2), &[0.5, 0.0, 0.0, 1.0, 2.0, 0.0, 0.25, 0.0]);
}

#[test]
fn precomputed_vectors_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pooled.mdkp");
    let mut rng = RngStream::new(4);
    let data: Vec<f32> = (0..15).map(|_| rng.uniform() as f32 - 0.5).collect();
    PrecomputedEncoder::new(FeatureTable::new(3, data.clone()).unwrap())
        .write(&path)
        .unwrap();
    let enc = PrecomputedEncoder::read(&path).unwrap();
    assert_eq!(enc.rows(), 5);
    let mut g = Graph::<f32>::new();
    let inputs: Vec<TextInput<'_>> = [4, 0, 2]
        .iter()
        .map(|&row| TextInput {
            row,
            text: "x",
            item_text: "y",
        })
        .collect();
    let o = enc.pooled(&mut g, &Bindings::new(), &inputs).unwrap();
    assert_eq!(g.value(o).row(0), &data[12..15]);
    assert_eq!(g.value(o).row(1), &data[0..3]);
    assert_eq!(g.value(o).row(2), &data[6..9]);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(PrecomputedEncoder::read(&path).is_err());
}

#[test]
fn cross_entropy_gradient_through_fusion_and_prefix() {
    let (kg, features) = toy_kg();
    let cfg = text_config();
    let mut trainer = TextTrainer::new(&kg, toy_task(3), hashing(&cfg), cfg, Some(prompt_module(&kg)), 5).unwrap();
    // move away from the zero start so every path carries gradient
    let mut rng = RngStream::new(6);
    let p = trainer.prompt.as_mut().unwrap();
    for v in p.prefix.params.get_mut(PREFIX_TOKENS).unwrap().data_mut() {
        *v = rng.uniform() - 0.5;
    }
    for v in trainer.params.get_mut(FUSE).unwrap().data_mut() {
        *v = rng.uniform() - 0.5;
    }
    let head: Vec<String> = trainer.params.names().map(str::to_string).collect();
    let prefix: Vec<String> = vec![PREFIX_TOKENS.into(), PREFIX_PROJ.into()];
    let names: Vec<String> = head.iter().chain(&prefix).cloned().collect();
    let p = trainer.prompt.as_ref().unwrap();
    let mut values: Vec<Tensor<f64>> = trainer
        .params
        .iter()
        .map(|e| e.value.clone())
        .chain(prefix.iter().map(|n| p.prefix.params.get(n).unwrap().clone()))
        .collect();
    let rows = [0, 1, 2, 3, 5];
    let report = grad_check(
        |g, vars| {
            let mut b = Bindings::new();
            p.encoder.bind_frozen(g, &mut b);
            for (n, &v) in names.iter().zip(vars) {
                b.insert(n.clone(), v);
            }
            let (z, labels) =
                trainer.forward(g, &b, &features, TextSplit::Train, &rows, false, &mut RngStream::new(0))?;
            TextHead::loss(g, z, &labels)
        },
        &mut values,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_prefix_start_matches_base_model() {
    let (kg, features) = toy_kg();
    let cfg = text_config();
    let base = TextTrainer::<f64, _>::new(&kg, toy_task(2), hashing(&cfg), cfg.clone(), None, 11).unwrap();
    let tuned = TextTrainer::new(&kg, toy_task(2), hashing(&cfg), cfg, Some(prompt_module(&kg)), 11).unwrap();
    for split in [TextSplit::Valid, TextSplit::Test] {
        let (a, _) = base.probabilities(&features, split).unwrap();
        let (b, _) = tuned.probabilities(&features, split).unwrap();
        assert!(a.bits_eq(&b));
        assert_eq!(
            base.evaluate(&features, split).unwrap(),
            tuned.evaluate(&features, split).unwrap()
        );
    }
}

#[test]
fn metrics_match_confusion_matrix_oracle() {
    let (kg, features) = toy_kg();
    let cfg = text_config();
    let mut rng = RngStream::new(30);
    let words = ["alpha", "beta", "gamma", "delta", "eps"];
    for n_labels in [2, 4] {
        let mut task = toy_task(n_labels);
        task.test = (0..30)
            .map(|_| {
                let text = format!("{} {}", words[rng.below(5)], words[rng.below(5)]);
                example(rng.below(n_labels), rng.below(3), &text)
            })
            .collect();
        let mut trainer = TextTrainer::<f64, _>::new(&kg, task, hashing(&cfg), cfg.clone(), None, 2).unwrap();
        trainer.train_epoch(&features).unwrap();
        let m = trainer.evaluate(&features, TextSplit::Test).unwrap();
        let (probs, gold) = trainer.probabilities(&features, TextSplit::Test).unwrap();
        let mut confusion = vec![vec![0usize; n_labels]; n_labels];
        let mut nll = 0.0;
        for (r, &y) in gold.iter().enumerate() {
            let row = probs.row(r);
            let pred = (0..n_labels).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            confusion[y][pred] += 1;
            nll -= row[y].ln();
        }
        let total = gold.len() as f64;
        let correct: usize = (0..n_labels).map(|c| confusion[c][c]).sum();
        let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let f1s: Vec<f64> = (0..n_labels)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let pred_c: usize = (0..n_labels).map(|y| confusion[y][c]).sum();
                let gold_c: usize = confusion[c].iter().sum();
                let (p, r) = (safe(tp, pred_c as f64), safe(tp, gold_c as f64));
                safe(2.0 * p * r, p + r)
            })
            .collect();
        assert!((m.loss - nll / total).abs() < 1e-10);
        assert_eq!(m.multiclass.accuracy, correct as f64 / total);
        assert!((m.multiclass.macro_f1 - f1s.iter().sum::<f64>() / n_labels as f64).abs() < 1e-10);
        // single-label prediction: pooled precision and recall both equal accuracy
        assert!((m.multiclass.micro_f1 - correct as f64 / total).abs() < 1e-10);
        if n_labels == 2 {
            let b = m.binary.unwrap();
            let tp = confusion[1][1] as f64;
            let p = safe(tp, (confusion[0][1] + confusion[1][1]) as f64);
            let r = safe(tp, (confusion[1][0] + confusion[1][1]) as f64);
            assert!((b.precision - p).abs() < 1e-10 && (b.recall - r).abs() < 1e-10);
            assert!((b.f1 - safe(2.0 * p * r, p + r)).abs() < 1e-10);
        } else {
            assert!(m.binary.is_none());
        }
    }
}

#[test]
fn absent_training_class_warns() {
    let (kg, _) = toy_kg();
    let cfg = text_config();
    let mut task = toy_task(2);
    task.n_labels = 3;
    let t = TextTrainer::<f64, _>::new(&kg, task, hashing(&cfg), cfg, None, 0).unwrap();
    assert_eq!(
        t.warnings,
        vec!["class 2 is absent from the training split".to_string()]
    );
}

#[test]
fn unknown_item_is_a_config_error() {
    let (kg, _) = toy_kg();
    let cfg = text_config();
    let mut task = toy_task(2);
    task.train[0].item = "nope".into();
    let err = TextTrainer::<f64, _>::new(&kg, task, hashing(&cfg), cfg, None, 0)
        .err()
        .unwrap();
    assert!(err.is_config_error());
}

#[test]
fn training_fits_cue_words_and_keeps_backbone_frozen() {
    let (kg, features) = toy_kg();
    let cfg = text_config();
    let module = prompt_module(&kg);
    let backbone = module.encoder.params.clone();
    let mut t = TextTrainer::new(&kg, toy_task(2), hashing(&cfg), cfg, Some(module), 3).unwrap();
    let first = t.train_epoch(&features).unwrap();
    let mut last = first;
    for _ in 0..30 {
        last = t.train_epoch(&features).unwrap();
    }
    assert!(last < first * 0.5, "{first} -> {last}");
    let p = t.prompt.as_ref().unwrap();
    assert!(p.encoder.params.changed_since(&backbone).is_empty());
    assert!(p
        .prefix
        .params
        .get(PREFIX_TOKENS)
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0));
}
