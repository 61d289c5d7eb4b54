use super::*;
use crate::autodiff::grad_check;

fn const_rows(g: &mut Graph<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    g.constant(Tensor::matrix(rows, cols, data).unwrap())
}

fn random(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect()
}

fn toy_graph() -> InteractionGraph {
    InteractionGraph::new(
        3,
        vec![10, 11, 12, 13],
        vec![(0, 0), (0, 1), (1, 1), (2, 2), (2, 3)],
        vec![(1, 2)],
        vec![(0, 3), (1, 0)],
    )
    .unwrap()
}

fn bind_all(store: &ParamStore<f64>, g: &mut Graph<f64>) -> Bindings {
    let mut b = Bindings::new();
    store.bind(g, &mut b);
    b
}

#[test]
fn overlapping_splits_are_rejected() {
    let r = InteractionGraph::new(1, vec![0, 1], vec![(0, 0)], vec![(0, 0)], vec![]);
    assert!(r.is_err());
}

#[test]
fn zero_layers_return_inputs() {
    let graph = toy_graph();
    let cfg = RecConfig {
        backbone: Backbone::GraphProp { layers: 0 },
        d_rec: 4,
        ..RecConfig::default()
    };
    let model = RecModel::<f64>::new(cfg, &graph, None, &mut RngStream::new(1)).unwrap();
    let mut g = Graph::new();
    let b = bind_all(&model.params, &mut g);
    let (u, i) = model.propagate(&mut g, &b, None).unwrap();
    assert!(g.value(u).bits_eq(model.params.get(USER_EMB).unwrap()));
    assert!(g.value(i).bits_eq(model.params.get(ITEM_EMB).unwrap()));
}

#[test]
fn single_edge_propagation_averages_endpoints() {
    let graph = InteractionGraph::new(1, vec![0], vec![(0, 0)], vec![], vec![]).unwrap();
    let cfg = RecConfig {
        backbone: Backbone::GraphProp { layers: 1 },
        d_rec: 3,
        ..RecConfig::default()
    };
    let model = RecModel::<f64>::new(cfg, &graph, None, &mut RngStream::new(4)).unwrap();
    let u0 = model.params.get(USER_EMB).unwrap().row(0).to_vec();
    let i0 = model.params.get(ITEM_EMB).unwrap().row(0).to_vec();
    let mut g = Graph::new();
    let b = bind_all(&model.params, &mut g);
    let (u, i) = model.propagate(&mut g, &b, None).unwrap();
    for k in 0..3 {
        let mean = (u0[k] + i0[k]) / 2.0;
        assert!((g.value(u).row(0)[k] - mean).abs() < 1e-15);
        assert!((g.value(i).row(0)[k] - mean).abs() < 1e-15);
    }
}

#[test]
fn zero_prompted_matrix_changes_nothing() {
    let graph = toy_graph();
    for backbone in [Backbone::Mf, Backbone::GraphProp { layers: 2 }] {
        let cfg = RecConfig {
            backbone,
            d_rec: 4,
            ..RecConfig::default()
        };
        let model = RecModel::<f64>::new(cfg, &graph, Some(6), &mut RngStream::new(1)).unwrap();
        let plain = model.scores(None).unwrap();
        let zero = model.scores(Some(&Tensor::zeros(vec![4, 6]))).unwrap();
        assert!(plain.bits_eq(&zero));
    }
}

fn bpr_value(users: Vec<f64>, items: Vec<f64>, d: usize, triples: &[(usize, usize, usize)], mu: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let nu = users.len() / d;
    let ni = items.len() / d;
    let u = const_rows(&mut g, nu, d, users);
    let i = const_rows(&mut g, ni, d, items);
    let (a, p, n) = split_triples(triples);
    let l = bpr_objective(&mut g, u, i, u, i, &a, &p, &n, mu).unwrap();
    g.value(l.sum).item()
}

#[test]
fn equal_scores_cost_ln_two() {
    let l = bpr_value(vec![1.0, 2.0], vec![0.5, 0.5, 0.5, 0.5], 2, &[(0, 0, 1)], 0.0);
    assert!((l - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn large_margin_costs_nearly_nothing() {
    let l = bpr_value(vec![1.0], vec![60.0, -60.0], 1, &[(0, 0, 1)], 0.0);
    assert!(l > 0.0 && l < 1e-40);
}

#[test]
fn bpr_matches_scalar_oracle() {
    let mut rng = RngStream::new(3);
    let (nu, ni, d, mu) = (4, 6, 5, 0.01);
    let users = random(&mut rng, nu * d);
    let items = random(&mut rng, ni * d);
    let triples: Vec<(usize, usize, usize)> = (0..8).map(|_| (rng.below(nu), rng.below(ni), rng.below(ni))).collect();
    let row = |m: &[f64], r: usize| m[r * d..(r + 1) * d].to_vec();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut expect = 0.0;
    for &(u, p, n) in &triples {
        let (uu, pp, nn) = (row(&users, u), row(&items, p), row(&items, n));
        let x = dot(&uu, &pp) - dot(&uu, &nn);
        expect += -(1.0 / (1.0 + (-x).exp())).ln();
        expect += mu * (dot(&uu, &uu) + dot(&pp, &pp) + dot(&nn, &nn));
    }
    let got = bpr_value(users, items, d, &triples, mu);
    assert!((got - expect).abs() <= 1e-10, "{got} vs {expect}");
}

#[test]
fn bpr_gradient_check() {
    let graph = toy_graph();
    let cfg = RecConfig {
        backbone: Backbone::GraphProp { layers: 2 },
        d_rec: 3,
        mu: 0.05,
        init_std: 0.5,
        ..RecConfig::default()
    };
    let model = RecModel::<f64>::new(cfg, &graph, Some(4), &mut RngStream::new(7)).unwrap();
    let mut rng = RngStream::new(8);
    let prompted = Tensor::matrix(4, 4, random(&mut rng, 16)).unwrap();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut values: Vec<Tensor<f64>> = model.params.iter().map(|e| e.value.clone()).collect();
    values[2] = Tensor::matrix(4, 3, random(&mut rng, 12)).unwrap();
    values.push(prompted);
    let triples = [(0, 0, 2), (1, 1, 3), (2, 3, 0), (0, 1, 3)];
    let report = grad_check(
        |g, vars| {
            let mut b = Bindings::new();
            for (n, &v) in names.iter().zip(vars) {
                b.insert(n.clone(), v);
            }
            let l = model.bpr_loss(g, &b, Some(vars[3]), &triples)?;
            Ok(l.mean)
        },
        &mut values,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn ties_prefer_lower_index() {
    assert_eq!(rank_items(&[0.5f64, 0.9, 0.9, 0.1], &BTreeSet::new()), vec![1, 2, 0, 3]);
}

#[test]
fn train_positives_are_excluded() {
    let ex: BTreeSet<usize> = [1, 3].into_iter().collect();
    let r = rank_items(&[0.5f64, 0.9, 0.2, 1.0], &ex);
    assert_eq!(r, vec![0, 2]);
}

#[test]
fn ranking_matches_brute_force_and_is_scale_free() {
    let mut rng = RngStream::new(12);
    for _ in 0..20 {
        let scores: Vec<f64> = (0..15).map(|_| (rng.below(6) as f64) * 0.5).collect();
        let ranked = rank_items(&scores, &BTreeSet::new());
        // selection-sort oracle: repeatedly take the best remaining, lowest index on ties
        let mut left: Vec<usize> = (0..15).collect();
        let mut oracle = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for k in 1..left.len() {
                if scores[left[k]] > scores[left[best]] {
                    best = k;
                }
            }
            oracle.push(left.remove(best));
        }
        assert_eq!(ranked, oracle);
        let scaled: Vec<f64> = scores.iter().map(|s| s * 3.7).collect();
        assert_eq!(rank_items(&scaled, &BTreeSet::new()), ranked);
    }
}

#[test]
fn saturated_user_cannot_get_a_negative() {
    let graph = InteractionGraph::new(1, vec![0, 1], vec![(0, 0), (0, 1)], vec![], vec![]).unwrap();
    assert!(matches!(
        sample_negative(&graph, 0, &mut RngStream::new(0)),
        Err(Error::NegativeSampling { .. })
    ));
}

#[test]
fn negatives_avoid_train_positives() {
    let graph = toy_graph();
    let mut rng = RngStream::new(5);
    for _ in 0..200 {
        let n = sample_negative(&graph, 0, &mut rng).unwrap();
        assert!(!graph.train_positives(0).contains(&n));
    }
}

#[test]
fn plain_training_reduces_loss() {
    let graph = toy_graph();
    let cfg = RecConfig {
        d_rec: 8,
        learning_rate: 0.05,
        ..RecConfig::default()
    };
    let features = FeatureTable::zeros(0, 1);
    let mut t = RecTrainer::<f32>::new(graph, cfg, None, 2).unwrap();
    let first = t.train_epoch(&features).unwrap();
    let mut last = first;
    for _ in 0..50 {
        last = t.train_epoch(&features).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
    let m = t.evaluate(&features, Split::Test).unwrap();
    assert_eq!(m.users, 2);
}
