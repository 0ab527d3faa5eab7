use graphmtl::graph::{knn_graph, markov_cluster};
use graphmtl::hypergrad::update_edges;
use graphmtl::io::ratio_split;
use graphmtl::linalg::{assemble_a, BlockDiagOperator};
use graphmtl::metrics::{tconorm, tnorm, veracity, FuzzyAdjacency};
use graphmtl::synth::{generate, SynthSpec};
use graphmtl::{StackedModel, TaskData, TaskGraph};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn graph_strategy(max_n: usize) -> impl Strategy<Value = TaskGraph> {
    (2..=max_n).prop_flat_map(|n| {
        let slots = n * (n - 1) / 2;
        prop::collection::vec(prop::option::weighted(0.5, 0.0..=1.0f64), slots).prop_map(
            move |ws| {
                let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
                let edges: Vec<_> = pairs
                    .zip(ws)
                    .filter_map(|((i, j), w)| w.map(|w| (i, j, w)))
                    .collect();
                TaskGraph::new(n, edges).unwrap()
            },
        )
    })
}

fn models_strategy(n: usize, d: usize) -> impl Strategy<Value = StackedModel> {
    prop::collection::vec(-5.0..5.0f64, n * d)
        .prop_map(move |v| StackedModel::new(DMatrix::from_row_slice(n, d, &v)).unwrap())
}

fn fuzzy_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(0.0..=1.0f64, n * (n - 1) / 2).prop_map(move |v| {
        let mut m = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                m[(i, j)] = v[k];
                m[(j, i)] = v[k];
                k += 1;
            }
        }
        m
    })
}

fn permute(m: &DMatrix<f64>, p: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(p[i], p[j])])
}

proptest! {
    #[test]
    fn laplacian_is_symmetric_psd(g in graph_strategy(8), probe in prop::collection::vec(-1.0..1.0f64, 8)) {
        let l = g.laplacian();
        prop_assert!(l.is_symmetric());
        let n = g.n_tasks();
        let dense = l.to_dense();
        for i in 0..n {
            prop_assert!(dense.row(i).sum().abs() < 1e-12);
        }
        for &(i, j, w) in g.edges() {
            prop_assert_eq!(dense[(i, j)], -w);
        }
        let x = DVector::from_column_slice(&probe[..n]);
        prop_assert!(x.dot(&(&dense * &x)) >= -1e-12);
    }

    #[test]
    fn assembled_system_is_symmetric(g in graph_strategy(5), lambda in 0.0..10.0f64, seed in 0u64..1000) {
        let n = g.n_tasks();
        let blocks = (0..n)
            .map(|i| DMatrix::from_fn(4, 2, |r, c| ((seed as usize + 7 * i + 3 * r + c) % 5) as f64 - 2.0))
            .collect();
        let a = assemble_a(&g.laplacian(), &BlockDiagOperator::new(blocks).unwrap(), lambda, 0.0).unwrap();
        prop_assert!(a.is_symmetric());
        let dense = a.to_dense();
        prop_assert_eq!(&dense, &dense.transpose());
    }

    #[test]
    fn norms_are_ordered(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let t = tnorm(a, b).unwrap();
        let s = tconorm(a, b).unwrap();
        prop_assert!(t <= a.min(b) && a.min(b) <= s);
    }

    #[test]
    fn veracity_is_permutation_invariant(
        (a, b, p) in (3usize..7).prop_flat_map(|n| (
            fuzzy_strategy(n),
            fuzzy_strategy(n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let r = veracity(&FuzzyAdjacency::new(a.clone()).unwrap(), &FuzzyAdjacency::new(b.clone()).unwrap()).unwrap();
        let q = veracity(
            &FuzzyAdjacency::new(permute(&a, &p)).unwrap(),
            &FuzzyAdjacency::new(permute(&b, &p)).unwrap(),
        ).unwrap();
        prop_assert!((r.accuracy - q.accuracy).abs() < 1e-12);
        prop_assert!((r.recall - q.recall).abs() < 1e-12);
        prop_assert!((r.precision - q.precision).abs() < 1e-12);
    }

    #[test]
    fn self_veracity_is_perfect_on_crisp_graphs(a in fuzzy_strategy(5)) {
        let crisp = a.map(|x| x.round());
        prop_assume!(crisp.amax() > 0.0);
        let f = FuzzyAdjacency::new(crisp).unwrap();
        let r = veracity(&f, &f).unwrap();
        prop_assert_eq!((r.accuracy, r.recall, r.precision, r.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn ratio_split_partitions_rows(rows in 2usize..40, r in 0.05..0.95f64, seed in 0u64..100, chrono: bool) {
        let x = DMatrix::from_fn(rows, 1, |i, _| i as f64);
        let t = TaskData::new(x, DVector::from_fn(rows, |i, _| i as f64)).unwrap();
        let (train, test) = ratio_split(std::slice::from_ref(&t), r, seed, chrono).unwrap();
        let mut seen: Vec<f64> = train[0].y.iter().chain(test[0].y.iter()).copied().collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(seen, (0..rows).map(|i| i as f64).collect::<Vec<_>>());
        prop_assert_eq!(train[0].n_samples(), ((r * rows as f64).ceil() as usize).clamp(1, rows - 1));
        if chrono {
            prop_assert!(train[0].y.iter().enumerate().all(|(i, &v)| v == i as f64));
        }
    }

    #[test]
    fn prune_is_idempotent_and_monotone(g in graph_strategy(8), lo in 0.0..1.0f64, hi in 0.0..1.0f64) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let p = g.prune(lo);
        prop_assert_eq!(&p.prune(lo), &p);
        prop_assert_eq!(p.n_tasks(), g.n_tasks());
        let q = g.prune(hi);
        prop_assert!(q.pairs().iter().all(|e| p.pairs().contains(e)));
        prop_assert_eq!(&g.prune(0.0), &g);
    }

    #[test]
    fn knn_commutes_with_relabeling(
        (m, p) in (3usize..10).prop_flat_map(|n| (models_strategy(n, 3), Just((0..n).collect::<Vec<_>>()).prop_shuffle())),
        k in 1usize..3,
    ) {
        let n = m.n_tasks();
        let k = k.min(n - 1);
        let permuted = StackedModel::new(DMatrix::from_fn(n, 3, |i, c| m.weights()[(p[i], c)])).unwrap();
        let a = knn_graph(&m, k).unwrap();
        let b = knn_graph(&permuted, k).unwrap();
        // node i of the permuted problem is node p[i] of the original
        let mut mapped: Vec<_> = b.pairs().iter().map(|&(i, j)| (p[i].min(p[j]), p[i].max(p[j]))).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, a.pairs());
    }

    #[test]
    fn edge_updates_stay_in_box(
        e in prop::collection::vec(0.0..=1.0f64, 1..20),
        g in prop::collection::vec(-100.0..100.0f64, 20),
        nu in 1e-4..10.0f64,
    ) {
        let out = update_edges(&e, &g[..e.len()], nu);
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn clustering_respects_components(a in graph_strategy(4), b in graph_strategy(4)) {
        let off = a.n_tasks();
        let edges = a.edges().iter().copied().chain(b.edges().iter().map(|&(i, j, w)| (i + off, j + off, w)));
        let g = TaskGraph::new(off + b.n_tasks(), edges).unwrap();
        let c = markov_cluster(&g, 2.0).unwrap();
        for i in 0..off {
            for j in off..g.n_tasks() {
                prop_assert_ne!(c.labels[i], c.labels[j]);
            }
        }
    }
}

#[test]
fn norm_ordering_on_grid() {
    for i in 0..=20 {
        for j in 0..=20 {
            let (a, b) = (i as f64 * 0.05, j as f64 * 0.05);
            let (a, b) = (a.min(1.0), b.min(1.0));
            assert!(tnorm(a, b).unwrap() <= a.min(b) && a.min(b) <= tconorm(a, b).unwrap());
        }
    }
}

#[test]
fn fuzzy_self_overlap_is_below_one() {
    let mut m = DMatrix::zeros(2, 2);
    m[(0, 1)] = 0.5;
    m[(1, 0)] = 0.5;
    let f = FuzzyAdjacency::new(m).unwrap();
    let r = veracity(&f, &f).unwrap();
    // T(0.5, 0.5) = 0 under the Lukasiewicz norm
    assert_eq!((r.recall, r.precision), (0.0, 0.0));
}

#[test]
fn generators_are_deterministic() {
    for spec in [SynthSpec::line(4), SynthSpec::tree(4), SynthSpec::star(4)] {
        let (a, ga) = generate(&spec).unwrap();
        let (b, gb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga.weights, gb.weights);
    }
}

#[test]
fn line_neighbours_are_closer_than_distant_tasks() {
    let (mut near, mut far, mut n_near, mut n_far) = (0.0, 0.0, 0, 0);
    for seed in 0..10 {
        let (_, gt) = generate(&SynthSpec::line(seed)).unwrap();
        let w = &gt.weights;
        for i in 0..w.nrows() {
            for j in i + 1..w.nrows() {
                let dist = (w.row(i) - w.row(j)).norm();
                if j == i + 1 {
                    near += dist;
                    n_near += 1;
                } else if j >= i + 3 {
                    far += dist;
                    n_far += 1;
                }
            }
        }
    }
    assert!(near / (n_near as f64) < far / (n_far as f64));
}

#[test]
fn star_leaves_are_weakly_correlated() {
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..10 {
        let (_, gt) = generate(&SynthSpec::star(seed)).unwrap();
        let w = &gt.weights;
        let centered: Vec<DVector<f64>> = (1..w.nrows())
            .map(|i| {
                let r = w.row(i).transpose();
                let mean = r.mean();
                r.add_scalar(-mean)
            })
            .collect();
        for a in 0..centered.len() {
            for b in a + 1..centered.len() {
                total += centered[a].dot(&centered[b]) / (centered[a].norm() * centered[b].norm());
                count += 1;
            }
        }
    }
    assert!(total / (count as f64) < 0.5);
}

#[test]
fn line_noiseless_ols_recovers_weights() {
    let spec = SynthSpec {
        noise_std: 0.0,
        samples_per_task: 200,
        ..SynthSpec::line(8)
    };
    let (tasks, gt) = generate(&spec).unwrap();
    let ols = graphmtl::inner::ols_per_task(&tasks, 0.0).unwrap();
    assert!((ols.weights() - &gt.weights).amax() < 1e-2);
}

#[test]
fn fit_is_deterministic() {
    let (tasks, _) = generate(&SynthSpec {
        n_tasks: 6,
        samples_per_task: 30,
        ..SynthSpec::line(5)
    })
    .unwrap();
    let hp = graphmtl::HyperParams {
        k: 2,
        max_outer: 20,
        ..graphmtl::HyperParams::default()
    };
    let split = graphmtl::SplitSpec {
        seed: 3,
        ..Default::default()
    };
    let a = graphmtl::driver::fit(&tasks, &hp, &split).unwrap();
    let b = graphmtl::driver::fit(&tasks, &hp, &split).unwrap();
    assert_eq!(a, b);
    assert!(a.graph.weights().iter().all(|w| (0.0..=1.0).contains(w)));
}
