use proptest::prelude::*;

use ham::adapters::{delta_weight, AdapterGroup, GroupRegistry, LayerAdapter, TaskAdapter};
use ham::ham::{assign_group, concat_into_group, prune, update_group_alpha, GroupingRule, SimilarityScope};
use ham::io::{decode, encode, AdapterFile};
use ham::merging::merge_ham;
use ham::metrics::{average_accuracy, forgetting_measure, AccuracyMatrix};
use ham::tensor::{abs_cosine, keep_count, matmul, top_magnitude_indices, Matrix};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn layer(d: usize, k: usize, r: usize) -> impl Strategy<Value = LayerAdapter> {
    (matrix(d, r), matrix(r, k)).prop_map(|(b, a)| LayerAdapter { b, a })
}

fn adapter(task_id: usize) -> impl Strategy<Value = TaskAdapter> {
    (layer(5, 4, 2), layer(3, 5, 2), 0.1f64..2.0).prop_map(move |(l0, l1, alpha)| TaskAdapter {
        task_id,
        layers: vec![l0, l1],
        alpha,
    })
}

fn accuracy_matrix() -> impl Strategy<Value = AccuracyMatrix> {
    (1usize..8).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(0.0f64..=1.0, n), n).prop_map(move |full| {
            let rows = full.iter().enumerate().map(|(t, r)| r[..=t].to_vec()).collect();
            AccuracyMatrix::from_rows(rows).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in (matrix(3, 4), matrix(4, 2), matrix(2, 5))) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn abs_cosine_is_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 6), w in prop::collection::vec(-5.0f64..5.0, 6), s in -10.0f64..10.0) {
        prop_assume!(s.abs() > 1e-3);
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        prop_assume!(n(&v) > 1e-6 && n(&w) > 1e-6);
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        let c = abs_cosine(&v, &w).unwrap();
        prop_assert!((c - abs_cosine(&scaled, &w).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn pruning_keeps_exactly_the_largest(values in prop::collection::vec(-4.0f64..4.0, 1..60), j in 1usize..=10) {
        let keep = j as f64 / 10.0;
        let kept = top_magnitude_indices(&values, keep).unwrap();
        prop_assert_eq!(kept.len(), keep_count(values.len(), keep));
        prop_assert_eq!(kept.len(), (j * values.len()).div_ceil(10));
        let smallest_kept = kept.iter().map(|&i| values[i].abs()).fold(f64::INFINITY, f64::min);
        for (i, v) in values.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(v.abs() <= smallest_kept);
            }
        }
    }

    #[test]
    fn pruning_is_nested_in_k(a in adapter(0)) {
        let mut previous: Option<TaskAdapter> = None;
        for j in 1..=10 {
            let p = prune(&a, j as f64 / 10.0).unwrap();
            if let Some(prev) = &previous {
                for (lp, lc) in prev.layers.iter().zip(&p.layers) {
                    for (x, y) in lp.b.as_slice().iter().zip(lc.b.as_slice()) {
                        prop_assert!(*x == 0.0 || x == y);
                    }
                }
            }
            previous = Some(p);
        }
    }

    #[test]
    fn group_alpha_is_order_invariant_mean(mut alphas in prop::collection::vec(-5.0f64..5.0, 1..50), seed in any::<u64>()) {
        let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
        let mut rng = ham::rng::RngState::new(seed);
        rng.shuffle(&mut alphas);
        let mut g = AdapterGroup::empty(0, &[], 1);
        for &a in &alphas {
            update_group_alpha(&mut g, a);
        }
        prop_assert!((g.alpha_g - mean).abs() < 1e-12);
        prop_assert_eq!(g.member_count, alphas.len());
    }

    #[test]
    fn group_rank_grows_by_member_rank(members in prop::collection::vec(adapter(0), 1..8), j in 1usize..=10) {
        let shapes = [(5, 4), (3, 5)];
        let mut g = AdapterGroup::empty(0, &shapes, 2);
        for (i, m) in members.iter().enumerate() {
            concat_into_group(&mut g, &prune(m, j as f64 / 10.0).unwrap()).unwrap();
            prop_assert_eq!(g.rank(), 2 * (i + 1));
        }
        prop_assert_eq!(g.member_count, members.len());
    }

    #[test]
    fn assignment_ignores_positive_rescaling(a in adapter(9), groups in prop::collection::vec(adapter(0), 1..4), s in 0.01f64..100.0, tau in 0.0f64..1.0) {
        let shapes = [(5, 4), (3, 5)];
        let mut reg = GroupRegistry::new(3, tau).unwrap();
        for (i, m) in groups.iter().enumerate() {
            let mut g = AdapterGroup::empty(i, &shapes, 2);
            concat_into_group(&mut g, m).unwrap();
            reg.groups.push(g);
        }
        let mut scaled = a.clone();
        for l in &mut scaled.layers {
            l.b = l.b.scale(s);
        }
        for rule in [GroupingRule::Similarity, GroupingRule::Orthogonality] {
            for scope in [SimilarityScope::LastLayer, SimilarityScope::MeanOverLayers] {
                let (x, y) = (assign_group(&a, &reg, rule, scope), assign_group(&scaled, &reg, rule, scope));
                if let (Ok(x), Ok(y)) = (x, y) {
                    prop_assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn merge_is_alpha_weighted_mean(groups in prop::collection::vec((adapter(0), -2.0f64..2.0), 1..4)) {
        let shapes = [(5, 4), (3, 5)];
        let mut reg = GroupRegistry::new(4, 0.3).unwrap();
        for (i, (m, alpha)) in groups.iter().enumerate() {
            let mut g = AdapterGroup::empty(i, &shapes, 2);
            concat_into_group(&mut g, m).unwrap();
            g.alpha_g = *alpha;
            reg.groups.push(g);
        }
        let merged = merge_ham(&reg).unwrap();
        let factors = merged.factors.as_ref().unwrap();
        for l in 0..2 {
            let mut expect = Matrix::zeros(shapes[l].0, shapes[l].1);
            for g in &reg.groups {
                expect.add_scaled(&delta_weight(&g.layers[l]).unwrap(), g.alpha_g / reg.len() as f64).unwrap();
            }
            prop_assert!(merged.layers[l].max_abs_diff(&expect) < 1e-9);
            prop_assert!(delta_weight(&factors[l]).unwrap().max_abs_diff(&expect) < 1e-9);
        }
    }

    #[test]
    fn adapter_files_round_trip(a in adapter(3)) {
        let back = decode(&encode(&AdapterFile::from(&a)).unwrap()).unwrap().into_task();
        prop_assert_eq!(back.task_id, 3);
        for (x, y) in a.layers.iter().zip(&back.layers) {
            prop_assert_eq!(x.b.shape(), y.b.shape());
            prop_assert!(x.b.max_abs_diff(&y.b) < 1e-6 && x.a.max_abs_diff(&y.a) < 1e-6);
        }
        prop_assert_eq!(back.alpha as f32, a.alpha as f32);
    }

    #[test]
    fn metrics_stay_in_range(m in accuracy_matrix()) {
        let aa = average_accuracy(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&aa));
        if m.num_tasks() >= 2 {
            let fm = forgetting_measure(&m).unwrap();
            prop_assert!((-1.0..=1.0).contains(&fm));
            let rows = m.rows();
            let n = m.num_tasks();
            let final_not_above_peak = (0..n - 1).all(|j| rows[n - 1][j] <= rows[j..n - 1].iter().map(|r| r[j]).fold(0.0, f64::max));
            if final_not_above_peak {
                prop_assert!(fm >= 0.0);
            }
        }
        let csv = m.to_csv();
        prop_assert_eq!(csv.lines().count(), m.num_tasks() + 1);
    }
}
