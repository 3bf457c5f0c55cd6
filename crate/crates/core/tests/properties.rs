use proptest::prelude::*;
use qpmil_core::encoders::{read_feature_file, write_feature_file};
use qpmil_core::model::{aggregate_bag_feature, predict};
use qpmil_core::objectives::{class_similarity_loss, matching_loss};
use qpmil_core::pool::{select_top_n, MatchStats, PenaltyRule, PoolConfig};
use qpmil_core::{Matrix, PerformanceMatrix};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_filter("rows need non-zero norm", move |v| v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6))
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn instances_and_prototypes() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>)> {
    (1usize..10, 1usize..5, 2usize..7).prop_flat_map(|(n, k, d)| (matrix(n, d), matrix(k, d)))
}

fn lower_triangular() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6).prop_flat_map(|t| {
        (1..=t).map(|i| prop::collection::vec(0.0..=1.0f64, i)).collect::<Vec<_>>()
    })
}

proptest! {
    #[test]
    fn bag_feature_stays_within_instance_range((z, f) in instances_and_prototypes()) {
        let fb = aggregate_bag_feature(&z, &f).unwrap();
        for k in 0..z.cols() {
            let col = z.row_iter().map(|r| r[k]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            prop_assert!(fb[k] >= lo - 1e-12 && fb[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn bag_feature_ignores_instance_order((z, f) in instances_and_prototypes()) {
        let rev: Vec<Vec<f64>> = (0..z.rows()).rev().map(|i| z.row(i).to_vec()).collect();
        let a = aggregate_bag_feature(&z, &f).unwrap();
        let b = aggregate_bag_feature(&Matrix::from_rows(&rev).unwrap(), &f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_form_a_distribution(
        fb in prop::collection::vec(0.1..2.0f64, 4),
        classes in prop::collection::vec(prop::collection::vec(0.1..2.0f64, 4), 1..6),
        tau in 0.5..30.0f64,
    ) {
        let p = predict(&fb, &classes, tau, None).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn losses_stay_in_range(q in matrix(1, 5), keys in matrix(3, 5), classes in matrix(4, 5)) {
        let key_rows: Vec<&[f64]> = keys.row_iter().collect();
        let lm = matching_loss(q.row(0), &key_rows).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&lm));
        let cf: Vec<Vec<f64>> = classes.row_iter().map(|r| r.to_vec()).collect();
        let ls = class_similarity_loss(&cf).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&ls));
    }

    #[test]
    fn top_n_is_sorted_and_distinct(scores in prop::collection::vec(0.0..4.0f64, 1..15), n in 1usize..15) {
        let n = n.min(scores.len());
        let picked = select_top_n(&scores, n);
        prop_assert_eq!(picked.len(), n);
        prop_assert!(picked.windows(2).all(|w| scores[w[0]] <= scores[w[1]]));
        let worst = scores[*picked.last().unwrap()];
        prop_assert!((0..scores.len()).filter(|i| !picked.contains(i)).all(|i| scores[i] >= worst));
    }

    #[test]
    fn penalties_are_at_least_one(events in prop::collection::vec(prop::collection::vec(0usize..6, 2), 1..20)) {
        let config = PoolConfig { size: 6, top_n: 2, prompt_len: 1 };
        let mut stats = MatchStats::new(config);
        for e in &events {
            let picked = if e[0] == e[1] { vec![e[0], (e[0] + 1) % 6] } else { e.clone() };
            stats.record_match(&picked);
        }
        stats.finalize_dataset();
        for rule in [PenaltyRule::Relative { strength: 1.0 }, PenaltyRule::MatchRate] {
            let p: Vec<f64> = stats.compute_penalty(2, rule).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 1.0));
        }
        let rate: Vec<f64> = stats.compute_penalty(2, PenaltyRule::MatchRate).unwrap();
        prop_assert!(rate.iter().all(|x| *x <= 2.0));
    }

    #[test]
    fn metric_bounds(rows in lower_triangular()) {
        let m = PerformanceMatrix::new(rows, None).unwrap();
        let (acc, f, bwt) = (m.acc(), m.forgetting().unwrap(), m.bwt().unwrap());
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((-1.0..=1.0).contains(&bwt));
        prop_assert!(f >= -bwt - 1e-12);
    }

    #[test]
    fn feature_files_round_trip(m in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bag.qpf");
        let m32: Matrix<f32> = m.convert();
        write_feature_file(&path, &m32).unwrap();
        prop_assert_eq!(read_feature_file(&path).unwrap(), m32);
    }
}
