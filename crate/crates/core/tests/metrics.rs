use std::collections::BTreeMap;

use proptest::prelude::*;
use unipact_core::metrics::*;
use unipact_core::synth::Category;

/// Direct pairwise definition: P(s+ > s-) + 0.5 P(s+ = s-).
fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
    ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
}

#[test]
fn worked_examples() {
    assert_eq!(auroc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
    assert_eq!(auroc(&set(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1])).unwrap(), 1.0);
    assert_eq!(auroc(&set(&[0.4, 0.3, 0.2, 0.1], &[0, 0, 1, 1])).unwrap(), 0.0);
    assert_eq!(auroc(&set(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
}

#[test]
fn single_class_is_degenerate() {
    for labels in [[1u8, 1, 1], [0, 0, 0]] {
        let err = auroc(&set(&[0.1, 0.2, 0.3], &labels)).unwrap_err();
        assert_eq!(err.kind(), "degenerate");
    }
    assert!(auroc(&ScoredSet::default()).is_err());
    assert!(ScoredSet::new(vec![0.1], vec![2]).is_err());
    assert!(ScoredSet::new(vec![0.1, 0.2], vec![1]).is_err());
    assert!(auroc(&set(&[f64::NAN, 0.2], &[0, 1])).is_err());
}

#[test]
fn bootstrap_interval_brackets_the_point_estimate() {
    let scores: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let labels: Vec<u8> = scores.iter().enumerate().map(|(i, &s)| u8::from(s + ((i * 13) % 7) as f64 / 10.0 > 0.8)).collect();
    let s = set(&scores, &labels);
    let a = auroc(&s).unwrap();
    let (lo, hi) = bootstrap_ci(&s, 1000, 7).unwrap();
    assert!(lo <= a && a <= hi, "{lo} {a} {hi}");
    assert!(hi - lo < 0.3);
    assert_eq!(bootstrap_ci(&s, 1000, 7).unwrap(), (lo, hi));
    assert!(bootstrap_ci(&s, 0, 7).is_err());
}

#[test]
fn bootstrap_on_a_perfect_separator_collapses() {
    let s = set(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[0, 0, 0, 1, 1, 1]);
    assert_eq!(bootstrap_ci(&s, 200, 1).unwrap(), (1.0, 1.0));
}

#[test]
fn bootstrap_with_a_single_positive_still_resolves() {
    let mut scores = vec![0.0; 30];
    let mut labels = vec![0u8; 30];
    scores[0] = 1.0;
    labels[0] = 1;
    for (i, s) in scores.iter_mut().enumerate().skip(1) {
        *s = i as f64 / 100.0;
    }
    let (lo, hi) = bootstrap_ci(&set(&scores, &labels), 50, 3).unwrap();
    assert_eq!((lo, hi), (1.0, 1.0));
}

#[test]
fn percentile_interpolates() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&v, 50.0), 3.0);
    assert_eq!(percentile(&v, 100.0), 5.0);
    assert_eq!(percentile(&v, 12.5), 1.5);
}

fn category_report(values: [f64; 4]) -> EvalReport {
    let mut results = Vec::new();
    let mut cats = BTreeMap::new();
    for (c, v) in Category::ALL.into_iter().zip(values) {
        let id = format!("{}_x", c.name());
        cats.insert(id.clone(), c);
        results.push(SubtaskResult { id, auroc: v / 100.0, ci_lo: 0.0, ci_hi: 1.0, n_pos: 10, n_neg: 10 });
    }
    aggregate(&results, &cats, 0, 0).unwrap()
}

#[test]
fn overall_is_the_macro_average_of_categories() {
    let r = category_report([83.98, 91.17, 90.50, 91.82]);
    assert_eq!(round_to(100.0 * r.overall, 2), 89.37);
    let r = category_report([82.56, 90.70, 90.63, 91.68]);
    let o = round_to(100.0 * r.overall, 2);
    assert!((88.89..=88.90).contains(&o), "{o}");
}

#[test]
fn categories_are_weighted_equally_not_by_size() {
    let mut results = Vec::new();
    let mut cats = BTreeMap::new();
    for i in 0..9 {
        let id = format!("dx{i}");
        cats.insert(id.clone(), Category::Diagnosis);
        results.push(SubtaskResult { id, auroc: 0.6, ci_lo: 0.5, ci_hi: 0.7, n_pos: 9, n_neg: 9 });
    }
    cats.insert("m".into(), Category::Mortality);
    results.push(SubtaskResult { id: "m".into(), auroc: 1.0, ci_lo: 0.9, ci_hi: 1.0, n_pos: 9, n_neg: 9 });
    let r = aggregate(&results, &cats, 10, 1).unwrap();
    assert!((r.overall - 0.8).abs() < 1e-12);
    assert_eq!(r.categories.len(), 2);
    assert_eq!(r.robust_total, 1);
}

#[test]
fn thin_subtasks_are_never_robust() {
    let cats: BTreeMap<String, Category> = [("a".to_string(), Category::Icu)].into();
    let r = aggregate(&[SubtaskResult { id: "a".into(), auroc: 0.99, ci_lo: 0.95, ci_hi: 1.0, n_pos: 4, n_neg: 50 }], &cats, 10, 1).unwrap();
    assert_eq!(r.robust_total, 0);
    assert_eq!(r.excluded, vec!["a".to_string()]);
    assert!(aggregate(&[], &cats, 10, 1).is_err());
    let unknown = SubtaskResult { id: "zz".into(), auroc: 0.5, ci_lo: 0.4, ci_hi: 0.6, n_pos: 9, n_neg: 9 };
    assert!(aggregate(&[unknown], &cats, 10, 1).is_err());
}

#[test]
fn relative_improvement_rows() {
    assert_eq!(relative_improvement(89.37, 88.90).unwrap(), 0.5);
    assert_eq!(relative_improvement(89.37, 54.86).unwrap(), 62.9);
    assert!(relative_improvement(1.0, 0.0).is_err());
}

#[test]
fn mean_and_sd_of_category_values() {
    let (m, sd) = mean_sd(&[83.98, 91.17, 90.50, 91.82]);
    assert_eq!(round_to(m, 2), 89.37);
    assert_eq!(round_to(sd, 2), 3.63);
}

#[test]
fn report_json_round_trip() {
    let r = category_report([70.0, 80.0, 90.0, 60.0]);
    assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    assert!(r.table().contains("percentile-bootstrap"));
}

#[test]
fn score_rows_group_by_subtask() {
    let rows = vec![
        ScoreRow { subtask_id: "b".into(), sample_id: "p1".into(), score: 0.25, label: 1 },
        ScoreRow { subtask_id: "a".into(), sample_id: "p1".into(), score: 0.5, label: 0 },
        ScoreRow { subtask_id: "b".into(), sample_id: "p2".into(), score: 0.75, label: 0 },
    ];
    let g = group_scores(&rows);
    assert_eq!(g.keys().collect::<Vec<_>>(), ["a", "b"]);
    assert_eq!(g["b"].scores, vec![0.25, 0.75]);
    let csv = scores_csv(&rows);
    assert!(csv.starts_with("subtask_id,sample_id,score,label\nb,p1,0.25000000,1\n"));
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0u8..8).prop_map(|k| k as f64 / 8.0), -5.0f64..5.0], n),
            prop::collection::vec(0u8..2, n),
        )
    })
    .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_the_pairwise_definition((s, l) in scored()) {
        let a = auroc(&set(&s, &l)).unwrap();
        prop_assert!((a - pairwise_auroc(&s, &l)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn invariant_under_monotone_maps((s, l) in scored()) {
        let a = auroc(&set(&s, &l)).unwrap();
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        prop_assert_eq!(auroc(&set(&t, &l)).unwrap(), a);
    }

    #[test]
    fn flipping_labels_complements((s, l) in scored()) {
        let a = auroc(&set(&s, &l)).unwrap();
        let flipped: Vec<u8> = l.iter().map(|y| 1 - y).collect();
        prop_assert!((auroc(&set(&s, &flipped)).unwrap() - (1.0 - a)).abs() <= 1e-12);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&set(&neg, &l)).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn order_of_samples_is_irrelevant((s, l) in scored(), rot in 0usize..60) {
        let a = auroc(&set(&s, &l)).unwrap();
        let k = rot % s.len();
        let mut s2 = s.clone();
        let mut l2 = l.clone();
        s2.rotate_left(k);
        l2.rotate_left(k);
        s2.reverse();
        l2.reverse();
        prop_assert_eq!(auroc(&set(&s2, &l2)).unwrap(), a);
    }

    #[test]
    fn macro_average_ignores_subtask_order(vals in prop::collection::vec(0.5f64..1.0, 4..12), rot in 0usize..12) {
        let mut results = Vec::new();
        let mut cats = BTreeMap::new();
        for (i, v) in vals.iter().enumerate() {
            let id = format!("t{i}");
            cats.insert(id.clone(), Category::ALL[i % 4]);
            results.push(SubtaskResult { id, auroc: *v, ci_lo: 0.0, ci_hi: 1.0, n_pos: 5, n_neg: 5 });
        }
        let a = aggregate(&results, &cats, 0, 0).unwrap();
        let k = rot % results.len();
        results.rotate_left(k);
        let b = aggregate(&results, &cats, 0, 0).unwrap();
        prop_assert!((a.overall - b.overall).abs() < 1e-12);
        prop_assert_eq!(a.subtasks, b.subtasks);
    }
}
