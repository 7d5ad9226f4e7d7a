use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::rng::{query_stream, seeded};
use crate::synth::linear_buckets;

// Brute-force references: explicit position counting, ideal orderings by
// enumerating every permutation, and metric formulas written out longhand.

fn brute_order(scores: &[f64]) -> Vec<usize> {
    let n = scores.len();
    let mut order = vec![usize::MAX; n];
    for i in 0..n {
        let ahead = (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        order[ahead] = i;
    }
    order
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_dcg(labels: &[u8], order: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for (pos, &i) in order.iter().enumerate().take(k) {
        total += (2f64.powi(labels[i] as i32) - 1.0) / (pos as f64 + 2.0).ln() * std::f64::consts::LN_2;
    }
    total
}

fn brute_ndcg(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    let ideal = permutations(labels.len())
        .iter()
        .map(|p| brute_dcg(labels, p, k))
        .fold(0.0, f64::max);
    (ideal > 0.0).then(|| brute_dcg(labels, &brute_order(scores), k) / ideal)
}

fn brute_err(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let order = brute_order(scores);
    let r = |i: usize| (2f64.powi(labels[order[i]] as i32) - 1.0) / 16.0;
    (0..k.min(order.len()))
        .map(|pos| r(pos) / (pos + 1) as f64 * (0..pos).map(|j| 1.0 - r(j)).product::<f64>())
        .sum()
}

fn brute_precision(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let order = brute_order(scores);
    let rel = order.iter().take(k).filter(|&&i| labels[i] >= 1).count();
    rel as f64 / k as f64
}

fn brute_map(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let order = brute_order(scores);
    let precisions: Vec<f64> = (0..k.min(order.len()))
        .filter(|&pos| labels[order[pos]] >= 1)
        .map(|pos| brute_precision(scores, labels, pos + 1))
        .collect();
    if precisions.is_empty() {
        0.0
    } else {
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }
}

fn brute_mrr(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let order = brute_order(scores);
    for pos in 0..k.min(order.len()) {
        if labels[order[pos]] >= 1 {
            return 1.0 / (pos + 1) as f64;
        }
    }
    0.0
}

#[test]
fn metrics_match_brute_force_on_small_lists() {
    let mut rng = seeded(11);
    let mut checked = 0;
    for n in 1..=6 {
        for _ in 0..500 {
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=4)).collect();
            // coarse scores so that ties are common
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
            for k in 1..=n + 1 {
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
                match (ndcg_at_k(&scores, &labels, k).unwrap(), brute_ndcg(&scores, &labels, k)) {
                    (Some(a), Some(b)) => assert!(close(a, b), "ndcg {labels:?} {scores:?} @{k}: {a} vs {b}"),
                    (a, b) => assert_eq!(a, b),
                }
                assert!(close(err_at_k(&scores, &labels, k).unwrap(), brute_err(&scores, &labels, k)));
                assert!(close(map_at_k(&scores, &labels, k).unwrap(), brute_map(&scores, &labels, k)));
                assert!(close(mrr_at_k(&scores, &labels, k).unwrap(), brute_mrr(&scores, &labels, k)));
                assert!(close(
                    precision_at_k(&scores, &labels, k).unwrap(),
                    brute_precision(&scores, &labels, k)
                ));
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 500 * (2 + 3 + 4 + 5 + 6 + 7));
}

#[test]
fn ndcg_reversed_three_documents() {
    let labels = [3, 2, 0];
    let scores = [1.0, 2.0, 3.0];
    let dcg = 0.0 + 3.0 / 3f64.log2() + 7.0 / 4f64.log2();
    let idcg = 7.0 + 3.0 / 3f64.log2();
    let v = ndcg_at_k(&scores, &labels, 3).unwrap().unwrap();
    assert!((v - dcg / idcg).abs() < 1e-12);
    assert!((v - 0.6064).abs() < 5e-5);
    assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], &labels, 3).unwrap(), Some(1.0));
}

#[test]
fn simple_cases() {
    let v = err_at_k(&[0.3], &[4], 1).unwrap();
    assert_eq!(v, 15.0 / 16.0);
    let scores = [0.9, 0.1, 0.5];
    let labels = [2, 0, 0];
    assert_eq!(mrr_at_k(&scores, &labels, 3).unwrap(), 1.0);
    assert_eq!(precision_at_k(&scores, &labels, 1).unwrap(), 1.0);
    assert_eq!(mrr_at_k(&[0.1, 0.9, 0.5], &labels, 2).unwrap(), 0.0);
    assert_eq!(ndcg_at_k(&scores, &[0, 0, 0], 3).unwrap(), None);
    assert!(matches!(ndcg_at_k(&scores, &labels, 0), Err(Error::Contract(_))));
    assert!(matches!(map_at_k(&scores, &labels, 0), Err(Error::Contract(_))));
    assert!(ndcg_at_k(&scores, &[1, 2], 2).is_err());
}

#[test]
fn ties_follow_list_position() {
    assert_eq!(ranking(&[1.0, 2.0, 1.0, 2.0]), vec![1, 3, 0, 2]);
}

#[test]
fn rsd_examples() {
    let abc = vec![0, 1, 2];
    let acb = vec![0, 2, 1];
    let r = rsd(&[abc.clone(), abc.clone(), acb], 2).unwrap();
    assert_eq!((r.n, r.m), (2, 3));
    assert_eq!(r.rsd, 2.0 / 3.0);

    let same = vec![abc.clone(); 10];
    for k in [1, 5, 10, 20] {
        assert_eq!(rsd(&same, k).unwrap().rsd, 0.1);
    }

    let perms = permutations(4);
    let distinct: Vec<Vec<usize>> = perms.iter().step_by(2).take(10).cloned().collect();
    assert_eq!(rsd(&distinct, 4).unwrap().rsd, 1.0);

    assert!(matches!(rsd(&[abc, vec![0, 1, 3]], 2), Err(Error::Contract(_))));
    assert!(rsd(&[], 2).is_err());
}

#[test]
fn cutoff_parsing() {
    assert_eq!("10".parse::<Cutoff>().unwrap(), Cutoff::At(10));
    assert_eq!("ALL".parse::<Cutoff>().unwrap(), Cutoff::All);
    assert!("0".parse::<Cutoff>().is_err());
    assert_eq!(Cutoff::All.resolve(7), 7);
}

#[test]
fn oracle_ranker_is_perfect_and_counts_exclusions() {
    let mut ds = linear_buckets(30, 12, 4, 5);
    for d in &mut ds.groups[3].docs {
        d.label = 0;
    }
    let report = evaluate_dataset(&ds, |_, g| Ok(g.labels_f64()), &DEFAULT_CUTOFFS).unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.n_queries(), ds.L() - 1);
    for c in DEFAULT_CUTOFFS {
        assert!((report.mean(Metric::Ndcg, c) - 1.0).abs() < 1e-12);
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 5 * DEFAULT_CUTOFFS.len());
    assert!(csv.contains("ndcg,10,1.000000,29\n"));
}

#[test]
fn three_cutoffs_give_three_ndcg_rows() {
    let ds = linear_buckets(5, 8, 3, 1);
    let cutoffs = [Cutoff::At(1), Cutoff::At(5), Cutoff::At(10)];
    let report = evaluate_dataset(&ds, |_, g| Ok(g.labels_f64()), &cutoffs).unwrap();
    assert_eq!(report.to_csv().lines().filter(|l| l.starts_with("ndcg,")).count(), 3);
}

#[test]
fn ranker_errors_name_the_query() {
    let ds = linear_buckets(3, 4, 3, 1);
    let err = evaluate_dataset(&ds, |i, g| if i == 2 { Ok(vec![f64::NAN; g.n()]) } else { Ok(g.labels_f64()) }, &DEFAULT_CUTOFFS)
        .unwrap_err();
    assert!(matches!(err, Error::Query { qid: 3, .. }), "{err}");
    assert!(matches!(err.root(), Error::NonFinite(_)));
}

#[test]
fn random_ranker_matches_monte_carlo_expectation() {
    let ds = linear_buckets(1000, 20, 5, 21);
    let report = evaluate_dataset(
        &ds,
        |i, g| {
            let mut rng = query_stream(99, i, 0);
            Ok((0..g.n()).map(|_| rng.random::<f64>()).collect())
        },
        &[Cutoff::At(10)],
    )
    .unwrap();

    let mut rng = seeded(4);
    let mut expected = 0.0;
    for g in &ds.groups {
        let labels = g.labels();
        let mut ideal = labels.clone();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = brute_dcg(&ideal, &(0..ideal.len()).collect::<Vec<_>>(), 10);
        let mut shuffled = labels.clone();
        let trials = 200;
        let mut acc = 0.0;
        for _ in 0..trials {
            shuffled.shuffle(&mut rng);
            acc += brute_dcg(&shuffled, &(0..shuffled.len()).collect::<Vec<_>>(), 10) / idcg;
        }
        expected += acc / trials as f64;
    }
    expected /= ds.L() as f64;
    let got = report.mean(Metric::Ndcg, Cutoff::At(10));
    assert!((got - expected).abs() < 0.02, "{got} vs {expected}");
}

fn list() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (1usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..=4, n),
            prop::collection::hash_set(-1000i32..1000, n).prop_map(|s| s.into_iter().map(|v| v as f64 / 7.0).collect()),
        )
    })
}

proptest! {
    #[test]
    fn metrics_in_unit_interval_and_permutation_invariant((labels, scores) in list(), seed in any::<u64>(), k in 1usize..10) {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut seeded(seed));
        let pl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        for m in Metric::ALL {
            let a = m.compute(&scores, &labels, k).unwrap();
            let b = m.compute(&ps, &pl, k).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
                    prop_assert!((a - b).abs() < 1e-12);
                }
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn fixing_an_adjacent_inversion_raises_ndcg((labels, scores) in list()) {
        let order = ranking(&scores);
        let n = labels.len();
        if let Some(pos) = (0..n.saturating_sub(1)).find(|&p| labels[order[p]] < labels[order[p + 1]]) {
            let (hi, lo) = (order[pos], order[pos + 1]);
            let mut swapped = scores.clone();
            swapped.swap(hi, lo);
            let before = ndcg_at_k(&scores, &labels, n).unwrap().unwrap();
            let after = ndcg_at_k(&swapped, &labels, n).unwrap().unwrap();
            prop_assert!(after > before);
        }
    }

    #[test]
    fn deterministic_ranker_rsd_is_one_over_m(scores in prop::collection::vec(-5.0f64..5.0, 1..30), m in 1usize..12, k in 1usize..25) {
        let runs = vec![ranking(&scores); m];
        prop_assert_eq!(rsd(&runs, k).unwrap().rsd, 1.0 / m as f64);
    }
}
