mod common;

use std::collections::BTreeSet;

use flis_core::clustering::{self, AdjacencyMatrix, ClusterMode, ClusterSet, InferenceMatrix};
use flis_core::nn::Matrix;
use flis_core::Execution;
use proptest::prelude::*;

fn one_hot(preds: &[usize], classes: usize, client: usize) -> InferenceMatrix {
    let mut m = Matrix::zeros(preds.len(), classes);
    for (r, &p) in preds.iter().enumerate() {
        m.set(r, p, 1.0);
    }
    InferenceMatrix::new(m, client)
}

fn adjacency_from(values: Vec<Vec<f64>>) -> AdjacencyMatrix {
    let n = values.len();
    AdjacencyMatrix::new(Matrix::from_rows(&values).unwrap(), (0..n).collect()).unwrap()
}

fn as_partition(cs: &ClusterSet) -> BTreeSet<BTreeSet<usize>> {
    cs.clusters.iter().map(|c| c.iter().copied().collect()).collect()
}

/// Every partition reachable by average linkage under any resolution of
/// distance ties. Inter-cluster distance is the plain mean over member pairs.
fn brute_force_hc(d: &[Vec<f64>], threshold: f64) -> BTreeSet<BTreeSet<BTreeSet<usize>>> {
    fn mean_dist(d: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
        let s: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| d[i][j])).sum();
        s / (a.len() * b.len()) as f64
    }
    fn go(d: &[Vec<f64>], threshold: f64, clusters: Vec<Vec<usize>>, out: &mut BTreeSet<BTreeSet<BTreeSet<usize>>>) {
        let mut pairs = Vec::new();
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                pairs.push((i, j, mean_dist(d, &clusters[i], &clusters[j])));
            }
        }
        let best = pairs.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        if pairs.is_empty() || best > threshold {
            out.insert(clusters.iter().map(|c| c.iter().copied().collect()).collect());
            return;
        }
        for &(i, j, v) in &pairs {
            if (v - best).abs() <= 1e-12 {
                let mut next = clusters.clone();
                let moved = next.remove(j);
                next[i].extend(moved);
                go(d, threshold, next, out);
            }
        }
    }
    let mut out = BTreeSet::new();
    go(d, threshold, (0..d.len()).map(|i| vec![i]).collect(), &mut out);
    out
}

fn distances(a: &AdjacencyMatrix) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = a.max_off_diagonal();
    (0..n).map(|i| (0..n).map(|j| m - a.get(i, j)).collect()).collect()
}

#[test]
fn adjacency_reference_values() {
    let m = 4;
    let same = one_hot(&[0, 1, 2, 0], 3, 0);
    let a = clustering::adjacency(&[same.clone(), same.with_client_id(1)]).unwrap();
    assert!((a.get(0, 1) - 0.5).abs() < 1e-15);
    assert!((a.get(0, 0) - 1.0 / (m as f64).sqrt()).abs() < 1e-15);

    let a = clustering::adjacency(&[one_hot(&[0, 0, 0, 0], 2, 0), one_hot(&[1, 1, 1, 1], 2, 1)]).unwrap();
    assert_eq!(a.get(0, 1), 0.0);
}

#[test]
fn adjacency_input_errors() {
    let a = one_hot(&[0, 1], 2, 0);
    assert!(clustering::adjacency(std::slice::from_ref(&a)).is_err());
    let wide = one_hot(&[0, 1], 3, 1);
    assert!(clustering::adjacency(&[a.clone(), wide]).is_err());
    let zero = InferenceMatrix::new(Matrix::zeros(2, 2), 7);
    let err = clustering::adjacency(&[a, zero]).unwrap_err();
    assert!(matches!(err, flis_core::FlisError::DegenerateMatrix { client: 7 }));
}

#[test]
fn hc_recovers_planted_blocks() {
    // within-group A = 0.9, cross-group A = 0.1, two groups of three
    let n = 6;
    let group = |i: usize| i / 3;
    let values: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else if group(i) == group(j) { 0.9 } else { 0.1 }).collect())
        .collect();
    let a = adjacency_from(values);
    let hc = clustering::hierarchical_clusters(&a, 0.4);
    assert_eq!(hc.mode, ClusterMode::Disjoint);
    assert_eq!(hc.clusters, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    assert!(brute_force_hc(&distances(&a), 0.4).contains(&as_partition(&hc)));
    // below the smallest distance nothing merges; above the largest all does
    assert_eq!(clustering::hierarchical_clusters(&a, -0.1).len(), 6);
    assert_eq!(clustering::hierarchical_clusters(&a, 10.0).clusters, vec![(0..6).collect::<Vec<_>>()]);
}

#[test]
fn joint_cluster_extremes() {
    let a = adjacency_from(vec![vec![0.5, 0.2, 0.3], vec![0.2, 0.5, 0.4], vec![0.3, 0.4, 0.5]]);
    let all = clustering::joint_clusters(&clustering::hard_threshold(&a, 0.0));
    assert_eq!(all.clusters, vec![vec![0, 1, 2]; 3]);
    let solo = clustering::joint_clusters(&clustering::hard_threshold(&a, a.max_off_diagonal()));
    assert_eq!(solo.clusters, vec![vec![0], vec![1], vec![2]]);
    // an entry equal to beta is not membership
    let tie = clustering::joint_clusters(&clustering::hard_threshold(&a, 0.3));
    assert_eq!(tie.clusters, vec![vec![0], vec![1, 2], vec![1, 2]]);
}

#[test]
fn clustering_error_against_pair_counts() {
    let truth = [0, 0, 0, 1, 1, 1];
    let singletons = ClusterSet { clusters: (0..6).map(|i| vec![i]).collect(), mode: ClusterMode::Disjoint };
    let e = clustering::clustering_error(&singletons, &truth).unwrap();
    assert_eq!((e.false_positives, e.false_negatives), (0, 2 * 3));
    let one = ClusterSet { clusters: vec![(0..6).collect()], mode: ClusterMode::Disjoint };
    let e = clustering::clustering_error(&one, &truth).unwrap();
    assert_eq!((e.false_positives, e.false_negatives), (9, 0));
    assert!(clustering::clustering_error(&one, &[0, 0, 0, 1, 1, -1]).is_err());
}

fn preds_pair() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2usize..6, 1usize..40).prop_flat_map(|(c, m)| {
        (Just(c), prop::collection::vec(0..c, m), prop::collection::vec(0..c, m))
    })
}

fn random_adjacency() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..7).prop_flat_map(|n| {
        // coarse values so that ties between distances actually occur
        prop::collection::vec(0u8..6, n * (n - 1) / 2).prop_map(move |upper| {
            let mut v = vec![vec![1.0; n]; n];
            let mut it = upper.into_iter();
            for i in 0..n {
                for j in i + 1..n {
                    let x = it.next().unwrap() as f64 / 8.0;
                    v[i][j] = x;
                    v[j][i] = x;
                }
            }
            v
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn one_hot_adjacency_counts_agreements((c, p, q) in preds_pair()) {
        let a = clustering::adjacency(&[one_hot(&p, c, 0), one_hot(&q, c, 1)]).unwrap();
        let agree = p.iter().zip(&q).filter(|(x, y)| x == y).count();
        let want = (agree as f64).sqrt() / p.len() as f64;
        prop_assert!((a.get(0, 1) - want).abs() < 1e-12);
        prop_assert!((a.get(0, 1) - a.get(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn adjacency_is_symmetric_and_permutation_equivariant(
        seeds in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 12), 2..6),
        shift in 0usize..5,
    ) {
        let mats: Vec<InferenceMatrix> = seeds
            .iter()
            .enumerate()
            .map(|(k, v)| InferenceMatrix::new(Matrix::new(4, 3, v.clone()).unwrap(), k))
            .collect();
        let a = clustering::adjacency_with(&mats, Execution::Sequential).unwrap();
        let n = mats.len();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-12);
            }
        }
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let shuffled: Vec<InferenceMatrix> = perm.iter().map(|&p| mats[p].clone()).collect();
        let b = clustering::adjacency_with(&shuffled, Execution::Sequential).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((b.get(i, j) - a.get(perm[i], perm[j])).abs() < 1e-12);
            }
        }
        prop_assert_eq!(b.participant_ids(), &perm[..]);
    }

    #[test]
    fn threshold_signs_and_self_membership(values in random_adjacency(), beta in 0.0f64..1.0) {
        let a = adjacency_from(values);
        let s = clustering::hard_threshold(&a, beta);
        let joint = clustering::joint_clusters(&s);
        prop_assert_eq!(joint.len(), a.len());
        for i in 0..a.len() {
            prop_assert!(joint.clusters[i].contains(&i));
            for j in 0..a.len() {
                let want = if a.get(i, j) > beta { 1 } else if a.get(i, j) < beta { -1 } else { 0 };
                prop_assert_eq!(s.get(i, j), want);
                if i != j {
                    prop_assert_eq!(joint.clusters[i].contains(&j), want > 0);
                }
            }
        }
    }

    #[test]
    fn hc_matches_some_brute_force_merge_order(values in random_adjacency(), threshold in 0.0f64..0.9) {
        let a = adjacency_from(values);
        let hc = clustering::hierarchical_clusters(&a, threshold);
        let reachable = brute_force_hc(&distances(&a), threshold);
        prop_assert!(reachable.contains(&as_partition(&hc)), "{:?} not in {:?}", hc.clusters, reachable);
    }

    #[test]
    fn hc_output_is_a_partition(values in random_adjacency(), threshold in -0.1f64..1.0) {
        let a = adjacency_from(values);
        let hc = clustering::hierarchical_clusters(&a, threshold);
        let mut all: Vec<usize> = hc.clusters.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..a.len()).collect::<Vec<_>>());
        prop_assert!(hc.clusters.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn clustering_error_matches_pair_oracle(values in random_adjacency(), beta in 0.0f64..0.8, groups in 1i64..4) {
        let a = adjacency_from(values);
        let truth: Vec<i64> = (0..a.len() as i64).map(|i| i % groups).collect();
        for found in [clustering::joint_clusters(&clustering::hard_threshold(&a, beta)), clustering::hierarchical_clusters(&a, beta)] {
            let e = clustering::clustering_error(&found, &truth).unwrap();
            prop_assert_eq!((e.false_positives, e.false_negatives), common::pair_error(&found, &truth));
        }
    }
}
