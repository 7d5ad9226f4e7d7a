//! Synthetic ranking datasets with known structure.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Document, QueryGroup, MAX_LABEL};
use crate::rng::seeded;

/// Standard normal quantiles at 0.2, 0.4, 0.6 and 0.8.
const QUINTILES: [f64; 4] = [-0.841_621_233_572_914_3, -0.253_347_103_135_799_7, 0.253_347_103_135_799_7, 0.841_621_233_572_914_3];

/// Fixed unit-norm scoring direction for `k` features; independent of any
/// dataset seed so that separately seeded splits share one labelling rule.
pub fn linear_weights(k: usize) -> Vec<f64> {
    let mut rng = seeded(0x005E_ED0F_1AB5);
    let w: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.into_iter().map(|x| x / norm).collect()
}

fn bucket(score: f64) -> u8 {
    QUINTILES.iter().filter(|&&q| score > q).count() as u8
}

/// Standard normal features; the label is the quintile of a fixed linear
/// score, so labels are a deterministic function of each document.
pub fn linear_buckets(queries: usize, docs_per_query: usize, k: usize, seed: u64) -> Dataset {
    let w = linear_weights(k);
    let mut rng = seeded(seed);
    let mut next_index = 0;
    let groups = (0..queries)
        .map(|q| {
            let qid = q as u64 + 1;
            let docs = (0..docs_per_query)
                .map(|_| {
                    let features: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                    let score: f64 = features.iter().zip(&w).map(|(x, w)| x * w).sum();
                    next_index += 1;
                    Document {
                        qid,
                        label: bucket(score),
                        features,
                        doc_index: next_index - 1,
                    }
                })
                .collect();
            QueryGroup { qid, docs }
        })
        .collect();
    Dataset::new(groups, k).expect("generator respects dataset invariants")
}

/// Lists whose labels are only recoverable from the other documents.
///
/// Every list gets its own random offset added to all features. Within a
/// list, documents are ranked by how close their feature sum lies to the
/// list's mean feature sum, and the closest fifth gets label 4, the next
/// fifth label 3, and so on. A scorer that sees one document at a time
/// cannot tell where the list mean is.
pub fn context_ranks(queries: usize, docs_per_query: usize, k: usize, offset_scale: f64, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let mut next_index = 0;
    let groups = (0..queries)
        .map(|q| {
            let qid = q as u64 + 1;
            let offset: Vec<f64> = (0..k)
                .map(|_| offset_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let features: Vec<Vec<f64>> = (0..docs_per_query)
                .map(|_| {
                    offset
                        .iter()
                        .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let sums: Vec<f64> = features.iter().map(|f| f.iter().sum()).collect();
            let mean = sums.iter().sum::<f64>() / sums.len() as f64;
            let mut order: Vec<usize> = (0..docs_per_query).collect();
            order.sort_by(|&a, &b| (sums[a] - mean).abs().total_cmp(&(sums[b] - mean).abs()));
            let mut labels = vec![0u8; docs_per_query];
            let levels = MAX_LABEL as usize + 1;
            for (rank, &i) in order.iter().enumerate() {
                labels[i] = MAX_LABEL - (rank * levels / docs_per_query) as u8;
            }
            let docs = features
                .into_iter()
                .zip(labels)
                .map(|(features, label)| {
                    next_index += 1;
                    Document {
                        qid,
                        label,
                        features,
                        doc_index: next_index - 1,
                    }
                })
                .collect();
            QueryGroup { qid, docs }
        })
        .collect();
    Dataset::new(groups, k).expect("generator respects dataset invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_labels_are_a_function_of_features() {
        let ds = linear_buckets(50, 20, 10, 3);
        assert_eq!((ds.L(), ds.num_docs(), ds.k), (50, 1000, 10));
        let w = linear_weights(10);
        for d in ds.groups.iter().flat_map(|g| &g.docs) {
            let s: f64 = d.features.iter().zip(&w).map(|(x, w)| x * w).sum();
            assert_eq!(d.label, bucket(s));
        }
        let hist = ds.summary().label_histogram;
        assert!(hist.iter().all(|&c| c > 120), "{hist:?}");
    }

    #[test]
    fn splits_share_the_labelling_rule() {
        assert_eq!(linear_weights(6), linear_weights(6));
        assert_ne!(linear_buckets(2, 3, 6, 1), linear_buckets(2, 3, 6, 2));
    }

    #[test]
    fn context_labels_are_balanced_per_list() {
        let ds = context_ranks(4, 20, 5, 3.0, 9);
        for g in &ds.groups {
            let mut hist = [0; 5];
            for l in g.labels() {
                hist[l as usize] += 1;
            }
            assert_eq!(hist, [4; 5]);
        }
    }
}
