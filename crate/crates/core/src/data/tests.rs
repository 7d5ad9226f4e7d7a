use std::path::Path;

use proptest::prelude::*;

use super::*;

fn parse(text: &str, k_hint: Option<usize>) -> Result<Dataset> {
    parse_letor_str(text, Path::new("mem.txt"), k_hint)
}

#[test]
fn single_line_zero_fills_missing_ids() {
    let ds = parse("2 qid:1 1:0.5 3:0.25\n", Some(3)).unwrap();
    assert_eq!(ds.k, 3);
    let d = &ds.groups[0].docs[0];
    assert_eq!((d.label, d.qid), (2, 1));
    assert_eq!(d.features, vec![0.5, 0.0, 0.25]);
}

#[test]
fn k_is_max_of_seen_ids_and_hint() {
    assert_eq!(parse("0 qid:1 7:1\n", None).unwrap().k, 7);
    assert_eq!(parse("0 qid:1 7:1\n", Some(136)).unwrap().k, 136);
    assert_eq!(parse("0 qid:1 7:1\n", Some(3)).unwrap().k, 7);
}

#[test]
fn comments_and_grouping() {
    let text = "\
1 qid:10 1:1 # docid = a
0 qid:10 2:1
# full-line comment

4 qid:3 1:2 2:2
2 qid:10 1:3
";
    let ds = parse(text, None).unwrap();
    assert_eq!(ds.L(), 2);
    assert_eq!(ds.groups[0].qid, 10);
    assert_eq!(ds.groups[0].labels(), vec![1, 0, 2]);
    assert_eq!(ds.groups[1].labels(), vec![4]);
    let idx: Vec<usize> = ds.groups[0].docs.iter().map(|d| d.doc_index).collect();
    assert_eq!(idx, vec![0, 1, 3]);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let err = parse("1 qid:1 1:0.5\n1 qid:1 oops\n", None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    let err = parse("1 1:0.5\n", None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    let err = parse("1 qid:1 0:0.5\n", None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    let err = parse("x qid:1 1:0.5\n", None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
}

#[test]
fn out_of_range_label_is_validation_error() {
    assert!(matches!(parse("5 qid:1 1:0.5\n", None), Err(Error::Validation(_))));
    assert!(matches!(parse("-1 qid:1 1:0.5\n", None), Err(Error::Validation(_))));
}

#[test]
fn empty_file_is_rejected() {
    assert!(matches!(parse("", None), Err(Error::EmptyDataset(_))));
    assert!(matches!(parse("# only a comment\n\n", None), Err(Error::EmptyDataset(_))));
}

#[test]
fn normalization_examples() {
    let ds = parse("0 qid:1 1:1 2:5\n1 qid:1 1:3 2:5\n", None).unwrap();
    let norm = ds.normalize(None).unwrap();
    let col0: Vec<f64> = norm.groups[0].docs.iter().map(|d| d.features[0]).collect();
    let col1: Vec<f64> = norm.groups[0].docs.iter().map(|d| d.features[1]).collect();
    assert_eq!(col0, vec![-1.0, 1.0]);
    assert_eq!(col1, vec![0.0, 0.0]);
    let stats = norm.norm_stats.clone().unwrap();
    assert_eq!(stats.mean, vec![2.0, 5.0]);
    assert_eq!(stats.std, vec![1.0, 1.0]);

    // test split reuses the training statistics
    let test = parse("0 qid:9 1:7 2:1\n", None).unwrap();
    let test_norm = test.normalize(Some(&stats)).unwrap();
    assert_eq!(test_norm.norm_stats.as_ref(), Some(&stats));
    assert_eq!(test_norm.groups[0].docs[0].features, vec![5.0, -4.0]);

    let bad = NormStats {
        mean: vec![0.0],
        std: vec![1.0],
    };
    assert!(matches!(test.normalize(Some(&bad)), Err(Error::Validation(_))));
}

#[test]
fn cache_rejects_foreign_and_truncated_files() {
    let ds = parse("1 qid:1 1:0.5 2:1\n0 qid:2 1:0.1\n", None).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(read_dataset(&mut wrong_magic.as_slice()), Err(Error::Incompatible(_))));

    let mut wrong_version = bytes.clone();
    wrong_version[8] = 99;
    assert!(matches!(read_dataset(&mut wrong_version.as_slice()), Err(Error::Incompatible(_))));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(read_dataset(&mut &truncated[..]), Err(Error::Corrupt(_))));
}

#[test]
fn cache_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    let ds = parse("1 qid:1 1:0.5 2:1\n0 qid:2 1:0.1\n", None)
        .unwrap()
        .normalize(None)
        .unwrap();
    cache_write(&ds, &path).unwrap();
    let back = cache_read(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn cache_preserves_feature_checksums_at_scale() {
    // 1000 synthetic queries; checksums taken before writing
    let ds = crate::synth::linear_buckets(1000, 8, 6, 17);
    let before: Vec<f64> = ds
        .groups
        .iter()
        .flat_map(|g| g.docs.iter().map(|d| d.features.iter().sum::<f64>()))
        .collect();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    let back = read_dataset(&mut bytes.as_slice()).unwrap();
    let after: Vec<f64> = back
        .groups
        .iter()
        .flat_map(|g| g.docs.iter().map(|d| d.features.iter().sum::<f64>()))
        .collect();
    assert_eq!(before, after);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    let doc = (0u8..=4, prop::collection::vec(-1e6f64..1e6, 3));
    let group = prop::collection::vec(doc, 1..6);
    prop::collection::vec(group, 1..6).prop_map(|groups| {
        let mut idx = 0;
        let groups = groups
            .into_iter()
            .enumerate()
            .map(|(q, docs)| QueryGroup {
                qid: q as u64 * 7 + 1,
                docs: docs
                    .into_iter()
                    .map(|(label, features)| {
                        idx += 1;
                        Document {
                            qid: q as u64 * 7 + 1,
                            label,
                            features,
                            doc_index: idx - 1,
                        }
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(groups, 3).unwrap()
    })
}

fn to_letor(ds: &Dataset) -> String {
    let mut s = String::new();
    for g in &ds.groups {
        for d in &g.docs {
            s.push_str(&format!("{} qid:{}", d.label, d.qid));
            for (j, v) in d.features.iter().enumerate() {
                s.push_str(&format!(" {}:{v:?}", j + 1));
            }
            s.push('\n');
        }
    }
    s
}

proptest! {
    #[test]
    fn cache_bytes_are_stable(ds in arb_dataset(), with_stats in any::<bool>()) {
        let ds = if with_stats { ds.normalize(None).unwrap() } else { ds };
        let mut first = Vec::new();
        write_dataset(&ds, &mut first).unwrap();
        let back = read_dataset(&mut first.as_slice()).unwrap();
        prop_assert_eq!(&back, &ds);
        let mut second = Vec::new();
        write_dataset(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn parsing_partitions_lines_in_order(ds in arb_dataset()) {
        let text = to_letor(&ds);
        let parsed = parse(&text, None).unwrap();
        prop_assert_eq!(parsed.num_docs(), text.lines().count());
        for g in &parsed.groups {
            prop_assert!(g.docs.iter().all(|d| d.qid == g.qid));
            prop_assert!(g.docs.windows(2).all(|w| w[0].doc_index < w[1].doc_index));
        }
    }

    #[test]
    fn normalized_columns_are_standard(ds in arb_dataset()) {
        let norm = ds.normalize(None).unwrap();
        let n = norm.num_docs() as f64;
        for j in 0..norm.k {
            let vals: Vec<f64> = norm.groups.iter().flat_map(|g| g.docs.iter().map(move |d| d.features[j])).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            // constant columns stay at exactly zero
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9 || vals.iter().all(|v| *v == 0.0));
        }
    }
}
