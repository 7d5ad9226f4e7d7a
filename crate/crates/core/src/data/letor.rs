use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Document, QueryGroup, MAX_LABEL};
use crate::error::{Error, Result};

/// Parses an SVMLight/LETOR file: `<label> qid:<id> <fid>:<val> ... [# comment]`.
///
/// Feature ids are 1-based and missing ids are zero-filled. `k` is the
/// largest feature id seen, or `k_hint` when that is larger.
pub fn parse_letor(path: impl AsRef<Path>, k_hint: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_letor_str(&text, path, k_hint)
}

struct SparseDoc {
    qid: u64,
    label: u8,
    features: Vec<(usize, f64)>,
}

pub fn parse_letor_str(text: &str, path: &Path, k_hint: Option<usize>) -> Result<Dataset> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut docs: Vec<SparseDoc> = Vec::new();
    let mut max_fid = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line");
        let label: i64 = label_tok
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {label_tok:?} is not an integer")))?;
        if !(0..=MAX_LABEL as i64).contains(&label) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: label {label} outside 0..={MAX_LABEL}",
                path.display()
            )));
        }
        let qid_tok = tokens
            .next()
            .ok_or_else(|| parse_err(line_no, "missing qid".into()))?;
        let qid: u64 = qid_tok
            .strip_prefix("qid:")
            .and_then(|q| q.parse().ok())
            .ok_or_else(|| parse_err(line_no, format!("expected qid:<id>, got {qid_tok:?}")))?;
        let mut features = Vec::new();
        for tok in tokens {
            let (fid, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line_no, format!("expected <fid>:<value>, got {tok:?}")))?;
            let fid: usize = fid
                .parse()
                .ok()
                .filter(|&f| f >= 1)
                .ok_or_else(|| parse_err(line_no, format!("bad feature id in {tok:?}")))?;
            let val: f64 = val
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_err(line_no, format!("bad feature value in {tok:?}")))?;
            max_fid = max_fid.max(fid);
            features.push((fid, val));
        }
        docs.push(SparseDoc {
            qid,
            label: label as u8,
            features,
        });
    }
    if docs.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }

    let k = max_fid.max(k_hint.unwrap_or(0));
    let mut order: HashMap<u64, usize> = HashMap::new();
    let mut groups: Vec<QueryGroup> = Vec::new();
    for (doc_index, sparse) in docs.into_iter().enumerate() {
        let mut features = vec![0.0; k];
        for (fid, val) in sparse.features {
            features[fid - 1] = val;
        }
        let doc = Document {
            qid: sparse.qid,
            label: sparse.label,
            features,
            doc_index,
        };
        let slot = *order.entry(sparse.qid).or_insert_with(|| {
            groups.push(QueryGroup {
                qid: sparse.qid,
                docs: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].docs.push(doc);
    }
    Dataset::new(groups, k)
}

/// Writes `ds` in LETOR format, one document per line in group order.
/// Zero-valued features are omitted.
pub fn write_letor(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    for g in &ds.groups {
        for d in &g.docs {
            write!(w, "{} qid:{}", d.label, d.qid)?;
            for (j, v) in d.features.iter().enumerate() {
                if *v != 0.0 {
                    write!(w, " {}:{v}", j + 1)?;
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
