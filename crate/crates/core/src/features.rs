//! Feature vectors with stable ids, the data backplane for every other module.
//!
//! The CSV layout is `id,label,f0,...,f{D-1}`; the `label` column is optional
//! and may be left empty per row. Labels are hidden from selection code: the
//! only public way to read them is through [`crate::protocol::Oracle`].

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CbsError, Result};
use crate::{ClassId, SampleId};

const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<SampleId>,
    data: Vec<f64>,
    labels: Vec<Option<ClassId>>,
    normalized: bool,
    index: HashMap<SampleId, usize>,
}

impl PartialEq for FeatureStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data == other.data
            && self.labels == other.labels
    }
}

impl FeatureStore {
    /// Builds a store from `(id, vector, label)` rows. Ids must be unique but
    /// need not be dense; use [`FeatureStore::from_dense_rows`] for that check.
    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, Vec<f64>, Option<ClassId>)>,
    {
        if dim == 0 {
            return Err(CbsError::DimensionMismatch {
                expected: 1,
                found: 0,
                row: None,
            });
        }
        let mut store = FeatureStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            labels: Vec::new(),
            normalized: true,
            index: HashMap::new(),
        };
        for (row, (id, vector, label)) in rows.into_iter().enumerate() {
            if vector.len() != dim {
                return Err(CbsError::DimensionMismatch {
                    expected: dim,
                    found: vector.len(),
                    row: Some(row),
                });
            }
            if let Some(column) = vector.iter().position(|v| !v.is_finite()) {
                return Err(CbsError::NonFiniteValue { row, column });
            }
            if store.index.insert(id, store.ids.len()).is_some() {
                return Err(CbsError::DuplicateId(id));
            }
            store.ids.push(id);
            store.data.extend_from_slice(&vector);
            store.labels.push(label);
        }
        store.normalized = store.compute_normalized();
        Ok(store)
    }

    /// Like [`FeatureStore::from_rows`] but also requires ids to be exactly
    /// `0..N` in some order. Rows are stored in ascending id order.
    pub fn from_dense_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, Vec<f64>, Option<ClassId>)>,
    {
        let mut rows: Vec<_> = rows.into_iter().collect();
        rows.sort_by_key(|r| r.0);
        for (expected, row) in rows.iter().enumerate() {
            let expected = expected as SampleId;
            if row.0 != expected {
                if row.0 < expected {
                    return Err(CbsError::DuplicateId(row.0));
                }
                return Err(CbsError::SparseIds {
                    n: rows.len(),
                    missing: expected,
                });
            }
        }
        Self::from_rows(dim, rows)
    }

    /// Row-major `n × dim` matrix with ids `0..n`.
    pub fn from_matrix(
        dim: usize,
        data: &[f64],
        labels: Option<&[Option<ClassId>]>,
    ) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(CbsError::DimensionMismatch {
                expected: dim,
                found: data.len(),
                row: None,
            });
        }
        let n = data.len() / dim;
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(CbsError::DimensionMismatch {
                    expected: n,
                    found: labels.len(),
                    row: None,
                });
            }
        }
        Self::from_rows(
            dim,
            data.chunks_exact(dim)
                .enumerate()
                .map(|(i, v)| (i as SampleId, v.to_vec(), labels.and_then(|l| l[i]))),
        )
    }

    fn compute_normalized(&self) -> bool {
        self.data
            .chunks_exact(self.dim)
            .all(|v| (norm(v) - 1.0).abs() <= UNIT_NORM_TOL)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when every row has unit Euclidean norm (within 1e-9).
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn id_at(&self, row: usize) -> SampleId {
        self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: SampleId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn vector(&self, id: SampleId) -> Result<&[f64]> {
        self.position(id)
            .map(|p| self.row(p))
            .ok_or(CbsError::UnknownId(id))
    }

    pub fn rows(&self) -> impl Iterator<Item = (SampleId, &[f64])> + Clone + '_ {
        self.ids
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.dim))
    }

    /// Whether a label column was present for every row.
    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(Option::is_some)
    }

    pub(crate) fn hidden_label(&self, row: usize) -> Option<ClassId> {
        self.labels[row]
    }

    /// Scales each row to unit norm. Ids and labels are preserved.
    pub fn l2_normalize(&self) -> Result<FeatureStore> {
        let mut out = self.clone();
        for (row, v) in out.data.chunks_exact_mut(self.dim).enumerate() {
            let n = norm(v);
            if n == 0.0 {
                return Err(CbsError::ZeroVector(self.ids[row]));
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        out.normalized = true;
        Ok(out)
    }

    /// New store holding `ids` in the given order; vectors are copied verbatim.
    pub fn subset(&self, ids: &[SampleId]) -> Result<FeatureStore> {
        let mut out = FeatureStore {
            dim: self.dim,
            ids: Vec::with_capacity(ids.len()),
            data: Vec::with_capacity(ids.len() * self.dim),
            labels: Vec::with_capacity(ids.len()),
            normalized: self.normalized,
            index: HashMap::with_capacity(ids.len()),
        };
        for &id in ids {
            let pos = self.position(id).ok_or(CbsError::UnknownId(id))?;
            if out.index.insert(id, out.ids.len()).is_some() {
                return Err(CbsError::DuplicateId(id));
            }
            out.ids.push(id);
            out.data.extend_from_slice(self.row(pos));
            out.labels.push(self.labels[pos]);
        }
        Ok(out)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<FeatureStore> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_error(0, e))?.clone();
        let columns: Vec<&str> = header.iter().collect();
        if columns.first() != Some(&"id") {
            return Err(CbsError::Parse {
                row: 0,
                column: 0,
                message: "first header column must be `id`".into(),
            });
        }
        let has_label = columns.get(1) == Some(&"label");
        let first_feature = if has_label { 2 } else { 1 };
        let dim = columns.len() - first_feature;
        for (offset, name) in columns[first_feature..].iter().enumerate() {
            if *name != format!("f{offset}") {
                return Err(CbsError::Parse {
                    row: 0,
                    column: first_feature + offset,
                    message: format!("expected header `f{offset}`, found `{name}`"),
                });
            }
        }
        if dim == 0 {
            return Err(CbsError::Parse {
                row: 0,
                column: first_feature,
                message: "header declares no feature columns".into(),
            });
        }

        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| csv_error(row, e))?;
            if record.len() != columns.len() {
                return Err(CbsError::DimensionMismatch {
                    expected: dim,
                    found: record.len().saturating_sub(first_feature),
                    row: Some(row),
                });
            }
            let id: SampleId = record[0].parse().map_err(|_| CbsError::Parse {
                row,
                column: 0,
                message: format!("invalid id `{}`", &record[0]),
            })?;
            let label = if has_label && !record[1].is_empty() {
                Some(record[1].parse::<ClassId>().map_err(|_| CbsError::Parse {
                    row,
                    column: 1,
                    message: format!("invalid label `{}`", &record[1]),
                })?)
            } else {
                None
            };
            let mut vector = Vec::with_capacity(dim);
            for column in first_feature..record.len() {
                let v: f64 = record[column].parse().map_err(|_| CbsError::Parse {
                    row,
                    column,
                    message: format!("invalid number `{}`", &record[column]),
                })?;
                if !v.is_finite() {
                    return Err(CbsError::NonFiniteValue { row, column });
                }
                vector.push(v);
            }
            rows.push((id, vector, label));
        }
        FeatureStore::from_dense_rows(dim, rows)
    }

    /// Writes the store as CSV, floats with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|d| format!("f{d}")));
        wtr.write_record(&header).map_err(|e| csv_error(0, e))?;
        for (row, (id, v)) in self.rows().enumerate() {
            let mut record = Vec::with_capacity(self.dim + 2);
            record.push(id.to_string());
            record.push(self.labels[row].map(|l| l.to_string()).unwrap_or_default());
            record.extend(v.iter().map(|x| format!("{x:.16e}")));
            wtr.write_record(&record)
                .map_err(|e| csv_error(row + 1, e))?;
        }
        wtr.flush().map_err(|e| CbsError::io("<csv>", e))?;
        Ok(())
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CbsError::io(path, e))?;
    FeatureStore::read_csv(std::io::BufReader::new(file))
}

pub fn save_features(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| CbsError::io(path, e))?;
    store.write_csv(std::io::BufWriter::new(file))
}

fn csv_error(row: usize, e: csv::Error) -> CbsError {
    CbsError::Parse {
        row,
        column: 0,
        message: e.to_string(),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store3() -> FeatureStore {
        FeatureStore::from_matrix(2, &[1.0, 0.0, 0.0, 1.0, 3.0, 4.0], None).unwrap()
    }

    #[test]
    fn load_three_rows() {
        let csv = "id,label,f0,f1\n0,,1,0\n1,,0,1\n2,,3,4\n";
        let store = FeatureStore::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.dim(), 2);
        assert_eq!(store.vector(2).unwrap(), &[3.0, 4.0]);
        assert!(!store.has_labels());
        assert!(!store.is_normalized());
    }

    #[test]
    fn load_captures_labels() {
        let csv = "id,label,f0\n1,4,0.5\n0,2,1.5\n";
        let store = FeatureStore::read_csv(csv.as_bytes()).unwrap();
        assert!(store.has_labels());
        assert_eq!(store.ids(), &[0, 1]);
        assert_eq!(store.hidden_label(0), Some(2));
        assert_eq!(store.hidden_label(1), Some(4));
    }

    #[test]
    fn load_without_label_column() {
        let csv = "id,f0,f1\n0,1,2\n";
        let store = FeatureStore::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(store.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn load_rejects_nan() {
        let csv = "id,label,f0,f1\n0,,1,0\n1,,nan,1\n";
        match FeatureStore::read_csv(csv.as_bytes()) {
            Err(CbsError::NonFiniteValue { row: 2, column: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_ragged_rows() {
        let csv = "id,label,f0,f1\n0,,1,0\n1,,0,1,5\n2,,3,4\n";
        match FeatureStore::read_csv(csv.as_bytes()) {
            Err(CbsError::DimensionMismatch { row: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_garbage() {
        let csv = "id,label,f0\n0,,abc\n";
        assert!(matches!(
            FeatureStore::read_csv(csv.as_bytes()),
            Err(CbsError::Parse {
                row: 1,
                column: 2,
                ..
            })
        ));
    }

    #[test]
    fn load_rejects_sparse_ids() {
        let csv = "id,label,f0\n0,,1\n2,,1\n";
        assert!(matches!(
            FeatureStore::read_csv(csv.as_bytes()),
            Err(CbsError::SparseIds { missing: 1, .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = store3().l2_normalize().unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0]);
        assert!((n.row(2)[0] - 0.6).abs() < 1e-15);
        assert!((n.row(2)[1] - 0.8).abs() < 1e-15);
        assert!(n.is_normalized());

        let zero = FeatureStore::from_matrix(2, &[1.0, 0.0, 0.0, 0.0], None).unwrap();
        assert!(matches!(zero.l2_normalize(), Err(CbsError::ZeroVector(1))));
    }

    #[test]
    fn subset_examples() {
        let s = store3();
        let sub = s.subset(&[2, 0]).unwrap();
        assert_eq!(sub.ids(), &[2, 0]);
        assert_eq!(sub.row(0), &[3.0, 4.0]);
        assert_eq!(s.subset(&[0, 1, 2]).unwrap(), s);
        assert!(matches!(s.subset(&[99]), Err(CbsError::UnknownId(99))));
    }

    fn arb_store() -> impl Strategy<Value = FeatureStore> {
        (1usize..6, 1usize..20).prop_flat_map(|(dim, n)| {
            prop::collection::vec(0.1f64..10.0, dim * n).prop_map(move |mut data| {
                // alternate signs so vectors point in varied directions
                for (i, x) in data.iter_mut().enumerate() {
                    if i % 3 == 1 {
                        *x = -*x;
                    }
                }
                FeatureStore::from_matrix(dim, &data, None).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(store in arb_store()) {
            let once = store.l2_normalize().unwrap();
            let twice = once.l2_normalize().unwrap();
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for i in 0..once.len() {
                prop_assert!((norm(once.row(i)) - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn csv_round_trip_is_lossless(store in arb_store()) {
            let mut buf = Vec::new();
            store.write_csv(&mut buf).unwrap();
            let back = FeatureStore::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, store);
        }
    }
}
