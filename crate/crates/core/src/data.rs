//! Datasets: CSV ingestion, normalization, splitting and synthetic generators.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::{Matrix, RngState};

/// Per-feature statistics recorded by a normalization, enough to undo it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    MinMax { min: Vec<f64>, max: Vec<f64> },
    Standard { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub feature_names: Option<Vec<String>>,
    /// Original label strings, indexed by class id.
    pub label_names: Option<Vec<String>>,
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            ensure!(
                l.len() == features.rows(),
                "{} labels for {} rows",
                l.len(),
                features.rows()
            );
        }
        Ok(Self {
            features,
            labels,
            feature_names: None,
            label_names: None,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        match (&self.label_names, &self.labels) {
            (Some(names), _) => names.len(),
            (None, Some(l)) => l.iter().max().map_or(0, |m| m + 1),
            _ => 0,
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract("dataset has no labels"))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            norm: self.norm.clone(),
        }
    }

    /// Replaces the labels, keeping everything else.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        let mut ds = Dataset::new(self.features.clone(), Some(labels))?;
        ds.feature_names = self.feature_names.clone();
        ds.norm = self.norm.clone();
        Ok(ds)
    }
}

/// Reads a headered CSV. The label column, if named, is removed from the
/// features and its values are numbered in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_reader(file);
    let bad_format = |e: csv::Error| Error::CsvFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(bad_format)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = match label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::MissingLabelColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            }
        })?),
        None => None,
    };
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(bad_format)?;
        // header is line 1
        let row_no = r + 2;
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(c) == label_idx {
                let next = label_names.len();
                let id = *label_ids.entry(cell.to_string()).or_insert_with(|| {
                    label_names.push(cell.to_string());
                    next
                });
                labels.push(id);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::CsvCell {
                path: path.to_path_buf(),
                row: row_no,
                column: c + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvCell {
                    path: path.to_path_buf(),
                    row: row_no,
                    column: c + 1,
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let features = Matrix::from_vec(rows, feature_names.len(), data)?;
    let mut ds = Dataset::new(features, label_idx.map(|_| labels))?;
    ds.feature_names = Some(feature_names);
    if label_idx.is_some() {
        ds.label_names = Some(label_names);
    }
    Ok(ds)
}

/// Writes features (and a trailing `label` column when labels exist).
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let names: Vec<String> = match &ds.feature_names {
        Some(n) => n.clone(),
        None => (0..ds.dim()).map(|j| format!("x{j}")).collect(),
    };
    let mut header = names.join(",");
    if ds.labels.is_some() {
        header.push_str(",label");
    }
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..ds.len() {
        let mut line = ds
            .features
            .row(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(l) = &ds.labels {
            let name = ds
                .label_names
                .as_ref()
                .map_or_else(|| l[i].to_string(), |n| n[l[i]].clone());
            line.push(',');
            line.push_str(&name);
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Maps every feature to `(v - min) / (max - min)`; constant features map to 0.
pub fn normalize_minmax(ds: &Dataset) -> Result<Dataset> {
    ensure!(!ds.is_empty(), "normalize_minmax: empty dataset");
    let d = ds.dim();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in ds.features.row_iter() {
        for j in 0..d {
            min[j] = min[j].min(row[j]);
            max[j] = max[j].max(row[j]);
        }
    }
    let norm = Normalization::MinMax { min, max };
    let mut out = ds.clone();
    out.features = apply_normalization(&ds.features, &norm);
    out.norm = Some(norm);
    Ok(out)
}

/// Applies recorded statistics to (possibly new) data.
pub fn apply_normalization(x: &Matrix, norm: &Normalization) -> Matrix {
    let mut out = x.clone();
    let d = x.cols();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        for j in 0..d {
            row[j] = match norm {
                Normalization::MinMax { min, max } => {
                    let range = max[j] - min[j];
                    if range > 0.0 {
                        (row[j] - min[j]) / range
                    } else {
                        0.0
                    }
                }
                Normalization::Standard { mean, std } => {
                    if std[j] > 0.0 {
                        (row[j] - mean[j]) / std[j]
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    out
}

/// Undoes a normalization. Constant features come back as their constant.
pub fn denormalize(x: &Matrix, norm: &Normalization) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = match norm {
                Normalization::MinMax { min, max } => min[j] + *v * (max[j] - min[j]),
                Normalization::Standard { mean, std } => mean[j] + *v * std[j],
            };
        }
    }
    out
}

/// Seeded permutation split into `(train, test)`; the test part holds
/// `round(n * test_fraction)` rows, clamped so neither side is empty.
pub fn split(ds: &Dataset, test_fraction: f64, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
    ensure!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "split: test_fraction must lie in (0, 1), got {test_fraction}"
    );
    ensure!(ds.len() >= 2, "split: need at least two rows");
    let (train_idx, test_idx) = split_indices(ds.len(), test_fraction, rng);
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

pub(crate) fn split_indices(
    n: usize,
    test_fraction: f64,
    rng: &mut RngState,
) -> (Vec<usize>, Vec<usize>) {
    let perm = rng.permutation(n);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test = perm[..n_test].to_vec();
    let train = perm[n_test..].to_vec();
    (train, test)
}

fn center_columns(x: &mut Matrix) {
    let means = x.col_means();
    for i in 0..x.rows() {
        for (v, m) in x.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("finite normal draws")
}

/// Rows `x = A u` with a fixed random `d x r` matrix `A` (entries
/// `N(0, scale^2)`) and `u ~ N(0, I_r)`, then mean-centered.
pub fn gen_lowrank_gaussian(
    n: usize,
    d: usize,
    r: usize,
    scale: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    ensure!(r >= 1 && r <= d, "gen_lowrank_gaussian: need 1 <= r <= d, got r={r}, d={d}");
    ensure!(n >= 1, "gen_lowrank_gaussian: n must be positive");
    let basis = normal_matrix(r, d, scale, rng);
    let latent = normal_matrix(n, r, 1.0, rng);
    let mut x = latent.dot(&basis);
    center_columns(&mut x);
    Dataset::new(x, None)
}

/// Two unit-variance Gaussian blobs whose means differ by `separation`
/// along a random unit direction. Labels alternate 0, 1, 0, ... and the
/// features are centered globally.
pub fn gen_two_class_blobs(
    n: usize,
    d: usize,
    separation: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    ensure!(n >= 2 && n % 2 == 0, "gen_two_class_blobs: n must be even, got {n}");
    ensure!(d >= 1, "gen_two_class_blobs: d must be positive");
    let mut dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let len = crate::math::norm(&dir);
    dir.iter_mut().for_each(|v| *v /= len);
    let mut x = normal_matrix(n, d, 1.0, rng);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for (i, &y) in labels.iter().enumerate() {
        if y == 1 {
            for (v, u) in x.row_mut(i).iter_mut().zip(&dir) {
                *v += separation * u;
            }
        }
    }
    center_columns(&mut x);
    Dataset::new(x, Some(labels))
}

/// Appends `extra` independent `N(0, scale^2)` columns carrying no label
/// information, centered like the rest.
pub fn append_noise_features(
    ds: &Dataset,
    extra: usize,
    scale: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    let mut noise = normal_matrix(ds.len(), extra, scale, rng);
    center_columns(&mut noise);
    let mut out = ds.clone();
    out.features = ds.features.hstack(&noise)?;
    out.feature_names = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::linalg;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_shape_and_labels() {
        let f = write_tmp("a,b,y\n1,2,cat\n3,4,dog\n5,6,cat\n");
        let ds = load_csv(f.path(), Some("y")).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));
        assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 0][..]));
        assert_eq!(ds.features.row(1), &[3.0, 4.0]);

        let ds = load_csv(f.path(), None);
        // "cat" is not a number
        assert!(matches!(ds, Err(Error::CsvCell { row: 2, column: 3, .. })));
    }

    #[test]
    fn csv_without_label_column() {
        let f = write_tmp("a,b\n1,2\n3,4\n");
        let ds = load_csv(f.path(), None).unwrap();
        assert!(ds.labels.is_none());
        assert_eq!(ds.feature_names.as_deref().unwrap(), &["a", "b"]);
    }

    #[test]
    fn csv_errors_are_distinct() {
        assert!(matches!(
            load_csv("/nonexistent/file.csv", None),
            Err(Error::Io { .. })
        ));
        let f = write_tmp("a,b\n1,x\n");
        assert!(matches!(
            load_csv(f.path(), None),
            Err(Error::CsvCell { row: 2, column: 2, .. })
        ));
        let f = write_tmp("a,b\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), Some("y")),
            Err(Error::MissingLabelColumn { .. })
        ));
    }

    #[test]
    fn csv_roundtrip_through_writer() {
        let mut rng = RngState::new(2);
        let ds = gen_two_class_blobs(6, 3, 2.0, &mut rng).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let back = load_csv(f.path(), Some("label")).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn minmax_cases() {
        let ds = Dataset::new(
            Matrix::from_rows(&[vec![2.0, 5.0], vec![4.0, 5.0], vec![6.0, 5.0]]).unwrap(),
            None,
        )
        .unwrap();
        let n = normalize_minmax(&ds).unwrap();
        let col0: Vec<f64> = (0..3).map(|i| n.features.get(i, 0)).collect();
        let col1: Vec<f64> = (0..3).map(|i| n.features.get(i, 1)).collect();
        assert_eq!(col0, vec![0.0, 0.5, 1.0]);
        assert_eq!(col1, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn minmax_idempotent_on_unit_data() {
        let ds = Dataset::new(
            Matrix::from_rows(&[vec![0.0, 1.0], vec![0.25, 0.0], vec![1.0, 0.5]]).unwrap(),
            None,
        )
        .unwrap();
        let n = normalize_minmax(&ds).unwrap();
        assert_eq!(n.features, ds.features);
    }

    #[test]
    fn minmax_denormalize_roundtrip() {
        let mut rng = RngState::new(8);
        let ds = gen_lowrank_gaussian(50, 4, 4, 3.0, &mut rng).unwrap();
        let n = normalize_minmax(&ds).unwrap();
        assert!(n.features.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize(&n.features, n.norm.as_ref().unwrap());
        assert!(back.sub(&ds.features).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn split_partition() {
        let ds = Dataset::new(Matrix::zeros(10, 1), None).unwrap();
        let (tr, te) = split(&ds, 0.2, &mut RngState::new(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (a, b) = split_indices(10, 0.2, &mut RngState::new(1));
        let (a2, b2) = split_indices(10, 0.2, &mut RngState::new(1));
        assert_eq!((&a, &b), (&a2, &b2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split(&ds, 0.0, &mut RngState::new(1)).is_err());
        assert!(split(&ds, 1.0, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn lowrank_rank_and_centering() {
        let mut rng = RngState::new(21);
        assert!(gen_lowrank_gaussian(10, 3, 4, 1.0, &mut rng).is_err());
        for &r in &[1usize, 3, 5, 8] {
            let ds = gen_lowrank_gaussian(200, 8, r, 1.0, &mut rng).unwrap();
            assert!(ds.features.col_means().iter().all(|m| m.abs() <= 1e-12));
            let (eig, _) = linalg::sym_eigen(&linalg::second_moment(&ds.features)).unwrap();
            assert_eq!(linalg::numerical_rank(&eig), r);
        }
        let ds = gen_lowrank_gaussian(100, 6, 1, 1.0, &mut rng).unwrap();
        let sv = linalg::singular_values(&ds.features);
        assert!(sv[1] / sv[0] < 1e-10);
    }

    #[test]
    fn blobs_centered_and_balanced() {
        let mut rng = RngState::new(4);
        let ds = gen_two_class_blobs(100, 5, 3.0, &mut rng).unwrap();
        assert!(ds.features.col_means().iter().all(|m| m.abs() <= 1e-12));
        let ones = ds.labels.as_ref().unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 50);
        assert!(gen_two_class_blobs(7, 2, 1.0, &mut rng).is_err());
    }
}
