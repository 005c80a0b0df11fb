//! File formats.
//!
//! * Matrices: UTF-8 CSV, no header, one row per line, comma separated.
//!   Written with 17 significant digits so a save/load round trip is exact.
//! * Labels: one 0-based integer per line.
//! * Manifests, traces, metadata and metrics: JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_rows, validate, Dims, SeenSet, UnseenPool};
use crate::numlin::DenseMatrix;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(parse_err(
                    path,
                    line,
                    format!("ragged row: expected {c} fields, found {}", record.len()),
                ))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Ok(DenseMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        writeln!(out, "{}", line.join(",")).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("not a label: {l:?}")))
        })
        .collect()
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// One ranked label list per line, best first.
pub fn save_rankings(path: &Path, ranked: &[Vec<usize>]) -> Result<()> {
    let mut text = String::new();
    for list in ranked {
        let line: Vec<String> = list.iter().map(usize::to_string).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_rankings(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|f| {
                    f.trim()
                        .parse()
                        .map_err(|_| parse_err(path, i + 1, format!("not a label: {f:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Dataset description; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seen_features: PathBuf,
    pub seen_labels: PathBuf,
    pub seen_prototypes: PathBuf,
    pub unseen_features: PathBuf,
    pub unseen_prototypes: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_test_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_test_labels: Option<PathBuf>,
    /// L2-normalise every feature and prototype row after loading.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    /// Manifest pointing at the default file names written by [`Dataset::save`].
    pub fn standard(labelled_unseen: bool, seen_test: bool) -> Self {
        Manifest {
            seen_features: "seen_features.csv".into(),
            seen_labels: "seen_labels.csv".into(),
            seen_prototypes: "seen_prototypes.csv".into(),
            unseen_features: "unseen_features.csv".into(),
            unseen_prototypes: "unseen_prototypes.csv".into(),
            unseen_labels: labelled_unseen.then(|| "unseen_labels.csv".into()),
            seen_test_features: seen_test.then(|| "seen_test_features.csv".into()),
            seen_test_labels: seen_test.then(|| "seen_test_labels.csv".into()),
            normalize: false,
            metadata: BTreeMap::new(),
        }
    }
}

/// Labelled seen-class samples held out for generalized evaluation.
#[derive(Debug, Clone)]
pub struct SeenTest {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seen: SeenSet,
    pub unseen: UnseenPool,
    pub seen_test: Option<SeenTest>,
    pub dims: Dims,
}

impl Dataset {
    pub fn new(seen: SeenSet, unseen: UnseenPool, seen_test: Option<SeenTest>) -> Result<Self> {
        let dims = validate(&seen, &unseen)?;
        if let Some(st) = &seen_test {
            if st.features.nrows() != st.labels.len() {
                return Err(Error::dim("seen test features and labels differ in length"));
            }
            if st.features.nrows() > 0 && st.features.ncols() != dims.d {
                return Err(Error::dim("seen test features have the wrong dimension"));
            }
            if st.labels.iter().any(|&l| l >= dims.p) {
                return Err(Error::invalid("seen test label out of range"));
            }
        }
        Ok(Dataset {
            seen,
            unseen,
            seen_test,
            dims,
        })
    }

    pub fn load(manifest_path: &Path, force_normalize: bool) -> Result<Self> {
        let manifest: Manifest = read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| base.join(p);
        let mut seen_features = load_matrix(&resolve(&manifest.seen_features))?;
        let mut seen_prototypes = load_matrix(&resolve(&manifest.seen_prototypes))?;
        let mut unseen_features = load_matrix(&resolve(&manifest.unseen_features))?;
        let mut unseen_prototypes = load_matrix(&resolve(&manifest.unseen_prototypes))?;
        let seen_labels = load_labels(&resolve(&manifest.seen_labels))?;
        let unseen_labels = manifest
            .unseen_labels
            .as_deref()
            .map(|p| load_labels(&resolve(p)))
            .transpose()?;
        let mut seen_test =
            match (&manifest.seen_test_features, &manifest.seen_test_labels) {
                (Some(f), Some(l)) => Some(SeenTest {
                    features: load_matrix(&resolve(f))?,
                    labels: load_labels(&resolve(l))?,
                }),
                (None, None) => None,
                _ => return Err(Error::invalid(
                    "manifest must give both seen_test_features and seen_test_labels or neither",
                )),
            };
        if manifest.normalize || force_normalize {
            normalize_rows(&mut seen_features);
            normalize_rows(&mut seen_prototypes);
            normalize_rows(&mut unseen_features);
            normalize_rows(&mut unseen_prototypes);
            if let Some(st) = &mut seen_test {
                normalize_rows(&mut st.features);
            }
        }
        let seen = SeenSet::new(seen_features, seen_labels, seen_prototypes)?;
        let unseen = UnseenPool::new(unseen_features, unseen_prototypes, unseen_labels)?;
        Dataset::new(seen, unseen, seen_test)
    }

    /// Writes every table under `dir` with the standard names and returns the manifest.
    pub fn save(&self, dir: &Path, extra: &[(&str, &DenseMatrix)]) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest =
            Manifest::standard(self.unseen.truth_labels.is_some(), self.seen_test.is_some());
        save_matrix(&dir.join(&manifest.seen_features), &self.seen.features)?;
        save_labels(&dir.join(&manifest.seen_labels), &self.seen.labels)?;
        save_matrix(&dir.join(&manifest.seen_prototypes), &self.seen.prototypes)?;
        save_matrix(&dir.join(&manifest.unseen_features), &self.unseen.features)?;
        save_matrix(
            &dir.join(&manifest.unseen_prototypes),
            &self.unseen.prototypes,
        )?;
        if let (Some(path), Some(truth)) = (&manifest.unseen_labels, &self.unseen.truth_labels) {
            save_labels(&dir.join(path), truth)?;
        }
        if let (Some(fp), Some(lp), Some(st)) = (
            &manifest.seen_test_features,
            &manifest.seen_test_labels,
            &self.seen_test,
        ) {
            save_matrix(&dir.join(fp), &st.features)?;
            save_labels(&dir.join(lp), &st.labels)?;
        }
        for (name, m) in extra {
            save_matrix(&dir.join(name), m)?;
        }
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Pool for the generalized setting: unseen test samples followed by the
    /// held-out seen samples, scored against `[seen prototypes; unseen prototypes]`.
    /// Truth labels live in the joint space (seen `0..p`, unseen `p..p+q`).
    pub fn generalized_pool(&self) -> Result<(UnseenPool, Vec<bool>)> {
        let st = self
            .seen_test
            .as_ref()
            .ok_or_else(|| Error::invalid("generalized evaluation needs seen test samples"))?;
        let Dims { d, k, p, q, .. } = self.dims;
        let n_u = self.unseen.n();
        let n_s = st.features.nrows();
        let features = DenseMatrix::from_fn(n_u + n_s, d, |i, j| {
            if i < n_u {
                self.unseen.features[(i, j)]
            } else {
                st.features[(i - n_u, j)]
            }
        });
        let prototypes = DenseMatrix::from_fn(p + q, k, |i, j| {
            if i < p {
                self.seen.prototypes[(i, j)]
            } else {
                self.unseen.prototypes[(i - p, j)]
            }
        });
        let truth = self.unseen.truth_labels.as_ref().map(|t| {
            t.iter()
                .map(|&l| l + p)
                .chain(st.labels.iter().copied())
                .collect::<Vec<_>>()
        });
        let mask = (0..n_u + n_s).map(|i| i >= n_u).collect();
        Ok((UnseenPool::new(features, prototypes, truth)?, mask))
    }
}
