//! Horizon-anchored window summaries and the feature matrix.
//!
//! For a horizon `h`, every series of a stay is summarized over the closed
//! interval `[0, event_time - h]`. Each variable contributes one column per
//! requested statistic; static attributes follow.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Minutes, PatientStay, Sex, VariableManifest, MINUTES_PER_HOUR};
use crate::error::{Error, Result};

/// Default prediction horizons: 6, 12, 18 and 24 hours.
pub const DEFAULT_HORIZONS: [Minutes; 4] = [
    6 * MINUTES_PER_HOUR,
    12 * MINUTES_PER_HOUR,
    18 * MINUTES_PER_HOUR,
    24 * MINUTES_PER_HOUR,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Std,
}

impl Statistic {
    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Std => "std",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub horizon: Minutes,
    pub statistics: Vec<Statistic>,
    /// Windows with fewer points report a missing standard deviation.
    pub min_points_for_std: usize,
}

impl WindowConfig {
    pub fn new(horizon: Minutes) -> Self {
        WindowConfig {
            horizon,
            statistics: vec![Statistic::Mean, Statistic::Std],
            min_points_for_std: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("window.horizon", "must be positive"));
        }
        if self.statistics.is_empty() {
            return Err(Error::config("window.statistics", "must not be empty"));
        }
        Ok(())
    }
}

/// Summary of one variable inside one window. `NaN` marks missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl WindowSummary {
    fn of(values: &[f64], min_points_for_std: usize) -> Self {
        let n = values.len();
        if n == 0 {
            return WindowSummary {
                n,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < min_points_for_std.max(1) {
            f64::NAN
        } else if n == 1 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|x| (x - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        WindowSummary { n, mean, std }
    }

    pub fn get(&self, stat: Statistic) -> f64 {
        match stat {
            Statistic::Mean => self.mean,
            Statistic::Std => self.std,
        }
    }
}

/// Summarizes every series of `stay` over `[0, event_time - horizon]`.
pub fn extract_window(stay: &PatientStay, cfg: &WindowConfig) -> Result<BTreeMap<String, WindowSummary>> {
    let end = stay.event_time.checked_sub(cfg.horizon).ok_or_else(|| {
        Error::precondition(format!(
            "stay {}: event_time {} is shorter than horizon {}",
            stay.stay_id, stay.event_time, cfg.horizon
        ))
    })?;
    Ok(stay
        .series
        .iter()
        .map(|(var, obs)| {
            let values: Vec<f64> = obs
                .iter()
                .filter(|o| o.time_offset <= end)
                .map(|o| o.value)
                .collect();
            (var.clone(), WindowSummary::of(&values, cfg.min_points_for_std))
        })
        .collect())
}

/// Per-column metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDescriptor {
    pub name: String,
    /// Source variable for series columns, the attribute name otherwise.
    pub source: String,
    /// `None` for static columns.
    pub statistic: Option<Statistic>,
    pub units: String,
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTags {
    pub sex: Sex,
    pub ethnicity: String,
}

/// Stays × features, row-major, `NaN` for missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub columns: Vec<ColumnDescriptor>,
    values: Vec<f64>,
    pub labels: Vec<bool>,
    pub group_tags: Vec<GroupTags>,
}

impl FeatureMatrix {
    pub fn new(
        row_ids: Vec<String>,
        columns: Vec<ColumnDescriptor>,
        values: Vec<f64>,
        labels: Vec<bool>,
        group_tags: Vec<GroupTags>,
    ) -> Result<Self> {
        let n = row_ids.len();
        if values.len() != n * columns.len() || labels.len() != n || group_tags.len() != n {
            return Err(Error::Data(format!(
                "matrix is not rectangular: {n} rows, {} columns, {} values, {} labels, {} tags",
                columns.len(),
                values.len(),
                labels.len(),
                group_tags.len()
            )));
        }
        let mut names = BTreeSet::new();
        for c in &columns {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Data(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(FeatureMatrix {
            row_ids,
            columns,
            values,
            labels,
            group_tags,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let p = self.n_cols().max(1);
        self.values.chunks(p).take(self.n_rows())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        let p = self.n_cols();
        self.values[i * p + j] = x;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Rows at `indices`, in that order.
    pub fn subset_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            group_tags: indices.iter().map(|&i| self.group_tags[i].clone()).collect(),
        }
    }

    /// Column-restricted copy, columns in the order given.
    pub fn select_columns<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureMatrix> {
        let unknown: Vec<&str> = names
            .iter()
            .map(AsRef::as_ref)
            .filter(|n| self.column_index(n).is_none())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::precondition(format!(
                "unknown column(s): {}",
                unknown.join(", ")
            )));
        }
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column_index(n.as_ref()).expect("checked"))
            .collect();
        let mut values = Vec::with_capacity(self.n_rows() * idx.len());
        for row in self.rows() {
            values.extend(idx.iter().map(|&j| row[j]));
        }
        FeatureMatrix::new(
            self.row_ids.clone(),
            idx.iter().map(|&j| self.columns[j].clone()).collect(),
            values,
            self.labels.clone(),
            self.group_tags.clone(),
        )
    }

    /// Copy with one extra column appended.
    pub fn with_column(&self, column: ColumnDescriptor, data: &[f64]) -> Result<FeatureMatrix> {
        if data.len() != self.n_rows() {
            return Err(Error::precondition("appended column length differs from row count"));
        }
        let p = self.n_cols();
        let mut values = Vec::with_capacity(self.n_rows() * (p + 1));
        for (row, x) in self.rows().zip(data) {
            values.extend_from_slice(row);
            values.push(*x);
        }
        let mut columns = self.columns.clone();
        columns.push(column);
        FeatureMatrix::new(
            self.row_ids.clone(),
            columns,
            values,
            self.labels.clone(),
            self.group_tags.clone(),
        )
    }

    /// Replaces every cell, keeping rows and columns.
    pub fn with_values(&self, values: Vec<f64>) -> Result<FeatureMatrix> {
        FeatureMatrix::new(
            self.row_ids.clone(),
            self.columns.clone(),
            values,
            self.labels.clone(),
            self.group_tags.clone(),
        )
    }

    /// Equality that treats matching NaN cells as equal and compares every
    /// value by bit pattern.
    pub fn bitwise_eq(&self, other: &FeatureMatrix) -> bool {
        self.row_ids == other.row_ids
            && self.columns == other.columns
            && self.labels == other.labels
            && self.group_tags == other.group_tags
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect()
    }

    fn refresh_missingness(&mut self) {
        let n = self.n_rows().max(1) as f64;
        for j in 0..self.n_cols() {
            let miss = (0..self.n_rows()).filter(|&i| self.get(i, j).is_nan()).count();
            self.columns[j].missing_fraction = miss as f64 / n;
        }
    }
}

/// The column layout of a matrix, reusable on another cohort so that an
/// external cohort is encoded exactly like the training one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSchema {
    pub variables: Vec<String>,
    pub statistics: Vec<Statistic>,
    pub units: BTreeMap<String, String>,
    /// One-hot ethnicity levels; empty when the training cohort had fewer
    /// than two. Unseen levels encode as all zeros.
    pub ethnicity_levels: Vec<String>,
    pub extras: Vec<String>,
}

impl MatrixSchema {
    pub fn derive(
        cohort: &[PatientStay],
        cfg: &WindowConfig,
        variables: &[String],
        manifest: Option<&VariableManifest>,
    ) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::precondition("variable list is empty"));
        }
        let levels: BTreeSet<String> = cohort
            .iter()
            .map(|s| s.ethnicity.clone())
            .filter(|e| !e.is_empty())
            .collect();
        let extras: BTreeSet<String> = cohort
            .iter()
            .flat_map(|s| s.static_extras.keys().cloned())
            .collect();
        Ok(MatrixSchema {
            variables: variables.to_vec(),
            statistics: cfg.statistics.clone(),
            units: variables
                .iter()
                .map(|v| (v.clone(), manifest.map_or("", |m| m.units(v)).to_string()))
                .collect(),
            ethnicity_levels: if levels.len() >= 2 {
                levels.into_iter().collect()
            } else {
                Vec::new()
            },
            extras: extras.into_iter().collect(),
        })
    }

    pub fn column_descriptors(&self) -> Vec<ColumnDescriptor> {
        let mut cols = Vec::new();
        for v in &self.variables {
            for &s in &self.statistics {
                cols.push(ColumnDescriptor {
                    name: format!("{v}_{}", s.as_str()),
                    source: v.clone(),
                    statistic: Some(s),
                    units: self.units.get(v).cloned().unwrap_or_default(),
                    missing_fraction: 0.0,
                });
            }
        }
        let stat = |name: String, units: &str| ColumnDescriptor {
            source: name.clone(),
            name,
            statistic: None,
            units: units.into(),
            missing_fraction: 0.0,
        };
        cols.push(stat("age".into(), "years"));
        cols.push(stat("sex".into(), "male=1"));
        cols.push(stat("ventilated".into(), "flag"));
        for level in &self.ethnicity_levels {
            cols.push(stat(format!("ethnicity={level}"), "flag"));
        }
        for e in &self.extras {
            cols.push(stat(e.clone(), ""));
        }
        cols
    }

    fn encode_row(&self, stay: &PatientStay, cfg: &WindowConfig) -> Result<Vec<f64>> {
        let summaries = extract_window(stay, cfg)?;
        let mut row = Vec::with_capacity(self.variables.len() * self.statistics.len() + 3);
        for v in &self.variables {
            for &s in &self.statistics {
                row.push(summaries.get(v).map_or(f64::NAN, |w| w.get(s)));
            }
        }
        row.push(stay.age);
        row.push(if stay.sex == Sex::Male { 1.0 } else { 0.0 });
        row.push(if stay.ventilated { 1.0 } else { 0.0 });
        for level in &self.ethnicity_levels {
            row.push(if &stay.ethnicity == level { 1.0 } else { 0.0 });
        }
        for e in &self.extras {
            row.push(stay.static_extras.get(e).copied().unwrap_or(f64::NAN));
        }
        Ok(row)
    }
}

/// Builds the feature matrix for `cohort` at `cfg.horizon`.
///
/// Rows are sorted by stay id; the result does not depend on input order or
/// thread count.
pub fn build_matrix(
    cohort: &[PatientStay],
    cfg: &WindowConfig,
    variables: &[String],
    manifest: Option<&VariableManifest>,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let schema = MatrixSchema::derive(cohort, cfg, variables, manifest)?;
    build_matrix_with_schema(cohort, cfg, &schema)
}

pub fn build_matrix_with_schema(
    cohort: &[PatientStay],
    cfg: &WindowConfig,
    schema: &MatrixSchema,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::precondition("cohort is empty"));
    }
    if schema.variables.is_empty() {
        return Err(Error::precondition("variable list is empty"));
    }
    if schema.statistics != cfg.statistics {
        return Err(Error::precondition("schema statistics differ from window statistics"));
    }
    let mut order: Vec<&PatientStay> = cohort.iter().collect();
    order.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));
    if let Some(w) = order.windows(2).find(|w| w[0].stay_id == w[1].stay_id) {
        return Err(Error::Data(format!("duplicate stay_id `{}`", w[0].stay_id)));
    }
    let rows: Vec<Vec<f64>> = order
        .par_iter()
        .map(|s| schema.encode_row(s, cfg))
        .collect::<Result<_>>()?;
    let mut m = FeatureMatrix::new(
        order.iter().map(|s| s.stay_id.clone()).collect(),
        schema.column_descriptors(),
        rows.concat(),
        order.iter().map(|s| s.died).collect(),
        order
            .iter()
            .map(|s| GroupTags {
                sex: s.sex,
                ethnicity: s.ethnicity.clone(),
            })
            .collect(),
    )?;
    m.refresh_missingness();
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    columns: Vec<ColumnDescriptor>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_stem().unwrap_or_default().to_os_string();
    name.push(".columns.json");
    csv_path.with_file_name(name)
}

const LEAD_COLUMNS: [&str; 4] = ["row_id", "label", "sex", "ethnicity"];

/// Writes the matrix as CSV plus a column-descriptor sidecar.
pub fn write_matrix(m: &FeatureMatrix, csv_path: &Path) -> Result<()> {
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", csv_path.display()));
    let mut header: Vec<&str> = LEAD_COLUMNS.to_vec();
    header.extend(m.columns.iter().map(|c| c.name.as_str()));
    w.write_record(&header).map_err(io)?;
    for i in 0..m.n_rows() {
        let mut rec = vec![
            m.row_ids[i].clone(),
            u8::from(m.labels[i]).to_string(),
            m.group_tags[i].sex.to_string(),
            m.group_tags[i].ethnicity.clone(),
        ];
        rec.extend(
            m.row(i)
                .iter()
                .map(|x| if x.is_nan() { String::new() } else { x.to_string() }),
        );
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;

    let side = sidecar_path(csv_path);
    let mut f = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
    serde_json::to_writer_pretty(
        &mut f,
        &Sidecar {
            version: 1,
            columns: m.columns.clone(),
        },
    )
    .map_err(|e| Error::Data(e.to_string()))?;
    f.flush().map_err(|e| Error::io(&side, e))
}

pub fn read_matrix(csv_path: &Path) -> Result<FeatureMatrix> {
    let side = sidecar_path(csv_path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: side.clone(),
        line: e.line() as u64,
        reason: e.to_string(),
    })?;
    if sidecar.version != 1 {
        return Err(Error::Schema {
            path: side,
            line: 1,
            reason: format!("unsupported sidecar version {}", sidecar.version),
        });
    }
    let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let schema = |line: u64, reason: String| Error::Schema {
        path: csv_path.to_path_buf(),
        line,
        reason,
    };
    let headers = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
    let expected: Vec<&str> = LEAD_COLUMNS
        .iter()
        .copied()
        .chain(sidecar.columns.iter().map(|c| c.name.as_str()))
        .collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(schema(1, "header does not match the column sidecar".into()));
    }
    let (mut ids, mut labels, mut tags, mut values) = (vec![], vec![], vec![], vec![]);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        ids.push(rec[0].to_string());
        labels.push(match &rec[1] {
            "1" => true,
            "0" => false,
            other => return Err(schema(line, format!("label `{other}` is not 0/1"))),
        });
        tags.push(GroupTags {
            sex: rec[2].parse().map_err(|e: String| schema(line, e))?,
            ethnicity: rec[3].to_string(),
        });
        for (j, raw) in rec.iter().skip(LEAD_COLUMNS.len()).enumerate() {
            values.push(if raw.is_empty() {
                f64::NAN
            } else {
                raw.parse().map_err(|_| {
                    schema(line, format!("column `{}`: `{raw}` is not a number", sidecar.columns[j].name))
                })?
            });
        }
    }
    FeatureMatrix::new(ids, sidecar.columns, values, labels, tags)
}
